"""Deterministic 2D highway environment.

The ego vehicle moves down a straight lane at constant forward speed
(1 m of progress per step) among slow constant-velocity traffic; the
policy only chooses the lateral offset applied each step. Episodes end
on collision, lane departure, route completion, or the step cap.
Observations are ego-centric single-channel rasters that deliberately
carry no velocity information, so a single frame underdetermines the
state.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

import numpy as np

N_ACTION_BINS = 11
ACTION_RANGE_M = 0.5          # lateral offsets span [-0.5, +0.5] m
EGO_LENGTH_M = 4.0
EGO_WIDTH_M = 1.8
REWARD_TICK_S = 0.05          # progress term of the reward uses v_ego * this tick
COLLISION_COST = 10.0
SURVIVAL_BONUS = 1.0
XI_COLLISION = 1.0
XI_LATERAL = 1.0
KMH = 1.0 / 3.6

LANE_MARK_THICKNESS_M = 0.3
LANE_MARK_INTENSITY = 0.5
EGO_MARK_INTENSITY = 0.7
TRAFFIC_INTENSITY = 1.0


class SimError(RuntimeError):
    pass


class Infraction(enum.Enum):
    NONE = "none"
    COLLISION = "collision"
    OUT_OF_LANE = "out_of_lane"


@dataclass
class ScenarioConfig:
    route_length_m: float = 100.0
    lane_half_width_m: float = 3.0
    num_traffic: int = 0
    traffic_speed_range_mps: tuple = (1.0 * KMH, 5.0 * KMH)
    ego_speed_mps: float = 7.0 * KMH
    obstacle_layout: object = "random"  # "random" or list of (x, y, length, width)
    seed: int = 0
    max_steps: int = 0  # 0 -> route_length + 50
    raster_px: int = 32
    raster_behind_m: float = 4.0
    raster_x_extent_m: float = 32.0
    raster_y_half_extent_m: float = 6.4

    def __post_init__(self):
        if self.route_length_m <= 0 or self.lane_half_width_m <= 0:
            raise ValueError("geometry must be positive")
        lo, hi = self.traffic_speed_range_mps
        if not 0 <= lo <= hi:
            raise ValueError("traffic speed range must satisfy 0 <= lo <= hi")
        if self.max_steps <= 0:
            self.max_steps = int(self.route_length_m) + 50


@dataclass
class SimState:
    ego_x_m: float
    ego_y_m: float
    traffic: np.ndarray  # (n, 5): x, y, speed, length, width
    step_index: int
    done: bool
    rng_state: dict
    infraction: Infraction = Infraction.NONE


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    infraction: Infraction
    progress_m: float


def action_value(bin_index: int) -> float:
    """Lateral offset in meters for one of the 11 uniformly spaced bins."""
    if not 0 <= bin_index <= N_ACTION_BINS - 1:
        raise ValueError(f"action bin {bin_index} outside [0, {N_ACTION_BINS - 1}]")
    return -ACTION_RANGE_M + bin_index * (2 * ACTION_RANGE_M / (N_ACTION_BINS - 1))


def nearest_bin(delta_y_m: float) -> int:
    """Closest action bin for a continuous lateral offset."""
    step = 2 * ACTION_RANGE_M / (N_ACTION_BINS - 1)
    idx = int(round((delta_y_m + ACTION_RANGE_M) / step))
    return min(max(idx, 0), N_ACTION_BINS - 1)


def reward(progress_m: float, collision: bool, delta_y_m: float) -> float:
    """Per-step reward: progress, minus collision and lateral-change penalties, plus a survival bonus."""
    if not np.isfinite(progress_m):
        raise ValueError("progress must be finite")
    crash = COLLISION_COST if collision else 0.0
    return progress_m - XI_COLLISION * abs(crash) - XI_LATERAL * abs(delta_y_m) + SURVIVAL_BONUS


def _boxes_overlap(x0, y0, l0, w0, x1, y1, l1, w1):
    return abs(x0 - x1) < (l0 + l1) / 2 and abs(y0 - y1) < (w0 + w1) / 2


def _axis_coverage(lo, hi, cell_edges):
    """Fraction of each cell [edges[i], edges[i+1]) covered by [lo, hi]."""
    left = np.maximum(cell_edges[:-1], lo)
    right = np.minimum(cell_edges[1:], hi)
    width = cell_edges[1] - cell_edges[0]
    return np.clip(right - left, 0.0, None) / width


class HighwaySim:
    """Owns a ScenarioConfig; states are plain data and may be cloned freely."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.dt_sim_s = 1.0 / config.ego_speed_mps  # one step = 1 m of ego progress

    # ---- lifecycle ----------------------------------------------------

    def reset(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        traffic = self._spawn_traffic(rng)
        state = SimState(
            ego_x_m=0.0,
            ego_y_m=0.0,
            traffic=traffic,
            step_index=0,
            done=False,
            rng_state=rng.bit_generator.state,
        )
        return state, self.observe(state)

    def _spawn_traffic(self, rng):
        cfg = self.config
        if cfg.obstacle_layout != "random":
            rows = []
            for x, y, length, width in cfg.obstacle_layout:
                rows.append((float(x), float(y), 0.0, float(length), float(width)))
            traffic = np.array(rows, dtype=np.float64).reshape(-1, 5)
        else:
            rows = []
            x_lo, x_hi = 15.0, max(cfg.route_length_m - 10.0, 16.0)
            length, width = 4.0, 1.8
            attempts = 0
            while len(rows) < cfg.num_traffic:
                attempts += 1
                if attempts > 1000:
                    raise SimError("infeasible traffic layout: could not place vehicles without overlap")
                x = rng.uniform(x_lo, x_hi)
                y_room = cfg.lane_half_width_m - width / 2
                y = rng.uniform(-y_room, y_room)
                speed = rng.uniform(*cfg.traffic_speed_range_mps)
                if any(_boxes_overlap(x, y, length + 2.0, width + 1.0, r[0], r[1], r[3], r[4])
                       for r in rows):
                    continue
                rows.append((x, y, speed, length, width))
            traffic = np.array(rows, dtype=np.float64).reshape(-1, 5)

        for x, y, _, length, width in traffic:
            if abs(y) + width / 2 > cfg.lane_half_width_m + 1e-9:
                raise SimError(f"traffic vehicle at y={y} does not fit within lane bounds")
        for i in range(len(traffic)):
            for j in range(i + 1, len(traffic)):
                a, b = traffic[i], traffic[j]
                if _boxes_overlap(a[0], a[1], a[3], a[4], b[0], b[1], b[3], b[4]):
                    raise SimError("infeasible traffic layout: overlapping spawns")
            if _boxes_overlap(traffic[i][0], traffic[i][1], traffic[i][3], traffic[i][4],
                              0.0, 0.0, EGO_LENGTH_M, EGO_WIDTH_M):
                raise SimError("infeasible traffic layout: vehicle overlaps the ego spawn")
        return traffic

    def clone_state(self, state: SimState) -> SimState:
        return SimState(
            ego_x_m=state.ego_x_m,
            ego_y_m=state.ego_y_m,
            traffic=state.traffic.copy(),
            step_index=state.step_index,
            done=state.done,
            rng_state=copy.deepcopy(state.rng_state),
            infraction=state.infraction,
        )

    # ---- dynamics ------------------------------------------------------

    def step(self, state: SimState, bin_index: int, render=True) -> StepOutcome:
        if state.done:
            raise SimError("step called on a finished episode")
        cfg = self.config
        delta_y = action_value(bin_index)

        state.ego_x_m += 1.0
        state.ego_y_m += delta_y
        if len(state.traffic):
            state.traffic[:, 0] += state.traffic[:, 2] * self.dt_sim_s

        collision = any(
            _boxes_overlap(state.ego_x_m, state.ego_y_m, EGO_LENGTH_M, EGO_WIDTH_M,
                           v[0], v[1], v[3], v[4])
            for v in state.traffic
        )
        out_of_lane = abs(state.ego_y_m) + EGO_WIDTH_M / 2 > cfg.lane_half_width_m

        if collision:
            infraction = Infraction.COLLISION
        elif out_of_lane:
            infraction = Infraction.OUT_OF_LANE
        else:
            infraction = Infraction.NONE

        state.step_index += 1
        route_done = state.ego_x_m >= cfg.route_length_m
        state.done = (
            infraction is not Infraction.NONE
            or route_done
            or state.step_index >= cfg.max_steps
        )
        state.infraction = infraction

        r = reward(cfg.ego_speed_mps * REWARD_TICK_S, collision, delta_y)
        progress = min(state.ego_x_m, cfg.route_length_m)
        obs = self.observe(state) if render else None
        return StepOutcome(
            observation=obs,
            reward=r,
            done=state.done,
            infraction=infraction,
            progress_m=progress,
        )

    # ---- rendering -----------------------------------------------------

    def observe(self, state: SimState) -> np.ndarray:
        """Ego-centric raster (1, px, px), rows = lateral axis, cols = forward axis."""
        cfg = self.config
        px = cfg.raster_px
        x0 = state.ego_x_m - cfg.raster_behind_m
        x_edges = np.linspace(x0, x0 + cfg.raster_x_extent_m, px + 1)
        y0 = state.ego_y_m - cfg.raster_y_half_extent_m
        y_edges = np.linspace(y0, y0 + 2 * cfg.raster_y_half_extent_m, px + 1)
        img = np.zeros((px, px), dtype=np.float32)

        def paint_box(cx, cy, length, width, intensity):
            cov_x = _axis_coverage(cx - length / 2, cx + length / 2, x_edges)
            cov_y = _axis_coverage(cy - width / 2, cy + width / 2, y_edges)
            np.maximum(img, intensity * np.outer(cov_y, cov_x), out=img)

        half = LANE_MARK_THICKNESS_M / 2
        for bound in (-cfg.lane_half_width_m, cfg.lane_half_width_m):
            cov_y = _axis_coverage(bound - half, bound + half, y_edges)
            np.maximum(img, LANE_MARK_INTENSITY * cov_y[:, None], out=img)

        paint_box(state.ego_x_m, state.ego_y_m, EGO_LENGTH_M, EGO_WIDTH_M, EGO_MARK_INTENSITY)
        for v in state.traffic:
            paint_box(v[0], v[1], v[3], v[4], TRAFFIC_INTENSITY)

        return np.clip(img, 0.0, 1.0)[None, :, :]
