"""Run configuration: defaults, structured-text parsing, echoing.

File format: one `key = value` assignment per line, `#` starts a
comment, blank lines ignored. Unknown keys are rejected by name; parse
failures report the line number. The obstacle list grows one entry per
`scenario.obstacle = x, y, length, width` line;
`scenario.obstacle_layout = random` switches back to seeded placement.

Key set (defaults in parentheses):

    H (9)  P (5)  T (50)           horizon, context, denoising steps
    seed (0)                       master seed
    schedule_kind (linear)         or cosine
    world_model_kind (oracle)      or learned
    iterations (200)               policy-training iterations
    episodes (10)                  evaluation episodes
    plan_stride (1)                actions executed per replan
    train_encoder (true)           policy gradients reach the encoder
    scenario.route_length_m (100)  scenario.lane_half_width_m (3)
    scenario.num_traffic (0)       scenario.ego_speed_kmh (7)
    scenario.traffic_speed_lo_kmh (1)  scenario.traffic_speed_hi_kmh (5)
    scenario.max_steps (0 = route+50)  scenario.raster_px (32)
    scenario.obstacle / scenario.obstacle_layout
    encoder.d_model (64)  encoder.n_layers (2)  encoder.n_heads (2)
    encoder.d_ff (128)    encoder.d_state (32)
    policy.width (32)  policy.d_cond (64)  policy.d_time (32)
    wm.d_joint (128)  wm.d_traj (32)  wm.d_head (64)  wm.traj_encoding (dft)
    trainer.clip_epsilon (0.2)  trainer.inner_epochs (1)
    trainer.batch_size (32)     trainer.lr (1e-4)
    trainer.reward_norm (batch_standardize)  trainer.gamma_base (0.99)
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from .ddpo import TrainerHyper
from .encoder import EncoderConfig
from .sim import KMH, ScenarioConfig
from .world_model import WorldModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    H: int = 9
    P: int = 5
    T: int = 50
    seed: int = 0
    schedule_kind: str = "linear"
    world_model_kind: str = "oracle"
    iterations: int = 200
    episodes: int = 10
    plan_stride: int = 1
    train_encoder: bool = True
    scenario: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    policy: dict = field(default_factory=lambda: {"width": 32, "d_cond": 64, "d_time": 32})
    wm: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)

    def validate(self):
        for key in ("H", "P", "T"):
            if getattr(self, key) < 1:
                raise ConfigError(f"invalid value for \"{key}\": must be >= 1")
        if self.schedule_kind not in ("linear", "cosine"):
            raise ConfigError('invalid value for "schedule_kind"')
        if self.world_model_kind not in ("oracle", "learned"):
            raise ConfigError('invalid value for "world_model_kind"')
        return self

    # ---- materialized sub-configs -------------------------------------

    def scenario_config(self) -> ScenarioConfig:
        s = dict(self.scenario)
        lo = s.pop("traffic_speed_lo_kmh", 1.0) * KMH
        hi = s.pop("traffic_speed_hi_kmh", 5.0) * KMH
        ego = s.pop("ego_speed_kmh", 7.0) * KMH
        s.setdefault("seed", self.seed)
        return ScenarioConfig(traffic_speed_range_mps=(lo, hi), ego_speed_mps=ego, **s)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(context_len=self.P, **self.encoder)

    def wm_config(self) -> WorldModelConfig:
        return WorldModelConfig(horizon=self.H, **self.wm)

    def trainer_hyper(self) -> TrainerHyper:
        return TrainerHyper(**self.trainer)

    def to_dict(self):
        return asdict(self)


_TOP_INT = {"H", "P", "T", "seed", "iterations", "episodes", "plan_stride"}
_TOP_STR = {"schedule_kind", "world_model_kind"}
_TOP_BOOL = {"train_encoder"}
_SECTION_FIELDS = {
    "scenario": {
        "route_length_m": float, "lane_half_width_m": float, "num_traffic": int,
        "ego_speed_kmh": float, "traffic_speed_lo_kmh": float,
        "traffic_speed_hi_kmh": float, "max_steps": int, "raster_px": int,
        "seed": int,
    },
    "encoder": {"d_model": int, "n_layers": int, "n_heads": int, "d_ff": int,
                "d_state": int},
    "policy": {"width": int, "d_cond": int, "d_time": int},
    "wm": {"d_joint": int, "d_traj": int, "d_head": int, "traj_encoding": str,
           "gamma_base": float},
    "trainer": {"clip_epsilon": float, "inner_epochs": int, "batch_size": int,
                "lr": float, "reward_norm": str, "gamma_base": float},
}


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_config_text(text) -> RunConfig:
    cfg = RunConfig()
    obstacles = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key in _TOP_INT:
                setattr(cfg, key, int(value))
            elif key in _TOP_STR:
                setattr(cfg, key, value)
            elif key in _TOP_BOOL:
                setattr(cfg, key, _parse_bool(value))
            elif key == "scenario.obstacle":
                parts = [float(v) for v in value.split(",")]
                if len(parts) != 4:
                    raise ValueError("obstacle needs 'x, y, length, width'")
                obstacles.append(tuple(parts))
            elif key == "scenario.obstacle_layout":
                if value != "random":
                    raise ValueError("only 'random' is accepted here; use scenario.obstacle lines")
                obstacles = None
            elif "." in key:
                section, name = key.split(".", 1)
                fields = _SECTION_FIELDS.get(section)
                if fields is None or name not in fields:
                    raise ConfigError(f"line {lineno}: unknown key \"{key}\"")
                getattr(cfg, section)[name] = fields[name](value)
            else:
                raise ConfigError(f"line {lineno}: unknown key \"{key}\"")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: invalid value for \"{key}\": {exc}") from exc
    if obstacles:
        cfg.scenario["obstacle_layout"] = obstacles
    return cfg.validate()


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def config_to_text(cfg: RunConfig) -> str:
    """Resolved configuration echo, parseable by parse_config_text."""
    lines = []
    for key in sorted(_TOP_INT | _TOP_STR | _TOP_BOOL):
        value = getattr(cfg, key)
        lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    for section in sorted(_SECTION_FIELDS):
        data = getattr(cfg, section)
        for name in sorted(_SECTION_FIELDS[section]):
            if name in data:
                lines.append(f"{section}.{name} = {data[name]}")
    for obs in cfg.scenario.get("obstacle_layout", []) if isinstance(
            cfg.scenario.get("obstacle_layout"), list) else []:
        lines.append("scenario.obstacle = " + ", ".join(format(v, "g") for v in obs))
    return "\n".join(lines) + "\n"
