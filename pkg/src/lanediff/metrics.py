"""Driving metrics and training-curve helpers over episode logs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import Infraction

SUCCESS_RC_THRESHOLD = 90.0
MA_WINDOW = 50


@dataclass
class EpisodeLog:
    """Per-step record: (action bin, reward, infraction, progress_m)."""

    steps: list
    route_length_m: float
    seed: int

    def final_progress(self):
        return self.steps[-1][3] if self.steps else 0.0

    def infraction(self) -> Infraction:
        for _, _, inf, _ in self.steps:
            if inf is not Infraction.NONE:
                return inf
        return Infraction.NONE


@dataclass
class MetricsReport:
    success_rate_pct: float
    route_completion_pct: float
    infractions_per_km: float
    mean_episodic_return: float
    n_episodes: int

    CSV_COLUMNS = ("success_rate_pct", "route_completion_pct", "infractions_per_km",
                   "mean_episodic_return", "n_episodes")

    def row(self):
        return (self.success_rate_pct, self.route_completion_pct,
                self.infractions_per_km, self.mean_episodic_return, self.n_episodes)


def route_completion(log: EpisodeLog) -> float:
    """Percent of the route traversed, capped at 100."""
    if log.route_length_m <= 0:
        raise ValueError("route length must be positive")
    return min(100.0, 100.0 * log.final_progress() / log.route_length_m)


def success(log: EpisodeLog) -> bool:
    """At least 90% completion with zero infractions."""
    return route_completion(log) >= SUCCESS_RC_THRESHOLD and log.infraction() is Infraction.NONE


def infractions_per_km(logs) -> float:
    total_infractions = sum(1 for log in logs if log.infraction() is not Infraction.NONE)
    total_km = sum(log.final_progress() for log in logs) / 1000.0
    if total_km <= 0:
        raise ValueError("total distance must be positive")
    return total_infractions / total_km


def episodic_return(log: EpisodeLog) -> float:
    return float(sum(s[1] for s in log.steps))


def moving_average(series, window=MA_WINDOW):
    """Trailing mean; the first window-1 points average the available prefix."""
    if window < 1:
        raise ValueError("window must be >= 1")
    series = np.asarray(series, dtype=np.float64)
    out = np.empty_like(series)
    csum = np.cumsum(series)
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        out[i] = (csum[i] - (csum[lo - 1] if lo > 0 else 0.0)) / (i - lo + 1)
    return out


def aggregate(logs) -> MetricsReport:
    """Per-seed metrics averaged across seeds."""
    if not logs:
        raise ValueError("no episodes to aggregate")
    by_seed = {}
    for log in logs:
        by_seed.setdefault(log.seed, []).append(log)
    sr, rc, inf_km, ret = [], [], [], []
    for seed_logs in by_seed.values():
        sr.append(100.0 * np.mean([success(l) for l in seed_logs]))
        rc.append(np.mean([route_completion(l) for l in seed_logs]))
        inf_km.append(infractions_per_km(seed_logs))
        ret.append(np.mean([episodic_return(l) for l in seed_logs]))
    return MetricsReport(
        success_rate_pct=float(np.mean(sr)),
        route_completion_pct=float(np.mean(rc)),
        infractions_per_km=float(np.mean(inf_km)),
        mean_episodic_return=float(np.mean(ret)),
        n_episodes=len(logs),
    )


# ---- CSV emission -------------------------------------------------------------


def _fmt(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_episodes_csv(path, logs):
    rows = [
        (log.seed, i, route_completion(log), success(log), log.infraction().value,
         episodic_return(log))
        for i, log in enumerate(logs)
    ]
    write_csv(path, ("seed", "episode", "rc_pct", "success", "infraction", "return"), rows)


def write_curves_csv(path, returns, window=MA_WINDOW):
    ma = moving_average(returns, window)
    rows = [(i, r, m) for i, (r, m) in enumerate(zip(returns, ma))]
    write_csv(path, ("step", "return", "return_ma50"), rows)


def write_metrics_csv(path, report: MetricsReport):
    write_csv(path, MetricsReport.CSV_COLUMNS, [report.row()])
