"""Driving Score, closed-loop score, the binomial DS model, and benchmark reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

# Per-kind DS penalty factors. Not published per kind; collision factors follow
# the leaderboard convention, everything else uses the 0.65 median.
DEFAULT_PENALTIES = {
    "collision_pedestrian": 0.50,
    "collision_vehicle": 0.60,
    "collision_static": 0.65,
    "collision": 0.60,
    "run_red_light": 0.70,
    "run_stop_sign": 0.80,
    "off_road": 0.65,
    "route_deviation": 0.65,
    "blocked": 0.70,
    "min_speed": 0.70,
}

CLS_MULTIPLIERS = ("no_at_fault_collisions", "drivable_area", "driving_direction", "making_progress")
CLS_WEIGHTED = ("ttc", "progress", "speed_limit", "comfort")
CLS_WEIGHTS = {"ttc": 5.0, "progress": 5.0, "speed_limit": 4.0, "comfort": 2.0}


@dataclass
class EpisodeResult:
    rc: float
    infractions: dict = field(default_factory=dict)
    route_km: float = 0.0
    duration_s: float = 0.0
    mean_speed: float = 0.0
    penalty_factors: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.rc <= 100.0 + 1e-9:
            raise ValueError(f"route completion {self.rc} outside [0, 100]")
        if any(c < 0 for c in self.infractions.values()):
            raise ValueError("infraction counts must be non-negative")

    @classmethod
    def from_episode(cls, ep: dict) -> "EpisodeResult":
        """Build from the ``info['episode']`` record of an environment."""
        counts = {}
        term = ep.get("terminal")
        if term == "collision":
            counts[f"collision_{ep.get('collision_with') or 'vehicle'}"] = 1
        elif term:
            counts[term] = 1
        if ep.get("min_speed_infractions"):
            counts["min_speed"] = ep["min_speed_infractions"]
        return cls(min(100.0, ep["rc"]), counts, ep.get("route_km", 0.0), ep.get("duration_s", 0.0), ep.get("mean_speed", 0.0))


def driving_score(res: EpisodeResult, penalty_table: Optional[dict] = None) -> float:
    """RC times the product of per-infraction factors."""
    table = DEFAULT_PENALTIES if penalty_table is None else penalty_table
    factor = 1.0
    applied = {}
    for kind, count in res.infractions.items():
        if count == 0:
            continue
        if kind not in table:
            raise KeyError(f"no penalty factor for infraction kind {kind!r}")
        p = table[kind]
        if not 0.0 < p <= 1.0:
            raise ValueError(f"penalty factor for {kind} must lie in (0, 1]")
        factor *= p**count
        applied[kind] = p
    res.penalty_factors = applied
    return res.rc * factor


@dataclass
class ClsInput:
    multipliers: dict
    weighted: dict
    weights: dict = field(default_factory=lambda: dict(CLS_WEIGHTS))

    def __post_init__(self):
        for k, v in self.multipliers.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"multiplier {k}={v} outside [0, 1]")
        for k, v in self.weighted.items():
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"weighted score {k}={v} outside [0, 100]")
            if self.weights.get(k, 0) <= 0:
                raise ValueError(f"weight for {k} must be positive")


def cls(inp: ClsInput) -> float:
    """Product of multipliers times the weighted average of the soft scores."""
    m = 1.0
    for v in inp.multipliers.values():
        m *= v
    total_w = sum(inp.weights[k] for k in inp.weighted)
    avg = sum(inp.weights[k] * v for k, v in inp.weighted.items()) / total_w
    return m * avg


def expected_ds(n_scenarios: int, success_rate: float, penalty: float) -> tuple[float, float]:
    """Closed-form mean DS and mean infraction count for independent scenario failures.

    Each of ``n`` scenarios fails with probability ``1 - s`` and each failure
    multiplies the score by ``p``: E[100 p^X] = 100 (s + (1 - s) p)^n.
    """
    _check_rates(success_rate, penalty)
    return 100.0 * (success_rate + (1.0 - success_rate) * penalty) ** n_scenarios, n_scenarios * (1.0 - success_rate)


def monte_carlo_ds(n: int, s: float, p: float, trials: int, rng: np.random.Generator) -> tuple[float, float]:
    """Empirical mean DS and infraction count over ``trials`` simulated routes."""
    _check_rates(s, p)
    if trials < 1:
        raise ValueError("trials must be at least 1")
    x = rng.binomial(n, 1.0 - s, size=trials)
    ds = 100.0 * np.power(p, x)
    return float(ds.mean()), float(x.mean())


def _check_rates(s: float, p: float) -> None:
    if not (0.0 <= s <= 1.0 and 0.0 <= p <= 1.0):
        raise ValueError("success rate and penalty must lie in [0, 1]")


def min_speed_fraction(speeds: Sequence[float], window: int = 50, ratio: float = 0.5) -> float:
    """Fraction of steps slower than ``ratio`` times the rolling mean of the preceding ``window`` steps.

    A reconstruction of the min-speed statistic; steps with a zero reference
    are not counted.
    """
    v = np.asarray(speeds, float)
    if len(v) <= 1:
        return 0.0
    c = np.concatenate([[0.0], np.cumsum(v)])
    slow = 0
    counted = 0
    for t in range(1, len(v)):
        lo = max(0, t - window)
        ref = (c[t] - c[lo]) / (t - lo)
        if ref <= 0:
            continue
        counted += 1
        slow += v[t] < ratio * ref
    return slow / counted if counted else 0.0


def per_km(results: Sequence[EpisodeResult], prefix: str) -> float:
    km = sum(r.route_km * r.rc / 100.0 for r in results)
    n = sum(c for r in results for k, c in r.infractions.items() if k.startswith(prefix))
    return n / km if km > 0 else 0.0


def write_report(out_dir: str | Path, rows: Sequence[dict], penalty_table: Optional[dict] = None) -> dict:
    """Per-route CSV plus an aggregate JSON summary (mean and std over repeats)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = ["route", "repeat", "seed", "ds", "cls", "rc", "terminal", "route_km", "duration_s", "mean_speed"]
    with open(out / "routes.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    ds = np.array([r["ds"] for r in rows], float)
    rc = np.array([r["rc"] for r in rows], float)
    repeats = sorted({r["repeat"] for r in rows})
    per_repeat = [float(np.mean([r["ds"] for r in rows if r["repeat"] == k])) for k in repeats]
    per_repeat_rc = [float(np.mean([r["rc"] for r in rows if r["repeat"] == k])) for k in repeats]
    summary = {
        "routes": len({r["route"] for r in rows}),
        "repeats": len(repeats),
        "ds_mean": float(ds.mean()) if len(ds) else 0.0,
        "ds_std_over_repeats": float(np.std(per_repeat)) if per_repeat else 0.0,
        "rc_mean": float(rc.mean()) if len(rc) else 0.0,
        "cls_mean": float(np.mean([r["cls"] for r in rows])) if rows and "cls" in rows[0] else None,
        "collisions_per_km": per_km([EpisodeResult(r["rc"], r.get("infractions", {}), r.get("route_km", 0.0)) for r in rows], "collision"),
        "rc_std_over_repeats": float(np.std(per_repeat_rc)) if per_repeat_rc else 0.0,
        "terminals": {k: sum(1 for r in rows if (r.get("terminal") or "none") == k) for k in sorted({r.get("terminal") or "none" for r in rows})},
        "penalty_table": penalty_table or DEFAULT_PENALTIES,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def episode_cls(ep: dict) -> float:
    """Approximate CLS of one simulated episode.

    Hard multipliers come from the terminal infraction, the weighted scores from
    the per-step soft-infraction counts: TTC and comfort are binary per episode,
    speed-limit compliance is the fraction of steps under the limit and progress
    is route completion.
    """
    term = ep.get("terminal")
    soft = ep.get("infractions", {})
    length = max(1, ep.get("length", 1))
    mult = {
        "no_at_fault_collisions": 0.0 if term == "collision" else 1.0,
        "drivable_area": 0.0 if term == "off_road" else 1.0,
        "driving_direction": 0.0 if soft.get("outside_lanes", 0) > 0.5 * length else 1.0,
        "making_progress": 1.0 if ep.get("rc", 0.0) >= 20.0 else 0.0,
    }
    weighted = {
        "ttc": 0.0 if soft.get("ttc", 0) else 100.0,
        "progress": float(min(100.0, max(0.0, ep.get("rc", 0.0)))),
        "speed_limit": 100.0 * (1.0 - min(1.0, soft.get("speeding", 0) / length)),
        "comfort": 0.0 if soft.get("comfort", 0) else 100.0,
    }
    return cls(ClsInput(mult, weighted))
