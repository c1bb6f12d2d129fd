"""Per-timestep multi-stream selection rules.

Each rule maps the current vector of K detector values and a level to a
detection set.  The batch functions operate on ``(..., K)`` stacks and
are the single implementation; the ``*_step`` functions wrap them for
one timestep and carry the full input validation.

Tie handling: streams are ranked by (value desc, index asc).  Equal
values never straddle a selection boundary for any of these rules (a
tied value qualifying at rank k also qualifies at rank k + 1), so the
selected set is permutation-equivariant even with ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .errors import CalibrationError, RejectedConfiguration, RejectedInput

RULES = ("edbh", "edbonf", "edholm", "edgnt")


# ---------------------------------------------------------------------------
# Level schedules and threshold policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelSchedule:
    """Mapping from time to a testing level: constant, base/t, or a table."""

    kind: str
    base: Optional[float] = None
    table: Optional[Mapping[int, float]] = None

    def __post_init__(self):
        if self.kind in ("constant", "over-t"):
            if self.base is None or not self.base > 0:
                raise RejectedConfiguration(f"{self.kind} schedule needs base > 0")
        elif self.kind == "table":
            if not self.table:
                raise RejectedConfiguration("table schedule needs a nonempty table")
        else:
            raise RejectedConfiguration(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, level: float) -> "LevelSchedule":
        return cls(kind="constant", base=level)

    @classmethod
    def over_t(cls, base: float) -> "LevelSchedule":
        return cls(kind="over-t", base=base)

    @classmethod
    def from_table(cls, table: Mapping[int, float]) -> "LevelSchedule":
        return cls(kind="table", table=dict(table))

    def level_at(self, t: int) -> float:
        if t < 1:
            raise RejectedInput(f"schedules are indexed from t = 1, got {t}")
        if self.kind == "constant":
            return self.base
        if self.kind == "over-t":
            return self.base / t
        try:
            return self.table[t]
        except KeyError:
            raise RejectedConfiguration(f"level table has no entry for t = {t}")

    def levels(self, horizon: int) -> np.ndarray:
        return np.array([self.level_at(t) for t in range(1, horizon + 1)])


RECIPROCAL = "reciprocal"


@dataclass(frozen=True)
class ThresholdPolicy:
    """Detection threshold: the default ``1/level`` or an adaptive ``c``.

    An adaptive threshold must satisfy ``1 < c <= 1/level``; validated at
    use because the level may vary with t.
    """

    kind: str = RECIPROCAL
    c_alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind == RECIPROCAL:
            return
        if self.kind != "custom":
            raise RejectedConfiguration(f"unknown policy kind {self.kind!r}")
        if self.c_alpha is None or not self.c_alpha > 1.0:
            raise RejectedConfiguration(
                f"custom threshold must be > 1, got {self.c_alpha}"
            )

    @classmethod
    def reciprocal(cls) -> "ThresholdPolicy":
        return cls(kind=RECIPROCAL)

    @classmethod
    def custom(cls, c_alpha: float) -> "ThresholdPolicy":
        return cls(kind="custom", c_alpha=c_alpha)

    def check_against_level(self, level: float) -> None:
        if self.kind == "custom" and self.c_alpha > 1.0 / level:
            raise RejectedConfiguration(
                f"custom threshold {self.c_alpha} exceeds 1/level = {1.0 / level}"
            )


def apply_threshold_policy(step, policy: ThresholdPolicy):
    """Bind a threshold policy into a selection step.

    With the reciprocal policy the returned step is behaviourally
    identical to the original; a custom policy replaces ``1/level`` by
    ``c`` everywhere it appears as a threshold.
    """
    if not isinstance(policy, ThresholdPolicy):
        raise RejectedConfiguration("policy must be a ThresholdPolicy")

    def bound_step(values, level, t=None):
        return step(values, level, policy=policy, t=t)

    bound_step.__name__ = getattr(step, "__name__", "step")
    return bound_step


# ---------------------------------------------------------------------------
# Detection frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionFrame:
    """Decisions for all K streams at one timestep."""

    rule: str
    decisions: np.ndarray  # (K,) bool
    k_star: int
    selected: tuple  # ascending stream indices
    t: Optional[int] = None

    def __post_init__(self):
        if self.k_star != len(self.selected):
            raise RejectedInput("k_star must equal the number of selected streams")
        dec = np.asarray(self.decisions, dtype=bool)
        expected = np.zeros(dec.size, dtype=bool)
        expected[list(self.selected)] = True
        if not np.array_equal(dec, expected):
            raise RejectedInput("decisions must flag exactly the selected streams")
        object.__setattr__(self, "decisions", dec)


def _validate_values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise RejectedInput("values must be a 1-d vector with K >= 1 entries")
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise RejectedInput("detector values must be finite and >= 0")
    return v


def _check_unit_level(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise RejectedConfiguration(f"level must lie in (0, 1), got {level}")
    return float(level)


def _check_positive_level(level: float) -> float:
    if not level > 0.0:
        raise RejectedConfiguration(f"level must be > 0, got {level}")
    return float(level)


def _frame_from_batch(rule, values, decisions, k_star, t) -> DetectionFrame:
    selected = tuple(int(i) for i in np.flatnonzero(decisions))
    return DetectionFrame(
        rule=rule, decisions=decisions, k_star=int(k_star), selected=selected, t=t
    )


# ---------------------------------------------------------------------------
# Batch rule engines over (..., K) stacks
# ---------------------------------------------------------------------------

def _ranked(values: np.ndarray):
    order = np.argsort(-values, axis=-1, kind="stable")
    return order, np.take_along_axis(values, order, axis=-1)


def _scatter_top_k(order: np.ndarray, k_star: np.ndarray) -> np.ndarray:
    streams = order.shape[-1]
    in_top = np.arange(streams) < k_star[..., None]
    decisions = np.zeros(order.shape, dtype=bool)
    np.put_along_axis(decisions, order, in_top, axis=-1)
    return decisions


def edbh_batch(values, levels, policy: ThresholdPolicy = ThresholdPolicy()):
    """e-BH-style ladder: ``k* = max{k : M^[k] >= (K/k) / level}``, select
    the k* top-ranked streams."""
    v = np.asarray(values, dtype=np.float64)
    streams = v.shape[-1]
    lv = np.broadcast_to(np.asarray(levels, dtype=np.float64), v.shape[:-1])
    order, ranked = _ranked(v)
    ks = np.arange(1, streams + 1, dtype=np.float64)
    if policy.kind == RECIPROCAL:
        thresholds = streams / (ks * lv[..., None])
    else:
        thresholds = (streams / ks) * policy.c_alpha
    qualifies = ranked >= thresholds
    k_star = np.max(np.where(qualifies, ks.astype(np.int64), 0), axis=-1)
    return _scatter_top_k(order, k_star), k_star


def edbonf_batch(values, levels, policy: ThresholdPolicy = ThresholdPolicy()):
    """Fixed per-stream threshold ``K / level``."""
    v = np.asarray(values, dtype=np.float64)
    streams = v.shape[-1]
    lv = np.broadcast_to(np.asarray(levels, dtype=np.float64), v.shape[:-1])
    if policy.kind == RECIPROCAL:
        threshold = streams / lv
    else:
        threshold = np.broadcast_to(streams * policy.c_alpha, lv.shape)
    decisions = v >= threshold[..., None]
    return decisions, decisions.sum(axis=-1)


def edholm_batch(values, levels, policy: ThresholdPolicy = ThresholdPolicy()):
    """Step-down ladder: the prefix condition ``M^[i] / (K - i + 1) >= 1/level``
    must hold for every i up to k*."""
    v = np.asarray(values, dtype=np.float64)
    streams = v.shape[-1]
    lv = np.broadcast_to(np.asarray(levels, dtype=np.float64), v.shape[:-1])
    order, ranked = _ranked(v)
    denom = np.arange(streams, 0, -1, dtype=np.float64)  # K - i + 1
    if policy.kind == RECIPROCAL:
        cond = ranked / denom >= 1.0 / lv[..., None]
    else:
        cond = ranked / denom >= policy.c_alpha
    k_star = np.cumprod(cond, axis=-1).sum(axis=-1)
    return _scatter_top_k(order, k_star), k_star


def edgnt_batch(values, levels, policy: ThresholdPolicy = ThresholdPolicy()):
    """Global null test: fire when the summed evidence reaches ``K / level``."""
    v = np.asarray(values, dtype=np.float64)
    streams = v.shape[-1]
    lv = np.broadcast_to(np.asarray(levels, dtype=np.float64), v.shape[:-1])
    total = v.sum(axis=-1)
    if policy.kind == RECIPROCAL:
        return total >= streams / lv
    return total >= streams * policy.c_alpha


BATCH_RULES = {
    "edbh": edbh_batch,
    "edbonf": edbonf_batch,
    "edholm": edholm_batch,
}


# ---------------------------------------------------------------------------
# Single-timestep contract functions
# ---------------------------------------------------------------------------

def edbh_step(values, level, policy: ThresholdPolicy = ThresholdPolicy(), t=None):
    """One e-d-BH selection step.

    Looks for the largest k such that the k-th largest detector value
    clears ``K / (k * level)`` and flags those k streams.
    """
    v = _validate_values(values)
    lv = _check_unit_level(level)
    policy.check_against_level(lv)
    decisions, k_star = edbh_batch(v[None, :], lv, policy)
    return _frame_from_batch("edbh", v, decisions[0], k_star[0], t)


def edbonf_step(values, level, policy: ThresholdPolicy = ThresholdPolicy(), t=None):
    """One e-d-Bonferroni step: flag every stream with value >= K / level."""
    v = _validate_values(values)
    lv = _check_positive_level(level)
    decisions, k_star = edbonf_batch(v[None, :], lv, policy)
    return _frame_from_batch("edbonf", v, decisions[0], k_star[0], t)


def edholm_step(values, level, policy: ThresholdPolicy = ThresholdPolicy(), t=None):
    """One e-d-Holm step (step-down prefix ladder)."""
    v = _validate_values(values)
    lv = _check_unit_level(level)
    policy.check_against_level(lv)
    decisions, k_star = edholm_batch(v[None, :], lv, policy)
    return _frame_from_batch("edholm", v, decisions[0], k_star[0], t)


def edgnt_step(values, level, policy: ThresholdPolicy = ThresholdPolicy(), t=None) -> bool:
    """One global-null-testing step; True when a change is declared in
    some stream."""
    v = _validate_values(values)
    lv = _check_unit_level(level)
    policy.check_against_level(lv)
    return bool(edgnt_batch(v[None, :], lv, policy)[0])


# ---------------------------------------------------------------------------
# First-detection statistics and threshold calibration
# ---------------------------------------------------------------------------

def first_detection_statistic(rule: str, values) -> np.ndarray:
    """Scalar statistic whose crossing of a threshold c marks the first
    detection of ``rule`` run with the custom-threshold form.

    e-d-BH fires iff some rank k has ``M^[k] >= (K/k) c``, i.e.
    ``max_k k M^[k] / K >= c``; e-d-Bonferroni and e-d-Holm fire iff
    ``max_k M^(k) / K >= c``; e-d-GNT iff ``sum_k M^(k) / K >= c``; the
    naive per-stream rule iff ``max_k M^(k) >= c``.
    """
    v = np.asarray(values, dtype=np.float64)
    streams = v.shape[-1]
    if rule == "edbh":
        ranked = -np.sort(-v, axis=-1)
        ks = np.arange(1, streams + 1, dtype=np.float64)
        return np.max(ranked * ks, axis=-1) / streams
    if rule in ("edbonf", "edholm"):
        return v.max(axis=-1) / streams
    if rule == "edgnt":
        return v.sum(axis=-1) / streams
    if rule == "naive":
        return v.max(axis=-1)
    raise RejectedConfiguration(f"unknown rule {rule!r}")


@dataclass(frozen=True)
class CalibrationResult:
    policy: ThresholdPolicy
    achieved_arl: float
    censored_frac: float
    target_arl: float
    grid: tuple  # of (threshold, arl_estimate, censored_frac)


def calibrate_from_statistic(
    statistic_paths, target_arl: float, level: float, grid_points: int = 50
) -> CalibrationResult:
    """Grid-search the smallest threshold whose estimated ARL reaches the
    target.

    ``statistic_paths`` is a (reps, T) array of first-detection statistics
    under the null; run lengths are censored at the horizon, so the ARL
    estimates are lower bounds and the search is conservative.  The grid
    is log-spaced on ``(1, 1/level]`` and the ARL is nondecreasing in the
    threshold, so the smallest qualifying grid point is well defined.
    """
    stats = np.asarray(statistic_paths, dtype=np.float64)
    if stats.ndim != 2:
        raise RejectedInput("statistic_paths must be a (reps, T) array")
    reps, horizon = stats.shape
    if reps < 1:
        raise RejectedInput("need at least one replication")
    if horizon < target_arl:
        raise RejectedInput(
            f"horizon {horizon} is shorter than the target ARL {target_arl}"
        )
    _check_unit_level(level)
    grid = np.geomspace(1.0 + 1e-6, 1.0 / level, grid_points)

    running_max = np.maximum.accumulate(stats, axis=1)
    trace = []
    chosen = None
    for c in grid:
        crossed = running_max >= c
        tau = np.where(
            crossed.any(axis=1), crossed.argmax(axis=1) + 1, horizon
        ).astype(np.float64)
        censored = float(1.0 - crossed.any(axis=1).mean())
        arl = float(tau.mean())
        trace.append((float(c), arl, censored))
        if chosen is None and arl >= target_arl:
            chosen = trace[-1]
    if chosen is None:
        best_c, best_arl, _ = trace[-1]
        raise CalibrationError(
            f"no threshold on the grid reaches ARL {target_arl} "
            f"(best {best_arl:.2f} at threshold {best_c:.4g})",
            best_arl=best_arl,
            best_threshold=best_c,
        )
    c, arl, censored = chosen
    return CalibrationResult(
        policy=ThresholdPolicy.custom(c),
        achieved_arl=arl,
        censored_frac=censored,
        target_arl=float(target_arl),
        grid=tuple(trace),
    )


def calibrate_threshold(
    rule: str,
    null_generator,
    *,
    detector,
    level: float,
    target_arl: float,
    reps: int,
    horizon: int,
    seed: int,
    grid_points: int = 50,
) -> CalibrationResult:
    """Monte Carlo threshold calibration for a selection rule.

    Simulates detector trajectories under ``null_generator`` (a
    simlab ``StreamGeneratorSpec`` with no changepoints), reduces each
    timestep to its first-detection statistic, and grid-searches the
    smallest threshold achieving the target ARL.  Deterministic given
    the seed.
    """
    if reps < 1:
        raise RejectedInput(f"reps must be >= 1, got {reps}")
    if rule not in ("edbh", "edbonf", "edholm", "edgnt", "naive"):
        raise RejectedConfiguration(f"unknown rule {rule!r}")
    from . import simlab  # deferred: simlab depends on this module

    stats = simlab.null_statistic_paths(
        rule, null_generator, detector=detector, reps=reps, horizon=horizon, seed=seed
    )
    return calibrate_from_statistic(stats, target_arl, level, grid_points)
