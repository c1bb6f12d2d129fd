"""Error metrics over detection histories and change configurations.

Scalar functions evaluate one history at one time; the ``*_series``
helpers evaluate whole ``(reps, T, K)`` stacks for the Monte Carlo
runner.  Times are 1-based throughout (row ``i`` of a decision array is
time ``t = i + 1``).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import RejectedConfiguration, RejectedInput

INF = math.inf


# ---------------------------------------------------------------------------
# Configurations and histories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChangeConfiguration:
    """True per-stream changepoints; ``inf`` means the stream never changes."""

    changepoints: tuple

    def __post_init__(self):
        cps = []
        for xi in self.changepoints:
            if xi is None or xi == INF:
                cps.append(INF)
            else:
                xi_int = int(xi)
                if xi_int != xi or xi_int <= 1:
                    raise RejectedConfiguration(
                        f"changepoints must be integers > 1 or inf, got {xi}"
                    )
                cps.append(xi_int)
        if not cps:
            raise RejectedConfiguration("need at least one stream")
        object.__setattr__(self, "changepoints", tuple(cps))

    @classmethod
    def global_null(cls, streams: int) -> "ChangeConfiguration":
        return cls(changepoints=(INF,) * streams)

    @classmethod
    def single_wave(cls, streams: int, changed: Sequence[int], at: int) -> "ChangeConfiguration":
        cps = [INF] * streams
        for k in changed:
            cps[k] = at
        return cls(changepoints=tuple(cps))

    @property
    def streams(self) -> int:
        return len(self.changepoints)

    @property
    def is_global_null(self) -> bool:
        return all(xi == INF for xi in self.changepoints)

    def null_set(self, t: int) -> tuple:
        """Streams with no change by time t (``xi > t``)."""
        return tuple(k for k, xi in enumerate(self.changepoints) if xi > t)

    def null_mask(self, horizon: int) -> np.ndarray:
        """(T, K) boolean mask of ``xi^(k) > t`` with row i at time i + 1."""
        t = np.arange(1, horizon + 1)[:, None]
        xi = np.array(self.changepoints)[None, :]
        return xi > t

    def changed_mask(self, horizon: int) -> np.ndarray:
        """(T, K) boolean mask of streams changed by time t (``xi <= t``)."""
        return ~self.null_mask(horizon)


@dataclass(frozen=True)
class DetectionHistory:
    """Time-indexed decisions of one replication.

    ``decisions`` is (T, K) boolean for per-stream rules or (T,) boolean
    for a global-null-testing rule.
    """

    decisions: np.ndarray
    rule: str = ""

    def __post_init__(self):
        dec = np.asarray(self.decisions, dtype=bool)
        if dec.ndim not in (1, 2):
            raise RejectedInput("decisions must be a (T, K) or (T,) boolean array")
        object.__setattr__(self, "decisions", dec)

    @property
    def horizon(self) -> int:
        return self.decisions.shape[0]

    @property
    def streams(self) -> int:
        if self.decisions.ndim == 1:
            raise RejectedInput("a global history has no per-stream decisions")
        return self.decisions.shape[1]

    def decisions_at(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.horizon:
            raise RejectedInput(f"t must lie in [1, {self.horizon}], got {t}")
        return self.decisions[t - 1]


def _check_time(history: DetectionHistory, t: int) -> None:
    if not 1 <= t <= history.horizon:
        raise RejectedInput(f"t must lie in [1, {history.horizon}], got {t}")


# ---------------------------------------------------------------------------
# Pointwise metrics
# ---------------------------------------------------------------------------

def fdp_at(history: DetectionHistory, xi: ChangeConfiguration, t: int) -> float:
    """False detection proportion at time t: false flags over all flags
    (0 when nothing is flagged)."""
    _check_time(history, t)
    dec = history.decisions_at(t)
    null = np.array([cp > t for cp in xi.changepoints])
    total = int(dec.sum())
    false = int((dec & null).sum())
    return false / max(total, 1)


def pfer_at(history: DetectionHistory, xi: ChangeConfiguration, t: int) -> int:
    """Number of false detections at time t (one replication's count;
    the Monte Carlo aggregator takes the expectation)."""
    _check_time(history, t)
    dec = history.decisions_at(t)
    null = np.array([cp > t for cp in xi.changepoints])
    return int((dec & null).sum())


def fwer_indicator_at(history: DetectionHistory, xi: ChangeConfiguration, t: int) -> bool:
    """Whether at least one false detection is flagged at time t."""
    return pfer_at(history, xi, t) >= 1


def ger_indicator_at(global_history, xi: ChangeConfiguration, t: int) -> bool:
    """Whether a global declaration at time t is a false alarm (fires
    while no stream has changed yet)."""
    flags = np.asarray(global_history, dtype=bool)
    if not 1 <= t <= flags.shape[0]:
        raise RejectedInput(f"t must lie in [1, {flags.shape[0]}], got {t}")
    all_null = all(cp > t for cp in xi.changepoints)
    return bool(flags[t - 1]) and all_null


def ccd_at(history: DetectionHistory, xi: ChangeConfiguration, t: int) -> float:
    """Fraction of changed streams correctly flagged at time t
    (0 before any change has happened)."""
    _check_time(history, t)
    dec = history.decisions_at(t)
    changed = np.array([cp < t + 1 for cp in xi.changepoints])
    return int((dec & changed).sum()) / max(int(changed.sum()), 1)


def tau_star(
    history: DetectionHistory,
    eta: int = 1,
    xi: Optional[ChangeConfiguration] = None,
    false_only: bool = False,
):
    """First time at least ``eta`` streams are flagged (``inf`` if never).

    With ``false_only`` only flags on streams not yet changed count, so a
    configuration must be supplied.
    """
    if history.decisions.ndim == 1:
        counts = history.decisions.astype(np.int64)
        streams = 1
    else:
        streams = history.streams
        if false_only:
            if xi is None:
                raise RejectedInput("false_only requires a configuration")
            counts = (history.decisions & xi.null_mask(history.horizon)).sum(axis=1)
        else:
            counts = history.decisions.sum(axis=1)
    if not 1 <= eta <= streams:
        raise RejectedInput(f"eta must lie in [1, {streams}], got {eta}")
    hits = counts >= eta
    if not hits.any():
        return INF
    return int(hits.argmax()) + 1


# ---------------------------------------------------------------------------
# Vectorized series over (reps, T, K) stacks
# ---------------------------------------------------------------------------

def fdp_series(decisions: np.ndarray, xi: ChangeConfiguration) -> np.ndarray:
    """(reps, T) false detection proportions."""
    null = xi.null_mask(decisions.shape[1])
    total = decisions.sum(axis=2)
    false = (decisions & null).sum(axis=2)
    return false / np.maximum(total, 1)


def pfer_series(decisions: np.ndarray, xi: ChangeConfiguration) -> np.ndarray:
    """(reps, T) false detection counts."""
    return (decisions & xi.null_mask(decisions.shape[1])).sum(axis=2)


def fwer_series(decisions: np.ndarray, xi: ChangeConfiguration) -> np.ndarray:
    """(reps, T) indicators of any false detection."""
    return pfer_series(decisions, xi) >= 1


def ccd_series(decisions: np.ndarray, xi: ChangeConfiguration) -> np.ndarray:
    """(reps, T) fractions of changed streams correctly flagged."""
    changed = xi.changed_mask(decisions.shape[1])
    hits = (decisions & changed).sum(axis=2)
    return hits / np.maximum(changed.sum(axis=1), 1)


def ger_series(global_decisions: np.ndarray, xi: ChangeConfiguration) -> np.ndarray:
    """(reps, T) indicators of a false global declaration."""
    horizon = global_decisions.shape[1]
    all_null = xi.null_mask(horizon).all(axis=1)
    return global_decisions & all_null


def tau_star_series(
    decisions: np.ndarray,
    eta: int = 1,
    xi: Optional[ChangeConfiguration] = None,
    false_only: bool = False,
) -> np.ndarray:
    """(reps,) first times to eta (false) detections, ``inf``-censored."""
    if decisions.ndim == 2:  # global rule: (reps, T)
        counts = decisions.astype(np.int64)
    elif false_only:
        if xi is None:
            raise RejectedInput("false_only requires a configuration")
        counts = (decisions & xi.null_mask(decisions.shape[1])).sum(axis=2)
    else:
        counts = decisions.sum(axis=2)
    hits = counts >= eta
    any_hit = hits.any(axis=1)
    tau = np.where(any_hit, hits.argmax(axis=1) + 1, np.inf)
    return tau


def values_at_taus(series: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Pick ``series[r, tau_r - 1]`` per replication; NaN where censored."""
    out = np.full(series.shape[0], np.nan)
    finite = np.isfinite(taus)
    idx = taus[finite].astype(np.int64) - 1
    out[finite] = series[finite, idx]
    return out


# ---------------------------------------------------------------------------
# Monte Carlo aggregation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """One Monte Carlo estimate with its uncertainty and censoring share."""

    metric: str
    rule: str
    t_or_stop: str
    estimate: float
    se: float
    reps: int
    censored_frac: float = 0.0
    lower_bound: bool = False
    details: dict = field(default_factory=dict)


def mc_mean(values: np.ndarray) -> tuple:
    """Mean and standard error of a per-replication sample."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n == 0:
        return math.nan, math.nan
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return mean, se


def summarize_at_fixed_t(
    metric: str, rule: str, series: np.ndarray, t: int
) -> MetricReport:
    mean, se = mc_mean(series[:, t - 1])
    return MetricReport(
        metric=metric, rule=rule, t_or_stop=f"t={t}",
        estimate=mean, se=se, reps=series.shape[0],
    )


def summarize_run_length(
    metric: str, rule: str, taus: np.ndarray, horizon: int, label: str
) -> MetricReport:
    """ARL-style summary: censored run lengths enter at the horizon, so
    the estimate is a lower bound whenever any replication is censored."""
    censored = ~np.isfinite(taus)
    capped = np.where(censored, horizon, taus)
    mean, se = mc_mean(capped)
    frac = float(censored.mean())
    return MetricReport(
        metric=metric, rule=rule, t_or_stop=label,
        estimate=mean, se=se, reps=taus.size,
        censored_frac=frac, lower_bound=frac > 0,
    )


def summarize_at_stop(
    metric: str, rule: str, series: np.ndarray, taus: np.ndarray, label: str
) -> MetricReport:
    """Metric at a stopping time, conditioned on stopping by the horizon."""
    at_tau = values_at_taus(series, taus)
    finite = at_tau[~np.isnan(at_tau)]
    mean, se = mc_mean(finite)
    return MetricReport(
        metric=metric, rule=rule, t_or_stop=label,
        estimate=mean, se=se, reps=finite.size,
        censored_frac=float(np.isnan(at_tau).mean()),
    )


def pfa_estimate(rule: str, decisions: np.ndarray, xi: ChangeConfiguration) -> MetricReport:
    """Share of replications with any false detection inside the horizon.

    A lower bound on the probability of ever raising a false alarm,
    since later alarms fall outside the horizon.
    """
    if decisions.ndim == 2:  # global rule: false alarm = firing while all-null
        false_dec = decisions & xi.null_mask(decisions.shape[1]).all(axis=1)
        taus = tau_star_series(false_dec, eta=1)
    else:
        taus = tau_star_series(decisions, eta=1, xi=xi, false_only=True)
    alarmed = np.isfinite(taus).astype(np.float64)
    mean, se = mc_mean(alarmed)
    return MetricReport(
        metric="pfa", rule=rule, t_or_stop="horizon",
        estimate=mean, se=se, reps=taus.size, lower_bound=True,
    )


def empirical_eop(reports: Sequence[MetricReport], patience: Sequence[float]) -> float:
    """Largest error-to-patience ratio over a family of stopping times.

    A lower bound on the definitional supremum over all stopping times,
    which is not computable; the family should include the extremal
    first-detection times.
    """
    if len(reports) != len(patience):
        raise RejectedInput("need one patience value per report")
    ratios = []
    for report, pat in zip(reports, patience):
        if not pat > 0:
            raise RejectedInput(f"patience must be > 0, got {pat}")
        if math.isnan(report.estimate):
            continue
        ratios.append(report.estimate / pat)
    return max(ratios, default=0.0)


def patience_sum(taus: np.ndarray, xi: ChangeConfiguration, horizon: int) -> float:
    """Sharper patience denominator ``(sum_k E[tau ^ (xi_k - 1)]) v 1``."""
    capped = np.where(np.isfinite(taus), taus, horizon)
    total = 0.0
    for cp in xi.changepoints:
        bound = cp - 1 if cp != INF else INF
        total += float(np.minimum(capped, bound).mean())
    return max(total, 1.0)


def monte_carlo_metric(
    config, metric: str, stopping=None,
    reps: Optional[int] = None, seed: Optional[int] = None,
) -> MetricReport:
    """Run an experiment config and pull out one metric summary.

    ``stopping`` is ``{"kind": "fixed", "t": int}`` or
    ``{"kind": "tau_star", "eta": int}``; run-length metrics (``arl``)
    take the tau_star form and ``pfa`` needs no stopping spec.
    """
    from . import simlab  # deferred: simlab builds on this module

    if reps is not None or seed is not None:
        config = simlab.replace_config(config, replications=reps, seed=seed)
    if config.replications < 2:
        raise RejectedInput("Monte Carlo summaries need at least 2 replications")
    result = simlab.run_experiment(config)
    label = _stopping_label(metric, stopping)
    for report in result.reports:
        if report.metric == metric and report.t_or_stop == label:
            return report
    raise RejectedInput(
        f"metric {metric!r} at {label!r} not produced by this experiment"
    )


def _stopping_label(metric: str, stopping) -> str:
    if metric == "pfa":
        return "horizon"
    if metric.startswith("eop"):
        return "family-max"
    if stopping is None:
        raise RejectedInput(f"metric {metric!r} needs a stopping spec")
    kind = stopping.get("kind")
    if kind == "fixed":
        return f"t={int(stopping['t'])}"
    if kind == "tau_star":
        eta = int(stopping.get("eta", 1))
        return f"eta={eta}" if metric == "arl" else f"tau{eta}"
    raise RejectedInput(f"unknown stopping kind {kind!r}")


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("metric", "rule", "t_or_stop", "estimate", "se", "reps", "censored_frac")


def write_reports_csv(reports: Sequence[MetricReport], path: str) -> None:
    """Write reports as CSV, atomically; float fields use repr for exact
    round-tripping."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([
                r.metric, r.rule, r.t_or_stop,
                repr(float(r.estimate)), repr(float(r.se)),
                r.reps, repr(float(r.censored_frac)),
            ])
    os.replace(tmp, path)
