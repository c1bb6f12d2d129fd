"""Single-stream evidence processes.

Builds the per-stream accumulators that the selection rules consume:
delayed e-processes, the Shiryaev-Roberts (SR) and CUSUM recursions over
them, and four concrete instantiations (Gaussian likelihood ratio,
sub-Gaussian mean, sign-based symmetry betting, and conformal rank
p-values through a p-to-e calibrator).

Detector values are stored in log space internally because the
multiplicative recursions grow exponentially once a change kicks in;
linear accessors saturate at ``LINEAR_CAP`` (the largest finite float).
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import RejectedConfiguration, RejectedInput

# Largest log value whose exp is still finite; linear accessors clamp here.
MAX_LOG = math.log(sys.float_info.max)
LINEAR_CAP = math.exp(MAX_LOG)


def to_linear(log_value: float):
    """Linear detector value, saturating at ``LINEAR_CAP``."""
    return np.exp(np.minimum(log_value, MAX_LOG))


def _log_or_neg_inf(value: float) -> float:
    return math.log(value) if value > 0.0 else -math.inf


# ---------------------------------------------------------------------------
# Evidence state and the two core recursions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvidenceState:
    """Running value of a per-stream e-detector.

    ``log_value`` is ``log M_t`` with ``-inf`` encoding ``M_t = 0``; ``t``
    counts observations consumed.  ``aux`` carries recursion-specific
    state for instantiations that need it.
    """

    log_value: float = -math.inf
    t: int = 0
    aux: object = None

    @property
    def detector_value(self) -> float:
        return float(to_linear(self.log_value))

    @classmethod
    def initial(cls) -> "EvidenceState":
        return cls()


def _check_increment(increment: float) -> float:
    inc = float(increment)
    if not math.isfinite(inc) or inc < 0.0:
        raise RejectedInput(f"increment must be finite and >= 0, got {increment}")
    return inc


def _sr_log_step(log_value: float, log_increment: float) -> float:
    return log_increment + np.logaddexp(log_value, 0.0)


def _cusum_log_step(log_value: float, log_increment: float) -> float:
    return log_increment + max(log_value, 0.0)


def sr_update(state: EvidenceState, increment: float) -> EvidenceState:
    """One Shiryaev-Roberts step: ``M' = increment * (M + 1)``.

    ``increment`` is the one-step e-process factor (e.g. a likelihood
    ratio) and must be nonnegative.
    """
    inc = _check_increment(increment)
    new_log = _sr_log_step(state.log_value, _log_or_neg_inf(inc))
    return EvidenceState(log_value=float(new_log), t=state.t + 1, aux=state.aux)


def cusum_update(state: EvidenceState, increment: float) -> EvidenceState:
    """One CUSUM step: ``M' = increment * max(M, 1)``."""
    inc = _check_increment(increment)
    new_log = _cusum_log_step(state.log_value, _log_or_neg_inf(inc))
    return EvidenceState(log_value=float(new_log), t=state.t + 1, aux=state.aux)


def conformal_sr_update(state: EvidenceState, e_factor: float) -> EvidenceState:
    """SR step driven by a calibrated conformal e-factor; same contract as
    :func:`sr_update`."""
    return sr_update(state, e_factor)


# ---------------------------------------------------------------------------
# Per-step factors for the concrete instantiations
# ---------------------------------------------------------------------------

def gaussian_lr_increment(x: float, delta: float) -> float:
    """Likelihood ratio of N(delta, 1) to N(-delta, 1) at ``x``.

    Algebraically ``exp(-((x - delta)^2 - (x + delta)^2) / 2) = exp(2 delta x)``.
    """
    if delta <= 0:
        raise RejectedInput(f"delta must be > 0, got {delta}")
    return float(to_linear(gaussian_log_increments(x, delta)))


def gaussian_log_increments(x, delta: float):
    return 2.0 * delta * np.asarray(x, dtype=np.float64)


def subgaussian_log_increments(x, lam: float, sigma: float):
    return lam * np.asarray(x, dtype=np.float64) - 0.5 * lam * lam * sigma * sigma


def subgaussian_sum_detector_update(
    state: EvidenceState, x: float, lam: float, sigma: float = 1.0
) -> EvidenceState:
    """SR step with the exponential sub-Gaussian factor
    ``exp(lam * x - lam^2 sigma^2 / 2)``.

    Running this recursion reproduces the explicit double sum
    ``sum_j exp(lam * sum_{s=j}^t x_s - lam^2 sigma^2 (t - j + 1) / 2)``.
    """
    if lam < 0:
        raise RejectedInput(f"lam must be >= 0, got {lam}")
    if sigma <= 0:
        raise RejectedInput(f"sigma must be > 0, got {sigma}")
    log_inc = float(subgaussian_log_increments(float(x), lam, sigma))
    new_log = _sr_log_step(state.log_value, log_inc)
    return EvidenceState(log_value=float(new_log), t=state.t + 1, aux=state.aux)


def sign_bet(lam: float) -> Callable[[float], float]:
    """Built-in odd betting function ``h(x) = lam * sign(x) * 1{x != 0}``."""
    if not -1.0 <= lam <= 1.0:
        raise RejectedConfiguration(f"sign bet size must lie in [-1, 1], got {lam}")

    def h(x: float) -> float:
        return lam * float(np.sign(x))

    return h


def symmetry_eprocess_update(value: float, x: float, h: Callable[[float], float]) -> float:
    """Multiplicative symmetry-betting step ``value * (1 + h(x))``.

    ``h`` must be odd with ``|h| <= 1``; the bound is checked on every
    observed input and a violating ``h`` is rejected.
    """
    if value < 0:
        raise RejectedInput(f"e-process value must be >= 0, got {value}")
    hx = float(h(float(x)))
    if not math.isfinite(hx) or abs(hx) > 1.0:
        raise RejectedConfiguration(
            f"betting function returned {hx} at x={x}; |h| <= 1 is required"
        )
    return value * (1.0 + hx)


def symmetry_log_increments(x, lam: float):
    if not -1.0 <= lam <= 1.0:
        raise RejectedConfiguration(f"sign bet size must lie in [-1, 1], got {lam}")
    with np.errstate(divide="ignore"):
        return np.log1p(lam * np.sign(np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Conformal layer: nonconformity scores, p-values, p-to-e calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NonconformitySpec:
    """Permutation-equivariant scoring of a history of observations.

    ``scorer`` maps the full history ``(x_1..x_n)`` to n scores; the
    ordering of scores must follow any permutation of the inputs.
    """

    scorer: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"
    permutation_equivariant: bool = True

    def scores(self, history: np.ndarray) -> np.ndarray:
        out = np.asarray(self.scorer(history), dtype=np.float64)
        if out.shape != history.shape:
            raise RejectedConfiguration(
                f"nonconformity scorer returned shape {out.shape} "
                f"for history of shape {history.shape}"
            )
        return out


def _centered_last_scores(history: np.ndarray) -> np.ndarray:
    # Sequential sum keeps the arithmetic aligned with the streaming kernels.
    total = 0.0
    for v in history:
        total += float(v)
    return history - total / len(history)


def centered_last_score() -> NonconformitySpec:
    """Scores ``x_i - mean(x_1..x_n)``: the deviation of each point from
    the running mean, tuned to flag upward mean shifts."""
    return NonconformitySpec(scorer=_centered_last_scores, name="centered-last")


def conformal_pvalue(
    history: Sequence[float], score: NonconformitySpec, theta: float
) -> float:
    """Randomized conformal p-value of the latest observation.

    With scores ``a_1..a_n`` over the full history,

        p = (#{a_t > a_n} + theta * #{a_t = a_n}) / n

    where the tie count includes the latest point itself.  ``theta`` is
    the uniform tie-breaking draw and is injectable for reproducibility.
    """
    hist = np.asarray(history, dtype=np.float64)
    if hist.ndim != 1 or hist.size == 0:
        raise RejectedInput("history must be a nonempty 1-d sequence")
    if not 0.0 <= theta <= 1.0:
        raise RejectedInput(f"theta must lie in [0, 1], got {theta}")
    scores = score.scores(hist)
    last = scores[-1]
    above = int(np.sum(scores > last))
    ties = int(np.sum(scores == last))
    return (above + theta * ties) / hist.size


@dataclass(frozen=True)
class CalibratorSpec:
    """A p-to-e calibrator: a function on [0, 1] integrating to at most 1.

    The built-in power family is ``f(z) = kappa * z^(kappa - 1)`` whose
    integral is exactly 1; custom evaluators are checked numerically at
    construction.
    """

    kappa: Optional[float] = None
    evaluator: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if (self.kappa is None) == (self.evaluator is None):
            raise RejectedConfiguration(
                "provide exactly one of kappa (power family) or evaluator"
            )
        if self.kappa is not None and not 0.0 < self.kappa < 1.0:
            raise RejectedConfiguration(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.evaluator is not None and self.integral() > 1.0 + 1e-6:
            raise RejectedConfiguration(
                "calibrator integral over [0, 1] exceeds 1"
            )

    def integral(self) -> float:
        """Numeric (or, for the power family, exact) integral over [0, 1]."""
        if self.kappa is not None:
            return 1.0  # antiderivative z^kappa evaluates to 1 - 0
        from scipy.integrate import quad

        value, _ = quad(self.evaluator, 0.0, 1.0)
        return float(value)

    def evaluate(self, p: float) -> float:
        if self.kappa is not None:
            return float(to_linear(conformal_log_factors(p, self.kappa)))
        return float(self.evaluator(p))


def power_calibrator(kappa: float = 0.5) -> CalibratorSpec:
    return CalibratorSpec(kappa=kappa)


def calibrate_p_to_e(p: float, spec: CalibratorSpec) -> float:
    """Convert a p-value to an e-factor via ``spec``.

    ``p = 0`` cannot occur with a positive tie-breaking draw but is mapped
    to the saturation cap defensively.
    """
    if not 0.0 <= p <= 1.0:
        raise RejectedInput(f"p must lie in [0, 1], got {p}")
    if p == 0.0:
        return LINEAR_CAP
    return spec.evaluate(p)


def conformal_log_factors(p, kappa: float):
    """Log e-factors ``log(kappa) + (kappa - 1) log p``; ``p = 0`` saturates."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = math.log(kappa) + (kappa - 1.0) * np.log(p)
    return np.minimum(out, MAX_LOG)


# ---------------------------------------------------------------------------
# Delayed e-processes and the explicit (sum / max) detector constructions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DelayEProcess:
    """An e-process pinned at 1 before its start time ``j``.

    ``values[t]`` holds the process value at time ``t`` (``values[0]`` is
    the t = 0 convention value, 1).
    """

    start: int
    values: np.ndarray

    def __post_init__(self):
        if self.start < 1:
            raise RejectedConfiguration(f"start time must be >= 1, got {self.start}")
        vals = np.asarray(self.values, dtype=np.float64)
        if np.any(vals < 0):
            raise RejectedConfiguration("delay e-process values must be >= 0")
        if np.any(vals[: min(self.start, len(vals))] != 1.0):
            raise RejectedConfiguration(
                f"a {self.start}-delay e-process must equal 1 before time {self.start}"
            )
        object.__setattr__(self, "values", vals)

    def value_at(self, t: int) -> float:
        if t < self.start:
            return 1.0
        return float(self.values[t])


def materialize_delay_processes(factors: Sequence[float], through: Optional[int] = None):
    """Multiplicative delay processes from per-step factors.

    ``factors[s - 1]`` is the factor applied at time ``s``; delay ``j``
    accumulates ``prod_{s=j}^t factors[s - 1]``.  This is the explicit
    construction the SR/CUSUM recursions compress, kept as the slow
    reference route.
    """
    factors = [float(f) for f in factors]
    horizon = len(factors) if through is None else through
    delays = []
    for j in range(1, horizon + 1):
        vals = np.ones(horizon + 1)
        running = 1.0
        for t in range(j, horizon + 1):
            running *= factors[t - 1]
            vals[t] = running
        delays.append(DelayEProcess(start=j, values=vals))
    return delays


@dataclass(frozen=True)
class WeightSequence:
    """Nonnegative start-time weights summing to at most 1.

    Analytic families are valid by identity (harmonic telescoping:
    ``sum 1/(t(t+1)) = 1``; geometric: ``(1-r) sum r^(t-1) = 1``); finite
    tables are validated by exact summation.
    """

    kind: str
    table: Optional[tuple] = None
    param: Optional[float] = None

    def __post_init__(self):
        if self.kind == "table":
            if self.table is None:
                raise RejectedConfiguration("table weights require a table")
            tab = tuple(float(w) for w in self.table)
            if any(w < 0 for w in tab):
                raise RejectedConfiguration("weights must be nonnegative")
            if math.fsum(tab) > 1.0:
                raise RejectedConfiguration(
                    f"finite weight table must sum to <= 1, got {math.fsum(tab)}"
                )
            object.__setattr__(self, "table", tab)
        elif self.kind == "geometric":
            if self.param is None or not 0.0 < self.param < 1.0:
                raise RejectedConfiguration("geometric weights need ratio in (0, 1)")
        elif self.kind == "uniform":
            if self.param is None or int(self.param) < 1:
                raise RejectedConfiguration("uniform weights need a horizon >= 1")
        elif self.kind != "harmonic":
            raise RejectedConfiguration(f"unknown weight family {self.kind!r}")

    @classmethod
    def harmonic(cls) -> "WeightSequence":
        return cls(kind="harmonic")

    @classmethod
    def geometric(cls, ratio: float) -> "WeightSequence":
        return cls(kind="geometric", param=ratio)

    @classmethod
    def uniform(cls, n: int) -> "WeightSequence":
        return cls(kind="uniform", param=n)

    @classmethod
    def from_table(cls, weights: Sequence[float]) -> "WeightSequence":
        return cls(kind="table", table=tuple(weights))

    def weight(self, t: int) -> float:
        if t < 1:
            raise RejectedInput(f"weights are indexed from 1, got {t}")
        if self.kind == "harmonic":
            return 1.0 / (t * (t + 1.0))
        if self.kind == "geometric":
            r = self.param
            return (1.0 - r) * r ** (t - 1)
        if self.kind == "uniform":
            n = int(self.param)
            return 1.0 / n if t <= n else 0.0
        return self.table[t - 1] if t <= len(self.table) else 0.0

    def log_weights(self, horizon: int) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(np.array([self.weight(t) for t in range(1, horizon + 1)]))


def weighted_sr_eprocess(
    delays: Sequence[DelayEProcess], weights: WeightSequence, t: int
) -> float:
    """Weighted sum ``sum_{j<=t} gamma_j Lambda_t^(j)`` over delay processes."""
    if t < 0:
        raise RejectedInput(f"t must be >= 0, got {t}")
    by_start = {d.start: d for d in delays}
    total = 0.0
    for j in range(1, t + 1):
        if j not in by_start:
            raise RejectedInput(f"no delay process with start {j} materialized")
        total += weights.weight(j) * by_start[j].value_at(t)
    return total


def cusum_from_delays(delays: Sequence[DelayEProcess], t: int) -> float:
    """Max over materialized delay processes, ``max_{1<=j<=t} Lambda_t^(j)``;
    0 at t = 0 by the starting convention."""
    if t < 0:
        raise RejectedInput(f"t must be >= 0, got {t}")
    if t == 0:
        return 0.0
    by_start = {d.start: d for d in delays}
    values = []
    for j in range(1, t + 1):
        if j not in by_start:
            raise RejectedInput(f"no delay process with start {j} materialized")
        values.append(by_start[j].value_at(t))
    return max(values)


# ---------------------------------------------------------------------------
# Streaming detectors (constant memory unless noted)
# ---------------------------------------------------------------------------

class RecursiveDetector:
    """Base for detectors driven by a per-observation log factor.

    ``mode`` selects the SR (sum-style) or CUSUM (max-style) recursion.
    Memory is constant in the number of observations.
    """

    def __init__(self, mode: str = "sr"):
        if mode not in ("sr", "cusum"):
            raise RejectedConfiguration(f"mode must be 'sr' or 'cusum', got {mode!r}")
        self.mode = mode
        self.log_value = -math.inf
        self.t = 0

    def _log_increment(self, x: float) -> float:
        raise NotImplementedError

    def update(self, x: float) -> float:
        log_inc = self._log_increment(float(x))
        if self.mode == "sr":
            self.log_value = float(_sr_log_step(self.log_value, log_inc))
        else:
            self.log_value = float(_cusum_log_step(self.log_value, log_inc))
        self.t += 1
        return self.value

    @property
    def value(self) -> float:
        return float(to_linear(self.log_value))

    @property
    def state(self) -> EvidenceState:
        return EvidenceState(log_value=self.log_value, t=self.t)


class GaussianMeanShiftDetector(RecursiveDetector):
    """Known-margin Gaussian mean-change detector (likelihood ratio factors)."""

    def __init__(self, delta: float = 1.0, mode: str = "sr"):
        super().__init__(mode)
        if delta <= 0:
            raise RejectedConfiguration(f"delta must be > 0, got {delta}")
        self.delta = float(delta)

    def _log_increment(self, x: float) -> float:
        return float(gaussian_log_increments(x, self.delta))


class SubGaussianMeanDetector(RecursiveDetector):
    """Exponential sub-Gaussian mean detector with fixed bet ``lam``."""

    def __init__(self, lam: float = 0.5, sigma: float = 1.0, mode: str = "sr"):
        super().__init__(mode)
        if lam < 0:
            raise RejectedConfiguration(f"lam must be >= 0, got {lam}")
        if sigma <= 0:
            raise RejectedConfiguration(f"sigma must be > 0, got {sigma}")
        self.lam = float(lam)
        self.sigma = float(sigma)

    def _log_increment(self, x: float) -> float:
        return float(subgaussian_log_increments(x, self.lam, self.sigma))


class SymmetryDetector(RecursiveDetector):
    """Sign-betting symmetry detector with multiplicative factors
    ``1 + lam * sign(x)``."""

    def __init__(self, lam: float = 0.5, mode: str = "sr"):
        super().__init__(mode)
        if not -1.0 <= lam <= 1.0:
            raise RejectedConfiguration(f"lam must lie in [-1, 1], got {lam}")
        self.lam = float(lam)

    def _log_increment(self, x: float) -> float:
        return float(symmetry_log_increments(x, self.lam))


class ConformalDetector(RecursiveDetector):
    """Exchangeability detector: conformal rank p-values fed through a
    p-to-e calibrator.

    Keeps the full observation history for the rank computation, so
    memory grows linearly with the number of observations (unlike the
    other detectors here).
    """

    def __init__(
        self,
        kappa: float = 0.5,
        score: Optional[NonconformitySpec] = None,
        rng: Optional[np.random.Generator] = None,
        mode: str = "sr",
    ):
        super().__init__(mode)
        self.calibrator = power_calibrator(kappa)
        self.score = score if score is not None else centered_last_score()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.history: list[float] = []
        self.last_pvalue: Optional[float] = None

    def update(self, x: float, theta: Optional[float] = None) -> float:
        self.history.append(float(x))
        if theta is None:
            theta = float(self.rng.random())
        p = conformal_pvalue(self.history, self.score, theta)
        self.last_pvalue = p
        e_factor = calibrate_p_to_e(p, self.calibrator)
        log_inc = _log_or_neg_inf(e_factor)
        if self.mode == "sr":
            self.log_value = float(_sr_log_step(self.log_value, log_inc))
        else:
            self.log_value = float(_cusum_log_step(self.log_value, log_inc))
        self.t += 1
        return self.value


class AdditiveSignDetector:
    """Additive sign-betting detector (opt-in variant).

    WARNING: each delay process evolves as ``L <- max(0, L + lam * sign(x))``,
    a walk reflected at zero.  Clipping keeps values nonnegative but
    breaks the supermartingale property, so this detector does NOT carry
    the ``E[M_tau] <= E[tau]`` validity guarantee of the multiplicative
    default (:class:`SymmetryDetector`).  Use it only when reproducing
    the linear-growth behaviour; memory grows linearly with time.
    """

    def __init__(self, lam: float = 1.0, mode: str = "sr"):
        if mode not in ("sr", "cusum"):
            raise RejectedConfiguration(f"mode must be 'sr' or 'cusum', got {mode!r}")
        if not -1.0 <= lam <= 1.0:
            raise RejectedConfiguration(f"lam must lie in [-1, 1], got {lam}")
        self.mode = mode
        self.lam = float(lam)
        self.t = 0
        self._delays = np.empty(0)

    def update(self, x: float) -> float:
        self._delays = np.append(self._delays, 1.0)
        step = self.lam * float(np.sign(x))
        np.maximum(self._delays + step, 0.0, out=self._delays)
        self.t += 1
        return self.value

    @property
    def value(self) -> float:
        if self.t == 0:
            return 0.0
        if self.mode == "sr":
            return float(self._delays.sum())
        return float(self._delays.max())

    @property
    def log_value(self) -> float:
        return _log_or_neg_inf(self.value)


def sr_path_from_log_increments(log_increments, log_weights=None):
    """Batch SR trajectories; see ``edetect._kernels.sr_path_log``."""
    return _kernels.sr_path_log(log_increments, log_weights)


def cusum_path_from_log_increments(log_increments):
    """Batch CUSUM trajectories; see ``edetect._kernels.cusum_path_log``."""
    return _kernels.cusum_path_log(log_increments)
