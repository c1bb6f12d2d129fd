"""Data generators and the Monte Carlo experiment runner.

Randomness layout: every (replication, stream, purpose) triple owns an
independent counter-based substream keyed by
``SeedSequence([seed, rep, stream, purpose])``, and tick t consumes
exactly one uniform from it.  Batch generation and per-tick generation
therefore produce bit-identical data, and replications can run in any
order (serial or parallel) without changing results.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from . import _kernels, evidence, metrics, procedures
from .errors import ConfigError, RejectedConfiguration, RejectedInput
from .metrics import ChangeConfiguration, MetricReport
from .procedures import LevelSchedule

GENERATOR_FAMILIES = (
    "gaussian-mean-change",
    "symmetry-change",
    "exchangeability-break",
    "dependent-pair-sign",
    "dependent-pair-lagged",
)

DETECTOR_KINDS = (
    "gaussian-sr", "gaussian-cusum",
    "subgaussian-sr", "subgaussian-cusum",
    "symmetry-sr", "symmetry-cusum",
    "additive-sign-sr", "additive-sign-cusum",
    "conformal-sr", "conformal-cusum",
)

RULE_NAMES = ("edbh", "edbonf", "edholm", "edgnt", "naive")

_PURPOSE_DATA = 0
_PURPOSE_THETA = 1
_MIN_UNIFORM = 2.0 ** -54  # keeps ndtri finite on the measure-zero draw u == 0


# ---------------------------------------------------------------------------
# Stream generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StreamGeneratorSpec:
    """A family of pre/post-change stream laws plus the changepoints.

    Families:
      gaussian-mean-change   iid N(-delta, 1) switching to N(+delta, 1)
      symmetry-change        iid N(0, 1) switching to N(post_shift, 1)
      exchangeability-break  same laws as symmetry-change (paired with the
                             conformal detector, which only assumes
                             exchangeability before the change)
      dependent-pair-sign    even streams lead with N(0, 1); each odd
                             stream follows its left neighbour, drawing
                             N(0, 1) when the leader is <= 0 and standard
                             Cauchy otherwise
      dependent-pair-lagged  odd streams replay their leader one tick
                             ahead (X2_t = X1_{t+1}); breaks the
                             synchronized-streams requirement on purpose
                             and exists for the negative validity test
    """

    family: str
    changepoints: ChangeConfiguration
    delta: float = 1.0
    post_shift: float = 1.0

    def __post_init__(self):
        if self.family not in GENERATOR_FAMILIES:
            raise RejectedConfiguration(f"unknown generator family {self.family!r}")
        if self.family == "gaussian-mean-change" and self.delta < 0:
            raise RejectedConfiguration(f"delta must be >= 0, got {self.delta}")

    @property
    def streams(self) -> int:
        return self.changepoints.streams


class StreamSampler:
    """Deterministic per-replication sampler for one generator spec."""

    def __init__(self, spec: StreamGeneratorSpec, seed: int, rep: int = 0):
        self.spec = spec
        self.seed = int(seed)
        self.rep = int(rep)

    def _generator(self, stream: int, purpose: int) -> np.random.Generator:
        key = np.random.SeedSequence([self.seed, self.rep, stream, purpose])
        return np.random.Generator(np.random.PCG64(key))

    def _uniform_block(self, stream: int, count: int, purpose: int = _PURPOSE_DATA):
        return self._generator(stream, purpose).random(count)

    def _uniform_at(self, stream: int, t: int, purpose: int = _PURPOSE_DATA) -> float:
        gen = self._generator(stream, purpose)
        gen.bit_generator.advance(t - 1)
        return gen.random()

    def _shift(self, stream: int, times: np.ndarray) -> np.ndarray:
        xi = self.spec.changepoints.changepoints[stream]
        post = times >= xi
        if self.spec.family == "gaussian-mean-change":
            return np.where(post, self.spec.delta, -self.spec.delta)
        return np.where(post, self.spec.post_shift, 0.0)

    @staticmethod
    def _normal(u: np.ndarray) -> np.ndarray:
        return ndtri(np.maximum(u, _MIN_UNIFORM))

    @staticmethod
    def _cauchy(u: np.ndarray) -> np.ndarray:
        return np.tan(np.pi * (u - 0.5))

    def matrix(self, horizon: int) -> np.ndarray:
        """All K streams over times 1..horizon as a (T, K) array."""
        spec = self.spec
        streams = spec.streams
        times = np.arange(1, horizon + 1)
        x = np.empty((horizon, streams))
        if spec.family in ("gaussian-mean-change", "symmetry-change",
                           "exchangeability-break"):
            for k in range(streams):
                z = self._normal(self._uniform_block(k, horizon))
                x[:, k] = z + self._shift(k, times)
            return x
        if spec.family == "dependent-pair-sign":
            for k in range(0, streams, 2):
                z = self._normal(self._uniform_block(k, horizon))
                x[:, k] = z + self._shift(k, times)
            for k in range(1, streams, 2):
                u = self._uniform_block(k, horizon)
                base = np.where(x[:, k - 1] <= 0, self._normal(u), self._cauchy(u))
                x[:, k] = base + self._shift(k, times)
            return x
        # dependent-pair-lagged: leaders need one extra tick for followers
        extended = np.arange(1, horizon + 2)
        led = {}
        for k in range(0, streams, 2):
            z = self._normal(self._uniform_block(k, horizon + 1))
            emitted = z + self._shift(k, extended)
            led[k] = emitted
            x[:, k] = emitted[:horizon]
        for k in range(1, streams, 2):
            x[:, k] = led[k - 1][1:] + self._shift(k, times)
        return x

    def batch(self, t: int) -> np.ndarray:
        """The cross-section of all K streams at time t; bit-identical to
        row t - 1 of :meth:`matrix`."""
        spec = self.spec
        streams = spec.streams
        time = np.array([t])
        out = np.empty(streams)
        if spec.family in ("gaussian-mean-change", "symmetry-change",
                           "exchangeability-break"):
            for k in range(streams):
                z = self._normal(np.array([self._uniform_at(k, t)]))
                out[k] = z[0] + self._shift(k, time)[0]
            return out
        if spec.family == "dependent-pair-sign":
            for k in range(0, streams, 2):
                z = self._normal(np.array([self._uniform_at(k, t)]))
                out[k] = z[0] + self._shift(k, time)[0]
            for k in range(1, streams, 2):
                u = np.array([self._uniform_at(k, t)])
                base = self._normal(u) if out[k - 1] <= 0 else self._cauchy(u)
                out[k] = base[0] + self._shift(k, time)[0]
            return out
        for k in range(0, streams, 2):
            z = self._normal(np.array([self._uniform_at(k, t)]))
            out[k] = z[0] + self._shift(k, time)[0]
        for k in range(1, streams, 2):
            z = self._normal(np.array([self._uniform_at(k - 1, t + 1)]))
            leader_next = z[0] + self._shift(k - 1, np.array([t + 1]))[0]
            out[k] = leader_next + self._shift(k, time)[0]
        return out

    def theta_matrix(self, horizon: int) -> np.ndarray:
        """(T, K) tie-breaking uniforms for the conformal detector."""
        out = np.empty((horizon, self.spec.streams))
        for k in range(self.spec.streams):
            out[:, k] = self._uniform_block(k, horizon, purpose=_PURPOSE_THETA)
        return out


def generate_batch(spec: StreamGeneratorSpec, t: int, rng: StreamSampler) -> np.ndarray:
    """One synchronized cross-section at time t from a seeded sampler."""
    if rng.spec is not spec and rng.spec != spec:
        raise RejectedInput("sampler was built for a different generator spec")
    if t < 1:
        raise RejectedInput(f"t must be >= 1, got {t}")
    return rng.batch(t)


# ---------------------------------------------------------------------------
# Detector specs and batch trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorSpec:
    """Which evidence recursion to run per stream, with its parameters."""

    kind: str
    delta: float = 1.0
    lam: float = 0.5
    sigma: float = 1.0
    kappa: float = 0.5
    weights: Optional[evidence.WeightSequence] = None

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise RejectedConfiguration(f"unknown detector kind {self.kind!r}")
        base, mode = self.kind.rsplit("-", 1)
        if base == "gaussian" and self.delta <= 0:
            raise RejectedConfiguration(f"delta must be > 0, got {self.delta}")
        if base == "subgaussian" and (self.lam < 0 or self.sigma <= 0):
            raise RejectedConfiguration("need lam >= 0 and sigma > 0")
        if base in ("symmetry", "additive-sign") and not -1 <= self.lam <= 1:
            raise RejectedConfiguration(f"lam must lie in [-1, 1], got {self.lam}")
        if base == "conformal" and not 0 < self.kappa < 1:
            raise RejectedConfiguration(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.weights is not None and mode != "sr":
            raise RejectedConfiguration("start-time weights only apply to SR kinds")

    @property
    def base(self) -> str:
        return self.kind.rsplit("-", 1)[0]

    @property
    def mode(self) -> str:
        return self.kind.rsplit("-", 1)[1]

    @property
    def needs_theta(self) -> bool:
        return self.base == "conformal"


def detector_paths(det: DetectorSpec, x_tm: np.ndarray,
                   thetas_tm: Optional[np.ndarray] = None) -> np.ndarray:
    """Linear detector trajectories for a time-major (T, n) data block."""
    x_tm = np.asarray(x_tm, dtype=np.float64)
    horizon = x_tm.shape[0]
    base, mode = det.base, det.mode
    if base == "additive-sign":
        return _kernels.additive_sign_sr_path(x_tm, det.lam, use_max=mode == "cusum")
    if base == "gaussian":
        log_inc = evidence.gaussian_log_increments(x_tm, det.delta)
    elif base == "subgaussian":
        log_inc = evidence.subgaussian_log_increments(x_tm, det.lam, det.sigma)
    elif base == "symmetry":
        log_inc = evidence.symmetry_log_increments(x_tm, det.lam)
    else:  # conformal
        if thetas_tm is None:
            raise RejectedInput("conformal trajectories need tie-breaking uniforms")
        pvals = _kernels.conformal_pvalues(x_tm, thetas_tm)
        log_inc = evidence.conformal_log_factors(pvals, det.kappa)
    if mode == "cusum":
        log_path = _kernels.cusum_path_log(log_inc)
    else:
        log_weights = None
        if det.weights is not None:
            log_weights = det.weights.log_weights(horizon)
        log_path = _kernels.sr_path_log(log_inc, log_weights)
    return evidence.to_linear(log_path)


def make_streaming_detector(det: DetectorSpec,
                            rng: Optional[np.random.Generator] = None):
    """Stateful per-stream detector matching :func:`detector_paths`."""
    base, mode = det.base, det.mode
    if base == "gaussian":
        return evidence.GaussianMeanShiftDetector(det.delta, mode=mode)
    if base == "subgaussian":
        return evidence.SubGaussianMeanDetector(det.lam, det.sigma, mode=mode)
    if base == "symmetry":
        return evidence.SymmetryDetector(det.lam, mode=mode)
    if base == "additive-sign":
        return evidence.AdditiveSignDetector(det.lam, mode=mode)
    return evidence.ConformalDetector(det.kappa, rng=rng, mode=mode)


# ---------------------------------------------------------------------------
# Rules (including the naive per-stream baseline)
# ---------------------------------------------------------------------------

def naive_batch(values, levels, policy=procedures.ThresholdPolicy()):
    """Per-stream thresholding at 1/level, ignoring multiplicity."""
    v = np.asarray(values, dtype=np.float64)
    lv = np.broadcast_to(np.asarray(levels, dtype=np.float64), v.shape[:-1])
    if policy.kind == procedures.RECIPROCAL:
        threshold = 1.0 / lv
    else:
        threshold = np.broadcast_to(policy.c_alpha, lv.shape)
    decisions = v >= threshold[..., None]
    return decisions, decisions.sum(axis=-1)


def naive_baseline_step(values, level,
                        policy=procedures.ThresholdPolicy(), t=None):
    """One step of the naive baseline: flag stream k iff its detector
    value reaches 1/level."""
    v = procedures._validate_values(values)
    lv = procedures._check_unit_level(level)
    decisions, k_star = naive_batch(v[None, :], lv, policy)
    return procedures._frame_from_batch("naive", v, decisions[0], k_star[0], t)


@dataclass(frozen=True)
class RuleSpec:
    """A selection rule plus its level schedule and threshold policy."""

    name: str
    schedule: LevelSchedule
    policy: procedures.ThresholdPolicy = procedures.ThresholdPolicy()
    label: str = ""

    def __post_init__(self):
        if self.name not in RULE_NAMES:
            raise RejectedConfiguration(f"unknown rule {self.name!r}")
        first = self.schedule.level_at(1)
        if self.name == "edbonf":
            if first <= 0:
                raise RejectedConfiguration("e-d-Bonferroni levels must be > 0")
        elif not 0 < first < 1:
            raise RejectedConfiguration(
                f"{self.name} levels must lie in (0, 1); got {first} at t = 1"
            )
        if not self.label:
            object.__setattr__(self, "label", self.name)

    @property
    def is_global(self) -> bool:
        return self.name == "edgnt"


_BATCH_ENGINES = {
    "edbh": procedures.edbh_batch,
    "edbonf": procedures.edbonf_batch,
    "edholm": procedures.edholm_batch,
    "naive": naive_batch,
}


def apply_rule(rule: RuleSpec, values: np.ndarray) -> np.ndarray:
    """Decisions over a (..., T, K) stack of detector values."""
    horizon = values.shape[-2]
    levels = rule.schedule.levels(horizon)
    if rule.is_global:
        return procedures.edgnt_batch(values, levels, rule.policy)
    decisions, _ = _BATCH_ENGINES[rule.name](values, levels, rule.policy)
    return decisions


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

_POINTWISE = ("fdr", "pfer", "fwer", "ccd")
_EOP_FLAVORS = {
    "edbh": ("fdr",),
    "edbonf": ("pfer", "fwer"),
    "edholm": ("fwer",),
    "naive": ("fdr",),
    "edgnt": ("ger",),
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    generator: StreamGeneratorSpec
    detector: DetectorSpec
    rules: tuple
    horizon: int
    replications: int
    seed: int
    metrics: tuple = ()
    persist_data: bool = False
    log_frames: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon", f"must be >= 1, got {self.horizon}")
        if self.replications < 1:
            raise ConfigError("replications", f"must be >= 1, got {self.replications}")
        if not self.rules:
            raise ConfigError("rules", "need at least one rule")
        labels = [r.label for r in self.rules]
        if len(set(labels)) != len(labels):
            raise ConfigError("rules", f"duplicate rule labels: {labels}")
        requested = tuple(self.metrics)
        for m in requested:
            if not any(m in self._applicable(rule) for rule in self.rules):
                raise ConfigError(
                    "metrics", f"{m!r} is not defined for any configured rule"
                )
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "metrics", requested)

    @staticmethod
    def _applicable(rule: RuleSpec) -> tuple:
        return ("ger",) if rule.is_global else _POINTWISE

    def metrics_for(self, rule: RuleSpec) -> tuple:
        """Requested metrics applicable to this rule; rule defaults when
        no explicit request is made."""
        applicable = self._applicable(rule)
        if not self.metrics:
            return applicable
        return tuple(m for m in self.metrics if m in applicable)

    @property
    def streams(self) -> int:
        return self.generator.streams


def replace_config(config: ExperimentConfig, replications=None, seed=None,
                   **overrides) -> ExperimentConfig:
    changes = dict(overrides)
    if replications is not None:
        changes["replications"] = replications
    if seed is not None:
        changes["seed"] = seed
    return replace(config, **changes)


# -- JSON-dict parsing -------------------------------------------------------

def _parse_changepoints(raw, streams: int) -> ChangeConfiguration:
    if raw is None:
        return ChangeConfiguration.global_null(streams)
    if isinstance(raw, dict):
        raw = [raw]
    if isinstance(raw, list) and raw and isinstance(raw[0], dict):
        cps = [math.inf] * streams
        for wave in raw:
            try:
                at = int(wave["at"])
                members = [int(k) for k in wave["streams"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError("generator.changepoints", f"bad wave spec: {exc}")
            for k in members:
                if not 0 <= k < streams:
                    raise ConfigError(
                        "generator.changepoints", f"stream index {k} out of range"
                    )
                cps[k] = at
        return ChangeConfiguration(tuple(cps))
    if isinstance(raw, list):
        if len(raw) != streams:
            raise ConfigError(
                "generator.changepoints",
                f"need one entry per stream ({streams}), got {len(raw)}",
            )
        return ChangeConfiguration(tuple(math.inf if v is None else v for v in raw))
    raise ConfigError("generator.changepoints", f"unsupported form {type(raw).__name__}")


def _parse_schedule(raw) -> LevelSchedule:
    try:
        kind = raw["kind"]
    except (KeyError, TypeError):
        raise ConfigError("rules.schedule", "needs a 'kind'")
    if kind == "table":
        table = {int(t): float(v) for t, v in raw.get("table", {}).items()}
        return LevelSchedule.from_table(table)
    try:
        base = float(raw["base"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError("rules.schedule", f"{kind} schedule needs a numeric 'base'")
    if kind == "constant":
        return LevelSchedule.constant(base)
    if kind == "over-t":
        return LevelSchedule.over_t(base)
    raise ConfigError("rules.schedule", f"unknown kind {kind!r}")


def _parse_policy(raw) -> procedures.ThresholdPolicy:
    if raw is None:
        return procedures.ThresholdPolicy()
    kind = raw.get("kind", "custom")
    if kind == "reciprocal":
        return procedures.ThresholdPolicy()
    try:
        return procedures.ThresholdPolicy.custom(float(raw["c_alpha"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("rules.policy", f"bad custom policy: {exc}")


def _parse_weights(raw) -> Optional[evidence.WeightSequence]:
    if raw is None:
        return None
    if raw == "harmonic":
        return evidence.WeightSequence.harmonic()
    if isinstance(raw, dict) and raw.get("kind") == "geometric":
        return evidence.WeightSequence.geometric(float(raw["ratio"]))
    if isinstance(raw, dict) and raw.get("kind") == "uniform":
        return evidence.WeightSequence.uniform(int(raw["n"]))
    if isinstance(raw, list):
        return evidence.WeightSequence.from_table(raw)
    raise ConfigError("detector.weights", f"unsupported weights {raw!r}")


def parse_config(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a plain dict (the JSON schema),
    raising field-named ConfigErrors."""
    def need(field_name, caster=None):
        if field_name not in raw:
            raise ConfigError(field_name, "required")
        value = raw[field_name]
        if caster is not None:
            try:
                return caster(value)
            except (TypeError, ValueError):
                raise ConfigError(field_name, f"expected {caster.__name__}, got {value!r}")
        return value

    streams = need("streams", int)
    if streams < 1:
        raise ConfigError("streams", f"must be >= 1, got {streams}")
    horizon = need("horizon", int)
    replications = need("replications", int)
    if "seed" in raw:
        seed = need("seed", int)
    elif os.environ.get("EDETECT_SEED"):
        seed = int(os.environ["EDETECT_SEED"])
    else:
        raise ConfigError("seed", "required (or set EDETECT_SEED)")

    gen_raw = need("generator")
    try:
        generator = StreamGeneratorSpec(
            family=gen_raw.get("family", ""),
            changepoints=_parse_changepoints(gen_raw.get("changepoints"), streams),
            delta=float(gen_raw.get("delta", 1.0)),
            post_shift=float(gen_raw.get("post_shift", 1.0)),
        )
    except ConfigError:
        raise
    except RejectedConfiguration as exc:
        raise ConfigError("generator", str(exc))

    det_raw = need("detector")
    try:
        detector = DetectorSpec(
            kind=det_raw.get("kind", ""),
            delta=float(det_raw.get("delta", 1.0)),
            lam=float(det_raw.get("lam", 0.5)),
            sigma=float(det_raw.get("sigma", 1.0)),
            kappa=float(det_raw.get("kappa", 0.5)),
            weights=_parse_weights(det_raw.get("weights")),
        )
    except ConfigError:
        raise
    except RejectedConfiguration as exc:
        raise ConfigError("detector", str(exc))

    rules_raw = raw.get("rules") or ([raw["rule"]] if "rule" in raw else None)
    if not rules_raw:
        raise ConfigError("rules", "required")
    rules = []
    for entry in rules_raw:
        try:
            rules.append(RuleSpec(
                name=entry.get("name", ""),
                schedule=_parse_schedule(entry.get("schedule")),
                policy=_parse_policy(entry.get("policy")),
                label=entry.get("label", ""),
            ))
        except RejectedConfiguration as exc:
            raise ConfigError("rules", str(exc))

    return ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        generator=generator,
        detector=detector,
        rules=tuple(rules),
        horizon=horizon,
        replications=replications,
        seed=seed,
        metrics=tuple(raw.get("metrics", ())),
        persist_data=bool(raw.get("persist_data", False)),
        log_frames=bool(raw.get("log_frames", False)),
    )


# ---------------------------------------------------------------------------
# The runner
# ---------------------------------------------------------------------------

_BLOCK_ELEMENTS = 4_000_000  # ~32 MB of float64 per (B, T, K) working array


def _block_size(streams: int, horizon: int) -> int:
    return max(1, _BLOCK_ELEMENTS // max(streams * horizon, 1))


def _block_starts(replications: int, block: int):
    return [(start, min(block, replications - start))
            for start in range(0, replications, block)]


def _simulate_block(config: ExperimentConfig, rep_start: int, count: int) -> dict:
    """Data -> detector values -> decisions for one block of replications."""
    horizon, streams = config.horizon, config.streams
    x = np.empty((count, horizon, streams))
    thetas = None
    if config.detector.needs_theta:
        thetas = np.empty_like(x)
    for i in range(count):
        sampler = StreamSampler(config.generator, config.seed, rep_start + i)
        x[i] = sampler.matrix(horizon)
        if thetas is not None:
            thetas[i] = sampler.theta_matrix(horizon)

    x_tm = np.ascontiguousarray(x.transpose(1, 0, 2).reshape(horizon, count * streams))
    th_tm = None
    if thetas is not None:
        th_tm = np.ascontiguousarray(
            thetas.transpose(1, 0, 2).reshape(horizon, count * streams))
    values_tm = detector_paths(config.detector, x_tm, th_tm)
    values = values_tm.reshape(horizon, count, streams).transpose(1, 0, 2)

    decisions = {rule.label: apply_rule(rule, values) for rule in config.rules}
    out = {"start": rep_start, "decisions": decisions}
    if config.persist_data:
        out["data"] = x
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list
    histories: dict  # rule label -> (R, T, K) or (R, T) boolean decisions
    data: Optional[np.ndarray] = None

    def detection_history(self, label: str, rep: int) -> metrics.DetectionHistory:
        return metrics.DetectionHistory(self.histories[label][rep], rule=label)


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Run all replications and aggregate the requested metrics.

    Replications are processed in fixed-size blocks; the block layout
    depends only on the config, so serial and parallel execution produce
    identical results.
    """
    blocks = _block_starts(config.replications, _block_size(config.streams, config.horizon))
    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_simulate_block, config, start, count)
                       for start, count in blocks]
            results = [f.result() for f in futures]
    else:
        results = [_simulate_block(config, start, count) for start, count in blocks]
    results.sort(key=lambda r: r["start"])

    histories = {
        rule.label: np.concatenate([r["decisions"][rule.label] for r in results])
        for rule in config.rules
    }
    data = None
    if config.persist_data:
        data = np.concatenate([r["data"] for r in results])

    xi = config.generator.changepoints
    reports = []
    for rule in config.rules:
        reports.extend(_reports_for_rule(config, rule, histories[rule.label], xi))
    return ExperimentResult(config=config, reports=reports, histories=histories, data=data)


def _stop_family(streams: int, horizon: int):
    etas = sorted({1, max(1, math.ceil(streams / 2)), streams})
    fixed = sorted({t for t in (10, 100, horizon) if 1 <= t <= horizon})
    return etas, fixed


def _reports_for_rule(config: ExperimentConfig, rule: RuleSpec,
                      decisions: np.ndarray, xi: ChangeConfiguration) -> list:
    horizon = config.horizon
    streams = config.streams
    requested = config.metrics_for(rule)
    reports: list[MetricReport] = []

    if rule.is_global:
        series_by_name = {"ger": metrics.ger_series(decisions, xi).astype(np.float64)}
        false_dec = decisions & xi.null_mask(horizon).all(axis=1)
        taus_false = {1: metrics.tau_star_series(false_dec, eta=1)}
        taus_all = {1: metrics.tau_star_series(decisions, eta=1)}
        etas = [1]
    else:
        builders = {
            "fdr": lambda: metrics.fdp_series(decisions, xi),
            "pfer": lambda: metrics.pfer_series(decisions, xi).astype(np.float64),
            "fwer": lambda: metrics.fwer_series(decisions, xi).astype(np.float64),
            "ccd": lambda: metrics.ccd_series(decisions, xi),
        }
        series_by_name = {m: builders[m]() for m in requested}
        etas, _ = _stop_family(streams, horizon)
        taus_all = {eta: metrics.tau_star_series(decisions, eta=eta) for eta in etas}
        taus_false = {eta: metrics.tau_star_series(decisions, eta=eta, xi=xi,
                                                   false_only=True) for eta in etas}

    for name, series in series_by_name.items():
        for t in range(1, horizon + 1):
            reports.append(metrics.summarize_at_fixed_t(name, rule.label, series, t))

    for eta in etas:
        reports.append(metrics.summarize_run_length(
            "arl", rule.label, taus_false[eta], horizon, f"eta={eta}"))
        for name, series in series_by_name.items():
            reports.append(metrics.summarize_at_stop(
                name, rule.label, series, taus_all[eta], f"tau{eta}"))

    reports.append(metrics.pfa_estimate(rule.label, decisions, xi))
    reports.extend(_eop_reports(config, rule, series_by_name, taus_all, xi))
    return reports


def _eop_reports(config, rule, series_by_name, taus_all, xi) -> list:
    horizon = config.horizon
    streams = config.streams
    flavors = [m for m in _EOP_FLAVORS[rule.name] if m in series_by_name]
    _, fixed = _stop_family(streams, horizon)
    out = []
    for flavor in flavors:
        series = series_by_name[flavor]
        ratios, sharp_ratios, members = [], [], []
        for eta, taus in taus_all.items():
            capped = np.where(np.isfinite(taus), taus, horizon)
            numer = float(metrics.values_at_taus(series, capped).mean())
            patience = float(capped.mean())
            ratios.append(numer / patience)
            sharp = metrics.patience_sum(taus, xi, horizon)
            sharp_ratios.append(streams * numer / sharp)
            members.append(f"tau{eta}")
        for t in fixed:
            numer = float(series[:, t - 1].mean())
            ratios.append(numer / t)
            denom = metrics.patience_sum(np.full(series.shape[0], float(t)), xi, horizon)
            sharp_ratios.append(streams * numer / denom)
            members.append(f"t={t}")
        details = {"family": members, "ratios": ratios}
        out.append(MetricReport(
            metric=f"eop_{flavor}", rule=rule.label, t_or_stop="family-max",
            estimate=max(ratios), se=math.nan, reps=series.shape[0],
            lower_bound=True, details=details,
        ))
        out.append(MetricReport(
            metric=f"eop_{flavor}_sharp", rule=rule.label, t_or_stop="family-max",
            estimate=max(sharp_ratios), se=math.nan, reps=series.shape[0],
            lower_bound=True,
        ))
    return out


# ---------------------------------------------------------------------------
# Calibration support and the validity harness
# ---------------------------------------------------------------------------

def null_statistic_paths(rule: str, generator: StreamGeneratorSpec, *,
                         detector: DetectorSpec, reps: int, horizon: int,
                         seed: int) -> np.ndarray:
    """(reps, T) first-detection statistics under a null generator."""
    if not generator.changepoints.is_global_null:
        raise RejectedConfiguration(
            "threshold calibration requires a generator with no changepoints")
    streams = generator.streams
    out = np.empty((reps, horizon))
    for start, count in _block_starts(reps, _block_size(streams, horizon)):
        x = np.empty((count, horizon, streams))
        thetas = np.empty_like(x) if detector.needs_theta else None
        for i in range(count):
            sampler = StreamSampler(generator, seed, start + i)
            x[i] = sampler.matrix(horizon)
            if thetas is not None:
                thetas[i] = sampler.theta_matrix(horizon)
        x_tm = np.ascontiguousarray(x.transpose(1, 0, 2).reshape(horizon, count * streams))
        th_tm = None
        if thetas is not None:
            th_tm = np.ascontiguousarray(
                thetas.transpose(1, 0, 2).reshape(horizon, count * streams))
        values = detector_paths(detector, x_tm, th_tm)
        values = values.reshape(horizon, count, streams).transpose(1, 0, 2)
        out[start:start + count] = procedures.first_detection_statistic(rule, values)
    return out


@dataclass
class ValidityCheck:
    label: str
    mean_excess: float  # mean(M_stop - stop); positive means evidence outran time
    se: float
    ok: bool


@dataclass
class ValidityReport:
    detector: str
    checks: list

    @property
    def violated(self) -> bool:
        return any(not c.ok for c in self.checks)

    @property
    def violations(self) -> list:
        return [c for c in self.checks if not c.ok]


def edetector_validity_check(
    generator: StreamGeneratorSpec,
    detector: DetectorSpec,
    *,
    reps: int,
    horizon: int,
    seed: int,
    stream: int = 0,
    times: Optional[Sequence[int]] = None,
    stopping: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    stopping_label: str = "tau",
    slack: float = 3.0,
) -> ValidityReport:
    """Monte Carlo check of the growth bound E[M_stop] <= E[stop].

    Checks ``mean(M_t - t) <= slack * SE`` at each fixed time and, when a
    ``stopping`` callable mapping the data stack (reps, T, K) to per-rep
    stopping times is given, the same bound at those times.  Streams that
    see other streams' futures (the lagged-pair generator) are expected
    to fail the stopping-time check; the report flags that violation.
    """
    streams = generator.streams
    x = np.empty((reps, horizon, streams))
    thetas = np.empty_like(x) if detector.needs_theta else None
    for rep in range(reps):
        sampler = StreamSampler(generator, seed, rep)
        x[rep] = sampler.matrix(horizon)
        if thetas is not None:
            thetas[rep] = sampler.theta_matrix(horizon)
    x_tm = np.ascontiguousarray(x[:, :, stream].T)
    th_tm = np.ascontiguousarray(thetas[:, :, stream].T) if thetas is not None else None
    paths = detector_paths(detector, x_tm, th_tm).T  # (reps, T)

    checks = []
    for t in (times if times is not None else range(1, horizon + 1)):
        excess = paths[:, t - 1] - t
        mean, se = metrics.mc_mean(excess)
        checks.append(ValidityCheck(
            label=f"t={t}", mean_excess=mean, se=se, ok=mean <= slack * se))
    if stopping is not None:
        taus = np.asarray(stopping(x), dtype=np.int64)
        if taus.shape != (reps,) or taus.min() < 1 or taus.max() > horizon:
            raise RejectedInput("stopping must map data to per-rep times in [1, T]")
        at_tau = paths[np.arange(reps), taus - 1]
        excess = at_tau - taus
        mean, se = metrics.mc_mean(excess)
        checks.append(ValidityCheck(
            label=stopping_label, mean_excess=mean, se=se, ok=mean <= slack * se))
    return ValidityReport(detector=detector.kind, checks=checks)


def future_peek_stopping(stream: int, horizon: int, cut: float = 0.0):
    """Stop the first time ``stream`` dips below ``cut`` (horizon-capped).

    Against the lagged-pair generator, stream 1 holds stream 0's *next*
    observation, so this rule freezes stream 0's detector right before
    its first shrinking step: every factor the stopped detector absorbed
    after the start was conditioned to be a growth step.  That inflates
    E[M_tau] above E[tau] even though the detector is perfectly valid
    for its own stream's filtration."""

    def stopping(x: np.ndarray) -> np.ndarray:
        below = x[:, :, stream] < cut
        hit = below.any(axis=1)
        first = np.where(hit, below.argmax(axis=1) + 1, horizon)
        return first.astype(np.int64)

    return stopping


# ---------------------------------------------------------------------------
# Piggybacking of evidence across staggered change waves
# ---------------------------------------------------------------------------

@dataclass
class WaveDelay:
    at: int
    streams: tuple
    delays: np.ndarray  # per-replication delays to consistent detection (inf = censored)

    @property
    def mean_delay(self) -> float:
        finite = self.delays[np.isfinite(self.delays)]
        return float(finite.mean()) if finite.size else math.inf

    @property
    def censored(self) -> int:
        return int(np.sum(~np.isfinite(self.delays)))


@dataclass
class PiggybackReport:
    waves: list
    window: int

    @property
    def second_faster_count(self) -> int:
        """Replications where the later wave was consistently detected
        strictly faster than the earlier one."""
        if len(self.waves) < 2:
            raise RejectedInput("need two change waves to compare delays")
        first, second = self.waves[0], self.waves[1]
        both = np.isfinite(first.delays) & np.isfinite(second.delays)
        return int(np.sum(second.delays[both] < first.delays[both]))


def consistent_detection_delay(decisions: np.ndarray, wave_streams: Sequence[int],
                               wave_at: int, window: int = 10) -> float:
    """Delay from the wave's changepoint until all wave streams stay
    selected for ``window`` consecutive ticks (inf when never)."""
    covered = decisions[:, list(wave_streams)].all(axis=1).astype(np.int64)
    horizon = covered.shape[0]
    if horizon < window:
        return math.inf
    sums = np.convolve(covered, np.ones(window, dtype=np.int64), mode="valid")
    full = np.flatnonzero(sums == window)
    full = full[full >= wave_at - 1]
    if full.size == 0:
        return math.inf
    return float(full[0] + 1 - wave_at)


def piggyback_experiment(config: ExperimentConfig, window: int = 10) -> PiggybackReport:
    """Measure per-wave consistent-detection delays under one rule.

    The config's changepoints must define at least one finite wave; the
    report carries one entry per wave (ordered by change time), each with
    per-replication delays and a censored count.
    """
    if len(config.rules) != 1:
        raise ConfigError("rules", "piggybacking uses exactly one rule")
    if config.rules[0].is_global:
        raise ConfigError("rules", "piggybacking needs per-stream decisions")
    cps = config.generator.changepoints.changepoints
    by_time: dict = {}
    for k, cp in enumerate(cps):
        if cp != math.inf:
            by_time.setdefault(int(cp), []).append(k)
    if not by_time:
        raise ConfigError("generator.changepoints", "piggybacking needs a change wave")

    result = run_experiment(config)
    decisions = result.histories[config.rules[0].label]
    waves = []
    for at in sorted(by_time):
        members = tuple(by_time[at])
        delays = np.array([
            consistent_detection_delay(decisions[rep], members, at, window)
            for rep in range(config.replications)
        ])
        waves.append(WaveDelay(at=at, streams=members, delays=delays))
    return PiggybackReport(waves=waves, window=window)
