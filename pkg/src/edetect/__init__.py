"""Multi-stream sequential change detection with e-detectors.

Per-stream evidence processes (``evidence``), per-timestep selection
rules (``procedures``), error metrics (``metrics``), a Monte Carlo
simulation lab (``simlab``), and a CLI (``edetect``).
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND
from .errors import (
    CalibrationError,
    ConfigError,
    RejectedConfiguration,
    RejectedInput,
)
from .evidence import (
    CalibratorSpec,
    EvidenceState,
    NonconformitySpec,
    WeightSequence,
    calibrate_p_to_e,
    centered_last_score,
    conformal_pvalue,
    conformal_sr_update,
    cusum_from_delays,
    cusum_update,
    gaussian_lr_increment,
    power_calibrator,
    sr_update,
    subgaussian_sum_detector_update,
    symmetry_eprocess_update,
    weighted_sr_eprocess,
)
from .metrics import (
    ChangeConfiguration,
    DetectionHistory,
    MetricReport,
    ccd_at,
    empirical_eop,
    fdp_at,
    fwer_indicator_at,
    ger_indicator_at,
    monte_carlo_metric,
    pfer_at,
    tau_star,
)
from .procedures import (
    DetectionFrame,
    LevelSchedule,
    ThresholdPolicy,
    apply_threshold_policy,
    calibrate_threshold,
    edbh_step,
    edbonf_step,
    edgnt_step,
    edholm_step,
)
from .simlab import (
    DetectorSpec,
    ExperimentConfig,
    StreamGeneratorSpec,
    StreamSampler,
    edetector_validity_check,
    generate_batch,
    naive_baseline_step,
    parse_config,
    piggyback_experiment,
    run_experiment,
)
