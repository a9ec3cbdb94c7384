"""bbarena: query-budgeted evaluation arena for black-box attacks against
Gaussian input-noise defenses."""

from .numkit import Norm, NormBall, RngStream, Vector, clamp01, norm, project, sample_gaussian
from .netmod import Dataset, MlpModel, TrainConfig, accuracy, forward, gf_finetune, make_blobs, train
from .oracle import (
    AttackChannel,
    BudgetExhausted,
    DefensePolicy,
    MarginOracle,
    QueryLedger,
    eot_query,
    margin,
    observed_success,
    query,
)
from .attacks import ATTACKS, AttackConfig, AttackOutcome, run_attack
from .harness import ExperimentSpec, ReportRow, load_spec, run_experiment, summarize, write_csv

__version__ = "0.1.0"
