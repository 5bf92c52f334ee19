"""Self-supervised denoising pipeline: synthetic noise regimes, blind-spot
conditioning, residual-space conditional diffusion with deterministic
sampling, antithetic-pair stabilization, and knowledge distillation."""

from . import bsn, config, data, diffusion, distill, metrics, noise, pipeline, report, sampling
from .bsn import BsnConfig, bsn_denoise, build_bsn, train_bsn
from .config import ExperimentConfig, config_hash, load_config
from .checkpoint import TrainedModel, load_checkpoint, save_checkpoint
from .data import generate_phantoms, load_array, normalize_and_patchify, save_array
from .diffusion import (
    DiffusionConfig,
    DiffusionSchedule,
    forward_diffuse,
    make_schedule,
    train_diffusion,
)
from .distill import DistillConfig, DistillDataset, distilled_denoise, run_iteration, train_distilled
from .metrics import MetricReport, paired_test, psnr, ssim
from .noise import NoiseSpec, NoisyPair, add_correlated_noise, add_iid_noise, noise_autocorrelation
from .pipeline import RunLedger, run_pipeline, verify_ledger_coverage
from .report import make_report
from .sampling import SrdsResult, random_pair_average, single_branch_sample, srds_sample

__version__ = "0.1.0"
