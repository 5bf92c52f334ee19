"""Stabilized reverse diffusion sampling: run the deterministic reverse
chain from a noise draw and its negation, and average the two
reconstructions. Single-branch and independent-pair baselines live here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionSchedule, as_predictor, run_ddim_chain
from .metrics import psnr
from .seeding import derive_seed


@dataclass(frozen=True)
class SrdsResult:
    """Antithetic-pair sample: output is exactly the elementwise mean of the
    two stored branch reconstructions."""

    output: np.ndarray
    branch_pos: np.ndarray
    branch_neg: np.ndarray
    eps_seed: int


def draw_eps(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def _check_inputs(noisy: np.ndarray, condition: np.ndarray, steps: int) -> None:
    if noisy.shape != condition.shape:
        raise ValueError("noisy and condition must have the same shape")
    if steps < 1:
        raise ValueError("steps must be >= 1")


def _reconstruct(condition: np.ndarray, r_model: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(condition, dtype=np.float64) + r_model / scale


def srds_sample_from_eps(
    model,
    noisy: np.ndarray,
    condition: np.ndarray,
    schedule: DiffusionSchedule,
    steps: int,
    eps: np.ndarray,
    eps_seed: int = -1,
) -> SrdsResult:
    """SRDS with an explicit initial noise field (symmetry checks)."""
    predictor = as_predictor(model)
    _check_inputs(noisy, condition, steps)
    scale = getattr(predictor, "residual_scale", 1.0)
    r_pos = run_ddim_chain(predictor, eps, condition, schedule, steps)
    r_neg = run_ddim_chain(predictor, -eps, condition, schedule, steps)
    branch_pos = _reconstruct(condition, r_pos, scale)
    branch_neg = _reconstruct(condition, r_neg, scale)
    return SrdsResult(
        output=(branch_pos + branch_neg) / 2.0,
        branch_pos=branch_pos,
        branch_neg=branch_neg,
        eps_seed=eps_seed,
    )


def srds_sample(
    model,
    noisy: np.ndarray,
    condition: np.ndarray,
    schedule: DiffusionSchedule,
    steps: int,
    eps_seed: int,
) -> SrdsResult:
    """Reverse chains from eps and -eps (both conditioned on the same
    blind-spot estimate), reconstructed and averaged."""
    eps = draw_eps(np.asarray(noisy).shape, eps_seed)
    return srds_sample_from_eps(model, noisy, condition, schedule, steps, eps, eps_seed)


def single_branch_sample(
    model,
    noisy: np.ndarray,
    condition: np.ndarray,
    schedule: DiffusionSchedule,
    steps: int,
    eps_seed: int,
) -> np.ndarray:
    """One reverse chain from +eps only (the no-SRDS ablation)."""
    predictor = as_predictor(model)
    _check_inputs(noisy, condition, steps)
    scale = getattr(predictor, "residual_scale", 1.0)
    eps = draw_eps(np.asarray(noisy).shape, eps_seed)
    r_hat = run_ddim_chain(predictor, eps, condition, schedule, steps)
    return _reconstruct(condition, r_hat, scale)


def random_pair_average(
    model,
    noisy: np.ndarray,
    condition: np.ndarray,
    schedule: DiffusionSchedule,
    steps: int,
    seed_a: int,
    seed_b: int,
) -> np.ndarray:
    """Mean of two independently seeded branches; the naive-averaging
    baseline SRDS is compared against."""
    if seed_a == seed_b:
        raise ValueError("random-pair averaging requires two distinct seeds")
    out_a = single_branch_sample(model, noisy, condition, schedule, steps, seed_a)
    out_b = single_branch_sample(model, noisy, condition, schedule, steps, seed_b)
    return (out_a + out_b) / 2.0


@dataclass
class StabilitySweep:
    """Per-seed PSNR lists for one image under the three sampling modes."""

    seeds: list[int]
    psnr_single: list[float]
    psnr_random_pair: list[float]
    psnr_srds: list[float]


def stability_sweep(
    model,
    noisy: np.ndarray,
    condition: np.ndarray,
    clean: np.ndarray,
    schedule: DiffusionSchedule,
    steps: int,
    seeds: list[int],
) -> StabilitySweep:
    """Seed-stability measurements for one image.

    Reuses chains: per seed s, the +eps chain serves both the single-branch
    mode and SRDS, and the random pair is (+eps(s), +eps(pair_mate(s))),
    bit-identical to calling the three sampling entry points directly.
    """
    predictor = as_predictor(model)
    _check_inputs(noisy, condition, steps)
    scale = getattr(predictor, "residual_scale", 1.0)
    shape = np.asarray(noisy).shape

    singles: list[float] = []
    pairs: list[float] = []
    srds_list: list[float] = []
    for s in seeds:
        eps = draw_eps(shape, s)
        r_pos = run_ddim_chain(predictor, eps, condition, schedule, steps)
        r_neg = run_ddim_chain(predictor, -eps, condition, schedule, steps)
        branch_pos = _reconstruct(condition, r_pos, scale)
        branch_neg = _reconstruct(condition, r_neg, scale)

        mate_seed = derive_seed(s, "random-pair-mate")
        eps_b = draw_eps(shape, mate_seed)
        r_b = run_ddim_chain(predictor, eps_b, condition, schedule, steps)
        branch_b = _reconstruct(condition, r_b, scale)

        singles.append(psnr(clean, branch_pos))
        pairs.append(psnr(clean, (branch_pos + branch_b) / 2.0))
        srds_list.append(psnr(clean, (branch_pos + branch_neg) / 2.0))
    return StabilitySweep(
        seeds=list(seeds), psnr_single=singles, psnr_random_pair=pairs, psnr_srds=srds_list
    )
