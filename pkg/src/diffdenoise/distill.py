"""Knowledge distillation: train a fast feed-forward denoiser on
(noisy, diffusion-sampled target) pairs, plus the multi-iteration protocol
where the previous distilled model becomes the next condition provider.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import TrainedModel, register_stage, smooth_loss_history, state_from_module
from .diffusion import DiffusionConfig, build_diffusion, train_diffusion
from .metrics import MetricReport, psnr, ssim
from .networks import ResidualRestorationCNN
from .sampling import srds_sample
from .seeding import derive_seed
from .training import TrainingError, paired_minibatches, to_tensor


@dataclass(frozen=True)
class DistillConfig:
    channels: int = 48
    depth: int = 8
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0


@dataclass
class DistillDataset:
    """(noisy, sampled target) pairs with their provenance."""

    noisy: list[np.ndarray]
    targets: list[np.ndarray]
    iteration: int = 1
    teacher_fingerprint: str = ""

    def __post_init__(self):
        if len(self.noisy) != len(self.targets):
            raise ValueError("noisy and target lists must be equally long")
        if self.iteration < 1:
            raise ValueError("iteration index must be >= 1")
        for n, t in zip(self.noisy, self.targets):
            if n.shape != t.shape:
                raise ValueError("noisy/target shape mismatch")


def _build_module(config: DistillConfig) -> ResidualRestorationCNN:
    return ResidualRestorationCNN(channels=config.channels, depth=config.depth)


register_stage("distilled", DistillConfig, _build_module)


def build_distilled(config: DistillConfig) -> TrainedModel:
    torch.manual_seed(derive_seed(config.seed, "distill-init"))
    net = _build_module(config)
    return TrainedModel(stage="distilled", config=config, state=state_from_module(net))


def train_distilled(dataset: DistillDataset, config: DistillConfig) -> TrainedModel:
    """Supervised L1 regression from noisy inputs to sampled targets."""
    if not dataset.noisy:
        raise ValueError("distillation dataset is empty")
    model = build_distilled(config)
    net = model.module()
    net.train()
    noisy = to_tensor(dataset.noisy)
    targets = to_tensor([np.asarray(t, dtype=np.float32) for t in dataset.targets])
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)

    history: list[float] = []
    for epoch in range(config.epochs):
        losses = []
        shuffle = derive_seed(config.seed, "distill-shuffle", epoch)
        for nb, tb in paired_minibatches(noisy, targets, config.batch_size, shuffle):
            out = net(nb)
            loss = F.l1_loss(out, tb)
            if not torch.isfinite(loss):
                raise TrainingError(f"distillation loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    net.eval()
    return TrainedModel(
        stage="distilled",
        config=config,
        state=state_from_module(net),
        loss_history=history,
        loss_history_smoothed=smooth_loss_history(history),
    )


def distilled_denoise(model: TrainedModel, noisy: np.ndarray) -> np.ndarray:
    """Single deterministic forward pass; the pipeline's final output."""
    model.require_trained()
    net = model.module()
    with torch.no_grad():
        out = net(to_tensor([np.asarray(noisy, dtype=np.float32)]))
    return out[0, 0].numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# multi-iteration protocol


@dataclass(frozen=True)
class IterationConfig:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    srds_steps: int = 50
    seed: int = 0


@dataclass
class IterationData:
    """Training images plus a held-out labelled evaluation set."""

    train_ids: list[str]
    train_noisy: list[np.ndarray]
    eval_ids: list[str]
    eval_noisy: list[np.ndarray]
    eval_clean: list[np.ndarray]


@dataclass
class IterationArtifacts:
    diffusion_model: TrainedModel
    srds_train_targets: list[np.ndarray]
    srds_eval_outputs: list[np.ndarray]
    distilled: TrainedModel
    report: MetricReport


ConditionProvider = Callable[[np.ndarray], np.ndarray]


def iteration_components(
    condition_provider: ConditionProvider | None,
    data: IterationData,
    k: int,
    config: IterationConfig,
) -> IterationArtifacts:
    """One pipeline iteration: retrain diffusion with the given condition
    provider, sample SRDS targets, distill, and evaluate."""
    if k < 1:
        raise ValueError("iteration index must be >= 1")
    if condition_provider is None:
        raise ValueError(f"iteration {k} requires the previous iteration's denoiser")

    train_cond = [condition_provider(x) for x in data.train_noisy]
    eval_cond = [condition_provider(x) for x in data.eval_noisy]

    diff_cfg = replace(config.diffusion, seed=derive_seed(config.seed, "diffusion", k))
    schedule = diff_cfg.schedule()
    diffusion_model = train_diffusion(
        build_diffusion(diff_cfg), list(zip(data.train_noisy, train_cond)), schedule, diff_cfg
    )

    def _srds(noisy, cond, patch_id):
        seed = derive_seed(config.seed, "srds", k, patch_id)
        return srds_sample(diffusion_model, noisy, cond, schedule, config.srds_steps, seed).output

    srds_train = [
        _srds(x, c, pid) for pid, x, c in zip(data.train_ids, data.train_noisy, train_cond)
    ]
    srds_eval = [
        _srds(x, c, pid) for pid, x, c in zip(data.eval_ids, data.eval_noisy, eval_cond)
    ]

    dist_cfg = replace(config.distill, seed=derive_seed(config.seed, "distill", k))
    dataset = DistillDataset(
        noisy=data.train_noisy,
        targets=srds_train,
        iteration=k,
        teacher_fingerprint=diffusion_model.fingerprint,
    )
    distilled = train_distilled(dataset, dist_cfg)
    distilled.provenance = {
        "diffusion_fingerprint": diffusion_model.fingerprint,
        "iteration": k,
    }

    report = MetricReport(image_ids=list(data.eval_ids))
    outputs = {
        "noisy": data.eval_noisy,
        "condition": eval_cond,
        "srds": srds_eval,
        "distilled": [distilled_denoise(distilled, x) for x in data.eval_noisy],
    }
    for name, images in outputs.items():
        report.add_method(
            name,
            [psnr(c, img) for c, img in zip(data.eval_clean, images)],
            [ssim(c, img) for c, img in zip(data.eval_clean, images)],
        )
    return IterationArtifacts(
        diffusion_model=diffusion_model,
        srds_train_targets=srds_train,
        srds_eval_outputs=srds_eval,
        distilled=distilled,
        report=report,
    )


def run_iteration(
    prev_output_provider: ConditionProvider | None,
    data: IterationData,
    k: int,
    config: IterationConfig,
) -> tuple[TrainedModel, MetricReport]:
    """Iteration k of the pipeline; k = 1 is the base run conditioned on the
    blind-spot output, k >= 2 conditions on iteration k-1's distilled model."""
    art = iteration_components(prev_output_provider, data, k, config)
    return art.distilled, art.report
