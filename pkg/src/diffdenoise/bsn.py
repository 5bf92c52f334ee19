"""Blind-spot network: architecturally J-invariant denoising trained on
noisy images only.

Construction: the first layer is a ring convolution whose kernel is zero on
the centered blind-spot square, so every first-layer tap sits at Chebyshev
radius h+1 (h = half the blind-spot side). All later spatial layers are 3x3
convolutions dilated by at least blind_spot_size+1, so path offsets stay
congruent to +-(h+1) modulo the dilation in at least one coordinate and can
never land back inside the blind square. Output pixel (i, j) therefore has
exactly zero dependence on inputs in the blind-spot square around (i, j).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import TrainedModel, register_stage, smooth_loss_history, state_from_module
from .seeding import derive_seed
from .training import TrainingError, minibatches, to_tensor


class BsnConstructionError(ValueError):
    """Layer stack would leak the blind spot, or the config is malformed."""


@dataclass(frozen=True)
class BsnConfig:
    """blind_spot_size is the side of the excluded square (odd); 0 selects
    the per-regime default (1 i.i.d. / 5 mild / 9 strong correlation)."""

    blind_spot_size: int = 1
    channels: int = 32
    depth: int = 4
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    dilation: int = 0  # 0 = auto (blind_spot_size + 1)

    def __post_init__(self):
        if self.blind_spot_size != 0:
            if self.blind_spot_size < 1 or self.blind_spot_size % 2 == 0:
                raise BsnConstructionError("blind_spot_size must be odd and >= 1 (or 0 for auto)")
        if self.depth < 2:
            raise BsnConstructionError("depth must be >= 2")
        if self.channels < 1:
            raise BsnConstructionError("channels must be >= 1")

    def resolved(self, corr_sigma: float = 0.0) -> "BsnConfig":
        """Fill in the automatic blind-spot size for a noise regime."""
        if self.blind_spot_size != 0:
            return self
        return replace(self, blind_spot_size=default_blind_spot(corr_sigma))


def default_blind_spot(corr_sigma: float) -> int:
    """1 for i.i.d. noise, 5 for blur std <= 0.8, 9 beyond."""
    if corr_sigma == 0:
        return 1
    return 5 if corr_sigma <= 0.8 else 9


class BlindSpotNetwork(nn.Module):
    def __init__(self, config: BsnConfig):
        super().__init__()
        b = config.blind_spot_size
        if b < 1 or b % 2 == 0:
            raise BsnConstructionError("blind_spot_size must be odd and >= 1")
        half = (b - 1) // 2
        dilation = config.dilation if config.dilation else b + 1
        # any dilated-path offset is a multiple of `dilation`; a first-layer
        # tap coordinate of magnitude half+1 stays outside [-half, half] only
        # if dilation - (half + 1) > half
        if dilation < b + 1:
            raise BsnConstructionError(
                f"dilation {dilation} leaks the {b}x{b} blind spot; need >= {b + 1}"
            )
        self.blind_spot_size = b
        ring_size = 2 * half + 3
        self.ring = nn.Conv2d(1, config.channels, ring_size, padding=half + 1)
        mask = torch.ones(ring_size, ring_size)
        mask[1:-1, 1:-1] = 0.0
        self.register_buffer("ring_mask", mask)

        self.hidden = nn.ModuleList(
            nn.Conv2d(config.channels, config.channels, 3, padding=dilation, dilation=dilation)
            for _ in range(config.depth - 1)
        )
        self.mix = nn.Conv2d(config.channels, config.channels, 1)
        self.head = nn.Conv2d(config.channels, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.ring.weight * self.ring_mask
        h = F.relu(F.conv2d(x, w, self.ring.bias, padding=self.ring.padding))
        for conv in self.hidden:
            h = F.relu(conv(h))
        h = F.relu(self.mix(h))
        return self.head(h)


def _build_module(config: BsnConfig) -> BlindSpotNetwork:
    return BlindSpotNetwork(config)


register_stage("bsn", BsnConfig, _build_module)


def build_bsn(config: BsnConfig) -> TrainedModel:
    """Untrained blind-spot model handle with seeded initial weights."""
    torch.manual_seed(derive_seed(config.seed, "bsn-init"))
    net = BlindSpotNetwork(config)
    return TrainedModel(stage="bsn", config=config, state=state_from_module(net))


def train_bsn(
    model: TrainedModel, patches: list[np.ndarray], config: BsnConfig | None = None
) -> TrainedModel:
    """Self-supervised training: regress each noisy patch onto itself.

    The blind spot removes the identity shortcut, so the minimizer is the
    J-invariant conditional mean.
    """
    cfg = config or model.config
    if not patches:
        raise ValueError("training dataset is empty")
    shapes = {p.shape for p in patches}
    if len(shapes) != 1:
        raise ValueError("all training patches must share one shape")

    net = model.module()
    net.train()
    data = to_tensor(patches)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        losses = []
        for batch in minibatches(data, cfg.batch_size, derive_seed(cfg.seed, "bsn-shuffle", epoch)):
            out = net(batch)
            loss = F.mse_loss(out, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"bsn loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    net.eval()
    return TrainedModel(
        stage="bsn",
        config=cfg,
        state=state_from_module(net),
        loss_history=history,
        loss_history_smoothed=smooth_loss_history(history),
    )


def bsn_denoise(model: TrainedModel, noisy: np.ndarray) -> np.ndarray:
    """Deterministic denoised estimate used as the diffusion condition."""
    model.require_trained()
    net = model.module()
    with torch.no_grad():
        out = net(to_tensor([noisy]))
    return out[0, 0].numpy().astype(np.float32)


def blind_spot_offsets(blind_spot_size: int) -> list[tuple[int, int]]:
    """All offsets inside the centered blind-spot square."""
    half = (blind_spot_size - 1) // 2
    return [(dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)]


def probe_sensitivity(
    model: TrainedModel | BlindSpotNetwork,
    image: np.ndarray,
    pixel: tuple[int, int],
    offset: tuple[int, int],
    delta: float,
) -> float:
    """|change of output at `pixel`| when the input at pixel+offset moves by
    delta. Used to verify (and bound) the receptive-field mask."""
    net = model.module() if isinstance(model, TrainedModel) else model
    i, j = pixel
    k, l = i + offset[0], j + offset[1]
    x = np.asarray(image, dtype=np.float32)
    perturbed = x.copy()
    perturbed[k, l] += delta
    with torch.no_grad():
        base = net(to_tensor([x]))[0, 0, i, j].item()
        moved = net(to_tensor([perturbed]))[0, 0, i, j].item()
    return abs(moved - base)
