"""Conditional diffusion over the residual between a noisy image and its
blind-spot estimate: noise schedule, forward process, L1 noise-prediction
loss, deterministic DDIM updates, and training.

Sampling arithmetic runs in float64; the network itself is float32. Network
inference is evaluated one image at a time so that a reverse trajectory is a
pure function of (initial noise, condition, checkpoint, timesteps) no matter
how calls are grouped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import TrainedModel, register_stage, smooth_loss_history, state_from_module
from .networks import ConditionalUNet
from .seeding import derive_seed
from .training import TrainingError, paired_minibatches, to_tensor


class ScheduleError(ValueError):
    """Invalid noise-schedule parameters."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta schedule with cumulative signal coefficients.

    ``alpha_bar`` has length T+1 with ``alpha_bar[0] == 1`` (the empty
    product), strictly decreasing, values in (0, 1].
    """

    timesteps: int
    beta_start: float
    beta_end: float
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        ab = self.alpha_bar
        if len(ab) != self.timesteps + 1:
            raise ScheduleError("alpha_bar must have length T+1")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(ab) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ScheduleError("alpha_bar values must lie in (0, 1]")

    @property
    def fully_noised(self) -> bool:
        """Terminal signal retention below 1e-3 (true for production-length
        schedules; short schedules keep residual signal at T)."""
        return bool(self.alpha_bar[-1] < 1e-3)


def make_schedule(
    timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> DiffusionSchedule:
    if timesteps < 2:
        raise ScheduleError("timesteps must be >= 2")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ScheduleError("need 0 < beta_start < beta_end < 1")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(
        timesteps=timesteps, beta_start=beta_start, beta_end=beta_end, alpha_bar=alpha_bar
    )


@dataclass(frozen=True)
class ResidualTarget:
    """residual = noisy - condition, kept in float64 so that
    condition + residual reproduces noisy bit-exactly."""

    residual: np.ndarray
    condition: np.ndarray
    noisy: np.ndarray

    @classmethod
    def from_pair(cls, noisy: np.ndarray, condition: np.ndarray) -> "ResidualTarget":
        noisy64 = np.asarray(noisy, dtype=np.float64)
        cond64 = np.asarray(condition, dtype=np.float64)
        if noisy64.shape != cond64.shape:
            raise ValueError("noisy and condition must have the same shape")
        return cls(residual=noisy64 - cond64, condition=cond64, noisy=noisy64)


@dataclass(frozen=True)
class DiffusionState:
    """Noised residual at one timestep, with its conditioning image."""

    x_t: np.ndarray
    t: int
    condition: np.ndarray

    def __post_init__(self):
        if self.x_t.shape != self.condition.shape:
            raise ValueError("state and condition shapes differ")
        if self.t < 0:
            raise ValueError("t must be >= 0")


@dataclass(frozen=True)
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 32
    levels: int = 3
    time_embed_dim: int = 128
    learning_rate: float = 2e-4
    epochs: int = 120
    batch_size: int = 16
    residual_scale: float = 1.0
    seed: int = 0

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.timesteps, self.beta_start, self.beta_end)


def _build_module(config: DiffusionConfig) -> ConditionalUNet:
    return ConditionalUNet(
        base_channels=config.base_channels,
        levels=config.levels,
        time_embed_dim=config.time_embed_dim,
    )


register_stage("diffusion", DiffusionConfig, _build_module)


def diffuse_array(
    r: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule
) -> np.ndarray:
    """x_t = sqrt(abar_t) * r + sqrt(1 - abar_t) * eps, in float64."""
    if not 0 <= t <= schedule.timesteps:
        raise ValueError(f"t must be in [0, {schedule.timesteps}]")
    r = np.asarray(r, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if r.shape != eps.shape:
        raise ValueError("residual and eps must have the same shape")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * r + np.sqrt(1.0 - ab) * eps


def forward_diffuse(
    target: ResidualTarget, t: int, eps: np.ndarray, schedule: DiffusionSchedule
) -> DiffusionState:
    """Forward process applied to the residual."""
    x_t = diffuse_array(target.residual, t, eps, schedule)
    return DiffusionState(x_t=x_t, t=t, condition=target.condition)


def diffusion_loss(
    net,
    noisy: torch.Tensor,
    condition: torch.Tensor,
    schedule: DiffusionSchedule,
    generator: torch.Generator,
    residual_scale: float = 1.0,
) -> torch.Tensor:
    """Mean L1 distance between predicted and injected noise.

    Samples t uniform in [1, T] and eps standard normal per batch element,
    diffuses the (scaled) residual, and evaluates ``net(x_t, condition, t)``.
    Differentiable; used directly as the training objective.
    """
    if noisy.shape != condition.shape:
        raise ValueError("noisy and condition must have the same shape")
    dtype = noisy.dtype
    batch = noisy.shape[0]
    t = torch.randint(1, schedule.timesteps + 1, (batch,), generator=generator)
    eps = torch.randn(noisy.shape, generator=generator, dtype=dtype)
    ab = torch.from_numpy(schedule.alpha_bar).to(dtype)[t][:, None, None, None]
    r = (noisy - condition) * residual_scale
    x_t = torch.sqrt(ab) * r + torch.sqrt(1.0 - ab) * eps
    pred = net(x_t, condition, t)
    if not torch.all(torch.isfinite(pred)):
        raise TrainingError("non-finite values in diffusion forward pass")
    return (pred - eps).abs().mean()


class EpsPredictor:
    """Numpy-facing wrapper around a trained noise-prediction network.

    Evaluates images one at a time (batch size 1) so results do not depend
    on how callers group work.
    """

    def __init__(self, model: TrainedModel):
        model.require_trained()
        if model.stage != "diffusion":
            raise ValueError(f"expected a diffusion model, got stage {model.stage!r}")
        self._net = model.module()
        self.residual_scale = model.config.residual_scale
        self.is_trained = True

    def predict_eps(self, x_t: np.ndarray, condition: np.ndarray, t: int) -> np.ndarray:
        single = x_t.ndim == 2
        xs = x_t[None] if single else x_t
        cs = condition[None] if single else condition
        outs = []
        with torch.no_grad():
            for x_i, c_i in zip(xs, cs):
                xt = torch.from_numpy(np.ascontiguousarray(x_i, dtype=np.float32))[None, None]
                ct = torch.from_numpy(np.ascontiguousarray(c_i, dtype=np.float32))[None, None]
                tt = torch.tensor([t], dtype=torch.long)
                outs.append(self._net(xt, ct, tt)[0, 0].numpy().astype(np.float64))
        out = np.stack(outs)
        return out[0] if single else out


def as_predictor(model) -> "EpsPredictor | object":
    """Accept either a TrainedModel or any object with predict_eps."""
    if hasattr(model, "predict_eps"):
        return model
    if isinstance(model, TrainedModel):
        return EpsPredictor(model)
    raise TypeError("model must be a TrainedModel or expose predict_eps")


def ddim_update(
    x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_next: int, schedule: DiffusionSchedule
) -> np.ndarray:
    """One deterministic (eta = 0) reverse step in float64."""
    ab_t = schedule.alpha_bar[t]
    ab_n = schedule.alpha_bar[t_next]
    x0 = (x_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_n) * x0 + np.sqrt(1.0 - ab_n) * eps_hat


def ddim_step(
    model, state: DiffusionState, t_next: int, schedule: DiffusionSchedule
) -> DiffusionState:
    """Deterministic DDIM update from state.t down to t_next."""
    if t_next >= state.t:
        raise ValueError("t_next must be strictly less than the current t")
    if t_next < 0:
        raise ValueError("t_next must be >= 0")
    predictor = as_predictor(model)
    x_t = np.asarray(state.x_t, dtype=np.float64)
    eps_hat = predictor.predict_eps(x_t, np.asarray(state.condition, dtype=np.float64), state.t)
    x_next = ddim_update(x_t, eps_hat, state.t, t_next, schedule)
    return DiffusionState(x_t=x_next, t=t_next, condition=state.condition)


def sampling_timesteps(timesteps: int, steps: int) -> np.ndarray:
    """Descending timestep subsequence from T to 0 with `steps` intervals."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    ts = np.unique(np.round(np.linspace(0, timesteps, steps + 1)).astype(int))
    return ts[::-1].copy()


def run_ddim_chain(
    model,
    eps0: np.ndarray,
    condition: np.ndarray,
    schedule: DiffusionSchedule,
    steps: int | None = None,
    timesteps: np.ndarray | None = None,
) -> np.ndarray:
    """Full deterministic reverse chain from x_T = eps0 down to the model-
    space residual at t = 0."""
    predictor = as_predictor(model)
    if timesteps is None:
        if steps is None:
            raise ValueError("provide steps or an explicit timestep subsequence")
        timesteps = sampling_timesteps(schedule.timesteps, steps)
    timesteps = np.asarray(timesteps)
    if timesteps[0] != schedule.timesteps or timesteps[-1] != 0:
        raise ValueError("timestep subsequence must run from T to 0")
    if np.any(np.diff(timesteps) >= 0):
        raise ValueError("timestep subsequence must be strictly decreasing")
    x = np.asarray(eps0, dtype=np.float64)
    cond = np.asarray(condition, dtype=np.float64)
    for t, t_next in zip(timesteps[:-1], timesteps[1:]):
        eps_hat = predictor.predict_eps(x, cond, int(t))
        x = ddim_update(x, eps_hat, int(t), int(t_next), schedule)
    return x


def build_diffusion(config: DiffusionConfig) -> TrainedModel:
    """Untrained conditional diffusion handle with seeded initial weights."""
    torch.manual_seed(derive_seed(config.seed, "diffusion-init"))
    net = _build_module(config)
    return TrainedModel(stage="diffusion", config=config, state=state_from_module(net))


def train_diffusion(
    model: TrainedModel,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    schedule: DiffusionSchedule | None = None,
    config: DiffusionConfig | None = None,
) -> TrainedModel:
    """Minimize the L1 noise-prediction loss over (noisy, condition) pairs."""
    cfg = config or model.config
    sched = schedule or cfg.schedule()
    if not pairs:
        raise ValueError("training dataset is empty")
    if cfg.epochs < 1:
        raise ValueError("epochs must be >= 1")

    net = model.module()
    net.train()
    noisy = to_tensor([p[0] for p in pairs])
    cond = to_tensor([p[1] for p in pairs])
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "diffusion-noise"))

    history: list[float] = []
    last_good: TrainedModel | None = None
    for epoch in range(cfg.epochs):
        losses = []
        shuffle = derive_seed(cfg.seed, "diffusion-shuffle", epoch)
        for nb, cb in paired_minibatches(noisy, cond, cfg.batch_size, shuffle):
            try:
                loss = diffusion_loss(net, nb, cb, sched, gen, cfg.residual_scale)
            except TrainingError as exc:
                raise TrainingError(str(exc), last_good=last_good) from exc
            if not torch.isfinite(loss):
                raise TrainingError(f"diffusion loss diverged at epoch {epoch}", last_good=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        last_good = TrainedModel(
            stage="diffusion",
            config=cfg,
            state=state_from_module(net),
            loss_history=list(history),
            loss_history_smoothed=smooth_loss_history(history),
        )
    net.eval()
    return last_good
