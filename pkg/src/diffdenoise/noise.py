"""Synthetic noise regimes: pixel-wise independent Gaussian/Poisson/Gamma and
a spatially correlated variant built by blurring, power-matching, and mixing.

All samplers are pure functions of ``(clean, spec)``: the spec carries the
seed, so a realization can be regenerated bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

FAMILIES = ("gaussian", "poisson", "gamma")

SQRT2 = math.sqrt(2.0)


class NoiseConfigError(ValueError):
    """Invalid family/parameter combination in a NoiseSpec."""


@dataclass(frozen=True)
class NoiseSpec:
    """One seeded noise regime.

    Only the parameters of the selected family matter; the others are
    ignored. ``corr_sigma`` is the std (in pixels) of the Gaussian blur kernel
    used by the correlated construction; 0 means pixel-wise independent.
    """

    family: str
    sigma: float = 0.0
    lam: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    corr_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise NoiseConfigError(f"unknown noise family {self.family!r}")
        if self.corr_sigma < 0:
            raise NoiseConfigError("corr_sigma must be >= 0")
        if self.family == "gaussian" and not self.sigma > 0:
            raise NoiseConfigError("gaussian noise requires sigma > 0")
        if self.family == "poisson" and not self.lam > 0:
            raise NoiseConfigError("poisson noise requires lam > 0")
        if self.family == "gamma" and not (self.alpha > 0 and self.beta > 0):
            raise NoiseConfigError("gamma noise requires alpha > 0 and beta > 0")

    @property
    def iid(self) -> bool:
        return self.corr_sigma == 0.0

    def with_seed(self, seed: int) -> "NoiseSpec":
        return replace(self, seed=int(seed))

    def family_params(self) -> dict[str, float]:
        """The parameters relevant to the selected family."""
        if self.family == "gaussian":
            return {"sigma": self.sigma}
        if self.family == "poisson":
            return {"lam": self.lam}
        return {"alpha": self.alpha, "beta": self.beta}

    def tag(self) -> str:
        """Filesystem-friendly regime label (seed excluded)."""
        params = "_".join(f"{k}{v:g}" for k, v in sorted(self.family_params().items()))
        return f"{self.family}_{params}_corr{self.corr_sigma:g}"

    def to_dict(self) -> dict:
        d = {"family": self.family, "corr_sigma": self.corr_sigma, "seed": self.seed}
        d.update(self.family_params())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        known = {"family", "sigma", "lam", "alpha", "beta", "corr_sigma", "seed"}
        unknown = set(d) - known
        if unknown:
            raise NoiseConfigError(f"unknown NoiseSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class NoisyPair:
    """A clean image with its single fixed noise realization."""

    clean: np.ndarray
    noisy: np.ndarray
    spec: NoiseSpec

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError("clean and noisy must have the same shape")

    @classmethod
    def realize(cls, clean: np.ndarray, spec: NoiseSpec) -> "NoisyPair":
        return cls(clean=clean, noisy=apply_noise(clean, spec), spec=spec)


def _check_clean(clean: np.ndarray) -> np.ndarray:
    clean = np.asarray(clean)
    if clean.ndim != 2:
        raise ValueError("clean image must be 2-D")
    if not np.all(np.isfinite(clean)):
        raise ValueError("clean image contains non-finite values")
    if clean.min() < 0.0 or clean.max() > 1.0:
        raise ValueError("clean image values must lie in [0, 1]")
    return clean.astype(np.float64)


def _sample_noisy(clean64: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """One noisy realization of ``clean64`` in float64; not clipped."""
    if spec.family == "gaussian":
        return clean64 + spec.sigma * rng.standard_normal(clean64.shape)
    if spec.family == "poisson":
        return rng.poisson(clean64 * spec.lam).astype(np.float64) / spec.lam
    # multiplicative speckle: unit-mean Gamma factor when alpha == beta
    factor = rng.gamma(shape=spec.alpha, scale=1.0 / spec.beta, size=clean64.shape)
    return clean64 * factor


def add_iid_noise(clean: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Pixel-wise independent noise; deterministic given ``spec.seed``.

    Output is intentionally not clipped to [0, 1]: clipping would bias the
    noise statistics (clip only at image export).
    """
    spec.validate()
    if not spec.iid:
        raise NoiseConfigError("add_iid_noise requires corr_sigma == 0")
    clean64 = _check_clean(clean)
    rng = np.random.default_rng(spec.seed)
    return _sample_noisy(clean64, spec, rng).astype(np.float32)


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    """Discrete sampled Gaussian, radius ``ceil(3*sigma)`` by default,
    renormalized to sum 1."""
    if radius is None:
        radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    if sigma == 0:
        kernel = (offsets == 0).astype(np.float64)
    else:
        kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def blur_field(field: np.ndarray, corr_sigma: float, radius: int | None = None) -> np.ndarray:
    """Separable Gaussian blur with reflect (edge-mirroring) padding."""
    kernel = gaussian_kernel1d(corr_sigma, radius)
    out = ndimage.correlate1d(np.asarray(field, dtype=np.float64), kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def _match_power(target: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Rescale ``target`` so its mean square equals the reference's."""
    power_t = np.mean(target**2)
    if power_t == 0.0:
        return target
    return target * np.sqrt(np.mean(reference**2) / power_t)


def add_correlated_noise(
    clean: np.ndarray, spec: NoiseSpec, kernel_radius: int | None = None
) -> np.ndarray:
    """Spatially correlated noise: blur an i.i.d. field, match its power to
    the original, then mix with a fresh i.i.d. field at weights 1/sqrt(2).

    For Poisson/Gamma the additive field entering the blur is
    (sampled noisy - clean). ``kernel_radius`` is only exposed for the
    zero-radius limit check.
    """
    spec.validate()
    if not spec.corr_sigma > 0:
        raise NoiseConfigError("add_correlated_noise requires corr_sigma > 0")
    clean64 = _check_clean(clean)
    rng = np.random.default_rng(spec.seed)

    n1 = _sample_noisy(clean64, spec, rng) - clean64
    n1_blur = blur_field(n1, spec.corr_sigma, kernel_radius)
    n1_scaled = _match_power(n1_blur, n1)
    n2 = _sample_noisy(clean64, spec, rng) - clean64
    return (clean64 + (n1_scaled + n2) / SQRT2).astype(np.float32)


def apply_noise(clean: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Dispatch on ``spec.corr_sigma``: i.i.d. or correlated construction."""
    if spec.iid:
        return add_iid_noise(clean, spec)
    return add_correlated_noise(clean, spec)


def noise_autocorrelation(noise: np.ndarray, max_lag: int) -> dict[str, np.ndarray]:
    """Normalized empirical autocorrelation at integer lags along both axes.

    Returns ``{"row": rho, "col": rho}`` with ``rho[0] == 1``. Raises on a
    constant field, where the correlation is undefined.
    """
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    z = np.asarray(noise, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("noise field must be 2-D")
    if min(z.shape) <= max_lag:
        raise ValueError("max_lag must be smaller than both image dimensions")
    z = z - z.mean()
    variance = np.mean(z**2)
    if variance == 0.0:
        raise ValueError("autocorrelation undefined for a constant field")

    table: dict[str, np.ndarray] = {}
    for key, axis in (("row", 0), ("col", 1)):
        rho = np.empty(max_lag + 1, dtype=np.float64)
        rho[0] = 1.0
        for lag in range(1, max_lag + 1):
            if axis == 0:
                a, b = z[:-lag, :], z[lag:, :]
            else:
                a, b = z[:, :-lag], z[:, lag:]
            rho[lag] = np.mean(a * b) / variance
        table[key] = rho
    return table
