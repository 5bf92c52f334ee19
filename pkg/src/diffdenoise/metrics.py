"""Image quality metrics (PSNR, SSIM) and paired statistical comparison.

Metrics are computed on unclipped float arrays against the clean ground
truth. SSIM uses the canonical 11x11 Gaussian window (sigma 1.5) with
K1=0.01, K2=0.03 and valid-region averaging.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal, stats

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse(reference: np.ndarray, test: np.ndarray) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError("reference and test must have the same shape")
    return float(np.mean((reference - test) ** 2))


def psnr(reference: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE) in dB; +inf when the images are identical."""
    if data_range <= 0:
        raise ValueError("data_range must be > 0")
    err = mse(reference, test)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def _ssim_window() -> np.ndarray:
    radius = SSIM_WINDOW // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k1d = np.exp(-0.5 * (offsets / SSIM_SIGMA) ** 2)
    k2d = np.outer(k1d, k1d)
    return k2d / k2d.sum()


_WINDOW = _ssim_window()


def _local_mean(x: np.ndarray) -> np.ndarray:
    return signal.convolve2d(x, _WINDOW, mode="valid")


def ssim(reference: np.ndarray, test: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local structural similarity; unitless, in [-1, 1]."""
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(test, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("reference and test must have the same shape")
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    if data_range <= 0:
        raise ValueError("data_range must be > 0")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _local_mean(x)
    mu_y = _local_mean(y)
    var_x = _local_mean(x * x) - mu_x * mu_x
    var_y = _local_mean(y * y) - mu_y * mu_y
    cov = _local_mean(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def paired_test(a: list[float] | np.ndarray, b: list[float] | np.ndarray) -> float:
    """Two-sided Wilcoxon signed-rank p-value on paired differences.

    Returns 1.0 by convention when every difference is zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired scores must be 1-D and equally long")
    if a.size < 5:
        raise ValueError("paired test requires at least 5 pairs")
    diffs = a - b
    if np.all(diffs == 0.0):
        return 1.0
    return float(stats.wilcoxon(a, b).pvalue)


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM for a set of methods over the same images."""

    image_ids: list[str]
    psnr_scores: dict[str, list[float]] = field(default_factory=dict)
    ssim_scores: dict[str, list[float]] = field(default_factory=dict)

    def add_method(self, name: str, psnr_list: list[float], ssim_list: list[float]) -> None:
        if len(psnr_list) != len(self.image_ids) or len(ssim_list) != len(self.image_ids):
            raise ValueError("score list lengths must match image_ids")
        self.psnr_scores[name] = list(psnr_list)
        self.ssim_scores[name] = list(ssim_list)

    @property
    def methods(self) -> list[str]:
        return list(self.psnr_scores)

    def _scores(self, metric: str) -> dict[str, list[float]]:
        if metric == "psnr":
            return self.psnr_scores
        if metric == "ssim":
            return self.ssim_scores
        raise ValueError(f"unknown metric {metric!r}")

    def mean(self, metric: str, method: str) -> float:
        return float(np.mean(self._scores(metric)[method]))

    def std(self, metric: str, method: str) -> float:
        return float(np.std(self._scores(metric)[method]))

    def p_value(self, metric: str, a: str, b: str) -> float:
        scores = self._scores(metric)
        return paired_test(scores[a], scores[b])

    def bold_methods(self, metric: str, alpha: float = 0.05) -> set[str]:
        """Methods marked best: the top mean plus everything not separable
        from the bold set, expanded until every bold/non-bold pair differs
        at p < alpha. Comparisons too short for the paired test count as
        not separable."""
        methods = self.methods
        if not methods:
            return set()

        def separable(a: str, b: str) -> bool:
            try:
                return self.p_value(metric, a, b) < alpha
            except ValueError:
                return False

        ranked = sorted(methods, key=lambda m: self.mean(metric, m), reverse=True)
        bold = {ranked[0]}
        changed = True
        while changed:
            changed = False
            for m in ranked:
                if m in bold:
                    continue
                if any(not separable(s, m) for s in bold):
                    bold.add(m)
                    changed = True
        return bold

    def to_csv(self, path: str | Path) -> None:
        """One row per image with PSNR and SSIM columns per method."""
        methods = self.methods
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["image_id"]
                + [f"psnr_{m}" for m in methods]
                + [f"ssim_{m}" for m in methods]
            )
            for i, image_id in enumerate(self.image_ids):
                row = [image_id]
                row += [f"{self.psnr_scores[m][i]:.6f}" for m in methods]
                row += [f"{self.ssim_scores[m][i]:.6f}" for m in methods]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricReport":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        methods = [c[len("psnr_") :] for c in header if c.startswith("psnr_")]
        report = cls(image_ids=[r[0] for r in body])
        for m in methods:
            pi = header.index(f"psnr_{m}")
            si = header.index(f"ssim_{m}")
            report.add_method(
                m, [float(r[pi]) for r in body], [float(r[si]) for r in body]
            )
        return report

    def summary_table(self, title: str = "", alpha: float = 0.05) -> str:
        """Text table in mean PSNR/SSIM layout; *stars* mark the bold rule
        (best at p < alpha)."""
        bold_psnr = self.bold_methods("psnr", alpha)
        bold_ssim = self.bold_methods("ssim", alpha)
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'method':<16} {'PSNR (dB)':>14} {'SSIM':>12}")
        for m in self.methods:
            p = f"{self.mean('psnr', m):.2f}"
            s = f"{self.mean('ssim', m):.3f}"
            if m in bold_psnr:
                p = f"*{p}*"
            if m in bold_ssim:
                s = f"*{s}*"
            lines.append(f"{m:<16} {p:>14} {s:>12}")
        return "\n".join(lines) + "\n"
