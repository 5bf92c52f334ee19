"""Dataset plumbing: phantom generation, normalization and patch extraction,
a small lossless binary array format, PNG import/export, and split manifests.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .noise import NoiseSpec

ARRAY_MAGIC = b"DDNARR01"
ARRAY_VERSION = 1
DTYPE_FLOAT32 = 1

MIN_PATCH_SIZE = 16


class ArrayFormatError(ValueError):
    """Corrupt or unsupported array file."""


class NormalizationError(ValueError):
    """Constant image cannot be normalized."""


def validate_patch(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("image patch must be 2-D")
    if arr.shape[0] < MIN_PATCH_SIZE or arr.shape[1] < MIN_PATCH_SIZE:
        raise ValueError(f"image patch must be at least {MIN_PATCH_SIZE}x{MIN_PATCH_SIZE}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image patch contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# phantom generation


def _soft_edge(d: np.ndarray, width: float) -> np.ndarray:
    """Smooth 1 -> 0 transition of the signed distance ``d`` over ``width``."""
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -60.0, 60.0)))


def _render_phantom(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    # smooth background ramp
    theta = rng.uniform(0, 2 * np.pi)
    img = 0.15 * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(-0.1, 0.1)

    # filled ellipses with smooth intensity ramps
    for _ in range(rng.integers(3, 7)):
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        ax_, ay_ = rng.uniform(0.08, 0.35, size=2)
        phi = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
        v = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
        d = np.sqrt((u / ax_) ** 2 + (v / ay_) ** 2) - 1.0
        ramp = 1.0 + rng.uniform(-0.5, 0.5) * (u / ax_)
        img += rng.uniform(-0.35, 0.4) * _soft_edge(d, rng.uniform(0.02, 0.10)) * ramp

    # curved ribbons
    for _ in range(rng.integers(1, 4)):
        a, b, c = rng.uniform(-0.8, 0.8), rng.uniform(-1.5, 1.5), rng.uniform(0.2, 0.8)
        width = rng.uniform(0.015, 0.05)
        d = yy - (a * (xx - 0.5) ** 2 + b * (xx - 0.5) + c)
        img += rng.uniform(-0.25, 0.3) * np.exp(-0.5 * (d / width) ** 2)

    # fine high-frequency line structures (detail-preservation probes)
    for _ in range(rng.integers(2, 6)):
        phi = rng.uniform(0, np.pi)
        offset = rng.uniform(0.1, 0.9)
        d = (np.cos(phi) * xx + np.sin(phi) * yy) - offset
        width = rng.uniform(0.6, 1.4) / size
        img += rng.uniform(0.08, 0.2) * rng.choice([-1.0, 1.0]) * np.exp(-0.5 * (d / width) ** 2)

    lo, hi = img.min(), img.max()
    if hi == lo:  # unreachable with the structures above; keep the map total
        img = img + xx
        lo, hi = img.min(), img.max()
    return (0.05 + 0.90 * (img - lo) / (hi - lo)).astype(np.float32)


def generate_phantoms(count: int, size: int, seed: int) -> list[np.ndarray]:
    """Anatomical-style phantoms: smooth shapes plus fine line details,
    values in [0.05, 0.95], deterministic per (count, size, seed)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if size < 32:
        raise ValueError("size must be >= 32")
    return [
        _render_phantom(size, np.random.default_rng([int(seed), i])) for i in range(count)
    ]


# ---------------------------------------------------------------------------
# normalization and patch extraction


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Linear map of the image range onto [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        raise NormalizationError("cannot normalize a constant image")
    return ((image - lo) / (hi - lo)).astype(np.float32)


def normalize_and_patchify(
    image: np.ndarray, patch_size: int, stride: int, normalize: bool = True
) -> list[np.ndarray]:
    """Normalize the source image, then tile patches with the given stride.

    Partial edge patches are dropped.
    """
    if patch_size < MIN_PATCH_SIZE:
        raise ValueError(f"patch_size must be >= {MIN_PATCH_SIZE}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    image = normalize_image(image) if normalize else np.asarray(image, dtype=np.float32)
    h, w = image.shape
    patches = []
    for y in range(0, h - patch_size + 1, stride):
        for x in range(0, w - patch_size + 1, stride):
            patches.append(image[y : y + patch_size, x : x + patch_size].copy())
    return patches


def split_ids(ids: list[str], fractions: dict[str, float], seed: int) -> dict[str, list[str]]:
    """Deterministic disjoint split of ids by the given fractions."""
    total = sum(fractions.values())
    if not 0.999 <= total <= 1.001:
        raise ValueError("split fractions must sum to 1")
    order = list(ids)
    np.random.default_rng(seed).shuffle(order)
    splits: dict[str, list[str]] = {}
    start = 0
    names = list(fractions)
    for i, name in enumerate(names):
        count = len(order) - start if i == len(names) - 1 else round(fractions[name] * len(order))
        splits[name] = sorted(order[start : start + count])
        start += count
    return splits


# ---------------------------------------------------------------------------
# binary array format


def save_array(path: str | Path, arr: np.ndarray) -> None:
    """Lossless float32 round-trip format, little-endian."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("only 2-D arrays are supported")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite values")
    data = np.ascontiguousarray(arr, dtype="<f4")
    header = ARRAY_MAGIC + struct.pack(
        "<IIII", ARRAY_VERSION, DTYPE_FLOAT32, arr.shape[0], arr.shape[1]
    )
    Path(path).write_bytes(header + data.tobytes())


def load_array(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 24:
        raise ArrayFormatError(f"{path}: truncated header")
    if blob[:8] != ARRAY_MAGIC:
        raise ArrayFormatError(f"{path}: bad magic bytes")
    version, dtype_tag, height, width = struct.unpack("<IIII", blob[8:24])
    if version != ARRAY_VERSION:
        raise ArrayFormatError(f"{path}: unsupported version {version}")
    if dtype_tag != DTYPE_FLOAT32:
        raise ArrayFormatError(f"{path}: unsupported dtype tag {dtype_tag}")
    expected = 24 + 4 * height * width
    if len(blob) != expected:
        raise ArrayFormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob[24:], dtype="<f4").reshape(height, width).copy()


def save_png(path: str | Path, arr: np.ndarray) -> None:
    """16-bit grayscale export; values clipped to [0, 1] here and only here."""
    arr = np.asarray(arr, dtype=np.float64)
    scaled = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(Path(path))


def load_png(path: str | Path) -> np.ndarray:
    img = Image.open(Path(path))
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    scale = 65535.0 if arr.max() > 255 else 255.0
    return (arr / scale).astype(np.float32)


# ---------------------------------------------------------------------------
# manifests


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(frozen=True)
class ManifestEntry:
    patch_id: str
    clean_path: str
    noisy_path: str
    spec: NoiseSpec
    clean_sha256: str
    noisy_sha256: str

    def to_dict(self) -> dict:
        return {
            "patch_id": self.patch_id,
            "clean_path": self.clean_path,
            "noisy_path": self.noisy_path,
            "spec": self.spec.to_dict(),
            "clean_sha256": self.clean_sha256,
            "noisy_sha256": self.noisy_sha256,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            patch_id=d["patch_id"],
            clean_path=d["clean_path"],
            noisy_path=d["noisy_path"],
            spec=NoiseSpec.from_dict(d["spec"]),
            clean_sha256=d["clean_sha256"],
            noisy_sha256=d["noisy_sha256"],
        )


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    entries: tuple[ManifestEntry, ...]
    source_fingerprint: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "split": self.split,
                "source_fingerprint": self.source_fingerprint,
                "entries": [e.to_dict() for e in self.entries],
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            split=d["split"],
            entries=tuple(ManifestEntry.from_dict(e) for e in d["entries"]),
            source_fingerprint=d["source_fingerprint"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())

    def verify(self, root: str | Path) -> None:
        """Check that every referenced file exists with the recorded hash."""
        root = Path(root)
        for e in self.entries:
            for rel, digest in ((e.clean_path, e.clean_sha256), (e.noisy_path, e.noisy_sha256)):
                p = root / rel
                if not p.exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")
                actual = file_sha256(p)
                if actual != digest:
                    raise ArrayFormatError(f"hash mismatch for {p}")

    def load_pairs(self, root: str | Path) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(patch_id, clean, noisy) triples in manifest order."""
        root = Path(root)
        return [
            (e.patch_id, load_array(root / e.clean_path), load_array(root / e.noisy_path))
            for e in self.entries
        ]


def load_local_images(paths: list[str | Path]) -> list[np.ndarray]:
    """Ingest local grayscale images (PNG) as float arrays in [0, 1]."""
    return [load_png(p) for p in paths]
