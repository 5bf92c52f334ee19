"""Shared training plumbing for the torch-backed stages."""

from __future__ import annotations

import numpy as np
import torch


class TrainingError(RuntimeError):
    """Loss diverged or the forward pass produced non-finite values.

    ``last_good`` carries the most recent finite-loss checkpoint when one
    exists.
    """

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


def to_tensor(patches: list[np.ndarray] | np.ndarray) -> torch.Tensor:
    """Stack 2-D float patches into a (N, 1, H, W) float32 tensor."""
    arr = np.asarray(patches, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr).unsqueeze(1)


def minibatches(data: torch.Tensor, batch_size: int, shuffle_seed: int):
    """Deterministically shuffled minibatch views of the leading dimension."""
    order = np.random.default_rng(shuffle_seed).permutation(data.shape[0])
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield data[torch.from_numpy(idx)]


def paired_minibatches(a: torch.Tensor, b: torch.Tensor, batch_size: int, shuffle_seed: int):
    """Like ``minibatches`` but keeps two tensors aligned."""
    order = np.random.default_rng(shuffle_seed).permutation(a.shape[0])
    for start in range(0, len(order), batch_size):
        idx = torch.from_numpy(order[start : start + batch_size])
        yield a[idx], b[idx]
