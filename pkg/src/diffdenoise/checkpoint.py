"""Versioned checkpoint container shared by all trained stages.

The on-disk layout is deterministic (JSON header + raw little-endian float32
payloads), so retraining with the same seed on the same platform reproduces
the file byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

CHECKPOINT_MAGIC = b"DDNCKP01"
CHECKPOINT_VERSION = 1

# stage tag -> (config class, torch module builder); populated by the stage
# modules at import time
STAGE_CONFIGS: dict[str, type] = {}
STAGE_BUILDERS: dict[str, Callable[[Any], "object"]] = {}


class CheckpointFormatError(ValueError):
    """Corrupt or unsupported checkpoint file."""


class UntrainedModelError(RuntimeError):
    """Inference was requested on a handle that has not been trained."""


def register_stage(stage: str, config_cls: type, builder: Callable[[Any], "object"]) -> None:
    STAGE_CONFIGS[stage] = config_cls
    STAGE_BUILDERS[stage] = builder


def config_fingerprint(stage: str, config: Any) -> str:
    payload = {"stage": stage, "config": dataclasses.asdict(config)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class TrainedModel:
    """Opaque handle to a (possibly untrained) checkpointed network.

    ``provenance`` names the upstream artifacts this checkpoint was trained
    from (checkpoint fingerprints, manifest hashes, sampling seed scheme).
    """

    stage: str
    config: Any
    state: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)
    loss_history_smoothed: list[float] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    _module: Any = field(default=None, repr=False, compare=False)

    @property
    def is_trained(self) -> bool:
        return len(self.loss_history) > 0

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.stage, self.config)

    def module(self):
        """The torch module with this handle's weights, built lazily."""
        if self._module is None:
            import torch

            net = STAGE_BUILDERS[self.stage](self.config)
            net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
            net.eval()
            self._module = net
        return self._module

    def require_trained(self) -> None:
        if not self.is_trained:
            raise UntrainedModelError(f"{self.stage} model handle is untrained")


def state_from_module(net) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in net.state_dict().items()}


def smooth_loss_history(history: list[float], momentum: float = 0.6) -> list[float]:
    """Exponential smoothing followed by a running minimum, so the recorded
    curve is monotone non-increasing."""
    smoothed: list[float] = []
    ema = None
    best = float("inf")
    for value in history:
        ema = value if ema is None else momentum * ema + (1.0 - momentum) * value
        best = min(best, ema)
        smoothed.append(best)
    return smoothed


def save_checkpoint(path: str | Path, model: TrainedModel) -> None:
    arrays = list(model.state.items())
    header = {
        "stage": model.stage,
        "config": dataclasses.asdict(model.config),
        "fingerprint": model.fingerprint,
        "loss_history": model.loss_history,
        "loss_history_smoothed": model.loss_history_smoothed,
        "provenance": model.provenance,
        "arrays": [
            {"name": name, "shape": list(arr.shape), "dtype": "<f4"} for name, arr in arrays
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<IQ", CHECKPOINT_VERSION, len(header_bytes))
    blob += header_bytes
    for _, arr in arrays:
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> TrainedModel:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    version, header_len = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(blob[20 : 20 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header") from exc

    stage = header["stage"]
    if stage not in STAGE_CONFIGS:
        raise CheckpointFormatError(f"{path}: unknown stage tag {stage!r}")
    config = STAGE_CONFIGS[stage](**header["config"])

    state: dict[str, np.ndarray] = {}
    offset = 20 + header_len
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 4 * count
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointFormatError(f"{path}: truncated array payload")
        state[entry["name"]] = (
            np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"{path}: trailing bytes")

    model = TrainedModel(
        stage=stage,
        config=config,
        state=state,
        loss_history=list(header["loss_history"]),
        loss_history_smoothed=list(header["loss_history_smoothed"]),
        provenance=dict(header.get("provenance", {})),
    )
    if model.fingerprint != header["fingerprint"]:
        raise CheckpointFormatError(f"{path}: config fingerprint mismatch")
    return model
