"""Experiment orchestration: stage sequencing with content-hash caching, an
append-only run ledger, and resumable execution.

Every stage writes to fixed paths under the output directory, records the
SHA-256 of each output in the ledger, and is skipped on re-runs when its key
(config slice plus upstream fingerprints) is unchanged and its outputs
verify. A cached output whose hash no longer matches aborts with an error
naming the stage.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import bsn as bsn_mod
from . import distill as distill_mod
from .checkpoint import TrainedModel, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, block_hash, config_hash, config_to_dict
from .data import (
    DatasetManifest,
    ManifestEntry,
    file_sha256,
    generate_phantoms,
    load_array,
    load_png,
    normalize_and_patchify,
    save_array,
    split_ids,
)
from .diffusion import build_diffusion, train_diffusion
from .metrics import MetricReport, psnr, ssim
from .noise import NoiseSpec, apply_noise
from .sampling import single_branch_sample, srds_sample, stability_sweep
from .seeding import derive_seed


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class StageHashError(StageError):
    """A cached output no longer matches its recorded hash."""


@dataclass
class StageRecord:
    stage: str
    regime: str
    iteration: int
    key: str
    outputs: dict
    wall_time: float
    metrics: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        payload = {
            "stage": self.stage,
            "regime": self.regime,
            "iteration": self.iteration,
            "key": self.key,
            "outputs": dict(sorted(self.outputs.items())),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "regime": self.regime,
            "iteration": self.iteration,
            "key": self.key,
            "outputs": self.outputs,
            "wall_time": self.wall_time,
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageRecord":
        return cls(**d)


class RunLedger:
    """Ordered stage records persisted as JSON next to the run outputs."""

    def __init__(self, path: Path, records: list[StageRecord] | None = None):
        self.path = Path(path)
        self.records: list[StageRecord] = records or []

    @classmethod
    def load_or_new(cls, path: str | Path) -> "RunLedger":
        path = Path(path)
        if path.exists():
            payload = json.loads(path.read_text())
            return cls(path, [StageRecord.from_dict(r) for r in payload["records"]])
        return cls(path)

    def find(self, stage: str, regime: str, iteration: int = 0) -> StageRecord | None:
        for record in self.records:
            if (record.stage, record.regime, record.iteration) == (stage, regime, iteration):
                return record
        return None

    def upsert(self, record: StageRecord) -> None:
        for i, existing in enumerate(self.records):
            if (existing.stage, existing.regime, existing.iteration) == (
                record.stage,
                record.regime,
                record.iteration,
            ):
                self.records[i] = record
                self.save()
                return
        self.records.append(record)
        self.save()

    def save(self) -> None:
        payload = {"records": [r.to_dict() for r in self.records]}
        self.path.write_text(json.dumps(payload, indent=2, sort_keys=True))

    def fingerprints(self) -> list[str]:
        return [r.fingerprint() for r in self.records]

    def referenced_files(self) -> list[str]:
        out: list[str] = []
        for record in self.records:
            out.extend(record.outputs)
        return out


def verify_ledger_coverage(root: str | Path, ledger: RunLedger) -> None:
    """Every file under the output directory (other than the ledger itself)
    must be referenced by exactly one ledger record."""
    root = Path(root)
    referenced = ledger.referenced_files()
    counts = {rel: referenced.count(rel) for rel in referenced}
    for path in sorted(root.rglob("*")):
        if path.is_dir() or path == ledger.path:
            continue
        rel = path.relative_to(root).as_posix()
        if counts.get(rel, 0) != 1:
            raise StageError("ledger", f"{rel} referenced {counts.get(rel, 0)} times")


def _execute(
    ledger: RunLedger,
    root: Path,
    stage: str,
    regime: str,
    iteration: int,
    key: str,
    builder: Callable[[], tuple[list[str], dict]],
) -> StageRecord:
    existing = ledger.find(stage, regime, iteration)
    if existing is not None and existing.key == key:
        if all((root / rel).exists() for rel in existing.outputs):
            for rel, digest in existing.outputs.items():
                actual = file_sha256(root / rel)
                if actual != digest:
                    raise StageHashError(stage, f"hash mismatch for {rel}")
            return existing
    start = time.perf_counter()
    try:
        outputs, metrics = builder()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc
    wall = time.perf_counter() - start
    record = StageRecord(
        stage=stage,
        regime=regime,
        iteration=iteration,
        key=key,
        outputs={rel: file_sha256(root / rel) for rel in outputs},
        wall_time=wall,
        metrics=metrics,
    )
    ledger.upsert(record)
    return record


# ---------------------------------------------------------------------------
# per-stage builders

SPLITS = ("train", "val", "test")


def _regime_dir(regime: str) -> str:
    return regime.replace("/", "_")


def _manifest_rel(regime: str, split: str) -> str:
    return f"{_regime_dir(regime)}/data/manifest_{split}.json"


def _ckpt_rel(regime: str, name: str) -> str:
    return f"{_regime_dir(regime)}/checkpoints/{name}.ckpt"


def _load_split(root: Path, regime: str, split: str):
    manifest = DatasetManifest.load(root / _manifest_rel(regime, split))
    return manifest.load_pairs(root)


def _source_images(config: ExperimentConfig) -> list[np.ndarray]:
    if config.data.kind == "phantom":
        return generate_phantoms(
            config.data.image_count, config.data.image_size, derive_seed(config.seed, "phantoms")
        )
    return [load_png(p) for p in config.data.local_paths]


def _stage_synth(config: ExperimentConfig, root: Path, regime: str, entry: NoiseSpec):
    def builder():
        images = _source_images(config)
        data_dir = root / _regime_dir(regime) / "data"
        data_dir.mkdir(parents=True, exist_ok=True)

        split_map = split_ids(
            [f"{i:04d}" for i in range(len(images))],
            config.data.splits,
            derive_seed(config.seed, "splits"),
        )
        source_fp = block_hash(
            {
                "data": config_to_dict(config)["data"],
                "noise": entry.to_dict(),
                "seed": config.seed,
            }
        )
        outputs: list[str] = []
        counts = {}
        for split in SPLITS:
            entries = []
            for image_id in split_map[split]:
                image = images[int(image_id)]
                patches = normalize_and_patchify(
                    image,
                    config.data.patch_size,
                    config.data.stride,
                    normalize=config.data.normalize == "per_image",
                )
                for p_idx, clean in enumerate(patches):
                    patch_id = f"{image_id}_{p_idx:03d}"
                    spec = entry.with_seed(
                        derive_seed(config.seed, regime, entry.seed, patch_id)
                    )
                    noisy = apply_noise(clean, spec)
                    clean_rel = f"{_regime_dir(regime)}/data/clean_{patch_id}.dda"
                    noisy_rel = f"{_regime_dir(regime)}/data/noisy_{patch_id}.dda"
                    save_array(root / clean_rel, clean)
                    save_array(root / noisy_rel, noisy)
                    outputs += [clean_rel, noisy_rel]
                    entries.append(
                        ManifestEntry(
                            patch_id=patch_id,
                            clean_path=clean_rel,
                            noisy_path=noisy_rel,
                            spec=spec,
                            clean_sha256=file_sha256(root / clean_rel),
                            noisy_sha256=file_sha256(root / noisy_rel),
                        )
                    )
            manifest = DatasetManifest(
                split=split, entries=tuple(entries), source_fingerprint=source_fp
            )
            rel = _manifest_rel(regime, split)
            manifest.save(root / rel)
            outputs.append(rel)
            counts[split] = len(entries)
        return outputs, counts

    key = block_hash(
        {
            "data": config_to_dict(config)["data"],
            "noise": entry.to_dict(),
            "seed": config.seed,
        }
    )
    return _execute(RUN_CONTEXT.ledger, root, "synth", regime, 0, key, builder)


@dataclass
class _RunContext:
    ledger: RunLedger | None = None


RUN_CONTEXT = _RunContext()


def _stage_train_bsn(config: ExperimentConfig, root: Path, regime: str, entry: NoiseSpec, synth):
    cfg = replace(
        config.bsn.resolved(entry.corr_sigma), seed=derive_seed(config.seed, regime, "bsn")
    )

    def builder():
        pairs = _load_split(root, regime, "train")
        noisy = [n for _, _, n in pairs]
        model = bsn_mod.train_bsn(bsn_mod.build_bsn(cfg), noisy, cfg)
        model.provenance = {
            "train_manifest": synth.outputs[_manifest_rel(regime, "train")],
        }
        rel = _ckpt_rel(regime, "bsn")
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(root / rel, model)
        return [rel], {"final_loss": model.loss_history[-1], "blind_spot": cfg.blind_spot_size}

    key = block_hash(
        {"bsn": cfg.__dict__, "train_manifest": synth.outputs[_manifest_rel(regime, "train")]}
    )
    return _execute(RUN_CONTEXT.ledger, root, "train-bsn", regime, 0, key, builder)


def _condition_fn(root: Path, regime: str, iteration: int) -> Callable[[np.ndarray], np.ndarray]:
    if iteration == 1:
        model = load_checkpoint(root / _ckpt_rel(regime, "bsn"))
        return lambda x: bsn_mod.bsn_denoise(model, x)
    prev = load_checkpoint(root / _ckpt_rel(regime, f"distilled_iter{iteration - 1}"))
    return lambda x: distill_mod.distilled_denoise(prev, x)


def _stage_train_diffusion(config: ExperimentConfig, root: Path, regime: str, k: int, upstream):
    cfg = replace(config.diffusion, seed=derive_seed(config.seed, regime, "diffusion", k))

    def builder():
        condition = _condition_fn(root, regime, k)
        condition_rel = _ckpt_rel(regime, "bsn" if k == 1 else f"distilled_iter{k - 1}")
        pairs = _load_split(root, regime, "train")
        train_pairs = [(n, condition(n)) for _, _, n in pairs]
        model = train_diffusion(build_diffusion(cfg), train_pairs, cfg.schedule(), cfg)
        model.provenance = {
            "condition_checkpoint": file_sha256(root / condition_rel),
            "train_manifest": file_sha256(root / _manifest_rel(regime, "train")),
        }
        rel = _ckpt_rel(regime, f"diffusion_iter{k}")
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(root / rel, model)
        return [rel], {"final_loss": model.loss_history[-1]}

    key = block_hash({"diffusion": cfg.__dict__, "upstream": upstream.fingerprint()})
    return _execute(RUN_CONTEXT.ledger, root, "train-diffusion", regime, k, key, builder)


def _stage_sample(config: ExperimentConfig, root: Path, regime: str, k: int, upstream):
    srds_cfg = config.srds

    def builder():
        model = load_checkpoint(root / _ckpt_rel(regime, f"diffusion_iter{k}"))
        schedule = model.config.schedule()
        condition = _condition_fn(root, regime, k)
        outputs: list[str] = []
        spread_rows = []
        for split in ("train", "test"):
            out_dir = root / _regime_dir(regime) / "samples" / f"iter{k}" / split
            out_dir.mkdir(parents=True, exist_ok=True)
            for patch_id, _, noisy in _load_split(root, regime, split):
                cond = condition(noisy)
                seed = derive_seed(config.seed, regime, "srds", k, patch_id)
                result = srds_sample(model, noisy, cond, schedule, srds_cfg.steps, seed)
                base = f"{_regime_dir(regime)}/samples/iter{k}/{split}"
                srds_rel = f"{base}/srds_{patch_id}.dda"
                single_rel = f"{base}/single_{patch_id}.dda"
                save_array(root / srds_rel, result.output.astype(np.float32))
                save_array(root / single_rel, result.branch_pos.astype(np.float32))
                outputs += [srds_rel, single_rel]
                spread_rows.append(
                    (patch_id, split, float(np.mean(np.abs(result.branch_pos - result.branch_neg))))
                )
                if srds_cfg.mode == "random-pair":
                    from .sampling import random_pair_average

                    pair = random_pair_average(
                        model, noisy, cond, schedule, srds_cfg.steps,
                        seed, derive_seed(seed, "random-pair-mate"),
                    )
                    pair_rel = f"{base}/pair_{patch_id}.dda"
                    save_array(root / pair_rel, pair.astype(np.float32))
                    outputs.append(pair_rel)
        spread_rel = f"{_regime_dir(regime)}/samples/iter{k}/branch_spread.csv"
        with open(root / spread_rel, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patch_id", "split", "branch_spread"])
            for row in spread_rows:
                writer.writerow([row[0], row[1], f"{row[2]:.8f}"])
        outputs.append(spread_rel)
        return outputs, {"images": len(spread_rows), "steps": srds_cfg.steps}

    key = block_hash(
        {"srds": srds_cfg.__dict__, "seed": config.seed, "upstream": upstream.fingerprint()}
    )
    return _execute(RUN_CONTEXT.ledger, root, "sample", regime, k, key, builder)


def _stage_distill(config: ExperimentConfig, root: Path, regime: str, k: int, upstream):
    cfg = replace(config.distill, seed=derive_seed(config.seed, regime, "distill", k))

    def builder():
        diffusion_model = load_checkpoint(root / _ckpt_rel(regime, f"diffusion_iter{k}"))
        pairs = _load_split(root, regime, "train")
        noisy = [n for _, _, n in pairs]
        targets = [
            load_array(
                root / f"{_regime_dir(regime)}/samples/iter{k}/train/srds_{patch_id}.dda"
            )
            for patch_id, _, _ in pairs
        ]
        dataset = distill_mod.DistillDataset(
            noisy=noisy, targets=targets, iteration=k,
            teacher_fingerprint=diffusion_model.fingerprint,
        )
        model = distill_mod.train_distilled(dataset, cfg)
        model.provenance = {
            "diffusion_checkpoint": file_sha256(root / _ckpt_rel(regime, f"diffusion_iter{k}")),
            "diffusion_fingerprint": diffusion_model.fingerprint,
            "srds_seed_scheme": block_hash(
                [derive_seed(config.seed, regime, "srds", k, pid) for pid, _, _ in pairs]
            ),
        }
        rel = _ckpt_rel(regime, f"distilled_iter{k}")
        save_checkpoint(root / rel, model)
        return [rel], {"final_loss": model.loss_history[-1]}

    key = block_hash({"distill": cfg.__dict__, "upstream": upstream.fingerprint()})
    return _execute(RUN_CONTEXT.ledger, root, "distill", regime, k, key, builder)


def _stage_eval(config: ExperimentConfig, root: Path, regime: str, k: int, upstream):
    def builder():
        condition = _condition_fn(root, regime, k)
        distilled = load_checkpoint(root / _ckpt_rel(regime, f"distilled_iter{k}"))
        pairs = _load_split(root, regime, "test")
        report = MetricReport(image_ids=[pid for pid, _, _ in pairs])
        methods: dict[str, list[np.ndarray]] = {
            "noisy": [], "condition": [], "single": [], "srds": [], "distilled": [],
        }
        cleans = []
        for patch_id, clean, noisy in pairs:
            cleans.append(clean)
            base = f"{_regime_dir(regime)}/samples/iter{k}/test"
            methods["noisy"].append(noisy)
            methods["condition"].append(condition(noisy))
            methods["single"].append(load_array(root / f"{base}/single_{patch_id}.dda"))
            methods["srds"].append(load_array(root / f"{base}/srds_{patch_id}.dda"))
            methods["distilled"].append(distill_mod.distilled_denoise(distilled, noisy))
        for name, images in methods.items():
            report.add_method(
                name,
                [psnr(c, img) for c, img in zip(cleans, images)],
                [ssim(c, img) for c, img in zip(cleans, images)],
            )
        rel = f"{_regime_dir(regime)}/eval/metrics_iter{k}.csv"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(root / rel)
        return [rel], {
            "images": len(pairs),
            "psnr_noisy": report.mean("psnr", "noisy"),
            "psnr_distilled": report.mean("psnr", "distilled"),
        }

    key = block_hash({"upstream": upstream.fingerprint()})
    return _execute(RUN_CONTEXT.ledger, root, "eval", regime, k, key, builder)


def _stage_ablation(config: ExperimentConfig, root: Path, regime: str, upstream):
    """4-cell grid: sampling mode (single vs srds) crossed with distillation."""
    cfg = replace(config.distill, seed=derive_seed(config.seed, regime, "ablation-distill"))

    def builder():
        diffusion_model = load_checkpoint(root / _ckpt_rel(regime, "diffusion_iter1"))
        train = _load_split(root, regime, "train")
        single_targets = [
            load_array(root / f"{_regime_dir(regime)}/samples/iter1/train/single_{pid}.dda")
            for pid, _, _ in train
        ]
        dataset = distill_mod.DistillDataset(
            noisy=[n for _, _, n in train], targets=single_targets, iteration=1,
            teacher_fingerprint=diffusion_model.fingerprint,
        )
        kd_single = distill_mod.train_distilled(dataset, cfg)
        kd_rel = f"{_regime_dir(regime)}/ablation/distilled_single.ckpt"
        (root / kd_rel).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(root / kd_rel, kd_single)

        kd_srds = load_checkpoint(root / _ckpt_rel(regime, "distilled_iter1"))
        test = _load_split(root, regime, "test")
        report = MetricReport(image_ids=[pid for pid, _, _ in test])
        cells: dict[str, list[np.ndarray]] = {
            "srds_off_kd_off": [], "srds_on_kd_off": [], "srds_off_kd_on": [], "srds_on_kd_on": [],
        }
        cleans = []
        for patch_id, clean, noisy in test:
            base = f"{_regime_dir(regime)}/samples/iter1/test"
            cleans.append(clean)
            cells["srds_off_kd_off"].append(load_array(root / f"{base}/single_{patch_id}.dda"))
            cells["srds_on_kd_off"].append(load_array(root / f"{base}/srds_{patch_id}.dda"))
            cells["srds_off_kd_on"].append(distill_mod.distilled_denoise(kd_single, noisy))
            cells["srds_on_kd_on"].append(distill_mod.distilled_denoise(kd_srds, noisy))
        for name, images in cells.items():
            report.add_method(
                name,
                [psnr(c, img) for c, img in zip(cleans, images)],
                [ssim(c, img) for c, img in zip(cleans, images)],
            )
        rel = f"{_regime_dir(regime)}/ablation/metrics.csv"
        report.to_csv(root / rel)
        return [kd_rel, rel], {"cells": len(cells)}

    key = block_hash({"distill": cfg.__dict__, "upstream": upstream.fingerprint()})
    return _execute(RUN_CONTEXT.ledger, root, "ablation", regime, 1, key, builder)


def _stage_stability(config: ExperimentConfig, root: Path, regime: str, upstream):
    srds_cfg = config.srds

    def builder():
        model = load_checkpoint(root / _ckpt_rel(regime, "diffusion_iter1"))
        schedule = model.config.schedule()
        condition = _condition_fn(root, regime, 1)
        distilled = load_checkpoint(root / _ckpt_rel(regime, "distilled_iter1"))
        test = _load_split(root, regime, "test")[: srds_cfg.stability_images]
        seeds = [
            derive_seed(config.seed, regime, "stability", i)
            for i in range(srds_cfg.stability_seeds)
        ]
        rel = f"{_regime_dir(regime)}/stability/seed_psnr.csv"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        with open(root / rel, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "seed_index", "single", "random_pair", "srds", "distilled"])
            for patch_id, clean, noisy in test:
                cond = condition(noisy)
                sweep = stability_sweep(
                    model, noisy, cond, clean, schedule, srds_cfg.steps, seeds
                )
                kd = psnr(clean, distill_mod.distilled_denoise(distilled, noisy))
                for i in range(len(seeds)):
                    writer.writerow(
                        [
                            patch_id, i,
                            f"{sweep.psnr_single[i]:.6f}",
                            f"{sweep.psnr_random_pair[i]:.6f}",
                            f"{sweep.psnr_srds[i]:.6f}",
                            f"{kd:.6f}",
                        ]
                    )
        return [rel], {"seeds": len(seeds), "images": len(test)}

    key = block_hash(
        {"srds": srds_cfg.__dict__, "seed": config.seed, "upstream": upstream.fingerprint()}
    )
    return _execute(RUN_CONTEXT.ledger, root, "seed-stability", regime, 1, key, builder)


# ---------------------------------------------------------------------------
# top-level orchestration

STAGE_ORDER = ("synth", "train-bsn", "train-diffusion", "sample", "distill", "eval")


def run_pipeline(config: ExperimentConfig, through: str | None = None) -> RunLedger:
    """Execute the stage graph, skipping cached stages; ``through`` limits
    execution to the prefix ending at that stage (for the CLI subcommands)."""
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    ledger = RunLedger.load_or_new(root / "ledger.json")
    RUN_CONTEXT.ledger = ledger

    def write_lock():
        rel = "config.lock.json"
        payload = {"config": config_to_dict(config), "hash": config_hash(config)}
        (root / rel).write_text(json.dumps(payload, indent=2, sort_keys=True))
        return [rel], {}

    _execute(ledger, root, "config", "", 0, config_hash(config), write_lock)

    limit = STAGE_ORDER.index(through) if through in STAGE_ORDER else len(STAGE_ORDER) - 1
    for entry in config.noise:
        regime = entry.tag()
        synth = _stage_synth(config, root, regime, entry)
        if limit < 1:
            continue
        bsn_rec = _stage_train_bsn(config, root, regime, entry, synth)
        if limit < 2:
            continue
        upstream = bsn_rec
        for k in range(1, config.iterations + 1):
            diff_rec = _stage_train_diffusion(config, root, regime, k, upstream)
            if limit < 3:
                break
            sample_rec = _stage_sample(config, root, regime, k, diff_rec)
            if limit < 4:
                break
            distill_rec = _stage_distill(config, root, regime, k, sample_rec)
            if limit < 5:
                break
            upstream = _stage_eval(config, root, regime, k, distill_rec)
        if through is None and limit >= 5:
            if config.ablation:
                _stage_ablation(config, root, regime, ledger.find("eval", regime, 1))
            if config.seed_stability:
                _stage_stability(config, root, regime, ledger.find("eval", regime, 1))
    return ledger
