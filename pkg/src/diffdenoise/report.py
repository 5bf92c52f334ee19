"""Report emission: per-regime metric tables with significance bolding, the
sampling/distillation ablation grid, and seed-stability plot data."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, block_hash
from .metrics import MetricReport
from .pipeline import RUN_CONTEXT, RunLedger, StageError, _execute, _regime_dir


ABLATION_CELLS = ("srds_off_kd_off", "srds_on_kd_off", "srds_off_kd_on", "srds_on_kd_on")

CELL_LABELS = {
    "srds_off_kd_off": ("-", "-"),
    "srds_on_kd_off": ("x", "-"),
    "srds_off_kd_on": ("-", "x"),
    "srds_on_kd_on": ("x", "x"),
}


def _pvalue_rows(report: MetricReport, metric: str) -> list[list[str]]:
    rows = [["method_a", "method_b", "p_value"]]
    methods = report.methods
    for i, a in enumerate(methods):
        for b in methods[i + 1 :]:
            try:
                value = f"{report.p_value(metric, a, b):.6g}"
            except ValueError:
                value = "nan"
            rows.append([a, b, value])
    return rows


def _write_csv(path: Path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def _ablation_table(report: MetricReport) -> str:
    bold = report.bold_methods("psnr")
    lines = ["SRDS  KD    PSNR (dB)    SSIM"]
    for cell in ABLATION_CELLS:
        srds_mark, kd_mark = CELL_LABELS[cell]
        p = f"{report.mean('psnr', cell):.2f}"
        if cell in bold:
            p = f"*{p}*"
        lines.append(
            f"{srds_mark:<5} {kd_mark:<5} {p:>9}    {report.mean('ssim', cell):.3f}"
        )
    return "\n".join(lines) + "\n"


def make_report(config: ExperimentConfig, ledger: RunLedger | None = None) -> list[str]:
    """Emit report files from a completed run; returns relative paths.

    Raises when the ledger lacks the eval records the report needs.
    """
    root = Path(config.output_dir)
    if ledger is None:
        ledger_path = root / "ledger.json"
        if not ledger_path.exists():
            raise StageError("report", "no ledger found; run the pipeline first")
        ledger = RunLedger.load_or_new(ledger_path)
    RUN_CONTEXT.ledger = ledger

    eval_records = [r for r in ledger.records if r.stage == "eval"]
    if not eval_records:
        raise StageError("report", "incomplete ledger: no eval records")

    def builder():
        outputs: list[str] = []
        report_dir = root / "report"
        report_dir.mkdir(parents=True, exist_ok=True)
        for record in eval_records:
            regime, k = record.regime, record.iteration
            report = MetricReport.from_csv(root / f"{_regime_dir(regime)}/eval/metrics_iter{k}.csv")

            rel = f"report/summary_{_regime_dir(regime)}_iter{k}.txt"
            title = f"{config.name} | {regime} | iteration {k} (test split, n={len(report.image_ids)})"
            (root / rel).write_text(report.summary_table(title=title))
            outputs.append(rel)

            rel = f"report/pvalues_{_regime_dir(regime)}_iter{k}.csv"
            _write_csv(root / rel, _pvalue_rows(report, "psnr"))
            outputs.append(rel)

        for record in [r for r in ledger.records if r.stage == "ablation"]:
            regime = record.regime
            report = MetricReport.from_csv(root / f"{_regime_dir(regime)}/ablation/metrics.csv")
            if set(report.methods) != set(ABLATION_CELLS):
                raise StageError("report", f"ablation grid must have exactly 4 cells, got {report.methods}")
            rel = f"report/ablation_{_regime_dir(regime)}.txt"
            (root / rel).write_text(_ablation_table(report))
            outputs.append(rel)
            rel = f"report/ablation_{_regime_dir(regime)}.csv"
            rows = [["srds", "kd", "mean_psnr", "std_psnr", "mean_ssim"]]
            for cell in ABLATION_CELLS:
                srds_mark, kd_mark = CELL_LABELS[cell]
                rows.append(
                    [
                        "on" if srds_mark == "x" else "off",
                        "on" if kd_mark == "x" else "off",
                        f"{report.mean('psnr', cell):.6f}",
                        f"{report.std('psnr', cell):.6f}",
                        f"{report.mean('ssim', cell):.6f}",
                    ]
                )
            _write_csv(root / rel, rows)
            outputs.append(rel)

        for record in [r for r in ledger.records if r.stage == "seed-stability"]:
            regime = record.regime
            src = root / f"{_regime_dir(regime)}/stability/seed_psnr.csv"
            with open(src, newline="") as fh:
                rows = list(csv.reader(fh))
            header, body = rows[0], rows[1:]
            seed_indices = sorted({int(r[1]) for r in body})
            agg_rows = [["seed_index", "single", "random_pair", "srds", "distilled"]]
            for idx in seed_indices:
                sub = [r for r in body if int(r[1]) == idx]
                agg_rows.append(
                    [str(idx)]
                    + [
                        f"{np.mean([float(r[header.index(col)]) for r in sub]):.6f}"
                        for col in ("single", "random_pair", "srds", "distilled")
                    ]
                )
            rel = f"report/stability_{_regime_dir(regime)}.csv"
            _write_csv(root / rel, agg_rows)
            outputs.append(rel)
        return outputs, {"tables": len(outputs)}

    key = block_hash({"evals": [r.fingerprint() for r in ledger.records if r.stage in ("eval", "ablation", "seed-stability")]})
    record = _execute(ledger, root, "report", "", 0, key, builder)
    return list(record.outputs)
