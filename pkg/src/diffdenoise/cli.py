"""Command-line entry point: stage-by-stage or full pipeline execution over
a declarative YAML experiment config."""

from __future__ import annotations

import dataclasses
import sys

import click

from .config import ConfigError, load_config
from .pipeline import StageError, run_pipeline, verify_ledger_coverage
from .report import make_report
from .training import TrainingError


def _load(config_path: str, seed: int | None):
    try:
        return load_config(config_path, seed_override=seed)
    except (ConfigError, FileNotFoundError) as exc:
        click.echo(f"error in stage config: {exc}", err=True)
        sys.exit(2)


def _run(config, through: str | None):
    try:
        ledger = run_pipeline(config, through=through)
    except StageError as exc:
        click.echo(f"error in stage {exc.stage}: {exc}", err=True)
        sys.exit(1)
    except TrainingError as exc:
        click.echo(f"error in stage training: {exc}", err=True)
        sys.exit(1)
    return ledger


def _config_seed_options(fn):
    fn = click.option("--config", "config_path", required=True, type=click.Path(exists=True))(fn)
    fn = click.option("--seed", type=int, default=None, help="override the experiment seed")(fn)
    return fn


@click.group()
def main():
    """Self-supervised denoising pipeline."""


def _stage_command(name: str, through: str, help_text: str):
    @main.command(name=name, help=help_text)
    @_config_seed_options
    def cmd(config_path, seed):
        config = _load(config_path, seed)
        _run(config, through)
        click.echo(f"{name}: ok")

    return cmd


_stage_command("synth", "synth", "Generate clean/noisy datasets and manifests.")
_stage_command("train-bsn", "train-bsn", "Train the blind-spot conditioning network.")
_stage_command("train-diffusion", "train-diffusion", "Train the conditional diffusion model.")
_stage_command("distill", "distill", "Distill sampled outputs into a fast denoiser.")
_stage_command("eval", "eval", "Compute metrics on the held-out split.")


@main.command(name="sample", help="Run reverse-diffusion sampling on the dataset.")
@_config_seed_options
@click.option("--steps", type=int, default=None, help="override DDIM step count")
@click.option(
    "--mode", type=click.Choice(["srds", "single", "random-pair"]), default=None,
    help="sampling mode for the emitted outputs",
)
def sample_cmd(config_path, seed, steps, mode):
    config = _load(config_path, seed)
    overrides = {}
    if steps is not None:
        overrides["steps"] = steps
    if mode is not None:
        overrides["mode"] = mode
    if overrides:
        config = dataclasses.replace(config, srds=dataclasses.replace(config.srds, **overrides))
    _run(config, "sample")
    click.echo("sample: ok")


@main.command(name="iterate", help="Run the full multi-iteration chain.")
@_config_seed_options
def iterate_cmd(config_path, seed):
    config = _load(config_path, seed)
    _run(config, "eval")
    click.echo(f"iterate: ok ({config.iterations} iterations)")


@main.command(name="run", help="Run every configured stage end to end.")
@_config_seed_options
def run_cmd(config_path, seed):
    config = _load(config_path, seed)
    ledger = _run(config, None)
    verify_ledger_coverage(config.output_dir, ledger)
    click.echo(f"run: ok ({len(ledger.records)} ledger records)")


@main.command(name="report", help="Emit metric tables and plot data.")
@_config_seed_options
def report_cmd(config_path, seed):
    config = _load(config_path, seed)
    try:
        outputs = make_report(config)
    except StageError as exc:
        click.echo(f"error in stage {exc.stage}: {exc}", err=True)
        sys.exit(1)
    for rel in outputs:
        click.echo(rel)


if __name__ == "__main__":
    main()
