"""Command-line front end for the incremental identification pipeline.

Each subcommand maps to one pipeline stage and reads its inputs from the
run directory written by the earlier stages; `pipeline` chains every stage
for a case. Exit codes: 0 success, 2 configuration error, 3 missing
stage dependency, 4 numerical failure.
"""
from __future__ import annotations

import sys
from pathlib import Path

import click

from .errors import (
    ConfigError,
    DependencyError,
    HybridIdError,
)
from .pipeline import (
    STAGES,
    PipelineConfig,
    cstr_pipeline_config,
    pipeline_config_from_doc,
    run_pipeline,
    tank_pipeline_config,
)
from .serialize import read_json

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERICAL = 4


def _build_config(case, config_path, seed, tau, wreg, epochs) -> PipelineConfig:
    if config_path is not None:
        doc = read_json(config_path)
        doc.pop("schema_version", None)
        doc.pop("config_hash", None)
        cfg = pipeline_config_from_doc(doc)
        if case is not None and case != cfg.case:
            raise ConfigError(
                f"--case {case!r} conflicts with config case {cfg.case!r}"
            )
    else:
        factory = {
            "cstr": cstr_pipeline_config,
            "three-tank": tank_pipeline_config,
        }[case or "cstr"]
        cfg = factory()
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if tau is not None:
        overrides["tau"] = tau
    if wreg is not None:
        overrides["w_reg"] = wreg
    if epochs is not None:
        overrides["epochs"] = epochs
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg


def _run_stage(stage: str, cfg: PipelineConfig, out: Path) -> None:
    summary = STAGES[stage](cfg, Path(out))
    click.echo(f"{stage}: {_one_line(summary)}")


def _one_line(summary) -> str:
    if isinstance(summary, dict):
        parts = []
        for k, v in summary.items():
            if isinstance(v, float):
                parts.append(f"{k}={v:.6g}")
            elif isinstance(v, (str, int, bool)) or v is None:
                parts.append(f"{k}={v}")
        return " ".join(parts) if parts else "ok"
    return "ok"


def _stage_command(name: str, help_text: str):
    @click.option("--case", type=click.Choice(["cstr", "three-tank"]))
    @click.option("--config", "config_path", type=click.Path(exists=False))
    @click.option("--out", type=click.Path(), default="runs/default",
                  show_default=True)
    @click.option("--seed", type=int, default=None)
    @click.option("--tau", type=float, default=None)
    @click.option("--wreg", type=float, default=None)
    @click.option("--epochs", type=int, default=None)
    def command(case, config_path, out, seed, tau, wreg, epochs):
        cfg = _build_config(case, config_path, seed, tau, wreg, epochs)
        _run_stage(name, cfg, Path(out))

    command.__name__ = name.replace("-", "_")
    command.__doc__ = help_text
    return command


@click.group()
def main():
    """Incremental identification of dynamic hybrid models."""


for _name, _help in [
    ("gen-data", "Generate pseudo-experimental datasets (Step 0)."),
    ("estimate", "Regularized dynamic flux estimation (Step 1)."),
    ("table", "Collect the (states, MVs, fluxes) training table."),
    ("correlate", "Pearson screening of flux-map inputs (Step 2)."),
    ("train", "Train the per-flux networks (Step 3)."),
    ("assemble", "Bind trained maps into the hybrid model (Step 4)."),
    ("simulate", "Validate the hybrid on the held-out MV profile."),
    ("evaluate", "Re-score the training datasets with the hybrid."),
    ("mpc", "Run the closed-loop NMPC study (three-tank case)."),
]:
    main.command(name=_name)(_stage_command(_name, _help))


@main.command(name="pipeline")
@click.option("--case", type=click.Choice(["cstr", "three-tank"]))
@click.option("--config", "config_path", type=click.Path(exists=False))
@click.option("--out", type=click.Path(), default="runs/default",
              show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--tau", type=float, default=None)
@click.option("--wreg", type=float, default=None)
@click.option("--epochs", type=int, default=None)
def pipeline_cmd(case, config_path, out, seed, tau, wreg, epochs):
    """Run every stage of the selected case end to end."""
    cfg = _build_config(case, config_path, seed, tau, wreg, epochs)
    summaries = run_pipeline(cfg, Path(out))
    for stage, summary in summaries.items():
        click.echo(f"{stage}: {_one_line(summary)}")


def entry() -> int:
    try:
        main.main(standalone_mode=False)
        return 0
    except click.exceptions.UsageError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        click.echo(f"dependency error: {exc}", err=True)
        return EXIT_DEPENDENCY
    except DependencyError as exc:
        click.echo(f"dependency error: {exc}", err=True)
        return EXIT_DEPENDENCY
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except HybridIdError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(entry())
