"""Command-line surface.

Settings come from (lowest to highest precedence) built-in defaults, an
optional JSON config file (``--config``), and explicit command-line flags.
Exit codes: 0 on success, 1 when some images failed but the run finished,
2 for configuration errors.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .bank import load_bank, save_bank
from .detect import DEFAULT_INCS_THRESHOLD
from .errors import ConfigError, ToolkitError
from .pipeline import (
    RunConfig,
    SWEEP_AXES,
    bank_summary,
    run_bank_build,
    run_eval,
    run_infer,
    run_render,
    run_sweep,
)
from .refine import DEFAULT_DETECTOR_THRESHOLD

EXIT_PARTIAL_FAILURE = 1
EXIT_CONFIG_ERROR = 2

# flag name -> RunConfig field
_FIELD_FOR_FLAG = {
    "manifest": "manifest",
    "bank": "bank",
    "backend": "backend",
    "mode": "mode",
    "threshold": "incs_threshold",
    "proposal_threshold": "detector_threshold",
    "norm_scope": "norm_scope",
    "out": "out",
    "jobs": "jobs",
    "limit": "prototypes_per_class",
}
_PATH_FIELDS = {"manifest", "bank", "out"}


def _config_options(fn):
    options = [
        click.option("--manifest", type=click.Path(path_type=Path), help="dataset manifest JSON"),
        click.option("--bank", type=click.Path(path_type=Path), help="prototype bank file"),
        click.option("--backend", default="file", show_default=True, help="feature backend id"),
        click.option(
            "--mode",
            type=click.Choice(["pixel", "masked"]),
            default="pixel",
            show_default=True,
        ),
        click.option(
            "--threshold",
            type=float,
            default=DEFAULT_INCS_THRESHOLD,
            show_default=True,
            help="inverse-similarity threshold for the OOD decision",
        ),
        click.option(
            "--proposal-threshold",
            type=float,
            default=DEFAULT_DETECTOR_THRESHOLD,
            show_default=True,
            help="minimum proposal score kept during refinement",
        ),
        click.option(
            "--norm-scope",
            type=click.Choice(["per-image", "per-dataset"]),
            default="per-image",
            show_default=True,
        ),
        click.option("--out", type=click.Path(path_type=Path), help="output directory"),
        click.option("--jobs", type=int, default=1, show_default=True, help="worker count"),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _resolve_config(ctx: click.Context, flags: dict) -> RunConfig:
    """Merge defaults, config-file values and explicit flags into a RunConfig."""
    file_values: dict = (ctx.obj or {}).get("file_config", {})
    resolved: dict = {}
    for flag, field in _FIELD_FOR_FLAG.items():
        if flag not in flags:
            continue
        source = ctx.get_parameter_source(flag)
        if source is not None and source.name == "COMMANDLINE":
            resolved[field] = flags[flag]
        elif field in file_values:
            resolved[field] = file_values[field]
        else:
            resolved[field] = flags[flag]
    for field in _PATH_FIELDS:
        if resolved.get(field) is not None:
            resolved[field] = Path(resolved[field])
    if resolved.get("manifest") is None:
        raise ConfigError("a manifest is required (--manifest or config file)")
    return RunConfig(**resolved)


def _finish(failures: int) -> None:
    if failures:
        click.echo(f"{failures} image(s) failed", err=True)
        sys.exit(EXIT_PARTIAL_FAILURE)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(path_type=Path),
    help="JSON file with default settings; explicit flags win",
)
@click.pass_context
def main(ctx: click.Context, config_path: Path | None) -> None:
    """Prototype-matching OOD detection and segmentation toolkit."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    ctx.ensure_object(dict)
    file_config: dict = {}
    if config_path is not None:
        try:
            file_config = json.loads(Path(config_path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            click.echo(f"error: cannot read config {config_path}: {exc}", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
        if not isinstance(file_config, dict):
            click.echo(f"error: config {config_path} must hold a JSON object", err=True)
            sys.exit(EXIT_CONFIG_ERROR)
    ctx.obj["file_config"] = file_config


def _guarded(ctx: click.Context, flags: dict, body) -> None:
    try:
        config = _resolve_config(ctx, flags)
        body(config)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    except ToolkitError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)


@main.group()
def bank() -> None:
    """Build and inspect prototype banks."""


@bank.command("build")
@_config_options
@click.option("--limit", type=int, default=20, show_default=True, help="prototypes per class")
@click.pass_context
def bank_build(ctx: click.Context, **flags) -> None:
    """Build a prototype bank from the manifest's instance masks."""

    def body(config: RunConfig) -> None:
        if config.bank is None:
            raise ConfigError("bank build needs --bank as the output path")
        built = run_bank_build(config)
        save_bank(built, config.bank)
        click.echo(f"wrote {config.bank}")
        click.echo(bank_summary(built))

    _guarded(ctx, flags, body)


@bank.command("inspect")
@click.option("--bank", type=click.Path(path_type=Path), required=True)
def bank_inspect(bank: Path) -> None:
    """Print bank dimensions, class names and per-class prototype counts."""
    try:
        click.echo(bank_summary(load_bank(bank)))
    except ToolkitError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)


@main.command()
@_config_options
@click.argument("image_ids", nargs=-1)
@click.pass_context
def infer(ctx: click.Context, image_ids: tuple[str, ...], **flags) -> None:
    """Run detection on the given image ids (default: every manifest image)."""

    def body(config: RunConfig) -> None:
        _finish(run_infer(config, list(image_ids) or None))

    _guarded(ctx, flags, body)


@main.command("eval")
@_config_options
@click.pass_context
def eval_cmd(ctx: click.Context, **flags) -> None:
    """Evaluate against OOD ground truth and write report.json + curves.csv."""

    def body(config: RunConfig) -> None:
        report, failures = run_eval(config)
        click.echo(
            f"aupr={report.aupr:.4f} fpr@95tpr={report.fpr_at_95tpr:.4f} "
            f"iou={report.iou:.4f} f1={report.f1:.4f}"
        )
        _finish(failures)

    _guarded(ctx, flags, body)


@main.command()
@_config_options
@click.option("--axis", type=click.Choice(list(SWEEP_AXES)), required=True)
@click.option("--grid", required=True, help="comma-separated grid values, e.g. 0.5,0.55,0.6")
@click.pass_context
def sweep(ctx: click.Context, axis: str, grid: str, **flags) -> None:
    """Evaluate along a hyperparameter grid and write sweep.csv."""

    def body(config: RunConfig) -> None:
        try:
            values = [float(v) for v in grid.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad grid {grid!r}: {exc}") from exc
        rows, failures = run_sweep(config, axis, values)
        for row in rows:
            click.echo(
                f"{row[0]}: iou={row[1]:.4f} f1={row[2]:.4f} aupr={row[3]:.4f} fpr={row[4]:.4f}"
            )
        _finish(failures)

    _guarded(ctx, flags, body)


@main.command()
@_config_options
@click.argument("image_id")
@click.pass_context
def render(ctx: click.Context, image_id: str, **flags) -> None:
    """Write an overlay PNG with detected OOD pixels blended in red."""

    def body(config: RunConfig) -> None:
        click.echo(str(run_render(config, image_id)))

    _guarded(ctx, flags, body)


if __name__ == "__main__":
    main()
