"""The ``dtgen`` command: a four-stage synthetic-data pipeline.

Typical flow:

    dtgen init run/
    dtgen ingest real_data/ --root run/ --origin real --split train
    dtgen finetune --root run/
    dtgen generate --root run/ --n 200
    dtgen filter --root run/
    dtgen export --root run/ --task three-class
    dtgen eval --root run/ --pred predictions.csv --task binary
    dtgen report --root run/

Exit codes: 0 success, 1 validation error, 2 backend error, 3 partial
success (some requests failed, the successful subset was kept).  Stage
commands are resumable: re-running a completed stage is a no-op unless
``--force``.  The backend endpoint comes from ``--endpoint``, the
``DTGEN_ENDPOINT`` environment variable, or the config file, in that order;
the special value ``mock:`` runs fully in-process.  ``--seed`` overrides the
configured master seed for derived randomness.
"""

from __future__ import annotations

import logging
import sys

import click

from . import backend_gateway as gw
from . import pipeline
from .adapter_math import AdapterError
from .dataset_store import StoreError, StoreLock, StoreLockError
from .eval_metrics import MetricsError
from .prompt_grammar import RenderError, TemplateError
from .quality_filter import CalibrationError, FilterError, ScoringError

logger = logging.getLogger(__name__)

_VALIDATION_ERRORS = (
    pipeline.PipelineError,
    StoreError,
    StoreLockError,
    TemplateError,
    RenderError,
    FilterError,
    ScoringError,
    CalibrationError,
    MetricsError,
    AdapterError,
    ValueError,
)


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool) -> None:
    """Few-shot tableware-dirt synthetic data pipeline."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _root_option(func):
    return click.option(
        "--root",
        type=click.Path(file_okay=False),
        default=".",
        show_default=True,
        help="Storage root created by init.",
    )(func)


def _seed_option(func):
    return click.option(
        "--seed", type=int, default=None, help="Override the configured master seed."
    )(func)


def _endpoint_option(func):
    return click.option(
        "--endpoint",
        default=None,
        help="Backend URL; 'mock:' runs in-process. Overrides DTGEN_ENDPOINT and config.",
    )(func)


@cli.command()
@click.argument("directory", type=click.Path(file_okay=False))
@click.option(
    "--template",
    "template_src",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Template JSON to copy in; defaults to the shipped template.",
)
@click.option("--force", is_flag=True, help="Overwrite an existing config.")
def init(directory: str, template_src: str | None, force: bool) -> None:
    """Scaffold DIRECTORY with config, template, and an empty manifest."""
    root = pipeline.init_run(directory, template_src, force)
    click.echo(f"initialized {root}")


@cli.command()
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False))
@_root_option
@click.option(
    "--origin",
    type=click.Choice(["real", "synthetic"]),
    default="real",
    show_default=True,
)
@click.option(
    "--split",
    type=click.Choice(["train", "test", "none"]),
    default="train",
    show_default=True,
)
def ingest(data_dir: str, root: str, origin: str, split: str) -> None:
    """Ingest DATA_DIR/<label_name>/* images into the manifest."""
    ctx = pipeline.load_context(root)
    with StoreLock(root):
        counts = pipeline.ingest_directory(ctx, data_dir, origin, split)
    total = sum(counts.values())
    click.echo(f"ingested {total} images: {counts}")


@cli.command()
@_root_option
@_seed_option
@_endpoint_option
@click.option("--force", is_flag=True, help="Re-run even if already completed.")
def finetune(root: str, seed: int | None, endpoint: str | None, force: bool) -> None:
    """Submit the adapter fine-tuning job over the ingested real data."""
    ctx = pipeline.load_context(root, seed_override=seed)
    client, _ = pipeline.make_client(ctx, endpoint)
    with StoreLock(root):
        outcome = pipeline.stage_finetune(ctx, client, force=force)
    if outcome.get("skipped"):
        click.echo(f"finetune already complete (adapter {outcome['adapter_id']}); use --force")
    else:
        click.echo(f"adapter {outcome['adapter_id']} trained (job {outcome['job_id']})")


@cli.command()
@_root_option
@_seed_option
@_endpoint_option
@click.option("--n", type=int, default=None, help="Number of images; defaults to config n.")
@click.option("--force", is_flag=True, help="Re-run even if already completed.")
def generate(
    root: str, seed: int | None, endpoint: str | None, n: int | None, force: bool
) -> None:
    """Sample prompts and generate the synthetic image set."""
    ctx = pipeline.load_context(root, seed_override=seed)
    client, _ = pipeline.make_client(ctx, endpoint)
    try:
        with StoreLock(root):
            outcome = pipeline.stage_generate(ctx, client, n=n, force=force)
    except pipeline.PartialFailure as exc:
        for failure in exc.failures:
            click.echo(
                f"failed {failure['request_id']} after {failure['attempts']} attempts: "
                f"{failure['message']}",
                err=True,
            )
        raise
    if outcome.get("skipped"):
        click.echo("generate already complete; use --force")
    else:
        click.echo(
            f"generated {outcome['succeeded']}/{outcome['requested']} images "
            f"({outcome['records']} records)"
        )


@cli.command("filter")
@_root_option
@_seed_option
@_endpoint_option
@click.option("--alpha", type=float, default=None, help="Override the configured alpha.")
@click.option(
    "--rule",
    type=click.Choice(["lower-tail", "upper-tail"]),
    default=None,
    help="Threshold direction; default from config.",
)
@click.option("--force", is_flag=True, help="Re-run even if already completed.")
def filter_cmd(
    root: str,
    seed: int | None,
    endpoint: str | None,
    alpha: float | None,
    rule: str | None,
    force: bool,
) -> None:
    """Score synthetic images against prompts and apply the adaptive filter."""
    ctx = pipeline.load_context(root, seed_override=seed)
    client, _ = pipeline.make_client(ctx, endpoint)
    with StoreLock(root):
        outcome = pipeline.stage_filter(ctx, client, alpha=alpha, rule=rule, force=force)
    if outcome.get("skipped"):
        click.echo("filter already complete; use --force")
    else:
        click.echo(
            f"kept {outcome['kept']} / rejected {outcome['rejected']} "
            f"(retention {outcome['retention']:.4f}); report at {outcome['report']}"
        )


@cli.command()
@_root_option
@click.option(
    "--task",
    type=click.Choice(["three-class", "binary"]),
    required=True,
    help="Label mapping for the export.",
)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def export(root: str, task: str, out: str | None) -> None:
    """Write the directory-per-class training bundle from kept samples."""
    ctx = pipeline.load_context(root)
    with StoreLock(root):
        summary = pipeline.stage_export(ctx, task, out)
    click.echo(f"exported {summary['total']} images: {summary['counts']}")
    click.echo(f"index at {summary['index']}")


@cli.command("eval")
@_root_option
@click.option("--pred", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option(
    "--task",
    type=click.Choice(["three-class", "binary"]),
    default="binary",
    show_default=True,
)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def eval_cmd(root: str, pred: str, task: str, out: str | None) -> None:
    """Compute metrics from a prediction CSV (sample_id,true_label,predicted_label)."""
    ctx = pipeline.load_context(root)
    with StoreLock(root):
        payload = pipeline.stage_eval(ctx, pred, task, out)
    click.echo(payload["table_text"])


@cli.command()
@_root_option
def report(root: str) -> None:
    """Write report.json and figures summarizing the manifest."""
    ctx = pipeline.load_context(root)
    with StoreLock(root):
        payload = pipeline.stage_report(ctx)
    counts = payload["counts"]
    click.echo(
        f"real {counts['real']}, synthetic {counts['synthetic']}, "
        f"selected {counts['selected']}, rejected {counts['rejected']}, "
        f"retention {payload['retention']:.4f}"
    )
    click.echo(f"report at {pipeline.REPORT_NAME}")


def main() -> None:
    """Entry point with the documented exit-code mapping."""
    try:
        cli(standalone_mode=False)
    except click.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except pipeline.PartialFailure as exc:
        click.echo(f"partial success: {exc}", err=True)
        sys.exit(3)
    except gw.GatewayError as exc:
        click.echo(f"backend error: {exc}", err=True)
        sys.exit(2)
    except _VALIDATION_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
