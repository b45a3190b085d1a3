"""Command line entry points for running and probing the worker."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import PROFILES, get_profile
from .service import WorkerRuntime, create_app


@click.group()
def main() -> None:
    """Model worker speaking the dtgen backend contract over HTTP."""


def _runtime(profile: str, artifacts: str, data_root: str) -> WorkerRuntime:
    cfg = get_profile(profile)
    return WorkerRuntime(cfg, Path(artifacts), Path(data_root))


@main.command()
@click.option(
    "--profile",
    type=click.Choice(sorted(PROFILES)),
    default="production",
    show_default=True,
    help="Model profile to serve.",
)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8801, show_default=True, type=int)
@click.option(
    "--artifacts",
    default="worker-artifacts",
    show_default=True,
    help="Directory for adapters, training logs, and spooled images.",
)
@click.option(
    "--data-root",
    default=".",
    show_default=True,
    help="Root against which manifest and bundle references resolve.",
)
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
def serve(profile: str, host: str, port: int, artifacts: str, data_root: str, verbose: bool) -> None:
    """Start the HTTP worker."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    import uvicorn

    runtime = _runtime(profile, artifacts, data_root)
    if runtime.load_errors:
        click.echo("warning: serving degraded, some models failed to load:", err=True)
        for role, reason in sorted(runtime.load_errors.items()):
            click.echo(f"  {role}: {reason}", err=True)
    app = create_app(runtime)
    uvicorn.run(app, host=host, port=port, log_level="debug" if verbose else "info")


@main.command()
@click.option(
    "--profile",
    type=click.Choice(sorted(PROFILES)),
    default="production",
    show_default=True,
)
@click.option("--artifacts", default="worker-artifacts", show_default=True)
@click.option("--data-root", default=".", show_default=True)
def check(profile: str, artifacts: str, data_root: str) -> None:
    """Load the profile's models and print the health document."""
    runtime = _runtime(profile, artifacts, data_root)
    doc = runtime.health_doc()
    click.echo(json.dumps(doc, indent=2, sort_keys=True))
    sys.exit(0 if doc["status"] == "ok" else 1)


if __name__ == "__main__":
    main()
