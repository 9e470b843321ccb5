"""Command-line client for the pipeline service.

Every command is a thin HTTP client: by default it talks to an
in-process copy of the service (no sockets); pass --server to target a
running instance instead. Exit codes: 0 success, 2 configuration error,
3 data error, 4 gateway error, 1 anything else.
"""

from __future__ import annotations

import json
import sys
from typing import Optional, Sequence

import click
import httpx

from . import __version__

_EXIT_FOR_STATUS = {422: 2, 400: 3, 502: 4}


def _post(server: Optional[str], path: str, payload: dict) -> httpx.Response:
    if server:
        return httpx.post(server.rstrip("/") + path, json=payload, timeout=None)
    import asyncio

    from .service.app import create_app

    async def call() -> httpx.Response:
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(
            transport=transport, base_url="http://trajscope.local", timeout=None
        ) as client:
            return await client.post(path, json=payload)

    return asyncio.run(call())


def _invoke(server: Optional[str], path: str, config: Optional[str], sets: Sequence[str], jobs: Optional[int]) -> None:
    overrides = list(sets)
    if jobs is not None:
        overrides.append(f"jobs={jobs}")
    try:
        resp = _post(server, path, {"config_path": config, "overrides": overrides})
    except httpx.HTTPError as exc:
        click.echo(f"error: cannot reach server: {exc}", err=True)
        sys.exit(1)
    try:
        body = resp.json()
    except json.JSONDecodeError:
        body = {"error": resp.text}
    if resp.status_code == 200:
        click.echo(f"{body['command']}: ok")
        for key, value in body.get("summary", {}).items():
            click.echo(f"  {key}: {value}")
        click.echo(f"  manifest: {body['manifest_path']}")
        return
    click.echo(f"error: {body.get('error', 'request failed')}", err=True)
    for violation in body.get("violations", []):
        click.echo(f"  - {violation}", err=True)
    sys.exit(_EXIT_FOR_STATUS.get(resp.status_code, 1))


def _stage_options(fn):
    fn = click.option("--config", "-c", type=click.Path(), default=None, help="Pipeline config file (INI).")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="SECTION.KEY=VALUE", help="Override a config value.")(fn)
    fn = click.option("--server", default=None, metavar="URL", help="Use a running service instead of in-process.")(fn)
    fn = click.option("--jobs", type=int, default=None, help="Worker parallelism cap.")(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Trajectory pipeline: segment, render, query, evaluate."""


@main.command()
@_stage_options
def segment(config, sets, server, jobs) -> None:
    """Segment every input trajectory into stable-behavior spans."""
    _invoke(server, "/v1/segment", config, sets, jobs)


@main.command()
@_stage_options
def assemble(config, sets, server, jobs) -> None:
    """Render and serialize interleaved image-text sequences."""
    _invoke(server, "/v1/assemble", config, sets, jobs)


@main.command("synth-anomalies")
@_stage_options
def synth_anomalies(config, sets, server, jobs) -> None:
    """Inject synthetic detours and route switches into a pool."""
    _invoke(server, "/v1/synth_anomalies", config, sets, jobs)


@main.command()
@_stage_options
def optimize(config, sets, server, jobs) -> None:
    """Refine the task prompt against seed cases."""
    _invoke(server, "/v1/optimize", config, sets, jobs)


@main.command()
@_stage_options
def run(config, sets, server, jobs) -> None:
    """Query the model for every case and store raw responses."""
    _invoke(server, "/v1/run", config, sets, jobs)


@main.command()
@_stage_options
def report(config, sets, server, jobs) -> None:
    """Score stored responses and write the metrics report."""
    _invoke(server, "/v1/report", config, sets, jobs)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the pipeline service as an HTTP server."""
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
