"""Command-line front end.

Every subcommand is a thin client of the HTTP service: with ``--server``
it talks to a running instance, otherwise it mounts the service in-process
and speaks to it over an ASGI transport, so both paths exercise the same
API surface.  ``serve`` starts the service itself.
"""

from __future__ import annotations

import base64
import json
import sys

import click
import httpx

from . import __version__
from .protocol import open_sink


def _client(server: str | None) -> httpx.Client:
    if server is not None:
        return httpx.Client(base_url=server.rstrip("/"), timeout=600.0)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        from fastapi.testclient import TestClient
    from .service.app import create_app
    return TestClient(create_app(), raise_server_exceptions=False)


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    try:
        resp = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        raise click.ClickException(f"request to {path} failed: {exc}") from exc
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise click.ClickException(f"{path} returned {resp.status_code}: {detail}")
    return resp.json()


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise click.ClickException(f"cannot read {what} {path}: {exc}") from exc
    except ValueError as exc:
        raise click.ClickException(f"{what} {path} is not valid JSON: {exc}") from exc


def _read_input(path: str) -> bytes:
    if path == "-":
        return sys.stdin.buffer.read()
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise click.ClickException(f"cannot read input {path}: {exc}") from exc


@click.group()
@click.version_option(version=__version__)
def main() -> None:
    """Microphone-array audition: localize, track, and separate sources."""


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Start the HTTP service."""
    import uvicorn
    uvicorn.run("earshot.service.app:app", host=host, port=port)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Pipeline configuration JSON.")
@click.option("--input", "input_path", default="-", show_default=True,
              help="RAW PCM file, or - for stdin.")
@click.option("--doa-out", default=None,
              help="Potential-DOA stream: PATH, tcp://host:port, or - for stdout.")
@click.option("--tracks-out", default=None,
              help="Tracked-source stream: PATH, tcp://host:port, or - for stdout.")
@click.option("--sep-out-dir", default=None,
              type=click.Path(file_okay=False),
              help="Directory for separated per-source RAW files.")
@click.option("--mode", default="single", show_default=True,
              type=click.Choice(["single", "threaded"]))
@click.option("--counters", is_flag=True, help="Print the run report counters.")
@click.option("--server", default=None, help="Service URL (default: in-process).")
def run(config_path: str, input_path: str, doa_out: str | None,
        tracks_out: str | None, sep_out_dir: str | None, mode: str,
        counters: bool, server: str | None) -> None:
    """Process a RAW capture through the full pipeline."""
    config = _load_json(config_path, "config")
    data = _read_input(input_path)
    with _client(server) as client:
        result = _post(client, "/process", {
            "config": config,
            "raw_base64": base64.b64encode(data).decode("ascii"),
            "mode": mode,
            "separate": sep_out_dir is not None,
        })
    doa_sink, tracks_sink = open_sink(doa_out), open_sink(tracks_out)
    for line in result["doa_lines"]:
        doa_sink.write(line)
    for line in result["track_lines"]:
        tracks_sink.write(line)
    doa_sink.close()
    tracks_sink.close()
    if sep_out_dir is not None:
        import os
        os.makedirs(sep_out_dir, exist_ok=True)
        for key, payload in sorted(result["separated"].items()):
            with open(os.path.join(sep_out_dir, f"{key}.raw"), "wb") as fh:
                fh.write(base64.b64decode(payload))
    if counters:
        report = result["report"]
        width = max(len(k) for k in report)
        for key, value in report.items():
            click.echo(f"{key:<{width}}  {value}", err=True)
    dropped = doa_sink.dropped + tracks_sink.dropped
    if dropped:
        click.echo(f"warning: {dropped} telemetry lines dropped (sink unreachable)",
                   err=True)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Pipeline configuration JSON (array geometry + RAW format).")
@click.option("--scene", "scene_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Scene description JSON.")
@click.option("--out", "out_path", required=True,
              help="Output RAW PCM path.")
@click.option("--truth", "truth_path", default=None,
              help="Ground-truth sidecar path [default: OUT.truth.jsonl].")
@click.option("--level-scale", default=0.2, show_default=True, type=float,
              help="Linear gain applied to the mixture before quantization.")
@click.option("--server", default=None, help="Service URL (default: in-process).")
def simulate(config_path: str, scene_path: str, out_path: str,
             truth_path: str | None, level_scale: float,
             server: str | None) -> None:
    """Render a synthetic scene to multichannel RAW plus ground truth."""
    payload = {
        "config": _load_json(config_path, "config"),
        "scene": _load_json(scene_path, "scene"),
        "level_scale": level_scale,
    }
    with _client(server) as client:
        result = _post(client, "/simulate", payload)
    with open(out_path, "wb") as fh:
        fh.write(base64.b64decode(result["raw_base64"]))
    truth_path = truth_path or out_path + ".truth.jsonl"
    with open(truth_path, "w", encoding="utf-8") as fh:
        for entry in result["ground_truth"]:
            fh.write(json.dumps(entry, separators=(",", ":")) + "\n")
    click.echo(
        f"wrote {result['n_samples']} samples x {result['n_channels']} ch "
        f"({result['sample_rate_hz']} Hz, {result['bits_per_sample']}-bit) "
        f"to {out_path}; ground truth in {truth_path}", err=True)


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Pipeline configuration JSON.")
@click.option("--duration", default=5.0, show_default=True, type=float,
              help="Benchmark scene length in seconds.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--server", default=None, help="Service URL (default: in-process).")
def bench(config_path: str, duration: float, seed: int,
          server: str | None) -> None:
    """Compare scan modes and pair pruning on one synthetic scene."""
    payload = {"config": _load_json(config_path, "config"),
               "duration_s": duration, "seed": seed}
    with _client(server) as client:
        result = _post(client, "/bench", payload)
    header = f"{'scan mode':<14}{'pruned':<8}{'pairs':>10}{'coarse':>10}{'fine':>10}{'wall s':>9}{'rt factor':>11}"
    click.echo(header)
    click.echo("-" * len(header))
    for cell in result["cells"]:
        click.echo(
            f"{cell['scan_mode']:<14}{str(cell['prune_pairs']).lower():<8}"
            f"{cell['pairs_correlated']:>10}{cell['coarse_points']:>10}"
            f"{cell['fine_points']:>10}{cell['wall_s']:>9.2f}"
            f"{cell['realtime_factor']:>11.3f}")


if __name__ == "__main__":
    main()
