"""HTTP service exposing the pipeline: validate, inspect, simulate,
process, and bench.  Audio crosses the wire as base64 RAW PCM."""

from __future__ import annotations

import base64
import binascii
import json
import tempfile

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..audio_io import float_to_pcm
from ..config import ConfigError, PipelineConfig, detect_planarity
from ..geometry import ArrayModel, build_icosphere, select_pairs, tdoa_table
from ..harness import FixedTrajectory, RenderResult, Scene, SourceSpec, render
from ..pipeline import run
from ..protocol import MemorySink
from .models import (BenchCell, BenchRequest, BenchResponse, GeometryRequest,
                     GeometryResponse, HealthResponse, ProcessRequest,
                     ProcessResponse, SimulateRequest, SimulateResponse,
                     ValidateRequest, ValidateResponse, report_model)


def _parse_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except (ConfigError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def _parse_scene(data: dict) -> Scene:
    try:
        return Scene.model_validate(data)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def _encode_raw(result: RenderResult, cfg: PipelineConfig, level_scale: float) -> bytes:
    """Interleave the rendered mic channels into the configured RAW layout."""
    mixture = np.clip(result.mixture * level_scale, -1.0, 1.0)
    stream = np.zeros((cfg.raw.n_channels, mixture.shape[1]))
    for mic_idx, raw_idx in enumerate(cfg.mapping):
        stream[raw_idx] = mixture[mic_idx]
    return float_to_pcm(stream, cfg.raw.bits_per_sample)


def _ground_truth(result: RenderResult, cfg: PipelineConfig) -> list[dict]:
    frame, hop = cfg.general.frame_size_samples, cfg.general.hop_size_samples
    n_proc = int(result.scene.duration_s * cfg.general.fs_processing_hz)
    n_frames = max(0, (n_proc - frame) // hop + 1)
    if not result.scene.sources or n_frames == 0:
        return [{"frame": k, "sources": []} for k in range(n_frames)]
    centers = (np.arange(n_frames) * hop + frame / 2.0) / cfg.general.fs_processing_hz
    doas = result.doas_at(centers)                       # (S, K, 3)
    return [
        {"frame": k, "sources": [
            {"x": round(float(doas[s, k, 0]), 6), "y": round(float(doas[s, k, 1]), 6),
             "z": round(float(doas[s, k, 2]), 6)}
            for s in range(doas.shape[0])]}
        for k in range(n_frames)
    ]


def create_app() -> FastAPI:
    app = FastAPI(title="earshot", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(version=__version__)

    @app.post("/config/validate", response_model=ValidateResponse)
    def validate(req: ValidateRequest) -> ValidateResponse:
        try:
            cfg = PipelineConfig.model_validate(req.config)
        except (ConfigError, ValueError) as exc:
            return ValidateResponse(valid=False, errors=[str(exc)])
        return ValidateResponse(valid=True,
                                normalized=json.loads(cfg.model_dump_json()))

    @app.post("/geometry/inspect", response_model=GeometryResponse)
    def geometry(req: GeometryRequest) -> GeometryResponse:
        cfg = _parse_config(req.config)
        array = ArrayModel.from_mics(cfg.general.mics)
        half = bool(cfg.ssl.scan_half_sphere)
        coarse = build_icosphere(cfg.ssl.coarse_level, half)
        fine = build_icosphere(cfg.ssl.fine_level, half)
        pairs = select_pairs(array, fine)
        table = tdoa_table(array, fine, cfg.general.fs_processing_hz,
                           cfg.general.speed_of_sound_mps,
                           cfg.ssl.interpolation_rate, pairs)
        m = array.n_mics
        return GeometryResponse(
            n_mics=m,
            planar=detect_planarity(cfg.general.mics),
            scan_half_sphere=half,
            pairs_selected=len(pairs),
            pairs_total=m * (m - 1) // 2,
            coarse_points=coarse.n_points,
            fine_points=fine.n_points,
            max_tdoa_samples=float(np.max(table.max_tdoa_samples)),
        )

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(req: SimulateRequest) -> SimulateResponse:
        cfg = _parse_config(req.config)
        scene = _parse_scene(req.scene)
        array = ArrayModel.from_mics(cfg.general.mics)
        result = render(scene, array, cfg.raw.sample_rate_hz,
                        cfg.general.speed_of_sound_mps)
        data = _encode_raw(result, cfg, req.level_scale)
        return SimulateResponse(
            raw_base64=base64.b64encode(data).decode("ascii"),
            n_samples=result.mixture.shape[1],
            sample_rate_hz=cfg.raw.sample_rate_hz,
            n_channels=cfg.raw.n_channels,
            bits_per_sample=cfg.raw.bits_per_sample,
            ground_truth=_ground_truth(result, cfg),
        )

    @app.post("/process", response_model=ProcessResponse)
    def process(req: ProcessRequest) -> ProcessResponse:
        cfg = _parse_config(req.config)
        if req.mode not in ("single", "threaded"):
            raise HTTPException(status_code=422,
                                detail=f"mode must be 'single' or 'threaded', got {req.mode!r}")
        try:
            data = base64.b64decode(req.raw_base64, validate=True)
        except binascii.Error as exc:
            raise HTTPException(status_code=422,
                                detail=f"raw_base64 is not valid base64: {exc}") from exc
        doa, tracks = MemorySink(), MemorySink()
        separated: dict[str, str] = {}
        if req.separate:
            with tempfile.TemporaryDirectory() as sep_dir:
                report = run(cfg, data, doa_sink=doa, tracks_sink=tracks,
                             sep_dir=sep_dir, mode=req.mode)
                for key, path in report.separated_paths.items():
                    with open(path, "rb") as fh:
                        separated[key] = base64.b64encode(fh.read()).decode("ascii")
        else:
            report = run(cfg, data, doa_sink=doa, tracks_sink=tracks,
                         mode=req.mode)
        return ProcessResponse(doa_lines=doa.lines, track_lines=tracks.lines,
                               separated=separated, report=report_model(report))

    @app.post("/bench", response_model=BenchResponse)
    def bench(req: BenchRequest) -> BenchResponse:
        cfg = _parse_config(req.config)
        array = ArrayModel.from_mics(cfg.general.mics)
        scene = Scene(sources=[
            SourceSpec(kind="speech_shaped", modulated=True,
                       trajectory=FixedTrajectory(direction=[1.0, 0.0, 0.0])),
            SourceSpec(kind="speech_shaped", modulated=True,
                       trajectory=FixedTrajectory(direction=[0.0, 1.0, 0.0])),
        ], duration_s=req.duration_s, noise_floor_db=-60.0, seed=req.seed)
        result = render(scene, array, cfg.raw.sample_rate_hz,
                        cfg.general.speed_of_sound_mps)
        data = _encode_raw(result, cfg, 0.2)
        cells = []
        for scan_mode in ("hierarchical", "exhaustive"):
            for prune in (True, False):
                variant = cfg.model_copy(deep=True)
                variant.ssl.scan_mode = scan_mode
                variant.ssl.prune_pairs = prune
                report = run(variant, data)
                cells.append(BenchCell(
                    scan_mode=scan_mode, prune_pairs=prune,
                    pairs_correlated=report.counters.pairs_correlated,
                    coarse_points=report.counters.coarse_points,
                    fine_points=report.counters.fine_points,
                    wall_s=report.wall_s,
                    realtime_factor=report.realtime_factor,
                ))
        return BenchResponse(cells=cells)

    return app


app = create_app()
