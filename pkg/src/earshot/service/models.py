"""Request/response bodies for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import PipelineConfig


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class ValidateRequest(BaseModel):
    config: dict


class ValidateResponse(BaseModel):
    valid: bool
    errors: list[str] = Field(default_factory=list)
    normalized: dict | None = None


class GeometryRequest(BaseModel):
    config: dict


class GeometryResponse(BaseModel):
    n_mics: int
    planar: bool
    scan_half_sphere: bool
    pairs_selected: int
    pairs_total: int
    coarse_points: int
    fine_points: int
    max_tdoa_samples: float


class SimulateRequest(BaseModel):
    config: dict
    scene: dict                   # synthetic-scene description (see harness.Scene)
    level_scale: float = Field(default=0.2, gt=0.0, le=1.0)


class SimulateResponse(BaseModel):
    raw_base64: str
    n_samples: int
    sample_rate_hz: int
    n_channels: int
    bits_per_sample: int
    ground_truth: list[dict]


class ProcessRequest(BaseModel):
    config: dict
    raw_base64: str
    mode: str = "single"
    separate: bool = False


class ReportModel(BaseModel):
    frames: int
    spectral_frames: int
    duration_s: float
    wall_s: float
    realtime_factor: float
    scan_frames: int
    pairs_correlated: int
    coarse_points: int
    fine_points: int
    gss_resets: int
    subarray_fallback_frames: int
    queue_peaks: dict[str, int]


class ProcessResponse(BaseModel):
    doa_lines: list[str]
    track_lines: list[str]
    separated: dict[str, str]     # key -> base64 RAW
    report: ReportModel


class BenchRequest(BaseModel):
    config: dict
    duration_s: float = Field(default=5.0, gt=0.0, le=60.0)
    seed: int = 0


class BenchCell(BaseModel):
    scan_mode: str
    prune_pairs: bool
    pairs_correlated: int
    coarse_points: int
    fine_points: int
    wall_s: float
    realtime_factor: float


class BenchResponse(BaseModel):
    cells: list[BenchCell]


def report_model(report) -> ReportModel:
    return ReportModel(
        frames=report.frames,
        spectral_frames=report.spectral_frames,
        duration_s=report.duration_s,
        wall_s=report.wall_s,
        realtime_factor=report.realtime_factor,
        scan_frames=report.counters.frames,
        pairs_correlated=report.counters.pairs_correlated,
        coarse_points=report.counters.coarse_points,
        fine_points=report.counters.fine_points,
        gss_resets=report.gss_resets,
        subarray_fallback_frames=report.subarray_fallback_frames,
        queue_peaks=report.queue_peaks,
    )
