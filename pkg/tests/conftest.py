"""Shared geometry and config builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from earshot.config import MicSpec, PipelineConfig
from earshot.geometry import ArrayModel

FS = 16000
FRAME = 512
HOP = 256
SPEED = 343.0


def circular_mics(n: int, radius: float = 0.15, fov_deg: float = 360.0) -> list[MicSpec]:
    """Omnidirectional (or outward-facing) ring in the z=0 plane."""
    mics = []
    for i in range(n):
        th = 2.0 * np.pi * i / n
        mics.append(MicSpec(
            position_m=(radius * np.cos(th), radius * np.sin(th), 0.0),
            orientation=(np.cos(th), np.sin(th), 0.0),
            fov_deg=fov_deg,
        ))
    return mics


def corner_cube_mics(r: float = 0.15 / np.sqrt(3), fov_deg: float = 360.0) -> list[MicSpec]:
    """Eight mics on cube corners, oriented along the corner diagonals."""
    mics = []
    for sx in (1, -1):
        for sy in (1, -1):
            for sz in (1, -1):
                o = np.array([sx, sy, sz]) / np.sqrt(3)
                mics.append(MicSpec(position_m=(r * sx, r * sy, r * sz),
                                    orientation=tuple(o), fov_deg=fov_deg))
    return mics


def face_cube_mics(s: float = 0.1) -> list[MicSpec]:
    """Eight corner mics oriented along the four lateral face normals,
    two per face — the closed-array layout whose pruning drops 8 pairs."""
    placement = [
        ((+s, +s, +s), (+1, 0, 0)), ((+s, -s, -s), (+1, 0, 0)),
        ((-s, +s, -s), (-1, 0, 0)), ((-s, -s, +s), (-1, 0, 0)),
        ((+s, +s, -s), (0, +1, 0)), ((-s, +s, +s), (0, +1, 0)),
        ((+s, -s, +s), (0, -1, 0)), ((-s, -s, -s), (0, -1, 0)),
    ]
    return [MicSpec(position_m=p, orientation=o, fov_deg=180.0)
            for p, o in placement]


def pipeline_config(mics: list[MicSpec], fs_raw: int = FS, **sss) -> PipelineConfig:
    n = len(mics)
    return PipelineConfig.model_validate({
        "raw": {"sample_rate_hz": fs_raw, "bits_per_sample": 16,
                "n_channels": n, "hop_size_samples": HOP},
        "mapping": list(range(n)),
        "general": {"frame_size_samples": FRAME, "hop_size_samples": HOP,
                    "fs_processing_hz": FS, "speed_of_sound_mps": SPEED,
                    "mics": [m.model_dump() for m in mics]},
        "sss": sss or {"method": "delay_and_sum"},
    })


@pytest.fixture(scope="session")
def circular8_array() -> ArrayModel:
    return ArrayModel.from_mics(circular_mics(8))


@pytest.fixture(scope="session")
def circular8_config() -> PipelineConfig:
    return pipeline_config(circular_mics(8))
