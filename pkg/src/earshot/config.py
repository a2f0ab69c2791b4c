"""Pipeline configuration tree: parsing, validation, serialization.

The configuration document is UTF-8 JSON whose top-level keys are the
canonical section names: ``raw``, ``mapping``, ``general``, ``mcra``,
``ssl``, ``sst``, ``sss``.  Unknown keys are rejected everywhere, every
constraint violation is reported with the offending field path, and
parse/serialize round-trips are exact.
"""

from __future__ import annotations

import json
import math
from typing import Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

EPS_PLANE_M = 1e-4

Vec3 = tuple[float, float, float]


class ConfigError(ValueError):
    """Raised for syntax errors or constraint violations in a config document."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class MicSpec(_Section):
    """One microphone: position, facing direction, and field of view.

    ``fov_deg == 360`` denotes an omnidirectional (open-array) microphone.
    ``sigma_pos_m`` is an optional position uncertainty consumed by the
    TDOA-window construction in the geometry tables.
    """

    position_m: Vec3
    orientation: Vec3 = (0.0, 0.0, 1.0)
    fov_deg: float = 360.0
    sigma_pos_m: float = 0.0

    @field_validator("orientation")
    @classmethod
    def _unit_orientation(cls, v: Vec3) -> Vec3:
        norm = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"orientation must have unit norm within 1e-6, got norm {norm:.9f}")
        return v

    @field_validator("fov_deg")
    @classmethod
    def _fov_range(cls, v: float) -> float:
        if not 0.0 < v <= 360.0:
            raise ValueError(f"fov_deg must be in (0, 360], got {v}")
        return v

    @field_validator("sigma_pos_m")
    @classmethod
    def _sigma_nonneg(cls, v: float) -> float:
        if v < 0.0:
            raise ValueError(f"sigma_pos_m must be non-negative, got {v}")
        return v


class RawInputConfig(_Section):
    """Format of the incoming RAW PCM stream (before mapping/resampling)."""

    sample_rate_hz: int = Field(gt=0)
    bits_per_sample: Literal[8, 16, 24, 32] = 16
    n_channels: int = Field(gt=0)
    hop_size_samples: int = Field(default=256, gt=0)


class GeneralConfig(_Section):
    """Parameters shared by every stage of the pipeline."""

    frame_size_samples: int = 512
    hop_size_samples: int = 256
    fs_processing_hz: int = Field(default=16000, gt=0)
    speed_of_sound_mps: float = Field(default=343.0, gt=0.0)
    speed_of_sound_uncertainty_mps: float = Field(default=0.0, ge=0.0)
    mics: list[MicSpec]

    @field_validator("frame_size_samples")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v <= 0 or v & (v - 1) != 0:
            raise ValueError(f"frame_size_samples must be a power of two, got {v}")
        return v

    @model_validator(mode="after")
    def _hop_le_frame(self) -> "GeneralConfig":
        if self.hop_size_samples <= 0 or self.hop_size_samples > self.frame_size_samples:
            raise ValueError(
                f"hop_size_samples must be in [1, frame_size_samples]; "
                f"got hop {self.hop_size_samples}, frame {self.frame_size_samples}"
            )
        return self


def _unit_interval(name: str):
    def check(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"{name} must be in (0, 1), got {v}")
        return v

    return check


class McraConfig(_Section):
    """Minima-controlled recursive averaging noise estimator parameters."""

    alpha_s: float = 0.95
    alpha_p: float = 0.2
    alpha_d: float = 0.95
    l_window: int = Field(default=64, gt=0)
    delta: float = Field(default=5.0, gt=0.0)

    _a_s = field_validator("alpha_s")(classmethod(_unit_interval("alpha_s")))
    _a_p = field_validator("alpha_p")(classmethod(_unit_interval("alpha_p")))
    _a_d = field_validator("alpha_d")(classmethod(_unit_interval("alpha_d")))


class SslConfig(_Section):
    """Localization stage parameters."""

    n_potential_doas: int = Field(default=4, gt=0)
    interpolation_rate: int = Field(default=1, gt=0)
    coarse_level: int = Field(default=2, ge=0, le=6)
    fine_level: int = Field(default=4, ge=0, le=6)
    scan_half_sphere: Union[bool, Literal["auto"]] = "auto"
    snr_weighting: bool = True
    prune_pairs: bool = True
    scan_mode: Literal["hierarchical", "exhaustive"] = "hierarchical"

    @model_validator(mode="after")
    def _fine_gt_coarse(self) -> "SslConfig":
        if self.fine_level <= self.coarse_level:
            raise ValueError(
                f"fine_level must exceed coarse_level; got coarse {self.coarse_level}, fine {self.fine_level}"
            )
        return self


class GmmConfig(_Section):
    """A one-dimensional Gaussian mixture over SRP power values."""

    weights: list[float]
    means: list[float]
    variances: list[float]

    @model_validator(mode="after")
    def _consistent(self) -> "GmmConfig":
        if not (len(self.weights) == len(self.means) == len(self.variances)):
            raise ValueError("weights, means and variances must have equal length")
        if not self.weights:
            raise ValueError("mixture must have at least one component")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(self.weights)}")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be non-negative")
        if any(v <= 0 for v in self.variances):
            raise ValueError("variances must be positive")
        return self


# Power-distribution defaults fitted once from synthetic-harness histograms
# (scan peaks within 10 degrees of a true source for the active mixture;
# peaks on noise-only scenes and spurious peaks for the diffuse one) with
# the default SNR weighting on, then frozen here.
_DEFAULT_GMM_ACTIVE = {"weights": [0.575, 0.425], "means": [0.028, 0.125],
                       "variances": [0.00035, 0.0056]}
_DEFAULT_GMM_DIFFUSE = {"weights": [0.52, 0.48], "means": [0.0025, 0.009],
                        "variances": [1.0e-06, 2.4e-05]}


class SstConfig(_Section):
    """Tracking stage parameters: Kalman noise, power models, lifecycle."""

    process_noise_pos: float = Field(default=0.02, gt=0.0)
    process_noise_vel: float = Field(default=0.2, gt=0.0)
    measurement_noise: float = Field(default=0.05, gt=0.0)
    gmm_active: GmmConfig = GmmConfig(**_DEFAULT_GMM_ACTIVE)
    gmm_diffuse: GmmConfig = GmmConfig(**_DEFAULT_GMM_DIFFUSE)
    p_false: float = 0.05
    p_new: float = 0.05
    prob_floor: float = 0.02
    n_confirm: int = Field(default=7, gt=0)
    n_forget: int = Field(default=50, gt=0)
    max_tracks: int = Field(default=4, gt=0)
    activity_alpha: float = 0.9

    _pf = field_validator("p_false")(classmethod(_unit_interval("p_false")))
    _pn = field_validator("p_new")(classmethod(_unit_interval("p_new")))
    _fl = field_validator("prob_floor")(classmethod(_unit_interval("prob_floor")))
    _aa = field_validator("activity_alpha")(classmethod(_unit_interval("activity_alpha")))


class PostfilterConfig(_Section):
    enabled: bool = False
    gain_floor_db: float = -20.0
    leakage: float = Field(default=0.25, ge=0.0)


class SeparatedOutputConfig(_Section):
    bits_per_sample: Literal[8, 16, 24, 32] = 16


class SssConfig(_Section):
    """Separation stage parameters."""

    method: Literal["delay_and_sum", "gss"] = "delay_and_sum"
    gss_step_size: float = Field(default=0.01, ge=0.0)
    gss_geometric_weight: float = Field(default=0.15, ge=0.0)
    postfilter: PostfilterConfig = PostfilterConfig()
    output: SeparatedOutputConfig = SeparatedOutputConfig()
    fixed_doas: list[Vec3] = []

    @field_validator("fixed_doas")
    @classmethod
    def _unit_doas(cls, v: list[Vec3]) -> list[Vec3]:
        for i, d in enumerate(v):
            norm = math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"fixed_doas[{i}] must be a unit vector, got norm {norm:.9f}")
        return v


class PipelineConfig(_Section):
    """The full configuration tree, one attribute per document section."""

    raw: RawInputConfig
    mapping: list[int]
    general: GeneralConfig
    mcra: McraConfig = McraConfig()
    ssl: SslConfig = SslConfig()
    sst: SstConfig = SstConfig()
    sss: SssConfig = SssConfig()

    @model_validator(mode="after")
    def _cross_section(self) -> "PipelineConfig":
        if len(set(self.mapping)) != len(self.mapping):
            raise ValueError(f"mapping indices must be unique, got {self.mapping}")
        for idx in self.mapping:
            if not 0 <= idx < self.raw.n_channels:
                raise ValueError(
                    f"mapping index {idx} out of range for raw.n_channels = {self.raw.n_channels}"
                )
        if len(self.general.mics) != len(self.mapping):
            raise ValueError(
                f"general.mics length ({len(self.general.mics)}) must equal "
                f"mapping length ({len(self.mapping)})"
            )
        if self.ssl.scan_half_sphere == "auto":
            self.ssl.scan_half_sphere = detect_planarity(self.general.mics)
        return self

    @property
    def frame_dt_s(self) -> float:
        """Wall time between successive STFT frames at the processing rate."""
        return self.general.hop_size_samples / self.general.fs_processing_hz


def detect_planarity(mics: list[MicSpec], eps_plane: float = EPS_PLANE_M) -> bool:
    """True iff all microphone positions lie within ``eps_plane`` of a best-fit plane.

    Fewer than 3 microphones are trivially planar.  The fit is by SVD of
    the centered positions, so the result is invariant under rigid motion.
    """
    if len(mics) < 3:
        return True
    pos = np.array([m.position_m for m in mics], dtype=float)
    centered = pos - pos.mean(axis=0)
    # smallest principal direction = best-fit plane normal
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    residual = np.abs(centered @ vt[-1])
    return bool(residual.max() <= eps_plane)


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def parse_config(text: str) -> PipelineConfig:
    """Parse and fully validate a JSON configuration document.

    Raises ConfigError with the document position for syntax errors, or
    with the offending field path(s) for constraint violations.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level of the configuration document must be an object")
    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from exc


def serialize_config(cfg: PipelineConfig) -> str:
    """Render a config back to canonical JSON; parse(serialize(cfg)) == cfg."""
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=False)


def load_config(path: str) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
