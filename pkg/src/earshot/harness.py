"""Synthetic scenes and independent reference implementations.

Everything here exists to *check* the signal chain, so the reference
algorithms (exhaustive scan, time-domain cross-correlation, plain Kalman
filter) are written as directly as possible and share no code with the
production modules they verify.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from .geometry import ArrayModel, PairTable, ScanGrid

SIR_CAP_DB = 80.0
OCCLUSION_FLOOR_DB = -30.0


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------

class FixedTrajectory(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["fixed"] = "fixed"
    direction: list[float]

    @field_validator("direction")
    @classmethod
    def _unit(cls, v):
        if len(v) != 3:
            raise ValueError("direction must have 3 components")
        n = float(np.linalg.norm(v))
        if n < 1e-9:
            raise ValueError("direction must be non-zero")
        return [x / n for x in v]


class PathTrajectory(BaseModel):
    """Piecewise-linear azimuth/elevation path; angles in degrees."""

    model_config = ConfigDict(extra="forbid")
    kind: Literal["path"] = "path"
    keyframes: list[list[float]]    # rows of [time_s, azimuth_deg, elevation_deg]

    @field_validator("keyframes")
    @classmethod
    def _ordered(cls, v):
        if len(v) < 2:
            raise ValueError("path needs at least 2 keyframes")
        if any(len(row) != 3 for row in v):
            raise ValueError("keyframes are rows of [time_s, azimuth_deg, elevation_deg]")
        times = [row[0] for row in v]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keyframe times must be strictly increasing")
        return v


Trajectory = Union[FixedTrajectory, PathTrajectory]


class SourceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["white", "tone", "speech_shaped"] = "white"
    trajectory: Trajectory
    level_db: float = 0.0
    freq_hz: float = 1000.0          # tone only
    modulated: bool = False          # slow amplitude modulation (speech-like bursts)


class Scene(BaseModel):
    model_config = ConfigDict(extra="forbid")
    sources: list[SourceSpec]
    duration_s: float = 1.0
    noise_floor_db: float = -120.0   # per-mic independent white noise, dB re full scale
    seed: int = 0
    directivity: Literal["open", "occluding"] = "open"

    @field_validator("duration_s")
    @classmethod
    def _pos(cls, v):
        if v <= 0:
            raise ValueError("duration_s must be positive")
        return v


def load_scene(path: str) -> Scene:
    with open(path, encoding="utf-8") as fh:
        return Scene.model_validate(json.load(fh))


def save_scene(scene: Scene, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene.model_dump(), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def azel_to_unit(az_deg: np.ndarray, el_deg: np.ndarray) -> np.ndarray:
    az = np.deg2rad(az_deg)
    el = np.deg2rad(el_deg)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def occluding_gain(cos_angle: np.ndarray, fov_rad: np.ndarray) -> np.ndarray:
    """Raised cosine from 1 at boresight to a -30 dB floor at the FOV edge."""
    floor = 10.0 ** (OCCLUSION_FLOOR_DB / 20.0)
    theta = np.arccos(np.clip(cos_angle, -1.0, 1.0))
    frac = np.clip(theta / np.maximum(fov_rad / 2.0, 1e-9), 0.0, 1.0)
    return floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac))


def _source_seed(scene_seed: int, spec: SourceSpec, occurrence: int) -> int:
    """Stable per-source seed: a function of the spec itself, not list order."""
    payload = json.dumps(spec.model_dump(), sort_keys=True)
    h = hashlib.sha256(f"{scene_seed}|{occurrence}|{payload}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def _source_signal(spec: SourceSpec, n: int, fs: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if spec.kind == "tone":
        phase = rng.uniform(0, 2 * np.pi)
        t = np.arange(n) / fs
        sig = np.sqrt(2.0) * np.sin(2 * np.pi * spec.freq_hz * t + phase)
    else:
        sig = rng.standard_normal(n)
        if spec.kind == "speech_shaped":
            spectrum = np.fft.rfft(sig)
            f = np.fft.rfftfreq(n, 1.0 / fs)
            spectrum *= 1.0 / np.sqrt(1.0 + (f / 500.0) ** 2)
            sig = np.fft.irfft(spectrum, n=n)
        sig /= max(np.sqrt(np.mean(sig ** 2)), 1e-12)
    if spec.modulated:
        # ~4 Hz random envelope, smooth, mean-normalized
        n_ctrl = max(int(4 * n / fs) + 2, 4)
        ctrl = rng.uniform(0.15, 1.0, n_ctrl)
        env = np.interp(np.linspace(0, n_ctrl - 1, n), np.arange(n_ctrl), ctrl)
        sig = sig * env / max(np.sqrt(np.mean(env ** 2)), 1e-12)
    return sig * 10.0 ** (spec.level_db / 20.0)


def _trajectory_directions(traj: Trajectory, times_s: np.ndarray) -> np.ndarray:
    if isinstance(traj, FixedTrajectory):
        return np.broadcast_to(np.asarray(traj.direction), (times_s.size, 3)).copy()
    kf = np.asarray(traj.keyframes)
    az = np.interp(times_s, kf[:, 0], kf[:, 1])
    el = np.interp(times_s, kf[:, 0], kf[:, 2])
    return azel_to_unit(az, el)


@dataclass
class RenderResult:
    """Rendered scene with everything the meters need."""

    mixture: np.ndarray          # (M, T)
    contributions: np.ndarray    # (S, M, T) clean per-source mic images
    noise: np.ndarray            # (M, T)
    fs_hz: int
    scene: Scene
    array: ArrayModel
    _traj_cache: list = field(default_factory=list, repr=False)

    def doas_at(self, times_s: np.ndarray) -> np.ndarray:
        """(S, len(times), 3) true directions."""
        return np.stack([
            _trajectory_directions(s.trajectory, np.atleast_1d(times_s))
            for s in self.scene.sources
        ])

    def frame_doas(self, frame_size: int, hop: int, n_frames: int) -> np.ndarray:
        centers = (np.arange(n_frames) * hop + frame_size / 2.0) / self.fs_hz
        return self.doas_at(centers)


def render(scene: Scene, array: ArrayModel, fs: int,
           speed_of_sound: float = 343.0) -> RenderResult:
    """Free-field render: fractional plane-wave delays, directivity, noise.

    Fixed trajectories use exact frequency-domain fractional delays; moving
    trajectories use per-sample linear interpolation of the source signal.
    """
    n = int(round(scene.duration_s * fs))
    m = array.positions.shape[0]
    mixture = np.zeros((m, n))
    contributions = np.zeros((len(scene.sources), m, n))
    seen: dict[str, int] = {}
    # delay offset keeping all per-mic delays positive (common shift, no TDOA effect)
    r_max = float(np.max(np.linalg.norm(array.positions, axis=1))) + 0.01

    for s_idx, spec in enumerate(scene.sources):
        key = json.dumps(spec.model_dump(), sort_keys=True)
        occurrence = seen.get(key, 0)
        seen[key] = occurrence + 1
        sig = _source_signal(spec, n, fs, _source_seed(scene.seed, spec, occurrence))

        if isinstance(spec.trajectory, FixedTrajectory):
            d = np.asarray(spec.trajectory.direction)
            delays = fs * (r_max - array.positions @ d) / speed_of_sound   # (M,)
            spectrum = np.fft.rfft(sig)
            f_norm = np.fft.rfftfreq(n)                                    # cycles/sample
            phases = np.exp(-2j * np.pi * f_norm[None, :] * delays[:, None])
            imgs = np.fft.irfft(spectrum[None, :] * phases, n=n, axis=1)
            if scene.directivity == "occluding":
                gains = occluding_gain(array.orientations @ d, array.fov_rad)
                imgs *= gains[:, None]
        else:
            t_samples = np.arange(n)
            dirs = _trajectory_directions(spec.trajectory, t_samples / fs)  # (T, 3)
            delays = fs * (r_max - array.positions @ dirs.T) / speed_of_sound  # (M, T)
            imgs = np.empty((m, n))
            for mi in range(m):
                imgs[mi] = np.interp(t_samples - delays[mi], t_samples, sig,
                                     left=0.0, right=0.0)
            if scene.directivity == "occluding":
                cosang = np.einsum("mc,tc->mt", array.orientations, dirs)
                imgs *= occluding_gain(cosang, array.fov_rad[:, None])
        contributions[s_idx] = imgs
        mixture += imgs

    noise_rms = 10.0 ** (scene.noise_floor_db / 20.0)
    noise_rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 0xA0]))
    noise = noise_rms * noise_rng.standard_normal((m, n)) if scene.noise_floor_db > -100.0 \
        else np.zeros((m, n))
    mixture = mixture + noise
    return RenderResult(mixture=mixture, contributions=contributions, noise=noise,
                        fs_hz=fs, scene=scene, array=array)


def write_ground_truth(result: RenderResult, frame_size: int, hop: int, path: str) -> int:
    """JSONL sidecar: one line per frame with the true source directions."""
    n_frames = max(0, (result.mixture.shape[1] - frame_size) // hop + 1)
    doas = result.frame_doas(frame_size, hop, n_frames)        # (S, K, 3)
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(n_frames):
            entries = ",".join(
                f'{{"x":{doas[s, k, 0]:.6f},"y":{doas[s, k, 1]:.6f},"z":{doas[s, k, 2]:.6f}}}'
                for s in range(doas.shape[0])
            )
            fh.write(f'{{"frame":{k},"doas":[{entries}]}}\n')
    return n_frames


# ---------------------------------------------------------------------------
# Reference: exhaustive SRP scan
# ---------------------------------------------------------------------------

def oracle_srp_values(cc: np.ndarray, table: PairTable, grid: ScanGrid) -> np.ndarray:
    """Steered power at every grid point, straight from the definition.

    cc: (n_pairs, L) interpolated cross-correlation vectors.  For each point,
    take each visible pair's maximum within the table's uncertainty window
    around the expected lag (r peaks at minus the TDOA), and average over the
    visible pairs.  Implemented as a running maximum over window offsets.
    """
    length = cc.shape[1]
    base = np.mod(-table.center, length)                     # (n_pairs, P)
    best = np.full(base.shape, -np.inf)
    for off in range(-int(table.max_halfwidth), int(table.max_halfwidth) + 1):
        vals = np.take_along_axis(cc, np.mod(base + off, length), axis=1)
        vals = np.where(np.abs(off) <= table.halfwidth, vals, -np.inf)
        best = np.maximum(best, vals)
    best = np.where(table.visible, best, 0.0)
    n_vis = table.visible.sum(axis=0)
    values = best.sum(axis=0) / np.maximum(n_vis, 1)
    return np.where(n_vis > 0, np.maximum(values, 0.0), 0.0)


def oracle_exhaustive_scan(cc: np.ndarray, table: PairTable, grid: ScanGrid
                           ) -> tuple[np.ndarray, float, int]:
    """Full-grid argmax: (direction, power, index). Lowest index wins ties."""
    values = oracle_srp_values(cc, table, grid)
    idx = int(np.argmax(values))
    return grid.points[idx].copy(), float(values[idx]), idx


# ---------------------------------------------------------------------------
# Reference: time-domain cross-correlation
# ---------------------------------------------------------------------------

def xcorr_delay(y: np.ndarray, x: np.ndarray, max_lag: int) -> int:
    """Integer delay d maximizing sum x[t]·y[t+d] (y is x delayed by d)."""
    r = np.correlate(y, x, mode="full")             # index n-1+d corresponds to lag d
    lags = np.arange(-(x.size - 1), y.size)
    keep = np.abs(lags) <= max_lag
    return int(lags[keep][np.argmax(r[keep])])


def xcorr_delay_interp(y: np.ndarray, x: np.ndarray, max_lag: int, rate: int) -> float:
    """Sub-sample delay estimate via cross-correlation of rate×-upsampled copies."""
    def up(sig):
        spectrum = np.fft.rfft(sig)
        return rate * np.fft.irfft(spectrum, n=rate * sig.size)
    return xcorr_delay(up(y), up(x), max_lag * rate) / rate


# ---------------------------------------------------------------------------
# Reference: plain Kalman filter
# ---------------------------------------------------------------------------

class TextbookKalman:
    """Standard-form linear Kalman filter (no Joseph stabilization).

    Written from the classic five equations; used to cross-check the
    production filter, so it deliberately shares none of its code.
    """

    def __init__(self, x0: np.ndarray, p0: np.ndarray):
        self.x = np.asarray(x0, dtype=float).copy()
        self.p = np.asarray(p0, dtype=float).copy()

    def predict(self, f: np.ndarray, q: np.ndarray) -> None:
        self.x = f @ self.x
        self.p = f @ self.p @ f.T + q

    def update(self, z: np.ndarray, h: np.ndarray, r: np.ndarray) -> None:
        innovation = z - h @ self.x
        s = h @ self.p @ h.T + r
        gain = np.linalg.solve(s.T, (self.p @ h.T).T).T
        self.x = self.x + gain @ innovation
        self.p = (np.eye(self.x.size) - gain @ h) @ self.p


# ---------------------------------------------------------------------------
# Meters
# ---------------------------------------------------------------------------

def measure_sir(output: np.ndarray, target: np.ndarray,
                interferers: list[np.ndarray]) -> float:
    """SIR in dB: energy of the output's target component over everything else.

    The output is jointly projected onto target + interferer references
    (least squares), so correlated references do not leak into each other's
    coefficients; the non-target part is the residual after removing the
    target component. Capped at ±80 dB.
    """
    refs = [np.asarray(target)] + [np.asarray(i) for i in interferers]
    n = min(min(r.size for r in refs), output.size)
    basis = np.stack([r[:n] for r in refs], axis=1)
    coeffs, *_ = np.linalg.lstsq(basis, output[:n], rcond=None)
    target_part = coeffs[0] * basis[:, 0]
    rest = output[:n] - target_part
    num = float(np.sum(target_part ** 2))
    den = float(np.sum(rest ** 2))
    if den <= num * 10.0 ** (-SIR_CAP_DB / 10.0):
        return SIR_CAP_DB
    if num <= den * 10.0 ** (-SIR_CAP_DB / 10.0):
        return -SIR_CAP_DB
    return 10.0 * np.log10(num / den)


def measure_snr(output_signal: np.ndarray, output_noise: np.ndarray) -> float:
    """SNR in dB from separately beamformed signal and noise parts."""
    num = float(np.mean(output_signal ** 2))
    den = float(np.mean(output_noise ** 2))
    if den == 0.0:
        return SIR_CAP_DB
    return 10.0 * np.log10(max(num, 1e-300) / den)
