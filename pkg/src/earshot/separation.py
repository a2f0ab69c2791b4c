"""Beamforming and separation toward tracked or user-fixed directions.

Delay-and-sum phase-aligns a directivity-selected subarray.  GSS jointly
demixes all targets with per-bin matrices adapted to decorrelate the
outputs while a geometric penalty keeps each row anchored to its target's
steering solution.  An optional per-bin gain mask suppresses bins dominated
by stationary noise or leakage from competing outputs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .config import SssConfig
from .geometry import ArrayModel

GSS_DIVERGENCE_RATIO = 1e3
# Joint-decorrelation epochs: adaptation minimizes the off-diagonal output
# correlation over the last GSS_BLOCKS covariance blocks of GSS_BLOCK_FRAMES
# frames each.  Sources whose powers vary across blocks (speech-like
# nonstationarity) make the joint diagonalizer unique, which a single
# averaged covariance cannot; block averaging also keeps the statistics
# smooth across frequency, which WOLA synthesis requires.
GSS_BLOCK_FRAMES = 16
GSS_BLOCKS = 8
# Cap on each demixing row's null-shaping component, as a multiple of the
# delay-and-sum row norm.  Bounds the row's white-noise gain, so adaptation
# cannot buy decorrelation with signal-destroying high-gain rows at
# frequencies where the geometry cannot resolve the targets.
GSS_MAX_NULL_NORM = 2.0


def select_subarray(array: ArrayModel, direction: np.ndarray) -> tuple[np.ndarray, bool]:
    """Microphones whose FOV covers the direction (closed inequality).

    Returns (indices, fell_back): an empty selection falls back to the full
    array and flags it so the pipeline can emit a warning event.
    """
    mask = array.visible(direction[None, :])[:, 0]
    if not mask.any():
        return np.arange(array.n_mics), True
    return np.nonzero(mask)[0], False


@dataclass
class SteeringTarget:
    """One beamforming target: who to steer at and with which mics."""

    track_id: int
    direction: np.ndarray      # unit 3-vector
    subarray: np.ndarray       # mic indices
    delays: np.ndarray         # per-subarray-mic delays in samples
    ref_mic: int               # global mic index the output is time-aligned to
    fell_back: bool = False

    @classmethod
    def build(cls, array: ArrayModel, direction: np.ndarray, track_id: int,
              fs: int, speed_of_sound: float) -> "SteeringTarget":
        sub, fell_back = select_subarray(array, direction)
        dists = np.linalg.norm(array.positions[sub] - array.centroid, axis=1)
        # quantize to nm so ulp noise cannot break ties; ties -> lowest index
        ref_mic = int(sub[np.argmin(np.round(dists, 9))])
        delays = fs * (array.positions[ref_mic] - array.positions[sub]) \
            @ direction / speed_of_sound
        return cls(track_id=track_id, direction=np.asarray(direction, float),
                   subarray=sub, delays=delays, ref_mic=ref_mic, fell_back=fell_back)


def steering_phases(delays: np.ndarray, frame_size: int) -> np.ndarray:
    """exp(+j 2πk τ/N) alignment factors, (len(delays), frame_size/2+1)."""
    k = np.arange(frame_size // 2 + 1)
    return np.exp(2j * np.pi * k[None, :] * delays[:, None] / frame_size)


def delay_and_sum(bins: np.ndarray, target: SteeringTarget, frame_size: int) -> np.ndarray:
    """Phase-aligned average over the target's subarray: (F,) complex bins."""
    aligned = bins[target.subarray] * steering_phases(target.delays, frame_size)
    return aligned.mean(axis=0)


class GssSeparator:
    """Joint per-bin demixing of all targets over the union of subarrays.

    Demixing matrices start as the targets' delay-and-sum beamformers (so a
    single target with zero adaptation steps reproduces delay-and-sum
    exactly) and are adapted by a normalized LMS rule on the off-diagonal
    output correlation plus a geometric penalty
    ``lambda_geo * ||W - W_das||^2`` anchoring each row to its target's
    steering solution.  After every update each row is re-projected to unit
    response toward its own steering vector, and its orthogonal
    (null-shaping) component is norm-capped, so adaptation can only steer
    nulls, never rescale or destroy the target.  Anchoring to delay-and-sum
    rather than a steering-matrix inverse keeps the implied demixing
    filters short where the geometry cannot resolve the targets (low
    frequencies), which a direct inverse turns into synthesis-destroying
    phase noise.
    """

    def __init__(self, array: ArrayModel, frame_size: int, fs: int,
                 speed_of_sound: float, cfg: SssConfig):
        self.array = array
        self.frame_size = frame_size
        self.fs = fs
        self.speed_of_sound = speed_of_sound
        self.step = cfg.gss_step_size
        self.lambda_geo = cfg.gss_geometric_weight
        self.targets: list[SteeringTarget] = []
        self.mics: np.ndarray | None = None      # union subarray
        self.steering: np.ndarray | None = None  # (F, Mu, T)
        self.demix: np.ndarray | None = None     # (F, T, Mu)
        self._init_demix: np.ndarray | None = None
        self._blocks: deque[np.ndarray] = deque(maxlen=GSS_BLOCKS)
        self._block_acc: np.ndarray | None = None  # (F, Mu, Mu) running block
        self._block_n = 0
        self.resets = 0

    def _steering_matrix(self, targets: list[SteeringTarget], mics: np.ndarray) -> np.ndarray:
        k = np.arange(self.frame_size // 2 + 1)
        mats = []
        for t in targets:
            tau = self.fs * (self.array.positions[t.ref_mic] - self.array.positions[mics]) \
                @ t.direction / self.speed_of_sound
            mats.append(np.exp(-2j * np.pi * k[:, None] * tau[None, :] / self.frame_size))
        return np.stack(mats, axis=2)            # (F, Mu, T)

    def _das_matrix(self, targets: list[SteeringTarget], mics: np.ndarray,
                    steering: np.ndarray) -> np.ndarray:
        """(F, T, Mu) delay-and-sum rows: conjugate steering on each subarray."""
        demix = np.zeros((steering.shape[0], len(targets), len(mics)), complex)
        for ti, t in enumerate(targets):
            sel = np.searchsorted(mics, t.subarray)
            demix[:, ti, sel] = np.conj(steering[:, sel, ti]) / len(t.subarray)
        return demix

    def retarget(self, targets: list[SteeringTarget]) -> None:
        """Adopt a new target set; reuse adapted matrices when ids match."""
        mics = np.unique(np.concatenate([t.subarray for t in targets])) if targets \
            else np.arange(self.array.n_mics)
        same_shape = (self.demix is not None
                      and [t.track_id for t in targets] == [t.track_id for t in self.targets]
                      and np.array_equal(mics, self.mics))
        self.targets = targets
        self.mics = mics
        if not targets:
            self.steering = None
            self.demix = None
            self._init_demix = None
            return
        self.steering = self._steering_matrix(targets, mics)
        self._init_demix = self._das_matrix(targets, mics, self.steering)
        if not same_shape:
            self.demix = self._init_demix.copy()
            self._clear_stats()
        # same shape: keep adapted demix; the constraint re-anchors it

    def _clear_stats(self) -> None:
        self._blocks.clear()
        self._block_acc = None
        self._block_n = 0

    def step_frame(self, bins: np.ndarray) -> np.ndarray:
        """One frame: (T, F) separated bins; adapts the demixing matrices."""
        if self.demix is None:
            raise ValueError("no targets set; call retarget first")
        x = bins[self.mics].T                                  # (F, Mu)
        y = np.einsum("ftm,fm->ft", self.demix, x)             # (F, T)
        in_power = float(np.sum(np.abs(x) ** 2))
        out_power = float(np.sum(np.abs(y) ** 2))
        if out_power > GSS_DIVERGENCE_RATIO * max(in_power, 1e-30):
            self.demix = self._init_demix.copy()
            self._clear_stats()
            self.resets += 1
            y = np.einsum("ftm,fm->ft", self.demix, x)
        if self.step > 0.0:
            self._adapt(x, y)
        return y.T                                             # (T, F)

    def _adapt(self, x: np.ndarray, y: np.ndarray) -> None:
        """One LMS step jointly decorrelating the stored covariance blocks."""
        rxx = x[:, :, None] * np.conj(x)[:, None, :]           # (F, Mu, Mu)
        if self._block_acc is None:
            self._block_acc = rxx
            self._block_n = 1
        else:
            self._block_acc += rxx
            self._block_n += 1
        if self._block_n >= GSS_BLOCK_FRAMES:
            self._blocks.append(self._block_acc / self._block_n)
            self._block_acc = None
            self._block_n = 0
        if not self._blocks:
            return
        n_bins, n_t, _ = self.demix.shape
        idx = np.arange(n_t)
        grad_sep = np.zeros_like(self.demix)
        norm = np.zeros(n_bins)
        for r in self._blocks:
            wr = np.einsum("ftm,fmn->ftn", self.demix, r)      # (F, T, Mu)
            cyy = np.einsum("ftn,fsn->fts", wr, np.conj(self.demix))
            off = cyy
            off[:, idx, idx] = 0.0
            grad_sep += np.einsum("fts,fsm->ftm", off, wr)
            rho = np.einsum("fmm->f", r).real / r.shape[1]     # mean mic power
            norm += rho ** 2
        grad_sep /= (norm + 1e-30)[:, None, None]
        grad_geo = self.demix - self._init_demix
        self.demix = self.demix - self.step * (grad_sep + self.lambda_geo * grad_geo)
        self._constrain_rows()

    def _constrain_rows(self) -> None:
        """Keep every row distortionless toward its own steering vector.

        The row splits into a component along the steering vector (fixed so
        the target response is exactly 1, as at initialization) and an
        orthogonal null-shaping component whose norm is capped relative to
        the delay-and-sum row.
        """
        a_h = np.conj(self.steering).transpose(0, 2, 1)        # (F, T, Mu)
        col_sq = np.sum(np.abs(self.steering) ** 2, axis=1)    # (F, T)
        par = a_h / col_sq[:, :, None]                         # unit-response rows
        resp = np.einsum("ftm,fmt->ft", self.demix, self.steering)
        ortho = self.demix - resp[:, :, None] * par
        cap = GSS_MAX_NULL_NORM * np.linalg.norm(self._init_demix, axis=2)
        onorm = np.linalg.norm(ortho, axis=2)
        scale = np.minimum(1.0, cap / np.maximum(onorm, 1e-30))
        self.demix = par + ortho * scale[:, :, None]


# Exponential smoothing for the postfilter's inter-channel statistics.
PF_SMOOTHING = 0.9
# Masking engages only when estimated interference exceeds this fraction of
# a channel's power (~-8 dB).  Below that no bin is plausibly *dominated* by
# interference, and masking would only distort the target.
PF_ACTIVE_RATIO = 0.15


class Postfilter:
    """Per-bin gain mask: stationary noise plus leakage from competitors.

    The stationary part is the input-side noise estimate propagated through
    each output's beamforming weights (exact for independent noise through
    a linear map).  The leakage part estimates the actual power coupling
    between separated channels from their smoothed cross-spectra (debiased
    for chance correlation, capped by the configured leakage factor), so a
    well-separated channel is left untouched while a poorly separated one
    is masked hard.  Gains live in [G_min, 1]; with no noise and no
    competing energy the mask is exactly 1.
    """

    def __init__(self, cfg: SssConfig):
        self.gain_floor = 10.0 ** (cfg.postfilter.gain_floor_db / 20.0)
        self.leakage_cap = cfg.postfilter.leakage
        self._cross: np.ndarray | None = None    # (T, T, F) smoothed Y_t conj(Y_c)
        self._power: np.ndarray | None = None    # (T, F) smoothed |Y|^2

    def reset(self) -> None:
        self._cross = None
        self._power = None

    def gains(self, separated: np.ndarray, noise_power: np.ndarray | None) -> np.ndarray:
        """(T, F) separated bins + (T, F) projected noise PSD -> (T, F) gains."""
        n_ch, n_bins = separated.shape
        if self._power is None or self._power.shape != (n_ch, n_bins):
            self._cross = np.zeros((n_ch, n_ch, n_bins), complex)
            self._power = np.zeros((n_ch, n_bins))
        a = PF_SMOOTHING
        power = np.abs(separated) ** 2
        self._power = a * self._power + (1 - a) * power
        self._cross = a * self._cross + (1 - a) * (
            separated[:, None, :] * np.conj(separated)[None, :, :])
        # power coupling c -> t, debiased for the estimator's chance level
        bias = (1 - a) / (1 + a)
        num = np.abs(self._cross) ** 2 - bias * self._power[:, None, :] * self._power[None, :, :]
        coupling = np.maximum(num, 0.0) / np.maximum(self._power[None, :, :] ** 2, 1e-300)
        idx = np.arange(n_ch)
        coupling[idx, idx] = 0.0
        coupling = np.minimum(coupling, self.leakage_cap)
        interference = np.einsum("tcf,cf->tf", coupling, power)
        if noise_power is not None:
            interference = interference + noise_power
        snr = power / np.maximum(interference, 1e-300) - 1.0
        gain = np.maximum(snr, 0.0)
        gain = gain / (1.0 + gain)
        gain = np.where(interference <= 1e-300, 1.0, gain)
        gain = np.clip(gain, self.gain_floor, 1.0)
        active = interference.sum(axis=1) > PF_ACTIVE_RATIO * power.sum(axis=1)
        return np.where(active[:, None], gain, 1.0)

    def apply(self, separated: np.ndarray, noise_power: np.ndarray | None) -> np.ndarray:
        return separated * self.gains(separated, noise_power)


def project_noise(lambda_d: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Independent per-mic noise PSD through demix rows: (T, F) output PSD.

    lambda_d: (M_used, F) input noise estimate for the mics the rows use;
    weights: (T, M_used, F) complex beamforming/demixing coefficients.
    """
    return np.einsum("tmf,mf->tf", np.abs(weights) ** 2, lambda_d)
