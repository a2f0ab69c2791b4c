"""Per-frame localization: noise tracking, GCC-PHAT, and the SRP scan.

The scan is coarse-to-fine: a low-resolution icosphere pass picks the best
region, then only that region's neighborhood on the fine grid is evaluated.
Extracting several potential directions repeats the scan after zeroing the
cross-correlation lags that produced the previous winner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import McraConfig, SslConfig
from .geometry import PairTable, ScanGrid, refinement_neighbors


@dataclass
class PotentialDoa:
    direction: np.ndarray    # unit 3-vector, on the fine grid
    power: float             # SRP value, >= 0
    frame_index: int
    rank: int                # 1..n_potential, powers non-increasing


@dataclass
class ScanCounters:
    """Operation counts: the work-bound evidence for the hierarchical scan."""

    frames: int = 0
    pairs_correlated: int = 0
    coarse_points: int = 0
    fine_points: int = 0

    def merge(self, other: "ScanCounters") -> None:
        self.frames += other.frames
        self.pairs_correlated += other.pairs_correlated
        self.coarse_points += other.coarse_points
        self.fine_points += other.fine_points


class NoiseTracker:
    """MCRA noise PSD estimate, per channel and bin.

    Recursive smoothing with minimum statistics: the smoothed power is
    compared against a windowed minimum to derive a speech-presence
    probability that freezes the noise update while a source is active.
    """

    def __init__(self, cfg: McraConfig, n_channels: int, n_bins: int):
        self.cfg = cfg
        self.shape = (n_channels, n_bins)
        self.smoothed: np.ndarray | None = None    # S
        self.minimum: np.ndarray | None = None     # Smin over window
        self.tracker: np.ndarray | None = None     # Stmp within window
        self.presence: np.ndarray | None = None    # p
        self.lambda_d: np.ndarray | None = None
        self._count = 0

    def update(self, bins: np.ndarray) -> np.ndarray:
        power = np.abs(bins) ** 2
        if self.smoothed is None:
            self.smoothed = power.copy()
            self.minimum = power.copy()
            self.tracker = power.copy()
            self.presence = np.zeros(self.shape)
            self.lambda_d = power.copy()
            self._count = 1
            return self.lambda_d
        c = self.cfg
        self.smoothed = c.alpha_s * self.smoothed + (1 - c.alpha_s) * power
        if self._count % c.l_window == 0:
            self.minimum = np.minimum(self.tracker, self.smoothed)
            self.tracker = self.smoothed.copy()
        else:
            self.minimum = np.minimum(self.minimum, self.smoothed)
            self.tracker = np.minimum(self.tracker, self.smoothed)
        speech = (self.smoothed > c.delta * np.maximum(self.minimum, 1e-300)).astype(float)
        self.presence = c.alpha_p * self.presence + (1 - c.alpha_p) * speech
        alpha_eff = c.alpha_d + (1 - c.alpha_d) * self.presence
        self.lambda_d = alpha_eff * self.lambda_d + (1 - alpha_eff) * power
        self._count += 1
        return self.lambda_d


class GccPhat:
    """Whitened cross-correlation for the retained microphone pairs."""

    def __init__(self, table: PairTable, frame_size: int, snr_weighting: bool):
        self.table = table
        self.frame_size = frame_size
        self.rate = table.interpolation_rate
        self.length = self.rate * frame_size
        self.snr_weighting = snr_weighting
        self.eps = 1e-12 * frame_size
        self._idx_i = np.array([p[0] for p in table.pairs])
        self._idx_j = np.array([p[1] for p in table.pairs])

    def compute(self, bins: np.ndarray, lambda_d: np.ndarray | None) -> np.ndarray:
        """(n_pairs, rate*frame_size) correlation, values in ~[-1, 1]."""
        xi, xj = bins[self._idx_i], bins[self._idx_j]
        cross = xi * np.conj(xj)
        cross /= np.abs(xi) * np.abs(xj) + self.eps
        if self.snr_weighting and lambda_d is not None:
            snr = np.abs(bins) ** 2 / np.maximum(lambda_d, 1e-300) - 1.0
            w = np.maximum(snr, 0.0)
            w /= 1.0 + w
            cross *= w[self._idx_i] * w[self._idx_j]
        return self.rate * np.fft.irfft(cross, n=self.length, axis=1)


class SrpScanner:
    """Coarse-to-fine (or exhaustive) steered-power scan over icosphere grids.

    Precomputes, for both grids, the wrapped cross-correlation lag windows of
    every (pair, point); a scan then reduces to gathers and axis reductions.
    """

    def __init__(self, coarse: ScanGrid, fine: ScanGrid,
                 coarse_table: PairTable, fine_table: PairTable, cfg: SslConfig):
        if coarse_table.interpolation_rate != fine_table.interpolation_rate:
            raise ValueError("coarse/fine tables disagree on interpolation rate")
        self.coarse, self.fine = coarse, fine
        self.coarse_table, self.fine_table = coarse_table, fine_table
        self.cfg = cfg
        self.rate = fine_table.interpolation_rate
        self.neighbors = refinement_neighbors(coarse, fine)
        self._prep = {}

    def _prepare(self, table: PairTable, length: int, tag: str):
        """Index tensor (n_pairs, n_points, 2w+1) + in-window mask, wrapped."""
        if tag in self._prep:
            return self._prep[tag]
        w = int(table.max_halfwidth)
        offsets = np.arange(-w, w + 1)
        lag = (-table.center)[:, :, None] + offsets[None, None, :]
        idx = np.mod(lag, length)
        mask = np.abs(offsets)[None, None, :] <= table.halfwidth[:, :, None]
        prep = (idx, mask, table.visible)
        self._prep[tag] = prep
        return prep

    def _steered_power(self, cc: np.ndarray, table: PairTable, tag: str,
                       points: np.ndarray | None = None) -> np.ndarray:
        idx, mask, visible = self._prepare(table, cc.shape[1], tag)
        if points is not None:
            idx, mask, visible = idx[:, points], mask[:, points], visible[:, points]
        vals = cc[np.arange(cc.shape[0])[:, None, None], idx]
        vals = np.where(mask, vals, -np.inf)
        best = vals.max(axis=2)                       # (n_pairs, n_points)
        best = np.where(visible, best, 0.0)
        n_vis = visible.sum(axis=0)
        total = best.sum(axis=0) / np.maximum(n_vis, 1)
        return np.where(n_vis > 0, np.maximum(total, 0.0), 0.0)

    def _zero_peak(self, cc: np.ndarray, table: PairTable, point: int) -> None:
        length = cc.shape[1]
        centers = -table.center[:, point]
        offsets = np.arange(-self.rate, self.rate + 1)
        idx = np.mod(centers[:, None] + offsets[None, :], length)
        rows = np.arange(cc.shape[0])[:, None]
        vis = table.visible[:, point]
        cc[rows[vis], idx[vis]] = 0.0

    def scan(self, cc: np.ndarray, frame_index: int,
             counters: ScanCounters | None = None) -> list[PotentialDoa]:
        cc = cc.copy()
        found: list[tuple[int, float]] = []
        n_pot = self.cfg.n_potential_doas
        for _ in range(n_pot):
            if self.cfg.scan_mode == "exhaustive":
                fine_vals = self._steered_power(cc, self.fine_table, "fine")
                fine_idx = int(np.argmax(fine_vals))
                power = float(fine_vals[fine_idx])
                if counters:
                    counters.fine_points += self.fine.points.shape[0]
            else:
                coarse_vals = self._steered_power(cc, self.coarse_table, "coarse")
                coarse_idx = int(np.argmax(coarse_vals))
                nbr = self.neighbors[coarse_idx]
                nbr_vals = self._steered_power(cc, self.fine_table, "fine", points=nbr)
                fine_idx = int(nbr[np.argmax(nbr_vals)])
                power = float(nbr_vals.max())
                if counters:
                    counters.coarse_points += self.coarse.points.shape[0]
                    counters.fine_points += int(nbr.size)
            found.append((fine_idx, power))
            self._zero_peak(cc, self.fine_table, fine_idx)
        if counters:
            counters.frames += 1
            counters.pairs_correlated += len(self.fine_table.pairs)
        found.sort(key=lambda t: -t[1])
        return [
            PotentialDoa(direction=self.fine.points[i].copy(), power=p,
                         frame_index=frame_index, rank=r + 1)
            for r, (i, p) in enumerate(found)
        ]
