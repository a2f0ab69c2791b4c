"""Multi-source tracking: one constant-velocity Kalman filter per source,
probabilistic observation-to-track assignment, and track lifecycle.

Tracks live in Cartesian 3-space (position + velocity); reported positions
are renormalized to the unit sphere.  Each potential DOA from the scanner is
explained as an existing track, a new source, or a false detection; the
power of the SRP peak feeds mixture models for active versus diffuse sound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import GmmConfig, SstConfig
from .localization import PotentialDoa

UNIFORM_SPHERE_DENSITY = 1.0 / (4.0 * np.pi)


class FilterDivergence(ValueError):
    """Innovation covariance lost positive definiteness."""


class KalmanFilter:
    """6-state constant-velocity filter observing position only."""

    def __init__(self, position: np.ndarray, cfg: SstConfig):
        self.x = np.zeros(6)
        self.x[:3] = position
        self.p = np.diag([cfg.measurement_noise ** 2] * 3 + [cfg.process_noise_vel ** 2] * 3)
        self._q_pos = cfg.process_noise_pos ** 2
        self._q_vel = cfg.process_noise_vel ** 2
        self._r = np.eye(3) * cfg.measurement_noise ** 2

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    @property
    def direction(self) -> np.ndarray:
        n = np.linalg.norm(self.x[:3])
        return self.x[:3] / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])

    def predict(self, dt: float) -> None:
        f = np.eye(6)
        f[0, 3] = f[1, 4] = f[2, 5] = dt
        q = np.diag([self._q_pos * dt] * 3 + [self._q_vel * dt] * 3)
        self.x = f @ self.x
        self.p = f @ self.p @ f.T + q

    def innovation(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(residual, innovation covariance) for an observed position."""
        return z - self.x[:3], self.p[:3, :3] + self._r

    def update(self, z: np.ndarray) -> None:
        nu, s = self.innovation(z)
        try:
            chol = np.linalg.cholesky(s)
        except np.linalg.LinAlgError as exc:
            raise FilterDivergence("innovation covariance not positive definite") from exc
        # gain K = P H' S^-1 via the Cholesky factor
        pht = self.p[:, :3]
        k = np.linalg.solve(chol.T, np.linalg.solve(chol, pht.T)).T
        self.x = self.x + k @ nu
        ikh = np.eye(6)
        ikh[:, :3] -= k
        self.p = ikh @ self.p @ ikh.T + k @ self._r @ k.T   # Joseph form
        self.p = 0.5 * (self.p + self.p.T)

    def spatial_likelihood(self, z: np.ndarray) -> float:
        """Gaussian density of the innovation: how well z fits this track."""
        nu, s = self.innovation(z)
        try:
            chol = np.linalg.cholesky(s)
        except np.linalg.LinAlgError as exc:
            raise FilterDivergence("innovation covariance not positive definite") from exc
        w = np.linalg.solve(chol, nu)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        return float(np.exp(-0.5 * (w @ w + log_det + 3 * np.log(2 * np.pi))))


class Gmm:
    """Small 1-D Gaussian mixture for SRP peak powers."""

    def __init__(self, cfg: GmmConfig):
        self.weights = np.asarray(cfg.weights, dtype=float)
        self.means = np.asarray(cfg.means, dtype=float)
        self.variances = np.asarray(cfg.variances, dtype=float)

    def pdf(self, x: float) -> float:
        z = (x - self.means) ** 2 / (2.0 * self.variances)
        return float(np.sum(self.weights * np.exp(-z) / np.sqrt(2 * np.pi * self.variances)))


@dataclass
class PowerModels:
    gmm_active: Gmm
    gmm_diffuse: Gmm
    p_false: float
    p_new: float

    @classmethod
    def from_config(cls, cfg: SstConfig) -> "PowerModels":
        return cls(Gmm(cfg.gmm_active), Gmm(cfg.gmm_diffuse), cfg.p_false, cfg.p_new)


@dataclass
class Track:
    id: int
    kf: KalmanFilter
    confirmed: bool = False
    supported_streak: int = 0
    frames_since_observed: int = 0
    activity: float = 0.0


@dataclass
class TrackedSource:
    """Published snapshot of a confirmed track after one frame."""

    id: int
    direction: np.ndarray
    activity: float
    frame_index: int


@dataclass
class Assignment:
    """Outcome of one frame's data association."""

    to_track: dict[int, int] = field(default_factory=dict)   # obs index -> track id
    new: list[int] = field(default_factory=list)             # obs indices
    false: list[int] = field(default_factory=list)           # obs indices


def assign(observations: list[PotentialDoa], tracks: list[Track],
           models: PowerModels, prob_floor: float) -> Assignment:
    """Explain each observation as {track, new, false} and pick greedily.

    For every observation the posterior over hypotheses combines a spatial
    innovation Gaussian (tracks) or a uniform sphere density (new/false)
    with the active/diffuse power mixtures.  Best posterior first, each
    track claimed at most once; ties broken by observation rank.
    """
    result = Assignment()
    if not observations:
        return result
    n_obs = len(observations)
    track_prior = (1.0 - models.p_false - models.p_new) / max(len(tracks), 1)
    # posterior[i] maps hypothesis key -> normalized probability
    posteriors: list[dict[object, float]] = []
    for obs in observations:
        scores: dict[object, float] = {
            "false": models.p_false * UNIFORM_SPHERE_DENSITY * models.gmm_diffuse.pdf(obs.power),
            "new": models.p_new * UNIFORM_SPHERE_DENSITY * models.gmm_active.pdf(obs.power),
        }
        for t in tracks:
            scores[t.id] = (track_prior * t.kf.spatial_likelihood(obs.direction)
                            * models.gmm_active.pdf(obs.power))
        total = sum(scores.values())
        if total <= 0.0:
            posteriors.append({"false": 1.0})
            continue
        posteriors.append({k: v / total for k, v in scores.items()})

    # greedy best-first over (posterior, -rank); observations ordered by rank
    undecided = set(range(n_obs))
    claimed: set[int] = set()
    while undecided:
        best = None
        for i in sorted(undecided, key=lambda i: observations[i].rank):
            for key, p in posteriors[i].items():
                if isinstance(key, int) and key in claimed:
                    continue
                if best is None or p > best[2]:
                    best = (i, key, p)
        i, key, p = best
        undecided.discard(i)
        if p < prob_floor or key == "false":
            result.false.append(i)
        elif key == "new":
            result.new.append(i)
        else:
            result.to_track[i] = key
            claimed.add(key)
    result.new.sort()
    result.false.sort()
    return result


class Tracker:
    """Frame-driven track manager: predict, associate, update, lifecycle."""

    def __init__(self, cfg: SstConfig, dt: float):
        self.cfg = cfg
        self.dt = dt
        self.models = PowerModels.from_config(cfg)
        self.tracks: list[Track] = []
        self._next_id = 1

    def step(self, observations: list[PotentialDoa], frame_index: int) -> list[TrackedSource]:
        cfg = self.cfg
        for t in self.tracks:
            t.kf.predict(self.dt)
        assignment = assign(observations, self.tracks, self.models, cfg.prob_floor)

        observed_ids = set()
        for obs_idx, track_id in assignment.to_track.items():
            track = next(t for t in self.tracks if t.id == track_id)
            track.kf.update(observations[obs_idx].direction)
            track.frames_since_observed = 0
            track.supported_streak += 1
            track.activity = cfg.activity_alpha * track.activity + (1 - cfg.activity_alpha)
            observed_ids.add(track_id)
            if not track.confirmed and track.supported_streak >= cfg.n_confirm:
                track.confirmed = True

        for t in self.tracks:
            if t.id not in observed_ids:
                t.frames_since_observed += 1
                t.supported_streak = 0
                t.activity = cfg.activity_alpha * t.activity

        # births: provisional tracks from "new" observations
        for obs_idx in assignment.new:
            obs = observations[obs_idx]
            track = Track(id=self._next_id, kf=KalmanFilter(obs.direction, cfg))
            track.supported_streak = 1
            track.activity = 1 - cfg.activity_alpha
            self._next_id += 1
            self.tracks.append(track)

        # deaths: unsupported provisional tracks die immediately; confirmed
        # tracks persist until the forget timeout
        self.tracks = [
            t for t in self.tracks
            if (t.confirmed and t.frames_since_observed <= cfg.n_forget)
            or (not t.confirmed and t.frames_since_observed == 0)
        ]

        confirmed = [t for t in self.tracks if t.confirmed]
        if len(confirmed) > cfg.max_tracks:
            confirmed.sort(key=lambda t: (t.activity, -t.id))
            losers = {t.id for t in confirmed[: len(confirmed) - cfg.max_tracks]}
            self.tracks = [t for t in self.tracks if t.id not in losers]
            confirmed = [t for t in self.tracks if t.confirmed]

        return [
            TrackedSource(id=t.id, direction=t.kf.direction.copy(),
                          activity=t.activity, frame_index=frame_index)
            for t in confirmed
        ]
