"""Spatial machinery: icosphere scan grids, coarse-to-fine refinement
neighborhoods, directivity-based microphone pair selection, and per-pair
TDOA lookup tables.

Everything here is built once at startup from the array geometry and is
read-only afterwards.  Point orderings are deterministic (lexicographic)
so that tables are reproducible across runs and platforms.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .config import MicSpec

HALF_SPHERE_EPS = 1e-6
REFINE_RADIUS_SCALE = 2.5
# Pair selection treats a direction exactly on a mic's FOV boundary as
# not shared: a grazing wavefront excites neither mic usefully, and scan
# grids contain points lying exactly on boundary great circles.
PAIR_VISIBILITY_MARGIN = 1e-9

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

_ICO_VERTICES = np.array(
    [
        [-1, _GOLDEN, 0], [1, _GOLDEN, 0], [-1, -_GOLDEN, 0], [1, -_GOLDEN, 0],
        [0, -1, _GOLDEN], [0, 1, _GOLDEN], [0, -1, -_GOLDEN], [0, 1, -_GOLDEN],
        [_GOLDEN, 0, -1], [_GOLDEN, 0, 1], [-_GOLDEN, 0, -1], [-_GOLDEN, 0, 1],
    ],
    dtype=float,
)

_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


class GeometryError(ValueError):
    """Raised when an array geometry cannot support the requested operation."""


@dataclass(frozen=True)
class ArrayModel:
    """Microphone positions, orientations and fields of view as arrays."""

    positions: np.ndarray    # (M, 3) meters
    orientations: np.ndarray  # (M, 3) unit vectors
    fov_rad: np.ndarray      # (M,) full field of view, radians
    sigma_pos: np.ndarray    # (M,) position uncertainty, meters

    @classmethod
    def from_mics(cls, mics: list[MicSpec]) -> "ArrayModel":
        pos = np.array([m.position_m for m in mics], dtype=float)
        ori = np.array([m.orientation for m in mics], dtype=float)
        ori /= np.linalg.norm(ori, axis=1, keepdims=True)
        fov = np.deg2rad(np.array([m.fov_deg for m in mics], dtype=float))
        sig = np.array([m.sigma_pos_m for m in mics], dtype=float)
        return cls(pos, ori, fov, sig)

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def visible(self, directions: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean (M, P) mask: mic m sees direction p iff angle(o_m, d_p) <= fov_m / 2.

        A positive ``margin`` shrinks the FOV cone slightly (used for pair
        selection where boundary-grazing directions must not count).
        """
        dots = self.orientations @ directions.T                 # (M, P)
        cos_half = np.cos(self.fov_rad / 2.0)[:, None]
        if margin > 0.0:
            return dots > cos_half + margin
        return dots >= cos_half - 1e-12


@dataclass(frozen=True)
class ScanGrid:
    """A set of unit-vector scan directions from a subdivided icosahedron."""

    points: np.ndarray   # (P, 3) unit vectors, lexicographically ordered
    level: int
    half_sphere: bool

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def max_nn_spacing_rad(self) -> float:
        """Largest nearest-neighbor angular distance over all grid points."""
        dots = self.points @ self.points.T
        np.fill_diagonal(dots, -1.0)
        nearest = np.clip(dots.max(axis=1), -1.0, 1.0)
        return float(np.arccos(nearest).max())


def build_icosphere(level: int, half_sphere: bool = False) -> ScanGrid:
    """Geodesic subdivision of the icosahedron, reprojected to the unit sphere.

    A full-sphere grid at subdivision level n has 10 * 4**n + 2 points
    (12, 42, 162, 642, 2562 for levels 0-4).  With ``half_sphere``, points
    with z < -1e-6 are removed (equator points kept).
    """
    if not 0 <= level <= 6:
        raise ValueError(f"subdivision level must be in 0..6, got {level}")
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTICES]
    faces = list(_ICO_FACES)
    for _ in range(level):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(verts) - 1
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = new_faces

    points = np.array(verts)
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    if half_sphere:
        points = points[points[:, 2] >= -HALF_SPHERE_EPS]
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return ScanGrid(points=np.ascontiguousarray(points[order]), level=level, half_sphere=half_sphere)


def refinement_neighbors(coarse: ScanGrid, fine: ScanGrid,
                         radius_scale: float = REFINE_RADIUS_SCALE) -> list[np.ndarray]:
    """For each coarse point, the fine-grid indices within the refinement radius.

    The radius is ``radius_scale`` times the coarse grid's maximum
    nearest-neighbor spacing, which guarantees the union of neighborhoods
    covers the fine grid while keeping each neighborhood small.
    """
    if fine.level <= coarse.level:
        raise ValueError(
            f"fine level must exceed coarse level, got coarse {coarse.level}, fine {fine.level}"
        )
    radius = radius_scale * coarse.max_nn_spacing_rad()
    cos_radius = np.cos(radius)
    dots = coarse.points @ fine.points.T           # (C, F)
    return [np.nonzero(row >= cos_radius)[0] for row in dots]


def select_pairs(array: ArrayModel, grid: ScanGrid) -> list[tuple[int, int]]:
    """Microphone pairs that share at least one scan direction inside both FOVs.

    With omnidirectional microphones every pair is retained; a closed
    array drops pairs whose cones meet at most at a grazing boundary.
    Raises GeometryError if no pair survives (the array cannot localize).
    """
    if array.n_mics < 2:
        raise GeometryError("pair selection requires at least 2 microphones")
    vis = array.visible(grid.points, margin=PAIR_VISIBILITY_MARGIN)  # (M, P)
    pairs = [
        (i, j)
        for i in range(array.n_mics)
        for j in range(i + 1, array.n_mics)
        if bool(np.any(vis[i] & vis[j]))
    ]
    if not pairs:
        raise GeometryError("no microphone pair shares a visible direction; array cannot localize")
    return pairs


@dataclass
class PairTable:
    """Per-pair TDOA data over one scan grid.

    ``tdoa`` holds the exact fractional delay fs * (p_i - p_j) . d / c in
    samples at the processing rate.  ``center`` is the same quantity in
    interpolated-sample units rounded to the nearest integer lag, and
    ``halfwidth`` the per-entry TDOA window radius obtained by propagating
    the speed-of-sound and microphone-position uncertainties.  ``visible``
    marks, per (pair, point), whether both microphones see the direction.
    """

    pairs: list[tuple[int, int]]
    tdoa: np.ndarray          # (n_pairs, P) float, fractional samples at fs
    center: np.ndarray        # (n_pairs, P) int32, interpolated-sample lag
    halfwidth: np.ndarray     # (n_pairs, P) int32, window radius in interpolated samples
    visible: np.ndarray       # (n_pairs, P) bool
    max_tdoa_samples: np.ndarray  # (n_pairs,) float
    fs: int
    speed_of_sound: float
    interpolation_rate: int
    n_grid_points: int = field(init=False)

    def __post_init__(self) -> None:
        self.n_grid_points = self.tdoa.shape[1]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def max_halfwidth(self) -> int:
        return int(self.halfwidth.max()) if self.halfwidth.size else 0


def tdoa_table(array: ArrayModel, grid: ScanGrid, fs: int, speed_of_sound: float,
               interpolation_rate: int, pairs: list[tuple[int, int]],
               speed_uncertainty: float = 0.0) -> PairTable:
    """Precompute TDOAs (and uncertainty windows) for the given pairs over a grid."""
    if not pairs:
        raise GeometryError("tdoa_table requires a non-empty pair list")
    idx_i = np.array([p[0] for p in pairs])
    idx_j = np.array([p[1] for p in pairs])
    baseline = array.positions[idx_i] - array.positions[idx_j]    # (n_pairs, 3)
    proj = baseline @ grid.points.T                               # (n_pairs, P) meters
    tdoa = fs * proj / speed_of_sound

    sigma = array.sigma_pos[idx_i] + array.sigma_pos[idx_j]       # (n_pairs,)
    c_lo = max(speed_of_sound - speed_uncertainty, 1e-3)
    c_hi = speed_of_sound + speed_uncertainty
    candidates = [
        fs * (proj + s * sigma[:, None]) / c
        for s in (-1.0, 1.0)
        for c in (c_lo, c_hi)
    ]
    lo = np.minimum.reduce(candidates)
    hi = np.maximum.reduce(candidates)

    center = np.rint(interpolation_rate * tdoa).astype(np.int32)
    lo_idx = np.rint(interpolation_rate * lo).astype(np.int32)
    hi_idx = np.rint(interpolation_rate * hi).astype(np.int32)
    halfwidth = np.maximum(center - lo_idx, hi_idx - center).astype(np.int32)

    vis = array.visible(grid.points)                              # (M, P)
    visible = vis[idx_i] & vis[idx_j]

    max_tdoa = np.linalg.norm(baseline, axis=1) * fs / speed_of_sound
    return PairTable(
        pairs=list(pairs),
        tdoa=tdoa,
        center=center,
        halfwidth=halfwidth,
        visible=visible,
        max_tdoa_samples=max_tdoa,
        fs=fs,
        speed_of_sound=speed_of_sound,
        interpolation_rate=interpolation_rate,
    )


# ---------------------------------------------------------------------------
# Optional binary cache for precomputed tables
# ---------------------------------------------------------------------------

_CACHE_MAGIC = "EARSHOT-PAIRTABLE"
_CACHE_VERSION = 1


def table_cache_key(array: ArrayModel, grid: ScanGrid, fs: int, speed_of_sound: float,
                    interpolation_rate: int, speed_uncertainty: float = 0.0) -> str:
    """Hash of everything a PairTable depends on; names a cache entry."""
    h = hashlib.sha256()
    for arr in (array.positions, array.orientations, array.fov_rad, array.sigma_pos):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(json.dumps([grid.level, grid.half_sphere, fs, speed_of_sound,
                         interpolation_rate, speed_uncertainty]).encode())
    return h.hexdigest()


def save_pair_table(path: str, table: PairTable, key: str) -> None:
    """Write a table to the documented binary cache format (npz container)."""
    buf = io.BytesIO()
    np.savez(
        buf,
        magic=np.array(_CACHE_MAGIC),
        version=np.array(_CACHE_VERSION),
        key=np.array(key),
        pairs=np.array(table.pairs, dtype=np.int32),
        tdoa=table.tdoa,
        center=table.center,
        halfwidth=table.halfwidth,
        visible=table.visible,
        max_tdoa_samples=table.max_tdoa_samples,
        meta=np.array([table.fs, table.speed_of_sound, table.interpolation_rate]),
    )
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_pair_table(path: str, expected_key: str) -> PairTable:
    """Load a cached table, validating magic, version and geometry key."""
    with np.load(path, allow_pickle=False) as data:
        if str(data["magic"]) != _CACHE_MAGIC:
            raise ValueError(f"{path} is not a pair-table cache file")
        if int(data["version"]) != _CACHE_VERSION:
            raise ValueError(f"unsupported pair-table cache version {int(data['version'])}")
        if str(data["key"]) != expected_key:
            raise ValueError("pair-table cache key mismatch: geometry or parameters changed")
        meta = data["meta"]
        return PairTable(
            pairs=[tuple(int(x) for x in row) for row in data["pairs"]],
            tdoa=data["tdoa"],
            center=data["center"],
            halfwidth=data["halfwidth"],
            visible=data["visible"],
            max_tdoa_samples=data["max_tdoa_samples"],
            fs=int(meta[0]),
            speed_of_sound=float(meta[1]),
            interpolation_rate=int(meta[2]),
        )
