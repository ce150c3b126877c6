"""Hexagonal reflector tiles, focal-point steering and feasible focal regions.

Coordinates are metres in a right-handed frame with ``z`` pointing up. Vectors
are plain ``numpy`` arrays of shape ``(3,)``. Segment ids are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGeometry, EmptyFeasibleRegion, InvalidArgument

_EPS = 1e-12
Z_HAT = np.array([0.0, 0.0, 1.0])


def as_vec3(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise InvalidArgument(f"{name} must have 3 components, got shape {np.shape(v)}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class FeasibleBox:
    """Axis-aligned box ``lo <= f <= hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = as_vec3(self.lo, "box.lo")
        hi = as_vec3(self.hi, "box.hi")
        if np.any(lo > hi):
            raise InvalidArgument(f"box lower corner {lo} exceeds upper corner {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, p, tol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def to_list(self) -> list[list[float]]:
        return [self.lo.tolist(), self.hi.tolist()]


class TileOrientation(NamedTuple):
    normal: np.ndarray
    theta: float
    phi: float


@dataclass(frozen=True)
class TileGrid:
    """A planar hex-tile reflector partitioned into contiguous column blocks."""

    rows: int
    cols: int
    pitch: float
    mount_center: np.ndarray
    mount_normal: np.ndarray
    tile_positions: np.ndarray = field(repr=False)
    segment_of: np.ndarray = field(repr=False)
    num_segments: int = 1

    @property
    def num_tiles(self) -> int:
        return self.rows * self.cols

    def segment_tiles(self, segment: int) -> np.ndarray:
        if not 0 <= segment < self.num_segments:
            raise InvalidArgument(f"segment {segment} out of range 0..{self.num_segments - 1}")
        return self.tile_positions[self.segment_of == segment]

    def centroid(self, segment: int) -> np.ndarray:
        return self.segment_tiles(segment).mean(axis=0)


def mount_axes(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """In-plane (horizontal, vertical) unit axes for a mount facing ``normal``."""
    horiz = np.cross(Z_HAT, normal)
    if np.linalg.norm(horiz) < 1e-9:
        # ceiling/floor mount: fall back to the x axis
        horiz = np.array([1.0, 0.0, 0.0]) - normal[0] * normal
    horiz = horiz / np.linalg.norm(horiz)
    vert = np.cross(normal, horiz)
    return horiz, vert / np.linalg.norm(vert)


def build_grid(
    rows: int,
    cols: int,
    pitch: float,
    mount_center,
    mount_normal,
    num_segments: int,
) -> TileGrid:
    """Lay out ``rows x cols`` hexagonal tiles centred on ``mount_center``.

    Odd rows are shifted by half a pitch; rows are ``pitch * sqrt(3) / 2``
    apart. Tile ``r * cols + c`` sits in row ``r`` (top row first) and
    column ``c``. Segments are contiguous blocks of columns whose widths
    differ by at most one, wider blocks first.
    """
    if rows < 1 or cols < 1 or num_segments < 1:
        raise InvalidArgument(f"rows, cols and num_segments must be >= 1 (got {rows}, {cols}, {num_segments})")
    if num_segments > cols:
        raise InvalidArgument(f"num_segments={num_segments} exceeds cols={cols}")
    if not pitch > 0:
        raise InvalidArgument(f"pitch must be positive, got {pitch}")
    center = as_vec3(mount_center, "mount_center")
    normal = as_vec3(mount_normal, "mount_normal")
    norm = np.linalg.norm(normal)
    if norm < _EPS:
        raise InvalidArgument("mount_normal must be nonzero")
    normal = normal / norm

    r_idx, c_idx = np.divmod(np.arange(rows * cols), cols)
    u = c_idx * pitch + 0.5 * pitch * (r_idx % 2)
    v = -r_idx * pitch * np.sqrt(3.0) / 2.0
    u = u - u.mean()
    v = v - v.mean()
    horiz, vert = mount_axes(normal)
    positions = center + u[:, None] * horiz + v[:, None] * vert

    col_blocks = np.array_split(np.arange(cols), num_segments)
    seg_of_col = np.empty(cols, dtype=np.int64)
    for s, block in enumerate(col_blocks):
        seg_of_col[block] = s
    segment_of = seg_of_col[c_idx]

    positions.setflags(write=False)
    segment_of.setflags(write=False)
    return TileGrid(rows, cols, float(pitch), center, normal, positions, segment_of, num_segments)


def normal_angles(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elevation ``arccos(n.z)`` and azimuth ``atan2(n.y, n.x)`` of unit normals."""
    theta = np.arccos(np.clip(normals[..., 2], -1.0, 1.0))
    phi = np.arctan2(normals[..., 1], normals[..., 0])
    return theta, phi


def tile_normals(tiles: np.ndarray, focal: np.ndarray, ap: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised steering normals.

    ``tiles`` has shape ``(..., 3)`` and broadcasts against ``focal``.
    Returns ``(normals, valid)``; invalid entries (focal or AP on the tile,
    or opposite directions) carry a zero normal.
    """
    to_f = focal - tiles
    to_s = ap - tiles
    nf = np.linalg.norm(to_f, axis=-1, keepdims=True)
    ns = np.linalg.norm(to_s, axis=-1, keepdims=True)
    ok = (nf[..., 0] > _EPS) & (ns[..., 0] > _EPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        half = 0.5 * (to_f / nf + to_s / ns)
    hn = np.linalg.norm(half, axis=-1, keepdims=True)
    ok &= np.nan_to_num(hn[..., 0]) > 1e-9
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = np.where(ok[..., None], half / hn, 0.0)
    return normals, ok


def tile_normal(tile_pos, focal, ap) -> TileOrientation:
    """Orientation that reflects the ray from ``ap`` off ``tile_pos`` toward ``focal``."""
    t = as_vec3(tile_pos, "tile_pos")
    f = as_vec3(focal, "focal")
    s = as_vec3(ap, "ap")
    normals, ok = tile_normals(t, f, s)
    if not ok:
        raise DegenerateGeometry(f"no steering normal for tile {t}, focal {f}, ap {s}")
    theta, phi = normal_angles(normals)
    return TileOrientation(normals, float(theta), float(phi))


def angle_limits_about(normal, theta_half: float, phi_half: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Servo limits of +/- ``theta_half`` and +/- ``phi_half`` around a mount normal."""
    theta0, phi0 = normal_angles(as_vec3(normal, "normal"))
    theta_lim = (max(0.0, float(theta0) - theta_half), min(np.pi, float(theta0) + theta_half))
    phi_lim = (float(phi0) - phi_half, float(phi0) + phi_half)
    return theta_lim, phi_lim


def angles_within(theta, phi, theta_lim, phi_lim, tol: float = 1e-12) -> np.ndarray:
    """Elementwise limit check; the azimuth interval may wrap through +/-pi."""
    t_ok = (theta >= theta_lim[0] - tol) & (theta <= theta_lim[1] + tol)
    width = phi_lim[1] - phi_lim[0]
    if width >= 2 * np.pi - tol:
        return t_ok
    offset = np.mod(phi - phi_lim[0] + tol, 2 * np.pi)
    return t_ok & (offset <= width + 2 * tol)


def sample_box(box: FeasibleBox, grid_step: float) -> np.ndarray:
    """Regular grid over ``box`` including both faces, spacing at most ``grid_step``."""
    axes = []
    for lo, hi in zip(box.lo, box.hi):
        n = int(np.ceil((hi - lo) / grid_step - 1e-9)) + 1
        axes.append(np.linspace(lo, hi, max(n, 1)))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def feasible_mask(tiles: np.ndarray, points: np.ndarray, ap: np.ndarray, theta_lim, phi_lim, chunk: int = 4096) -> np.ndarray:
    """True for every focal point whose steering keeps all ``tiles`` within limits."""
    out = np.empty(len(points), dtype=bool)
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk, None, :]
        normals, ok = tile_normals(tiles[None, :, :], p, ap)
        theta, phi = normal_angles(normals)
        good = ok & angles_within(theta, phi, theta_lim, phi_lim)
        out[start:start + chunk] = good.all(axis=1)
    return out


def feasible_box(
    grid: TileGrid,
    segment: int,
    ap,
    theta_lim: Sequence[float],
    phi_lim: Sequence[float],
    search_box: FeasibleBox,
    grid_step: float = 0.25,
) -> FeasibleBox:
    """Tightest axis-aligned box around the feasible samples of ``search_box``."""
    if not grid_step > 0:
        raise InvalidArgument(f"grid_step must be positive, got {grid_step}")
    if theta_lim[0] > theta_lim[1] or phi_lim[0] > phi_lim[1]:
        raise InvalidArgument(f"angle limits must be ordered, got {theta_lim}, {phi_lim}")
    tiles = grid.segment_tiles(segment)
    points = sample_box(search_box, grid_step)
    mask = feasible_mask(tiles, points, as_vec3(ap, "ap"), theta_lim, phi_lim)
    if not mask.any():
        raise EmptyFeasibleRegion(f"segment {segment}: no feasible focal point on a {grid_step} m grid")
    good = points[mask]
    return FeasibleBox(good.min(axis=0), good.max(axis=0))


def clip_to_box(p, box: FeasibleBox) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), box.lo, box.hi)
