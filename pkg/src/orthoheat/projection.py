"""Orthographic views of a point cloud and back-projection onto a 3D grid.

View atlas (``u``, ``v`` and the direction toward the viewer form a
right-handed frame in every view, so ``v`` points "up" in the picture):

======  ===========  ====  ====  ======================
view    looks along  u     v     depth
======  ===========  ====  ====  ======================
top     -z           +x    +y    ``max_z - z``
front   +y           +x    +z    ``y - min_y``
right   -x           +y    +z    ``max_x - x``
======  ===========  ====  ====  ======================

Continuous pixel coordinates map the cuboid's min corner to ``(0, 0)`` and
the max corner to ``(R, R)``. Pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``;
points on a max face are clamped into the last pixel. Images are stored
row-major as ``image[v, u]``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, OutOfRangeError
from .geometry import ColoredPointCloud, Workspace

logger = logging.getLogger(__name__)

VIEWS = ("top", "front", "right")
# (u axis, v axis, depth axis, depth measured from max face?)
_AXES = {
    "top": (0, 1, 2, True),
    "front": (0, 2, 1, False),
    "right": (1, 2, 0, True),
}
_VIEW_DIRECTION = {"top": (0.0, 0.0, -1.0), "front": (0.0, 1.0, 0.0), "right": (-1.0, 0.0, 0.0)}

DEFAULT_RESOLUTION = 224
BACKGROUND = np.array([0.5, 0.5, 0.5], dtype=np.float32)
SCORE_EPS = 1e-12


@dataclass(frozen=True)
class OrthoViewSpec:
    axis: str
    resolution: int
    cuboid: Workspace

    def __post_init__(self):
        if self.axis not in _AXES:
            raise ConfigurationError(f"unknown view axis {self.axis!r}; expected one of {VIEWS}")
        if int(self.resolution) < 16:
            raise ConfigurationError(f"view resolution must be >= 16, got {self.resolution}")
        object.__setattr__(self, "resolution", int(self.resolution))

    @property
    def axes(self) -> tuple[int, int, int, bool]:
        return _AXES[self.axis]

    @property
    def direction(self) -> np.ndarray:
        return np.array(_VIEW_DIRECTION[self.axis])

    @property
    def pixel_size(self) -> np.ndarray:
        """World length of one pixel along (u, v)."""
        au, av, _, _ = self.axes
        ext = self.cuboid.extent
        return np.array([ext[au], ext[av]]) / self.resolution


def view_specs(cuboid: Workspace, resolution: int = DEFAULT_RESOLUTION) -> tuple[OrthoViewSpec, ...]:
    return tuple(OrthoViewSpec(a, resolution, cuboid) for a in VIEWS)


@dataclass(frozen=True)
class RenderedView:
    spec: OrthoViewSpec
    color: np.ndarray  # (R, R, 3) float32
    depth: np.ndarray  # (R, R) float64, inf where empty
    occupancy: np.ndarray  # (R, R) bool
    winner: np.ndarray  # (R, R) int64 index into the rendered cloud, -1 where empty


@dataclass(frozen=True)
class GridScores:
    dims: tuple[int, int, int]
    spacing: np.ndarray
    origin: np.ndarray  # cuboid min corner; cell (i,j,k) center = origin + (idx + 0.5) * spacing
    scores: np.ndarray  # flat, index = (i * ny + j) * nz + k

    def __post_init__(self):
        if any(int(d) < 1 for d in self.dims):
            raise ConfigurationError(f"grid dims must be >= 1, got {self.dims}")
        if self.scores.shape != (int(np.prod(self.dims)),):
            raise ConfigurationError("score array length does not match grid dims")

    def center(self, flat_index: int) -> np.ndarray:
        idx = np.unravel_index(int(flat_index), self.dims)
        return self.origin + (np.array(idx) + 0.5) * self.spacing


# --------------------------------------------------------------------------
# pixel maps


def _continuous(points: np.ndarray, spec: OrthoViewSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    au, av, ad, from_max = spec.axes
    lo, hi = spec.cuboid.min_corner, spec.cuboid.max_corner
    r = spec.resolution
    u = (points[:, au] - lo[au]) / (hi[au] - lo[au]) * r
    v = (points[:, av] - lo[av]) / (hi[av] - lo[av]) * r
    d = hi[ad] - points[:, ad] if from_max else points[:, ad] - lo[ad]
    return u, v, d


def _bin(c: np.ndarray, r: int) -> np.ndarray:
    return np.minimum(np.floor(c).astype(np.int64), r - 1)


def world_to_pixel(p, spec: OrthoViewSpec) -> np.ndarray:
    """Continuous ``(u, v)`` of a world point. Accepts (3,) or (N, 3)."""
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    lo, hi = spec.cuboid.min_corner, spec.cuboid.max_corner
    if np.any(pts < lo) or np.any(pts > hi):
        raise OutOfRangeError(f"point outside view cuboid [{lo}, {hi}]")
    u, v, _ = _continuous(pts, spec)
    uv = np.stack([u, v], axis=1)
    return uv[0] if single else uv


def pixel_index(p, spec: OrthoViewSpec) -> tuple[int, int]:
    """Integer ``(u, v)`` pixel that ``render`` would use for ``p``."""
    u, v = world_to_pixel(p, spec)
    r = spec.resolution
    return min(int(np.floor(u)), r - 1), min(int(np.floor(v)), r - 1)


def pixel_to_ray(u: float, v: float, spec: OrthoViewSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ray through continuous pixel ``(u, v)``: origin on the viewer's face, unit direction."""
    au, av, ad, from_max = spec.axes
    lo, hi = spec.cuboid.min_corner, spec.cuboid.max_corner
    r = spec.resolution
    origin = np.empty(3)
    origin[au] = lo[au] + u / r * (hi[au] - lo[au])
    origin[av] = lo[av] + v / r * (hi[av] - lo[av])
    origin[ad] = hi[ad] if from_max else lo[ad]
    return origin, spec.direction


# --------------------------------------------------------------------------
# rendering


def render(cloud: ColoredPointCloud, spec: OrthoViewSpec, diagnostics: Counter | None = None) -> RenderedView:
    """Z-buffered orthographic rendering; nearest point per pixel wins, ties to lower index."""
    r = spec.resolution
    pts = cloud.points
    lo, hi = spec.cuboid.min_corner, spec.cuboid.max_corner
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    n_out = len(pts) - int(inside.sum())
    if n_out:
        if diagnostics is not None:
            diagnostics["render_dropped"] += n_out
        idx = np.nonzero(inside)[0]
        pts = pts[idx]
    else:
        idx = None
    u, v, d = _continuous(pts, spec)
    pix = _bin(v, r) * r + _bin(u, r)
    winner, best = kernels.zbuffer(pix, d, r * r)
    if idx is not None:
        winner = np.where(winner >= 0, idx[np.maximum(winner, 0)], -1)
    occ = winner >= 0
    color = np.empty((r * r, 3), dtype=np.float32)
    color[:] = BACKGROUND
    color[occ] = cloud.colors[winner[occ]]
    return RenderedView(spec, color.reshape(r, r, 3), best.reshape(r, r),
                        occ.reshape(r, r), winner.reshape(r, r))


def render_views(cloud: ColoredPointCloud, cuboid: Workspace, resolution: int = DEFAULT_RESOLUTION,
                 diagnostics: Counter | None = None) -> tuple[RenderedView, ...]:
    return tuple(render(cloud, s, diagnostics) for s in view_specs(cuboid, resolution))


# --------------------------------------------------------------------------
# back-projection


def _overlap_matrix(n: int, r: int) -> np.ndarray:
    """(n, r) overlap length, in pixels, of each of n equal grid intervals with each of r pixels."""
    edges = np.arange(n + 1) * (r / n)
    a, b = edges[:-1, None], edges[1:, None]
    p = np.arange(r)[None, :]
    return np.clip(np.minimum(b, p + 1) - np.maximum(a, p), 0.0, None)


def footprint_mass(heatmap: np.ndarray, spec: OrthoViewSpec, dims) -> np.ndarray:
    """Heatmap mass inside each grid column's projected rectangle, indexed ``[v_cell, u_cell]``."""
    au, av, _, _ = spec.axes
    r = spec.resolution
    wu = _overlap_matrix(int(dims[au]), r)
    wv = _overlap_matrix(int(dims[av]), r)
    return wv @ np.asarray(heatmap, dtype=np.float64) @ wu.T


def score_grid(heatmaps, ws: Workspace, dims, resolution: int | None = None) -> GridScores:
    """Fuse three per-view heatmaps (top, front, right) into log scores over grid cells.

    Each cell's score is the sum over views of ``log(m + eps)``, where ``m``
    is the heatmap mass falling inside the cell's projected footprint
    (pixels count with their fractional overlap). When the grid is finer than
    the pixels this is the pixel value scaled by a constant; when it is
    coarser it keeps the mass that point sampling would skip.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigurationError(f"grid dims must be three positive ints, got {dims}")
    heatmaps = [np.asarray(h, dtype=np.float64) for h in heatmaps]
    if len(heatmaps) != 3:
        raise ConfigurationError("score_grid needs exactly three heatmaps (top, front, right)")
    r = resolution or heatmaps[0].shape[0]
    logs = []
    for axis, h in zip(VIEWS, heatmaps):
        if h.shape != (r, r):
            raise ConfigurationError(f"{axis} heatmap shape {h.shape} != view resolution {(r, r)}")
        m = footprint_mass(h, OrthoViewSpec(axis, r, ws), dims)
        logs.append(np.log(m + SCORE_EPS))
    scores = kernels.fuse_scores(*logs)
    return GridScores(dims, ws.extent / np.array(dims), ws.min_corner.copy(), scores)


def argmax_grid(scores: GridScores) -> tuple[int, np.ndarray]:
    """Best cell (lowest flat index on ties) and its center in meters."""
    i = kernels.argmax_first(scores.scores)
    return i, scores.center(i)


# --------------------------------------------------------------------------
# export

_GRID_MAGIC = "BVGS"
_DEPTH_MAGIC = "BVDP"


def write_ppm(path, image: np.ndarray, flip: bool = True) -> None:
    """Binary P6 pixmap; ``flip`` puts ``v = R-1`` at the top row so world-up is up."""
    img = np.asarray(image, dtype=np.float64)
    if flip:
        img = img[::-1]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of ``write_ppm(flip=False)``: (H, W, 3) float32 in [0, 1]."""
    buf = open(path, "rb").read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        parts.append(buf[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P6":
        raise ConfigurationError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return data.astype(np.float32) / maxval


def _write_header_f32(path, header: str, data: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(header.encode("ascii") + b"\n")
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_header_f32(path) -> tuple[list[str], np.ndarray]:
    buf = open(path, "rb").read()
    nl = buf.index(b"\n")
    return buf[:nl].decode("ascii").split(), np.frombuffer(buf, dtype="<f4", offset=nl + 1)


def save_depth(path, view: RenderedView) -> None:
    """Text header ``BVDP 1 <axis> <R>`` then R*R float32 depths (row-major ``[v, u]``, inf = empty)."""
    _write_header_f32(path, f"{_DEPTH_MAGIC} 1 {view.spec.axis} {view.spec.resolution}", view.depth)


def load_depth(path) -> tuple[str, np.ndarray]:
    head, data = _read_header_f32(path)
    if head[0] != _DEPTH_MAGIC:
        raise ConfigurationError(f"{path}: not a depth dump")
    r = int(head[3])
    return head[2], data.reshape(r, r).astype(np.float64)


def save_grid_scores(path, gs: GridScores) -> None:
    """Header ``BVGS 1 nx ny nz ox oy oz sx sy sz`` then float32 scores in flat order."""
    vals = " ".join(repr(float(x)) for x in (*gs.origin, *gs.spacing))
    _write_header_f32(path, f"{_GRID_MAGIC} 1 {' '.join(str(d) for d in gs.dims)} {vals}", gs.scores)


def load_grid_scores(path) -> GridScores:
    head, data = _read_header_f32(path)
    if head[0] != _GRID_MAGIC:
        raise ConfigurationError(f"{path}: not a grid-score dump")
    dims = tuple(int(x) for x in head[2:5])
    origin = np.array([float(x) for x in head[5:8]])
    spacing = np.array([float(x) for x in head[8:11]])
    return GridScores(dims, spacing, origin, data.astype(np.float64))
