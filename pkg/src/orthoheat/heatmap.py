"""Ground-truth heatmaps, heatmap losses, and convex upsampling.

Heatmaps are ``(R, R)`` arrays indexed ``[v, u]``; pixel ``(u, v)`` is
sampled at its center ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateTargetError
from .projection import OrthoViewSpec, world_to_pixel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeatmapSpec:
    sigma: float = 1.5  # px
    p_min: float = 0.05

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        if not 0 <= self.p_min < 1:
            raise ConfigurationError(f"p_min must be in [0, 1), got {self.p_min}")

    @property
    def radius(self) -> float:
        """Distance beyond which the map is truncated to zero."""
        if self.p_min == 0:
            return np.inf
        return self.sigma * np.sqrt(-2.0 * np.log(self.p_min))


def box_sigma(box, scale: float = 1.0) -> float:
    """Width for a pre-training object map: box diagonal / 6, at least 2 px."""
    x0, y0, x1, y1 = box
    return max(2.0, scale * float(np.hypot(x1 - x0, y1 - y0)) / 6.0)


def single_object_map(center, spec: HeatmapSpec, resolution: int) -> np.ndarray:
    """Truncated Gaussian bump around a continuous pixel position (unnormalized)."""
    cu, cv = (float(c) for c in center)
    c = np.arange(resolution) + 0.5
    du2 = (c - cu) ** 2
    dv2 = (c - cv) ** 2
    p = np.exp(-(dv2[:, None] + du2[None, :]) / (2.0 * spec.sigma ** 2))
    p[p < spec.p_min] = 0.0
    return p


def fuse_and_normalize(maps) -> np.ndarray:
    """Average the per-object maps, then scale to unit mass."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ConfigurationError("need at least one map to fuse")
    shape = maps[0].shape
    if any(m.shape != shape for m in maps):
        raise ConfigurationError("maps to fuse must share one resolution")
    avg = np.mean(maps, axis=0)
    total = avg.sum()
    if not total > 0:
        raise DegenerateTargetError("all object maps are fully truncated")
    return avg / total


def action_target_map(target, view: OrthoViewSpec, spec: HeatmapSpec = HeatmapSpec()) -> np.ndarray:
    uv = world_to_pixel(target, view)
    return fuse_and_normalize([single_object_map(uv, spec, view.resolution)])


def is_normalized(h, tol: float = 1e-6) -> bool:
    h = np.asarray(h)
    return bool(np.all(np.isfinite(h)) and np.all(h >= 0) and abs(h.sum() - 1.0) <= tol)


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def cross_entropy(pred, gt) -> float:
    """``-sum gt * log(pred)`` over pixels with ``gt > 0``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    m = gt > 0
    return float(-(gt[m] * np.log(pred[m])).sum())


def heatmap_peak(h) -> tuple[int, int]:
    """``(u, v)`` of the largest value (first in row-major order on ties)."""
    h = np.asarray(h)
    v, u = np.unravel_index(int(np.argmax(h)), h.shape)
    return int(u), int(v)


# --------------------------------------------------------------------------
# convex upsampling
#
# Weights have shape (..., Hc, Wc, 9, p, p). Neighbor k = (dy + 1) * 3 + (dx + 1)
# for row offset dy and column offset dx in {-1, 0, 1}; edges are clamped.


def neighborhoods(coarse: np.ndarray) -> np.ndarray:
    """(..., Hc, Wc) -> (..., Hc, Wc, 9) edge-clamped 3x3 neighborhoods."""
    pad = [(0, 0)] * (coarse.ndim - 2) + [(1, 1), (1, 1)]
    c = np.pad(coarse, pad, mode="edge")
    hc, wc = coarse.shape[-2:]
    return np.stack([c[..., dy:dy + hc, dx:dx + wc] for dy in range(3) for dx in range(3)], axis=-1)


def neighborhoods_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`neighborhoods`: scatter (..., Hc, Wc, 9) back onto (..., Hc, Wc)."""
    hc, wc = g.shape[-3:-1]
    out = np.zeros(g.shape[:-3] + (hc + 2, wc + 2), dtype=g.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            out[..., dy:dy + hc, dx:dx + wc] += g[..., k]
            k += 1
    # fold clamped border contributions back onto the edge cells
    out[..., 1, :] += out[..., 0, :]
    out[..., -2, :] += out[..., -1, :]
    out[..., :, 1] += out[..., :, 0]
    out[..., :, -2] += out[..., :, -1]
    return out[..., 1:-1, 1:-1]


def convex_upsample(coarse, weights, factor: int) -> np.ndarray:
    """Each fine pixel is a convex combination of its parent cell's 3x3 coarse neighborhood.

    Args:
        coarse: (..., Hc, Wc) values.
        weights: (..., Hc, Wc, 9, p, p) non-negative, summing to 1 over axis -3.
        factor: upsampling factor ``p``.

    Returns:
        (..., Hc * p, Wc * p) array.
    """
    coarse = np.asarray(coarse)
    weights = np.asarray(weights)
    hc, wc = coarse.shape[-2:]
    p = int(factor)
    if weights.shape != coarse.shape + (9, p, p):
        raise ConfigurationError(
            f"weights shape {weights.shape} != {coarse.shape + (9, p, p)} for factor {p}")
    nb = neighborhoods(coarse)
    fine = np.einsum("...k,...kab->...ab", nb, weights)
    # (..., Hc, Wc, p, p) -> (..., Hc, p, Wc, p)
    fine = np.swapaxes(fine, -3, -2)
    return fine.reshape(coarse.shape[:-2] + (hc * p, wc * p))


def softmax_weights(logits: np.ndarray) -> np.ndarray:
    """Normalize (..., 9, p, p) logits over the neighbor axis."""
    z = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


# --------------------------------------------------------------------------
# dumps and overlays

_MAGIC = "BVHM"


def save_heatmap(path, h, normalized: bool = True) -> None:
    """Header line ``BVHM 1 <R> <normalized 0|1>`` then R*R little-endian float32, row-major."""
    h = np.asarray(h)
    with open(path, "wb") as f:
        f.write(f"{_MAGIC} 1 {h.shape[0]} {int(normalized)}\n".encode("ascii"))
        f.write(np.ascontiguousarray(h, dtype="<f4").tobytes())


def load_heatmap(path) -> tuple[np.ndarray, bool]:
    buf = open(path, "rb").read()
    nl = buf.index(b"\n")
    head = buf[:nl].decode("ascii").split()
    if head[0] != _MAGIC:
        raise ConfigurationError(f"{path}: not a heatmap dump")
    r = int(head[2])
    data = np.frombuffer(buf, dtype="<f4", offset=nl + 1)
    if data.size != r * r:
        raise ConfigurationError(f"{path}: expected {r * r} values, found {data.size}")
    return data.reshape(r, r).astype(np.float64), head[3] == "1"


def overlay(color, h) -> np.ndarray:
    """Side-by-side image: the view, then the view tinted red by the heatmap."""
    color = np.asarray(color, dtype=np.float32)
    h = np.asarray(h, dtype=np.float64)
    a = (h / h.max()) if h.max() > 0 else h
    tinted = color * (1 - a[..., None]) * 0.7
    tinted[..., 0] += a.astype(np.float32)
    return np.concatenate([color, np.clip(tinted, 0, 1)], axis=1)
