"""Slow, literal reference implementations used to check the fast paths.

Nothing here imports the projection, heatmap or model internals; every
formula is restated in its most direct form so a shared bug cannot hide.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError

MAX_RENDER_WORK = 4_000_000  # points * pixels
MAX_GRID_CELLS = 4096


@dataclass(frozen=True)
class OracleReport:
    case: str
    max_abs: float
    max_rel: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.tolerance or self.max_rel <= self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.case}: max_abs={self.max_abs:.3e} max_rel={self.max_rel:.3e} tol={self.tolerance:g}"


def compare(case: str, got, expected, tolerance: float) -> OracleReport:
    got = np.asarray(got, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if got.shape != expected.shape:
        raise ConfigurationError(f"{case}: shape {got.shape} != {expected.shape}")
    diff = np.abs(got - expected)
    scale = np.maximum(np.abs(expected), 1e-300)
    return OracleReport(case, float(diff.max(initial=0.0)), float((diff / scale).max(initial=0.0)), tolerance)


# --------------------------------------------------------------------------
# geometry


def slow_unproject(depth, intrinsics, cam_to_world) -> list[tuple[int, int, np.ndarray]]:
    """Per-pixel loop: returns (row, col, world point) for every pixel with depth > 0."""
    k = np.asarray(intrinsics, dtype=float)
    t = np.asarray(cam_to_world, dtype=float)
    fx, fy, cx, cy, skew = k[0, 0], k[1, 1], k[0, 2], k[1, 2], k[0, 1]
    out = []
    for row in range(depth.shape[0]):
        for col in range(depth.shape[1]):
            z = float(depth[row, col])
            if not (math.isfinite(z) and z > 0):
                continue
            yc = (row - cy) / fy * z
            xc = (col - cx - skew * (row - cy) / fy) / fx * z
            p = t[:3, :3] @ np.array([xc, yc, z]) + t[:3, 3]
            out.append((row, col, p))
    return out


# --------------------------------------------------------------------------
# rendering

# view name -> (u axis, v axis, depth axis, depth measured from the max face)
_ATLAS = {"top": (0, 1, 2, True), "front": (0, 2, 1, False), "right": (1, 2, 0, True)}


def _pixel_of(p, lo, hi, axis, r):
    au, av, ad, from_max = _ATLAS[axis]
    u = int(math.floor((p[au] - lo[au]) / (hi[au] - lo[au]) * r))
    v = int(math.floor((p[av] - lo[av]) / (hi[av] - lo[av]) * r))
    d = hi[ad] - p[ad] if from_max else p[ad] - lo[ad]
    return min(u, r - 1), min(v, r - 1), d


def slow_render(points, axis: str, lo, hi, r: int):
    """Scan every point for every pixel. Returns (winner (r, r) int, depth (r, r))."""
    points = np.asarray(points, dtype=float)
    if len(points) * r * r > MAX_RENDER_WORK:
        raise ConfigurationError("slow_render instance exceeds the size cap")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    inside = [bool(np.all(p >= lo) and np.all(p <= hi)) for p in points]
    binned = [_pixel_of(p, lo, hi, axis, r) if ok else None for p, ok in zip(points, inside)]
    us = np.array([b[0] if b else -1 for b in binned])
    vs = np.array([b[1] if b else -1 for b in binned])
    ds = np.array([b[2] if b else np.inf for b in binned])
    winner = np.full((r, r), -1, dtype=np.int64)
    depth = np.full((r, r), np.inf)
    for v in range(r):
        for u in range(r):
            hits = np.nonzero((us == u) & (vs == v))[0]
            best = -1
            for i in hits:  # ascending index, strict < keeps the first of equal depths
                if best < 0 or ds[i] < ds[best]:
                    best = i
            if best >= 0:
                winner[v, u] = best
                depth[v, u] = ds[best]
    return winner, depth


# --------------------------------------------------------------------------
# back-projection


def slow_score_grid(heatmaps, lo, hi, dims, eps: float = 1e-12) -> np.ndarray:
    """Triple loop over cells; per view, sum pixel mass weighted by footprint overlap area."""
    nx, ny, nz = dims
    if nx * ny * nz > MAX_GRID_CELLS:
        raise ConfigurationError("slow_score_grid instance exceeds the size cap")
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    r = heatmaps[0].shape[0]
    out = np.empty(nx * ny * nz)
    n = 0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                total = 0.0
                idx, n_cells = (i, j, k), (nx, ny, nz)
                for axis, h in zip(("top", "front", "right"), heatmaps):
                    au, av, _, _ = _ATLAS[axis]
                    u0 = idx[au] * r / n_cells[au]
                    u1 = (idx[au] + 1) * r / n_cells[au]
                    v0 = idx[av] * r / n_cells[av]
                    v1 = (idx[av] + 1) * r / n_cells[av]
                    mass = 0.0
                    for pv in range(r):
                        ov = max(0.0, min(v1, pv + 1) - max(v0, pv))
                        if ov == 0.0:
                            continue
                        for pu in range(r):
                            ou = max(0.0, min(u1, pu + 1) - max(u0, pu))
                            if ou:
                                mass += ov * ou * h[pv, pu]
                    total += math.log(mass + eps)
                out[n] = total
                n += 1
    return out


def slow_argmax(scores) -> int:
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


# --------------------------------------------------------------------------
# heatmaps and losses


def slow_convex_upsample(coarse, weights, p: int) -> np.ndarray:
    """weights[y, x, k, sy, sx], neighbor k = (dy + 1) * 3 + (dx + 1), clamped edges."""
    hc, wc = coarse.shape
    out = np.zeros((hc * p, wc * p))
    for y in range(hc):
        for x in range(wc):
            for sy in range(p):
                for sx in range(p):
                    acc = 0.0
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy = min(max(y + dy, 0), hc - 1)
                            xx = min(max(x + dx, 0), wc - 1)
                            acc += weights[y, x, (dy + 1) * 3 + dx + 1, sy, sx] * coarse[yy, xx]
                    out[y * p + sy, x * p + sx] = acc
    return out


def slow_cross_entropy(pred, gt) -> float:
    total = 0.0
    for a, b in zip(np.ravel(pred), np.ravel(gt)):
        if b > 0:
            total -= b * math.log(a)
    return total


def _log_softmax_at(logits, label) -> float:
    m = max(logits)
    return logits[label] - m - math.log(sum(math.exp(x - m) for x in logits))


def _bce(logit: float, label: int) -> float:
    p = 1.0 / (1.0 + math.exp(-logit))
    return -(label * math.log(p) + (1 - label) * math.log(1 - p))


def slow_loss(pred_heatmaps, gt_heatmaps, rot_logits, rot_bins, gripper_logit, gripper,
              collision_logit, collision, action_terms: bool = True) -> dict[str, float]:
    """Elementwise four-term loss: mean heatmap CE over views + rotation CE + two BCEs."""
    trans = sum(slow_cross_entropy(p, g) for p, g in zip(pred_heatmaps, gt_heatmaps)) / len(gt_heatmaps)
    if not action_terms:
        return {"trans": trans, "rot": 0.0, "gripper": 0.0, "collision": 0.0, "total": trans}
    rot = -sum(_log_softmax_at(list(l), b) for l, b in zip(rot_logits, rot_bins))
    g = _bce(float(gripper_logit), gripper)
    c = _bce(float(collision_logit), collision)
    return {"trans": trans, "rot": rot, "gripper": g, "collision": c, "total": trans + rot + g + c}


# --------------------------------------------------------------------------
# gradients


def fd_gradients(f: Callable[[dict], float], params: dict[str, np.ndarray], step: float = 1e-4,
                 max_entries: int | None = None, seed: int = 0) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Central differences of scalar ``f`` in float64.

    Returns ``{name: (flat indices probed, derivative estimates)}``; with
    ``max_entries`` only a seeded random subset of each block is probed.
    """
    rng = np.random.default_rng(seed)
    shadow = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, arr in shadow.items():
        flat = arr.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        else:
            idx = np.arange(flat.size)
        est = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            fp = f(shadow)
            flat[i] = old - step
            fm = f(shadow)
            flat[i] = old
            est[n] = (fp - fm) / (2 * step)
        out[name] = (idx, est)
    return out
