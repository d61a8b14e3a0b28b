"""Keyframe actions, rotation binning, and the coarse-to-fine prediction controller.

Euler convention: intrinsic X-Y-Z (``R = Rx(a) @ Ry(b) @ Rz(c)``), angles in
degrees canonicalized to ``[0, 360)``. Within 1e-6 degrees of the pitch
singularity (b = +-90) roll is set to 0 and yaw absorbs the free angle.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError
from .geometry import ColoredPointCloud, Workspace, crop_to_workspace, matrix_to_quat, quat_normalize, quat_to_matrix
from .projection import (DEFAULT_RESOLUTION, GridScores, RenderedView, argmax_grid, render_views,
                         score_grid)

logger = logging.getLogger(__name__)

N_ROT_BINS = 72
BIN_DEG = 360.0 / N_ROT_BINS
_GIMBAL_DEG = 1e-6


# --------------------------------------------------------------------------
# Euler angles and bins


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_to_quat(angles_deg) -> np.ndarray:
    a, b, c = np.radians(np.asarray(angles_deg, dtype=np.float64))
    return matrix_to_quat(_rx(a) @ _ry(b) @ _rz(c))


def quat_to_euler(q) -> np.ndarray:
    """Canonical intrinsic XYZ angles in degrees, each in ``[0, 360)``."""
    m = quat_to_matrix(q)
    b = np.degrees(np.arcsin(np.clip(m[0, 2], -1.0, 1.0)))
    if abs(abs(b) - 90.0) < _GIMBAL_DEG:
        b = np.copysign(90.0, b)
        a = 0.0
        c = np.degrees(np.arctan2(m[1, 0], m[1, 1]))
    else:
        a = np.degrees(np.arctan2(-m[1, 2], m[2, 2]))
        c = np.degrees(np.arctan2(-m[0, 1], m[0, 0]))
    return np.mod(np.array([a, b, c]), 360.0)


def angle_to_bin(deg: float) -> int:
    return int(np.floor(np.mod(deg, 360.0) / BIN_DEG + 0.5)) % N_ROT_BINS


def discretize_rotation(q) -> tuple[int, int, int]:
    return tuple(angle_to_bin(x) for x in quat_to_euler(q))  # type: ignore[return-value]


def undiscretize_rotation(bins) -> np.ndarray:
    bins = np.asarray(bins)
    if bins.shape != (3,) or np.any(bins < 0) or np.any(bins >= N_ROT_BINS):
        raise ConfigurationError(f"rotation bins must be three ints in [0, {N_ROT_BINS}), got {bins}")
    return euler_to_quat(bins * BIN_DEG)


def angle_diff_deg(a, b) -> np.ndarray:
    """Wrapped absolute difference in degrees."""
    d = np.mod(np.asarray(a) - np.asarray(b), 360.0)
    return np.minimum(d, 360.0 - d)


# --------------------------------------------------------------------------
# action records


@dataclass(frozen=True)
class KeyframeAction:
    position: np.ndarray
    orientation: np.ndarray  # xyzw
    gripper: int = 1  # 1 open, 0 closed
    collision: int = 1  # 1 = planner avoids collisions

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64)
        if p.shape != (3,) or not np.all(np.isfinite(p)):
            raise ConfigurationError("action position must be a finite 3-vector")
        q = np.array(self.orientation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ConfigurationError("action orientation must be a unit quaternion")
        q = quat_normalize(q)
        if self.gripper not in (0, 1) or self.collision not in (0, 1):
            raise ConfigurationError("gripper and collision must be 0 or 1")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)
        object.__setattr__(self, "gripper", int(self.gripper))
        object.__setattr__(self, "collision", int(self.collision))


@dataclass(frozen=True)
class DiscretizedAction:
    grid_index: int
    rotation_bins: tuple[int, int, int]
    gripper: int
    collision: int

    _FMT = "<I3B2B"

    def __post_init__(self):
        if self.grid_index < 0 or any(not 0 <= b < N_ROT_BINS for b in self.rotation_bins):
            raise ConfigurationError("discretized action index out of range")

    def pack(self) -> bytes:
        return struct.pack(self._FMT, self.grid_index, *self.rotation_bins, self.gripper, self.collision)

    @classmethod
    def unpack(cls, buf: bytes) -> "DiscretizedAction":
        g, bx, by, bz, gr, co = struct.unpack(cls._FMT, buf[:struct.calcsize(cls._FMT)])
        return cls(g, (bx, by, bz), gr, co)


DISCRETIZED_SIZE = struct.calcsize(DiscretizedAction._FMT)


def grid_index_of(position, ws: Workspace, dims) -> int:
    """Flat index of the grid cell containing ``position`` (max faces clamp inward)."""
    dims = np.asarray(dims)
    rel = (np.asarray(position) - ws.min_corner) / ws.extent * dims
    idx = np.clip(np.floor(rel).astype(int), 0, dims - 1)
    return int(np.ravel_multi_index(tuple(idx), tuple(dims)))


def discretize_action(action: KeyframeAction, ws: Workspace, dims) -> DiscretizedAction:
    return DiscretizedAction(grid_index_of(action.position, ws, dims),
                             discretize_rotation(action.orientation), action.gripper, action.collision)


# --------------------------------------------------------------------------
# coarse-to-fine controller


@dataclass
class Prediction:
    """What a predictor returns for one set of three views."""

    heatmaps: np.ndarray  # (3, R, R), each normalized
    rotation_logits: np.ndarray  # (3, 72)
    gripper_logit: float
    collision_logit: float

    def rotation_bins(self) -> tuple[int, int, int]:
        return tuple(int(np.argmax(r)) for r in self.rotation_logits)  # type: ignore[return-value]


class Predictor(Protocol):
    def __call__(self, views: Sequence[RenderedView]) -> Prediction: ...


@dataclass(frozen=True)
class RefineSpec:
    crop_fraction: float = 0.2
    fine_dims: tuple[int, int, int] = (100, 100, 100)

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise ConfigurationError(f"crop fraction must be in (0, 1], got {self.crop_fraction}")
        if len(self.fine_dims) != 3 or min(self.fine_dims) < 1:
            raise ConfigurationError(f"fine grid dims must be three positive ints, got {self.fine_dims}")


@dataclass
class PassResult:
    cuboid: Workspace
    views: tuple[RenderedView, ...]
    prediction: Prediction
    scores: GridScores
    grid_index: int
    action: KeyframeAction


@dataclass
class TwoPassResult:
    first: PassResult
    second: PassResult | None
    action: KeyframeAction
    diagnostics: dict = field(default_factory=dict)


def prediction_to_action(pred: Prediction, position) -> KeyframeAction:
    return KeyframeAction(position, undiscretize_rotation(pred.rotation_bins()),
                          int(pred.gripper_logit > 0), int(pred.collision_logit > 0))


def predict_pass(cloud: ColoredPointCloud, cuboid: Workspace, predictor: Callable, dims,
                 resolution: int = DEFAULT_RESOLUTION) -> PassResult:
    """Render the three views over ``cuboid``, predict, and back-project to a grid argmax."""
    views = render_views(cloud, cuboid, resolution)
    pred = predictor(views)
    scores = score_grid(pred.heatmaps, cuboid, dims, resolution)
    idx, pos = argmax_grid(scores)
    return PassResult(cuboid, views, pred, scores, idx, prediction_to_action(pred, pos))


def refine(first_pass: PassResult, cloud: ColoredPointCloud, ws: Workspace, spec: RefineSpec,
           predictor: Callable, resolution: int = DEFAULT_RESOLUTION) -> TwoPassResult:
    """Second pass on a zoomed crop centered at the first-pass translation.

    The second pass's whole action is returned; first-pass rotation and
    gripper outputs are discarded. An empty crop falls back to the first pass.
    """
    diag: dict = {}
    center = first_pass.action.position
    if not ws.contains(center):
        logger.info("first-pass position %s outside workspace; clamped", center)
        diag["clamped_first_pass"] = True
        center = ws.clamp(center)
    crop = ws.sub_cuboid(center, spec.crop_fraction)
    local = crop_to_workspace(cloud, crop)
    if len(local) == 0:
        logger.warning("empty crop around %s; using first-pass action", center)
        diag["empty_crop"] = True
        return TwoPassResult(first_pass, None, first_pass.action, diag)
    second = predict_pass(local, crop, predictor, spec.fine_dims, resolution)
    return TwoPassResult(first_pass, second, second.action, diag)


def two_pass(cloud: ColoredPointCloud, ws: Workspace, predictor: Callable, coarse_dims,
             spec: RefineSpec | None = RefineSpec(), resolution: int = DEFAULT_RESOLUTION) -> TwoPassResult:
    """Full translation+rotation prediction; ``spec=None`` skips refinement."""
    first = predict_pass(crop_to_workspace(cloud, ws), ws, predictor, coarse_dims, resolution)
    if spec is None:
        return TwoPassResult(first, None, first.action)
    return refine(first, cloud, ws, spec, predictor, resolution)
