"""Cameras, RGB-D reconstruction, workspace cropping and rigid transforms.

Conventions:
    * World frame is right-handed with z up, units are meters.
    * Quaternions are stored scalar-last, ``(x, y, z, w)``.
    * Depth images are in meters; a depth of 0 marks an invalid pixel.
    * Pixel ``(u, v)`` is column ``u``, row ``v``; unprojection uses the integer
      pixel coordinate, so a pixel at ``(cx, cy)`` lies on the optical axis.
"""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

_ORTHO_TOL = 1e-9


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# quaternions


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ConfigurationError("quaternion has zero or non-finite norm")
    q = q / n
    # canonical sign: w >= 0 keeps equal rotations bitwise comparable
    if q[3] < 0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]], dtype=np.float64)


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s]
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    s = np.sin(angle / 2.0)
    return quat_normalize([axis[0] * s, axis[1] * s, axis[2] * s, np.cos(angle / 2.0)])


def quat_angle(a, b) -> float:
    """Geodesic angle in radians between two orientations."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * np.arccos(min(1.0, d))


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _check_rotation(r: np.ndarray, what: str) -> None:
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ConfigurationError(f"{what} must be a finite 3x3 matrix")
    if np.abs(r @ r.T - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
        raise ConfigurationError(f"{what} is not a proper rotation")


# --------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _frozen(self.rotation, np.float64)
        t = _frozen(self.translation, np.float64)
        _check_rotation(r, "rotation")
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ConfigurationError("translation must be a finite 3-vector")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned cuboid in world coordinates."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.min_corner, np.float64)
        hi = _frozen(self.max_corner, np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ConfigurationError("workspace corners must be 3-vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ConfigurationError(f"workspace min {lo} must be below max {hi} on every axis")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    def contains(self, p, tol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.min_corner - tol) and np.all(p <= self.max_corner + tol))

    def clamp(self, p) -> np.ndarray:
        return np.clip(np.asarray(p, dtype=np.float64), self.min_corner, self.max_corner)

    def sub_cuboid(self, center, fraction: float) -> "Workspace":
        """Cuboid with edges ``fraction * extent`` centered as near ``center`` as fits inside."""
        if fraction >= 1.0:
            return self
        half = 0.5 * fraction * self.extent
        c = np.clip(np.asarray(center, dtype=np.float64),
                    self.min_corner + half, self.max_corner - half)
        return Workspace(c - half, c + half)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera.

    ``extrinsics`` maps camera coordinates (x right, y down, z forward) to
    the world frame.
    """

    intrinsics: np.ndarray
    extrinsics: RigidTransform
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        k = _frozen(self.intrinsics, np.float64)
        if k.shape != (3, 3) or not np.all(np.isfinite(k)):
            raise ConfigurationError("intrinsics must be a finite 3x3 matrix")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0 or k[2, 2] != 1:
            raise ConfigurationError("intrinsics must be upper triangular with k[2,2] = 1")
        w, h = (int(x) for x in self.resolution)
        if w < 1 or h < 1:
            raise ConfigurationError("camera resolution must be positive")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "resolution", (w, h))

    @classmethod
    def look_at(cls, eye, target, fov_deg: float, width: int, height: int) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        if abs(fwd @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        k = np.array([[f, 0.0, (width - 1) / 2.0], [0.0, f, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
        return cls(k, RigidTransform(rot, eye), (width, height))

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel coordinates (N, 2), depth along the optical axis (N,))."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        cam = (pts - self.extrinsics.translation) @ self.extrinsics.rotation
        z = cam[:, 2]
        uvw = cam @ self.intrinsics.T
        return uvw[:, :2] / z[:, None], z


@dataclass(frozen=True)
class ColoredPointCloud:
    points: np.ndarray  # (N, 3) float64, meters
    colors: np.ndarray  # (N, 3) float32 in [0, 1]

    def __post_init__(self):
        p = _frozen(np.reshape(self.points, (-1, 3)), np.float64)
        c = _frozen(np.reshape(self.colors, (-1, 3)), np.float32)
        if len(p) != len(c):
            raise ConfigurationError(f"{len(p)} points but {len(c)} colors")
        if not np.all(np.isfinite(p)):
            raise ConfigurationError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "colors", c)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "ColoredPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.float32))

    @classmethod
    def concatenate(cls, clouds) -> "ColoredPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(np.concatenate([c.points for c in clouds]),
                   np.concatenate([c.colors for c in clouds]))

    def select(self, mask) -> "ColoredPointCloud":
        return ColoredPointCloud(self.points[mask], self.colors[mask])


# --------------------------------------------------------------------------
# operations


def reconstruct_cloud(rgb, depth, cam: CameraModel, diagnostics: Counter | None = None) -> ColoredPointCloud:
    """Unproject every valid depth pixel into a world-frame colored point.

    Args:
        rgb: (H, W, 3) image, floats in [0, 1] or uint8.
        depth: (H, W) depth in meters, 0 marks invalid pixels.
        cam: camera that captured both images.
        diagnostics: optional tally; non-finite depths increment
            ``"nonfinite_depth"``.
    """
    rgb = np.asarray(rgb)
    depth = np.asarray(depth, dtype=np.float64)
    w, h = cam.resolution
    if depth.shape != (h, w) or rgb.shape != (h, w, 3):
        raise ConfigurationError(
            f"rgb {rgb.shape} / depth {depth.shape} do not match camera resolution {(h, w)}")
    if rgb.dtype == np.uint8:
        rgb = rgb.astype(np.float32) / 255.0

    finite = np.isfinite(depth)
    n_bad = int((~finite).sum())
    if n_bad:
        if diagnostics is not None:
            diagnostics["nonfinite_depth"] += n_bad
        logger.debug("rejected %d non-finite depth pixels", n_bad)
    valid = finite & (depth > 0)
    v, u = np.nonzero(valid)
    d = depth[v, u]
    k = cam.intrinsics
    # invert the upper-triangular intrinsics row by row
    y = (v - k[1, 2]) / k[1, 1]
    x = (u - k[0, 2] - k[0, 1] * y) / k[0, 0]
    cam_pts = np.stack([x * d, y * d, d], axis=1)
    world = cam_pts @ cam.extrinsics.rotation.T + cam.extrinsics.translation
    return ColoredPointCloud(world, rgb[v, u])


def crop_to_workspace(cloud: ColoredPointCloud, ws: Workspace) -> ColoredPointCloud:
    p = cloud.points
    inside = np.all((p >= ws.min_corner) & (p <= ws.max_corner), axis=1)
    return cloud.select(inside)


def apply_transform(cloud: ColoredPointCloud, t: RigidTransform) -> ColoredPointCloud:
    return ColoredPointCloud(cloud.points @ t.rotation.T + t.translation, cloud.colors)


def apply_transform_pose(position, orientation, t: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Map a pose (position, xyzw quaternion) through ``t``; orientation is left-composed."""
    pos = t.rotation @ np.asarray(position, dtype=np.float64) + t.translation
    quat = quat_normalize(quat_multiply(matrix_to_quat(t.rotation), orientation))
    return pos, quat


# --------------------------------------------------------------------------
# file formats

_BVPC_MAGIC = b"BVPC"


def save_cloud(path, cloud: ColoredPointCloud) -> None:
    """Little-endian: magic ``BVPC``, u32 count, count x 6 float32 (x, y, z, r, g, b)."""
    data = np.concatenate([cloud.points, cloud.colors.astype(np.float64)], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(_BVPC_MAGIC)
        f.write(struct.pack("<I", len(cloud)))
        f.write(data.tobytes())


def cloud_bytes(cloud: ColoredPointCloud) -> bytes:
    data = np.concatenate([cloud.points, cloud.colors.astype(np.float64)], axis=1).astype("<f4")
    return _BVPC_MAGIC + struct.pack("<I", len(cloud)) + data.tobytes()


def parse_cloud(buf: bytes) -> ColoredPointCloud:
    if buf[:4] != _BVPC_MAGIC:
        raise ConfigurationError("not a BVPC point-cloud file")
    (n,) = struct.unpack_from("<I", buf, 4)
    expected = 8 + 24 * n
    if len(buf) != expected:
        raise ConfigurationError(f"BVPC size {len(buf)} != expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, 6)
    return ColoredPointCloud(data[:, :3].astype(np.float64), data[:, 3:])


def load_cloud(path) -> ColoredPointCloud:
    return parse_cloud(Path(path).read_bytes())


def parse_keyvalue(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment, ``[section]`` prefixes keys."""
    out: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[f"{section}.{key}" if section else key] = value
    return out


def _floats(s: str, n: int, key: str) -> np.ndarray:
    try:
        vals = np.array([float(x) for x in s.replace(",", " ").split()])
    except ValueError:
        raise ConfigurationError(f"{key}: expected {n} numbers, got {s!r}") from None
    if vals.shape != (n,):
        raise ConfigurationError(f"{key}: expected {n} numbers, got {s!r}")
    return vals


def workspace_from_keyvalue(kv: dict[str, str], prefix: str = "workspace") -> Workspace:
    try:
        return Workspace(_floats(kv[f"{prefix}.min"], 3, f"{prefix}.min"),
                         _floats(kv[f"{prefix}.max"], 3, f"{prefix}.max"))
    except KeyError as e:
        raise ConfigurationError(f"missing config key {e.args[0]}") from None


def camera_from_keyvalue(kv: dict[str, str], prefix: str = "camera") -> CameraModel:
    """Keys: ``fx fy cx cy width height`` plus ``rotation`` (9 numbers, row-major) and ``translation``."""
    try:
        fx, fy, cx, cy = (float(kv[f"{prefix}.{k}"]) for k in ("fx", "fy", "cx", "cy"))
        w, h = int(kv[f"{prefix}.width"]), int(kv[f"{prefix}.height"])
        rot = _floats(kv.get(f"{prefix}.rotation", "1 0 0 0 1 0 0 0 1"), 9, f"{prefix}.rotation")
        trans = _floats(kv.get(f"{prefix}.translation", "0 0 0"), 3, f"{prefix}.translation")
    except KeyError as e:
        raise ConfigurationError(f"missing config key {e.args[0]}") from None
    except ValueError as e:
        raise ConfigurationError(f"{prefix}: {e}") from None
    k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraModel(k, RigidTransform(rot.reshape(3, 3), trans), (w, h))
