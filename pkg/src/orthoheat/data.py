"""Trajectories, keyframe extraction, rigid augmentation, grounding records, and their on-disk shards.

Demo shard layout (all binary fields little-endian)::

    demo_<id>/meta.txt         key = value text: format, instruction, step count, grid dims
    demo_<id>/step_<k>.rec     one trajectory step (see ``_pack_step``)
    demo_<id>/obs/<sha1>.bvpc  content-addressed observation clouds

Grounding splits are one JSON object per line:
``{"image": "img/0001.ppm", "phrase": "the red block", "boxes": [[x0, y0, x1, y1], ...]}``
with integer pixel boxes (half-open, ``x1``/``y1`` exclusive) in the image's own resolution.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actionspace import DISCRETIZED_SIZE, DiscretizedAction, KeyframeAction, discretize_action
from .errors import ConfigurationError
from .geometry import (ColoredPointCloud, RigidTransform, Workspace, apply_transform, apply_transform_pose,
                       cloud_bytes, load_cloud, parse_keyvalue, rotation_z)
from .heatmap import HeatmapSpec, fuse_and_normalize, single_object_map
from .projection import read_ppm, write_ppm

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class TrajectoryStep:
    obs_ref: str
    position: np.ndarray
    orientation: np.ndarray  # xyzw
    gripper: int
    joint_velocities: np.ndarray  # rad/s
    is_final: bool = False
    collision: int = 1

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=np.float64))
        object.__setattr__(self, "joint_velocities", np.asarray(self.joint_velocities, dtype=np.float64))
        object.__setattr__(self, "gripper", int(self.gripper))
        object.__setattr__(self, "collision", int(self.collision))
        object.__setattr__(self, "is_final", bool(self.is_final))

    def action(self) -> KeyframeAction:
        return KeyframeAction(self.position, self.orientation, self.gripper, self.collision)


@dataclass(frozen=True)
class Trajectory:
    instruction: str
    steps: tuple[TrajectoryStep, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise ConfigurationError("trajectory needs at least one step")
        if not steps[-1].is_final or any(s.is_final for s in steps[:-1]):
            raise ConfigurationError("exactly the last trajectory step must be final")
        if len({s.joint_velocities.shape for s in steps}) != 1:
            raise ConfigurationError("joint-velocity vectors must share one length")
        object.__setattr__(self, "steps", steps)


@dataclass(frozen=True)
class KeyframeDemo:
    """Supervision pairs: observation before each keyframe -> that keyframe's action."""

    instruction: str
    pairs: tuple[tuple[str, KeyframeAction], ...]
    keyframe_steps: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.pairs:
            raise ConfigurationError("keyframe demo needs at least one pair")
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "keyframe_steps", tuple(self.keyframe_steps))

    def check_workspace(self, ws: Workspace) -> None:
        for _, a in self.pairs:
            if not ws.contains(a.position):
                raise ConfigurationError(f"keyframe action {a.position} outside the workspace")


@dataclass(frozen=True)
class GroundingRecord:
    image: str
    phrase: str
    boxes: tuple[tuple[int, int, int, int], ...]
    size: tuple[int, int] | None = None  # (width, height); read from the image when None

    def __post_init__(self):
        boxes = tuple(tuple(int(x) for x in b) for b in self.boxes)
        if not boxes:
            raise ConfigurationError("grounding record needs at least one box")
        for b in boxes:
            if len(b) != 4 or b[0] >= b[2] or b[1] >= b[3] or min(b) < 0:
                raise ConfigurationError(f"invalid box {b}")
            if self.size is not None and (b[2] > self.size[0] or b[3] > self.size[1]):
                raise ConfigurationError(f"box {b} exceeds image size {self.size}")
        object.__setattr__(self, "boxes", boxes)


@dataclass(frozen=True)
class AugmentSpec:
    max_yaw_deg: float = 45.0
    max_translation: tuple[float, float, float] = (0.1, 0.1, 0.02)
    resample_limit: int = 10

    def __post_init__(self):
        t = tuple(float(x) for x in self.max_translation)
        if self.max_yaw_deg < 0 or len(t) != 3 or min(t) < 0:
            raise ConfigurationError("augmentation bounds must be non-negative")
        if self.resample_limit < 1:
            raise ConfigurationError("resample limit must be at least 1")
        object.__setattr__(self, "max_translation", t)


# --------------------------------------------------------------------------
# keyframes


def keyframe_indices(traj: Trajectory, v_thresh: float = 0.1) -> list[int]:
    """Steps that are stationary, toggle the gripper, or end the episode; repeats collapsed."""
    picked = []
    prev_gripper = None
    for i, s in enumerate(traj.steps):
        still = bool(np.all(np.abs(s.joint_velocities) < v_thresh))
        toggled = prev_gripper is not None and s.gripper != prev_gripper
        if still or toggled or s.is_final:
            picked.append(i)
        prev_gripper = s.gripper
    out: list[int] = []
    for i in picked:
        if out and _same_keyframe(traj.steps[out[-1]], traj.steps[i]):
            out[-1] = i  # a long stop: keep the latest of the identical run
        else:
            out.append(i)
    return out


def _same_keyframe(a: TrajectoryStep, b: TrajectoryStep, tol: float = 1e-6) -> bool:
    same_q = min(np.abs(a.orientation - b.orientation).max(), np.abs(a.orientation + b.orientation).max()) <= tol
    return bool(np.abs(a.position - b.position).max() <= tol and same_q and a.gripper == b.gripper)


def extract_keyframes(traj: Trajectory, v_thresh: float = 0.1) -> KeyframeDemo:
    keys = keyframe_indices(traj, v_thresh)
    pairs = []
    obs_step = 0
    for k in keys:
        pairs.append((traj.steps[obs_step].obs_ref, traj.steps[k].action()))
        obs_step = k
    return KeyframeDemo(traj.instruction, tuple(pairs), tuple(keys))


# --------------------------------------------------------------------------
# augmentation


def sample_transform(spec: AugmentSpec, rng: np.random.Generator, pivot) -> RigidTransform:
    """Yaw about the vertical axis through ``pivot`` followed by a translation."""
    yaw = np.radians(rng.uniform(-spec.max_yaw_deg, spec.max_yaw_deg))
    shift = rng.uniform(-1.0, 1.0, 3) * np.asarray(spec.max_translation)
    rot = rotation_z(yaw)
    pivot = np.asarray(pivot, dtype=np.float64)
    return RigidTransform(rot, pivot - rot @ pivot + shift)


def augment(cloud: ColoredPointCloud, action: KeyframeAction, spec: AugmentSpec, seed: int,
            ws: Workspace) -> tuple[ColoredPointCloud, KeyframeAction, RigidTransform]:
    """Apply one random rigid transform jointly to the cloud and the action.

    Transforms that would move the action out of ``ws`` are resampled; after
    ``spec.resample_limit`` failures the input pair is returned unchanged.
    """
    if not ws.contains(action.position):
        raise ConfigurationError("action must lie inside the workspace before augmentation")
    rng = np.random.default_rng(seed)
    for _ in range(spec.resample_limit):
        t = sample_transform(spec, rng, ws.center)
        pos, quat = apply_transform_pose(action.position, action.orientation, t)
        if ws.contains(pos):
            return (apply_transform(cloud, t),
                    KeyframeAction(pos, quat, action.gripper, action.collision), t)
    logger.info("augmentation resample limit (%d) exhausted; using the original sample", spec.resample_limit)
    return cloud, action, RigidTransform.identity()


# --------------------------------------------------------------------------
# grounding


def record_size(rec: GroundingRecord, root: Path | str | None = None) -> tuple[int, int]:
    if rec.size is not None:
        return rec.size
    img = read_ppm(Path(root or ".") / rec.image)
    return img.shape[1], img.shape[0]


def grounding_target(rec: GroundingRecord, resolution: int, spec: HeatmapSpec = HeatmapSpec(),
                     size: tuple[int, int] | None = None) -> np.ndarray:
    """Normalized map with one bump per box center, rescaled to ``resolution``."""
    w, h = size or rec.size or (resolution, resolution)
    sx, sy = resolution / w, resolution / h
    maps = [single_object_map((0.5 * (x0 + x1) * sx, 0.5 * (y0 + y1) * sy), spec, resolution)
            for x0, y0, x1, y1 in rec.boxes]
    return fuse_and_normalize(maps)


def write_grounding_split(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            row = {"image": r.image, "phrase": r.phrase, "boxes": [list(b) for b in r.boxes]}
            if r.size is not None:
                row["size"] = list(r.size)
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_grounding_split(path) -> list[GroundingRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append(GroundingRecord(row["image"], row["phrase"], tuple(map(tuple, row["boxes"])),
                                           tuple(row["size"]) if "size" in row else None))
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise ConfigurationError(f"{path}:{n}: malformed grounding record ({e})") from e
    return out


GROUNDING_COLORS = {
    "red": (0.85, 0.1, 0.1), "green": (0.1, 0.7, 0.2), "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.85, 0.1), "orange": (1.0, 0.5, 0.0), "purple": (0.55, 0.2, 0.7),
}
_GROUNDING_NOUNS = ("block", "cube", "box")


def synthesize_grounding(out_dir, n: int, seed: int, resolution: int = 224, split: str = "train",
                         max_objects: int = 4) -> list[GroundingRecord]:
    """Write ``n`` images of colored rectangles on a table-colored background plus a split file.

    Each record names one color; its boxes are every rectangle of that color.
    """
    if n < 1:
        raise ConfigurationError("need at least one grounding record")
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = list(GROUNDING_COLORS)
    records = []
    for i in range(n):
        img = np.empty((resolution, resolution, 3), dtype=np.float32)
        img[:] = np.array([0.78, 0.72, 0.6]) * rng.uniform(0.9, 1.05)
        k = int(rng.integers(1, max_objects + 1))
        placed: list[tuple[int, int, int, int]] = []
        colors = []
        for _ in range(50 * k):
            if len(placed) == k:
                break
            w, h = (int(x) for x in rng.integers(resolution // 28, resolution // 6, 2))
            x0 = int(rng.integers(0, resolution - w))
            y0 = int(rng.integers(0, resolution - h))
            box = (x0, y0, x0 + w, y0 + h)
            if any(box[0] < b[2] + 2 and b[0] < box[2] + 2 and box[1] < b[3] + 2 and b[1] < box[3] + 2
                   for b in placed):
                continue
            placed.append(box)
            colors.append(names[int(rng.integers(len(names)))])
        for (x0, y0, x1, y1), c in zip(placed, colors):
            img[y0:y1, x0:x1] = GROUNDING_COLORS[c]
        target = colors[int(rng.integers(len(colors)))]
        boxes = tuple(b for b, c in zip(placed, colors) if c == target)
        ref = f"img/{split}_{i:05d}.ppm"
        write_ppm(out / ref, img, flip=False)
        noun = _GROUNDING_NOUNS[int(rng.integers(len(_GROUNDING_NOUNS)))]
        records.append(GroundingRecord(ref, f"the {target} {noun}", boxes, (resolution, resolution)))
    write_grounding_split(out / f"{split}.jsonl", records)
    return records


# --------------------------------------------------------------------------
# demo shards

_STEP_MAGIC = b"BVST"
_SHARD_VERSION = 1


def store_observation(demo_dir, cloud: ColoredPointCloud) -> str:
    """Write ``cloud`` under its content hash; returns the path relative to ``demo_dir``."""
    buf = cloud_bytes(cloud)
    ref = f"obs/{hashlib.sha1(buf).hexdigest()}.bvpc"
    path = Path(demo_dir) / ref
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(buf)
        os.replace(tmp, path)
    return ref


def load_observation(demo_dir, ref: str) -> ColoredPointCloud:
    return load_cloud(Path(demo_dir) / ref)


def _pack_step(step: TrajectoryStep, disc: DiscretizedAction) -> bytes:
    """magic, u32 version, 7 f32 pose (xyz + xyzw), u8 gripper, u8 collision, u8 final,
    u16 joint count + f32 velocities, u16 path length + utf-8 path, discretized action."""
    ref = step.obs_ref.encode("utf-8")
    jv = np.ascontiguousarray(step.joint_velocities, dtype="<f4")
    return b"".join([
        _STEP_MAGIC, struct.pack("<I", _SHARD_VERSION),
        np.concatenate([step.position, step.orientation]).astype("<f4").tobytes(),
        struct.pack("<BBB", step.gripper, step.collision, int(step.is_final)),
        struct.pack("<H", jv.size), jv.tobytes(),
        struct.pack("<H", len(ref)), ref,
        disc.pack(),
    ])


def _unpack_step(buf: bytes) -> tuple[TrajectoryStep, DiscretizedAction]:
    if buf[:4] != _STEP_MAGIC:
        raise ConfigurationError("not a step record")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _SHARD_VERSION:
        raise ConfigurationError(f"unsupported step record version {version}")
    pose = np.frombuffer(buf, "<f4", 7, 8).astype(np.float64)
    gripper, collision, final = struct.unpack_from("<BBB", buf, 36)
    (nj,) = struct.unpack_from("<H", buf, 39)
    jv = np.frombuffer(buf, "<f4", nj, 41).astype(np.float64)
    pos = 41 + 4 * nj
    (nr,) = struct.unpack_from("<H", buf, pos)
    ref = buf[pos + 2:pos + 2 + nr].decode("utf-8")
    disc = DiscretizedAction.unpack(buf[pos + 2 + nr:pos + 2 + nr + DISCRETIZED_SIZE])
    q = pose[3:] / np.linalg.norm(pose[3:])
    return TrajectoryStep(ref, pose[:3], q, gripper, jv, bool(final), collision), disc


def write_demo(root, demo_id: int, traj: Trajectory, ws: Workspace, dims) -> Path:
    d = Path(root) / f"demo_{demo_id:04d}"
    d.mkdir(parents=True, exist_ok=True)
    meta = (f"format = BVDM {_SHARD_VERSION}\ninstruction = {traj.instruction}\n"
            f"steps = {len(traj.steps)}\ngrid = {' '.join(str(int(x)) for x in dims)}\n")
    (d / "meta.txt").write_text(meta, encoding="utf-8")
    for k, s in enumerate(traj.steps):
        disc = discretize_action(s.action(), ws, dims)
        (d / f"step_{k:04d}.rec").write_bytes(_pack_step(s, disc))
    return d


def read_demo(demo_dir) -> Trajectory:
    d = Path(demo_dir)
    kv = parse_keyvalue((d / "meta.txt").read_text(encoding="utf-8"))
    if kv.get("format", "").split()[:1] != ["BVDM"]:
        raise ConfigurationError(f"{d}: not a demo directory")
    n = int(kv["steps"])
    steps = [_unpack_step((d / f"step_{k:04d}.rec").read_bytes())[0] for k in range(n)]
    return Trajectory(kv["instruction"], tuple(steps))


def list_demos(root) -> list[Path]:
    return sorted(p for p in Path(root).glob("demo_*") if (p / "meta.txt").exists())


def quantize_step(step: TrajectoryStep) -> TrajectoryStep:
    """The step as it reads back from a shard (float32 pose and velocities)."""
    pose = np.concatenate([step.position, step.orientation]).astype(np.float32).astype(np.float64)
    q = pose[3:] / np.linalg.norm(pose[3:])
    return TrajectoryStep(step.obs_ref, pose[:3], q, step.gripper,
                          step.joint_velocities.astype(np.float32).astype(np.float64),
                          step.is_final, step.collision)


@dataclass
class DemoSet:
    """Keyframe demos loaded from shard directories together with their observations."""

    demos: list[KeyframeDemo] = field(default_factory=list)
    dirs: list[Path] = field(default_factory=list)

    @classmethod
    def load(cls, roots, v_thresh: float = 0.1) -> "DemoSet":
        if isinstance(roots, (str, Path)):
            roots = [roots]
        out = cls()
        for root in roots:
            for d in list_demos(root):
                out.demos.append(extract_keyframes(read_demo(d), v_thresh))
                out.dirs.append(d)
        return out

    def pairs(self) -> list[tuple[Path, str, str, KeyframeAction]]:
        """Flattened (demo dir, instruction, observation ref, action) in a stable order."""
        return [(d, demo.instruction, ref, a) for d, demo in zip(self.dirs, self.demos) for ref, a in demo.pairs]
