"""Synthetic tabletop world: ray-cast RGB-D of axis-aligned boxes and four scripted tasks.

Motion is kinematic: the gripper teleports to each commanded pose. A held
object moves rigidly with the gripper and is released where it is let go.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .actionspace import KeyframeAction, euler_to_quat
from .errors import ConfigurationError
from .geometry import CameraModel, ColoredPointCloud, Workspace, crop_to_workspace, quat_angle, reconstruct_cloud

logger = logging.getLogger(__name__)

DEFAULT_WORKSPACE = Workspace(np.array([-0.5, -0.5, -0.05]), np.array([0.5, 0.5, 0.95]))
HOME = np.array([0.0, -0.3, 0.55])

COLORS = {
    "red": (0.85, 0.1, 0.1),
    "green": (0.1, 0.7, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.85, 0.1),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.55, 0.2, 0.7),
    "gray": (0.35, 0.35, 0.38),
    "table": (0.78, 0.72, 0.6),
    "gripper_open": (0.0, 0.85, 0.85),
    "gripper_closed": (0.85, 0.0, 0.85),
}
_FACE_SHADE = np.array([0.7, 0.85, 1.0])  # x, y, z facing surfaces


@dataclass(frozen=True)
class Box:
    name: str
    lo: np.ndarray
    hi: np.ndarray
    color: tuple[float, float, float]

    @classmethod
    def centered(cls, name, center, size, color) -> "Box":
        c = np.asarray(center, dtype=np.float64)
        h = 0.5 * np.asarray(size, dtype=np.float64)
        return cls(name, c - h, c + h, tuple(COLORS.get(color, color)))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def moved(self, delta) -> "Box":
        return replace(self, lo=self.lo + delta, hi=self.hi + delta)


def raycast(boxes, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit per ray. Returns (ray parameter, inf on miss; shaded color)."""
    lo = np.stack([b.lo for b in boxes])[None]  # (1, B, 3)
    hi = np.stack([b.hi for b in boxes])[None]
    o = origins[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs[:, None, :]
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t_near = np.minimum(t1, t2)
    t_far = np.maximum(t1, t2)
    t_near = np.where(np.isnan(t_near), -np.inf, t_near)
    t_far = np.where(np.isnan(t_far), np.inf, t_far)
    enter = t_near.max(axis=2)
    leave = t_far.min(axis=2)
    hit = (leave >= enter) & (enter > 1e-9)
    t = np.where(hit, enter, np.inf)
    best = t.argmin(axis=1)
    rows = np.arange(len(origins))
    t_best = t[rows, best]
    face = t_near[rows, best].argmax(axis=1)
    base = np.array([b.color for b in boxes], dtype=np.float32)[best]
    color = base * _FACE_SHADE[face][:, None].astype(np.float32)
    color[~np.isfinite(t_best)] = 0.0
    return t_best, color


def capture(boxes, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """(rgb float32 (H, W, 3), depth float32 (H, W), 0 where nothing is hit)."""
    w, h = cam.resolution
    v, u = np.mgrid[0:h, 0:w]
    k = cam.intrinsics
    y = (v.ravel() - k[1, 2]) / k[1, 1]
    x = (u.ravel() - k[0, 2] - k[0, 1] * y) / k[0, 0]
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)  # unit optical-axis component
    d_world = d_cam @ cam.extrinsics.rotation.T
    origins = np.broadcast_to(cam.extrinsics.translation, d_world.shape)
    t, color = raycast(boxes, origins, d_world)
    depth = np.where(np.isfinite(t), t, 0.0).astype(np.float32)
    return color.reshape(h, w, 3), depth.reshape(h, w)


def default_cameras(overhead: int = 240, side: int = 128) -> tuple[CameraModel, ...]:
    """A narrow overhead camera sampling the table about as densely as the top view, plus three side cameras."""
    cams = [CameraModel.look_at((0.0, -0.05, 1.5), (0.0, 0.0, 0.0), 40.0, overhead, overhead)]
    for eye in [(0.0, -1.1, 0.7), (-1.1, 0.2, 0.7), (1.1, 0.2, 0.7)]:
        cams.append(CameraModel.look_at(eye, (0.0, 0.0, 0.1), 60.0, side, side))
    return tuple(cams)


# --------------------------------------------------------------------------
# observations


@dataclass
class Frame:
    rgb: np.ndarray
    depth: np.ndarray
    camera: CameraModel


@dataclass
class Observation:
    frames: list[Frame]
    instruction: str

    def cloud(self, ws: Workspace | None = None, diagnostics=None) -> ColoredPointCloud:
        c = ColoredPointCloud.concatenate(
            [reconstruct_cloud(f.rgb, f.depth, f.camera, diagnostics) for f in self.frames])
        return crop_to_workspace(c, ws) if ws is not None else c


# --------------------------------------------------------------------------
# tasks


def top_down(yaw_deg: float) -> np.ndarray:
    return euler_to_quat([180.0, 0.0, yaw_deg])


@dataclass
class SceneState:
    boxes: dict[str, Box]
    gripper_pos: np.ndarray
    gripper_quat: np.ndarray
    gripper_open: int = 1
    held: str | None = None
    held_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stage: int = 0
    last_action: KeyframeAction | None = None
    steps: int = 0

    def gripper_box(self) -> Box:
        color = "gripper_open" if self.gripper_open else "gripper_closed"
        return Box.centered("gripper", self.gripper_pos + [0, 0, 0.045], (0.04, 0.04, 0.05), color)

    def all_boxes(self) -> list[Box]:
        return list(self.boxes.values()) + [self.gripper_box()]


def _table() -> Box:
    return Box("table", np.array([-0.7, -0.7, -0.1]), np.array([0.7, 0.7, 0.0]), COLORS["table"])


def _place_footprints(rng, sizes, half_range=0.3, gap=0.03, tries=1000) -> list[np.ndarray]:
    """Random non-overlapping xy centers for footprints of the given (sx, sy) sizes."""
    for _ in range(tries):
        out = []
        ok = True
        for sx, sy in sizes:
            c = rng.uniform(-half_range, half_range, 2)
            for (cx, cy), (px, py) in zip(out, sizes):
                if abs(c[0] - cx) < (sx + px) / 2 + gap and abs(c[1] - cy) < (sy + py) / 2 + gap:
                    ok = False
                    break
            if not ok:
                break
            out.append(c)
        if ok:
            return out
    raise ConfigurationError("could not place scene objects without overlap")


@dataclass(frozen=True)
class SyntheticTask:
    """Task id, instruction, scene generator, scripted expert, and success rule."""

    task_id: str
    instruction: str
    yaw_deg: float
    n_keyframes: int
    tolerance: float = 0.01  # m
    rot_tolerance_deg: float = 10.0

    @property
    def orientation(self) -> np.ndarray:
        return top_down(self.yaw_deg)

    def make_scene(self, rng: np.random.Generator) -> SceneState:
        boxes = {"table": _table()}
        tid = self.task_id
        if tid == "reach-block":
            xy = _place_footprints(rng, [(0.05, 0.05)] * 3)
            for name, c in zip(("red", "green", "blue"), xy):
                boxes[f"{name}_block"] = Box.centered(f"{name}_block", [*c, 0.025], (0.05, 0.05, 0.05), name)
        elif tid == "press-button":
            xy = _place_footprints(rng, [(0.1, 0.1), (0.05, 0.05)])
            boxes["button_base"] = Box.centered("button_base", [*xy[0], 0.01], (0.1, 0.1, 0.02), "gray")
            boxes["button"] = Box.centered("button", [*xy[0], 0.03], (0.05, 0.05, 0.02), "yellow")
            boxes["purple_block"] = Box.centered("purple_block", [*xy[1], 0.025], (0.05, 0.05, 0.05), "purple")
        elif tid == "pick-place-to-plate":
            xy = _place_footprints(rng, [(0.05, 0.05), (0.14, 0.14), (0.05, 0.05)])
            boxes["green_block"] = Box.centered("green_block", [*xy[0], 0.025], (0.05, 0.05, 0.05), "green")
            boxes["plate"] = Box.centered("plate", [*xy[1], 0.005], (0.14, 0.14, 0.01), "blue")
            boxes["red_block"] = Box.centered("red_block", [*xy[2], 0.025], (0.05, 0.05, 0.05), "red")
        elif tid == "precise-insert":
            xy = _place_footprints(rng, [(0.03, 0.03), (0.09, 0.09)])
            boxes["peg"] = Box.centered("peg", [*xy[0], 0.04], (0.02, 0.02, 0.08), "orange")
            sx, sy = xy[1]
            hole, outer, hgt = 0.026, 0.09, 0.03
            wall = (outer - hole) / 2
            off = hole / 2 + wall / 2
            boxes["socket_n"] = Box.centered("socket_n", [sx, sy + off, hgt / 2], (outer, wall, hgt), "gray")
            boxes["socket_s"] = Box.centered("socket_s", [sx, sy - off, hgt / 2], (outer, wall, hgt), "gray")
            boxes["socket_e"] = Box.centered("socket_e", [sx + off, sy, hgt / 2], (wall, hole, hgt), "gray")
            boxes["socket_w"] = Box.centered("socket_w", [sx - off, sy, hgt / 2], (wall, hole, hgt), "gray")
        else:
            raise ConfigurationError(f"unknown task {tid!r}")
        return SceneState(boxes, HOME.copy(), self.orientation, 1)

    # -- expert ----------------------------------------------------------

    def expert_keyframes(self, s: SceneState) -> list[KeyframeAction]:
        q = self.orientation
        tid = self.task_id
        if tid == "reach-block":
            b = s.boxes["red_block"]
            return [KeyframeAction(b.center + [0, 0, 0.025], q, 1, 1)]
        if tid == "press-button":
            top = s.boxes["button"].center + [0, 0, 0.01]
            return [KeyframeAction(top + [0, 0, 0.06], q, 0, 1), KeyframeAction(top, q, 0, 0)]
        if tid == "pick-place-to-plate":
            grasp = s.boxes["green_block"].center
            place = s.boxes["plate"].center + [0, 0, 0.005 + 0.025 + 0.002]
            return [KeyframeAction(grasp + [0, 0, 0.06], q, 1, 1), KeyframeAction(grasp, q, 0, 0),
                    KeyframeAction(place, q, 1, 1)]
        if tid == "precise-insert":
            grasp = s.boxes["peg"].center + [0, 0, 0.02]
            hole = 0.5 * (s.boxes["socket_e"].center + s.boxes["socket_w"].center)
            insert = np.array([hole[0], hole[1], 0.04 + 0.02 + 0.002])
            return [KeyframeAction(grasp + [0, 0, 0.06], q, 1, 1), KeyframeAction(grasp, q, 0, 0),
                    KeyframeAction(insert, q, 1, 0)]
        raise ConfigurationError(f"unknown task {tid!r}")

    # -- dynamics and success -------------------------------------------

    def _close(self, a: KeyframeAction, target, tol=None) -> bool:
        tol = self.tolerance if tol is None else tol
        return (float(np.linalg.norm(a.position - target)) <= tol
                and np.degrees(quat_angle(a.orientation, self.orientation)) <= self.rot_tolerance_deg)

    def _above(self, a: KeyframeAction | None, target) -> bool:
        if a is None:
            return False
        dxy = float(np.linalg.norm(a.position[:2] - target[:2]))
        return dxy <= self.tolerance and a.position[2] >= target[2] + 0.03

    def apply(self, s: SceneState, a: KeyframeAction) -> bool:
        """Advance ``s`` in place by one commanded keyframe; returns task success."""
        prev = s.last_action
        s.steps += 1
        s.gripper_pos = np.array(a.position)
        s.gripper_quat = np.array(a.orientation)
        tid = self.task_id
        success = False
        if tid == "reach-block":
            success = self._close(a, s.boxes["red_block"].center + [0, 0, 0.025])
        elif tid == "press-button":
            top = s.boxes["button"].center + [0, 0, 0.01]
            success = self._close(a, top) and self._above(prev, top)
        else:
            obj = "green_block" if tid == "pick-place-to-plate" else "peg"
            if s.held is None and s.gripper_open and a.gripper == 0:
                grasp = self.expert_keyframes(s)[1].position
                if self._close(a, grasp, 0.01) and self._above(prev, grasp):
                    s.held = obj
                    s.held_offset = s.boxes[obj].center - a.position
            elif s.held is not None and a.gripper == 1:
                target = self._release_target(s)
                center = a.position + s.held_offset
                success = self._close(replace(a, position=center), target)
                b = s.boxes[obj]
                s.boxes[obj] = b.moved(center - b.center)
                s.held = None
            if s.held is not None:
                b = s.boxes[obj]
                s.boxes[obj] = b.moved(a.position + s.held_offset - b.center)
        s.gripper_open = a.gripper
        s.last_action = a
        return success

    def _release_target(self, s: SceneState) -> np.ndarray:
        """Where the held object's center must end up."""
        if self.task_id == "pick-place-to-plate":
            return s.boxes["plate"].center + [0, 0, 0.005 + 0.025 + 0.002]
        hole = 0.5 * (s.boxes["socket_e"].center + s.boxes["socket_w"].center)
        return np.array([hole[0], hole[1], 0.042])


TASKS = {
    "reach-block": SyntheticTask("reach-block", "reach the red block", 0.0, 1),
    "press-button": SyntheticTask("press-button", "press the yellow button", 45.0, 2),
    "pick-place-to-plate": SyntheticTask("pick-place-to-plate", "put the green block on the blue plate", 90.0, 3),
    "precise-insert": SyntheticTask("precise-insert", "insert the orange peg into the gray socket", 135.0, 3,
                                    tolerance=0.005),
}


def get_task(task_id: str) -> SyntheticTask:
    try:
        return TASKS[task_id]
    except KeyError:
        raise ConfigurationError(f"unknown task {task_id!r}; choose from {sorted(TASKS)}") from None


# --------------------------------------------------------------------------
# environment


class SyntheticEnv:
    """reset(seed) -> Observation; step(action) -> (Observation, done, success)."""

    def __init__(self, task: SyntheticTask, cameras=None, max_steps: int | None = None):
        self.task = task
        self.cameras = tuple(cameras) if cameras is not None else default_cameras()
        self.max_steps = max_steps if max_steps is not None else 2 * task.n_keyframes + 2
        self.state: SceneState | None = None
        self.done = False

    def observe(self) -> Observation:
        boxes = self.state.all_boxes()
        frames = [Frame(*capture(boxes, cam), cam) for cam in self.cameras]
        return Observation(frames, self.task.instruction)

    def reset(self, seed: int) -> Observation:
        self.state = self.task.make_scene(np.random.default_rng(seed))
        self.done = False
        return self.observe()

    def step(self, action: KeyframeAction) -> tuple[Observation, bool, bool]:
        if self.state is None or self.done:
            raise ConfigurationError("step() called before reset() or after the episode ended")
        success = self.task.apply(self.state, action)
        self.done = success or self.state.steps >= self.max_steps
        return self.observe(), self.done, success

    def expert_next(self) -> KeyframeAction:
        """The expert's next keyframe given the current task stage (used by oracle predictors)."""
        keys = self.task.expert_keyframes(self.state)
        return keys[min(self._stage(), len(keys) - 1)]

    def _stage(self) -> int:
        s = self.state
        keys = self.task.expert_keyframes(s)
        if s.held is not None:
            return 2
        last = s.last_action
        if last is not None and len(keys) > 1 and self.task._above(last, keys[1].position):
            return 1
        return 0
