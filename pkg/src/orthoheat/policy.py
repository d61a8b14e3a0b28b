"""Closed-loop keyframe rollouts, evaluation, and scripted demo collection."""

from __future__ import annotations

import csv
import io
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .actionspace import (BIN_DEG, N_ROT_BINS, KeyframeAction, Prediction, RefineSpec, TwoPassResult,
                          discretize_rotation, two_pass)
from .data import Trajectory, TrajectoryStep, store_observation, write_demo
from .errors import ConfigurationError
from .geometry import Workspace
from .heatmap import save_heatmap
from .model import ModelConfig, forward, tokenize
from .projection import DEFAULT_RESOLUTION, RenderedView, pixel_index, write_ppm
from .scene import DEFAULT_WORKSPACE, SceneState, SyntheticEnv, SyntheticTask

logger = logging.getLogger(__name__)


def derive_seed(root: int, *keys) -> int:
    """Stable 63-bit seed for a named component, e.g. ``derive_seed(7, "eval", "reach-block", 3)``."""
    words = [zlib.crc32(str(k).encode("utf-8")) for k in keys]
    return int(np.random.SeedSequence([int(root), *words]).generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class RolloutConfig:
    h_max: int = 25
    trials: int = 25
    coarse_dims: tuple[int, int, int] = (100, 100, 100)
    refine: RefineSpec | None = RefineSpec()
    resolution: int = DEFAULT_RESOLUTION
    workspace: Workspace = DEFAULT_WORKSPACE

    def __post_init__(self):
        if self.h_max < 1:
            raise ConfigurationError("h_max must be at least 1")
        if self.trials < 1:
            raise ConfigurationError("trials must be at least 1")


# --------------------------------------------------------------------------
# predictors

PredictorFactory = Callable[[SyntheticEnv], Callable[[Sequence[RenderedView]], Prediction]]


def delta_prediction(target, views: Sequence[RenderedView], action: KeyframeAction) -> Prediction:
    """One-hot heatmaps at ``target``'s pixel in each view plus saturated action logits."""
    maps = []
    for v in views:
        p = np.clip(target, v.spec.cuboid.min_corner, v.spec.cuboid.max_corner)
        u, w = pixel_index(p, v.spec)
        h = np.zeros((v.spec.resolution, v.spec.resolution))
        h[w, u] = 1.0
        maps.append(h)
    logits = np.full((3, N_ROT_BINS), -30.0)
    for axis, b in enumerate(discretize_rotation(action.orientation)):
        logits[axis, b] = 30.0
    return Prediction(np.stack(maps), logits, 30.0 if action.gripper else -30.0,
                      30.0 if action.collision else -30.0)


def oracle_factory(env: SyntheticEnv):
    """Predictor that knows the expert's next keyframe for the current scene."""
    action = env.expert_next()
    return lambda views: delta_prediction(action.position, views, action)


class ModelPredictor:
    def __init__(self, params: dict, cfg: ModelConfig, instruction: str):
        self.params = params
        self.cfg = cfg
        self.tokens = tokenize(instruction, cfg.max_tokens, cfg.vocab)[None]

    def __call__(self, views: Sequence[RenderedView]) -> Prediction:
        x = np.stack([v.color for v in views])[None]
        out = forward(self.params, x, self.tokens, self.cfg)
        return Prediction(out.heatmaps[0].astype(np.float64), out.rotation_logits[0].astype(np.float64),
                          float(out.gripper_logit[0]), float(out.collision_logit[0]))


def model_factory(params: dict, cfg: ModelConfig) -> PredictorFactory:
    return lambda env: ModelPredictor(params, cfg, env.task.instruction)


# --------------------------------------------------------------------------
# rollout


@dataclass
class StepLog:
    step: int
    result: TwoPassResult | None
    action: KeyframeAction | None
    done: bool
    success: bool
    error: str | None = None


def rollout(env: SyntheticEnv, make_predictor: PredictorFactory, config: RolloutConfig, seed: int,
            log_dir=None) -> tuple[bool, list[StepLog]]:
    """Observe, predict a keyframe (two passes), execute; until done or ``h_max`` steps."""
    log: list[StepLog] = []
    try:
        obs = env.reset(seed)
    except Exception as e:  # environment fault
        logger.error("reset failed for seed %d: %s", seed, e)
        return False, [StepLog(0, None, None, True, False, f"reset: {e}")]
    success = False
    for k in range(config.h_max):
        try:
            cloud = obs.cloud(config.workspace)
            res = two_pass(cloud, config.workspace, make_predictor(env), config.coarse_dims, config.refine,
                           config.resolution)
            obs, done, success = env.step(res.action)
        except Exception as e:
            logger.error("trial seed %d failed at step %d: %s", seed, k, e)
            log.append(StepLog(k, None, None, True, False, f"{type(e).__name__}: {e}"))
            success = False
            break
        log.append(StepLog(k, res, res.action, done, success))
        if done:
            break
    if log_dir is not None:
        write_rollout_log(log_dir, env.task, seed, success, log)
    return success, log


def _fmt(v) -> str:
    return " ".join(f"{x:.6f}" for x in np.ravel(v))


def write_rollout_log(log_dir, task: SyntheticTask, seed: int, success: bool, log: list[StepLog]) -> None:
    d = Path(log_dir)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"task = {task.task_id}", f"instruction = {task.instruction}", f"seed = {seed}",
             f"success = {int(success)}", f"steps = {len(log)}"]
    for s in log:
        lines.append(f"[step {s.step}]")
        if s.error:
            lines.append(f"error = {s.error}")
            continue
        passes = [("coarse", s.result.first)] + ([("fine", s.result.second)] if s.result.second else [])
        for name, p in passes:
            for v, h in zip(p.views, p.prediction.heatmaps):
                stem = f"step{s.step:02d}_{name}_{v.spec.axis}"
                write_ppm(d / f"{stem}.ppm", v.color)
                save_heatmap(d / f"{stem}.bvhm", h)
            lines.append(f"{name}_cuboid = {_fmt(p.cuboid.min_corner)} {_fmt(p.cuboid.max_corner)}")
            lines.append(f"{name}_grid_index = {p.grid_index}")
            lines.append(f"{name}_position = {_fmt(p.action.position)}")
        lines.append(f"action_position = {_fmt(s.action.position)}")
        lines.append(f"action_orientation = {_fmt(s.action.orientation)}")
        lines.append(f"action_gripper = {s.action.gripper}")
        lines.append(f"action_collision = {s.action.collision}")
        lines.append(f"done = {int(s.done)}")
        for key, val in sorted(s.result.diagnostics.items()):
            lines.append(f"diag_{key} = {val}")
    (d / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    outcomes: dict[str, list[bool]] = field(default_factory=dict)

    @property
    def rates(self) -> dict[str, float]:
        return {t: float(np.mean(o)) for t, o in self.outcomes.items()}

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.rates.values()))) if self.outcomes else 0.0

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "trials", "successes", "rate"])
        for t in sorted(self.outcomes):
            o = self.outcomes[t]
            w.writerow([t, len(o), int(sum(o)), f"{np.mean(o):.4f}"])
        w.writerow(["mean", sum(len(o) for o in self.outcomes.values()),
                    sum(int(sum(o)) for o in self.outcomes.values()), f"{self.mean:.4f}"])
        return buf.getvalue()


def trial_seed(root: int, task_id: str, trial: int) -> int:
    return derive_seed(root, "eval", task_id, trial)


def evaluate(suite: Sequence[SyntheticTask], make_predictor: PredictorFactory, config: RolloutConfig,
             seed: int = 0, log_root=None) -> EvalReport:
    """``config.trials`` seeded rollouts per task; each trial's seed depends only on (seed, task, trial)."""
    if not suite:
        raise ConfigurationError("evaluation suite is empty")
    report = EvalReport()
    for task in suite:
        outcomes = []
        for trial in range(config.trials):
            s = trial_seed(seed, task.task_id, trial)
            log_dir = None if log_root is None else Path(log_root) / task.task_id / f"trial_{trial:03d}"
            ok, _ = rollout(SyntheticEnv(task), make_predictor, config, s, log_dir)
            outcomes.append(ok)
        report.outcomes[task.task_id] = outcomes
        logger.info("%s: %d/%d", task.task_id, sum(outcomes), len(outcomes))
    return report


# --------------------------------------------------------------------------
# demo collection

_MOVE_STEPS = 2
_JOINT_MIX = np.array([[0.9, 0.1, 0.2], [0.3, 0.8, -0.1], [-0.2, 0.4, 0.9], [0.5, -0.5, 0.3],
                       [0.1, 0.6, -0.7], [-0.4, 0.2, 0.5], [0.7, 0.3, 0.1]])


def _joint_velocities(velocity) -> np.ndarray:
    """Pseudo joint velocities (rad/s) for a Cartesian tool velocity (m/s)."""
    return 2.0 * _JOINT_MIX @ np.asarray(velocity, dtype=np.float64)


def _teleport(s: SceneState, position) -> None:
    s.gripper_pos = np.array(position, dtype=np.float64)
    if s.held is not None:
        b = s.boxes[s.held]
        s.boxes[s.held] = b.moved(s.gripper_pos + s.held_offset - b.center)


def expert_trajectory(env: SyntheticEnv, seed: int, demo_dir, ws: Workspace = DEFAULT_WORKSPACE,
                      step_time: float = 0.25) -> tuple[Trajectory, bool]:
    """Scripted expert: straight-line moves between keyframes, pausing at each one.

    Every step's observation is stored under ``demo_dir``; returns the
    trajectory and whether the task succeeded.
    """
    env.reset(seed)
    keys = env.task.expert_keyframes(env.state)
    steps: list[TrajectoryStep] = []
    success = False
    for key in keys:
        start = env.state.gripper_pos.copy()
        vel = (key.position - start) / (step_time * (_MOVE_STEPS + 1))
        for m in range(_MOVE_STEPS + 1):
            _teleport(env.state, start + (key.position - start) * m / (_MOVE_STEPS + 1))
            ref = store_observation(demo_dir, env.observe().cloud(ws))
            steps.append(TrajectoryStep(ref, env.state.gripper_pos, env.state.gripper_quat,
                                        env.state.gripper_open, _joint_velocities(vel)))
        obs, done, success = env.step(key)
        ref = store_observation(demo_dir, obs.cloud(ws))
        steps.append(TrajectoryStep(ref, key.position, key.orientation, key.gripper, np.zeros(7),
                                    is_final=(key is keys[-1]), collision=key.collision))
    return Trajectory(env.task.instruction, tuple(steps)), success


def collect_demos(task: SyntheticTask, n: int, seed: int, out_dir, ws: Workspace = DEFAULT_WORKSPACE,
                  dims=(100, 100, 100), max_resample: int = 20) -> list[Path]:
    """Record ``n`` successful expert demos for ``task`` as shards under ``out_dir``."""
    if n < 1:
        raise ConfigurationError("need at least one demo")
    out = []
    env = SyntheticEnv(task)
    attempt = 0
    for i in range(n):
        for _ in range(max_resample):
            scene_seed = derive_seed(seed, "collect", task.task_id, attempt)
            attempt += 1
            demo_dir = Path(out_dir) / f"demo_{i:04d}"
            traj, ok = expert_trajectory(env, scene_seed, demo_dir, ws)
            if ok:
                break
            logger.warning("expert failed on %s scene %d; resampling", task.task_id, scene_seed)
        else:
            raise ConfigurationError(f"expert failed {max_resample} times on {task.task_id}")
        out.append(write_demo(out_dir, i, traj, ws, dims))
    return out
