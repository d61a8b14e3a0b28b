"""Mini-batch training for heatmap pre-training on grounding records and keyframe fine-tuning.

Every keyframe pair contributes two samples per visit: the augmented scene
rendered over the whole workspace, and a zoomed crop around the (jittered)
target, so one set of weights serves both prediction passes.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .actionspace import KeyframeAction, discretize_rotation
from .data import AugmentSpec, DemoSet, GroundingRecord, augment, grounding_target, load_observation, record_size
from .errors import ConfigurationError, DegenerateTargetError
from .geometry import ColoredPointCloud, Workspace, crop_to_workspace
from .heatmap import HeatmapSpec, action_target_map
from .model import (AdamState, ModelConfig, Targets, adam_step, backward, forward, init_params, loss, sgd_step,
                    tokenize)
from .projection import read_ppm, render_views
from .scene import DEFAULT_WORKSPACE

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch: int = 4  # pairs or grounding records per step
    lr: float = 3e-3
    lr_floor: float = 0.1  # cosine decay to this fraction of lr over the run
    clip: float = 1.0
    optimizer: str = "adam"  # "adam" or "sgd"
    weight_decay: float = 0.0
    crop_fraction: float = 0.2
    fine_jitter: float = 0.03  # m, uniform per axis around the target for the zoomed sample
    fine_samples: bool = True
    grounding_replay: int = 0  # grounding records mixed into each fine-tuning batch
    augment: AugmentSpec = AugmentSpec(max_yaw_deg=0.0)
    heatmap: HeatmapSpec = HeatmapSpec()
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ConfigurationError("steps must be >= 0 and batch >= 1")
        if self.lr < 0 or (self.clip is not None and self.clip <= 0):
            raise ConfigurationError("lr must be >= 0 and clip > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.lr_floor <= 1:
            raise ConfigurationError("lr_floor must be in [0, 1]")
        if not 0 < self.crop_fraction <= 1:
            raise ConfigurationError("crop fraction must be in (0, 1]")
        if self.fine_jitter < 0 or self.grounding_replay < 0:
            raise ConfigurationError("fine_jitter and grounding_replay must be non-negative")


@dataclass
class Batch:
    views: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    heatmaps: list = field(default_factory=list)
    rot: list = field(default_factory=list)
    gripper: list = field(default_factory=list)
    collision: list = field(default_factory=list)
    mask: list = field(default_factory=list)

    def add(self, views, tokens, heatmaps, rot=(0, 0, 0), gripper=0, collision=0, mask=0.0):
        self.views.append(views)
        self.tokens.append(tokens)
        self.heatmaps.append(heatmaps)
        self.rot.append(rot)
        self.gripper.append(gripper)
        self.collision.append(collision)
        self.mask.append(mask)

    def __len__(self):
        return len(self.views)

    def arrays(self, cfg: ModelConfig):
        dt = cfg.dtype
        x = np.stack(self.views).astype(dt)
        tok = np.stack(self.tokens)
        tgt = Targets(np.stack(self.heatmaps).astype(dt), np.array(self.rot, dtype=np.int64),
                      np.array(self.gripper, dtype=dt), np.array(self.collision, dtype=dt),
                      np.array(self.mask, dtype=dt))
        return x, tok, tgt


def peak_cells(heatmaps: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(N, 3, R, R) -> (N, 3) token index of each map's argmax."""
    n = heatmaps.shape[0]
    flat = heatmaps.reshape(n, 3, -1).argmax(axis=2)
    v, u = np.divmod(flat, cfg.resolution)
    return (v // cfg.patch) * cfg.grid + u // cfg.patch


# --------------------------------------------------------------------------
# sample construction


def view_sample(cloud: ColoredPointCloud, cuboid: Workspace, target, cfg: ModelConfig, hspec: HeatmapSpec):
    views = render_views(crop_to_workspace(cloud, cuboid), cuboid, cfg.resolution)
    colors = np.stack([v.color for v in views])
    maps = np.stack([action_target_map(target, v.spec, hspec) for v in views])
    return colors, maps


def add_action_samples(batch: Batch, cloud: ColoredPointCloud, instruction: str, action: KeyframeAction,
                       ws: Workspace, cfg: ModelConfig, tcfg: TrainConfig, rng: np.random.Generator) -> None:
    cloud, action, _ = augment(cloud, action, tcfg.augment, int(rng.integers(2 ** 63)), ws)
    tokens = tokenize(instruction, cfg.max_tokens, cfg.vocab)
    bins = discretize_rotation(action.orientation)
    labels = dict(rot=bins, gripper=action.gripper, collision=action.collision, mask=1.0)
    colors, maps = view_sample(cloud, ws, action.position, cfg, tcfg.heatmap)
    batch.add(colors, tokens, maps, **labels)
    if tcfg.fine_samples:
        center = action.position + rng.uniform(-tcfg.fine_jitter, tcfg.fine_jitter, 3)
        crop = ws.sub_cuboid(ws.clamp(center), tcfg.crop_fraction)
        target = np.clip(action.position, crop.min_corner, crop.max_corner)
        colors, maps = view_sample(cloud, crop, target, cfg, tcfg.heatmap)
        batch.add(colors, tokens, maps, **labels)


class GroundingSource:
    """Grounding records with their images resized (nearest) to the model resolution."""

    def __init__(self, records, root, cfg: ModelConfig, hspec: HeatmapSpec):
        self.items = []
        skipped = 0
        for rec in records:
            img = read_ppm(Path(root) / rec.image)
            size = record_size(rec, root) if rec.size is None else rec.size
            try:
                target = grounding_target(rec, cfg.resolution, hspec, size)
            except DegenerateTargetError:
                skipped += 1
                continue
            self.items.append((_resize_nearest(img, cfg.resolution), tokenize(rec.phrase, cfg.max_tokens, cfg.vocab),
                               target))
        if skipped:
            logger.warning("skipped %d degenerate grounding records", skipped)
        if not self.items:
            raise ConfigurationError("no usable grounding records")

    def add(self, batch: Batch, i: int) -> None:
        img, tok, target = self.items[i]
        batch.add(np.stack([img] * 3), tok, np.stack([target] * 3))


def _resize_nearest(img: np.ndarray, r: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (r, r):
        return img.astype(np.float32)
    rows = (np.arange(r) * h) // r
    cols = (np.arange(r) * w) // r
    return img[rows][:, cols].astype(np.float32)


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: dict
    curve: list[tuple]  # (step, total, trans, rot, gripper, collision)
    seconds: float

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "total", "trans", "rot", "gripper", "collision"])
        for row in self.curve:
            w.writerow([row[0]] + [f"{x:.6f}" for x in row[1:]])
        return buf.getvalue()


def learning_rate(tcfg: TrainConfig, step: int) -> float:
    frac = step / max(tcfg.steps - 1, 1)
    return tcfg.lr * (tcfg.lr_floor + (1 - tcfg.lr_floor) * 0.5 * (1 + np.cos(np.pi * frac)))


def _epoch_order(n: int, rng: np.random.Generator):
    while True:
        yield from rng.permutation(n)


def train(dataset, cfg: ModelConfig, tcfg: TrainConfig, params: dict | None = None,
          ws: Workspace = DEFAULT_WORKSPACE, grounding: GroundingSource | None = None) -> TrainResult:
    """Shuffled mini-batch descent.

    ``dataset`` is either a :class:`DemoSet` (fine-tuning: all four loss
    terms) or a :class:`GroundingSource` (pre-training: heatmap term only).
    ``grounding`` optionally supplies replay records for fine-tuning.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(tcfg.seed)
    if params is None:
        params = init_params(cfg, int(rng.integers(2 ** 31)))
    fine_tune = isinstance(dataset, DemoSet)
    if fine_tune:
        pairs = dataset.pairs()
        if not pairs:
            raise ConfigurationError("demo dataset is empty")
        for _, _, _, a in pairs:
            if not ws.contains(a.position):
                raise ConfigurationError(f"keyframe {a.position} lies outside the workspace")
        clouds: dict = {}
        n_items = len(pairs)
    elif isinstance(dataset, GroundingSource):
        n_items = len(dataset.items)
    else:
        raise ConfigurationError("dataset must be a DemoSet or a GroundingSource")
    order = _epoch_order(n_items, rng)
    replay_order = _epoch_order(len(grounding.items), rng) if grounding is not None else None
    state = AdamState()
    curve = []
    for step in range(tcfg.steps):
        batch = Batch()
        for _ in range(tcfg.batch):
            i = int(next(order))
            if fine_tune:
                d, instr, ref, action = pairs[i]
                key = (d, ref)
                if key not in clouds:
                    clouds[key] = crop_to_workspace(load_observation(d, ref), ws)
                add_action_samples(batch, clouds[key], instr, action, ws, cfg, tcfg, rng)
            else:
                dataset.add(batch, i)
        if fine_tune and replay_order is not None:
            for _ in range(tcfg.grounding_replay):
                grounding.add(batch, int(next(replay_order)))
        x, tok, tgt = batch.arrays(cfg)
        out = forward(params, x, tok, cfg, peak_cells=peak_cells(tgt.heatmaps, cfg))
        parts = loss(out, tgt)
        grads = backward(params, out, tgt, cfg)
        lr = learning_rate(tcfg, step)
        if tcfg.optimizer == "adam":
            params = adam_step(params, grads, state, lr, tcfg.clip, weight_decay=tcfg.weight_decay)
        else:
            params = sgd_step(params, grads, lr, tcfg.clip)
        curve.append((step, parts.total, parts.trans, parts.rot, parts.gripper, parts.collision))
        if step % 25 == 0 or step == tcfg.steps - 1:
            logger.info("step %d loss %.4f (trans %.4f rot %.4f grip %.4f coll %.4f)", step, parts.total,
                        parts.trans, parts.rot, parts.gripper, parts.collision)
    return TrainResult(params, curve, time.perf_counter() - t0)
