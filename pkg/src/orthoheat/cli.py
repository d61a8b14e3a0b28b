"""Command-line entry point: ``orthoheat <command> [--config FILE] [--set section.key=value ...]``.

Exit codes: 0 success, 1 validation error (bad flag, path, config value or
input file), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, read_config
from .data import (DemoSet, _unpack_step, extract_keyframes, grounding_target, load_observation,
                   read_demo, read_grounding_split, synthesize_grounding)
from .errors import ConfigurationError, DegenerateTargetError, OutOfRangeError
from .geometry import crop_to_workspace, load_cloud, parse_cloud
from .heatmap import action_target_map, load_heatmap, overlay, save_heatmap
from .model import load_checkpoint, save_checkpoint
from .policy import collect_demos, evaluate, model_factory, oracle_factory, rollout
from .projection import load_depth, load_grid_scores, read_ppm, render_views, save_depth, write_ppm
from .scene import SyntheticEnv, get_task
from .training import GroundingSource, train

logger = logging.getLogger("orthoheat")

VALIDATION_ERRORS = (ConfigurationError, OutOfRangeError, DegenerateTargetError, FileNotFoundError)


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def sample_path(name: str) -> Path:
    """Path of a file shipped in the package's ``samples`` directory."""
    return Path(str(resources.files("orthoheat") / "samples" / name))


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"{what}: file not found: {p}")
    return p


def _need_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigurationError(f"{what}: directory not found: {p}")
    return p


# --------------------------------------------------------------------------
# commands


def cmd_render(cfg: RunConfig, args) -> None:
    cloud = load_cloud(_need_file(args.cloud, "--cloud"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in render_views(crop_to_workspace(cloud, cfg.workspace), cfg.workspace, cfg.resolution):
        write_ppm(out / f"{v.spec.axis}.ppm", v.color)
        save_depth(out / f"{v.spec.axis}.bvdp", v)
    print(f"wrote 3 views to {out}")


def cmd_gt_heatmap(cfg: RunConfig, args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.grounding:
        split = _need_file(args.grounding, "--grounding")
        records = read_grounding_split(split)
        if not 0 <= args.index < len(records):
            raise ConfigurationError(f"--index {args.index} outside 0..{len(records) - 1}")
        rec = records[args.index]
        h = grounding_target(rec, cfg.resolution, cfg.heatmap, rec.size)
        save_heatmap(out / "grounding.bvhm", h)
        img = read_ppm(_need_file(split.parent / rec.image, "grounding image"))
        if img.shape[:2] == h.shape:
            write_ppm(out / "grounding_overlay.ppm", overlay(img, h), flip=False)
        print(f"{rec.phrase}: peak mass {h.max():.6f}, sum {h.sum():.9f}")
        return
    if not args.demo:
        raise ConfigurationError("gt-heatmap needs --grounding SPLIT or --demo DIR")
    demo = extract_keyframes(read_demo(_need_dir(args.demo, "--demo")), cfg.collect.v_thresh)
    if not 0 <= args.keyframe < len(demo.pairs):
        raise ConfigurationError(f"--keyframe {args.keyframe} outside 0..{len(demo.pairs) - 1}")
    ref, action = demo.pairs[args.keyframe]
    cloud = crop_to_workspace(load_observation(args.demo, ref), cfg.workspace)
    for v in render_views(cloud, cfg.workspace, cfg.resolution):
        h = action_target_map(action.position, v.spec, cfg.heatmap)
        save_heatmap(out / f"{v.spec.axis}.bvhm", h)
        write_ppm(out / f"{v.spec.axis}_overlay.ppm", overlay(v.color, h))
    print(f"keyframe {args.keyframe}: target {np.round(action.position, 4).tolist()}")


def _write_training_outputs(out: Path, result, cfg: RunConfig, stage: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.bvck", result.params, cfg.model, f"stage={stage} seed={cfg.seed}")
    (out / "curve.csv").write_text(result.curve_csv(), encoding="utf-8")
    (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
    last = result.curve[-1] if result.curve else None
    print(f"{stage}: {len(result.curve)} steps in {result.seconds:.1f} s"
          + (f", final loss {last[1]:.4f}" if last else "") + f"; wrote {out / 'model.bvck'}")


def _initial_params(cfg: RunConfig, args):
    if not getattr(args, "init", None):
        return None
    params, mcfg, _ = load_checkpoint(_need_file(args.init, "--init"))
    if mcfg != cfg.model:
        raise ConfigurationError(f"--init checkpoint model config {mcfg.echo()} differs from {cfg.model.echo()}")
    return params


def cmd_pretrain(cfg: RunConfig, args) -> None:
    data = Path(args.data)
    if args.synthesize:
        g = cfg.grounding
        synthesize_grounding(data, g.train, cfg.component_seed("grounding", "train"), cfg.resolution, "train",
                             g.max_objects)
        if g.holdout:
            synthesize_grounding(data, g.holdout, cfg.component_seed("grounding", "holdout"), cfg.resolution,
                                 "holdout", g.max_objects)
    split = _need_file(data / "train.jsonl", "--data")
    source = GroundingSource(read_grounding_split(split), data, cfg.model, cfg.heatmap)
    result = train(source, cfg.model, cfg.train_config("pretrain"), _initial_params(cfg, args), cfg.workspace)
    _write_training_outputs(Path(args.out), result, cfg, "pretrain")


def cmd_collect(cfg: RunConfig, args) -> None:
    task = get_task(args.task)
    n = args.n if args.n is not None else cfg.collect.demos
    dirs = collect_demos(task, n, cfg.component_seed("collect"), args.out, cfg.workspace, cfg.grid_dims)
    print(f"wrote {len(dirs)} demos for {task.task_id} to {args.out}")


def cmd_train(cfg: RunConfig, args) -> None:
    roots = [_need_dir(d, "--data") for d in args.data]
    dataset = DemoSet.load(roots, cfg.collect.v_thresh)
    grounding = None
    if args.grounding:
        split = _need_file(args.grounding, "--grounding")
        grounding = GroundingSource(read_grounding_split(split), split.parent, cfg.model, cfg.heatmap)
    result = train(dataset, cfg.model, cfg.train_config("train"), _initial_params(cfg, args), cfg.workspace,
                   grounding)
    _write_training_outputs(Path(args.out), result, cfg, "train")


def _factory(cfg: RunConfig, args):
    if args.oracle:
        return oracle_factory
    if not args.checkpoint:
        raise ConfigurationError("--checkpoint is required unless --oracle is given")
    params, mcfg, _ = load_checkpoint(_need_file(args.checkpoint, "--checkpoint"))
    if mcfg.resolution != cfg.resolution:
        raise ConfigurationError(f"checkpoint resolution {mcfg.resolution} differs from views.resolution "
                                 f"{cfg.resolution}")
    return model_factory(params, mcfg)


def cmd_eval(cfg: RunConfig, args) -> None:
    tasks = args.tasks.split(",") if args.tasks else list(cfg.eval.tasks)
    suite = [get_task(t) for t in tasks]
    rc = cfg.rollout_config(False if args.no_refine else None)
    report = evaluate(suite, _factory(cfg, args), rc, cfg.component_seed("eval"), args.logs)
    text = report.csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_rollout(cfg: RunConfig, args) -> None:
    task = get_task(args.task)
    rc = cfg.rollout_config(False if args.no_refine else None)
    ok, log = rollout(SyntheticEnv(task), _factory(cfg, args), rc, args.seed, args.out)
    print(f"{task.task_id} seed {args.seed}: {'success' if ok else 'failure'} after {len(log)} steps; "
          f"log in {args.out}")


def cmd_inspect(cfg: RunConfig, args) -> None:
    print(describe(_need_file(args.path, "path")))


# --------------------------------------------------------------------------
# inspect


def describe(path: Path) -> str:
    """Human-readable summary of any file this package writes."""
    buf = path.read_bytes()
    head = buf[:4]
    if head == b"BVPC":
        c = parse_cloud(buf)
        lo, hi = (c.points.min(axis=0), c.points.max(axis=0)) if len(c) else (np.zeros(3), np.zeros(3))
        return (f"point cloud: {len(c)} points\nmin = {_vec(lo)}\nmax = {_vec(hi)}\n"
                f"mean color = {_vec(c.colors.mean(axis=0) if len(c) else np.zeros(3))}")
    if head == b"BVHM":
        h, normalized = load_heatmap(path)
        v, u = np.unravel_index(int(np.argmax(h)), h.shape)
        return (f"heatmap: {h.shape[0]}x{h.shape[1]}, normalized = {int(normalized)}\n"
                f"sum = {h.sum(dtype=np.float64):.9f}\nmax = {h.max():.6g} at (u={u}, v={v})\n"
                f"nonzero = {int(np.count_nonzero(h))}")
    if head == b"BVDP":
        axis, d = load_depth(path)
        occ = np.isfinite(d)
        return (f"depth dump: view {axis}, {d.shape[0]}x{d.shape[1]}, occupied = {int(occ.sum())}\n"
                f"depth range = {d[occ].min() if occ.any() else 0:.6f} .. {d[occ].max() if occ.any() else 0:.6f}")
    if head == b"BVGS":
        gs = load_grid_scores(path)
        best = int(np.argmax(gs.scores))
        return (f"grid scores: dims {gs.dims}, origin {_vec(gs.origin)}, spacing {_vec(gs.spacing)}\n"
                f"max = {gs.scores[best]:.6g} at flat index {best}")
    if head == b"BVCK":
        params, mcfg, extra = load_checkpoint(path)
        lines = [f"checkpoint: {mcfg.echo()}", f"extra = {extra}",
                 f"parameters = {sum(p.size for p in params.values())} in {len(params)} blocks"]
        lines += [f"  {k}: {tuple(v.shape)} |w| = {np.linalg.norm(v):.6g}" for k, v in params.items()]
        return "\n".join(lines)
    if head == b"BVST":
        step, disc = _unpack_step(buf)
        return (f"trajectory step: position {_vec(step.position)}, orientation {_vec(step.orientation)}\n"
                f"gripper = {step.gripper}, collision = {step.collision}, final = {int(step.is_final)}\n"
                f"joint velocities = {_vec(step.joint_velocities)}\nobservation = {step.obs_ref}\n"
                f"grid index = {disc.grid_index}, rotation bins = {tuple(disc.rotation_bins)}")
    if head[:2] == b"P6":
        img = read_ppm(path)
        return f"image: {img.shape[1]}x{img.shape[0]}, mean color = {_vec(img.reshape(-1, 3).mean(axis=0))}"
    if path.suffix == ".jsonl":
        recs = read_grounding_split(path)
        boxes = sum(len(r.boxes) for r in recs)
        return f"grounding split: {len(recs)} records, {boxes} boxes\nfirst phrase = {recs[0].phrase if recs else ''}"
    try:
        return buf.decode("utf-8").rstrip("\n")
    except UnicodeDecodeError:
        raise ConfigurationError(f"{path}: unrecognized file format") from None


def _vec(v) -> str:
    return "(" + ", ".join(f"{x:.6g}" for x in np.ravel(v)) + ")"


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config file (key = value with [section] headers)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="orthoheat", description="Orthographic multi-view heatmap keyframe policies.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("render", parents=[common], help="render a point cloud into three orthographic views")
    c.add_argument("--cloud", default=str(sample_path("sample_cloud.bvpc")))
    c.add_argument("--out", required=True)

    c = sub.add_parser("gt-heatmap", parents=[common], help="dump ground-truth heatmaps with overlays")
    c.add_argument("--grounding", help="grounding split file (.jsonl)")
    c.add_argument("--index", type=int, default=0)
    c.add_argument("--demo", help="demo directory")
    c.add_argument("--keyframe", type=int, default=0)
    c.add_argument("--out", required=True)

    c = sub.add_parser("pretrain", parents=[common], help="pre-train heatmaps on grounding records")
    c.add_argument("--data", required=True, help="directory holding train.jsonl and its images")
    c.add_argument("--synthesize", action="store_true", help="first write synthetic train/holdout splits there")
    c.add_argument("--init", help="checkpoint to start from")
    c.add_argument("--out", required=True)

    c = sub.add_parser("collect", parents=[common], help="record scripted expert demos")
    c.add_argument("--task", required=True)
    c.add_argument("--n", type=int)
    c.add_argument("--out", required=True)

    c = sub.add_parser("train", parents=[common], help="fine-tune on keyframe demos")
    c.add_argument("--data", required=True, nargs="+", help="demo root directories")
    c.add_argument("--init", help="checkpoint to start from, e.g. a pre-trained one")
    c.add_argument("--grounding", help="grounding split replayed during fine-tuning")
    c.add_argument("--out", required=True)

    for name, helptext in (("eval", "seeded success rates over a task suite"),
                           ("rollout", "one logged closed-loop trial")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("--checkpoint")
        c.add_argument("--oracle", action="store_true", help="use the expert-keyframe predictor")
        c.add_argument("--no-refine", action="store_true", help="execute the first pass only")
        if name == "eval":
            c.add_argument("--tasks", help="comma-separated task ids (default from config)")
            c.add_argument("--logs", help="write per-trial logs under this directory")
            c.add_argument("--out", help="CSV report path")
        else:
            c.add_argument("--task", required=True)
            c.add_argument("--seed", type=int, default=0)
            c.add_argument("--out", required=True)

    c = sub.add_parser("inspect", parents=[common], help="summarize any artifact file")
    c.add_argument("path")
    return p


COMMANDS = {"render": cmd_render, "gt-heatmap": cmd_gt_heatmap, "pretrain": cmd_pretrain, "collect": cmd_collect,
            "train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout, "inspect": cmd_inspect}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = read_config(args.config, args.set)
        COMMANDS[args.command](cfg, args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
