import numpy as np
import pytest

from orthoheat import cli
from orthoheat.cli import describe, main, sample_path
from orthoheat.config import RunConfig, dump_config, load_config, read_config
from orthoheat.data import GroundingRecord, write_grounding_split
from orthoheat.errors import ConfigurationError
from orthoheat.heatmap import load_heatmap
from orthoheat.projection import GridScores, save_grid_scores, write_ppm


def run(*argv) -> int:
    return main([str(a) for a in argv])


def test_shipped_samples_exist_and_parse():
    assert sample_path("sample_cloud.bvpc").is_file()
    cfg = read_config(sample_path("sample.cfg"))
    assert dump_config(cfg) == dump_config(RunConfig())


def test_config_round_trip_and_overrides():
    cfg = load_config("seed = 5\n[train]\nsteps = 7\n[model]\ndim = 16\n", ["eval.tasks=reach-block"])
    assert cfg.seed == 5 and cfg.train.steps == 7 and cfg.model.dim == 16 and cfg.eval.tasks == ("reach-block",)
    assert dump_config(load_config(dump_config(cfg))) == dump_config(cfg)
    assert cfg.train_config().crop_fraction == cfg.refine.crop_fraction
    assert cfg.component_seed("train") != cfg.component_seed("eval")


@pytest.mark.parametrize("text,field", [
    ("[train]\nstepz = 3\n", "train.stepz"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[heatmap]\nsigma = -1\n", "sigma"),
    ("[train]\nlr = fast\n", "train.lr"),
    ("[views]\nresolution = 100\n", "divisible"),
    ("[eval]\ntasks = reach-block fly\n", "fly"),
    ("[model]\nresolution = 64\n", "model.resolution"),
    ("colour = red\n", "colour"),
])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigurationError, match=field):
        load_config(text)


def test_render_is_byte_identical_across_runs(tmp_path, capsys):
    assert run("render", "--out", tmp_path / "a") == 0
    assert run("render", "--out", tmp_path / "b") == 0
    for axis in ("top", "front", "right"):
        a = (tmp_path / "a" / f"{axis}.ppm").read_bytes()
        assert a == (tmp_path / "b" / f"{axis}.ppm").read_bytes()
        assert a.startswith(b"P6\n224 224\n255\n")
        assert "224x224" in describe(tmp_path / "a" / f"{axis}.ppm")


def test_gt_heatmap_on_one_box_record_sums_to_one(tmp_path, capsys):
    write_ppm(tmp_path / "img.ppm", np.full((224, 224, 3), 0.5), flip=False)
    write_grounding_split(tmp_path / "split.jsonl",
                          [GroundingRecord("img.ppm", "the red block", ((40, 60, 80, 90),), (224, 224))])
    assert run("gt-heatmap", "--grounding", tmp_path / "split.jsonl", "--out", tmp_path / "out") == 0
    capsys.readouterr()
    assert run("inspect", tmp_path / "out" / "grounding.bvhm") == 0
    text = capsys.readouterr().out
    total = float(text.split("sum = ")[1].split()[0])
    assert abs(total - 1.0) < 1e-6
    assert (tmp_path / "out" / "grounding_overlay.ppm").is_file()


def test_validation_errors_exit_one(tmp_path, capsys):
    assert run("render", "--out", tmp_path, "--bogus") == 1
    assert run("render", "--cloud", tmp_path / "missing.bvpc", "--out", tmp_path) == 1
    assert "--cloud" in capsys.readouterr().err
    assert run("render", "--out", tmp_path, "--set", "train.stepz=1") == 1
    assert "train.stepz" in capsys.readouterr().err
    assert run("collect", "--task", "fly", "--out", tmp_path) == 1
    assert run("eval", "--tasks", "reach-block") == 1  # no checkpoint and no --oracle
    assert run("frobnicate") == 1
    (tmp_path / "junk.bin").write_bytes(b"\xff\xfe\x00junk")
    assert run("inspect", tmp_path / "junk.bin") == 1


def test_runtime_failure_exits_two(tmp_path, monkeypatch, capsys):
    def boom(cfg, args):
        raise RuntimeError("disk on fire")
    monkeypatch.setitem(cli.COMMANDS, "render", boom)
    assert run("render", "--out", tmp_path) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_oracle_rollout_and_eval(tmp_path, capsys):
    assert run("rollout", "--oracle", "--task", "reach-block", "--seed", "3", "--out", tmp_path / "r") == 0
    assert "success = 1" in (tmp_path / "r" / "summary.txt").read_text()
    assert run("eval", "--oracle", "--tasks", "reach-block", "--set", "eval.trials=2",
               "--out", tmp_path / "report.csv") == 0
    assert (tmp_path / "report.csv").read_text() == \
        "task,trials,successes,rate\nreach-block,2,2,1.0000\nmean,2,2,1.0000\n"


def test_pipeline_is_reproducible_and_every_artifact_inspects(tmp_path, capsys):
    """collect -> gt-heatmap -> pretrain -> train -> eval twice from one root seed."""
    reports = []
    for run_id in ("a", "b"):
        d = tmp_path / run_id
        common = ["--set", "seed=11", "--set", "train.steps=2", "--set", "pretrain.steps=2",
                  "--set", "grounding.train=4", "--set", "grounding.holdout=2", "--set", "eval.trials=2",
                  "--set", "eval.h_max=1"]
        assert run("collect", "--task", "reach-block", "--n", 1, "--out", d / "demos", *common) == 0
        assert run("gt-heatmap", "--demo", d / "demos" / "demo_0000", "--keyframe", 0, "--out", d / "gt",
                   *common) == 0
        assert run("pretrain", "--data", d / "ground", "--synthesize", "--out", d / "pre", *common) == 0
        assert run("train", "--data", d / "demos", "--init", d / "pre" / "model.bvck",
                   "--grounding", d / "ground" / "holdout.jsonl", "--set", "train.grounding_replay=1",
                   "--out", d / "ft", *common) == 0
        assert run("eval", "--checkpoint", d / "ft" / "model.bvck", "--tasks", "reach-block",
                   "--out", d / "report.csv", "--logs", d / "logs", *common) == 0
        reports.append((d / "report.csv").read_bytes())
    assert reports[0] == reports[1]
    for rel in ("ft/model.bvck", "ft/curve.csv", "pre/model.bvck", "demos/demo_0000/step_0000.rec"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    a = tmp_path / "a"
    save_grid_scores(a / "scores.bvgs", GridScores((2, 2, 2), np.full(3, 0.1), np.zeros(3), np.arange(8.0)))
    trial = a / "logs" / "reach-block" / "trial_000"
    files = [a / "demos" / "demo_0000" / "step_0000.rec", a / "demos" / "demo_0000" / "meta.txt",
             next((a / "demos" / "demo_0000" / "obs").iterdir()), a / "gt" / "top.bvhm", a / "gt" / "top_overlay.ppm",
             a / "ground" / "train.jsonl", a / "ft" / "model.bvck", a / "ft" / "curve.csv", a / "ft" / "config.cfg",
             a / "report.csv", trial / "summary.txt", trial / "step00_coarse_top.bvhm", a / "scores.bvgs"]
    render_dir = a / "render"
    assert run("render", "--out", render_dir) == 0
    files += [render_dir / "top.bvdp"]
    expected = ["trajectory step", "format = BVDM 1", "point cloud", "heatmap", "image", "grounding split",
                "checkpoint", "step,total", "seed = 11", "task,trials", "task = reach-block", "heatmap",
                "grid scores", "depth dump"]
    for f, key in zip(files, expected):
        capsys.readouterr()
        assert run("inspect", f) == 0, f
        assert key in capsys.readouterr().out, f
    h, normalized = load_heatmap(a / "gt" / "top.bvhm")
    assert normalized and abs(h.sum() - 1) < 1e-6
