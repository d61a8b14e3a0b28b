import numpy as np
import pytest

from orthoheat.actionspace import Prediction, two_pass
from orthoheat.data import DemoSet, extract_keyframes, list_demos, load_observation, read_demo
from orthoheat.errors import ConfigurationError
from orthoheat.geometry import crop_to_workspace
from orthoheat.model import ModelConfig, init_params
from orthoheat.policy import (EvalReport, RolloutConfig, collect_demos, derive_seed, evaluate, model_factory,
                              oracle_factory, rollout, trial_seed)
from orthoheat.scene import DEFAULT_WORKSPACE, TASKS, SyntheticEnv, get_task
from orthoheat.training import Batch, TrainConfig, add_action_samples

WS = DEFAULT_WORKSPACE


def _uniform_factory(env):
    def predict(views):
        r = views[0].spec.resolution
        return Prediction(np.full((3, r, r), 1.0 / r ** 2), np.zeros((3, 72)), 0.0, 0.0)
    return predict


def _raising_factory(env):
    def predict(views):
        raise RuntimeError("simulated fault")
    return predict


def test_scenes_lie_inside_the_workspace():
    for task in TASKS.values():
        for seed in range(5):
            env = SyntheticEnv(task)
            env.reset(seed)
            for b in env.state.boxes.values():
                if b.name != "table":
                    assert WS.contains(b.lo) and WS.contains(b.hi)
            for key in task.expert_keyframes(env.state):
                assert WS.contains(key.position)


def test_environment_is_deterministic():
    task = get_task("pick-place-to-plate")
    runs = []
    for _ in range(2):
        env = SyntheticEnv(task)
        frames = [env.reset(7)]
        for _ in range(3):
            frames.append(env.step(env.expert_next())[0])
        runs.append(b"".join(f.rgb.tobytes() + f.depth.tobytes() for o in frames for f in o.frames))
    assert runs[0] == runs[1]


def test_success_implies_done_and_step_after_done_fails():
    env = SyntheticEnv(get_task("reach-block"))
    env.reset(0)
    _, done, success = env.step(env.expert_next())
    assert success and done
    with pytest.raises(ConfigurationError):
        env.step(env.expert_next())


def test_unknown_task():
    with pytest.raises(ConfigurationError):
        get_task("fly")


def test_oracle_reach_succeeds_in_one_step():
    ok, log = rollout(SyntheticEnv(get_task("reach-block")), oracle_factory, RolloutConfig(), 3)
    assert ok and len(log) == 1


def test_step_budget_of_one_fails_a_two_keyframe_task():
    ok, log = rollout(SyntheticEnv(get_task("press-button")), oracle_factory, RolloutConfig(h_max=1), 3)
    assert not ok and len(log) == 1
    with pytest.raises(ConfigurationError):
        RolloutConfig(h_max=0)


@pytest.mark.parametrize("task_id", sorted(TASKS))
def test_oracle_rollout_is_accurate_and_stays_in_the_workspace(task_id):
    task = get_task(task_id)
    spacing = RolloutConfig().refine.crop_fraction * WS.extent / np.array(RolloutConfig().refine.fine_dims)
    for seed in range(2):
        env = SyntheticEnv(task)
        obs = env.reset(seed)
        done = ok = False
        while not done:
            expert = env.expert_next()
            res = two_pass(obs.cloud(WS), WS, oracle_factory(env), (100, 100, 100), RolloutConfig().refine, 224)
            assert WS.contains(res.action.position)
            assert np.all(np.abs(res.action.position - expert.position) <= spacing + 1e-9)
            obs, done, ok = env.step(res.action)
        assert ok


def test_environment_fault_is_a_logged_failure(tmp_path):
    ok, log = rollout(SyntheticEnv(get_task("reach-block")), _raising_factory, RolloutConfig(), 0, tmp_path / "t")
    assert not ok and "simulated fault" in log[-1].error
    assert "error = RuntimeError: simulated fault" in (tmp_path / "t" / "summary.txt").read_text()


def test_rollout_log_contents(tmp_path):
    ok, log = rollout(SyntheticEnv(get_task("reach-block")), oracle_factory, RolloutConfig(), 0, tmp_path)
    text = (tmp_path / "summary.txt").read_text()
    assert "success = 1" in text and "fine_grid_index" in text
    names = {p.name for p in tmp_path.iterdir()}
    for kind in ("coarse", "fine"):
        for axis in ("top", "front", "right"):
            assert f"step00_{kind}_{axis}.ppm" in names and f"step00_{kind}_{axis}.bvhm" in names


def test_evaluate_oracle_and_failing_predictors():
    cfg = RolloutConfig(trials=3)
    reach = [get_task("reach-block")]
    assert evaluate(reach, oracle_factory, cfg, seed=0).rates == {"reach-block": 1.0}
    bad = evaluate(reach + [get_task("press-button")], _uniform_factory, cfg, seed=0)
    assert bad.rates == {"reach-block": 0.0, "press-button": 0.0} and bad.mean == 0.0
    with pytest.raises(ConfigurationError):
        evaluate([], oracle_factory, cfg)


def test_evaluate_is_deterministic_and_order_invariant():
    cfg = RolloutConfig(trials=2, h_max=2)
    mcfg = ModelConfig()
    factory = model_factory(init_params(mcfg, 5), mcfg)
    suite = [get_task("reach-block"), get_task("press-button")]
    a = evaluate(suite, factory, cfg, seed=4)
    b = evaluate(suite[::-1], factory, cfg, seed=4)
    assert a.outcomes == b.outcomes
    assert a.csv() == b.csv()


def test_report_csv_and_seeds():
    r = EvalReport({"b": [True, False], "a": [True, True, True, False]})
    assert r.csv() == ("task,trials,successes,rate\na,4,3,0.7500\nb,2,1,0.5000\nmean,6,4,0.6250\n")
    assert trial_seed(0, "a", 1) == trial_seed(0, "a", 1) != trial_seed(0, "a", 2)
    assert derive_seed(1, "x") != derive_seed(2, "x")
    assert 0 <= derive_seed(3, "eval") < 2 ** 63


# --------------------------------------------------------------------------
# collection


def test_collect_one_demo_ends_in_success(tmp_path):
    task = get_task("press-button")
    (d,) = collect_demos(task, 1, 0, tmp_path)
    demo = extract_keyframes(read_demo(d))
    assert len(demo.pairs) == task.n_keyframes
    env = SyntheticEnv(task)
    env.reset(derive_seed(0, "collect", task.task_id, 0))
    ok = False
    for _, action in demo.pairs:
        _, _, ok = env.step(action)
    assert ok


def test_collect_three_distinct_demos_and_reproducible_batches(tmp_path):
    task = get_task("reach-block")
    dirs = collect_demos(task, 3, 1, tmp_path / "a")
    names = ["demo_0000", "demo_0001", "demo_0002"]
    assert [d.name for d in dirs] == names == [d.name for d in list_demos(tmp_path / "a")]
    targets = [extract_keyframes(read_demo(d)).pairs[0][1].position for d in dirs]
    assert len({tuple(np.round(t, 6)) for t in targets}) == 3

    again = collect_demos(task, 3, 1, tmp_path / "b")
    for x, y in zip(dirs, again):
        for f in sorted(x.rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (y / f.relative_to(x)).read_bytes()

    def batch(root):
        ds = DemoSet.load(root)
        b = Batch()
        rng = np.random.default_rng(0)
        for d, instr, ref, action in ds.pairs():
            add_action_samples(b, crop_to_workspace(load_observation(d, ref), WS), instr, action, WS,
                               ModelConfig(), TrainConfig(), rng)
        return b.arrays(ModelConfig())

    one, two = batch(tmp_path / "a"), batch(tmp_path / "b")
    assert one[0].tobytes() == two[0].tobytes()
    assert one[2].heatmaps.tobytes() == two[2].heatmaps.tobytes()


def test_collect_rejects_zero():
    with pytest.raises(ConfigurationError):
        collect_demos(get_task("reach-block"), 0, 0, "unused")
