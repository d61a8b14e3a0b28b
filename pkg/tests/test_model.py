import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthoheat.errors import ConfigurationError, NonFiniteGradientError
from orthoheat.heatmap import convex_upsample, entropy, is_normalized
from orthoheat.model import (N_AUX_OUT, VOCAB, LossBreakdown, ModelConfig, Outputs, Targets, backward,
                             checkpoint_bytes, forward, init_params, load_checkpoint, loss, param_shapes,
                             save_checkpoint, sgd_step, tokenize)
from orthoheat.oracle import fd_gradients, slow_loss

TINY = ModelConfig(resolution=32, patch=8, dim=8, aux_hidden=10, dilation=2)
# float64 shadow with every optional block switched on, for gradient checks
TINY64 = ModelConfig(resolution=32, patch=8, dim=8, aux_hidden=10, dilation=2, positional=True, float64=True)


def _inputs(cfg, n, seed):
    rng = np.random.default_rng(seed)
    views = rng.random((n, 3, cfg.resolution, cfg.resolution, 3))
    tokens = np.zeros((n, cfg.max_tokens), dtype=np.int64)
    for i in range(n):
        tokens[i, :1 + i % 3] = rng.integers(2, cfg.vocab, 1 + i % 3)
    gt = rng.random((n, 3, cfg.resolution, cfg.resolution)) ** 8
    gt /= gt.sum(axis=(2, 3), keepdims=True)
    tgt = Targets(gt, rng.integers(0, 72, (n, 3)), rng.integers(0, 2, n).astype(float),
                  rng.integers(0, 2, n).astype(float), np.ones(n))
    return views, tokens, tgt


def _perturbed(cfg, seed, scale=0.1):
    rng = np.random.default_rng(seed + 1000)
    p = init_params(cfg, seed)
    return {k: (v + rng.normal(0, scale, v.shape)).astype(cfg.dtype) for k, v in p.items()}


def test_tokenize():
    t = tokenize("Reach the RED block, now!", 6)
    assert t.tolist() == [VOCAB.index("reach"), VOCAB.index("the"), VOCAB.index("red"), VOCAB.index("block"), 1, 0]
    assert len(VOCAB) <= 64


def test_param_shapes_match_contract():
    cfg = ModelConfig()
    s = param_shapes(cfg)
    assert s["aux_w1"][0] == 6 * cfg.dim and s["aux_w2"][1] == N_AUX_OUT == 218
    assert "pos" not in s and cfg.grid == 14
    assert param_shapes(ModelConfig(positional=True))["pos"] == (cfg.grid ** 2, cfg.dim)
    out = forward(init_params(cfg, 0), np.zeros((1, 3, 224, 224, 3)), np.zeros((1, 12), int), cfg)
    assert out.features.shape == (1, 3, 14, 14, cfg.dim)
    assert out.heatmaps.shape == (1, 3, 224, 224)


def test_zero_heads_give_uniform_outputs():
    p = init_params(TINY, 0, zero_heads=True)
    views, tokens, _ = _inputs(TINY, 2, 0)
    out = forward(p, views, tokens, TINY)
    np.testing.assert_allclose(out.heatmaps, 1.0 / 32 ** 2, rtol=1e-5)
    np.testing.assert_allclose(1 / (1 + np.exp(-out.gripper_logit)), 0.5)
    np.testing.assert_allclose(1 / (1 + np.exp(-out.collision_logit)), 0.5)


def test_view_permutation_permutes_heatmaps():
    p = _perturbed(TINY64, 3)
    views, tokens, _ = _inputs(TINY64, 2, 1)
    perm = [2, 0, 1]
    a = forward(p, views, tokens, TINY64).heatmaps
    b = forward(p, views[:, perm], tokens, TINY64).heatmaps
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-12, atol=1e-18)


def test_forward_is_deterministic():
    p = _perturbed(TINY, 4)
    views, tokens, _ = _inputs(TINY, 2, 2)
    a = forward(p, views, tokens, TINY)
    b = forward(p, views, tokens, TINY)
    for x, y in [(a.heatmaps, b.heatmaps), (a.rotation_logits, b.rotation_logits), (a.gripper_logit, b.gripper_logit)]:
        assert x.tobytes() == y.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 3.0))
def test_heatmaps_normalized_and_convex(seed, scale):
    p = _perturbed(TINY64, seed, scale)
    views, tokens, _ = _inputs(TINY64, 1, seed)
    out = forward(p, views, tokens, TINY64)
    for h in out.heatmaps[0]:
        assert is_normalized(h, 1e-9)
    c = out.cache
    coarse = c["nb"][..., 4]
    g, pp = TINY64.grid, TINY64.patch
    weights = c["w"].reshape(1, 3, g, g, pp, pp, 9).transpose(0, 1, 2, 3, 6, 4, 5)[0]
    fine = convex_upsample(coarse, weights, pp)
    np.testing.assert_allclose(fine.reshape(3, -1), c["fine"].reshape(3, g, g, pp, pp).transpose(0, 1, 3, 2, 4)
                               .reshape(3, -1), atol=1e-12)
    nb = c["nb"]
    lo = np.repeat(np.repeat(nb.min(axis=-1), 8, axis=-2), 8, axis=-1)
    hi = np.repeat(np.repeat(nb.max(axis=-1), 8, axis=-2), 8, axis=-1)
    assert np.all(fine >= lo - 1e-12) and np.all(fine <= hi + 1e-12)


def test_input_validation():
    p = init_params(TINY, 0)
    views, tokens, _ = _inputs(TINY, 1, 0)
    with pytest.raises(ConfigurationError):
        forward(p, views[:, :2], tokens, TINY)
    with pytest.raises(ConfigurationError):
        forward(p, views, np.full((1, 12), 64), TINY)
    with pytest.raises(ConfigurationError):
        forward(p, views, tokens[:, None], TINY)
    with pytest.raises(ConfigurationError):
        ModelConfig(resolution=30, patch=8)


# --------------------------------------------------------------------------
# loss


def _outputs(heat, rot, grip, coll):
    return Outputs(heat, rot, grip, coll, np.zeros(1))


def test_uniform_prediction_closed_forms():
    n, r = 2, 32
    heat = np.full((n, 3, r, r), 1.0 / r ** 2)
    _, _, tgt = _inputs(TINY, n, 5)
    parts = loss(_outputs(heat, np.zeros((n, 3, 72)), np.zeros(n), np.zeros(n)), tgt)
    assert abs(parts.trans - np.log(1024)) < 1e-12
    assert abs(parts.rot - 3 * np.log(72)) < 1e-12
    assert abs(parts.gripper - np.log(2)) < 1e-12 and abs(parts.collision - np.log(2)) < 1e-12


def test_perfect_prediction_hits_the_entropy_floor():
    _, _, tgt = _inputs(TINY, 1, 6)
    rot = np.full((1, 3, 72), -60.0)
    for a, b in enumerate(tgt.rotation_bins[0]):
        rot[0, a, b] = 60.0
    sat = lambda y: np.where(y > 0.5, 60.0, -60.0)
    parts = loss(_outputs(tgt.heatmaps, rot, sat(tgt.gripper), sat(tgt.collision)), tgt)
    assert parts.rot < 1e-9 and parts.gripper < 1e-9 and parts.collision < 1e-9
    floor = np.mean([entropy(h) for h in tgt.heatmaps[0]])
    assert abs(parts.trans - floor) < 1e-9


def test_loss_matches_direct_summation():
    p = _perturbed(TINY64, 7, 0.3)
    views, tokens, tgt = _inputs(TINY64, 3, 7)
    tgt.action_mask[1] = 0.0
    out = forward(p, views, tokens, TINY64)
    parts = loss(out, tgt)
    ref = [slow_loss(out.heatmaps[i], tgt.heatmaps[i], out.rotation_logits[i], tgt.rotation_bins[i],
                     out.gripper_logit[i], int(tgt.gripper[i]), out.collision_logit[i], int(tgt.collision[i]),
                     action_terms=bool(tgt.action_mask[i])) for i in range(3)]
    for key, got in [("trans", parts.trans), ("rot", parts.rot), ("gripper", parts.gripper),
                     ("collision", parts.collision), ("total", parts.total)]:
        assert abs(got - np.mean([r[key] for r in ref])) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_parts_non_negative_and_sum(seed):
    p = _perturbed(TINY64, seed, 0.5)
    views, tokens, tgt = _inputs(TINY64, 2, seed)
    parts = loss(forward(p, views, tokens, TINY64), tgt)
    vals = [parts.trans, parts.rot, parts.gripper, parts.collision]
    assert min(vals) >= 0
    assert abs(parts.total - sum(vals)) <= 1e-9


# --------------------------------------------------------------------------
# gradients and updates


def gradient_errors(seed: int, step: float = 1e-4, max_entries: int | None = 64) -> dict[str, float]:
    """Per-block relative error ||analytic - fd|| / max(||analytic||, ||fd||) on a tiny float64 instance."""
    p = _perturbed(TINY64, seed)
    views, tokens, tgt = _inputs(TINY64, 2, seed)
    tgt.action_mask[1] = 0.0
    peaks = np.random.default_rng(seed).integers(0, TINY64.grid ** 2, (2, 3))
    out = forward(p, views, tokens, TINY64, peak_cells=peaks)
    grads = backward(p, out, tgt, TINY64)
    pool = out.cache["gidx"]
    f = lambda q: loss(forward(q, views, tokens, TINY64, peak_cells=peaks, pool_index=pool), tgt).total
    fd = fd_gradients(f, p, step=step, max_entries=max_entries, seed=seed)
    errs = {}
    for name, (idx, est) in fd.items():
        a = grads[name].reshape(-1)[idx]
        errs[name] = float(np.linalg.norm(a - est) / max(np.linalg.norm(a), np.linalg.norm(est), 1e-300))
    return errs


def test_gradients_match_finite_differences():
    errs = gradient_errors(11, max_entries=16)
    assert set(errs) == set(param_shapes(TINY64))
    assert max(errs.values()) < 1e-4, errs


def test_zero_learning_rate_keeps_params():
    p = _perturbed(TINY, 1)
    views, tokens, tgt = _inputs(TINY, 1, 1)
    g = backward(p, forward(p, views, tokens, TINY), tgt, TINY)
    q = sgd_step(p, g, 0.0, clip=1.0)
    for k in p:
        assert q[k].tobytes() == p[k].tobytes()


def test_single_step_descends():
    p = _perturbed(TINY64, 2)
    views, tokens, tgt = _inputs(TINY64, 1, 2)
    out = forward(p, views, tokens, TINY64)
    before = loss(out, tgt).total
    q = sgd_step(p, backward(p, out, tgt, TINY64), 1e-3)
    peaks = out.cache["peak_cells"]
    after = loss(forward(q, views, tokens, TINY64, peak_cells=peaks), tgt).total
    assert after < before


def test_clipping_bounds_the_update():
    p = _perturbed(TINY64, 2)
    views, tokens, tgt = _inputs(TINY64, 1, 2)
    g = backward(p, forward(p, views, tokens, TINY64), tgt, TINY64)
    q = sgd_step(p, g, 1.0, clip=1e-3)
    moved = np.sqrt(sum(np.sum((q[k] - p[k]) ** 2) for k in p))
    assert moved <= 1e-3 * (1 + 1e-9)


def test_non_finite_gradient_names_tensor_and_sample():
    p = _perturbed(TINY64, 3)
    views, tokens, tgt = _inputs(TINY64, 3, 3)
    views[1, 0, 5, 5, 0] = np.nan
    out = forward(p, views, tokens, TINY64, peak_cells=np.zeros((3, 3), int))
    with pytest.raises(NonFiniteGradientError) as e:
        backward(p, out, tgt, TINY64)
    assert e.value.batch_index == 1
    assert e.value.tensor in param_shapes(TINY64)


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    p = _perturbed(TINY, 9)
    save_checkpoint(tmp_path / "m.bvck", p, TINY, "seed=9")
    q, cfg, extra = load_checkpoint(tmp_path / "m.bvck")
    assert cfg == TINY and extra == "seed=9"
    for k in p:
        assert q[k].tobytes() == p[k].tobytes()
    assert checkpoint_bytes(q, cfg, extra) == (tmp_path / "m.bvck").read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "x")


# --------------------------------------------------------------------------
# training loop


@pytest.fixture(scope="module")
def one_demo(tmp_path_factory):
    from orthoheat.policy import collect_demos
    from orthoheat.scene import get_task
    root = tmp_path_factory.mktemp("one_demo")
    collect_demos(get_task("press-button"), 1, 0, root)
    return root


def test_overfit_one_demo(one_demo):
    from orthoheat.data import AugmentSpec, DemoSet
    from orthoheat.heatmap import HeatmapSpec
    from orthoheat.training import TrainConfig, train
    # sigma 0.5 px: at the default width the target entropy alone exceeds 10% of the initial loss
    cfg = ModelConfig(resolution=64, patch=8, dilation=2)
    tcfg = TrainConfig(steps=200, batch=2, fine_samples=False, augment=AugmentSpec(0.0, (0.0, 0.0, 0.0)),
                       heatmap=HeatmapSpec(sigma=0.5), seed=0)
    result = train(DemoSet.load(one_demo), cfg, tcfg)
    first, last = result.curve[0][1], result.curve[-1][1]
    assert last < 0.1 * first, (first, last)


def test_empty_dataset_is_rejected(tmp_path):
    from orthoheat.data import DemoSet
    from orthoheat.training import TrainConfig, train
    with pytest.raises(ConfigurationError):
        train(DemoSet.load(tmp_path), TINY, TrainConfig(steps=1))
