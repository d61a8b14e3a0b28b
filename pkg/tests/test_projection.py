import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orthoheat import _kernels_py, kernels
from orthoheat.errors import ConfigurationError, OutOfRangeError
from orthoheat.geometry import ColoredPointCloud, Workspace
from orthoheat.oracle import slow_argmax, slow_render, slow_score_grid
from orthoheat.projection import (BACKGROUND, VIEWS, GridScores, OrthoViewSpec, argmax_grid, load_depth,
                                  load_grid_scores, pixel_index, pixel_to_ray, read_ppm, render, save_depth,
                                  save_grid_scores, score_grid, view_specs, world_to_pixel, write_ppm)

from conftest import random_cloud


def delta_maps(q, cuboid, r):
    maps = []
    for spec in view_specs(cuboid, r):
        u, v = pixel_index(q, spec)
        h = np.zeros((r, r))
        h[v, u] = 1.0
        maps.append(h)
    return maps


class TestRender:
    def test_single_point_at_center(self):
        # binary-exact cuboid so the center maps to exactly (16, 16)
        cube = Workspace([-0.5, -0.5, 0.0], [0.5, 0.5, 1.0])
        c = ColoredPointCloud([cube.center], [[1, 0, 0]])
        for spec in view_specs(cube, 32):
            view = render(c, spec)
            assert view.occupancy.sum() == 1
            assert view.occupancy[16, 16]  # half-open pixels: 16.0 belongs to pixel 16
        below = ColoredPointCloud([cube.center - 1e-9], [[1, 0, 0]])
        for spec in view_specs(cube, 32):
            assert render(below, spec).occupancy[15, 15]

    def test_nearer_point_wins(self, ws):
        # both on the top-view ray through the center; the higher one is nearer
        c = ColoredPointCloud([[0.0, 0.0, 0.1], [0.0, 0.0, 0.6]], [[1, 0, 0], [0, 0, 1]])
        view = render(c, OrthoViewSpec("top", 32, ws))
        u, v = pixel_index([0.0, 0.0, 0.1], view.spec)
        np.testing.assert_array_equal(view.color[v, u], [0, 0, 1])
        assert view.depth[v, u] == pytest.approx(0.95 - 0.6)

    def test_empty_cloud_is_background(self, ws):
        view = render(ColoredPointCloud.empty(), OrthoViewSpec("front", 32, ws))
        assert not view.occupancy.any()
        assert np.all(np.isinf(view.depth))
        assert np.all(view.color == BACKGROUND)

    def test_outside_points_dropped(self, ws):
        from collections import Counter
        diag = Counter()
        c = ColoredPointCloud([[0, 0, 0.2], [5, 5, 5]], [[1, 1, 1], [0, 0, 0]])
        view = render(c, OrthoViewSpec("top", 32, ws), diag)
        assert view.occupancy.sum() == 1 and diag["render_dropped"] == 1

    @pytest.mark.parametrize("axis", VIEWS)
    def test_matches_brute_force(self, ws, rng, axis):
        spec = OrthoViewSpec(axis, 32, ws)
        for _ in range(3):
            cloud = random_cloud(rng, 1000, ws)
            view = render(cloud, spec)
            winner, depth = slow_render(cloud.points, axis, ws.min_corner, ws.max_corner, 32)
            np.testing.assert_array_equal(view.winner, winner)
            np.testing.assert_array_equal(view.depth, depth)
            assert np.array_equal(view.occupancy, np.isfinite(view.depth))

    def test_depth_ties_lower_index(self, ws):
        c = ColoredPointCloud([[0.1, 0.1, 0.3], [0.1, 0.1, 0.3], [0.1, 0.1, 0.3]],
                              [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        view = render(c, OrthoViewSpec("right", 32, ws))
        assert view.winner[view.occupancy][0] == 0

    def test_permutation_invariance(self, ws, rng):
        cloud = random_cloud(rng, 400, ws)
        perm = rng.permutation(400)
        shuffled = ColoredPointCloud(cloud.points[perm], cloud.colors[perm])
        for spec in view_specs(ws, 32):
            a, b = render(cloud, spec), render(shuffled, spec)
            np.testing.assert_array_equal(a.color, b.color)
            np.testing.assert_array_equal(a.depth, b.depth)

    def test_backends_agree(self, rng):
        pix = rng.integers(0, 64, 5000)
        depth = np.round(rng.uniform(0, 1, 5000), 2)  # forces many exact ties
        w1, b1 = kernels.zbuffer(pix, depth, 64)
        w2, b2 = _kernels_py.zbuffer(pix, depth, 64)
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(b1, b2)


class TestPixelMaps:
    def test_corners_and_center(self, ws):
        for spec in view_specs(ws, 224):
            np.testing.assert_allclose(world_to_pixel(ws.min_corner, spec), [0, 0])
            np.testing.assert_allclose(world_to_pixel(ws.max_corner, spec), [224, 224])
            np.testing.assert_allclose(world_to_pixel(ws.center, spec), [112, 112])

    def test_out_of_range(self, ws):
        with pytest.raises(OutOfRangeError):
            world_to_pixel([0, 0, 2.0], OrthoViewSpec("top", 32, ws))

    def test_floor_matches_render(self, ws, rng):
        pts = rng.uniform(ws.min_corner, ws.max_corner, (100, 3))
        for spec in view_specs(ws, 64):
            for i, p in enumerate(pts):
                view = render(ColoredPointCloud([p], [[1, 1, 1]]), spec)
                u, v = np.floor(world_to_pixel(p, spec)).astype(int)
                assert view.occupancy[v, u]

    def test_ray_round_trip(self, ws, rng):
        for spec in view_specs(ws, 64):
            p = rng.uniform(ws.min_corner, ws.max_corner)
            u, v = world_to_pixel(p, spec)
            origin, direction = pixel_to_ray(u, v, spec)
            t = (p - origin) @ direction
            np.testing.assert_allclose(origin + t * direction, p, atol=1e-12)
            assert t >= -1e-12

    def test_bad_spec(self, ws):
        with pytest.raises(ConfigurationError):
            OrthoViewSpec("side", 32, ws)
        with pytest.raises(ConfigurationError):
            OrthoViewSpec("top", 8, ws)


class TestScoreGrid:
    def test_uniform_heatmaps(self, ws):
        h = np.full((32, 32), 1 / 1024)
        gs = score_grid([h, h, h], ws, (7, 5, 6))
        assert np.ptp(gs.scores) <= 1e-12

    def test_delta_unique_argmax(self, ws):
        dims = (8, 8, 8)
        gs0 = score_grid([np.full((32, 32), 1 / 1024)] * 3, ws, dims)
        q = gs0.center(np.ravel_multi_index((3, 5, 2), dims))
        gs = score_grid(delta_maps(q, ws, 32), ws, dims)
        best = np.flatnonzero(gs.scores == gs.scores.max())
        assert list(best) == [np.ravel_multi_index((3, 5, 2), dims)]

    def test_matches_triple_loop(self, ws, rng):
        maps = [rng.uniform(size=(32, 32)) for _ in range(3)]
        maps = [m / m.sum() for m in maps]
        gs = score_grid(maps, ws, (8, 8, 8))
        slow = slow_score_grid(maps, ws.min_corner, ws.max_corner, (8, 8, 8))
        assert np.abs(gs.scores - slow).max() < 1e-10

    def test_non_cubic_dims_against_oracle(self, ws, rng):
        maps = [rng.uniform(size=(20, 20)) for _ in range(3)]
        gs = score_grid(maps, ws, (3, 7, 11))
        slow = slow_score_grid(maps, ws.min_corner, ws.max_corner, (3, 7, 11))
        assert np.abs(gs.scores - slow).max() < 1e-10

    def test_monotone(self, ws, rng):
        maps = [rng.uniform(size=(32, 32)) for _ in range(3)]
        base = score_grid(maps, ws, (6, 6, 6)).scores
        bumped = [m.copy() for m in maps]
        bumped[1][10, 4] += 0.5
        assert np.all(score_grid(bumped, ws, (6, 6, 6)).scores >= base)

    def test_resolution_mismatch(self, ws):
        with pytest.raises(ConfigurationError):
            score_grid([np.ones((32, 32)), np.ones((32, 32)), np.ones((16, 16))], ws, (4, 4, 4))

    def test_backends_agree(self, rng):
        lt, lf, lr = rng.normal(size=(5, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 5))
        np.testing.assert_array_equal(kernels.fuse_scores(lt, lf, lr), _kernels_py.fuse_scores(lt, lf, lr))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_back_projection_consistency(self, seed):
        ws = Workspace([-0.5, -0.5, -0.05], [0.5, 0.5, 0.95])
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in rng.integers(3, 40, 3))
        r = int(rng.integers(16, 80))
        q = rng.uniform(ws.min_corner, ws.max_corner)
        _, pos = argmax_grid(score_grid(delta_maps(q, ws, r), ws, dims))
        # a delta cannot localize below one pixel, so the bound is the coarser of the two
        bound = np.maximum(ws.extent / np.array(dims), ws.extent / r)
        assert np.all(np.abs(pos - q) <= bound + 1e-12)


class TestArgmax:
    def test_single_cell(self, ws):
        gs = GridScores((1, 1, 1), ws.extent, ws.min_corner, np.array([3.0]))
        i, pos = argmax_grid(gs)
        assert i == 0
        np.testing.assert_allclose(pos, ws.center)

    def test_ties_lowest_index(self, ws):
        gs = GridScores((2, 2, 2), ws.extent / 2, ws.min_corner, np.zeros(8))
        assert argmax_grid(gs)[0] == 0

    def test_random_matches_linear_scan(self, ws, rng):
        for _ in range(20):
            s = np.round(rng.normal(size=60), 1)
            gs = GridScores((3, 4, 5), ws.extent / [3, 4, 5], ws.min_corner, s)
            assert argmax_grid(gs)[0] == slow_argmax(s)


class TestExport:
    def test_ppm_round_trip(self, tmp_path, ws, rng):
        view = render(random_cloud(rng, 300, ws), OrthoViewSpec("top", 32, ws))
        write_ppm(tmp_path / "v.ppm", view.color, flip=False)
        back = read_ppm(tmp_path / "v.ppm")
        np.testing.assert_allclose(back, view.color, atol=0.5 / 255 + 1e-7)

    def test_depth_round_trip(self, tmp_path, ws, rng):
        view = render(random_cloud(rng, 300, ws), OrthoViewSpec("front", 32, ws))
        save_depth(tmp_path / "d.f32", view)
        axis, depth = load_depth(tmp_path / "d.f32")
        assert axis == "front"
        np.testing.assert_array_equal(np.isinf(depth), ~view.occupancy)
        np.testing.assert_allclose(depth[view.occupancy], view.depth[view.occupancy], rtol=1e-6)

    def test_grid_round_trip(self, tmp_path, ws, rng):
        gs = score_grid([rng.uniform(size=(16, 16)) for _ in range(3)], ws, (4, 5, 6))
        save_grid_scores(tmp_path / "g.bin", gs)
        back = load_grid_scores(tmp_path / "g.bin")
        assert back.dims == (4, 5, 6)
        np.testing.assert_allclose(back.origin, gs.origin)
        np.testing.assert_allclose(back.spacing, gs.spacing)
        np.testing.assert_allclose(back.scores, gs.scores, rtol=1e-6)
