import csv

import numpy as np
import pytest

from splat4d.confidence import ConfidenceMaps
from splat4d.core4d import Gaussian4D, GaussianScene
from splat4d.dataio import ImageMatrix, render_dataset, synth_scene
from splat4d.errors import InvalidParameterError, NumericError
from splat4d.losses import DebugPullGuidance, LossWeights
from splat4d.rasterizer import render
from splat4d.train import (
    AdamState,
    TrainConfig,
    adam_step,
    init_scene,
    prune,
    train,
    write_history_csv,
)

from conftest import front_camera, random_scene

FROZEN = {"mu": 0.0, "log_scale": 0.0, "rot_left": 0.0, "rot_right": 0.0}


@pytest.fixture(scope="module")
def tiny_dataset():
    scene = synth_scene(30, seed=2, motion_amplitude=0.1)
    from splat4d.dataio import OrbitRig
    return render_dataset(scene, OrbitRig(n_views=4), np.linspace(0, 1, 3), (24, 24))


class TestAdam:
    def test_zero_gradient(self):
        p = {"x": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(p, {"x": np.zeros(2)}, state, {"x": 0.1})
        np.testing.assert_array_equal(p["x"], [1.0, -2.0])
        assert not np.any(state.m["x"]) and not np.any(state.v["x"])

    def test_first_step_magnitude(self):
        p = {"x": np.array([1.0, 1.0, 1.0])}
        adam_step(p, {"x": np.array([3.0, -1e-3, 50.0])}, AdamState(), {"x": 0.01})
        np.testing.assert_allclose(p["x"], [0.99, 1.01, 0.99], rtol=1e-6)

    def test_quadratic_convergence(self):
        p = {"x": np.array([1.0])}
        state = AdamState()
        for _ in range(100):
            adam_step(p, {"x": 2 * p["x"]}, state, {"x": 0.1})
        assert abs(p["x"][0]) < 0.1

    def test_non_finite_group_skipped(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        state = AdamState()
        skipped = adam_step(p, {"a": np.array([np.nan, 1.0]), "b": np.ones(2)}, state,
                            {"a": 0.1, "b": 0.1})
        assert skipped == ["a"]
        np.testing.assert_array_equal(p["a"], 1.0)
        assert p["b"][0] < 1.0
        assert state.diagnostics and "a" in state.diagnostics[0]

    def test_quaternions_renormalized(self, rng):
        q = rng.normal(size=(5, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        p = {"rot_left": q}
        adam_step(p, {"rot_left": rng.normal(size=(5, 4))}, AdamState(), {"rot_left": 0.3})
        np.testing.assert_allclose(np.linalg.norm(p["rot_left"], axis=1), 1.0, atol=1e-12)


class TestInit:
    def test_support_and_defaults(self):
        scene = init_scene(TrainConfig(init_count=100, seed=3))
        assert len(scene) == 100
        assert np.linalg.norm(scene.mu[:, :3], axis=1).max() <= 0.5
        assert scene.mu[:, 3].min() >= 0 and scene.mu[:, 3].max() <= 1
        np.testing.assert_array_equal(scene.rot_left, np.tile([1.0, 0, 0, 0], (100, 1)))
        np.testing.assert_array_equal(scene.rot_right, scene.rot_left)
        np.testing.assert_allclose(1 / (1 + np.exp(-scene.opacity_logit)), 0.1, rtol=1e-12)
        np.testing.assert_allclose(np.exp(scene.log_scale[:, :3]), 0.5 * 100 ** (-1 / 3))
        np.testing.assert_allclose(np.exp(scene.log_scale[:, 3]), 0.5)
        assert scene.sh_degree == 2 and not np.any(scene.sh_coeffs)

    def test_deterministic(self):
        a, b = init_scene(TrainConfig(seed=9)), init_scene(TrainConfig(seed=9))
        for k, v in a.params().items():
            np.testing.assert_array_equal(v, b.params()[k])

    def test_uniform_ball_mean_radius(self):
        scene = init_scene(TrainConfig(init_count=50_000, seed=0))
        r = np.linalg.norm(scene.mu[:, :3], axis=1)
        se = np.sqrt(0.25 * (3 / 5 - 9 / 16) / 50_000)
        assert abs(r.mean() - 0.375) < 3 * se

    @pytest.mark.parametrize("kwargs", [{"init_count": 0}, {"init_radius": 0.0},
                                        {"iterations": -1}, {"batch_size": 2}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(InvalidParameterError):
            TrainConfig(**kwargs)

    def test_learning_rates_merge(self):
        cfg = TrainConfig(learning_rates={"mu": 1.0})
        assert cfg.learning_rates["mu"] == 1.0 and cfg.learning_rates["sh_coeffs"] == 2.5e-3


class TestPrune:
    def test_all_above(self, rng):
        scene = random_scene(rng, 10)
        scene.opacity_logit[:] = 0.0
        out, keep = prune(scene, 0.005)
        assert keep.all() and len(out) == 10

    def test_all_below(self, rng):
        scene = random_scene(rng, 10)
        scene.opacity_logit[:] = -10.0
        assert len(prune(scene, 0.005)[0]) == 0

    def test_order_preserved_and_render_unchanged(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            scene = random_scene(rng, 40)
            scene.opacity_logit[::3] = np.log(0.004 / 0.996)
            out, keep = prune(scene, 0.005)
            np.testing.assert_array_equal(out.mu, scene.mu[keep])
            diff = render(scene, front_camera(), 0.5).image - render(out, front_camera(), 0.5).image
            assert np.abs(diff).mean() < 1e-3

    @pytest.mark.parametrize("thr", [-0.1, 1.0])
    def test_bad_threshold(self, rng, thr):
        with pytest.raises(InvalidParameterError):
            prune(random_scene(rng, 2), thr)


class TestTrain:
    def test_zero_weights_leave_parameters(self, tiny_dataset):
        cfg = TrainConfig(iterations=5, init_count=50)
        res = train(tiny_dataset, None, cfg, LossWeights(0, 0, 0))
        init = init_scene(cfg)
        for k, v in init.params().items():
            np.testing.assert_array_equal(res.scene.params()[k], v)

    def test_reproducible(self, tiny_dataset):
        cfg = TrainConfig(iterations=8, init_count=100, seed=4)
        a = train(tiny_dataset, None, cfg, LossWeights(lambda_sds=0))
        b = train(tiny_dataset, None, cfg, LossWeights(lambda_sds=0))
        assert a.history == b.history
        np.testing.assert_array_equal(a.scene.mu, b.scene.mu)

    def test_invariants_during_training(self, tiny_dataset):
        cfg = TrainConfig(iterations=20, init_count=200, prune_interval=5,
                          prune_opacity_threshold=0.09)
        res = train(tiny_dataset, None, cfg, LossWeights(lambda_sds=0))
        assert len(res.scene) <= 200
        for q in (res.scene.rot_left, res.scene.rot_right):
            np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9)
        assert len(res.history) == 20

    def test_controlled_convergence(self):
        cam = front_camera()
        gt = Gaussian4D([0, 0, 0, 0.5], [-2.5, -2.3, -2.7, -0.5], opacity_logit=1.5,
                        sh_coeffs=[[0.8, -0.9, 0.3]])
        data = ImageMatrix(render([gt], cam, 0.5).image[None, None], [0.5], [cam])
        init = GaussianScene.from_gaussians(
            [Gaussian4D(gt.mu, gt.log_scale, opacity_logit=-1.0, sh_coeffs=np.zeros((1, 3)))])
        cfg = TrainConfig(iterations=50, learning_rates=FROZEN, sh_degree=0)
        res = train(data, None, cfg, LossWeights(lambda_sds=0), init=init)
        losses = np.array([h[1] for h in res.history])
        assert np.all(np.diff(losses) < 0)
        np.testing.assert_array_equal(res.scene.mu, init.mu)

    def test_guidance_is_applied(self, tiny_dataset):
        cfg = TrainConfig(iterations=3, init_count=50)
        res = train(tiny_dataset, None, cfg, LossWeights(lambda_sds=1.0), DebugPullGuidance())
        assert all(h[4] > 0 for h in res.history)
        res = train(tiny_dataset, None, cfg, LossWeights(lambda_sds=1.0))
        assert all(h[4] == 0 for h in res.history)

    def test_all_pruned_aborts(self, tiny_dataset):
        cfg = TrainConfig(iterations=2, init_count=20, prune_interval=1,
                          prune_opacity_threshold=0.5)
        with pytest.raises(NumericError):
            train(tiny_dataset, None, cfg, LossWeights(lambda_sds=0))

    def test_densify_without_strategy(self, tiny_dataset):
        with pytest.raises(InvalidParameterError):
            train(tiny_dataset, None, TrainConfig(densify=True), LossWeights())

    def test_densify_hook_called(self, tiny_dataset):
        calls = []

        def hook(scene, state):
            calls.append(len(scene))
            return scene, state

        cfg = TrainConfig(iterations=4, init_count=30, prune_interval=2, densify=True)
        train(tiny_dataset, None, cfg, LossWeights(lambda_sds=0), densify=hook)
        assert calls == [30, 30]

    def test_misaligned_maps(self, tiny_dataset):
        with pytest.raises(InvalidParameterError):
            train(tiny_dataset, ConfidenceMaps.ones((1, 1, 24, 24)), TrainConfig(), LossWeights())

    def test_history_csv(self, tiny_dataset, tmp_path):
        res = train(tiny_dataset, None, TrainConfig(iterations=3, init_count=20),
                    LossWeights(lambda_sds=0))
        path = tmp_path / "loss.csv"
        write_history_csv(path, res.history)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["iteration", "total", "rgb_term", "ssim_term", "guidance_norm"]
        assert len(rows) == 4 and float(rows[1][1]) == res.history[0][1]
