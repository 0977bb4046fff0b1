import numpy as np
import pytest

from popmeta import meta, nn
from popmeta.population import StructureSpec, TargetKind, make_task_dataset, sample_population

from conftest import random_batch, random_params
from oracles import central_diff_grad


def make_tasks(rng, n_tasks=2, n_samples=8, out_dim=1):
    tasks = []
    for t in range(n_tasks):
        x = rng.uniform(-1, 1, (n_samples, 1))
        y = np.sin(2.5 * x + 0.4 * t) @ np.ones((1, out_dim)) + 0.2 * t
        tasks.append((x, y))
    return tasks


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            meta.MAMLConfig(alpha=0.0)
        with pytest.raises(ValueError):
            meta.MAMLConfig(beta=-1.0)
        with pytest.raises(ValueError):
            meta.MAMLConfig(epochs=0)
        with pytest.raises(ValueError):
            meta.MAMLConfig(adapt_steps=0)


class TestInnerUpdate:
    def test_zero_rate_is_identity(self, rng):
        p = random_params(rng)
        q = meta.inner_update(p, random_batch(rng, 4), alpha=0.0)
        assert np.array_equal(p.W1, q.W1) and np.array_equal(p.b2, q.b2)

    def test_zero_loss_batch_is_identity(self):
        p = nn.MLPParams(np.zeros((3, 1)), np.zeros(3), np.zeros((1, 3)),
                         np.array([1.0]))
        q = meta.inner_update(p, [(0.3, 1.0), (0.6, 1.0)], alpha=0.1)
        assert np.array_equal(p.W2, q.W2) and np.array_equal(p.b2, q.b2)

    def test_descent_for_small_alpha(self, rng):
        p = random_params(rng)
        batch = random_batch(rng, 6)
        alpha = 0.05
        before = nn.mse_loss(p, batch)
        while alpha > 1e-8:
            after = nn.mse_loss(meta.inner_update(p, batch, alpha), batch)
            if after <= before:
                break
            alpha /= 2.0
        assert after <= before


class TestEpochBatches:
    def test_disjoint_and_sized(self):
        cfg = meta.MAMLConfig(inner_batch=3, meta_batch=4, seed=5)
        for epoch in (0, 1, 127, 128, 300):
            pairs = meta.epoch_batches([10, 12], cfg, epoch)
            assert len(pairs) == 2
            for inner, m in pairs:
                assert len(inner) == 3 and len(m) == 4
                assert not set(inner.tolist()) & set(m.tolist())

    def test_pure_function_of_seed_and_epoch(self):
        cfg = meta.MAMLConfig(inner_batch=2, meta_batch=2, seed=9)
        a = meta.epoch_batches([8, 8], cfg, 42)
        b = meta.epoch_batches([8, 8], cfg, 42)
        for (ia, ma), (ib, mb) in zip(a, b):
            assert np.array_equal(ia, ib) and np.array_equal(ma, mb)
        c = meta.epoch_batches([8, 8], cfg, 43)
        assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a, c))

    def test_insufficient_samples(self):
        cfg = meta.MAMLConfig(inner_batch=5, meta_batch=5)
        with pytest.raises(ValueError):
            meta.epoch_batches([9], cfg, 0)


class TestMetaGradient:
    def test_first_and_second_order_agree_as_alpha_vanishes(self, rng):
        tasks = make_tasks(rng)
        cfg = meta.MAMLConfig(inner_batch=2, meta_batch=2, seed=3)
        cfg.alpha = 0.0  # degenerate inner step: theta' = theta exactly
        p = nn.init_params(1, 4, 1, seed=1)
        g2 = meta.meta_gradient(p, tasks, cfg, epoch=0)
        cfg.second_order = False
        g1 = meta.meta_gradient(p, tasks, cfg, epoch=0)
        np.testing.assert_allclose(nn.flatten(g2), nn.flatten(g1), atol=1e-12)

    def test_matches_finite_differences_of_meta_objective(self, rng):
        cfg = meta.MAMLConfig(alpha=0.05, inner_batch=2, meta_batch=2, seed=17)
        tasks = make_tasks(rng, n_tasks=2, n_samples=4)
        p = nn.init_params(1, 4, 1, seed=2)
        g = nn.flatten(meta.meta_gradient(p, tasks, cfg, epoch=3))
        fd = central_diff_grad(
            lambda v: meta.meta_objective(nn.unflatten(v, p), tasks, cfg, epoch=3),
            nn.flatten(p), eps=1e-5)
        rel = np.abs(g - fd) / np.maximum(1e-7, np.abs(fd))
        assert rel.max() < 1e-4

    def test_zero_residual_task_gives_zero_gradient(self):
        p = nn.MLPParams(np.zeros((3, 1)), np.zeros(3), np.zeros((1, 3)),
                         np.array([2.0]))
        x = np.linspace(-1, 1, 6).reshape(-1, 1)
        y = np.full((6, 1), 2.0)
        cfg = meta.MAMLConfig(alpha=0.1, inner_batch=2, meta_batch=2, seed=0)
        g = meta.meta_gradient(p, [(x, y)], cfg, epoch=0)
        assert nn.dot(g, g) == 0.0

    def test_empty_task_list(self, rng):
        cfg = meta.MAMLConfig()
        with pytest.raises(ValueError):
            meta.meta_gradient(random_params(rng), [], cfg)


class TestMetaTrain:
    def test_zero_beta_returns_initialization(self, rng):
        tasks = make_tasks(rng, n_samples=10)
        cfg = meta.MAMLConfig(beta=0.0, epochs=5, inner_batch=2, meta_batch=2, seed=21)
        model = meta.meta_train(tasks, tasks[0], cfg, hidden=6, val_shots=3)
        init = nn.init_params(1, 6, 1, seed=cfg.seed)
        assert np.array_equal(model.params.W1, init.W1)
        assert np.array_equal(model.params.W2, init.W2)

    def test_single_epoch_matches_manual_composition(self, rng):
        task = make_tasks(rng, n_tasks=1, n_samples=8)[0]
        cfg = meta.MAMLConfig(alpha=0.05, beta=0.02, epochs=1, inner_batch=2,
                              meta_batch=2, second_order=False, seed=11)
        model = meta.meta_train([task], task, cfg, hidden=4, val_shots=3)

        # normalization exactly as fitted by meta_train
        norm = meta.Normalization.fit([meta.task_arrays(task)])
        xn = norm.norm_x(task[0]).reshape(-1, 1)
        yn = norm.norm_y(task[1])
        p0 = nn.init_params(1, 4, 1, seed=cfg.seed)
        (inner_idx, meta_idx), = meta.epoch_batches([8], cfg, 0)
        adapted = meta.inner_update(p0, (xn[inner_idx], yn[inner_idx]), cfg.alpha)
        g_meta = nn.grad(adapted, (xn[meta_idx], yn[meta_idx]))
        expected = nn.axpy_update(p0, g_meta, cfg.beta)
        np.testing.assert_allclose(nn.flatten(model.params), nn.flatten(expected),
                                   rtol=1e-12, atol=1e-15)

    def test_deterministic(self, rng):
        tasks = make_tasks(rng, n_samples=10)
        cfg = meta.MAMLConfig(epochs=30, inner_batch=3, meta_batch=3, seed=8)
        m1 = meta.meta_train(tasks, tasks[1], cfg, hidden=5, val_shots=3)
        m2 = meta.meta_train(tasks, tasks[1], cfg, hidden=5, val_shots=3)
        assert np.array_equal(m1.params.W1, m2.params.W1)
        assert m1.val_history == m2.val_history
        assert m1.training_history == m2.training_history
        assert m1.best_epoch == m2.best_epoch

    def test_validation_never_reaches_meta_update(self, rng):
        tasks = make_tasks(rng, n_samples=10)
        cfg = meta.MAMLConfig(epochs=15, inner_batch=3, meta_batch=3, seed=8)
        val_a = (tasks[0][0], tasks[0][1] + 0.0)
        val_b = (tasks[0][0], tasks[0][1] * 1e3)  # wildly different targets
        hist_a = meta.meta_train(tasks, val_a, cfg, hidden=5, val_shots=3).training_history
        hist_b = meta.meta_train(tasks, val_b, cfg, hidden=5, val_shots=3).training_history
        assert hist_a == hist_b

    def test_best_validation_checkpoint(self, rng):
        tasks = make_tasks(rng, n_samples=12)
        cfg = meta.MAMLConfig(epochs=40, inner_batch=3, meta_batch=3, seed=2)
        model = meta.meta_train(tasks, tasks[0], cfg, hidden=5, val_shots=4)
        assert len(model.val_history) == 40 and len(model.training_history) == 40
        assert model.val_history[model.best_epoch] == min(model.val_history)

    def test_insufficient_batch_samples(self, rng):
        tasks = make_tasks(rng, n_samples=3)
        cfg = meta.MAMLConfig(inner_batch=2, meta_batch=2, epochs=2)
        with pytest.raises(ValueError):
            meta.meta_train(tasks, tasks[0], cfg, hidden=4, val_shots=1)


class TestAdapt:
    def _model(self, rng, **cfg_kwargs):
        tasks = make_tasks(rng, n_samples=12)
        cfg = meta.MAMLConfig(epochs=30, inner_batch=3, meta_batch=3, seed=5,
                              **cfg_kwargs)
        return meta.meta_train(tasks, tasks[0], cfg, hidden=5, val_shots=3)

    def test_zero_gradient_shots_identity(self, rng):
        model = self._model(rng)
        x = np.array([0.2, 0.5])
        y = model.norm.denorm_y(
            nn.forward_batch(model.params, model.norm.norm_x(x).reshape(-1, 1)))
        adapted = meta.adapt(model, (x, y), steps=3)
        np.testing.assert_allclose(nn.flatten(adapted), nn.flatten(model.params),
                                   atol=1e-12)

    def test_zero_alpha_identity_and_step_validation(self, rng):
        model = self._model(rng)
        shots = (np.array([0.1]), np.array([[0.4]]))
        adapted = meta.adapt(model, shots, steps=1, alpha=0.0)
        assert np.array_equal(adapted.W1, model.params.W1)
        with pytest.raises(ValueError):
            meta.adapt(model, shots, steps=0)

    def test_meta_params_unmodified(self, rng):
        model = self._model(rng)
        w1 = model.params.W1.copy()
        meta.adapt(model, (np.array([0.3]), np.array([[1.0]])))
        assert np.array_equal(model.params.W1, w1)

    def test_loss_nonincreasing_on_population_task(self):
        # default rates on a line-problem task; halve alpha if ever violated
        spec = StructureSpec(9500.0, id="t")
        ds = make_task_dataset(spec, 30, TargetKind.LINE_1HZ, seed=3)
        specs = sample_population(5, seed=1, id_prefix="m")
        tasks = [make_task_dataset(s, 40, TargetKind.LINE_1HZ, seed=2) for s in specs]
        cfg = meta.MAMLConfig(epochs=150, seed=4)
        model = meta.meta_train(tasks[:4], tasks[4], cfg, hidden=10,
                                input_range=(0.0, 20.0), val_shots=3)
        shots = (ds.inputs[:5], ds.targets[:5])
        xn = model.norm.norm_x(shots[0]).reshape(-1, 1)
        yn = model.norm.norm_y(shots[1])
        alpha = cfg.alpha
        for _ in range(6):
            losses = []
            params = model.params
            for step in range(10):
                losses.append(nn.mse_loss(params, (xn, yn)))
                params = meta.inner_update(params, (xn, yn), alpha)
            losses.append(nn.mse_loss(params, (xn, yn)))
            if all(b <= a + 1e-12 for a, b in zip(losses, losses[1:])):
                break
            alpha /= 2.0
        else:
            pytest.fail("adaptation loss increased even after halving alpha 6 times")

    def test_adaptation_helps_on_average(self):
        # mean post-adaptation loss < mean pre-adaptation loss over 50 tasks
        specs = sample_population(9, seed=31, id_prefix="tr")
        tasks = [make_task_dataset(s, 100, TargetKind.LINE_1HZ, seed=6) for s in specs]
        cfg = meta.MAMLConfig(epochs=800, seed=12)
        model = meta.meta_train(tasks[:8], tasks[8], cfg, hidden=10,
                                input_range=(0.0, 20.0), val_shots=5)
        test = sample_population(50, seed=77, id_prefix="te")
        pre, post = [], []
        for s in test:
            ds = make_task_dataset(s, 30, TargetKind.LINE_1HZ, seed=9)
            shots = (ds.inputs[:5], ds.targets[:5])
            eval_xy = (model.norm.norm_x(ds.inputs[5:]).reshape(-1, 1),
                       model.norm.norm_y(ds.targets[5:]))
            pre.append(nn.mse_loss(model.params, eval_xy))
            post.append(nn.mse_loss(meta.adapt(model, shots), eval_xy))
        assert np.mean(post) < np.mean(pre)


class TestNormalizationAndCheckpoint:
    def test_normalization_roundtrip(self, rng):
        tasks = [meta.task_arrays(t) for t in make_tasks(rng, out_dim=2)]
        norm = meta.Normalization.fit(tasks, input_range=(0.0, 20.0))
        assert norm.norm_x(0.0) == -1.0 and norm.norm_x(20.0) == 1.0
        y = rng.normal(size=(4, 2))
        np.testing.assert_allclose(norm.denorm_y(norm.norm_y(y)), y, rtol=1e-12)

    def test_predict_denormalizes(self, rng):
        tasks = make_tasks(rng, n_samples=10)
        cfg = meta.MAMLConfig(epochs=10, inner_batch=2, meta_batch=2, seed=3)
        model = meta.meta_train(tasks, tasks[0], cfg, hidden=4, val_shots=3)
        x = np.array([0.0, 0.5])
        manual = model.norm.denorm_y(
            nn.forward_batch(model.params, model.norm.norm_x(x).reshape(-1, 1)))
        np.testing.assert_allclose(model.predict(x), manual, rtol=1e-14)

    def test_metamodel_json_roundtrip(self, rng, tmp_path):
        import json

        tasks = make_tasks(rng, n_samples=10)
        cfg = meta.MAMLConfig(epochs=8, inner_batch=2, meta_batch=2, seed=3)
        model = meta.meta_train(tasks, tasks[0], cfg, hidden=4, val_shots=3)
        path = tmp_path / "model.json"
        with open(path, "w") as fh:
            json.dump(model.to_dict(), fh)
        loaded = meta.MetaModel.from_dict(json.load(open(path)))
        assert np.array_equal(loaded.params.W1, model.params.W1)
        assert np.array_equal(loaded.norm.y_mean, model.norm.y_mean)
        assert loaded.val_history == model.val_history
        assert loaded.config == model.config
