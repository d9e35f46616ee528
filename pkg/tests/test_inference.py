import numpy as np
import pytest

from tactwin.inference import (
    Adam,
    Regressor,
    TrainConfig,
    TrainingError,
    build_direct_model,
    build_linear_probe,
    build_map_model,
    build_posture_model,
    forward_direct,
    forward_map,
    forward_posture,
    gradient_check,
    load_model,
    mse_loss,
    model_from_descriptor,
    posture_target,
    predict,
    save_model,
    train,
)


@pytest.fixture(scope="module")
def blob_data():
    """Synthetic localization task: bright blob position encoded in targets."""
    rng = np.random.default_rng(5)
    n = 500
    xs = np.zeros((n, 6, 48, 64))
    ys = np.zeros((n, 6))
    for i in range(n):
        r, c = rng.integers(6, 42), rng.integers(6, 58)
        xs[i, :3, r - 2 : r + 3, c - 2 : c + 3] = rng.uniform(0.3, 1.0)
        ys[i] = [r / 48, c / 64, (r + c) / 112, 0.1, 0.0, 0.0]
    return xs, ys


class TestForward:
    def test_deterministic(self, blob_data):
        xs, _ = blob_data
        model = build_direct_model(seed=3)
        a = model.forward(xs[:4])
        b = model.forward(xs[:4])
        assert np.array_equal(a, b)

    def test_zero_head_outputs_bias(self):
        model = build_direct_model(seed=0)
        head = model.layers[-1]
        head.weight[...] = 0.0
        head.bias[...] = np.arange(6, dtype=float)
        out = forward_direct(model, np.zeros((6, 48, 64)))
        assert np.array_equal(out, np.arange(6, dtype=float))

    def test_map_zero_final_layer(self):
        model = build_map_model(grid=(32, 32), seed=0)
        final = model.layers[-1]
        final.weight[...] = 0.0
        final.bias[...] = 0.0
        out = forward_map(model, np.zeros((6, 48, 64)))
        assert out.shape == (32, 32, 3)
        assert np.array_equal(out, np.zeros_like(out))

    def test_map_output_matches_grid(self):
        for grid in ((32, 32), (64, 64)):
            model = build_map_model(grid=grid, seed=0)
            out = forward_map(model, np.zeros((6, 48, 64)))
            assert out.shape == (grid[1], grid[0], 3)

    def test_head_mismatch_rejected(self):
        model = build_direct_model(seed=0)
        with pytest.raises(ValueError):
            forward_map(model, np.zeros((6, 48, 64)))
        with pytest.raises(ValueError):
            forward_posture(model, np.zeros((6, 48, 64)))

    def test_posture_output_ranges(self):
        model = build_posture_model(seed=0)
        yaw, roll = forward_posture(model, np.zeros((3, 48, 64)))
        assert -90.0 <= yaw <= 90.0
        assert 0.0 <= roll < 360.0

    def test_posture_target_round_trip(self):
        y = posture_target(33.0, 275.0)
        roll = np.rad2deg(np.arctan2(y[1], y[2])) % 360
        assert roll == pytest.approx(275.0, abs=1e-9)

    def test_input_shape_checked(self):
        model = build_direct_model(seed=0)
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 3, 48, 64)))


class TestGradients:
    def test_linear_probe_exact(self, rng):
        # Central differences are exact for a quadratic loss, so a large step
        # minimizes float round-off.
        model = build_linear_probe(24, 5, seed=1)
        x = rng.normal(size=(8, 24, 1, 1))
        y = rng.normal(size=(8, 5))
        assert gradient_check(model, x, y, epsilon=1e-3, n_samples=125, seed=0) <= 1e-8

    def test_default_direct_model(self, rng):
        model = build_direct_model(seed=2)
        x = rng.normal(0, 0.1, size=(2, 6, 48, 64))
        y = rng.normal(size=(2, 6))
        assert gradient_check(model, x, y, epsilon=1e-5, n_samples=200, seed=0) <= 1e-3

    def test_map_model(self, rng):
        model = build_map_model(grid=(32, 32), seed=2)
        x = rng.normal(0, 0.1, size=(2, 6, 48, 64))
        y = rng.normal(0, 0.1, size=(2, 3, 32, 32))
        assert gradient_check(model, x, y, epsilon=1e-5, n_samples=120, seed=0) <= 1e-3

    def test_epsilon_range_enforced(self):
        model = build_linear_probe(4, 2, seed=0)
        with pytest.raises(ValueError):
            gradient_check(model, np.zeros((1, 4, 1, 1)), np.zeros((1, 2)), epsilon=0.5)


class TestAdam:
    def test_single_step_matches_update_rule(self):
        model = build_linear_probe(3, 2, seed=4)
        cfg = TrainConfig(learning_rate=0.01)
        optimizer = Adam(model, cfg)
        params_before = [p.copy() for p, _ in model.params()]
        # Known synthetic gradient.
        for k, (p, g) in enumerate(model.params()):
            g[...] = (k + 1) * 0.5
        grads = [g.copy() for _, g in model.params()]
        optimizer.step(model)
        for (p, _), before, g in zip(model.params(), params_before, grads):
            m_hat = g  # t=1 bias correction cancels (1-beta) factors
            v_hat = g * g
            expected = before - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
            assert np.allclose(p, expected, atol=1e-10)


class TestTraining:
    def test_loss_decreases_after_first_epoch(self, blob_data):
        xs, ys = blob_data
        model = build_direct_model(seed=0)
        initial_loss, _ = mse_loss(model.forward(xs[:400]), ys[:400])
        history = train(model, xs[:400], ys[:400], xs[400:], ys[400:], TrainConfig(epochs=1, seed=0))
        assert history.train_loss[0] < initial_loss

    def test_same_seed_bitwise_identical(self, blob_data):
        xs, ys = blob_data
        results = []
        for _ in range(2):
            model = build_direct_model(seed=9)
            train(model, xs[:256], ys[:256], xs[256:320], ys[256:320], TrainConfig(epochs=2, seed=1))
            results.append(model.state())
        for a, b in zip(*results):
            assert np.array_equal(a, b)

    def test_best_checkpoint_restored(self, blob_data):
        xs, ys = blob_data
        model = build_direct_model(seed=0)
        history = train(
            model, xs[:256], ys[:256], xs[256:320], ys[256:320], TrainConfig(epochs=3, seed=0)
        )
        restored_val, _ = mse_loss(predict(model, xs[256:320]), ys[256:320])
        assert restored_val == pytest.approx(min(history.val_loss), rel=1e-9)

    def test_nonfinite_loss_aborts_with_diagnostics(self, blob_data):
        xs, ys = blob_data
        bad = ys.copy()
        bad[3, 0] = np.nan
        model = build_direct_model(seed=0)
        with pytest.raises(TrainingError, match="epoch 0"):
            train(model, xs[:64], bad[:64], xs[64:96], ys[64:96], TrainConfig(epochs=1, seed=0))


class TestModelIO:
    def test_round_trip_preserves_forward(self, tmp_path, blob_data):
        xs, _ = blob_data
        model = build_direct_model(seed=6)
        model.set_training(False)  # loaded models come back in eval mode
        path = tmp_path / "model.imdl"
        save_model(path, model)
        loaded = load_model(path)
        a = model.forward(xs[:3])
        b = loaded.forward(xs[:3])
        # Parameters are stored as f32.
        assert np.allclose(a, b, rtol=1e-5, atol=1e-5)
        assert loaded.head == model.head
        assert loaded.input_shape == model.input_shape

    def test_descriptor_round_trip(self):
        model = build_map_model(grid=(32, 32), seed=0, input_gain=4.0)
        rebuilt = model_from_descriptor(model.descriptor())
        assert rebuilt.descriptor() == model.descriptor()
        assert rebuilt.parameter_count() == model.parameter_count()
        assert rebuilt.map_grid == (32, 32)
