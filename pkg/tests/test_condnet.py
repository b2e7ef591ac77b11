"""Conditioned CNN: spec arithmetic, conditioning, training, checkpoints."""

import numpy as np
import pytest

from wearbench import condnet as cn
from wearbench import tensorcore as tc
from wearbench.tensorcore import NumericError, ParameterError, ShapeError
from wearbench.weartargets import VB_MAX_INDEX


def mini_spec(**kw):
    base = dict(signal_channels=2, window_len=81, param_dim=2, conditioned=True,
                units=2, base_filters=8, dropout_rate=0.0)
    base.update(kw)
    return cn.ModelSpec(**base)


class TestModelSpec:
    def test_length_trace_full_scale(self):
        spec = cn.ModelSpec(signal_channels=15, window_len=20_000)
        assert spec.length_trace() == [20_000, 6_666, 2_222, 740, 246]

    def test_length_trace_minimum(self):
        spec = mini_spec(units=4)
        assert spec.length_trace() == [81, 27, 9, 3, 1]

    def test_pooling_underflow_rejected(self):
        with pytest.raises(cn.SpecError):
            mini_spec(window_len=80, units=4)

    def test_filter_schedule_caps(self):
        spec = cn.ModelSpec(signal_channels=15, window_len=20_000,
                            units=5, base_filters=32)
        assert [spec.filters_at(u) for u in range(5)] == [32, 64, 128, 256, 256]

    def test_non_power_of_two_filters_rejected(self):
        with pytest.raises(cn.SpecError):
            mini_spec(base_filters=12)

    def test_conditioned_without_params_rejected(self):
        with pytest.raises(cn.SpecError):
            mini_spec(param_dim=0)
        # the reference twin simply drops the rows
        assert mini_spec(conditioned=False).injected_params == 0

    def test_weight_count_hand_oracle(self):
        # K=3, H=2, units=2, filters 4 then 8, kernel 3, 8 outputs:
        # 4*5*3+4 + 4*4*3+4 + 8*6*3+8 + 8*8*3+8 + 8*8+8 = 540
        spec = cn.ModelSpec(signal_channels=3, window_len=81, param_dim=2,
                            units=2, base_filters=4)
        assert spec.weight_count() == 540

    def test_unconditioned_drops_injected_weights(self):
        cond = mini_spec()
        ref = mini_spec(conditioned=False)
        k = cond.kernel
        extra = sum(cond.filters_at(u) * cond.param_dim * k
                    for u in range(cond.units))
        assert cond.weight_count() - ref.weight_count() == extra


class TestParamScaler:
    def test_table_ranges(self):
        scaler = cn.ParamScaler.fit(np.array([[20.0, 0.02], [40.0, 0.04],
                                              [30.0, 0.03]]))
        np.testing.assert_allclose(scaler.transform(np.array([30.0, 0.03])),
                                   [0.5, 0.5])
        np.testing.assert_allclose(scaler.transform(np.array([40.0, 0.02])),
                                   [1.0, 0.0])

    def test_batch_transform(self):
        scaler = cn.ParamScaler(np.array([0.0, 10.0]), np.array([2.0, 30.0]))
        out = scaler.transform(np.array([[1.0, 10.0], [2.0, 30.0]]))
        np.testing.assert_allclose(out, [[0.5, 0.0], [1.0, 1.0]])

    def test_degenerate_range_rejected(self):
        with pytest.raises(ParameterError):
            cn.ParamScaler.fit(np.array([[30.0, 0.02], [30.0, 0.04]]))


class TestTileAndInject:
    def test_tile_constant_rows(self):
        np.testing.assert_array_equal(cn.tile_params(np.array([1.0]), 4),
                                      [[1.0, 1.0, 1.0, 1.0]])
        out = cn.tile_params(np.array([0.25, 0.75]), 6)
        assert out.shape == (2, 6)
        np.testing.assert_array_equal(out[0], 0.25)
        np.testing.assert_array_equal(out[1], 0.75)

    def test_inject_appends_below_signal(self):
        rng = np.random.default_rng(0)
        sig = rng.normal(0, 1, (7, 200))
        out = cn.inject_and_concat(sig, np.array([0.5, 0.5]))
        assert out.shape == (9, 200)
        np.testing.assert_array_equal(out[:7], sig)
        np.testing.assert_array_equal(out[7], 0.5)

    def test_empty_params_passthrough(self):
        sig = np.ones((3, 10))
        out = cn.inject_and_concat(sig, np.zeros(0))
        np.testing.assert_array_equal(out, sig)
        assert out.shape == (3, 10)

    def test_bad_shapes_rejected(self):
        with pytest.raises(ShapeError):
            cn.tile_params(np.ones((2, 2)), 4)
        with pytest.raises(ShapeError):
            cn.inject_and_concat(np.ones(5), np.array([1.0]))


class TestForward:
    def test_output_shape(self):
        net = cn.ConditionedCNN(mini_spec(), seed=1)
        rng = np.random.default_rng(2)
        out = net.forward(rng.normal(0, 1, (3, 2, 81)), rng.uniform(0, 1, (3, 2)))
        assert out.shape == (3, 8)
        assert np.all(np.isfinite(out))

    def test_zero_weights_give_dense_bias(self):
        net = cn.ConditionedCNN(mini_spec(), seed=1)
        weights = {k: np.zeros_like(v) for k, v in net.params().items()}
        weights["dense_b"] = np.linspace(-1.0, 2.5, 8)
        net.set_weights(weights)
        out = net.forward(np.random.default_rng(3).normal(0, 1, (4, 2, 81)),
                          np.full((4, 2), 0.5))
        np.testing.assert_array_equal(out, np.tile(weights["dense_b"], (4, 1)))

    def test_reference_model_ignores_params(self):
        net = cn.ConditionedCNN(mini_spec(conditioned=False), seed=5)
        x = np.random.default_rng(6).normal(0, 1, (2, 2, 81))
        a = net.forward(x, np.array([[0.1, 0.9], [0.3, 0.3]]))
        b = net.forward(x, np.array([[0.9, 0.1], [0.7, 0.7]]))
        np.testing.assert_array_equal(a, b)

    def test_conditioned_output_depends_on_params(self):
        net = cn.ConditionedCNN(mini_spec(), seed=5)
        x = np.random.default_rng(6).normal(0, 1, (1, 2, 81))
        a = net.forward(x, np.array([[0.0, 0.0]]))
        b = net.forward(x, np.array([[1.0, 1.0]]))
        assert np.max(np.abs(a - b)) > 0.0

    def test_wrong_length_rejected(self):
        net = cn.ConditionedCNN(mini_spec(), seed=1)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 2, 80)), np.zeros((1, 2)))
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 3, 81)), np.zeros((1, 2)))


class _FixedParams:
    """Adapter binding the parameter input so grad_check sees layer protocol."""

    def __init__(self, net, p):
        self.net = net
        self.p = p

    @property
    def params(self):
        return self.net.params()

    @property
    def grads(self):
        return self.net.grads()

    def forward(self, x, training=False):
        return self.net.forward(x, self.p, training)

    def backward(self, upstream):
        return self.net.backward(upstream)


class TestEndToEndGradients:
    def test_finite_difference_whole_network(self):
        spec = cn.ModelSpec(signal_channels=2, window_len=81, param_dim=2,
                            units=4, base_filters=4, dropout_rate=0.0)
        net = cn.ConditionedCNN(spec, seed=11)
        rng = np.random.default_rng(12)
        x = rng.normal(0, 1, (1, 2, 81))
        p = rng.uniform(0.2, 0.8, (1, 2))
        worst = tc.grad_check(_FixedParams(net, p), x, eps=1e-5, seed=13)
        assert worst < 1e-3


def linear_problem(n=10, k=2, length=81, seed=0):
    """Targets are a linear readout of the first channel's DC level."""
    rng = np.random.default_rng(seed)
    x = np.zeros((n, k, length))
    levels = np.linspace(0.1, 1.0, n)
    x[:, 0, :] = levels[:, None]
    x[:, 1, :] = 0.1 * np.sin(np.linspace(0, 6.0, length))[None, :]
    y = np.outer(levels * 100.0, np.linspace(0.4, 1.0, 8))
    p = rng.uniform([20.0, 0.02], [40.0, 0.04], (n, 2))
    return x, p, y


class TestTraining:
    def test_convergence_smoke(self):
        x, p, y = linear_problem()
        spec = mini_spec(conditioned=False)
        cfg = cn.TrainConfig(epochs=500, batch_size=4, patience=0, seed=3)
        ckpt, history = cn.train(spec, x, p, y, x, p, y, cfg)
        pred = ckpt.predict(x, p)
        rmse = np.sqrt(np.mean((pred[:, VB_MAX_INDEX] - y[:, VB_MAX_INDEX]) ** 2))
        assert rmse < 5.0
        assert len(history.train_loss) <= 500

    def test_same_seed_identical_trajectories(self):
        x, p, y = linear_problem()
        spec = mini_spec()
        cfg = cn.TrainConfig(epochs=12, batch_size=4, patience=0, seed=9)
        _, h1 = cn.train(spec, x, p, y, x, p, y, cfg)
        ckpt2, h2 = cn.train(spec, x, p, y, x, p, y, cfg)
        assert h1.train_loss == h2.train_loss
        assert h1.val_rmse_um == h2.val_rmse_um
        _, h3 = cn.train(spec, x, p, y, x, p, y,
                         cn.TrainConfig(epochs=12, batch_size=4, patience=0, seed=10))
        assert h1.train_loss != h3.train_loss

    def test_divergence_aborts_with_numeric_error(self):
        x, p, y = linear_problem()
        cfg = cn.TrainConfig(epochs=50, batch_size=4, patience=0, seed=1,
                             learning_rate=1e200)
        with np.errstate(all="ignore"), pytest.raises(NumericError):
            cn.train(mini_spec(), x, p, y, x, p, y, cfg)

    def test_empty_split_rejected(self):
        x, p, y = linear_problem()
        cfg = cn.TrainConfig(epochs=2, batch_size=4, seed=0)
        with pytest.raises(ParameterError):
            cn.train(mini_spec(), x[:0], p[:0], y[:0], x, p, y, cfg)
        with pytest.raises(ParameterError):
            cn.train(mini_spec(), x, p, y, x[:0], p[:0], y[:0], cfg)

    def test_early_stopping_on_stale_validation(self):
        x, p, y = linear_problem()
        rng = np.random.default_rng(4)
        y_val = rng.uniform(0, 100, y.shape)   # unlearnable validation targets
        cfg = cn.TrainConfig(epochs=200, batch_size=4, patience=3, seed=2)
        _, history = cn.train(mini_spec(), x, p, y, x, p, y_val, cfg)
        assert len(history.val_rmse_um) < 200
        assert history.val_rmse_um[history.best_epoch] == min(history.val_rmse_um)

    def test_target_scaling_round_trip(self):
        x, p, y = linear_problem()
        cfg = cn.TrainConfig(epochs=5, batch_size=4, patience=0, seed=7)
        ckpt, _ = cn.train(mini_spec(), x, p, y, x, p, y, cfg)
        net = cn.ConditionedCNN(ckpt.spec, ckpt.seed)
        net.set_weights(ckpt.weights)
        scaled = net.forward(x, ckpt.param_scaler.transform(p))
        np.testing.assert_allclose(ckpt.predict(x, p),
                                   scaled * ckpt.target_max_um, rtol=1e-9)

    def test_conditioning_sensitivity_after_training(self):
        # same window, targets determined solely by v_c: only the conditioned
        # model can express this, and must move VB_max by far more than 1 um
        rng = np.random.default_rng(15)
        n = 12
        x = np.tile(rng.normal(0, 1, (1, 2, 81)), (n, 1, 1))
        p = np.zeros((n, 2))
        p[:, 0] = np.where(np.arange(n) % 2 == 0, 20.0, 40.0)
        p[:, 1] = 0.03 + 0.01 * rng.integers(-1, 2, n)
        y = np.tile(np.where(np.arange(n) % 2 == 0, 10.0, 100.0)[:, None], (1, 8))
        cfg = cn.TrainConfig(epochs=200, batch_size=4, patience=0, seed=5)
        ckpt, _ = cn.train(mini_spec(), x, p, y, x, p, y, cfg)
        low = ckpt.predict(x[:1], np.array([[20.0, 0.03]]))
        high = ckpt.predict(x[:1], np.array([[40.0, 0.03]]))
        assert abs(high[0, VB_MAX_INDEX] - low[0, VB_MAX_INDEX]) > 1.0


class TestCheckpoint:
    @pytest.fixture()
    def trained(self):
        x, p, y = linear_problem()
        cfg = cn.TrainConfig(epochs=4, batch_size=4, patience=0, seed=21)
        ckpt, _ = cn.train(mini_spec(), x, p, y, x, p, y, cfg)
        return ckpt, x, p

    def test_round_trip_bit_identical_predictions(self, trained, tmp_path):
        ckpt, x, p = trained
        before = ckpt.predict(x, p)
        path = tmp_path / "model.ckpt"
        ckpt.save(path)
        back = cn.Checkpoint.load(path)
        np.testing.assert_array_equal(back.predict(x, p), before)
        assert back.spec == ckpt.spec
        assert back.seed == ckpt.seed

    def test_truncated_file_rejected(self, trained, tmp_path):
        ckpt, _, _ = trained
        path = tmp_path / "model.ckpt"
        ckpt.save(path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-24])
        with pytest.raises(cn.CheckpointError):
            cn.Checkpoint.load(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(cn.CheckpointError):
            cn.Checkpoint.load(path)

    def test_unsupported_version_rejected(self, trained, tmp_path):
        ckpt, _, _ = trained
        bumped = cn.Checkpoint(ckpt.spec, ckpt.param_scaler, ckpt.target_max_um,
                               ckpt.channel_stats, ckpt.weights, ckpt.seed,
                               version=cn.CHECKPOINT_VERSION + 1)
        path = tmp_path / "model.ckpt"
        bumped.save(path)
        with pytest.raises(cn.CheckpointError, match="version"):
            cn.Checkpoint.load(path)

    def test_ci_scale_checkpoint_under_10mb(self, tmp_path):
        spec = cn.ModelSpec(signal_channels=15, window_len=2000, param_dim=2,
                            base_filters=8)
        net = cn.ConditionedCNN(spec, seed=0)
        ckpt = cn.Checkpoint(spec, cn.ParamScaler(np.array([20.0, 0.02]),
                                                  np.array([40.0, 0.04])),
                             np.ones(8), None, net.params(), 0)
        path = tmp_path / "ci.ckpt"
        ckpt.save(path)
        assert path.stat().st_size < 10 * 2 ** 20


class TestGridSearch:
    def test_single_cell_returns_it(self):
        x, p, y = linear_problem()
        cfg = cn.TrainConfig(epochs=3, batch_size=4, patience=0, seed=1)
        res = cn.grid_search(mini_spec(), x, p, y, x, p, y, cfg,
                             units_grid=(2,), filters_exp_grid=(3,))
        assert len(res.entries) == 1
        assert res.best_entry.spec.units == 2
        assert res.best_entry.spec.base_filters == 8

    def test_best_matches_exhaustive_scan(self):
        x, p, y = linear_problem()
        cfg = cn.TrainConfig(epochs=6, batch_size=4, patience=0, seed=1)
        res = cn.grid_search(mini_spec(), x, p, y, x, p, y, cfg,
                             units_grid=(2, 3), filters_exp_grid=(3, 4))
        assert len(res.entries) == 4
        want = min(range(4), key=lambda i: (res.entries[i].val_rmse_um,
                                            res.entries[i].weight_count, i))
        assert res.best_entry == res.entries[want]
        assert res.best.spec == res.entries[want].spec

    def test_duplicate_cells_tie_break_stable(self):
        x, p, y = linear_problem()
        cfg = cn.TrainConfig(epochs=2, batch_size=4, patience=0, seed=1)
        res = cn.grid_search(mini_spec(), x, p, y, x, p, y, cfg,
                             units_grid=(2, 2), filters_exp_grid=(3,))
        assert res.entries[0].val_rmse_um == res.entries[1].val_rmse_um
        assert res.best_entry == res.entries[0]

    def test_empty_grid_rejected(self):
        x, p, y = linear_problem()
        cfg = cn.TrainConfig(epochs=1, seed=0)
        with pytest.raises(ParameterError):
            cn.grid_search(mini_spec(), x, p, y, x, p, y, cfg, units_grid=())
