"""Standardization, splitting, mini-batching, Adam, and the training loop."""

import numpy as np
import pytest
from scipy.stats import chisquare

from hydronet import training
from hydronet.models import ArchitectureConfig
from hydronet.oracle import OracleConfig, generate_dataset
from hydronet.tensor import Param, Tensor5


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset(OracleConfig(n_cases=12, n_classes=2, n_times=16,
                                         n_points=48, seed=21))


@pytest.fixture(scope="module")
def tiny_split(tiny_dataset):
    return training.split_cases(tiny_dataset.n_cases, seed=0)


class TestSplit:
    def test_reference_scale_split(self):
        sp = training.split_cases(640, seed=1)
        assert (len(sp.train), len(sp.val), len(sp.test)) == (512, 64, 64)

    def test_desk_scale_split(self):
        sp = training.split_cases(48, seed=1)
        assert (len(sp.train), len(sp.val), len(sp.test)) == (40, 4, 4)

    def test_disjoint_and_covering(self):
        sp = training.split_cases(37, seed=5)
        merged = np.concatenate([sp.train, sp.val, sp.test])
        assert sorted(merged.tolist()) == list(range(37))

    def test_deterministic(self):
        a, b = training.split_cases(48, seed=9), training.split_cases(48, seed=9)
        assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)

    def test_too_few_cases(self):
        with pytest.raises(ValueError):
            training.split_cases(9, seed=0)


class TestStandardize:
    def test_training_features_have_zero_mean_unit_variance(self, tiny_dataset, tiny_split):
        stats = training.standardize_fit(tiny_dataset, tiny_split)
        p_std = stats.params(tiny_dataset.params[tiny_split.train])
        assert np.all(np.abs(p_std.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(p_std.std(axis=0) - 1.0) < 1e-10)
        q_std = stats.coords(tiny_dataset.coords[tiny_split.train].reshape(-1, 3))
        assert np.all(np.abs(q_std.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(q_std.std(axis=0) - 1.0) < 1e-10)
        cl_std = stats.classes(tiny_dataset.classes)
        assert abs(cl_std.mean()) < 1e-10 and abs(cl_std.std() - 1.0) < 1e-10

    def test_validation_features_have_nonzero_mean(self, tiny_dataset, tiny_split):
        stats = training.standardize_fit(tiny_dataset, tiny_split)
        p_std = stats.params(tiny_dataset.params[tiny_split.val])
        assert np.any(np.abs(p_std.mean(axis=0)) > 1e-6)

    def test_two_case_hand_computation(self, tiny_dataset):
        split = training.SplitSpec(train=np.array([0, 1]), val=np.array([2]),
                                   test=np.array([3]))
        stats = training.standardize_fit(tiny_dataset, split)
        rows = tiny_dataset.params[[0, 1]]
        assert np.allclose(stats.p_mean, rows.mean(axis=0), rtol=0, atol=1e-15)
        assert np.allclose(stats.p_std, rows.std(axis=0), rtol=0, atol=1e-15)

    def test_degenerate_feature_floored_with_warning(self, tiny_dataset):
        ds = tiny_dataset
        doctored = type(ds)(params=ds.params.copy(), classes=ds.classes.copy(),
                            times=ds.times.copy(), coords=ds.coords.copy(),
                            solutions=ds.solutions.copy())
        doctored.params[:, 4] = 0.75
        split = training.split_cases(ds.n_cases, seed=0)
        with pytest.warns(UserWarning, match="degenerate"):
            stats = training.standardize_fit(doctored, split)
        assert stats.p_std[4] == training.STD_FLOOR
        assert np.all(stats.params(doctored.params)[:, 4] == 0.0)

    def test_log_transform_of_settling_classes(self, tiny_dataset, tiny_split):
        stats = training.standardize_fit(tiny_dataset, tiny_split)
        logs = np.log10(tiny_dataset.classes)
        assert stats.cl_mean == pytest.approx(logs.mean())
        assert stats.cl_std == pytest.approx(logs.std())


class TestMinibatch:
    def cfg(self, **kw):
        base = dict(target="velocity", iterations=10, batch_cases=4, batch_classes=0,
                    batch_times=5, batch_points=6, seed=0)
        base.update(kw)
        return training.TrainConfig(**base)

    def test_full_batch_returns_everything(self, tiny_dataset, tiny_split):
        cfg = self.cfg(batch_cases=len(tiny_split.train), batch_classes=2,
                       batch_times=16, batch_points=48)
        idx = training.sample_minibatch(tiny_dataset, tiny_split, cfg, iteration_seed=0)
        assert np.array_equal(idx.cases, tiny_split.train)
        assert np.array_equal(idx.classes, np.arange(2))
        assert np.array_equal(idx.times, np.arange(16))
        assert np.array_equal(idx.points, np.arange(48))

    def test_indices_unique_and_within_bounds(self, tiny_dataset, tiny_split):
        cfg = self.cfg()
        for it in range(20):
            idx = training.sample_minibatch(tiny_dataset, tiny_split, cfg, (3, it))
            assert len(set(idx.cases.tolist())) == cfg.batch_cases
            assert set(idx.cases).issubset(set(tiny_split.train.tolist()))
            assert len(set(idx.times.tolist())) == cfg.batch_times
            assert idx.times.max() < tiny_dataset.n_times
            assert len(set(idx.points.tolist())) == cfg.batch_points
            assert idx.points.max() < tiny_dataset.n_points

    def test_axis_coverage_uniform_chi_square(self, tiny_dataset, tiny_split):
        cfg = self.cfg()
        counts = {"cases": np.zeros(tiny_dataset.n_cases),
                  "times": np.zeros(tiny_dataset.n_times),
                  "points": np.zeros(tiny_dataset.n_points)}
        for it in range(1000):
            idx = training.sample_minibatch(tiny_dataset, tiny_split, cfg, (7, it))
            counts["cases"][idx.cases] += 1
            counts["times"][idx.times] += 1
            counts["points"][idx.points] += 1
        for axis, observed in counts.items():
            if axis == "cases":
                observed = observed[tiny_split.train]
            _, p_value = chisquare(observed)
            assert p_value > 0.01, f"{axis} coverage is not uniform (p={p_value})"

    def test_oversized_batch_rejected(self, tiny_dataset, tiny_split):
        with pytest.raises(ValueError, match="exceeds"):
            training.sample_minibatch(tiny_dataset, tiny_split,
                                      self.cfg(batch_times=1000), 0)

    def test_gathered_target_shape(self, tiny_dataset, tiny_split):
        cfg = self.cfg()
        idx = training.sample_minibatch(tiny_dataset, tiny_split, cfg, 5)
        p, cl, t, q, y = training.gather_batch(tiny_dataset, idx, "concentration")
        assert y.shape == (4, 2, 5, 6, 1)
        assert p.shape == (4, 5) and q.shape == (4, 6, 3)
        assert cl.shape == (2,) and t.shape == (5,)


class TestAdam:
    def test_first_step_magnitude(self):
        params = [Param(np.zeros(4))]
        state = training.AdamState.for_params(params)
        grads = [np.array([1.0, -2.0, 0.5, -1e-3])]
        training.adam_step(params, grads, state, lr=0.01)
        delta = np.abs(params[0].values)
        assert np.all(delta >= 0.99 * 0.01) and np.all(delta <= 0.01 + 1e-12)
        assert np.all(np.sign(params[0].values) == -np.sign(grads[0]))

    def test_zero_gradient_no_change(self):
        params = [Param(np.full(3, 1.5))]
        state = training.AdamState.for_params(params)
        training.adam_step(params, [np.zeros(3)], state, lr=0.1)
        assert np.array_equal(params[0].values, np.full(3, 1.5))

    def test_quadratic_bowl_converges(self):
        target = np.array([0.3, -1.2, 2.0])
        params = [Param(np.zeros(3))]
        state = training.AdamState.for_params(params)
        for _ in range(2000):
            grads = [params[0].values - target]
            training.adam_step(params, grads, state, lr=0.01)
        assert np.max(np.abs(params[0].values - target)) < 1e-4

    def test_non_finite_gradient_aborts_with_diagnostics(self):
        params = [Param(np.zeros(2))]
        state = training.AdamState.for_params(params)
        with pytest.raises(training.NonFiniteGradientError, match="parameter 0"):
            training.adam_step(params, [np.array([np.nan, 1.0])], state, lr=0.01)


class TestSchedule:
    def test_unit_decay_is_constant(self):
        assert training.lr_schedule(0.01, 1.0, 100, 5000) == 0.01

    def test_ten_decades_of_decay(self):
        lr = training.lr_schedule(1.0, 0.984, 100, 1000)
        assert lr == pytest.approx(0.984**10)
        assert lr == pytest.approx(0.8510, abs=5e-5)

    def test_before_first_interval(self):
        assert training.lr_schedule(0.5, 0.9, 100, 99) == 0.5


class TestLoss:
    def test_perfect_prediction_zero(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 3, 2, 1))
        assert training.mse_loss(Tensor5(x), x).item() == 0.0

    def test_constant_offset(self):
        x = np.zeros((2, 2, 2, 2, 1))
        assert training.mse_loss(Tensor5(x + 2.0), x).item() == pytest.approx(4.0)

    def test_matches_two_pass_computation(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 2, 4, 5, 1)), rng.normal(size=(3, 2, 4, 5, 1))
        got = training.mse_loss(Tensor5(a), b).item()
        diff = (a - b).ravel()
        expected = sum(d * d for d in diff.tolist()) / diff.size
        assert got == pytest.approx(expected, rel=1e-12)

    def test_destandardized_variant_scales_by_variance(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(2, 1, 2, 2, 1)), rng.normal(size=(2, 1, 2, 2, 1))
        plain = training.mse_loss(Tensor5(a), b).item()
        scaled = training.mse_loss(Tensor5(a), b, y_std=2.5).item()
        assert scaled == pytest.approx(2.5**2 * plain, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            training.mse_loss(Tensor5(np.zeros((2, 1, 1, 1, 1))), np.zeros((1, 1, 1, 1, 1)))


class TestTrainLoop:
    ARCH = ArchitectureConfig(kind="cpnn", encoder_layers=1, decoder_layers=2, hidden=12)

    def cfg(self, **kw):
        base = dict(target="concentration", iterations=120, batch_cases=8, batch_times=8,
                    batch_points=16, lr=2e-3, val_interval=40, seed=11)
        base.update(kw)
        return training.TrainConfig(**base)

    def test_initial_loss_near_unit_variance(self, tiny_dataset):
        res = training.train(tiny_dataset, self.cfg(iterations=1), self.ARCH)
        assert 0.5 <= res.train_history[0] <= 1.5

    def test_determinism(self, tiny_dataset):
        a = training.train(tiny_dataset, self.cfg(), self.ARCH)
        b = training.train(tiny_dataset, self.cfg(), self.ARCH)
        assert np.array_equal(a.train_history, b.train_history)
        assert a.val_history == b.val_history
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert np.array_equal(pa.values, pb.values)

    def test_early_stopping_dominance(self, tiny_dataset):
        res = training.train(tiny_dataset, self.cfg(), self.ARCH)
        vals = [v for _, v in res.val_history]
        assert res.best_val_mse == min(vals)
        assert res.best_val_mse <= vals[-1]

    def test_loss_decreases(self, tiny_dataset):
        res = training.train(tiny_dataset, self.cfg(iterations=400), self.ARCH)
        first = np.median(res.train_history[:50])
        last = np.median(res.train_history[-50:])
        assert last < first

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_divergence_aborts_with_flag(self, tiny_dataset):
        res = training.train(tiny_dataset, self.cfg(lr=1e160, iterations=20), self.ARCH)
        assert res.diverged
        assert res.message
        assert all(np.all(np.isfinite(p.values)) for p in res.model.parameters())

    def test_history_csv(self, tiny_dataset, tmp_path):
        res = training.train(tiny_dataset, self.cfg(), self.ARCH)
        path = tmp_path / "loss.csv"
        training.write_history_csv(path, res)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,train_mse,val_mse"
        assert len(lines) == 1 + len(res.train_history)
        row_40 = lines[40].split(",")
        assert float(row_40[2]) == pytest.approx(dict(res.val_history)[40])

    def test_checkpoint_meta_and_stats_attached(self, tiny_dataset):
        res = training.train(tiny_dataset, self.cfg(), self.ARCH)
        assert res.model.stats is not None
        assert res.model.meta["target"] == "concentration"
        assert res.model.meta["best_iteration"] == res.best_iteration
