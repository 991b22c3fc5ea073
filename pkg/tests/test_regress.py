import math

import numpy as np
import pytest
from scipy.optimize import minimize

from agglab import aggregate as ag
from agglab import regress as rg
from agglab.core import Dataset, synth_dataset


@pytest.fixture(scope="module")
def small():
    return synth_dataset(600, 5, 0.3, 3.0, 1.0, seed=21)


def _fd_gradient(llp, model, h=1e-5):
    s = model.params()
    out = np.empty_like(s)
    for i in range(s.size):
        e = np.zeros_like(s)
        e[i] = h
        out[i] = (rg.llp_loss(llp, model.with_params(s + e))
                  - rg.llp_loss(llp, model.with_params(s - e))) / (2 * h)
    return out


def _rel_err(g, fd, floor=1e-6):
    return np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)


class TestLinearFit:
    def test_exact_recovery(self, rng):
        d = 6
        x = rng.normal(size=(500, d))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        h = rng.normal(size=d)
        h *= 0.8 / np.linalg.norm(h)
        ds = Dataset(x, x @ h, 1.0, 1.0)
        lba = ag.wtd_lba(ds, 40, 5, seed=3)
        model = rg.fit_linear_lba(lba, b3=1.0)
        assert np.linalg.norm(model.r - h) <= 1e-6

    def test_zero_cap(self, small):
        lba = ag.wtd_lba(small, 50, 4, seed=1)
        model = rg.fit_linear_lba(lba, b3=0.0)
        assert np.all(model.r == 0)
        assert rg.lba_loss(lba, model) == pytest.approx(np.sum(lba.agg_labels ** 2))

    def test_constrained_matches_multistart_oracle(self, rng):
        a = rng.normal(size=(200, 5))
        b = a @ rng.normal(size=5) * 2 + rng.normal(size=200)
        free = np.linalg.lstsq(a, b, rcond=None)[0]
        b3 = 0.3 * np.linalg.norm(free)
        r = rg.constrained_lstsq(a, b, b3)
        assert np.linalg.norm(r) <= b3 + 1e-9
        ours = np.sum((a @ r - b) ** 2)

        best = math.inf
        for _ in range(20):
            x0 = rng.normal(size=5)
            x0 *= rng.uniform(0, b3) / np.linalg.norm(x0)
            res = minimize(lambda v: np.sum((a @ v - b) ** 2), x0, method="SLSQP",
                           jac=lambda v: 2 * a.T @ (a @ v - b),
                           constraints=[{"type": "ineq", "fun": lambda v: b3 ** 2 - v @ v}],
                           options={"ftol": 1e-14, "maxiter": 1000})
            if b3 ** 2 - res.x @ res.x >= -1e-9:
                best = min(best, res.fun)
        assert ours == pytest.approx(best, rel=1e-4)

    def test_unconstrained_when_inside_ball(self, small):
        lba = ag.wtd_lba(small, 100, 4, seed=2)
        model = rg.fit_linear_lba(lba)
        ref = np.linalg.lstsq(lba.agg_features, lba.agg_labels, rcond=None)[0]
        np.testing.assert_allclose(model.r, ref, rtol=1e-7)

    def test_norm_invariant(self):
        with pytest.raises(ValueError):
            rg.LinearModel([3.0, 4.0], b3=4.0)


class TestLoss:
    def test_zero_model(self, small):
        llp = ag.noisy_wtd_llp(small, 30, 4, 0.2, seed=1)
        zero = rg.LinearModel(np.zeros(small.d))
        assert rg.llp_loss(llp, zero) == pytest.approx(np.sum(llp.agg_labels ** 2), rel=1e-14)

    def test_singleton_bags_perfect_fit(self):
        x = np.eye(3) * 0.5
        ds = Dataset(x, [0.1, 0.2, 0.3], 1.0, 1.0)
        llp = rg.instance_llp(ds)
        model = rg.LinearModel([0.2, 0.4, 0.6])
        assert rg.llp_loss(llp, model) == pytest.approx(0, abs=1e-30)

    def test_linear_matches_lba_aggregates(self, small, rng):
        y_tilde, llp = ag.noisy_wtd_llp(small, 40, 5, 0.0, seed=5, audit_mode=True)
        lba = ag.lba_from_plan(small, llp.plan)
        model = rg.LinearModel(rng.normal(size=small.d))
        assert rg.llp_loss(llp, model) == pytest.approx(rg.lba_loss(lba, model), rel=1e-10)

    def test_dimension_mismatch(self, small):
        llp = ag.noisy_wtd_llp(small, 3, 2, 0.0, seed=1)
        with pytest.raises(ValueError, match="expects d"):
            rg.llp_loss(llp, rg.LinearModel(np.zeros(small.d + 1)))


class TestGradient:
    def test_zero_residual(self):
        x = np.array([[0.3, 0.1], [0.2, -0.4]])
        ds = Dataset(x, x @ np.array([1.0, -0.5]), 1.0, 1.0)
        llp = rg.instance_llp(ds)
        g = rg.grad_llp_loss(llp, rg.LinearModel([1.0, -0.5]))
        assert np.max(np.abs(g)) <= 1e-10

    def test_linear_single_bag(self, small, rng):
        llp = ag.noisy_wtd_llp(small, 1, 6, 0.0, seed=2)
        model = rg.LinearModel(rng.normal(size=small.d))
        xbar = llp.weights[0] @ llp.features[0]
        expected = -2 * (llp.agg_labels[0] - model.r @ xbar) * xbar
        np.testing.assert_allclose(rg.grad_llp_loss(llp, model), expected, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_mlp_finite_differences(self, seed):
        ds = synth_dataset(200, 8, 0.3, 3.0, 1.0, seed=seed)
        llp = ag.noisy_wtd_llp(ds, 5, 4, 0.5, seed=seed)
        model = rg.init_mlp(8, (8, 4, 1), seed)
        gen = np.random.default_rng(seed)
        model = model.with_params(gen.normal(size=model.params().size))
        g = rg.grad_llp_loss(llp, model)
        assert np.max(_rel_err(g, _fd_gradient(llp, model))) <= 1e-4


class TestMlp:
    def test_forward_convention(self):
        w1 = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, -3.0]])
        w2 = np.array([[1.0, 1.0, 0.25]])
        model = rg.MlpModel((w1, w2))
        x = np.array([[1.0, 2.0]])
        hidden = np.maximum(w1[:, :2] @ x[0] + w1[:, 2], 0)
        assert model.predict(x)[0] == pytest.approx(w2[0, :2] @ hidden + w2[0, 2])

    def test_projection(self, rng):
        model = rg.init_mlp(5, (6, 3, 1), 0).with_params(rng.normal(size=61) * 3)
        before = model.frobenius_norms()
        proj = model.project(1.5)
        after = proj.frobenius_norms()
        assert np.all(after <= np.minimum(before, 1.5) + 1e-12)
        again = proj.project(1.5)
        assert all(np.array_equal(a, b) for a, b in zip(proj.layers, again.layers))
        assert np.linalg.norm(proj.params()) <= proj.b4 + 1e-12

    def test_realizable_training(self):
        ds = synth_dataset(6000, 8, 0.0, 3.0, 1.0, seed=2)
        llp = ag.noisy_wtd_llp(ds, 500, 5, 0.0, seed=3)
        cfg = rg.TrainConfig(epochs=200, lr=1e-2, batch_size=16, seed=1)
        model = rg.fit_mlp_llp(llp, (1,), cfg)
        assert rg.mse(ds, model) <= 1e-3

    def test_wide_default_arch_runs(self, rng):
        x = rng.normal(size=(2000, 71))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        y = np.tanh(x @ rng.normal(size=71))
        ds = Dataset(x, y, 1.0, 1.0)
        llp = ag.noisy_wtd_llp(ds, 100, 8, 0.01, seed=1)
        hist = rg.TrainHistory()
        model = rg.fit_mlp_llp(llp, (128, 64, 1), rg.TrainConfig(epochs=5, batch_size=8),
                               history=hist)
        assert np.all(np.isfinite(hist.train_loss))
        assert hist.train_loss[-1] <= hist.train_loss[0]
        assert np.all(np.isfinite(model.params()))

    def test_deterministic(self, small):
        llp = ag.noisy_wtd_llp(small, 60, 5, 0.5, seed=1)
        cfg = rg.TrainConfig(epochs=4, batch_size=8, seed=3)
        a = rg.fit_mlp_llp(llp, (6, 1), cfg, frob_cap=2.0)
        b = rg.fit_mlp_llp(llp, (6, 1), cfg, frob_cap=2.0)
        assert np.array_equal(a.params(), b.params())

    def test_frobenius_cap_enforced(self, small):
        llp = ag.noisy_wtd_llp(small, 60, 5, 0.5, seed=1)
        model = rg.fit_mlp_llp(llp, (6, 1), rg.TrainConfig(epochs=3, lr=0.1, batch_size=4),
                               frob_cap=0.5)
        assert np.all(model.frobenius_norms() <= 0.5 + 1e-12)

    def test_early_stopping_keeps_best(self, small):
        llp = ag.noisy_wtd_llp(small, 50, 5, 1.0, seed=4)
        hist = rg.TrainHistory()
        cfg = rg.TrainConfig(epochs=60, lr=5e-2, batch_size=4, patience=3, seed=2)
        model = rg.fit_mlp_llp(llp, (16, 1), cfg, history=hist)
        val = llp.subset(np.arange(45, 50))
        assert rg.llp_loss(val, model) / val.m == pytest.approx(min(hist.val_loss), rel=1e-12)
        assert hist.val_loss[hist.best_epoch] == min(hist.val_loss)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self, small):
        llp = ag.noisy_wtd_llp(small, 30, 5, 0.0, seed=1)
        cfg = rg.TrainConfig(epochs=50, lr=1e300, batch_size=2)
        with pytest.raises(rg.TrainingDivergedError):
            rg.fit_mlp_llp(llp, (4, 1), cfg)

    def test_arch_must_end_in_one(self):
        with pytest.raises(ValueError):
            rg.init_mlp(3, (4, 2), 0)


class TestBounds:
    def test_unit_limit(self):
        assert rg.nn_output_bound(1.0, 2) == pytest.approx(math.sqrt(3))

    def test_hand_value(self):
        assert rg.nn_output_bound(2.0, 1) == pytest.approx(2 * math.sqrt(5))

    def test_continuity_at_one(self):
        assert rg.nn_output_bound(1 + 1e-7, 3) == pytest.approx(rg.nn_output_bound(1.0, 3), rel=1e-5)
        assert rg.nn_lipschitz_bound(1 - 1e-7, 3) == pytest.approx(rg.nn_lipschitz_bound(1.0, 3),
                                                                    rel=1e-5)

    def test_lipschitz_floor(self):
        assert rg.nn_lipschitz_bound(0.1, 4) == 4.0

    def test_sampled_output_bound(self, rng):
        k, l0 = 2.0, 2
        bound = rg.nn_output_bound(k, l0)
        for _ in range(100):
            model = rg.MlpModel((rng.normal(size=(5, 4)), rng.normal(size=(1, 6)))).project(k)
            x = rng.normal(size=(200, 3))
            x *= k * rng.uniform(0, 1, (200, 1)) ** 0.2 / np.linalg.norm(x, axis=1, keepdims=True)
            assert np.max(np.abs(model.predict(x))) <= bound


def test_mse(small):
    st_r = np.linalg.lstsq(small.features, small.labels, rcond=None)[0]
    zero = rg.LinearModel(np.zeros(small.d))
    assert rg.mse(small, zero) == pytest.approx(np.mean(small.labels ** 2))
    perfect = Dataset(small.features, small.features @ (st_r / 10), 3.0, 1.0)
    assert rg.mse(perfect, rg.LinearModel(st_r / 10)) == pytest.approx(0, abs=1e-28)


class TestSerialization:
    def test_linear(self, tmp_path):
        model = rg.LinearModel([0.1, -2.5e-17, 3.0], b3=4.0)
        rg.save_model(model, tmp_path / "m.txt")
        back = rg.load_model(tmp_path / "m.txt")
        assert np.array_equal(back.r, model.r) and back.b3 == 4.0

    def test_mlp(self, tmp_path, rng):
        model = rg.init_mlp(3, (4, 2, 1), 1, k_frob=1.5).with_params(rng.normal(size=29))
        rg.save_model(model, tmp_path / "m.txt")
        back = rg.load_model(tmp_path / "m.txt")
        assert np.array_equal(back.params(), model.params())
        assert back.k_frob == 1.5
        assert open(tmp_path / "m.txt").readline().startswith("agglab-model 1")
