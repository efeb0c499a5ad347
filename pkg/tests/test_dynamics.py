"""Gaussian dynamics ensemble: losses, training, elites, prediction, rollouts, persistence."""

from copy import deepcopy

import numpy as np
import pytest

from mombo.dynamics import (
    EnsembleConfig,
    gaussian_nll,
    load_ensemble,
    predict,
    rollout,
    sample_transitions,
    save_ensemble,
    select_elites,
    soft_clamp,
    train_ensemble,
)
from mombo.errors import ConfigError
from mombo.gaussmm import DiagonalGaussian
from mombo.nncore import rng_stream
from mombo.transitions import TransitionBatch

A = np.array([[0.9, 0.1], [-0.2, 0.8]])
B = np.array([[0.0], [0.5]])


def _linear_data(n, seed):
    rng = rng_stream(seed, 0)
    s = rng.uniform(-1, 1, (n, 2))
    a = rng.uniform(-1, 1, (n, 1))
    s_next = s @ A.T + a @ B.T
    r = 0.5 * s[:, 0] - 0.25 * a[:, 0]
    return TransitionBatch.real(s, a, r, s_next, np.zeros(n))


@pytest.fixture(scope="module")
def linear_model():
    cfg = EnsembleConfig(n_ensemble=3, n_elite=2, hidden=(32, 32), weight_decay=(0.0, 0.0, 0.0), max_epochs=60)
    return train_ensemble(_linear_data(4000, 0), cfg, seed=0)


class TestLosses:
    def test_nll_unit_variance_zero_residual(self):
        assert gaussian_nll(np.zeros(3), np.zeros(3), np.zeros(3)) == pytest.approx(np.full(3, 0.9189385), abs=1e-7)

    def test_nll_matches_log_density(self):
        from scipy import stats

        y, m, lv = 0.7, -0.2, np.log(0.3)
        assert gaussian_nll(y, m, lv) == pytest.approx(-stats.norm.logpdf(y, m, np.sqrt(0.3)), rel=1e-12)

    def test_soft_clamp_range_and_derivative(self):
        x = np.linspace(-40, 40, 4001)
        y, dy = soft_clamp(x, -10.0, 0.5)
        assert np.all(y >= -10.0) and np.all(y <= 0.5)
        h = 1e-6
        num = (soft_clamp(x + h, -10.0, 0.5)[0] - soft_clamp(x - h, -10.0, 0.5)[0]) / (2 * h)
        np.testing.assert_allclose(dy, num, atol=1e-7)

    def test_soft_clamp_passes_interior(self):
        y, _ = soft_clamp(np.array([-4.0]), -10.0, 0.5)
        assert y[0] == pytest.approx(-4.0, abs=0.02)


class TestElites:
    def test_lowest_losses(self):
        assert select_elites([3.0, 1.0, 2.0, 0.5, 4.0], 3) == [1, 2, 3]

    def test_ties_go_to_lower_index(self):
        assert select_elites([1.0, 1.0, 1.0, 0.0], 2) == [0, 3]
        assert select_elites([1.0, 1.0, 1.0, 0.0], 2) == select_elites([1.0, 1.0, 1.0, 0.0], 2)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            EnsembleConfig(n_ensemble=2, n_elite=3)
        with pytest.raises(ConfigError):
            EnsembleConfig(hidden=(8,), weight_decay=(0.0,))


class TestTraining:
    def test_linear_system_recovered(self, linear_model):
        test = _linear_data(1000, 1)
        for e in linear_model.elites:
            pred = predict(linear_model, e, test.s, test.a)
            err = pred.mean - np.c_[test.s_next, test.r]
            assert np.sqrt(np.mean(err**2)) <= 0.05
            assert np.all(pred.var <= 0.1)

    def test_elite_count_and_losses(self, linear_model):
        assert len(linear_model.elites) == 2
        assert len(linear_model.val_nll) == 3 and np.all(np.isfinite(linear_model.val_nll))

    def test_variance_clamp(self, linear_model):
        rng = rng_stream(2, 0)
        s, a = rng.uniform(-20, 20, (500, 2)), rng.uniform(-1, 1, (500, 1))
        v = predict(linear_model, linear_model.elites[0], s, a).var
        assert np.all(v >= np.exp(-10.0)) and np.all(v <= np.exp(0.5))

    def test_standardized_residuals_unbiased(self, linear_model):
        rng = rng_stream(3, 0)
        s = rng.uniform(-1, 1, (2000, 2))
        a = rng.uniform(-1, 1, (2000, 1))
        noisy = s @ A.T + a @ B.T + 0.1 * rng.standard_normal((2000, 2))
        # a longer patience than the default keeps noisy validation from stopping the fit early
        cfg = EnsembleConfig(n_ensemble=1, n_elite=1, hidden=(32, 32), max_epochs=200, patience=20)
        model = train_ensemble(TransitionBatch.real(s, a, s[:, 0], noisy, np.zeros(2000)), cfg, seed=3)
        s2 = rng.uniform(-1, 1, (2000, 2))
        a2 = rng.uniform(-1, 1, (2000, 1))
        y2 = s2 @ A.T + a2 @ B.T + 0.1 * rng.standard_normal((2000, 2))
        pred = predict(model, 0, s2, a2)
        z = (y2 - pred.mean[:, :2]) / pred.std[:, :2]
        assert np.all(np.abs(z.mean(axis=0)) <= 0.1)

    def test_repeated_transition(self):
        n = 400
        s, a = np.tile([[0.2, -0.1]], (n, 1)), np.tile([[0.5]], (n, 1))
        data = TransitionBatch.real(s, a, np.full(n, 0.3), np.tile([[0.25, 0.0]], (n, 1)), np.zeros(n))
        cfg = EnsembleConfig(n_ensemble=1, n_elite=1, hidden=(8,), weight_decay=(0.0, 0.0), max_epochs=400,
                             patience=400, lr=1e-2)
        model = train_ensemble(data, cfg, seed=0)
        pred = predict(model, 0, s[:1], a[:1])
        np.testing.assert_allclose(pred.mean[0], [0.25, 0.0, 0.3], atol=1e-3)
        # the target is constant, so the variance sinks to the bottom of the clamp
        assert np.all(pred.var[0] <= np.exp(-9.0))

    def test_needs_validation_split(self):
        with pytest.raises(ConfigError):
            train_ensemble(_linear_data(1, 0))

    def test_deterministic(self):
        cfg = EnsembleConfig(n_ensemble=2, n_elite=1, hidden=(8,), weight_decay=(0.0, 0.0), max_epochs=2)
        m1 = train_ensemble(_linear_data(300, 4), cfg, seed=5)
        m2 = train_ensemble(_linear_data(300, 4), cfg, seed=5)
        for p, q in zip(m1.members, m2.members):
            for x, y in zip(p.arrays(), q.arrays()):
                np.testing.assert_array_equal(x, y)


class TestPredict:
    def test_rejects_non_elite(self, linear_model):
        bad = next(i for i in range(3) if i not in linear_model.elites)
        with pytest.raises(ValueError, match="not an elite"):
            predict(linear_model, bad, np.zeros((1, 2)), np.zeros((1, 1)))

    def test_save_load_round_trip(self, linear_model, tmp_path):
        path = tmp_path / "dyn.ckpt"
        save_ensemble(linear_model, path)
        back = load_ensemble(path)
        assert back.elites == linear_model.elites
        s, a = np.array([[0.1, 0.2]]), np.array([[0.3]])
        e = linear_model.elites[0]
        np.testing.assert_array_equal(predict(back, e, s, a).mean, predict(linear_model, e, s, a).mean)
        np.testing.assert_array_equal(predict(back, e, s, a).var, predict(linear_model, e, s, a).var)


class TestRollout:
    def test_zero_variance_single_elite(self, linear_model, monkeypatch):
        import mombo.dynamics as dyn

        real_predict = dyn.predict

        def exact(model, member, s, a):
            b = real_predict(model, member, s, a)
            return DiagonalGaussian(b.mean, np.zeros_like(b.var))

        monkeypatch.setattr(dyn, "predict", exact)
        model = deepcopy(linear_model)
        model.elites = [model.elites[0]]
        starts = np.array([[0.1, 0.2], [-0.3, 0.4]])
        policy = lambda s, rng: np.full((len(s), 1), 0.5)  # noqa: E731
        out = rollout(model, policy, starts, 1, rng_stream(0, 1))
        pred = exact(model, model.elites[0], starts, np.full((2, 1), 0.5))
        np.testing.assert_array_equal(out.s_next, pred.mean[:, :2])
        np.testing.assert_array_equal(out.r, pred.mean[:, 2])
        np.testing.assert_array_equal(out.var_s_next, 0.0)

    def test_accounting_and_stored_variance(self, linear_model):
        rng = rng_stream(0, 2)
        starts = rng.uniform(-1, 1, (50, 2))
        policy = lambda s, r: r.uniform(-1, 1, (len(s), 1))  # noqa: E731
        term = lambda s: np.abs(s[:, 0]) > 0.9  # noqa: E731
        out = rollout(linear_model, policy, starts, 5, rng, terminal=term)
        assert len(out) <= 50 * 5
        assert np.all(out.var_s_next > 0) and np.all(out.var_r > 0)
        # every stored variance belongs to one of the elites evaluated at that (s, a)
        for i in range(0, len(out), 17):
            cands = [predict(linear_model, e, out.s[i : i + 1], out.a[i : i + 1]) for e in linear_model.elites]
            hit = [np.allclose(c.var[0, :2], out.var_s_next[i], rtol=1e-12, atol=0)
                   and np.allclose(c.mean[0, :2], out.s_next_mean[i], rtol=1e-12, atol=1e-14) for c in cands]
            assert any(hit)

    def test_deterministic(self, linear_model):
        starts = np.zeros((20, 2))
        policy = lambda s, r: r.uniform(-1, 1, (len(s), 1))  # noqa: E731
        a = rollout(linear_model, policy, starts, 3, rng_stream(9, 0))
        b = rollout(linear_model, policy, starts, 3, rng_stream(9, 0))
        np.testing.assert_array_equal(a.s_next, b.s_next)
        np.testing.assert_array_equal(a.r, b.r)

    def test_sample_transitions_one_row_each(self, linear_model):
        s = np.zeros((7, 2))
        out = sample_transitions(linear_model, s, np.zeros((7, 1)), rng_stream(0, 3))
        assert len(out) == 7 and not out.is_real.any()

    def test_k_must_be_positive(self, linear_model):
        with pytest.raises(ConfigError):
            rollout(linear_model, lambda s, r: np.zeros((len(s), 1)), np.zeros((1, 2)), 0, rng_stream(0, 4))

