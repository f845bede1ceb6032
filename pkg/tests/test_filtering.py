import numpy as np
import pytest

from odefilter import (
    GaussState,
    ObservationModel,
    SolverConfig,
    discrete_transition,
    get_problem,
    interpolate,
    make_iwp,
    predict,
    sample_posterior,
    smooth,
    solve,
    update,
)
from odefilter.filtering import SingularUpdateError, SolutionPath


def _rand_psd(rng, n, rank=None):
    m = rng.standard_normal((n, rank or n))
    return m @ m.T + 1e-10 * np.eye(n)


class TestPredict:
    def test_zero_state_gets_q(self):
        m = make_iwp(2, [1.0], 1)
        tr = discrete_transition(m, 0.4)
        out = predict(GaussState(0.0, np.zeros(3), np.zeros((3, 3))), tr)
        assert np.array_equal(out.mean, np.zeros(3))
        np.testing.assert_allclose(out.cov, tr.Q, atol=1e-16)
        assert out.t == 0.4

    def test_hand_mean_product(self):
        tr = discrete_transition(make_iwp(1, [1.0], 1), 0.3)
        out = predict(GaussState(0.0, np.array([0.1, 0.27]), np.zeros((2, 2))), tr)
        np.testing.assert_allclose(out.mean, [0.181, 0.27], rtol=1e-15)

    def test_two_small_steps_equal_one_big(self):
        m = make_iwp(2, [1.0], 1)
        rng = np.random.default_rng(3)
        state = GaussState(0.0, rng.standard_normal(3), _rand_psd(rng, 3))
        via_two = predict(predict(state, discrete_transition(m, 0.2)), discrete_transition(m, 0.2))
        via_one = predict(state, discrete_transition(m, 0.4))
        np.testing.assert_allclose(via_two.mean, via_one.mean, atol=1e-12)
        np.testing.assert_allclose(via_two.cov, via_one.cov, atol=1e-12)

    def test_multidimensional_blocks(self):
        m = make_iwp(1, [1.0, 4.0], 2)
        from odefilter import transition_blocks

        blocks = transition_blocks(m, 0.5)
        state = GaussState(0.0, np.array([1.0, 0.0, 2.0, 0.0]), np.zeros((4, 4)))
        out = predict(state, blocks)
        np.testing.assert_allclose(out.cov[:2, :2], blocks[0].Q)
        np.testing.assert_allclose(out.cov[2:, 2:], blocks[1].Q)
        assert np.all(out.cov[:2, 2:] == 0.0)


class TestUpdate:
    def _predicted(self, h=0.3):
        m = make_iwp(1, [1.0], 1)
        tr = discrete_transition(m, h)
        return predict(GaussState(0.0, np.array([0.1, 0.27]), np.zeros((2, 2))), tr)

    def test_zero_residual_keeps_mean_shrinks_cov(self):
        pred = self._predicted()
        out, resid = update(pred, [0.27], ObservationModel(1, 0.0))
        assert resid[0] == 0.0
        np.testing.assert_allclose(out.mean, pred.mean, atol=1e-16)
        assert out.cov[1, 1] < pred.cov[1, 1]

    def test_logistic_hand_value(self):
        # One step of size 0.3 from the exactly-known start of the logistic
        # problem; updating on z = f(0.181) = 0.444717 lands on the
        # trapezoid value 0.181 + 0.15 * (0.444717 - 0.27).
        pred = self._predicted()
        z = 3 * 0.181 * (1 - 0.181)
        assert z == pytest.approx(0.444717, abs=1e-9)
        out, _ = update(pred, [z], ObservationModel(1, 0.0))
        assert out.mean[0] == pytest.approx(0.20720755, abs=1e-10)
        assert out.cov[0, 0] == pytest.approx(0.3**3 / 12, rel=1e-12)

    def test_exact_observation_is_interpolated(self):
        rng = np.random.default_rng(7)
        state = GaussState(0.0, rng.standard_normal(3), _rand_psd(rng, 3))
        out, _ = update(state, [1.23], ObservationModel(1, 0.0))
        assert out.mean[1] == pytest.approx(1.23, abs=1e-14)
        assert abs(out.cov[1, 1]) <= 1e-12 * np.max(np.abs(state.cov))

    def test_repeated_update_idempotent(self):
        rng = np.random.default_rng(11)
        state = GaussState(0.0, rng.standard_normal(3), _rand_psd(rng, 3))
        once, _ = update(state, [0.5], ObservationModel(1, 0.0))
        twice, _ = update(once, [0.5], ObservationModel(1, 0.0))
        np.testing.assert_allclose(twice.mean, once.mean, atol=1e-12)
        np.testing.assert_allclose(twice.cov, once.cov, atol=1e-12)

    def test_joseph_matches_plain_form(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            state = GaussState(0.0, rng.standard_normal(4), _rand_psd(rng, 4))
            for noise in (0.0, 0.3):
                a, _ = update(state, [0.2, -0.4], ObservationModel(1, noise), form="joseph")
                b, _ = update(state, [0.2, -0.4], ObservationModel(1, noise), form="plain")
                scale = np.max(np.abs(a.cov))
                np.testing.assert_allclose(a.cov, b.cov, atol=1e-10 * scale)
                np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)

    def test_degenerate_direction_skipped(self):
        # Fully-known state: no innovation variance, update is a no-op.
        state = GaussState(0.0, np.array([1.0, 2.0]), np.zeros((2, 2)))
        out, resid = update(state, [5.0], ObservationModel(1, 0.0))
        np.testing.assert_array_equal(out.mean, state.mean)
        assert resid[0] == 3.0

    def test_negative_innovation_raises(self):
        bad = GaussState(0.0, np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0]]))
        with pytest.raises(SingularUpdateError):
            update(bad, [0.1], ObservationModel(1, 0.0))

    def test_dimension_checks(self):
        state = GaussState(0.0, np.zeros(3), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            update(state, [1.0, 2.0], ObservationModel(1, 0.0))
        with pytest.raises(ValueError):
            update(state, [1.0], ObservationModel(5, 0.0))


def _logistic_path(h=0.3, q=2):
    problem = get_problem("logistic")
    cfg = SolverConfig(q=q, fixed_step=h, sigma_mode="global_ml")
    return solve(problem, cfg, make_iwp(q, [1.0], 1)).path


class TestSmooth:
    def test_single_knot_path(self):
        m = make_iwp(1, [1.0], 1)
        path = SolutionPath(model=m)
        state = GaussState(0.0, np.array([1.0, 0.0]), np.eye(2))
        path.append(state, state, None)
        smooth(path)
        assert path.smoothed[0] is state

    def test_empty_path_rejected(self):
        with pytest.raises(ValueError):
            smooth(SolutionPath(model=make_iwp(1, [1.0], 1)))

    def test_zero_covariance_means_unchanged(self):
        m = make_iwp(1, [1.0], 1)
        tr = discrete_transition(m, 0.5)
        path = SolutionPath(model=m)
        s0 = GaussState(0.0, np.array([1.0, 2.0]), np.zeros((2, 2)))
        path.append(s0, s0, None)
        pred = predict(s0, tr)
        s1 = GaussState(0.5, np.array([2.5, 3.0]), np.zeros((2, 2)))
        path.append(pred, s1, 0.5, m.sigma2)
        smooth(path)
        np.testing.assert_array_equal(path.smoothed[0].mean, s0.mean)
        np.testing.assert_array_equal(path.smoothed[1].mean, s1.mean)

    def test_last_knot_identical_and_idempotent(self):
        path = _logistic_path()
        smooth(path)
        assert path.smoothed[-1] is path.filtered[-1]
        before = path.smoothed
        smooth(path)
        assert path.smoothed is before

    def test_smoothed_covariances_psd_and_no_larger(self):
        path = smooth(_logistic_path())
        for filt, sm in zip(path.filtered, path.smoothed):
            scale = max(np.max(np.abs(filt.cov)), 1e-30)
            assert np.linalg.eigvalsh(sm.cov).min() >= -1e-10 * scale
            assert np.all(np.diag(sm.cov) <= np.diag(filt.cov) + 1e-10 * scale)

    def test_smoothed_interpolant_continuous_across_knots(self):
        path = smooth(_logistic_path())
        delta = 1e-12
        for i in range(1, len(path.knots) - 1):
            t = path.knots[i]
            lo = interpolate(path, t - delta)
            hi = interpolate(path, t + delta)
            assert np.max(np.abs(lo.mean - hi.mean)) < 1e-10

    def test_exact_polynomial_reproduced(self):
        # Polynomial of degree within the prior order, conditioned on exact
        # derivative readings from an exactly-known start: filtering and
        # smoothing keep every knot exact.
        q = 3
        m = make_iwp(q, [1.0], 1)
        coef = np.array([1.0, 2.0, 3.0, 0.5])  # p(t) = 1 + 2t + 3t^2 + t^3/2

        def taylor(t):
            p = np.polynomial.polynomial
            return np.array([p.polyval(t, p.polyder(coef, k)) for k in range(q + 1)])

        h = 0.25
        tr = discrete_transition(m, h)
        path = SolutionPath(model=m)
        state = GaussState(0.0, taylor(0.0), np.zeros((q + 1, q + 1)))
        path.append(state, state, None)
        for n in range(1, 7):
            pred = predict(state, tr)
            z = taylor(n * h)[1]
            state, resid = update(pred, [z], ObservationModel(1, 0.0))
            path.append(pred, state, h, m.sigma2)
            assert abs(resid[0]) < 1e-10
        smooth(path)
        for n, sm in enumerate(path.smoothed):
            np.testing.assert_allclose(sm.mean, taylor(n * h), rtol=0, atol=1e-10)


class TestSamplePosterior:
    def test_zero_covariance_samples_equal_mean(self):
        m = make_iwp(1, [1.0], 1)
        path = SolutionPath(model=m)
        s0 = GaussState(0.0, np.array([1.0, 2.0]), np.zeros((2, 2)))
        path.append(s0, s0, None)
        pred = predict(s0, discrete_transition(m, 0.5))
        s1 = GaussState(0.5, np.array([2.0, 2.0]), np.zeros((2, 2)))
        path.append(pred, s1, 0.5, m.sigma2)
        smooth(path)
        draws = sample_posterior(path, seed=0, count=4)
        for j in range(4):
            np.testing.assert_allclose(draws[j, 0], s0.mean, atol=1e-12)
            np.testing.assert_allclose(draws[j, 1], s1.mean, atol=1e-12)

    def test_same_seed_bitwise_identical(self):
        path = smooth(_logistic_path())
        a = sample_posterior(path, seed=123, count=5)
        b = sample_posterior(path, seed=123, count=5)
        assert np.array_equal(a, b)

    def test_single_knot_monte_carlo_covariance(self):
        m = make_iwp(1, [1.0], 1)
        path = SolutionPath(model=m)
        cov = np.array([[2.0, 0.3], [0.3, 0.5]])
        state = GaussState(0.0, np.array([1.0, -1.0]), cov)
        path.append(state, state, None)
        smooth(path)
        draws = sample_posterior(path, seed=2024, count=10_000)[:, 0, :]
        emp = np.cov(draws.T)
        assert np.max(np.abs(emp - cov)) <= 0.05 * np.max(np.abs(cov))

    def test_requires_smoothing_and_positive_count(self):
        path = _logistic_path()
        with pytest.raises(ValueError):
            sample_posterior(path, seed=0, count=0)
        path.smoothed = None
        with pytest.raises(ValueError):
            sample_posterior(path, seed=0, count=1)

    def test_sample_mean_approaches_smoothed_mean(self):
        path = smooth(_logistic_path())
        draws = sample_posterior(path, seed=5, count=4000)
        sm = np.array([s.mean for s in path.smoothed])
        stds = np.array([np.sqrt(np.clip(np.diag(s.cov), 1e-30, None)) for s in path.smoothed])
        err = np.abs(draws.mean(axis=0) - sm)
        assert np.all(err <= 5 * stds / np.sqrt(4000) + 1e-12)


class TestInterpolate:
    def test_at_knot_returns_stored_state(self):
        path = smooth(_logistic_path())
        for i, t in enumerate(path.knots):
            assert interpolate(path, t) is path.smoothed[i]

    def test_outside_domain(self):
        path = smooth(_logistic_path())
        with pytest.raises(ValueError):
            interpolate(path, -0.5)
        with pytest.raises(ValueError):
            interpolate(path, 2.0)
        out = interpolate(path, 2.0, allow_extrapolation=True)
        assert out.t == 2.0 and np.isfinite(out.mean).all()

    def test_conditional_bridge_oracle(self):
        # Zero covariance at both knots: the interpolant must match the
        # prior bridge conditioned on both endpoint states, computed here
        # by explicit joint-Gaussian conditioning.
        q = 2
        m = make_iwp(q, [1.0], 1)
        h = 0.8
        tr = discrete_transition(m, h)
        x0 = np.array([1.0, -0.5, 0.2])
        x1 = np.array([0.7, 0.1, -0.3])
        path = SolutionPath(model=m)
        s0 = GaussState(0.0, x0, np.zeros((3, 3)))
        path.append(s0, s0, None)
        pred = predict(s0, tr)
        path.append(pred, GaussState(h, x1, np.zeros((3, 3))), h, m.sigma2)
        smooth(path)

        t = 0.3
        got = interpolate(path, t)
        a1 = discrete_transition(m, t)
        a2 = discrete_transition(m, h - t)
        mid_mean = a1.A @ x0
        mid_cov = a1.Q
        cross = mid_cov @ a2.A.T
        end_cov = a2.A @ mid_cov @ a2.A.T + a2.Q
        gain = cross @ np.linalg.inv(end_cov)
        want_mean = mid_mean + gain @ (x1 - a2.A @ mid_mean)
        want_cov = mid_cov - gain @ cross.T
        np.testing.assert_allclose(got.mean, want_mean, atol=1e-10)
        np.testing.assert_allclose(got.cov, want_cov, atol=1e-10)

    def test_mean_continuous_in_time(self):
        path = smooth(_logistic_path())
        t = 0.45
        base = interpolate(path, t).mean
        for delta in (1e-6, 1e-8):
            drift = np.max(np.abs(interpolate(path, t + delta).mean - base))
            assert drift <= 50.0 * delta + 1e-12
