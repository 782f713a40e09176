"""One-step law, mean-field directions, increment split, DI integrator."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signfed.dynamics import (HElement, constant_selection, decompose,
                              h_sample, integrate_di, lyapunov_dd,
                              repelling_selection, sign, step)
from signfed.model import ObservationMatrix, ProblemSpec, State, StepSchedule


def make_state(x, y, n=0):
    return State(np.asarray(x, dtype=np.float64),
                 np.asarray(y, dtype=np.float64), n)


class TestSign:
    def test_exact_zero_is_zero(self):
        assert sign(0.0) == 0
        assert sign(-0.0) == 0

    def test_no_epsilon_band(self):
        assert sign(5e-324) == 1
        assert sign(-5e-324) == -1

    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_odd(self, r):
        assert sign(-r) == -sign(r)


class TestStep:
    def test_hand_computed_scalar_step(self, ones5_matrix, schedule):
        # n=0: alpha = beta = 1. y(1)=0.5 > x=0.3 so x moves +1 * a_1 = +1
        st0 = make_state([0.3], [0.0, 0.5, 0.0, 0.0, 0.0])
        st1 = step(st0, 1, 2.25, ones5_matrix, schedule)
        assert st1.x[0] == 1.3
        assert st1.y[1] == 2.25  # beta_0 = 1 jumps straight to the sample
        assert st1.n == 1

    def test_only_queried_tracker_moves(self, ones5_matrix, schedule):
        st0 = make_state([0.0], [1.0, 2.0, 3.0, 4.0, 5.0])
        st1 = step(st0, 2, 0.0, ones5_matrix, schedule)
        assert st1.y[0] == 1.0 and st1.y[1] == 2.0
        assert st1.y[3] == 4.0 and st1.y[4] == 5.0
        assert st1.y[2] != 3.0

    def test_tie_freezes_x_but_not_y(self, ones5_matrix, schedule):
        st0 = make_state([0.7], [0.0, 0.7, 0.0, 0.0, 0.0])
        st1 = step(st0, 1, 9.0, ones5_matrix, schedule)
        assert st1.x[0] == 0.7
        assert st1.y[1] == 9.0

    def test_input_state_not_mutated(self, ones5_matrix, schedule):
        st0 = make_state([0.1], np.zeros(5))
        step(st0, 0, 1.0, ones5_matrix, schedule)
        assert st0.x[0] == 0.1 and st0.n == 0

    def test_stepsize_uses_counter(self, ones5_matrix, schedule):
        # same state at n=0 vs n=63: displacement scales by alpha ratio
        lo = step(make_state([0.0], [1.0, 0, 0, 0, 0], 0), 0, 1.0,
                  ones5_matrix, schedule)
        hi = step(make_state([0.0], [1.0, 0, 0, 0, 0], 63), 0, 1.0,
                  ones5_matrix, schedule)
        assert lo.x[0] == schedule.alpha(0)
        assert hi.x[0] == schedule.alpha(63)

    def test_validation(self, ones5_matrix, schedule):
        st0 = make_state([0.0], np.zeros(5))
        with pytest.raises(ValueError):
            step(st0, 5, 1.0, ones5_matrix, schedule)
        with pytest.raises(ValueError):
            step(st0, 0, float("inf"), ones5_matrix, schedule)
        with pytest.raises(ValueError):
            step(make_state([0.0, 0.0], np.zeros(5)), 0, 1.0,
                 ones5_matrix, schedule)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_x_moves_along_queried_row_only(self, seed, fig1_matrix):
        schedule = StepSchedule(0.8, 0.6)
        rng = np.random.default_rng(seed)
        st0 = make_state(rng.standard_normal(2), rng.standard_normal(5),
                         int(rng.integers(0, 100)))
        i = int(rng.integers(0, 5))
        st1 = step(st0, i, float(rng.standard_normal()), fig1_matrix, schedule)
        row = fig1_matrix.row(i)
        # x' is x + (alpha * s) * a_i componentwise, bit for bit
        from signfed.dynamics import _dot
        s = sign(float(st0.y[i]) - _dot(row.tolist(), st0.x.tolist()))
        t = schedule.alpha(st0.n) * s
        expect = np.array([xj + t * aj for xj, aj in zip(st0.x, row)]) \
            if s else st0.x
        assert np.array_equal(st1.x, expect)


class TestHSample:
    def test_honest_signs_forced(self, fig1_matrix, fig1_spec):
        x = np.array([0.0, 0.0])
        el = h_sample(x, fig1_matrix, fig1_spec, adversary_lambdas=[0.5])
        ey = fig1_spec.expected_y(fig1_matrix)
        for i in (0, 1, 2, 4):
            assert el.lambdas[i] == np.sign(ey[i])
        assert el.lambdas[3] == 0.5

    def test_theta_formula(self, fig1_matrix, fig1_spec):
        x = np.array([0.25, -1.0])
        el = h_sample(x, fig1_matrix, fig1_spec, adversary_lambdas=[-1.0])
        want = (fig1_matrix.matrix.T @ el.lambdas) / 5.0
        assert np.array_equal(el.theta, want)

    def test_tie_coordinate_defaults_to_zero(self, ones5_matrix):
        spec = ProblemSpec(mu=np.array([1.0]), covariance=np.array([[1.0]]))
        el = h_sample(np.array([1.0]), ones5_matrix, spec)
        assert np.all(el.lambdas == 0.0)

    def test_tie_override(self, ones5_matrix):
        spec = ProblemSpec(mu=np.array([1.0]), covariance=np.array([[1.0]]))
        el = h_sample(np.array([1.0]), ones5_matrix, spec,
                      tie_lambdas={2: -0.75})
        assert el.lambdas[2] == -0.75

    def test_lambda_bounds_enforced(self, fig1_matrix, fig1_spec):
        with pytest.raises(ValueError, match=r"\[-1, 1\]"):
            h_sample(np.zeros(2), fig1_matrix, fig1_spec,
                     adversary_lambdas=[1.5])
        with pytest.raises(ValueError, match="adversary values"):
            h_sample(np.zeros(2), fig1_matrix, fig1_spec,
                     adversary_lambdas=[0.5, 0.5])


class TestDecompose:
    def test_components_match_direct_formulas(self, fig1_matrix, fig1_spec,
                                              schedule):
        rng = np.random.default_rng(11)
        st0 = make_state(rng.standard_normal(2), rng.standard_normal(5), 9)
        dec = decompose(st0, 4, fig1_matrix, fig1_spec, schedule)
        mat = fig1_matrix.matrix
        ax = mat @ st0.x
        ey = fig1_spec.expected_y(fig1_matrix)
        s_cur = np.sign(st0.y - ax)
        s_true = np.sign(ey - ax)
        g = np.zeros(2)
        b = np.zeros(2)
        for i in range(5):
            if i in fig1_spec.adversary_set:
                g += mat[i] * s_cur[i]
            else:
                g += mat[i] * s_true[i]
                b += mat[i] * (s_cur[i] - s_true[i])
        assert np.allclose(dec.g, g / 5.0, rtol=0, atol=1e-15)
        assert np.allclose(dec.b, b / 5.0, rtol=0, atol=1e-15)
        assert np.allclose(dec.noise, mat[4] * s_cur[4] - (dec.g + dec.b),
                           rtol=0, atol=0)
        assert dec.alpha_n == schedule.alpha(9)

    def test_bias_vanishes_when_trackers_converged(self, ones5_matrix,
                                                   ones5_spec, schedule):
        # y already equals E[Y] on honest nodes: realized signs are true
        ey = ones5_spec.expected_y(ones5_matrix)
        st0 = make_state([0.2], ey)
        dec = decompose(st0, 0, ones5_matrix, ones5_spec, schedule)
        assert np.all(dec.b == 0.0)

    def test_enumerated_conditional_mean_is_zero(self, fig1_matrix,
                                                 fig1_spec, schedule):
        # the node draw is uniform, so averaging the noise over all p
        # possible draws must cancel to float roundoff
        rng = np.random.default_rng(3)
        for _ in range(50):
            st0 = make_state(rng.standard_normal(2), rng.standard_normal(5),
                             int(rng.integers(0, 1000)))
            acc = np.zeros(2)
            for i in range(5):
                acc += decompose(st0, i, fig1_matrix, fig1_spec,
                                 schedule).noise
            assert np.all(np.abs(acc / 5.0) < 1e-12)

    def test_reconstruct_is_bit_exact_on_scalar_instance(self, ones5_matrix,
                                                         ones5_spec, schedule):
        # d=1: applying alpha * ((g + b) + noise) on top of x_n lands on
        # x_{n+1} with zero tolerance (the inner sum restores the
        # realized direction exactly on this instance)
        rng = np.random.default_rng(21)
        st0 = make_state([0.0], rng.standard_normal(5))
        for n in range(500):
            i = int(rng.integers(0, 5))
            dec = decompose(st0, i, ones5_matrix, ones5_spec, schedule)
            st1 = step(st0, i, float(rng.standard_normal()), ones5_matrix,
                       schedule)
            assert np.array_equal(st0.x + dec.reconstruct(), st1.x)
            st0 = st1


class TestLyapunov:
    def test_directional_derivative_formula(self):
        x = np.array([2.0, 1.0])
        mu = np.array([0.5, -0.5])
        th = np.array([-0.25, 0.1])
        assert lyapunov_dd(x, th, mu) == float((x - mu) @ th)

    def test_accepts_h_element(self, fig1_matrix, fig1_spec):
        el = h_sample(np.zeros(2), fig1_matrix, fig1_spec,
                      adversary_lambdas=[0.0])
        assert lyapunov_dd(np.zeros(2), el, fig1_spec.mu) == pytest.approx(
            float(-fig1_spec.mu @ el.theta))

    def test_descent_under_worst_case_adversary(self, ones5_matrix,
                                                ones5_spec):
        # margin (3 - 2)/5 = 0.2: every admissible direction strictly
        # decreases V away from mu
        sel = repelling_selection(ones5_matrix, ones5_spec)
        rng = np.random.default_rng(6)
        for _ in range(100):
            x = rng.standard_normal(1) * 3.0
            if abs(float(x[0]) - 1.0) < 1e-9:
                continue
            lam = sel(0, x)
            el = h_sample(x, ones5_matrix, ones5_spec, lam)
            dd = lyapunov_dd(x, el, ones5_spec.mu)
            assert dd <= -0.2 * abs(float(x[0]) - 1.0) + 1e-9


class TestSelections:
    def test_repelling_pushes_away_from_mu(self, fig1_matrix, fig1_spec):
        sel = repelling_selection(fig1_matrix, fig1_spec)
        x = np.array([2.0, 1.0])
        lam = sel(0, x)
        assert lam.shape == (1,)
        assert lam[0] == np.sign(fig1_matrix.row(3) @ (x - fig1_spec.mu))

    def test_constant_selection_ignores_state(self):
        sel = constant_selection([1.0, -1.0])
        assert np.array_equal(sel(0, np.zeros(2)), [1.0, -1.0])
        assert np.array_equal(sel(99, np.ones(2)), [1.0, -1.0])


class TestIntegrateDI:
    def test_path_shape_and_start(self, ones5_matrix, ones5_spec):
        path = integrate_di(np.array([0.0]), ones5_matrix, ones5_spec,
                            repelling_selection(ones5_matrix, ones5_spec),
                            dt=0.01, steps=50)
        assert path.shape == (51, 1)
        assert path[0, 0] == 0.0

    def test_honest_only_decay_rate_is_one(self, ones5_matrix):
        # all five nodes honest: |x - mu| shrinks at (5 - 0)/5 = 1 per
        # unit time, so it first dips under 0.01 at t = (1 - 0.01)/1
        spec = ProblemSpec(mu=np.array([1.0]), covariance=np.array([[1.0]]))
        path = integrate_di(np.array([0.0]), ones5_matrix, spec,
                            constant_selection([]), dt=0.01, steps=150)
        errs = np.abs(path[:, 0] - 1.0)
        hit = int(np.argmax(errs <= 0.01))
        assert abs(hit * 0.01 - 0.99) <= 0.02

    def test_worst_case_pair_decay_rate(self, ones5_matrix, ones5_spec):
        # two repelling adversaries: net rate (3 - 2)/5 = 0.2, so the
        # error first dips under 0.01 at t = (1 - 0.01)/0.2 = 4.95
        sel = repelling_selection(ones5_matrix, ones5_spec)
        path = integrate_di(np.array([0.0]), ones5_matrix, ones5_spec, sel,
                            dt=0.01, steps=600)
        errs = np.abs(path[:, 0] - 1.0)
        hit = int(np.argmax(errs <= 0.01))
        assert abs(hit * 0.01 - 4.95) <= 0.02

    def test_triple_diverges_at_mirrored_rate(self, ones5_matrix):
        spec = ProblemSpec(mu=np.array([1.0]), covariance=np.array([[1.0]]),
                           adversary_set=frozenset({2, 3, 4}), m_bound=3)
        sel = repelling_selection(ones5_matrix, spec)
        path = integrate_di(np.array([0.5]), ones5_matrix, spec, sel,
                            dt=0.01, steps=400)
        errs = np.abs(path[:, 0] - 1.0)
        # growth (3 - 2)/5 = 0.2 per unit, starting from 0.5
        assert errs[-1] == pytest.approx(0.5 + 0.2 * 4.0, abs=0.02)

    def test_bad_dt_rejected(self, ones5_matrix, ones5_spec):
        with pytest.raises(ValueError):
            integrate_di(np.array([0.0]), ones5_matrix, ones5_spec,
                         repelling_selection(ones5_matrix, ones5_spec),
                         dt=0.0, steps=10)
