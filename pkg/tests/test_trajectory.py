import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import oracles
from hrmhmc.diagnostics import mcse
from hrmhmc.experiments import build_metric, oracle_funnel_phi
from hrmhmc.integrator import Integrator, PhasePoint
from hrmhmc.model import ContractViolation, Funnel, Gaussian
from hrmhmc.trajectory import (Trajectory, Workspace, check_stopping, check_uturn,
                               check_uturn_generalized, expand, nuts_transition,
                               replay_select, replay_weights, static_transition)


def gaussian_integrator(dim=2):
    model = Gaussian(dim)
    metric = build_metric(model, "diagonal")
    return Integrator(model, metric, metric.init_phi())


def start(integ, theta, p):
    z = PhasePoint(np.asarray(theta, float), np.asarray(p, float))
    return Trajectory.start(z, integ.hamiltonian(z))


def flat_trajectory(L, dim=2, energy=0.0):
    theta = np.outer(np.arange(L, dtype=float), np.ones(dim))
    return Trajectory(theta, np.ones((L, dim)), np.full(L, energy))


# ----------------------------------------------------------------------------
# U-turn rules


def test_uturn_examples():
    assert not check_uturn([0, 0], [1, 0], [1, 0], [1, 0])
    assert check_uturn([0, 0], [1, 0], [1, 0], [-1, 0])
    # zero projection is not a U-turn
    assert not check_uturn([0, 0], [1, 0], [1, 0], [0, 1])


def test_generalized_uturn_agrees_with_euclidean_on_short_segments():
    integ = gaussian_integrator(3)
    rng = np.random.default_rng(0)
    eps = 0.01
    for _ in range(1000):
        z0 = PhasePoint(rng.standard_normal(3), rng.standard_normal(3))
        z1 = integ.step(z0, eps)
        velocities = np.vstack([z0.p, z1.p])  # unit mass
        assert (check_uturn_generalized(velocities, z0.p, z1.p)
                == check_uturn(z0.theta, z1.theta, z0.p, z1.p))


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(0.01, 100), min_size=3, max_size=3))
def test_generalized_uturn_single_state_is_false(p, mass):
    p = np.array(p)
    assert not check_uturn_generalized(p / np.array(mass), p, p)


def test_generalized_uturn_invariant_to_momentum_negation():
    rng = np.random.default_rng(1)
    for _ in range(500):
        V = rng.standard_normal((4, 3))
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        assert check_uturn_generalized(V, a, b) == check_uturn_generalized(-V, -a, -b)


# ----------------------------------------------------------------------------
# stopping cascade


def test_equal_energies_do_not_stop():
    traj = flat_trajectory(4)
    assert check_stopping(traj, (2, 3), max_depth=10) == (False, False, False)


def test_infinite_energy_in_new_segment_diverges():
    traj = flat_trajectory(4)
    traj.energies[3] = np.inf
    assert check_stopping(traj, (2, 3)) == (True, True, True)


def test_nan_energy_counts_as_divergence():
    traj = flat_trajectory(2)
    traj.energies[1] = np.nan
    assert check_stopping(traj, (1, 1)) == (True, True, True)


def test_depth_cap_stops_without_discarding():
    traj = flat_trajectory(8)
    assert check_stopping(traj, (4, 7), max_depth=3) == (True, False, False)


def test_subtree_uturn_discards_new_segment():
    traj = flat_trajectory(8)
    traj.p[5] = -1.0   # subtree (4, 5) turns back
    assert check_stopping(traj, (4, 7)) == (True, True, False)


def test_global_uturn_keeps_new_segment():
    traj = flat_trajectory(4)
    traj.p[3] = 1.0
    traj.theta[3] = -5.0   # endpoints point back toward the start
    stop, discard, div = check_stopping(traj, (2, 3))
    assert stop and not div
    # the subtree (2, 3) sees a displacement of -7 against p = +1
    assert discard


def test_old_segment_spread_triggers_kept_divergence():
    traj = flat_trajectory(4)
    traj.energies[0] = 0.0
    traj.energies[1] = 2000.0
    assert check_stopping(traj, (2, 3)) == (True, False, True)


def test_stopping_validates_segment():
    with pytest.raises(ContractViolation):
        check_stopping(flat_trajectory(4), (1, 3))


# ----------------------------------------------------------------------------
# expansion


def test_first_doubling_appends_one_state():
    integ = gaussian_integrator()
    traj = start(integ, [1.0, 0.0], [0.0, 1.0])
    out, bounds = expand(traj, 0.1, integ, np.random.default_rng(0), direction=1)
    assert len(out) == 2 and bounds == (1, 1)
    ref = integ.step(traj.state(0), 0.1)
    np.testing.assert_array_equal(out.theta[1], ref.theta)
    assert out.energies[1] == integ.hamiltonian(ref)
    assert out.initial_index == 0


def test_backward_doublings_mirror_a_flipped_integration():
    integ = gaussian_integrator()
    z0 = PhasePoint(np.array([0.5, -0.2]), np.array([0.3, 0.8]))
    traj = start(integ, z0.theta, z0.p)
    for _ in range(2):
        traj, _ = expand(traj, 0.1, integ, np.random.default_rng(0), direction=-1)
    assert len(traj) == 4 and traj.initial_index == 3
    sq = PhasePoint(z0.theta, -z0.p)
    for t in (2, 1, 0):
        sq = integ.step(sq, 0.1)
        np.testing.assert_allclose(traj.theta[t], sq.theta, rtol=0, atol=1e-15)
        np.testing.assert_allclose(traj.p[t], -sq.p, rtol=0, atol=1e-15)
    # a backward state stepped forward lands on its successor
    fwd = integ.step(traj.state(1), 0.1)
    np.testing.assert_allclose(fwd.theta, traj.theta[2], atol=1e-14)
    np.testing.assert_allclose(fwd.p, traj.p[2], atol=1e-14)


def test_directions_are_recorded():
    integ = gaussian_integrator()
    traj = start(integ, [0.1, 0.2], [1.0, -1.0])
    rng = np.random.default_rng(3)
    for d in range(1, 6):
        traj, (lo, hi) = expand(traj, 0.05, integ, rng)
        assert len(traj.directions) == d
        assert len(traj) == 2 ** d and hi - lo + 1 == 2 ** (d - 1)
        assert np.all(np.abs(np.array(traj.directions)) == 1)
    offset = sum(2 ** i for i, v in enumerate(traj.directions) if v == -1)
    assert traj.initial_index == offset


def test_expand_rejects_bad_lengths():
    integ = gaussian_integrator()
    bad = flat_trajectory(3)
    with pytest.raises(ContractViolation):
        expand(bad, 0.1, integ, np.random.default_rng(0))


# ----------------------------------------------------------------------------
# replay


def test_replay_single_level_equal_energies():
    led = replay_weights([0.0, 0.0], [1])
    np.testing.assert_array_equal(led.weights, [0.0, 2.0])
    assert led.alpha[0] == 1.0
    traj = Trajectory(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros(2), 0, [1])
    rng = np.random.default_rng(0)
    assert all(replay_select(traj, rng) == 1 for _ in range(100))


def test_replay_half_acceptance():
    # W_old = 2 on the first state, W_new = 1 on the second
    led = replay_weights([-np.log(2.0), 0.0], [1])
    ratio = led.w_new[0] / led.w_old[0]
    assert ratio == pytest.approx(0.5, rel=1e-15)
    assert led.alpha[0] == pytest.approx(0.5, rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2 ** 31 - 1))
def test_replay_block_sums_are_preserved(D, seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(0, 3, 2 ** D)
    dirs = list(rng.choice([-1, 1], D))
    led = replay_weights(H, dirs)
    before, after = led.block_sum_before, led.block_sum_after
    np.testing.assert_array_less(np.abs(after - before), 1e-12 * np.abs(before) + 1e-300)
    assert np.all(led.weights >= 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 7), st.integers(0, 2 ** 31 - 1))
def test_replay_matches_levelwise_reference(D, seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(0, 2, 2 ** D)
    dirs = list(rng.choice([-1, 1], D))
    w = replay_weights(H, dirs).weights
    ref = oracles.replay_weights_reference(H, dirs)
    np.testing.assert_allclose(w / w.sum(), ref / ref.sum(), rtol=1e-12, atol=1e-15)


def test_replay_selection_invariant_to_energy_shift():
    rng = np.random.default_rng(5)
    for _ in range(200):
        D = int(rng.integers(1, 7))
        H = rng.normal(0, 2, 2 ** D)
        dirs = list(rng.choice([-1, 1], D))
        a = Trajectory(np.zeros((2 ** D, 1)), np.zeros((2 ** D, 1)), H, 0, dirs)
        b = Trajectory(a.theta, a.p, H + 100.0, 0, dirs)
        assert replay_select(a, np.random.default_rng(D)) == replay_select(
            b, np.random.default_rng(D))


def test_replay_all_zero_weights_fall_back_to_initial_state():
    traj = Trajectory(np.zeros((4, 1)), np.zeros((4, 1)), np.full(4, np.inf), 2, [-1, 1])
    assert replay_select(traj, np.random.default_rng(0)) == 2


def test_replay_selection_frequencies_match_weights():
    H = np.array([0.3, -0.2, 1.0, 0.1, 0.0, 0.5, -0.4, 0.2])
    dirs = [1, -1, 1]
    w = replay_weights(H, dirs).weights
    traj = Trajectory(np.zeros((8, 1)), np.zeros((8, 1)), H, 2, dirs)
    rng = np.random.default_rng(9)
    n = 40000
    counts = np.bincount([replay_select(traj, rng) for _ in range(n)], minlength=8)
    p = w / w.sum()
    assert stats.chisquare(counts[p > 0], n * p[p > 0]).pvalue > 1e-3
    assert np.all(counts[p == 0] == 0)


# ----------------------------------------------------------------------------
# full transitions


def _run_nuts(integ, theta, eps, n, rng, **kw):
    ws = Workspace(integ.model.dim, kw.get("max_depth", 10))
    U, g = integ.model.potential_and_grad(theta)
    out, depths, divs = np.empty((n, theta.size)), np.empty(n, int), np.empty(n, bool)
    for i in range(n):
        theta, U, g, st_ = nuts_transition(theta, eps, integ, rng, workspace=ws,
                                           potential_and_grad=(U, g), **kw)
        out[i], depths[i], divs[i] = theta, st_.depth, st_.divergent
    return out, depths, divs


def test_gaussian_stationarity():
    integ = gaussian_integrator(1)
    draws, _, _ = _run_nuts(integ, np.zeros(1), 0.5, 50000, np.random.default_rng(11))
    x = draws[:, 0]
    assert abs(x.mean()) < 3 * mcse(x)
    assert abs(x.var() - 1.0) < 0.05


def test_funnel_oracle_metric_v_marginal():
    model = Funnel(20)
    metric = build_metric(model, "block-exp")
    integ = Integrator(model, metric, oracle_funnel_phi(metric))
    draws, _, divs = _run_nuts(integ, np.zeros(21), 0.3, 25000, np.random.default_rng(12))
    v = draws[::5, 0]
    assert stats.kstest(v, "norm", args=(0.0, 3.0)).pvalue > 0.01
    assert divs.mean() < 0.01


def test_depth_never_exceeds_cap():
    model = Funnel(5)
    metric = build_metric(model, "diagonal")
    integ = Integrator(model, metric, metric.init_phi())
    for cap in (0, 1, 3):
        _, depths, _ = _run_nuts(integ, np.zeros(6), 0.01, 300, np.random.default_rng(cap),
                                 max_depth=cap)
        assert depths.max() <= cap


def test_zero_depth_without_divergence_check_is_identity():
    integ = gaussian_integrator(3)
    theta = np.array([0.4, -1.0, 2.0])
    out, _, _ = _run_nuts(integ, theta, 0.5, 50, np.random.default_rng(2), max_depth=0,
                          delta_max=np.inf)
    np.testing.assert_array_equal(out, np.tile(theta, (50, 1)))


def test_first_expansion_divergence_keeps_current_state():
    model = Funnel(3)
    metric = build_metric(model, "diagonal")
    integ = Integrator(model, metric, metric.init_phi())
    theta = np.array([-8.0, 0.01, 0.01, 0.01])
    rng = np.random.default_rng(0)
    out, _, _, st_ = nuts_transition(theta, 50.0, integ, rng)
    assert st_.divergent and st_.offset == 0
    np.testing.assert_array_equal(out, theta)


def test_transition_counts_gradients():
    integ = gaussian_integrator(2)
    rng = np.random.default_rng(4)
    integ.model.n_grad = 0
    _, _, _, st_ = nuts_transition(np.zeros(2), 0.2, integ, rng, potential_and_grad=(0.0,
                                                                                     np.zeros(2)))
    assert st_.n_grad == integ.model.n_grad > 0


def test_static_transition_gaussian_moments():
    integ = gaussian_integrator(1)
    rng = np.random.default_rng(6)
    theta = np.zeros(1)
    xs = np.empty(20000)
    for i in range(20000):
        theta, _, _, _ = static_transition(theta, 0.3, 5, integ, rng)
        xs[i] = theta[0]
    assert abs(xs.mean()) < 3 * mcse(xs)
    assert abs(xs.var() - 1.0) < 0.05
