import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from aucl._common import gaussian_likelihood
from aucl.dmv import los_correct
from aucl.imm import (combine, combine_bias_book, evolve_mode_probabilities,
                      process_measurement, sequential_update)
from aucl.skf import beacon_los_correct, beacon_nlos_correct, nlos_correct, nlos_correct_compact
from aucl.types import (LOS, NLOS, Beacon, Belief, BiasBook, BiasModel, ModeProbabilities,
                        NumericalError, RangeMeasurement, UpdateOutcome)


def meas(z, target=2, stamp=0, pm=0.0):
    return RangeMeasurement(1, target, z, pm, stamp)


def planar(x, y, P=None):
    return Belief([x, y, 0.0], np.eye(3) if P is None else P, heading=2)


def outcome(x, P):
    return UpdateOutcome(Belief(x, P), 0.5, np.zeros(len(x)), 0.0, 1.0, 1.0)


# -- mode evolution and likelihood -------------------------------------------

def test_evolution_examples():
    half = ModeProbabilities(0.5, 0.5)
    assert evolve_mode_probabilities(half, 0.3, 0.3).as_tuple() == (0.5, 0.5)
    assert evolve_mode_probabilities(NLOS, 5.0, 0.1).as_tuple() == (0.0, 1.0)
    p = evolve_mode_probabilities(half, 2.0, 1.0)
    assert p.p_los == pytest.approx(2 / 3) and p.p_nlos == pytest.approx(1 / 3)


def test_evolution_underflow_keeps_prior():
    prior = ModeProbabilities(0.3, 0.7)
    assert evolve_mode_probabilities(prior, 0.0, 1e-320) == prior
    with pytest.raises(ValueError):
        evolve_mode_probabilities(prior, -1.0, 1.0)


@given(st.floats(0.01, 0.99), st.floats(1e-6, 10), st.floats(1e-6, 10), st.floats(1e-3, 1e3))
def test_evolution_invariant_to_common_scaling(p, a, b, k):
    prior = ModeProbabilities.from_nlos(p)
    x = evolve_mode_probabilities(prior, a, b)
    y = evolve_mode_probabilities(prior, k * a, k * b)
    assert x.p_nlos == pytest.approx(y.p_nlos, rel=1e-12, abs=1e-15)


def test_likelihood_values():
    assert gaussian_likelihood(0.0, 1.0) == pytest.approx(0.3989422804014327)
    assert gaussian_likelihood(0.0, 1 / (2 * math.pi)) == pytest.approx(1.0)
    assert gaussian_likelihood(2.0, 1.0) == pytest.approx(math.exp(-2) / math.sqrt(2 * math.pi))
    assert gaussian_likelihood(2.0, 1.0) == pytest.approx(0.05399, abs=5e-6)
    assert gaussian_likelihood(1.0, math.inf) == 0.0
    with pytest.raises(NumericalError):
        gaussian_likelihood(0.0, 0.0)


# -- combination ------------------------------------------------------------

def test_identical_beliefs_combine_to_either():
    o = outcome([1.0, 2.0], np.diag([1.0, 2.0]))
    b = combine(o, o, ModeProbabilities(0.3, 0.7))
    np.testing.assert_allclose(b.x, [1, 2])
    np.testing.assert_allclose(b.P, np.diag([1.0, 2.0]))


def test_full_weight_returns_los_belief():
    a, b = outcome([0.0], [[1.0]]), outcome([5.0], [[3.0]])
    c = combine(a, b, LOS)
    assert c.x[0] == 0.0 and c.P[0, 0] == 1.0


def test_scalar_moment_matching():
    c = combine(outcome([0.0], [[1.0]]), outcome([2.0], [[1.0]]), ModeProbabilities(0.5, 0.5))
    assert c.x[0] == pytest.approx(1.0)
    assert c.P[0, 0] == pytest.approx(2.0)


def test_heading_is_averaged_across_the_wrap():
    a = UpdateOutcome(Belief([0, 0, math.pi - 0.1], np.eye(3), heading=2), 1, np.zeros(3), 0, 1, 1)
    b = UpdateOutcome(Belief([0, 0, -math.pi + 0.1], np.eye(3), heading=2), 1, np.zeros(3), 0, 1, 1)
    c = combine(a, b, ModeProbabilities(0.5, 0.5))
    assert abs(c.x[2]) == pytest.approx(math.pi)
    assert c.P[2, 2] == pytest.approx(1.0 + 0.01)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
def test_combined_dominates_weighted_average(seed, p):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    a = outcome(rng.normal(size=3), A @ A.T)
    b = outcome(rng.normal(size=3), B @ B.T)
    w = ModeProbabilities.from_nlos(p)
    c = combine(a, b, w)
    diff = c.P - (w.p_los * a.belief.P + w.p_nlos * b.belief.P)
    assert np.linalg.eigvalsh(diff)[0] >= -1e-9


def test_book_combination_rules():
    los = BiasBook(1, {1: [4.0, 0, 0]})
    nlos = BiasBook(1, {1: [2.0, 0, 0]})
    np.testing.assert_allclose(combine_bias_book(los, nlos, NLOS).C[1], [2, 0, 0])
    np.testing.assert_allclose(combine_bias_book(los, nlos, LOS).C[1], [0, 0, 0])
    half = ModeProbabilities(0.5, 0.5)
    np.testing.assert_allclose(combine_bias_book(los, nlos, half).C[1], [1, 0, 0])
    np.testing.assert_allclose(combine_bias_book(los, nlos, half, "mixture").C[1], [3, 0, 0])
    with pytest.raises(ValueError):
        combine_bias_book(los, nlos, half, "bogus")


# -- short circuits ------------------------------------------------------------

def _random_instance(rng):
    def spd(scale):
        A = rng.normal(size=(3, 3)) * scale
        return A @ A.T + 0.05 * scale ** 2 * np.eye(3)
    bi = planar(*rng.normal(0, 5, 2), spd(rng.uniform(0.1, 2)))
    bj = planar(*rng.normal(0, 5, 2), spd(rng.uniform(0.05, 1)))
    C_ii, C_ij, C_ji, C_jj = (rng.normal(0, 0.05, 3) for _ in range(4))
    book_i = BiasBook(1, {1: C_ii, 2: C_ij})
    book_j = BiasBook(2, {1: C_ji, 2: C_jj})
    z = float(np.linalg.norm(bi.x[:2] - bj.x[:2]) + rng.normal(0.3, 0.5))
    return bi, bj, book_i, book_j, abs(z), rng.uniform(1e-3, 0.2)


@pytest.mark.parametrize("seed", range(20))
def test_certain_modes_reduce_to_single_branch(seed):
    rng = np.random.default_rng(seed)
    bi, bj, book_i, book_j, z, R = _random_instance(rng)
    model = BiasModel.from_prior(1.0, 0.25)
    res = process_measurement(bi, bj, model, book_i, book_j, meas(z), LOS, R)
    ref = los_correct(bi, bj, z, R)
    np.testing.assert_array_equal(res.belief.x, ref.belief.x)
    np.testing.assert_array_equal(res.belief.P, ref.belief.P)
    res = process_measurement(bi, bj, model, book_i, book_j, meas(z), NLOS, R)
    ref, book = nlos_correct(bi, bj, model, book_i, book_j, z, R)
    np.testing.assert_array_equal(res.belief.x, ref.belief.x)
    np.testing.assert_array_equal(res.belief.P, ref.belief.P)
    for l in book.C:
        np.testing.assert_array_equal(res.book.C[l], book.C[l])
    res = process_measurement(bi, bj, model, book_i, None, meas(z), NLOS, R, compact=True)
    ref, C = nlos_correct_compact(bi, bj, model, book_i.C[1], z, R)
    np.testing.assert_array_equal(res.belief.P, ref.belief.P)
    np.testing.assert_array_equal(res.book.C[1], C)


def test_certain_modes_against_beacons():
    bel = planar(1, 2, np.diag([0.5, 0.4, 0.1]))
    model = BiasModel.from_prior(1.0, 0.25)
    book = BiasBook(1, {1: [0.01, 0.02, 0.0]})
    beacon = Beacon((6.0, 2.0))
    res = process_measurement(bel, beacon, model, book, None, meas(5.5, 100), LOS, 0.01)
    ref = beacon_los_correct(bel, beacon, 5.5, 0.01)
    np.testing.assert_array_equal(res.belief.P, ref.belief.P)
    res = process_measurement(bel, beacon, model, book, None, meas(5.5, 100), NLOS, 0.01)
    ref, C = beacon_nlos_correct(bel, model, book.C[1], beacon, 5.5, 0.01)
    np.testing.assert_array_equal(res.belief.P, ref.belief.P)
    np.testing.assert_array_equal(res.book.C[1], C)


def test_half_half_scalar_composition():
    P_i, P_j, B, R, innov = 1.0, 0.04, 0.25, 0.01, 0.5
    bi, bj = Belief([0.0], [[P_i]]), Belief([-10.0], [[P_j]])
    model = BiasModel(0.0, 0.25, 0.0, B)
    book_i, book_j = BiasBook(1, {1: [0.0]}), BiasBook(2, {1: [0.0]})
    res = process_measurement(bi, bj, model, book_i, book_j, meas(10.0 + innov),
                              ModeProbabilities(0.5, 0.5), R)
    w1, K1, P1, S1 = oracles.brute_force_omega_scalar(P_i, P_j, 1.0, -1.0, R)
    w2, K2, P2, S2 = oracles.brute_force_omega_scalar(P_i, P_j, 1.0, -1.0, R, B=B)
    L1, L2 = oracles.gaussian_pdf(innov, S1), oracles.gaussian_pdf(innov, S2)
    p_los = L1 / (L1 + L2)
    x, P = oracles.moment_match([np.array([K1 * innov]), np.array([K2 * innov])],
                                [np.array([[P1]]), np.array([[P2]])], [p_los, 1 - p_los])
    # omega is only resolvable to ~1e-9 through a flat log-determinant, so
    # omega-dependent quantities are compared at 1e-6
    assert res.diagnostics.posterior_modes.p_los == pytest.approx(p_los, abs=1e-6)
    assert res.belief.x[0] == pytest.approx(x[0], abs=1e-6)
    assert res.belief.P[0, 0] == pytest.approx(P[0, 0], abs=1e-6)


def test_branch_failure_falls_back_to_survivor(monkeypatch):
    import aucl.imm as imm

    def broken(*args, **kwargs):
        raise NumericalError("forced")

    monkeypatch.setattr(imm, "nlos_correct", broken)
    bi = planar(0, 0)
    bj = planar(3, 4, 0.01 * np.eye(3))
    model = BiasModel.from_prior(1.0, 0.25)
    res = process_measurement(bi, bj, model, BiasBook.zeros(1, [1, 2], 3), None, meas(5.3),
                              ModeProbabilities(0.5, 0.5), 1e-3)
    ref = los_correct(bi, bj, 5.3, 1e-3)
    assert "nlos_skipped" in res.diagnostics.flags
    assert res.diagnostics.posterior_modes.as_tuple() == (1.0, 0.0)
    np.testing.assert_allclose(res.belief.x, ref.belief.x)
    monkeypatch.setattr(imm, "los_correct", broken)
    res = process_measurement(bi, bj, model, BiasBook.zeros(1, [1, 2], 3), None, meas(5.3),
                              ModeProbabilities(0.5, 0.5), 1e-3)
    assert res.diagnostics.flags == ("both_skipped",)
    assert res.belief is bi


def test_uninformative_branches_are_flagged():
    bi = planar(0, 0, 0.01 * np.eye(3))
    bj = planar(3, 4)   # partner much less certain: w* = 1 in both branches
    model = BiasModel.from_prior(1.0, 0.25)
    res = process_measurement(bi, bj, model, BiasBook.zeros(1, [1, 2], 3),
                              BiasBook.zeros(2, [1, 2], 3), meas(5.2),
                              ModeProbabilities(0.4, 0.6), 0.01)
    assert res.diagnostics.flags == ("no_information",)
    assert res.diagnostics.posterior_modes.as_tuple() == (0.4, 0.6)
    np.testing.assert_array_equal(res.belief.x, bi.x)


def test_option_validation():
    bi, bj = planar(0, 0), planar(3, 4)
    book = BiasBook.zeros(1, [1], 3)
    model = BiasModel.from_prior(1.0, 0.25)
    with pytest.raises(ValueError):
        process_measurement(bi, bj, model, book, None, meas(5), LOS, 0.01, combine_rule="x")
    with pytest.raises(ValueError):
        process_measurement(bi, bj, model, book, None, meas(5), LOS, 0.01,
                            likelihood_variance="x")


# -- sequential updates -------------------------------------------------------

def test_empty_sequence_is_identity():
    bi = planar(0, 0)
    book = BiasBook.zeros(1, [1], 3)
    out, b, d = sequential_update(bi, BiasModel.from_prior(1, 0.25), book, [], [], {}, {}, 0.01)
    assert out is bi and b is book and d == []


def test_single_measurement_equals_process_measurement():
    bi, bj = planar(0, 0), planar(3, 4, 0.05 * np.eye(3))
    model = BiasModel.from_prior(1, 0.25)
    book = BiasBook.zeros(1, [1, 2], 3)
    m = meas(5.4)
    modes = ModeProbabilities(0.3, 0.7)
    a = process_measurement(bi, bj, model, book, None, m, modes, 0.01)
    b, _, _ = sequential_update(bi, model, book, [m], [modes], {2: bj}, {}, 0.01)
    np.testing.assert_array_equal(a.belief.x, b.x)
    np.testing.assert_array_equal(a.belief.P, b.P)


def test_two_beacons_chain_like_hand_kalman():
    P = np.diag([0.5, 0.3])
    bel = Belief([0.0, 0.0], P)
    beacons = {101: Beacon((10.0, 0.0)), 102: Beacon((0.0, 10.0))}
    ms = [RangeMeasurement(1, 102, 9.7, 0.0, 3), RangeMeasurement(1, 101, 10.4, 0.0, 3)]
    model = BiasModel.from_prior(1, 0.25)
    out, _, diags = sequential_update(bel, model, BiasBook.zeros(1, [1], 2), ms, [LOS, LOS],
                                      beacons, {}, 0.01)
    assert len(diags) == 2
    # ascending target id: beacon 101 first
    H1 = np.array([-1.0, 0.0])
    x1, P1, _, _ = oracles.kalman(P, H1, 0.01, 10.4 - 10.0, np.zeros(2))
    d = x1 - np.array([0.0, 10.0])
    r = np.linalg.norm(d)
    x2, P2, _, _ = oracles.kalman(P1, d / r, 0.01, 9.7 - r, x1)
    np.testing.assert_allclose(out.x, x2, atol=1e-9)
    np.testing.assert_allclose(out.P, P2, atol=1e-9)


def test_sequence_checks():
    bi = planar(0, 0)
    model = BiasModel.from_prior(1, 0.25)
    book = BiasBook.zeros(1, [1], 3)
    with pytest.raises(ValueError):
        sequential_update(bi, model, book, [meas(1.0)], [], {}, {}, 0.01)
    with pytest.raises(ValueError):
        sequential_update(bi, model, book, [meas(1.0, stamp=1), meas(1.0, 3, stamp=2)],
                          [LOS, LOS], {}, {}, 0.01)


def test_on_update_sees_each_prior():
    bi = planar(0, 0)
    beacons = {10: Beacon((5.0, 0.0)), 11: Beacon((0.0, 5.0))}
    ms = [meas(5.1, 10), meas(4.9, 11)]
    seen = []
    out, _, _ = sequential_update(bi, BiasModel.from_prior(1, 0.25), BiasBook.zeros(1, [1], 3),
                                  ms, [LOS, LOS], beacons, {}, 0.01,
                                  on_update=lambda prior, res: seen.append((prior, res)))
    assert seen[0][0] is bi
    assert seen[1][0] is seen[0][1].belief
    assert seen[1][1].belief is out


# -- short-horizon comparison with the exact Gaussian sum --------------------

def test_gaussian_sum_diagnostic(capsys):
    """IMM versus the exhaustive 2^t mixture on a nearly linear 1-D problem.

    Reported only: the IMM is an approximation, so no hard bound is asserted
    beyond finiteness.
    """
    rng = np.random.default_rng(0)
    beacon = Beacon((-1000.0, 0.0))
    B, R, Q = 1.25, 0.01, 0.05
    model = BiasModel.from_prior(1.0, 0.25)
    bel = Belief([0.0, 0.0], np.diag([1.0, 1e-6]))
    comps = [(1.0, np.zeros(2), bel.P.copy())]
    book = BiasBook.zeros(1, [1], 2)
    worst = 0.0
    for t in range(1, 9):
        bel = bel.replace(P=bel.P + np.diag([Q, 0.0]), stamp=t)
        comps = [(w, x, P + np.diag([Q, 0.0])) for w, x, P in comps]
        p_nlos = rng.uniform(0.1, 0.9)
        z = 1000.0 + rng.normal(0, 0.1) + (rng.uniform() < p_nlos) * abs(rng.normal(1, 0.5))
        res = process_measurement(bel, beacon, model, book, None,
                                  RangeMeasurement(1, 100, z, 0.0, t),
                                  ModeProbabilities.from_nlos(p_nlos), R)
        bel, book = res.belief, res.book
        new = []
        for w, x, P in comps:
            H = (x - np.array(beacon.position)) / np.linalg.norm(x - np.array(beacon.position))
            zh = float(np.linalg.norm(x - np.array(beacon.position)))
            for pm, extra in ((1 - p_nlos, 0.0), (p_nlos, B)):
                S = float(H @ P @ H) + R + extra
                K = P @ H / S
                new.append((w * pm * oracles.gaussian_pdf(z - zh, S), x + K * (z - zh),
                            P - S * np.outer(K, K)))
        total = sum(c[0] for c in new)
        comps = [(w / total, x, P) for w, x, P in new]
        mean, cov = oracles.moment_match([c[1] for c in comps], [c[2] for c in comps],
                                         [c[0] for c in comps])
        dev = abs(bel.x[0] - mean[0]) / math.sqrt(bel.P[0, 0])
        worst = max(worst, dev)
    print(f"gaussian-sum diagnostic: worst IMM deviation {worst:.3f} posterior sd over 8 steps")
    assert math.isfinite(worst)
