import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disco.errors import ContractError
from disco.tensor import Graph, backward, finite_diff_check
from disco.vcd import (Assignment, bce_with_logits_mean, brute_force_assign, cost_matrix, hungarian_assign,
                       init_vsm_predictor, vsc_loss, vsm_loss)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---- cost matrix ---------------------------------------------------------------


def test_cost_of_identical_antipodal_orthogonal():
    e = np.eye(3)
    cost = cost_matrix(e[:1], np.stack([e[0], -e[0], e[1]]))
    np.testing.assert_allclose(cost, [[0.0, 2.0, 1.0]], atol=1e-15)


def test_zero_vector_has_distance_one():
    assert cost_matrix(np.zeros((1, 3)), np.eye(3)[:1])[0, 0] == 1.0


def test_cost_range():
    rng = np.random.default_rng(0)
    cost = cost_matrix(rng.standard_normal((5, 7)), rng.standard_normal((4, 7)))
    assert cost.min() >= -1e-12 and cost.max() <= 2 + 1e-12


def test_width_mismatch():
    with pytest.raises(ContractError):
        cost_matrix(np.ones((2, 3)), np.ones((2, 4)))


# ---- matching ------------------------------------------------------------------


def test_two_by_two_example():
    a = hungarian_assign([[0.9, 0.1], [0.2, 0.8]])
    assert a.pairs == ((0, 1), (1, 0))
    assert a.cost == pytest.approx(0.3, abs=1e-15)


def test_all_zero_ties_give_identity():
    a = hungarian_assign(np.zeros((3, 3)))
    assert a.pairs == ((0, 0), (1, 1), (2, 2))
    assert a.cost == 0.0


def test_rectangular_ties_prefer_lexicographic_pairs():
    assert hungarian_assign(np.zeros((2, 4))).pairs == ((0, 0), (1, 1))
    assert hungarian_assign(np.zeros((4, 2))).pairs == ((0, 0), (1, 1))
    assert brute_force_assign(np.zeros((4, 2))).pairs == ((0, 0), (1, 1))


def test_brute_force_examples():
    assert brute_force_assign([[0.4]]).pairs == ((0, 0),)
    a = brute_force_assign([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    assert a.pairs == ((0, 1), (1, 0))
    assert a.cost == 0.0


def test_brute_force_size_limit():
    with pytest.raises(ContractError):
        brute_force_assign(np.zeros((9, 9)))


def test_empty_sides():
    assert hungarian_assign(np.zeros((3, 0))).pairs == ()
    assert hungarian_assign(np.zeros((0, 2))).cost == 0.0


def test_non_finite_cost_rejected():
    with pytest.raises(ContractError):
        hungarian_assign([[0.0, math.inf]])


def test_tall_matrix_leaves_extra_groups_unmatched():
    cost = np.array([[0.5, 0.1], [0.0, 0.9], [0.2, 0.2]])
    a = hungarian_assign(cost)
    assert a.pairs == ((0, 1), (1, 0))
    assert len(a) == 2


def _random_costs(count, seed=1234):
    rng = np.random.default_rng(seed)
    for k in range(count):
        rows, cols = rng.integers(1, 9, size=2)
        if k % 3 == 0:  # integer costs create many ties
            yield rng.integers(0, 4, size=(rows, cols)).astype(float)
        else:
            yield rng.uniform(0.0, 2.0, size=(rows, cols))


def test_hungarian_equals_brute_force_on_500_matrices():
    start = time.perf_counter()
    for cost in _random_costs(500):
        h, b = hungarian_assign(cost), brute_force_assign(cost)
        assert h.cost == b.cost
        assert h.pairs == b.pairs
    assert time.perf_counter() - start < 5.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_assignment_is_valid_injection(rows, cols, seed):
    cost = np.random.default_rng(seed).uniform(0, 2, (rows, cols))
    a = hungarian_assign(cost)
    assert len(a) == min(rows, cols)
    assert len(set(a.groups)) == len(a) and len(set(a.concepts)) == len(a)
    assert list(a.groups) == sorted(a.groups)


# ---- VSC -----------------------------------------------------------------------


def test_vsc_singleton_is_zero():
    loss, skipped = vsc_loss(np.ones((1, 3)), np.ones((1, 3)), Assignment(((0, 0),), 0.0))
    assert loss.value == 0.0 and not skipped


def test_vsc_uniform_similarity():
    v = np.ones((4, 5))
    t = np.ones((4, 5))
    loss, _ = vsc_loss(v, t, hungarian_assign(cost_matrix(v, t)))
    assert abs(float(loss.value) - 11.09035489) <= 1e-6
    assert abs(float(loss.value) - 8 * math.log(4)) <= 1e-12


def test_vsc_orthogonal_pair_value():
    e = np.eye(2)
    loss, _ = vsc_loss(e, e, Assignment(((0, 0), (1, 1)), 0.0), tau=1.0)
    expected = 4 * _softplus(-1.0)
    assert float(loss.value) == pytest.approx(expected, abs=1e-12)
    assert float(loss.value) == pytest.approx(1.25305, abs=1e-5)


def test_vsc_matches_numpy_oracle():
    rng = np.random.default_rng(3)
    v, t = rng.standard_normal((4, 6)), rng.standard_normal((3, 6))
    a = hungarian_assign(cost_matrix(v, t))
    loss, _ = vsc_loss(v, t, a, tau=0.2)
    sim = _unit(v[a.groups]) @ _unit(t[a.concepts]).T / 0.2

    def direction(s):
        return -np.sum(np.diag(s) - np.log(np.exp(s).sum(axis=1)))

    assert float(loss.value) == pytest.approx(direction(sim) + direction(sim.T), abs=1e-10)


def test_vsc_empty_assignment_skips():
    loss, skipped = vsc_loss(np.ones((2, 3)), np.zeros((0, 3)), Assignment((), 0.0))
    assert skipped and loss.value == 0.0


def test_vsc_rejects_bad_temperature():
    with pytest.raises(ContractError):
        vsc_loss(np.ones((1, 2)), np.ones((1, 2)), Assignment(((0, 0),), 0.0), tau=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vsc_non_negative(seed):
    rng = np.random.default_rng(seed)
    v, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    loss, _ = vsc_loss(v, t, hungarian_assign(cost_matrix(v, t)))
    assert float(loss.value) >= 0.0


# ---- VSM -----------------------------------------------------------------------


def _zero_predictor(c):
    return {"w1": np.zeros((2 * c, 2 * c)), "b1": np.zeros(2 * c), "w2": np.zeros((2 * c, 1)), "b2": np.zeros(1)}


def _sign_predictor(a=10.0, b=2.0):
    # c = 1: hidden units gelu(+a(v+t)) and gelu(-a(v+t)) fire only when v and t agree
    return {
        "w1": np.array([[a, -a], [a, -a]]),
        "b1": np.zeros(2),
        "w2": np.array([[b], [b]]),
        "b2": np.array([-20.0]),
    }


def test_vsm_uncertain_predictor_gives_ln2():
    rng = np.random.default_rng(0)
    v, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    loss, _ = vsm_loss(v, t, hungarian_assign(cost_matrix(v, t)), _zero_predictor(4))
    assert float(loss.value) == pytest.approx(math.log(2), abs=1e-12)


def test_vsm_saturated_predictor():
    v = np.array([[1.0], [-1.0]])
    t = np.array([[1.0], [-1.0]])
    a = hungarian_assign(cost_matrix(v, t))
    assert a.pairs == ((0, 0), (1, 1))
    loss, _ = vsm_loss(v, t, a, _sign_predictor())
    assert float(loss.value) <= 1e-8


def test_bce_hand_set_logits():
    g = Graph()
    logits = g.constant(np.array([[2.0], [-1.0], [-1.0], [2.0]]))
    loss = bce_with_logits_mean(g, logits, np.eye(2).reshape(-1, 1))
    expected = (2 * _softplus(-2.0) + 2 * _softplus(-1.0)) / 4
    assert float(loss.value) == pytest.approx(expected, abs=1e-14)
    assert float(loss.value) == pytest.approx(0.22009, abs=1e-5)


def test_vsm_matches_numpy_oracle():
    rng = np.random.default_rng(5)
    v, t = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
    pred = init_vsm_predictor(4, np.random.default_rng(0))
    a = hungarian_assign(cost_matrix(v, t))
    loss, _ = vsm_loss(v, t, a, pred)

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))

    vs, ts = v[a.groups], t[a.concepts]
    total = 0.0
    for i in range(len(a)):
        for j in range(len(a)):
            z = gelu(np.concatenate([vs[i], ts[j]]) @ pred["w1"] + pred["b1"]) @ pred["w2"] + pred["b2"]
            total += _softplus(z[0]) - (i == j) * z[0]
    assert float(loss.value) == pytest.approx(total / len(a) ** 2, abs=1e-12)


def test_vsm_empty_assignment_skips():
    loss, skipped = vsm_loss(np.ones((2, 3)), np.zeros((0, 3)), Assignment((), 0.0), _zero_predictor(3))
    assert skipped and loss.value == 0.0


# ---- invariances and gradients ---------------------------------------------------


def _losses(v, t, pred, tau=0.1):
    a = hungarian_assign(cost_matrix(v, t))
    return a, float(vsc_loss(v, t, a, tau)[0].value), float(vsm_loss(v, t, a, pred)[0].value)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(4)))
def test_concept_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    v, t = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
    pred = init_vsm_predictor(5, rng)
    a, vsc, vsm = _losses(v, t, pred)
    b, vsc_p, vsm_p = _losses(v, t[list(perm)], pred)
    inverse = {new: old for new, old in enumerate(perm)}
    assert [(i, inverse[j]) for i, j in b.pairs] == list(a.pairs)
    assert abs(vsc - vsc_p) <= 1e-9
    assert abs(vsm - vsm_p) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_group_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    v, t = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    row = int(rng.integers(3))
    scaled = v.copy()
    scaled[row] *= lam
    np.testing.assert_allclose(cost_matrix(scaled, t), cost_matrix(v, t), atol=1e-9)
    a, b = hungarian_assign(cost_matrix(v, t)), hungarian_assign(cost_matrix(scaled, t))
    assert a.pairs == b.pairs
    assert abs(float(vsc_loss(v, t, a)[0].value) - float(vsc_loss(scaled, t, b)[0].value)) <= 1e-9


def test_unmatched_groups_get_zero_gradient():
    rng = np.random.default_rng(7)
    g = Graph()
    v = g.param("v", rng.standard_normal((4, 5)))
    t = g.param("t", rng.standard_normal((2, 5)))
    a = hungarian_assign(cost_matrix(v, t))
    pred = {k: g.param(k, x) for k, x in init_vsm_predictor(5, rng).items()}
    vsc, _ = vsc_loss(v, t, a)
    vsm, _ = vsm_loss(v, t, a, pred)
    total = g.add(vsc, vsm)
    grads = backward(g, total)
    unmatched = sorted(set(range(4)) - set(a.groups))
    assert len(unmatched) == 2
    np.testing.assert_array_equal(grads["v"][unmatched], 0.0)
    assert np.all(np.abs(grads["v"][a.groups]).sum(axis=1) > 0)


@pytest.mark.parametrize("seed", range(5))
def test_vsc_and_vsm_gradients(seed):
    rng = np.random.default_rng(seed)
    for which in ("vsc", "vsm"):
        g = Graph()
        v = g.param("v", rng.standard_normal((3, 4)))
        t = g.param("t", rng.standard_normal((3, 4)))
        a = hungarian_assign(cost_matrix(v, t))
        if which == "vsc":
            vsc_loss(v, t, a, tau=0.5)
        else:
            pred = {k: g.param(k, x) for k, x in init_vsm_predictor(4, rng).items()}
            vsm_loss(v, t, a, pred)
        report = finite_diff_check(g)
        assert report.max_rel_error <= 1e-4, (which, report.worst)
