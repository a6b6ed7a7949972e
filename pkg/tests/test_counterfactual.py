import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfad.counterfactual import (abduct, counterfactual_dataset, counterfactual_matrix,
                                 generate_counterfactual, generate_counterfactual_dataset)
from cfad.numerics import ContractError, init_mlp
from cfad.scm import Dataset, Sample, descendants, topological_order
from cfad.structure import ScmEstimate


def identity_estimate(A):
    """f = identity: every scalar map is a single linear unit with weight one."""
    one, zero = np.ones((1, 1)), np.zeros((1, 1))
    w = {f"{p}.{n}": v.copy() for p in ("enc", "dec", "ref") for n, v in (("W0", one), ("b0", zero))}
    return ScmEstimate(np.asarray(A, dtype=float), w, 0.3, topological_order(A))


def random_estimate(d, seed, p=0.5):
    rng = np.random.default_rng(seed)
    A = np.triu(rng.uniform(0.5, 2.0, (d, d)) * rng.choice([-1, 1], (d, d)), 1)
    A *= rng.random((d, d)) < p
    w = {}
    w.update(init_mlp([1, 8, 4], rng, "enc."))
    w.update(init_mlp([4, 8, 1], rng, "dec."))
    w.update(init_mlp([4, 8, 1], rng, "ref."))
    return ScmEstimate(A, w, 0.3, topological_order(A))


def rows(d, n, seed):
    rng = np.random.default_rng(seed)
    return np.c_[rng.choice([-1.0, 1.0], n), rng.normal(size=(n, d - 1))]


def test_chain_by_hand():
    a, b = 1.5, -0.7
    A = np.zeros((3, 3))
    A[0, 1], A[1, 2] = a, b
    est = identity_estimate(A)
    v = np.array([[1.0, 0.4, -2.0], [-1.0, 3.0, 0.5]])
    cf = counterfactual_matrix(est, v)
    s = v[:, 0]
    assert np.allclose(cf[:, 0], -s)
    assert np.allclose(cf[:, 1], v[:, 1] - 2 * a * s)
    assert np.allclose(cf[:, 2], v[:, 2] - 2 * a * b * s)
    # the comparison path agrees when both maps are the identity
    assert np.allclose(counterfactual_matrix(est, v, "gae"), cf)


def test_abduction_residuals():
    A = np.zeros((3, 3))
    A[0, 1], A[1, 2] = 2.0, 1.0
    est = identity_estimate(A)
    u = abduct(est, np.array([[1.0, 2.5, 4.0]]))
    assert np.allclose(u, [[0.0, 0.5, 1.5]])


def test_no_sensitive_edges_gives_identity():
    est = random_estimate(5, 0)
    est.adjacency[0] = 0.0
    v = rows(5, 20, 1)
    cf = counterfactual_matrix(est, v)
    assert np.array_equal(cf[:, 1:], v[:, 1:])
    assert np.array_equal(cf[:, 0], -v[:, 0])


@pytest.mark.parametrize("path", ["refit", "gae"])
def test_involution_and_locality(path):
    for seed in range(5):
        est = random_estimate(6, seed)
        v = rows(6, 30, seed)
        cf = counterfactual_matrix(est, v, path)
        back = counterfactual_matrix(est, cf, path)
        assert np.max(np.abs(back - v)) < 1e-10
        reach = descendants(est.adjacency, 0)
        for i in range(1, 6):
            if i not in reach:
                assert np.array_equal(cf[:, i], v[:, i])


def test_rows_are_independent_and_duplicates_agree():
    est = random_estimate(5, 3)
    v = rows(5, 12, 4)
    full = counterfactual_matrix(est, v)
    perm = np.random.default_rng(0).permutation(12)
    assert np.allclose(counterfactual_matrix(est, v[perm]), full[perm], atol=1e-12)
    dup = counterfactual_matrix(est, np.vstack([v[:1], v[:1]]))
    assert np.array_equal(dup[0], dup[1])
    single = generate_counterfactual(est, Sample(v[2, 0], v[2, 1:]))
    assert single.s == -v[2, 0]
    assert np.allclose(single.x, full[2, 1:], atol=1e-12)


def test_dataset_wrappers():
    est = random_estimate(4, 2)
    v = rows(4, 6, 2)
    ds = Dataset(v[:, 0], v[:, 1:], y=np.zeros(6))
    cf = counterfactual_dataset(est, ds)
    assert cf.y is None and len(cf) == 6
    assert np.array_equal(cf.ids, ds.ids)
    pairs = generate_counterfactual_dataset(est, ds)
    assert len(pairs) == 6 and pairs[0].provenance == "estimated"
    empty = Dataset(np.zeros(0), np.zeros((0, 3)))
    assert len(counterfactual_dataset(est, empty)) == 0


def test_dimension_mismatch_and_bad_path():
    est = random_estimate(4, 0)
    with pytest.raises(ContractError):
        counterfactual_matrix(est, np.zeros((2, 5)))
    with pytest.raises(ValueError):
        counterfactual_matrix(est, rows(4, 2, 0), "other")


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_property_involution(d, seed):
    est = random_estimate(d, seed)
    v = rows(d, 8, seed)
    twice = counterfactual_matrix(est, counterfactual_matrix(est, v))
    assert np.max(np.abs(twice - v)) < 1e-9
