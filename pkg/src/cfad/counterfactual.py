"""Counterfactual samples from a learned SCM by abduction-action-prediction.

For each non-sensitive node i, visited in topological order of the pruned
graph, the counterfactual value is

    x_cf_i = x_i + sum_j A[j, i] * (f(v_cf_j) - f(v_j))

where v is the factual node vector (sensitive value first), v_cf the
counterfactual one with s flipped, and the sum runs over parents including the
sensitive node. Nodes without a directed path from S keep their factual value
exactly, because every parent of theirs does.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .numerics import ContractError, mlp_numpy
from .scm import Dataset, Sample, descendants, topological_order
from .structure import ScmEstimate, fhat


@dataclass
class CounterfactualPair:
    factual: Sample
    counterfactual: Sample
    provenance: str = "estimated"


def _check(estimate: ScmEstimate, width: int) -> list[int]:
    if width != estimate.d:
        raise ContractError(f"sample has {width - 1} profile values, estimate expects {estimate.d - 1}")
    try:
        return topological_order(estimate.adjacency)
    except ValueError as exc:
        raise ContractError(f"estimate graph is cyclic: {exc}") from exc


def abduct(estimate: ScmEstimate, data: np.ndarray) -> np.ndarray:
    """Exogenous residuals u_i = x_i - sum_j A[j, i] f(v_j); column 0 (S) is zero."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    _check(estimate, data.shape[1])
    u = data - fhat(estimate, data) @ estimate.adjacency
    u[:, estimate.sensitive_index] = 0.0
    return u


def _propagate(estimate: ScmEstimate, data: np.ndarray, s_new: np.ndarray,
               structural: Callable[[np.ndarray, int], np.ndarray]) -> np.ndarray:
    """Shared recursion; ``structural(values, i)`` returns node i's structural part."""
    order = _check(estimate, data.shape[1])
    si = estimate.sensitive_index
    reach = descendants(estimate.adjacency, si)
    cf = data.copy()
    cf[:, si] = s_new
    for i in order:
        if i == si or i not in reach:
            continue
        cf[:, i] = data[:, i] + (structural(cf, i) - structural(data, i))
    return cf


def _refit_structural(estimate: ScmEstimate):
    A = estimate.adjacency

    def part(values: np.ndarray, i: int) -> np.ndarray:
        parents = np.flatnonzero(A[:, i])
        if parents.size == 0:
            return np.zeros(len(values))
        return fhat(estimate, values[:, parents]) @ A[parents, i]
    return part


def _gae_structural(estimate: ScmEstimate):
    A = estimate.adjacency
    W = estimate.weights

    def part(values: np.ndarray, i: int) -> np.ndarray:
        parents = np.flatnonzero(A[:, i])
        n = len(values)
        emb = mlp_numpy(W, "enc.", values[:, parents].reshape(-1, 1))
        k = emb.shape[1]
        msg = np.einsum("npk,p->nk", emb.reshape(n, parents.size, k), A[parents, i])
        return mlp_numpy(W, "dec.", msg)[:, 0]
    return part


def counterfactual_matrix(estimate: ScmEstimate, data: np.ndarray, path: str = "refit") -> np.ndarray:
    """Counterfactual node vectors for rows of ``data`` = [s, x]; s is negated.

    ``path="gae"`` swaps the learned map for the first decoder's
    reconstruction dec(sum_j A_ji enc(v_j)), the comparison route.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if path == "refit":
        structural = _refit_structural(estimate)
    elif path == "gae":
        structural = _gae_structural(estimate)
    else:
        raise ValueError(f"unknown path {path!r}")
    return _propagate(estimate, data, -data[:, estimate.sensitive_index], structural)


def generate_counterfactual(estimate: ScmEstimate, sample: Sample, path: str = "refit") -> Sample:
    row = np.concatenate([[sample.s], sample.x])[None, :]
    cf = counterfactual_matrix(estimate, row, path)[0]
    return Sample(float(cf[0]), cf[1:], None, None)


def counterfactual_dataset(estimate: ScmEstimate, dataset: Dataset, path: str = "refit") -> Dataset:
    """Column-oriented version: one counterfactual row per input row, no labels."""
    if len(dataset) == 0:
        return replace(dataset, y=None, u=None, meta={"cf": path})
    cf = counterfactual_matrix(estimate, dataset.data_matrix(), path)
    return replace(dataset, s=cf[:, 0], x=cf[:, 1:], y=None, u=None,
                   meta=dict(dataset.meta, cf=path))


def generate_counterfactual_dataset(estimate: ScmEstimate, dataset: Dataset,
                                    path: str = "refit") -> list[CounterfactualPair]:
    cf = counterfactual_dataset(estimate, dataset, path)
    return [CounterfactualPair(f, c, "estimated") for f, c in zip(dataset, cf)]
