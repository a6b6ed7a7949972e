"""Synthetic benchmark: random weighted DAGs, the cosine structural equations,
quantile-band anomaly labels and exact ground-truth counterfactuals."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .numerics import ContractError, make_rng, quantile

log = logging.getLogger(__name__)


class GenerationError(RuntimeError):
    pass


class CyclicGraphError(ValueError):
    def __init__(self, node: int):
        super().__init__(f"graph contains a cycle through node {node}")
        self.node = node


@dataclass(frozen=True)
class DagSpec:
    """Ground-truth weighted graph. ``adjacency[j, i]`` is the weight of j -> i."""

    adjacency: np.ndarray
    sensitive_index: int = 0
    decision_index: int | None = None
    seed: int | None = None

    @property
    def d(self) -> int:
        return self.adjacency.shape[0]

    def parents(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[:, i])]

    def to_dict(self) -> dict:
        return {
            "adjacency": self.adjacency.tolist(),
            "sensitive_index": self.sensitive_index,
            "decision_index": self.decision_index,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DagSpec":
        return cls(np.asarray(doc["adjacency"], dtype=np.float64),
                   int(doc["sensitive_index"]),
                   None if doc.get("decision_index") is None else int(doc["decision_index"]),
                   doc.get("seed"))


@dataclass
class Sample:
    s: float
    x: np.ndarray
    u: np.ndarray | None = None
    y: int | None = None


@dataclass
class Dataset:
    """Column-oriented sample store.

    ``nodes`` maps each column of ``x`` to its graph node index (synthetic
    data only); ``ids`` are stable row identifiers.
    """

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray | None = None
    u: np.ndarray | None = None
    nodes: tuple[int, ...] | None = None
    ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64).reshape(-1)
        x = np.asarray(self.x, dtype=np.float64)
        self.x = x.reshape(len(self.s), -1) if x.size or x.ndim != 2 else x
        if len(self.x) != len(self.s):
            raise ContractError("feature rows do not match sample count")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
            if len(self.y) != len(self.s):
                raise ContractError("label count does not match sample count")
        if self.u is not None:
            self.u = np.asarray(self.u, dtype=np.float64).reshape(self.x.shape)
        if self.ids is None:
            self.ids = np.arange(len(self.s))
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def m(self) -> int:
        return self.x.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.y is not None

    @property
    def has_noise(self) -> bool:
        return self.u is not None

    def sample(self, n: int) -> Sample:
        return Sample(float(self.s[n]), self.x[n].copy(),
                      None if self.u is None else self.u[n].copy(),
                      None if self.y is None else int(self.y[n]))

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(n) for n in range(len(self))]

    def __iter__(self) -> Iterator[Sample]:
        return (self.sample(n) for n in range(len(self)))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, s=self.s[idx], x=self.x[idx],
                       y=None if self.y is None else self.y[idx],
                       u=None if self.u is None else self.u[idx],
                       ids=self.ids[idx], meta=dict(self.meta))

    def data_matrix(self) -> np.ndarray:
        """Sensitive value prepended to the profile vector, shape (N, m+1)."""
        return np.column_stack([self.s, self.x])

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], nodes=None) -> "Dataset":
        if not samples:
            raise ContractError("cannot build a dataset from zero samples")
        us = [smp.u for smp in samples]
        ys = [smp.y for smp in samples]
        return cls(np.array([smp.s for smp in samples]),
                   np.vstack([smp.x for smp in samples]),
                   None if any(y is None for y in ys) else np.array(ys),
                   None if any(u is None for u in us) else np.vstack(us),
                   nodes)


def concat(parts: Sequence[Dataset]) -> Dataset:
    first = parts[0]
    return Dataset(
        np.concatenate([p.s for p in parts]),
        np.vstack([p.x for p in parts]),
        None if first.y is None else np.concatenate([p.y for p in parts]),
        None if first.u is None else np.vstack([p.u for p in parts]),
        first.nodes,
        np.concatenate([p.ids for p in parts]),
        dict(first.meta),
    )


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------

def topological_order(adjacency) -> list[int]:
    """Kahn's algorithm, ties broken by the smallest node index."""
    A = np.asarray(adjacency)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"adjacency must be square, got {A.shape}")
    d = A.shape[0]
    support = A != 0
    indeg = support.sum(axis=0).astype(int)
    import heapq
    ready = [i for i in range(d) if indeg[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        j = heapq.heappop(ready)
        order.append(j)
        for i in np.flatnonzero(support[j]):
            indeg[i] -= 1
            if indeg[i] == 0:
                heapq.heappush(ready, int(i))
    if len(order) < d:
        raise CyclicGraphError(int(np.flatnonzero(indeg > 0)[0]))
    return order


def descendants(adjacency, source: int) -> set[int]:
    support = np.asarray(adjacency) != 0
    seen: set[int] = set()
    stack = [source]
    while stack:
        j = stack.pop()
        for i in np.flatnonzero(support[j]):
            if int(i) not in seen:
                seen.add(int(i))
                stack.append(int(i))
    return seen


def sample_er_dag(nodes: int, edge_prob: float, weight_low: float = 0.5,
                  weight_high: float = 2.0, rng: np.random.Generator | None = None,
                  seed: int | None = None, max_tries: int = 100) -> DagSpec:
    """Erdos-Renyi DAG with node 0 as the sensitive root.

    Node 0 is placed first in a random causal order, so it never has parents.
    Edge weights are uniform on +-[weight_low, weight_high]. The decision node is
    a leaf reachable from node 0; the graph is resampled when none exists.
    """
    if nodes < 2:
        raise ContractError("need at least two nodes")
    if not 0.0 < edge_prob <= 1.0:
        raise ContractError(f"edge_prob must lie in (0, 1], got {edge_prob}")
    if not 0.0 < weight_low < weight_high:
        raise ContractError("weights must satisfy 0 < weight_low < weight_high")
    if rng is None:
        rng = make_rng(0 if seed is None else seed, "graph")
    for _ in range(max_tries):
        order = np.concatenate([[0], 1 + rng.permutation(nodes - 1)])
        A = np.zeros((nodes, nodes))
        for a in range(nodes):
            for b in range(a + 1, nodes):
                if rng.random() < edge_prob:
                    w = rng.uniform(weight_low, weight_high) * rng.choice([-1.0, 1.0])
                    A[order[a], order[b]] = w
        reach = descendants(A, 0)
        leaves = sorted(i for i in reach if not np.any(A[i] != 0))
        if leaves:
            decision = int(leaves[rng.integers(len(leaves))])
            return DagSpec(A, 0, decision, seed)
    raise GenerationError(f"no leaf reachable from the sensitive node after {max_tries} graphs")


# ---------------------------------------------------------------------------
# Structural equations
# ---------------------------------------------------------------------------

def _structural_pass(spec: DagSpec, s: np.ndarray, noise: np.ndarray,
                     nodes: Sequence[int]) -> np.ndarray:
    """Evaluate x_i = 3 * sum_j A[j, i] cos(x_j + 1) + u_i in topological order.

    ``noise`` columns follow ``nodes``; parents are summed in ascending index
    order with an explicit loop so single-row and batch calls agree bitwise.
    """
    A = spec.adjacency
    col = {node: c for c, node in enumerate(nodes)}
    values = {spec.sensitive_index: s}
    out = np.empty_like(noise)
    for i in topological_order(A):
        if i == spec.sensitive_index:
            continue
        if i not in col:
            if np.any(A[i] != 0):
                raise ContractError(f"node {i} is missing but has children")
            continue
        acc = np.zeros(len(s))
        for j in spec.parents(i):
            acc = acc + A[j, i] * np.cos(values[j] + 1.0)
        values[i] = 3.0 * acc + noise[:, col[i]]
        out[:, col[i]] = values[i]
    return out


def generate_data(spec: DagSpec, n: int, rng: np.random.Generator) -> Dataset:
    nodes = tuple(i for i in range(spec.d) if i != spec.sensitive_index)
    s = rng.choice([-1.0, 1.0], size=n)
    u = rng.standard_normal((n, len(nodes)))
    x = _structural_pass(spec, s, u, nodes)
    return Dataset(s, x, None, u, nodes)


def regenerate(spec: DagSpec, dataset: Dataset) -> np.ndarray:
    """Recompute x from the stored (s, u)."""
    if dataset.u is None:
        raise ContractError("dataset carries no exogenous noise")
    return _structural_pass(spec, dataset.s, dataset.u, dataset.nodes)


def ground_truth_counterfactual(spec: DagSpec, sample: Sample | Dataset, nodes=None):
    """Flip s and replay the structural equations with the stored noise.

    Accepts a single ``Sample`` (then ``nodes`` defaults to all non-sensitive
    nodes) or a whole ``Dataset``.
    """
    if isinstance(sample, Dataset):
        if sample.u is None:
            raise ContractError("ground-truth counterfactuals need stored noise")
        s_cf = -sample.s
        x_cf = _structural_pass(spec, s_cf, sample.u, sample.nodes)
        return replace(sample, s=s_cf, x=x_cf, y=None, u=sample.u.copy(),
                       meta=dict(sample.meta))
    if sample.u is None:
        raise ContractError("ground-truth counterfactuals need stored noise")
    if nodes is None:
        nodes = tuple(i for i in range(spec.d) if i != spec.sensitive_index)
    s_cf = np.array([-sample.s])
    x_cf = _structural_pass(spec, s_cf, sample.u[None, :], nodes)[0]
    return Sample(float(s_cf[0]), x_cf, sample.u.copy(), None)


# ---------------------------------------------------------------------------
# Labels and benchmark assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabelBands:
    """Quantile cut points of the decision value."""

    low: float      # 0.01 quantile
    normal_lo: float  # 0.30
    normal_hi: float  # 0.70
    high: float     # 0.85

    @classmethod
    def from_values(cls, values) -> "LabelBands":
        bands = cls(quantile(values, 0.01), quantile(values, 0.30),
                    quantile(values, 0.70), quantile(values, 0.85))
        if not bands.low < bands.normal_lo <= bands.normal_hi < bands.high:
            raise GenerationError(f"degenerate decision quantiles: {bands}")
        return bands

    def anomalous(self, v) -> np.ndarray:
        v = np.asarray(v)
        return (v > self.high) | (v < self.low)

    def normal(self, v) -> np.ndarray:
        v = np.asarray(v)
        return (v >= self.normal_lo) & (v <= self.normal_hi)


def _decision_column(dataset: Dataset, spec: DagSpec) -> int:
    if dataset.nodes is None or spec.decision_index not in dataset.nodes:
        raise ContractError("dataset does not carry the decision node")
    return dataset.nodes.index(spec.decision_index)


def drop_decision(dataset: Dataset, spec: DagSpec) -> Dataset:
    c = _decision_column(dataset, spec)
    keep = [k for k in range(dataset.m) if k != c]
    return replace(dataset, x=dataset.x[:, keep],
                   u=None if dataset.u is None else dataset.u[:, keep],
                   nodes=tuple(dataset.nodes[k] for k in keep), meta=dict(dataset.meta))


def label_anomalies(dataset: Dataset, spec: DagSpec, bands: LabelBands | None = None) -> Dataset:
    """Assign y from the decision value and drop unlabeled samples and the decision column.

    ``bands`` defaults to the quantiles of this dataset's own decision values.
    """
    c = _decision_column(dataset, spec)
    v = dataset.x[:, c]
    if bands is None:
        bands = LabelBands.from_values(v)
    anomalous = bands.anomalous(v)
    normal = bands.normal(v)
    if not normal.any():
        raise GenerationError("no sample falls in the normal band")
    keep = np.flatnonzero(anomalous | normal)
    labeled = dataset.subset(keep)
    labeled.y = anomalous[keep].astype(np.int64)
    return drop_decision(labeled, spec)


@dataclass
class BenchmarkParams:
    nodes: int = 21
    edge_prob: float = 0.2
    weight_low: float = 0.5
    weight_high: float = 2.0
    n_train: int = 12000
    n_test_normal: int = 4000
    n_test_anomaly: int = 400
    flip_fraction: float = 0.5
    pool_size: int = 20000
    batch_size: int = 20000
    max_rounds: int = 200
    drop_decision: bool = False


@dataclass
class Benchmark:
    spec: DagSpec
    bands: LabelBands
    train: Dataset
    test: Dataset
    # full node vectors (decision included) are not needed downstream;
    # counterfactual labels are kept for diagnostics
    train_cf_label: np.ndarray = None
    test_cf_label: np.ndarray = None


def build_benchmark(params: BenchmarkParams | None = None, seed: int = 0) -> Benchmark:
    """Assemble train (normals only) and test splits.

    Label bands come from a reference pool. Within every (split, class) cell,
    half of the retained samples have a ground-truth counterfactual whose label
    differs from the factual one; samples are accepted by rejection until each
    cell's quota is met.
    """
    p = params or BenchmarkParams()
    spec = sample_er_dag(p.nodes, p.edge_prob, p.weight_low, p.weight_high,
                         make_rng(seed, "graph"), seed=seed)
    rng = make_rng(seed, "noise")
    pool = generate_data(spec, p.pool_size, rng)
    bands = LabelBands.from_values(pool.x[:, _decision_column(pool, spec)])

    # (split, class) -> target count
    targets = {("train", 0): p.n_train, ("test", 0): p.n_test_normal, ("test", 1): p.n_test_anomaly}
    quota = {}
    for key, n in targets.items():
        n_flip = int(round(p.flip_fraction * n))
        quota[key + (True,)] = n_flip
        quota[key + (False,)] = n - n_flip
    taken: dict[tuple, list[Dataset]] = {k: [] for k in quota}
    have = {k: 0 for k in quota}
    # normals are split between train and test in proportion to their demand
    order_normal = ["train", "test"]

    for _ in range(p.max_rounds):
        if all(have[k] >= quota[k] for k in quota):
            break
        batch = generate_data(spec, p.batch_size, rng)
        c = _decision_column(batch, spec)
        v = batch.x[:, c]
        cf = ground_truth_counterfactual(spec, batch)
        y = bands.anomalous(v).astype(int)
        labeled = bands.normal(v) | (y == 1)
        flip = bands.anomalous(cf.x[:, c]).astype(int) != y
        for cls in (0, 1):
            for fl in (True, False):
                idx = np.flatnonzero(labeled & (y == cls) & (flip == fl))
                splits = order_normal if cls == 0 else ["test"]
                for split in splits:
                    key = (split, cls, fl)
                    need = quota[key] - have[key]
                    if need <= 0 or idx.size == 0:
                        continue
                    chosen, idx = idx[:need], idx[need:]
                    part = batch.subset(chosen)
                    part.y = np.full(len(chosen), cls, dtype=np.int64)
                    taken[key].append(part)
                    have[key] += len(chosen)
    else:
        if not all(have[k] >= quota[k] for k in quota):
            raise GenerationError(f"benchmark quotas unmet after {p.max_rounds} rounds: {have}")

    def assemble(split: str) -> tuple[Dataset, np.ndarray]:
        parts, cf_labels = [], []
        for key in quota:
            if key[0] == split and taken[key]:
                part = concat(taken[key])
                parts.append(part)
                cf_labels.append(np.where(key[2], 1 - key[1], key[1]) * np.ones(len(part), dtype=int))
        data = concat(parts)
        cf_label = np.concatenate(cf_labels)
        perm = make_rng(seed, "split").permutation(len(data))
        data = data.subset(perm)
        data.ids = np.arange(len(data))
        if p.drop_decision:
            data = drop_decision(data, spec)
        return data, cf_label[perm]

    train, train_cf = assemble("train")
    test, test_cf = assemble("test")
    return Benchmark(spec, bands, train, test, train_cf, test_cf)
