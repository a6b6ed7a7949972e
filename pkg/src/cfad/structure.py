"""Causal structure learning with a variable-wise graph autoencoder.

Stage one learns the weighted adjacency under the trace-exponential acyclicity
constraint (augmented Lagrangian). Stage two freezes the encoder and the pruned
adjacency and refits a second decoder that maps embeddings back to data space
before message passing, which yields the scalar map ``fhat = refit_dec o enc``.

Data are laid out node-major inside the models: a batch of N samples over D
nodes becomes a (D*N, 1) column so the shared scalar MLPs run in one matmul.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Node
from .scm import Dataset, topological_order

log = logging.getLogger(__name__)


class NonConvergenceError(RuntimeError):
    def __init__(self, h: float):
        super().__init__(f"acyclicity constraint not met: h = {h:.3e}")
        self.h = h


class TrainingError(RuntimeError):
    pass


@dataclass
class GaeConfig:
    embed_dim: int = 16
    hidden: int = 32
    lambda_sparse: float = 0.01
    lr: float = 3e-3
    lr_adjacency: float = 1e-2
    adjacency_init: float = 0.5
    knot_scale: float = 2.0
    inner_steps: int = 600
    max_outer: int = 20
    h_tol: float = 1e-8
    h_fail: float = 1e-2
    rho_init: float = 1.0
    rho_growth: float = 10.0
    rho_max: float = 1e8
    shrink: float = 0.25
    restarts: int = 6
    max_samples: int | None = 2000
    batch_size: int | None = 256
    refit_steps: int = 1500
    refit_lr: float = 3e-3
    prune_eps: float = 0.3
    sensitive_index: int = 0
    seed: int = 0


@dataclass
class GaeParams:
    weights: dict[str, np.ndarray]
    adjacency: np.ndarray
    mask: np.ndarray
    config: GaeConfig
    history: list[dict] = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.adjacency.shape[0]


def adjacency_mask(d: int, sensitive_index: int = 0) -> np.ndarray:
    mask = np.ones((d, d))
    np.fill_diagonal(mask, 0.0)
    mask[:, sensitive_index] = 0.0
    return mask


def init_gae(d: int, config: GaeConfig, rng: np.random.Generator,
             data_range: tuple[float, float] | None = None) -> GaeParams:
    """Glorot init, except the encoder's first layer when ``data_range`` is given.

    Then each hidden tanh unit gets its knee at a point drawn inside the data
    range, so the scalar encoder can bend anywhere the values live; a default
    init puts every knee at zero and cannot follow cos over a wide range.
    """
    k, h = config.embed_dim, config.hidden
    weights = {}
    weights.update(nx.init_mlp([1, h, k], rng, "enc."))
    if data_range is not None:
        lo, hi = data_range
        w = rng.uniform(0.5, 1.0, h) * config.knot_scale * rng.choice([-1.0, 1.0], h)
        weights["enc.W0"][:] = w[None, :]
        weights["enc.b0"][:] = (-w * rng.uniform(lo, hi, h))[None, :]
    weights.update(nx.init_mlp([k, h, 1], rng, "dec."))
    mask = adjacency_mask(d, config.sensitive_index)
    A = rng.uniform(-config.adjacency_init, config.adjacency_init, size=(d, d)) * mask
    return GaeParams(weights, A, mask, config)


# ---------------------------------------------------------------------------
# Forward passes (graph-building versions take dicts of Nodes)
# ---------------------------------------------------------------------------

def _column(data: np.ndarray) -> np.ndarray:
    """(N, D) -> node-major (D*N, 1)."""
    return np.ascontiguousarray(data.T).reshape(-1, 1)


def _encode(weights, col):
    return nx.mlp(weights, "enc.", col)


def _gae_graph(weights, A, data: np.ndarray):
    N, D = data.shape
    k = weights["enc.W1"].shape[1]
    H = _encode(weights, _column(data))
    msg = nx.matmul(nx.transpose(A), nx.reshape(H, (D, N * k)))
    out = nx.mlp(weights, "dec.", nx.reshape(msg, (D * N, k)))
    return nx.transpose(nx.reshape(out, (D, N)))


def gae_forward(params: GaeParams, data: np.ndarray) -> np.ndarray:
    """Reconstruction ``dec(A^T enc(d))`` for rows of ``data`` (shape (N, m+1))."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[1] != params.d:
        raise ContractError(f"expected {params.d} columns, got {data.shape[1]}")
    return _gae_graph(params.weights, params.adjacency * params.mask, data).value


def gae_loss(weights, A, mask, data, lambda_sparse, alpha, rho):
    """Augmented-Lagrangian objective; returns (loss node, h node)."""
    N = data.shape[0]
    Am = nx.mul(A, mask)
    recon = _gae_graph(weights, Am, data)
    loss = nx.mul(nx.sq_error(recon, data), 0.5 / N)
    loss = nx.add(loss, nx.mul(nx.sum_(nx.abs_(Am)), lambda_sparse))
    h = nx.acyclicity_node(Am)
    loss = nx.add(loss, nx.add(nx.mul(h, alpha), nx.mul(nx.square(h), 0.5 * rho)))
    return loss, h


def _subsample(data: np.ndarray, max_samples: int | None, rng) -> np.ndarray:
    if max_samples is None or len(data) <= max_samples:
        return data
    idx = np.sort(rng.choice(len(data), size=max_samples, replace=False))
    return data[idx]


def _batches(n: int, batch_size: int | None, rng):
    """Endless stream of index arrays; full batch when ``batch_size`` is None."""
    if batch_size is None or batch_size >= n:
        while True:
            yield slice(None)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


class _AlRun:
    """One augmented-Lagrangian trajectory: parameters, optimizers and batch stream."""

    def __init__(self, data: np.ndarray, config: GaeConfig, restart: int):
        lo, hi = np.quantile(data, [0.01, 0.99])
        self.data, self.config = data, config
        self.params = init_gae(data.shape[1], config, nx.make_rng(config.seed, "init", restart),
                               (float(lo), float(hi)))
        self.store = dict(self.params.weights)
        self.store["A"] = self.params.adjacency
        self.opt = nx.Adam(self.params.weights, lr=config.lr)
        self.opt_A = nx.Adam({"A": self.store["A"]}, lr=config.lr_adjacency)
        self.batches = _batches(len(data), config.batch_size, nx.make_rng(config.seed, "shuffle", restart))
        self.alpha, self.rho = 0.0, config.rho_init
        self.h_prev = self.best_h = np.inf
        self.h = float(nx.acyclicity(self.params.adjacency))

    def round(self, outer: int) -> None:
        """Inner Adam loop at fixed (alpha, rho), then log h and the reconstruction."""
        cfg, params, store = self.config, self.params, self.store
        for _ in range(cfg.inner_steps):
            nodes = {k: Node(v) for k, v in store.items()}
            A = nodes.pop("A")
            loss, _ = gae_loss(nodes, A, params.mask, self.data[next(self.batches)],
                               cfg.lambda_sparse, self.alpha, self.rho)
            if not np.isfinite(loss.value):
                raise TrainingError("GAE loss is not finite")
            names = list(nodes)
            grads = nx.backward(loss, [nodes[k] for k in names] + [A])
            self.opt_A.step({"A": grads[-1] * params.mask})
            self.opt.step(dict(zip(names, grads[:-1])))
            store["A"] *= params.mask
        self.h = float(nx.acyclicity(store["A"]))
        self.best_h = min(self.best_h, self.h)
        self.recon = 0.5 / len(self.data) * float(np.sum((gae_forward(params, self.data) - self.data) ** 2))
        params.history.append({"outer": outer, "h": self.h, "best_h": self.best_h,
                               "rho": self.rho, "alpha": self.alpha, "recon": self.recon})
        log.info("GAE outer %d: h=%.3e rho=%.1e recon=%.4f", outer, self.h, self.rho, self.recon)

    def update_multipliers(self) -> None:
        if self.h > self.config.shrink * self.h_prev:
            self.rho = min(self.rho * self.config.rho_growth, self.config.rho_max)
        self.alpha += self.rho * self.h
        self.h_prev = self.h


def train_gae(train: Dataset | np.ndarray, config: GaeConfig | None = None) -> GaeParams:
    """Learn the adjacency by augmented Lagrangian over Adam inner loops.

    With ``restarts`` > 1, that many initializations each run the first outer
    round and only the one with the lowest reconstruction error continues.
    From a dense random adjacency some starts settle into a wrong ordering
    that later rounds cannot undo, and the first round already shows it.
    """
    config = config or GaeConfig()
    data = train.data_matrix() if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    if len(data) == 0:
        raise ContractError("empty training set")
    data = _subsample(data, config.max_samples, nx.make_rng(config.seed, "shuffle"))
    if config.max_outer < 1:
        return _AlRun(data, config, 0).params
    runs = []
    for r in range(max(1, config.restarts)):
        run = _AlRun(data, config, r)
        run.round(0)
        runs.append(run)
    run = min(runs, key=lambda c: (c.recon, c.h))
    run.params.history[0]["restart_recon"] = [c.recon for c in runs]
    for outer in range(1, config.max_outer + 1):
        if run.h < config.h_tol:
            break
        run.update_multipliers()
        if outer == config.max_outer:
            break
        run.round(outer)
    if run.h >= config.h_fail:
        raise NonConvergenceError(run.h)
    return run.params


# ---------------------------------------------------------------------------
# Pruning and the refit decoder
# ---------------------------------------------------------------------------

def _find_cycle(support: np.ndarray) -> list[tuple[int, int]] | None:
    d = support.shape[0]
    color = [0] * d
    parent = [-1] * d
    for start in range(d):
        if color[start]:
            continue
        stack = [(start, iter(np.flatnonzero(support[start])))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = 2
                stack.pop()
                continue
            nxt = int(nxt)
            if color[nxt] == 0:
                color[nxt] = 1
                parent[nxt] = node
                stack.append((nxt, iter(np.flatnonzero(support[nxt]))))
            elif color[nxt] == 1:
                cycle = [(node, nxt)]
                cur = node
                while cur != nxt:
                    cycle.append((parent[cur], cur))
                    cur = parent[cur]
                return cycle
    return None


def prune(adjacency: np.ndarray, eps: float) -> tuple[np.ndarray, list[int]]:
    """Drop |A| < eps, then break any surviving cycle at its weakest edge."""
    A = np.array(adjacency, dtype=np.float64)
    A[np.abs(A) < eps] = 0.0
    while True:
        cycle = _find_cycle(A != 0)
        if cycle is None:
            break
        j, i = min(cycle, key=lambda e: abs(A[e]))
        A[j, i] = 0.0
    return A, topological_order(A)


@dataclass
class ScmEstimate:
    adjacency: np.ndarray
    weights: dict[str, np.ndarray]
    prune_eps: float
    order: list[int]
    sensitive_index: int = 0
    gae_adjacency: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.adjacency.shape[0]

    def encoder(self) -> dict:
        return {k: v for k, v in self.weights.items() if k.startswith("enc.")}

    def to_dict(self) -> dict:
        return {
            "adjacency": self.adjacency.tolist(),
            "gae_adjacency": None if self.gae_adjacency is None else self.gae_adjacency.tolist(),
            "prune_eps": self.prune_eps,
            "order": list(self.order),
            "sensitive_index": self.sensitive_index,
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in self.weights.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScmEstimate":
        weights = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                   for k, v in doc["weights"].items()}
        gae_A = doc.get("gae_adjacency")
        return cls(np.asarray(doc["adjacency"], dtype=np.float64), weights,
                   float(doc["prune_eps"]), [int(i) for i in doc["order"]],
                   int(doc.get("sensitive_index", 0)),
                   None if gae_A is None else np.asarray(gae_A, dtype=np.float64))


def _refit_graph(weights, embed: np.ndarray, A: np.ndarray, D: int, N: int):
    vals = nx.mlp(weights, "ref.", embed)                 # (D*N, 1)
    return nx.transpose(nx.matmul(A.T, nx.reshape(vals, (D, N))))


def train_refit_decoder(train: Dataset | np.ndarray, gae: GaeParams, adjacency: np.ndarray,
                        config: GaeConfig | None = None, steps: int | None = None) -> dict:
    """Fit ``ref.`` decoder weights with the encoder and ``adjacency`` frozen."""
    config = config or gae.config
    steps = config.refit_steps if steps is None else steps
    data = train.data_matrix() if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    data = _subsample(data, config.max_samples, nx.make_rng(config.seed, "shuffle"))
    N, D = data.shape
    embed = nx.mlp_numpy(gae.weights, "enc.", _column(data))
    k = embed.shape[1]
    store = nx.init_mlp([k, config.hidden, 1], nx.make_rng(config.seed + 1, "init"), "ref.")
    opt = nx.Adam(store, lr=config.refit_lr)
    # embeddings stay node-major: (D, N, k)
    embed3 = embed.reshape(D, N, k)
    batches = _batches(N, config.batch_size, nx.make_rng(config.seed + 1, "shuffle"))
    for _ in range(steps):
        idx = next(batches)
        sub = data[idx]
        n_b = len(sub)
        nodes = {name: Node(v) for name, v in store.items()}
        recon = _refit_graph(nodes, embed3[:, idx].reshape(D * n_b, k), adjacency, D, n_b)
        loss = nx.mul(nx.sq_error(recon, sub), 0.5 / n_b)
        if not np.isfinite(loss.value):
            raise TrainingError("refit loss is not finite")
        names = list(nodes)
        opt.step(dict(zip(names, nx.backward(loss, [nodes[n] for n in names]))))
    return store


def rescale(gae: GaeParams, c: float) -> GaeParams:
    """The same GAE with A multiplied by c > 0 and the decoder input layer by 1/c.

    ``dec(A^T enc)`` sees A only through a linear layer, so the function is
    unchanged; only the scale the prune threshold acts on moves.
    """
    weights = dict(gae.weights)
    weights["dec.W0"] = gae.weights["dec.W0"] / c
    return GaeParams(weights, gae.adjacency * gae.mask * c, gae.mask, gae.config, list(gae.history))


def fhat_scale(train: Dataset | np.ndarray, weights: dict, config: GaeConfig) -> float:
    """Standard deviation of the refit map over the training values of all nodes."""
    data = train.data_matrix() if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    data = _subsample(data, config.max_samples, nx.make_rng(config.seed, "shuffle"))
    emb = nx.mlp_numpy(weights, "enc.", _column(data))
    return float(np.std(nx.mlp_numpy(weights, "ref.", emb)))


def learn_scm(train: Dataset | np.ndarray, config: GaeConfig | None = None) -> tuple[ScmEstimate, GaeParams]:
    """train_gae, canonical scale, prune, then refit the decoder on the pruned graph.

    L1 shrinks A while the decoders absorb the slack, so the raw scale of A is
    arbitrary. A first refit on the unpruned graph gives fhat; A is rescaled so
    that fhat has unit standard deviation on the training values, and the
    threshold then applies on that scale.
    """
    config = config or GaeConfig()
    gae = train_gae(train, config)
    ref0 = train_refit_decoder(train, gae, gae.adjacency * gae.mask, config)
    c = fhat_scale(train, {**gae.weights, **ref0}, config)
    if not np.isfinite(c) or c <= 0.0:
        raise TrainingError("refit map is constant; cannot fix the adjacency scale")
    gae = rescale(gae, c)
    A_pruned, order = prune(gae.adjacency, config.prune_eps)
    ref = train_refit_decoder(train, gae, A_pruned, config)
    weights = dict(gae.weights)
    weights.update(ref)
    est = ScmEstimate(A_pruned, weights, config.prune_eps, order,
                      config.sensitive_index, gae.adjacency.copy())
    return est, gae


def fhat(estimate: ScmEstimate, value) -> np.ndarray:
    """Learned scalar map applied elementwise: refit decoder after shared encoder."""
    v = np.asarray(value, dtype=np.float64)
    emb = nx.mlp_numpy(estimate.weights, "enc.", v.reshape(-1, 1))
    out = nx.mlp_numpy(estimate.weights, "ref.", emb)
    return out.reshape(v.shape) if v.shape else float(out[0, 0])


def gae_path_structural(estimate: ScmEstimate, data: np.ndarray) -> np.ndarray:
    """Per-node structural part under the first decoder: dec(sum_j A_ji enc(d_j))."""
    data = np.atleast_2d(data)
    N, D = data.shape
    emb = nx.mlp_numpy(estimate.weights, "enc.", _column(data))
    k = emb.shape[1]
    msg = (estimate.adjacency.T @ emb.reshape(D, N * k)).reshape(D * N, k)
    return nx.mlp_numpy(estimate.weights, "dec.", msg).reshape(D, N).T


def refit_reconstruct(estimate: ScmEstimate, data: np.ndarray) -> np.ndarray:
    """A^T fhat(d): the structural part under the refit decoder."""
    data = np.atleast_2d(data)
    return fhat(estimate, data) @ estimate.adjacency


def structural_hamming_distance(A_est: np.ndarray, A_true: np.ndarray) -> int:
    """Missing + extra + reversed edges (a reversal counts once)."""
    E = A_est != 0
    T = A_true != 0
    diff = E != T
    # a reversed edge shows up twice in diff: once missing, once extra
    rev = E & ~T & T.T & ~E.T
    return int(diff.sum() - rev.sum())
