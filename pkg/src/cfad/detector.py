"""Autoencoder anomaly detector with adversarial fine-tuning against a
factual-vs-counterfactual discriminator on the bottleneck codes."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Node, quantile

log = logging.getLogger(__name__)

SWEEP_QUANTILES = (0.8, 0.85, 0.9, 0.95, 0.97, 0.98, 0.99, 0.995, 0.999)


class TrainingError(RuntimeError):
    pass


@dataclass
class DetectorConfig:
    hidden: int = 32
    bottleneck: int = 8
    disc_hidden: int = 16
    pretrain_epochs: int = 300
    lr_pretrain: float = 1e-3
    finetune_epochs: int = 20
    lr_finetune: float = 1e-4
    lr_disc: float = 1e-3
    lambda_fair: float = 1.0
    batch_size: int = 128
    standardize: bool = False
    seed: int = 0


@dataclass
class DetectorParams:
    weights: dict[str, np.ndarray]
    center: np.ndarray
    scale: np.ndarray
    config: DetectorConfig
    stage: str = "init"
    history: list[dict] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.weights["enc.W0"].shape[0]

    def copy(self) -> "DetectorParams":
        return DetectorParams({k: v.copy() for k, v in self.weights.items()}, self.center.copy(),
                              self.scale.copy(), self.config, self.stage,
                              [dict(h) for h in self.history])

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "architecture": {"m": self.m, "hidden": self.config.hidden,
                             "bottleneck": self.config.bottleneck, "activation": "tanh"},
            "config": asdict(self.config),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "weights": _pack(self.weights),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectorParams":
        return cls(_unpack(doc["weights"]), np.asarray(doc["center"]), np.asarray(doc["scale"]),
                   DetectorConfig(**doc["config"]), doc["stage"])


@dataclass
class DiscriminatorParams:
    weights: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {"weights": _pack(self.weights)}

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscriminatorParams":
        return cls(_unpack(doc["weights"]))


@dataclass
class Threshold:
    tau: float
    q: float
    source: str = "train"

    def to_dict(self) -> dict:
        return {"tau": self.tau, "q": self.q, "source": self.source}


def _pack(weights):
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in weights.items()}


def _unpack(doc):
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc.items()}


def _as_matrix(x) -> np.ndarray:
    from .scm import Dataset
    if isinstance(x, Dataset):
        return x.x
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def init_detector(m: int, config: DetectorConfig, center=None, scale=None) -> DetectorParams:
    rng = nx.make_rng(config.seed, "init")
    weights = {}
    weights.update(nx.init_mlp([m, config.hidden, config.bottleneck], rng, "enc."))
    weights.update(nx.init_mlp([config.bottleneck, config.hidden, m], rng, "dec."))
    center = np.zeros(m) if center is None else np.asarray(center, dtype=np.float64)
    scale = np.ones(m) if scale is None else np.asarray(scale, dtype=np.float64)
    return DetectorParams(weights, center, scale, config)


def init_discriminator(config: DetectorConfig) -> DiscriminatorParams:
    rng = nx.make_rng(config.seed + 1, "init")
    return DiscriminatorParams(nx.init_mlp([config.bottleneck, config.disc_hidden, 1], rng, "disc."))


def _scaled(params: DetectorParams, x: np.ndarray) -> np.ndarray:
    if x.shape[1] != params.m:
        raise ContractError(f"expected {params.m} features, got {x.shape[1]}")
    return (x - params.center) / params.scale


def encode(params: DetectorParams, x) -> np.ndarray:
    return nx.mlp_numpy(params.weights, "enc.", _scaled(params, _as_matrix(x)))


def reconstruct(params: DetectorParams, x) -> np.ndarray:
    """Reconstruction in the detector's input space (z-scored when ``standardize`` is on)."""
    z = encode(params, x)
    return nx.mlp_numpy(params.weights, "dec.", z)


def anomaly_scores(params: DetectorParams, x) -> np.ndarray:
    """Squared reconstruction error per row, in the detector's input space."""
    xs = _scaled(params, _as_matrix(x))
    z = nx.mlp_numpy(params.weights, "enc.", xs)
    xr = nx.mlp_numpy(params.weights, "dec.", z)
    return np.sum((xs - xr) ** 2, axis=1)


def anomaly_score(params: DetectorParams, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("anomaly_score takes a single vector")
    return float(anomaly_scores(params, x[None, :])[0])


def discriminator_prob(params: DetectorParams, disc: DiscriminatorParams, x) -> np.ndarray:
    z = encode(params, x)
    return nx.mlp_numpy(disc.weights, "disc.", z, output="sigmoid")[:, 0]


# ---------------------------------------------------------------------------
# Losses (graph-building)
# ---------------------------------------------------------------------------

def ae_loss(weights, xs: np.ndarray):
    """(1/2N) sum ||x - dec(enc(x))||^2 on already-scaled rows."""
    z = nx.mlp(weights, "enc.", xs)
    xr = nx.mlp(weights, "dec.", z)
    return nx.mul(nx.sq_error(xr, xs), 0.5 / len(xs))


def critic_loss(weights, disc_weights, xs: np.ndarray, xs_cf: np.ndarray):
    """L_C = mean[log C(z) + log(1 - C(z_cf))], written with log-sigmoids of logits."""
    z = nx.mlp(weights, "enc.", xs)
    z_cf = nx.mlp(weights, "enc.", xs_cf)
    a = nx.mlp(disc_weights, "disc.", z)
    a_cf = nx.mlp(disc_weights, "disc.", z_cf)
    both = nx.add(nx.log_sigmoid(a), nx.log_sigmoid(nx.mul(a_cf, -1.0)))
    return nx.mean(both)


def _grads(loss: Node, nodes: dict[str, Node]) -> dict[str, np.ndarray]:
    names = list(nodes)
    return dict(zip(names, nx.backward(loss, [nodes[n] for n in names])))


def _check_finite(value, what: str):
    if not np.all(np.isfinite(value)):
        raise TrainingError(f"{what} is not finite")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def pretrain(train, config: DetectorConfig | None = None, epochs: int | None = None) -> DetectorParams:
    """Minibatch Adam on the reconstruction loss of normal training rows."""
    config = config or DetectorConfig()
    x = _as_matrix(train)
    if len(x) == 0:
        raise ContractError("empty training set")
    if config.standardize:
        center, scale = x.mean(axis=0), x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        center, scale = np.zeros(x.shape[1]), np.ones(x.shape[1])
    params = init_detector(x.shape[1], config, center, scale)
    epochs = config.pretrain_epochs if epochs is None else epochs
    xs = _scaled(params, x)
    opt = nx.Adam(params.weights, lr=config.lr_pretrain)
    rng = nx.make_rng(config.seed, "shuffle")
    for epoch in range(epochs):
        perm = rng.permutation(len(xs))
        total = 0.0
        for i in range(0, len(xs), config.batch_size):
            batch = xs[perm[i:i + config.batch_size]]
            nodes = {k: Node(v) for k, v in params.weights.items()}
            loss = ae_loss(nodes, batch)
            _check_finite(loss.value, "reconstruction loss")
            opt.step(_grads(loss, nodes))
            total += float(loss.value) * len(batch)
        params.history.append({"stage": "pretrain", "epoch": epoch, "loss": total / len(xs)})
    params.stage = "pretrained"
    return params


def finetune_adversarial(params: DetectorParams, factual, counterfactual,
                         lambda_fair: float | None = None, lr_finetune: float | None = None,
                         config: DetectorConfig | None = None, epochs: int | None = None,
                         disc: DiscriminatorParams | None = None
                         ) -> tuple[DetectorParams, DiscriminatorParams]:
    """Alternate one discriminator ascent step and one autoencoder descent step per minibatch.

    The discriminator maximizes L_C; the autoencoder minimizes L_AE + lambda * L_C
    on the same minibatch of aligned (factual, counterfactual) rows. The input
    ``params`` are left untouched.
    """
    config = config or params.config
    lam = config.lambda_fair if lambda_fair is None else lambda_fair
    lr = config.lr_finetune if lr_finetune is None else lr_finetune
    epochs = config.finetune_epochs if epochs is None else epochs
    x = _as_matrix(factual)
    x_cf = _as_matrix(counterfactual)
    if x.shape != x_cf.shape:
        raise ContractError(f"factual {x.shape} and counterfactual {x_cf.shape} rows are not aligned")
    params = params.copy()
    disc = init_discriminator(config) if disc is None else DiscriminatorParams(
        {k: v.copy() for k, v in disc.weights.items()})
    xs, xs_cf = _scaled(params, x), _scaled(params, x_cf)
    opt_ae = nx.Adam(params.weights, lr=lr)
    opt_d = nx.Adam(disc.weights, lr=config.lr_disc)
    rng = nx.make_rng(config.seed + 1, "shuffle")
    for epoch in range(epochs):
        perm = rng.permutation(len(xs))
        tot_ae = tot_c = 0.0
        for i in range(0, len(xs), config.batch_size):
            idx = perm[i:i + config.batch_size]
            b, b_cf = xs[idx], xs_cf[idx]
            # discriminator: ascend L_C with the autoencoder held fixed
            dnodes = {k: Node(v) for k, v in disc.weights.items()}
            lc = critic_loss(params.weights, dnodes, b, b_cf)
            _check_finite(lc.value, "critic loss")
            opt_d.step({k: -g for k, g in _grads(lc, dnodes).items()})
            # autoencoder: descend L_AE + lambda * L_C with the discriminator fixed
            nodes = {k: Node(v) for k, v in params.weights.items()}
            l_ae = ae_loss(nodes, b)
            l_c = critic_loss(nodes, disc.weights, b, b_cf)
            total = nx.add(l_ae, nx.mul(l_c, lam))
            _check_finite(total.value, "fine-tuning loss")
            opt_ae.step(_grads(total, nodes))
            tot_ae += float(l_ae.value) * len(idx)
            tot_c += float(l_c.value) * len(idx)
        params.history.append({"stage": "finetune", "epoch": epoch,
                               "loss": tot_ae / len(xs), "critic": tot_c / len(xs)})
    params.stage = "finetuned"
    return params, disc


def fit_threshold(params: DetectorParams, train, q: float = 0.95) -> Threshold:
    x = _as_matrix(train)
    if len(x) == 0:
        raise ContractError("cannot fit a threshold on an empty set")
    return Threshold(quantile(anomaly_scores(params, x), q), q)


def predict_scores(scores, threshold: Threshold | float) -> np.ndarray:
    tau = threshold.tau if isinstance(threshold, Threshold) else float(threshold)
    return (np.asarray(scores) > tau).astype(np.int64)


def predict(params: DetectorParams, threshold: Threshold | float, x) -> np.ndarray | int:
    """1 where the score strictly exceeds tau; scalar output for a single vector."""
    if isinstance(x, np.ndarray) and x.ndim == 1:
        return int(predict_scores(anomaly_scores(params, x[None, :]), threshold)[0])
    return predict_scores(anomaly_scores(params, x), threshold)


def discriminator_accuracy(params: DetectorParams, disc: DiscriminatorParams, factual, counterfactual) -> float:
    p = discriminator_prob(params, disc, factual)
    p_cf = discriminator_prob(params, disc, counterfactual)
    return 0.5 * (float(np.mean(p > 0.5)) + float(np.mean(p_cf <= 0.5)))
