"""Conditional VAE over the per-edge distances of an extended molecular graph.

The encoder turns (graph, distances) into one Gaussian latent per node; the
decoder turns (graph, latent) back into one Gaussian per edge. Both are
message-passing networks whose weights are shared across graphs of any size.
Training maximizes the evidence lower bound, i.e. a single-sample
reparameterized reconstruction log-likelihood minus the closed-form KL
divergence from the per-node posterior to a standard-normal prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import molgraph, nnet
from .errors import NumericalError
from .molgraph import DistanceSet, ExtendedGraph
from .nnet import ShapeError, Tensor

LOG_TWO_PI = math.log(2.0 * math.pi)

# Sum aggregation over incident edges grows activations multiplicatively with
# the message passes; small output gains on the message MLPs keep the state
# scale near one, and the read-out heads start with near-zero outputs.
MESSAGE_GAIN = 0.1
READOUT_GAIN = 0.01


@dataclass
class CvaeConfig:
    """Model and training hyperparameters.

    Defaults: three message passes, state width 10, hidden layers of 50,
    minibatches of 32 at learning rate 0.001.
    """

    message_passes: int = 3
    node_state: int = 10
    edge_state: int = 10
    hidden: int = 50
    readout_hidden: int = 50
    variance_floor: float = 1e-6
    variance_ceiling: float = 1e6
    batch_size: int = 32
    learning_rate: float = 0.001
    epochs: int = 30
    validation_fraction: float = 0.1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "CvaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class MessageBlock:
    """One message pass: a symmetric edge update followed by a node update.

    The edge MLP sees (edge state, endpoint states) in both endpoint orders
    and the two results are summed, so the update cannot depend on which
    endpoint was stored first. Node states are updated from the sum of their
    incident updated edge states.
    """

    def __init__(self, node_state: int, edge_state: int, hidden: int,
                 rng: np.random.Generator):
        self.edge_update = nnet.Mlp(
            (edge_state + 2 * node_state, hidden, hidden, edge_state), rng,
            out_gain=MESSAGE_GAIN,
        )
        self.node_update = nnet.Mlp(
            (node_state + edge_state, hidden, hidden, node_state), rng,
            out_gain=MESSAGE_GAIN,
        )

    def __call__(self, v: Tensor, e: Tensor, src, dst, n_nodes: int):
        h_src = nnet.rows(v, src)
        h_dst = nnet.rows(v, dst)
        e_new = nnet.add(
            self.edge_update(nnet.concat([e, h_src, h_dst], axis=1)),
            self.edge_update(nnet.concat([e, h_dst, h_src], axis=1)),
        )
        agg = nnet.add(
            nnet.scatter_sum(e_new, src, n_nodes),
            nnet.scatter_sum(e_new, dst, n_nodes),
        )
        v_new = self.node_update(nnet.concat([v, agg], axis=1))
        return v_new, e_new


class ModelParams:
    """All trainable weights of the encoder and decoder networks."""

    def __init__(self, config: CvaeConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        fv, fe = molgraph.NODE_FEATURE_DIM, molgraph.EDGE_FEATURE_DIM

        self.enc_node_embed = nnet.Mlp((fv, c.hidden, c.hidden, c.node_state), rng)
        self.enc_edge_embed = nnet.Mlp((fe + 1, c.hidden, c.hidden, c.edge_state), rng)
        self.enc_passes = [
            MessageBlock(c.node_state, c.edge_state, c.hidden, rng)
            for _ in range(c.message_passes)
        ]
        node_head = (c.node_state, c.readout_hidden, c.readout_hidden, 1)
        self.enc_mean = nnet.Mlp(node_head, rng, out_gain=READOUT_GAIN)
        self.enc_logvar = nnet.Mlp(node_head, rng, out_gain=READOUT_GAIN)

        self.dec_node_embed = nnet.Mlp((fv + 1, c.hidden, c.hidden, c.node_state), rng)
        self.dec_edge_embed = nnet.Mlp((fe, c.hidden, c.hidden, c.edge_state), rng)
        self.dec_passes = [
            MessageBlock(c.node_state, c.edge_state, c.hidden, rng)
            for _ in range(c.message_passes)
        ]
        edge_head = (c.edge_state, c.readout_hidden, c.readout_hidden, 1)
        self.dec_mean = nnet.Mlp(edge_head, rng, out_gain=READOUT_GAIN)
        self.dec_logvar = nnet.Mlp(edge_head, rng, out_gain=READOUT_GAIN)

        self._named: dict[str, Tensor] = {}
        for name, mlp in self._mlps():
            for li, layer in enumerate(mlp.layers):
                self._named[f"{name}.{li}.weight"] = layer.weight
                self._named[f"{name}.{li}.bias"] = layer.bias

    def _mlps(self):
        yield "enc.node_embed", self.enc_node_embed
        yield "enc.edge_embed", self.enc_edge_embed
        for t, block in enumerate(self.enc_passes):
            yield f"enc.pass{t}.edge", block.edge_update
            yield f"enc.pass{t}.node", block.node_update
        yield "enc.mean", self.enc_mean
        yield "enc.logvar", self.enc_logvar
        yield "dec.node_embed", self.dec_node_embed
        yield "dec.edge_embed", self.dec_edge_embed
        for t, block in enumerate(self.dec_passes):
            yield f"dec.pass{t}.edge", block.edge_update
            yield f"dec.pass{t}.node", block.node_update
        yield "dec.mean", self.dec_mean
        yield "dec.logvar", self.dec_logvar

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._named)

    def parameters(self) -> list[Tensor]:
        return list(self._named.values())

    def values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._named.items()}

    def set_values(self, arrays: dict) -> None:
        missing = set(self._named) - set(arrays)
        if missing:
            raise ShapeError(f"checkpoint is missing parameters: {sorted(missing)[:3]}...")
        for name, t in self._named.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name}: stored shape {a.shape} != expected {t.data.shape}"
                )
            t.data = a.copy()

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.config, seed=0)
        clone.set_values(self.values())
        return clone


@dataclass
class NodeGaussians:
    """Per-node posterior mean and variance over the latent code."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ShapeError("mean and variance must be equal-length vectors")
        if not (self.var > 0.0).all():
            raise ShapeError("latent variances must be positive")

    def __len__(self) -> int:
        return self.mean.shape[0]


@dataclass
class LatentCode:
    """One latent scalar per node."""

    z: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 1:
            raise ShapeError("latent code must be a flat vector")

    def __len__(self) -> int:
        return self.z.shape[0]


@dataclass
class GaussianEdgeDist:
    """Per-edge Gaussian over distance, aligned with the graph's edge list."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ShapeError("mean and variance must be equal-length vectors")
        if not (self.var > 0.0).all():
            raise ShapeError("distance variances must be positive")

    def __len__(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


def _distance_values(distances, eg: ExtendedGraph) -> np.ndarray:
    d = distances.values if isinstance(distances, DistanceSet) else np.asarray(distances)
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (eg.n_edges,):
        raise ShapeError(
            f"{d.shape[0] if d.ndim == 1 else d.shape} distances for a graph "
            f"with {eg.n_edges} edges"
        )
    return d


def _encode_core(p: ModelParams, node_feat, edge_feat, src, dst, n_nodes, d_col):
    e_in = nnet.concat([edge_feat, d_col], axis=1)
    v = p.enc_node_embed(node_feat)
    e = p.enc_edge_embed(e_in)
    for block in p.enc_passes:
        v, e = block(v, e, src, dst, n_nodes)
    mean = p.enc_mean(v)
    logvar = nnet.clip(p.enc_logvar(v), math.log(p.config.variance_floor),
                       math.log(p.config.variance_ceiling))
    return mean, logvar


def _decode_core(p: ModelParams, node_feat, edge_feat, src, dst, n_nodes, z_col):
    v_in = nnet.concat([node_feat, z_col], axis=1)
    v = p.dec_node_embed(v_in)
    e = p.dec_edge_embed(edge_feat)
    for block in p.dec_passes:
        v, e = block(v, e, src, dst, n_nodes)
    mean = p.dec_mean(e)
    logvar = nnet.clip(p.dec_logvar(e), math.log(p.config.variance_floor),
                       math.log(p.config.variance_ceiling))
    return mean, logvar


def encode(p: ModelParams, eg: ExtendedGraph, distances) -> NodeGaussians:
    """Posterior Gaussians for the latent code given observed edge distances."""
    d = _distance_values(distances, eg)
    mean, logvar = _encode_core(
        p,
        nnet.constant(eg.node_features),
        nnet.constant(eg.edge_features),
        eg.src,
        eg.dst,
        eg.n_nodes,
        nnet.constant(d[:, None]),
    )
    return NodeGaussians(mean.data[:, 0], np.exp(logvar.data[:, 0]))


def reparameterize(ng: NodeGaussians, rng: np.random.Generator) -> LatentCode:
    """Draw z = mean + std * eps with eps standard normal."""
    eps = rng.standard_normal(len(ng))
    return LatentCode(ng.mean + np.sqrt(ng.var) * eps)


def decode(p: ModelParams, eg: ExtendedGraph, z) -> GaussianEdgeDist:
    """Per-edge distance Gaussians given a latent code."""
    zv = z.z if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float64)
    if zv.shape != (eg.n_nodes,):
        raise ShapeError(f"latent length {zv.shape} does not match {eg.n_nodes} nodes")
    mean, logvar = _decode_core(
        p,
        nnet.constant(eg.node_features),
        nnet.constant(eg.edge_features),
        eg.src,
        eg.dst,
        eg.n_nodes,
        nnet.constant(zv[:, None]),
    )
    return GaussianEdgeDist(mean.data[:, 0], np.exp(logvar.data[:, 0]))


def _elbo_tensors(p: ModelParams, node_feat, edge_feat, src, dst, n_nodes,
                  d: np.ndarray, noise: np.ndarray):
    """ELBO of one (possibly batched) graph as tensors: (elbo, recon, kl)."""
    v_const = nnet.constant(node_feat)
    e_const = nnet.constant(edge_feat)
    d_col = nnet.constant(d[:, None])

    mean_z, logvar_z = _encode_core(p, v_const, e_const, src, dst, n_nodes, d_col)
    sigma_z = nnet.exp(nnet.scale(logvar_z, 0.5))
    z = nnet.add(mean_z, nnet.mul(sigma_z, nnet.constant(noise[:, None])))
    mean_d, logvar_d = _decode_core(p, v_const, e_const, src, dst, n_nodes, z)

    var_d = nnet.exp(logvar_d)
    diff = nnet.sub(d_col, mean_d)
    per_edge = nnet.add(
        nnet.add(nnet.constant(LOG_TWO_PI), logvar_d),
        nnet.div(nnet.square(diff), var_d),
    )
    recon = nnet.scale(nnet.tsum(per_edge), -0.5)

    var_z = nnet.exp(logvar_z)
    per_node = nnet.sub(
        nnet.add(nnet.square(mean_z), var_z),
        nnet.add(logvar_z, nnet.constant(1.0)),
    )
    kl = nnet.scale(nnet.tsum(per_node), 0.5)
    return nnet.sub(recon, kl), recon, kl


def _check_finite(recon: Tensor, kl: Tensor) -> None:
    if not np.isfinite(recon.data):
        raise NumericalError("reconstruction log-likelihood is not finite",
                             term="reconstruction")
    if not np.isfinite(kl.data):
        raise NumericalError("KL term is not finite", term="kl")


@dataclass
class ElboResult:
    value: float
    reconstruction: float
    kl: float
    gradients: dict


def elbo(p: ModelParams, eg: ExtendedGraph, distances, rng=None, noise=None) -> ElboResult:
    """Single-sample ELBO and its gradients with respect to all parameters.

    `noise` fixes the reparameterization draw (one standard-normal value per
    node); otherwise it is drawn from `rng`.
    """
    d = _distance_values(distances, eg)
    if noise is None:
        if rng is None:
            raise ShapeError("elbo needs either an rng or an explicit noise vector")
        noise = rng.standard_normal(eg.n_nodes)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (eg.n_nodes,):
        raise ShapeError("noise must hold one value per node")

    value, recon, kl = _elbo_tensors(
        p, eg.node_features, eg.edge_features, eg.src, eg.dst, eg.n_nodes, d, noise
    )
    _check_finite(recon, kl)
    nnet.zero_grads(p.parameters())
    nnet.backward(value)
    grads = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in p.named_parameters().items()
    }
    return ElboResult(value.item(), recon.item(), kl.item(), grads)


def kl_standard_normal(mean, var) -> float:
    """Closed-form KL( N(mean, var) || N(0, 1) ), summed over components."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    return float(0.5 * np.sum(mean**2 + var - np.log(var) - 1.0))


def sample_prior(p: ModelParams, eg: ExtendedGraph, n: int,
                 rng: np.random.Generator) -> list[GaussianEdgeDist]:
    """Decode `n` latent codes drawn from the standard-normal prior."""
    if n < 1:
        raise ShapeError("need at least one sample")
    return [decode(p, eg, rng.standard_normal(eg.n_nodes)) for _ in range(n)]


# --- training -------------------------------------------------------------

def _stack_batch(items):
    """Merge graphs into one disjoint-union graph; per-graph terms just add."""
    node_feat, edge_feat, src, dst, dists = [], [], [], [], []
    offset = 0
    for eg, d in items:
        node_feat.append(eg.node_features)
        edge_feat.append(eg.edge_features)
        src.append(eg.src + offset)
        dst.append(eg.dst + offset)
        dists.append(d)
        offset += eg.n_nodes
    return (
        np.concatenate(node_feat, axis=0),
        np.concatenate(edge_feat, axis=0),
        np.concatenate(src),
        np.concatenate(dst),
        offset,
        np.concatenate(dists),
    )


def _batch_elbo(p: ModelParams, items, noise: np.ndarray):
    node_feat, edge_feat, src, dst, n_nodes, d = _stack_batch(items)
    value, recon, kl = _elbo_tensors(p, node_feat, edge_feat, src, dst, n_nodes, d, noise)
    _check_finite(recon, kl)
    return value


def _dataset_elbo(p: ModelParams, items, rng: np.random.Generator,
                  batch_size: int) -> float:
    """Mean per-record single-sample ELBO over a dataset."""
    total = 0.0
    for lo in range(0, len(items), batch_size):
        chunk = items[lo : lo + batch_size]
        n_nodes = sum(eg.n_nodes for eg, _ in chunk)
        total += _batch_elbo(p, chunk, rng.standard_normal(n_nodes)).item()
    return total / len(items)


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int
    best_val_elbo: float
    state: dict = field(repr=False, default_factory=dict)


def _validation_split(molecules: list[str], fraction: float, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
    if len(molecules) < 2 or fraction <= 0.0:
        return set()
    n_val = max(1, round(fraction * len(molecules)))
    n_val = min(n_val, len(molecules) - 1)
    picked = rng.choice(len(molecules), size=n_val, replace=False)
    return {molecules[i] for i in picked}


def train(records, config: CvaeConfig, seed: int, resume_state: dict | None = None,
          log_fn=None) -> TrainResult:
    """Minibatch Adam ascent on the ELBO; returns the best-validation weights.

    `records` is a list of (molecule_id, ExtendedGraph, distances) tuples.
    Validation holds out a fraction of molecules (by molecular graph, at least
    one when two or more exist); with a single molecule the training set
    doubles as the validation set. `resume_state` restores the exact state a
    previous run saved, so a resumed run is bit-identical to an uninterrupted
    one.
    """
    records = list(records)
    if not records:
        raise ShapeError("training needs a non-empty dataset")

    molecules = sorted({m for m, _, _ in records})
    val_molecules = _validation_split(molecules, config.validation_fraction, seed)
    train_items = [(eg, np.asarray(d, dtype=np.float64))
                   for m, eg, d in records if m not in val_molecules]
    val_items = [(eg, np.asarray(d, dtype=np.float64))
                 for m, eg, d in records if m in val_molecules]
    if not val_items:
        val_items = train_items

    init_seed = int(np.random.SeedSequence(seed, spawn_key=(102,)).generate_state(1)[0])
    params = ModelParams(config, seed=init_seed)
    adam = nnet.Adam(params.parameters(), lr=config.learning_rate)
    train_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(103,)))

    start_epoch = 0
    history: list[dict] = []
    best_val = -math.inf
    best_epoch = 0
    best_values = params.values()

    if resume_state is not None:
        params.set_values(resume_state["current"])
        adam.load_state_dict(resume_state["adam"])
        train_rng.bit_generator.state = resume_state["rng"]
        start_epoch = int(resume_state["epoch"])
        history = list(resume_state["history"])
        best_val = float(resume_state["best_val_elbo"])
        best_epoch = int(resume_state["best_epoch"])
        best_values = resume_state["best"]

    for epoch in range(start_epoch + 1, config.epochs + 1):
        order = train_rng.permutation(len(train_items))
        elbo_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_items[i] for i in order[lo : lo + config.batch_size]]
            n_nodes = sum(eg.n_nodes for eg, _ in batch)
            noise = train_rng.standard_normal(n_nodes)
            value = _batch_elbo(params, batch, noise)
            loss = nnet.scale(value, -1.0 / len(batch))
            adam.zero_grad()
            nnet.backward(loss)
            adam.step()
            elbo_sum += value.item()
        val_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(104, epoch)))
        entry = {
            "epoch": epoch,
            "train_elbo": elbo_sum / len(train_items),
            "val_elbo": _dataset_elbo(params, val_items, val_rng, config.batch_size),
        }
        history.append(entry)
        if entry["val_elbo"] > best_val:
            best_val = entry["val_elbo"]
            best_epoch = epoch
            best_values = params.values()
        if log_fn is not None:
            log_fn(entry)

    best_params = ModelParams(config, seed=0)
    best_params.set_values(best_values)
    state = {
        "epoch": config.epochs,
        "current": params.values(),
        "adam": adam.state_dict(),
        "rng": train_rng.bit_generator.state,
        "history": history,
        "best": best_values,
        "best_val_elbo": best_val,
        "best_epoch": best_epoch,
    }
    return TrainResult(best_params, history, best_epoch, best_val, state)


# --- checkpoint io ---------------------------------------------------------

def _arrays_to_lists(arrays: dict) -> dict:
    return {k: {"shape": list(np.asarray(v).shape),
                "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in arrays.items()}


def _lists_to_arrays(doc: dict) -> dict:
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            for k, v in doc.items()}


def save_model(path, params: ModelParams, train_state: dict | None = None) -> None:
    """Write best parameters plus optional resumable training state."""
    extra = {"config": params.config.to_dict()}
    if train_state is not None:
        extra["train_state"] = {
            "epoch": train_state["epoch"],
            "current": _arrays_to_lists(train_state["current"]),
            "adam": {
                "t": train_state["adam"]["t"],
                "m": [m.tolist() for m in train_state["adam"]["m"]],
                "v": [v.tolist() for v in train_state["adam"]["v"]],
            },
            "rng": train_state["rng"],
            "history": train_state["history"],
            "best": _arrays_to_lists(train_state["best"]),
            "best_val_elbo": train_state["best_val_elbo"],
            "best_epoch": train_state["best_epoch"],
        }
    nnet.save_checkpoint(path, params.values(), extra=extra)


def load_model(path) -> tuple[ModelParams, dict | None]:
    """Load a checkpoint; returns (params, train_state or None)."""
    arrays, extra = nnet.load_checkpoint(path)
    config = CvaeConfig.from_dict(extra["config"])
    params = ModelParams(config, seed=0)
    params.set_values(arrays)
    state = extra.get("train_state")
    if state is not None:
        named = params.named_parameters()
        state = {
            "epoch": state["epoch"],
            "current": _lists_to_arrays(state["current"]),
            "adam": {
                "t": state["adam"]["t"],
                "m": [np.asarray(m, dtype=np.float64).reshape(t.data.shape)
                      for m, t in zip(state["adam"]["m"], named.values())],
                "v": [np.asarray(v, dtype=np.float64).reshape(t.data.shape)
                      for v, t in zip(state["adam"]["v"], named.values())],
            },
            "rng": state["rng"],
            "history": state["history"],
            "best": _lists_to_arrays(state["best"]),
            "best_val_elbo": state["best_val_elbo"],
            "best_epoch": state["best_epoch"],
        }
    return params, state
