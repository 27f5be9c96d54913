"""Server/client state, wire messages and the DualAdapt round procedures."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .. import numerics as nx
from ..costs import FlopCounter, module_cost
from ..data import SOURCE, DomainShard
from ..density import GmmParams, confidence_weights, fit_gmm
from ..errors import ContractError, InsufficientDataError, UnknownClientError
from ..losses import LossConfig, client_objective, cross_entropy, one_hot, server_adaptation_loss
from ..nn import ModelParams, clone_classifier, forward_classifier, forward_features, model_from_dict, model_to_dict
from ..proxy import build_proxy_batch

# stream tags for np.random.default_rng([seed, tag, ...])
PRETRAIN, CLIENT, SERVER, PROXY, GMM_SOURCE, GMM_CLIENT, MCD, HEAD, ORACLE = range(1, 10)


def stream(seed: int, tag: int, *ids: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag, *(int(i) for i in ids)])


def batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, size=min(batch_size, n), replace=False)


@dataclass(frozen=True)
class TrainConfig:
    num_clients: int = 4
    client_iters: int = 10
    server_iters: int = 10
    rounds: int = 10
    pretrain_epochs: int = 30
    batch_size: int = 32
    client_lr: float = 0.01
    server_lr: float = 0.005
    momentum: float = 0.9
    lambda_st: float = 1.0
    use_self_training: bool = True
    use_gmm: bool = True
    reinit_local_each_round: bool = False
    feature_dim: int = 32
    g_hidden: tuple[int, ...] = (64,)
    f_hidden: tuple[int, ...] = ()
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "g_hidden", tuple(self.g_hidden))
        object.__setattr__(self, "f_hidden", tuple(self.f_hidden))
        if self.num_clients < 1 or self.batch_size < 1:
            raise ContractError("num_clients and batch_size must be >= 1")
        if min(self.client_iters, self.server_iters, self.rounds, self.pretrain_epochs) < 0:
            raise ContractError("iteration counts must be non-negative")
        if not (self.client_lr > 0 and self.server_lr > 0):
            raise ContractError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")
        if self.lambda_st < 0:
            raise ContractError("lambda_st must be non-negative")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_st if self.use_self_training else 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g_hidden"] = list(self.g_hidden)
        d["f_hidden"] = list(self.f_hidden)
        return d


# ----------------------------------------------------------------- optimizers


def sgd_step(m: ModelParams, grads: Sequence[np.ndarray], lr: float) -> ModelParams:
    return m.with_arrays([p - lr * g for p, g in zip(m.arrays(), grads)])


def momentum_step(
    params: Sequence[ModelParams], velocity: tuple, grads: Sequence[np.ndarray], lr: float, mu: float
) -> tuple[list[ModelParams], tuple]:
    """Heavy-ball update over the concatenated tensors of ``params``.

    ``velocity`` aligns with ``grads``; an empty tuple means zero velocity.
    """
    flat = [a for m in params for a in m.arrays()]
    if not velocity:
        velocity = tuple(np.zeros_like(a) for a in flat)
    new_v = tuple(mu * v + g for v, g in zip(velocity, grads))
    new_flat = [a - lr * v for a, v in zip(flat, new_v)]
    out, k = [], 0
    for m in params:
        n = len(m.arrays())
        out.append(m.with_arrays(new_flat[k : k + n]))
        k += n
    return out, new_v


# ------------------------------------------------------------------- messages


def _gmm_payload(W: GmmParams | None):
    return None if W is None else W.to_dict()


def _gmm_from_payload(d) -> GmmParams | None:
    return None if d is None else GmmParams.from_dict(d)


def count_numbers(obj) -> int:
    """Number of numeric leaves in a JSON-like payload."""
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return 0
    if isinstance(obj, (int, float)):
        return 1
    if isinstance(obj, dict):
        return sum(count_numbers(v) for v in obj.values())
    return sum(count_numbers(v) for v in obj)


@dataclass(frozen=True)
class BroadcastMsg:
    G: ModelParams
    F_g: ModelParams
    W_S: GmmParams | None

    def param_count(self) -> int:
        w = self.W_S.param_count() if self.W_S is not None else 0
        return self.G.param_count() + self.F_g.param_count() + w

    def to_payload(self) -> dict:
        return {"G": model_to_dict(self.G), "F_g": model_to_dict(self.F_g), "W_S": _gmm_payload(self.W_S)}

    @classmethod
    def from_payload(cls, d: dict) -> "BroadcastMsg":
        return cls(model_from_dict(d["G"]), model_from_dict(d["F_g"]), _gmm_from_payload(d["W_S"]))

    @staticmethod
    def payload_params(d: dict) -> int:
        return count_numbers(d)


@dataclass(frozen=True)
class UploadMsg:
    client_id: int
    F_l: ModelParams
    W_T: GmmParams | None

    def param_count(self) -> int:
        w = self.W_T.param_count() if self.W_T is not None else 0
        return self.F_l.param_count() + w

    def to_payload(self) -> dict:
        return {"client_id": self.client_id, "F_l": model_to_dict(self.F_l), "W_T": _gmm_payload(self.W_T)}

    @classmethod
    def from_payload(cls, d: dict) -> "UploadMsg":
        return cls(int(d["client_id"]), model_from_dict(d["F_l"]), _gmm_from_payload(d["W_T"]))

    @staticmethod
    def payload_params(d: dict) -> int:
        """Numeric leaves excluding the client id header."""
        return count_numbers({k: v for k, v in d.items() if k != "client_id"})


@dataclass
class WireRecord:
    round: int
    direction: str  # "upload" | "broadcast"
    client_id: int
    params: int
    payload: str


class Channel:
    """Serializes every message that crosses the server/client boundary.

    Receivers only ever see objects rebuilt from the JSON text, and every
    transfer is logged with its parameter count.
    """

    def __init__(self, keep_payloads: bool = False):
        self.keep_payloads = keep_payloads
        self.log: list[WireRecord] = []

    def _send(self, round_index: int, direction: str, client_id: int, payload: dict, params: int) -> str:
        text = json.dumps(payload, sort_keys=True)
        self.log.append(WireRecord(round_index, direction, client_id, params, text if self.keep_payloads else ""))
        return text

    def broadcast(self, msg: BroadcastMsg, client_id: int, round_index: int) -> BroadcastMsg:
        payload = msg.to_payload()
        text = self._send(round_index, "broadcast", client_id, payload, BroadcastMsg.payload_params(payload))
        return BroadcastMsg.from_payload(json.loads(text))

    def upload(self, msg: UploadMsg, round_index: int) -> UploadMsg:
        payload = msg.to_payload()
        text = self._send(round_index, "upload", msg.client_id, payload, UploadMsg.payload_params(payload))
        return UploadMsg.from_payload(json.loads(text))

    def transfer(self, direction: str, round_index: int, client_id: int, models: dict) -> dict:
        """Send a named bundle of models (used by the FedAvg baselines)."""
        payload = {k: model_to_dict(v) for k, v in models.items()}
        text = self._send(round_index, direction, client_id, payload, count_numbers(payload))
        return {k: model_from_dict(v) for k, v in json.loads(text).items()}

    def params(self, direction: str, round_index: int, client_id: int) -> int:
        return sum(
            r.params
            for r in self.log
            if r.direction == direction and r.round == round_index and r.client_id == client_id
        )


# --------------------------------------------------------------------- states


@dataclass
class ServerState:
    G: ModelParams
    F_g: ModelParams
    source: DomainShard
    num_classes: int
    W_S: GmmParams | None = None
    velocity: tuple = ()
    flops: int = 0
    objectives: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source.domain != SOURCE or self.source.labels is None:
            raise ContractError("the server holds only the labeled source shard")


@dataclass
class ClientState:
    client_id: int
    target: DomainShard
    num_classes: int
    F_l: ModelParams | None = None
    W_T: GmmParams | None = None
    G: ModelParams | None = None
    F_g: ModelParams | None = None
    W_S: GmmParams | None = None
    flops: int = 0
    objectives: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.target.labels is not None:
            raise ContractError("client training shards are unlabeled")


def fit_source_gmm(server: ServerState, round_index: int, seed: int) -> GmmParams:
    z = forward_features(server.G, server.source.inputs).data
    return fit_gmm(z, server.num_classes, seed=stream(seed, GMM_SOURCE, round_index).integers(2**31))


# ------------------------------------------------------------------ procedures


def pretrain(server: ServerState, epochs: int, cfg: TrainConfig) -> ServerState:
    """Mini-batch cross-entropy on the labeled source with the server optimizer."""
    src = server.source
    if len(src) == 0:
        raise ContractError("empty source shard")
    G, F = server.G, server.F_g
    velocity: tuple = ()
    Y = one_hot(src.labels, server.num_classes).data
    n, B = len(src), cfg.batch_size
    for epoch in range(epochs):
        order = stream(cfg.seed, PRETRAIN, epoch).permutation(n)
        for start in range(0, n, B):
            idx = order[start : start + B]
            Gt, Ft = G.trainable(), F.trainable()
            loss = cross_entropy(forward_classifier(Ft, forward_features(Gt, src.inputs[idx])), Y[idx])
            grads = nx.grad(loss, Gt.tensors() + Ft.tensors())
            (G, F), velocity = momentum_step([G, F], velocity, grads, cfg.server_lr, cfg.momentum)
    return replace(server, G=G, F_g=F)


def client_round(client: ClientState, msg: BroadcastMsg, R_c: int, cfg: TrainConfig, round_index: int = 1) -> UploadMsg:
    """Local adaptation of F_l with G and F_g frozen, then refit W_T."""
    K = 2 * client.num_classes
    X = client.target.inputs
    if len(X) < K and cfg.use_gmm:
        raise InsufficientDataError(f"client {client.client_id} has {len(X)} examples, needs >= {K}")
    G, F_g, W_S = msg.G.frozen(), msg.F_g.frozen(), msg.W_S
    client.G, client.F_g, client.W_S = G, F_g, W_S
    if client.F_l is None or cfg.reinit_local_each_round:
        client.F_l = clone_classifier(F_g)
    F_l = client.F_l
    cG, cF = module_cost(G), module_cost(F_l)
    counter = FlopCounter()
    rng = stream(cfg.seed, CLIENT, client.client_id, round_index)
    loss_cfg = cfg.loss
    objectives = []
    for _ in range(R_c):
        x = X[batch_indices(rng, len(X), cfg.batch_size)]
        b = len(x)
        z = forward_features(G, x).data
        if cfg.use_gmm and W_S is not None:
            w = confidence_weights(W_S, z)
        else:
            w = np.ones(b)
        Ft = F_l.trainable()
        loss = client_objective(forward_classifier(F_g, z), forward_classifier(Ft, z), w, loss_cfg)
        grads = nx.grad(loss, Ft.tensors())
        F_l = sgd_step(F_l, grads, cfg.client_lr)
        objectives.append(loss.item())
        counter.forward(cG, b)
        counter.forward(cF, b)  # F_g
        counter.forward(cF, b)  # F_l
        counter.backward(cF, b)  # F_l only
    client.F_l = F_l
    if cfg.use_gmm:
        z_all = forward_features(G, X).data
        seed = stream(cfg.seed, GMM_CLIENT, client.client_id, round_index).integers(2**31)
        client.W_T = fit_gmm(z_all, client.num_classes, seed=seed)
    else:
        client.W_T = None
    client.flops = counter.take()
    client.objectives = objectives
    return UploadMsg(client.client_id, F_l, client.W_T)


ProxyFn = Callable[[np.ndarray, int], list[np.ndarray]]


def _server_iterations(
    server: ServerState, uploads: Sequence[UploadMsg], R_s: int, cfg: TrainConfig, round_index: int, inputs_for: ProxyFn | None
) -> ServerState:
    if not uploads:
        raise ContractError("server round needs at least one upload")
    uploads = sorted(uploads, key=lambda u: u.client_id)
    src = server.source
    Y = one_hot(src.labels, server.num_classes).data
    G, F_g, velocity = server.G, server.F_g, server.velocity
    cG, cF = module_cost(G), module_cost(F_g)
    counter = FlopCounter()
    rng = stream(cfg.seed, SERVER, round_index)
    adapt_values, ce_values = [], []
    for r in range(R_s):
        idx = batch_indices(rng, len(src), cfg.batch_size)
        xs = src.inputs[idx]
        b = len(xs)
        if inputs_for is None:
            proxy = build_proxy_batch(xs, [cfg.seed, PROXY, round_index, r])
            per_client_x = [proxy.inputs] * len(uploads)
        else:
            per_client_x = inputs_for(xs, r)
        Gt = G.trainable()
        loss = None
        for u, x in zip(uploads, per_client_x):
            if inputs_for is None and cfg.use_gmm and u.W_T is not None:
                w = confidence_weights(u.W_T, forward_features(G, x).data)
            else:
                w = np.ones(len(x))
            term = server_adaptation_loss(Gt, F_g, [(w, u.F_l)], x)
            loss = term if loss is None else loss + term
            counter.forward(cG, len(x))
            counter.forward(cF, 2 * len(x))
            counter.backward(cG, len(x))
        adapt_values.append(loss.item())
        grads = nx.grad(loss, Gt.tensors())
        zero_f = [np.zeros_like(a) for a in F_g.arrays()]
        (G, F_g), velocity = momentum_step([G, F_g], velocity, grads + zero_f, cfg.server_lr, cfg.momentum)

        Gt, Ft = G.trainable(), F_g.trainable()
        ce = cross_entropy(forward_classifier(Ft, forward_features(Gt, xs)), Y[idx])
        ce_values.append(ce.item())
        grads = nx.grad(ce, Gt.tensors() + Ft.tensors())
        (G, F_g), velocity = momentum_step([G, F_g], velocity, grads, cfg.server_lr, cfg.momentum)
        counter.forward(cG, b)
        counter.forward(cF, b)
        counter.backward(cG, b)
        counter.backward(cF, b)
    objectives = {
        "adaptation": float(np.mean(adapt_values)) if adapt_values else None,
        "source_ce": float(np.mean(ce_values)) if ce_values else None,
    }
    return replace(server, G=G, F_g=F_g, velocity=velocity, flops=counter.take(), objectives=objectives)


def server_round(
    server: ServerState, uploads: Sequence[UploadMsg], R_s: int, cfg: TrainConfig, round_index: int = 1
) -> ServerState:
    """Adapt G on GMM-weighted mixup batches, then fine-tune (G, F_g) on source labels.

    Uploads are processed in client-id order so the result does not depend
    on arrival order.
    """
    return _server_iterations(server, uploads, R_s, cfg, round_index, None)


# ------------------------------------------------------------------ inference


@dataclass
class EnsembleView:
    """Models needed for client-side inference: shared G and F_g plus local heads."""

    G: ModelParams
    F_g: ModelParams
    local: dict[int, ModelParams] = field(default_factory=dict)


def predict(view: EnsembleView, x, client_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Average of global and local classifier probabilities, with argmax labels."""
    if client_id not in view.local:
        raise UnknownClientError(client_id)
    z = forward_features(view.G, x)
    probs = (forward_classifier(view.F_g, z).data + forward_classifier(view.local[client_id], z).data) / 2
    return probs, probs.argmax(axis=1)


def predict_global(view: EnsembleView, x) -> tuple[np.ndarray, np.ndarray]:
    probs = forward_classifier(view.F_g, forward_features(view.G, x)).data
    return probs, probs.argmax(axis=1)


def accuracy(labels_pred, labels_true) -> float:
    labels_true = np.asarray(labels_true)
    if labels_true.size == 0:
        raise ContractError("cannot evaluate on an empty shard")
    return float(np.mean(np.asarray(labels_pred) == labels_true))


def evaluate(predict_fn: Callable[[np.ndarray, int], np.ndarray], test_shards: Sequence[DomainShard]) -> dict:
    """Per-target accuracy and the unweighted mean.

    ``predict_fn(x, i)`` returns predicted labels for shard ``i``.
    """
    accs = []
    for i, shard in enumerate(test_shards):
        if shard.labels is None or len(shard) == 0:
            raise ContractError(f"test shard {shard.domain} is empty or unlabeled")
        accs.append(accuracy(predict_fn(shard.inputs, i), shard.labels))
    return {"per_target_accuracy": accs, "mean_accuracy": float(np.mean(accs))}
