"""End-to-end runs of DualAdapt and the comparison methods."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .. import numerics as nx
from ..costs import CostLedger, FlopCounter, LedgerRow, module_cost
from ..data import Benchmark, DomainShard
from ..errors import ContractError
from ..losses import cross_entropy, discrepancy, one_hot
from ..nn import ModelConfig, ModelParams, forward_classifier, forward_features, init_head, init_model
from .protocol import (
    HEAD,
    MCD,
    ORACLE,
    BroadcastMsg,
    Channel,
    ClientState,
    EnsembleView,
    ServerState,
    TrainConfig,
    UploadMsg,
    _server_iterations,
    batch_indices,
    client_round,
    evaluate,
    fit_source_gmm,
    predict,
    predict_global,
    pretrain,
    server_round,
    sgd_step,
    stream,
)

METHODS = (
    "dualadapt",
    "dualadapt_mcd",
    "dualadapt_st",
    "source_only",
    "fed_mcd",
    "fed_oracle",
    "cent_mcd_one2one",
    "cent_mcd_one2combined",
    "cent_mcd_one2multiple",
)


@dataclass
class TrainReport:
    method: str
    seed: int
    config: dict
    privacy_violating: bool = False
    rounds: list[dict] = field(default_factory=list)
    ledger: list[dict] = field(default_factory=list)
    # in-memory only: final models and states for inspection
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def final(self) -> dict:
        return self.rounds[-1]

    @property
    def mean_accuracy(self) -> float:
        return self.final["mean_accuracy"]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "privacy_violating": self.privacy_violating,
            "rounds": self.rounds,
            "ledger": self.ledger,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def model_config(cfg: TrainConfig, bench: Benchmark) -> ModelConfig:
    return ModelConfig(
        input_dim=bench.dim,
        feature_dim=cfg.feature_dim,
        num_classes=bench.num_classes,
        g_hidden=cfg.g_hidden,
        f_hidden=cfg.f_hidden,
        activation=cfg.activation,
        init_seed=cfg.seed,
    )


def init_server(cfg: TrainConfig, bench: Benchmark) -> ServerState:
    G, F = init_model(model_config(cfg, bench))
    return ServerState(G, F, bench.source, bench.num_classes)


def _check_clients(cfg: TrainConfig, bench: Benchmark) -> None:
    if cfg.num_clients != bench.num_targets:
        raise ContractError(f"config has {cfg.num_clients} clients but benchmark has {bench.num_targets} targets")


def _report(method: str, cfg: TrainConfig, bench: Benchmark, privacy_violating: bool = False) -> TrainReport:
    # the seed lives at the top level so reports of one config differ only there
    train = {k: v for k, v in cfg.to_dict().items() if k != "seed"}
    config = {"train": train, "benchmark": bench.meta, "method": method}
    return TrainReport(method, cfg.seed, config, privacy_violating)


def _round_entry(round_index: int, metrics: dict, client_flops=(), server_flops=0, upload=(), broadcast=(), objectives=None) -> dict:
    return {
        "round": round_index,
        "per_target_accuracy": metrics["per_target_accuracy"],
        "mean_accuracy": metrics["mean_accuracy"],
        "client_flops": list(client_flops),
        "server_flops": server_flops,
        "upload_params": list(upload),
        "broadcast_params": list(broadcast),
        "objectives": objectives or {},
    }


def _global_metrics(G: ModelParams, F: ModelParams, bench: Benchmark) -> dict:
    view = EnsembleView(G, F)
    return evaluate(lambda x, i: predict_global(view, x)[1], bench.target_test())


# ------------------------------------------------------------------ DualAdapt

OrderFn = Callable[[int], Sequence[int]]


def run_dualadapt(
    cfg: TrainConfig,
    bench: Benchmark,
    client_order: OrderFn | None = None,
    channel: Channel | None = None,
    method: str = "dualadapt",
    oracle: bool = False,
) -> TrainReport:
    """Pre-train, then alternate client rounds and server rounds for ``cfg.rounds`` rounds.

    ``client_order(round)`` may permute the order in which clients execute;
    results are independent of it. With ``oracle`` the server replaces the
    mixup proxy with the clients' own target data.
    """
    _check_clients(cfg, bench)
    channel = channel if channel is not None else Channel()
    report = _report(method, cfg, bench, privacy_violating=oracle)
    ledger = CostLedger()
    server = pretrain(init_server(cfg, bench), cfg.pretrain_epochs, cfg)
    report.rounds.append(_round_entry(0, _global_metrics(server.G, server.F_g, bench)))
    clients = [ClientState(i, shard, bench.num_classes) for i, shard in enumerate(bench.target_train())]
    N = len(clients)

    for rnd in range(1, cfg.rounds + 1):
        server.W_S = fit_source_gmm(server, rnd, cfg.seed) if cfg.use_gmm else None
        msg = BroadcastMsg(server.G, server.F_g, server.W_S)
        order = list(client_order(rnd)) if client_order else list(range(N))
        if sorted(order) != list(range(N)):
            raise ContractError("client order must be a permutation of all clients")
        uploads: list[UploadMsg] = []
        for i in order:
            received = channel.broadcast(msg, i, rnd)
            uploads.append(channel.upload(client_round(clients[i], received, cfg.client_iters, cfg, rnd), rnd))
        if oracle:
            server = _oracle_server_round(server, uploads, bench.target_train(), cfg, rnd)
        else:
            server = server_round(server, uploads, cfg.server_iters, cfg, rnd)

        view = EnsembleView(server.G, server.F_g, {c.client_id: c.F_l for c in clients})
        metrics = evaluate(lambda x, i: predict(view, x, i)[1], bench.target_test())
        up = [channel.params("upload", rnd, i) for i in range(N)]
        down = [channel.params("broadcast", rnd, i) for i in range(N)]
        flops = [c.flops for c in clients]
        for i in range(N):
            ledger.add(LedgerRow(method, f"client{i}", rnd, flops[i], up[i], down[i]))
        ledger.add(LedgerRow(method, "server", rnd, server.flops, 0, 0))
        objectives = {"client": [float(np.mean(c.objectives)) if c.objectives else None for c in clients], **server.objectives}
        report.rounds.append(_round_entry(rnd, metrics, flops, server.flops, up, down, objectives))

    report.ledger = ledger.to_dicts()
    report.artifacts.update(server=server, clients=clients, channel=channel)
    return report


def _oracle_server_round(
    server: ServerState, uploads: Sequence[UploadMsg], targets: Sequence[DomainShard], cfg: TrainConfig, round_index: int
) -> ServerState:
    """Server round that reads the clients' target data instead of building a proxy.

    This breaks the federation's privacy boundary and exists only as a
    diagnostic upper bound.
    """
    ids = sorted(u.client_id for u in uploads)

    def inputs_for(xs: np.ndarray, r: int) -> list[np.ndarray]:
        out = []
        for cid in ids:
            X = targets[cid].inputs
            out.append(X[batch_indices(stream(cfg.seed, ORACLE, round_index, r, cid), len(X), len(xs))])
        return out

    return _server_iterations(server, uploads, cfg.server_iters, cfg, round_index, inputs_for)


# ------------------------------------------------------------------ baselines


def run_source_only(cfg: TrainConfig, bench: Benchmark) -> TrainReport:
    report = _report("source_only", cfg, bench)
    server = pretrain(init_server(cfg, bench), cfg.pretrain_epochs, cfg)
    report.rounds.append(_round_entry(0, _global_metrics(server.G, server.F_g, bench)))
    report.artifacts.update(server=server)
    return report


@dataclass
class McdModels:
    """Feature extractor with one (F1, F2) head pair per adapted target."""

    G: ModelParams
    heads: list[tuple[ModelParams, ModelParams]]

    def bundle(self) -> dict:
        return {"G": self.G, "F1": self.heads[0][0], "F2": self.heads[0][1]}

    @classmethod
    def from_bundle(cls, d: dict) -> "McdModels":
        return cls(d["G"], [(d["F1"], d["F2"])])


def train_second_head(server: ServerState, cfg: TrainConfig) -> ModelParams:
    """Fit a freshly initialised head on frozen pre-trained features."""
    F1 = server.F_g
    dims = [F1.in_dim] + [w.shape[1] for w, _ in F1.layers]
    F2 = init_head(stream(cfg.seed, HEAD), dims, F1.activation, F1.activate_output)
    src = server.source
    z_all = forward_features(server.G, src.inputs).data
    Y = one_hot(src.labels, server.num_classes).data
    n, B = len(src), cfg.batch_size
    for epoch in range(cfg.pretrain_epochs):
        order = stream(cfg.seed, HEAD, epoch).permutation(n)
        for start in range(0, n, B):
            idx = order[start : start + B]
            Ft = F2.trainable()
            loss = cross_entropy(forward_classifier(Ft, z_all[idx]), Y[idx])
            F2 = sgd_step(F2, nx.grad(loss, Ft.tensors()), cfg.client_lr * 10)
    return F2


def mcd_pretrained(cfg: TrainConfig, bench: Benchmark, n_pairs: int = 1) -> McdModels:
    server = pretrain(init_server(cfg, bench), cfg.pretrain_epochs, cfg)
    F2 = train_second_head(server, cfg)
    return McdModels(server.G, [(server.F_g, F2) for _ in range(n_pairs)])


def mcd_step(
    models: McdModels, xs: np.ndarray, ys: np.ndarray, xts: Sequence[np.ndarray], lr: float, num_classes: int, counter: FlopCounter | None = None
) -> tuple[McdModels, float]:
    """One joint MCD update.

    Heads minimise source cross-entropy and maximise target discrepancy; a
    gradient-reversal layer makes G minimise the same discrepancy in the
    same backward pass. ``xts[k]`` is the target batch for head pair ``k``.
    """
    Gt = models.G.trainable()
    heads = [(a.trainable(), b.trainable()) for a, b in models.heads]
    Y = one_hot(ys, num_classes)
    zs = forward_features(Gt, xs)
    loss = None
    adv_total = 0.0
    for (F1, F2), xt in zip(heads, xts):
        zt = nx.grad_reverse(forward_features(Gt, xt))
        adv = discrepancy(forward_classifier(F1, zt), forward_classifier(F2, zt))
        adv_total += adv.item()
        term = cross_entropy(forward_classifier(F1, zs), Y) + cross_entropy(forward_classifier(F2, zs), Y) - adv
        loss = term if loss is None else loss + term
    params = Gt.tensors() + [t for pair in heads for h in pair for t in h.tensors()]
    grads = nx.grad(loss, params)
    k = len(Gt.tensors())
    G = sgd_step(models.G, grads[:k], lr)
    new_heads = []
    for F1, F2 in models.heads:
        n1 = len(F1.tensors())
        F1 = sgd_step(F1, grads[k : k + n1], lr)
        k += n1
        n2 = len(F2.tensors())
        F2 = sgd_step(F2, grads[k : k + n2], lr)
        k += n2
        new_heads.append((F1, F2))
    if counter is not None:
        cG, cF = module_cost(models.G), module_cost(models.heads[0][0])
        for b in [len(xs)] * len(xts) + [len(xt) for xt in xts]:
            counter.forward(cG, b)
            counter.forward(cF, 2 * b)
            counter.backward(cG, b)
            counter.backward(cF, 2 * b)
    return McdModels(G, new_heads), adv_total


def _mcd_local_steps(
    models: McdModels, source: DomainShard, target: DomainShard, steps: int, cfg: TrainConfig, rng: np.random.Generator, num_classes: int, counter: FlopCounter
) -> tuple[McdModels, list[float]]:
    advs = []
    for _ in range(steps):
        si = batch_indices(rng, len(source), cfg.batch_size)
        ti = batch_indices(rng, len(target), cfg.batch_size)
        models, adv = mcd_step(models, source.inputs[si], source.labels[si], [target.inputs[ti]], cfg.client_lr, num_classes, counter)
        advs.append(adv)
    return models, advs


def _pair_metrics(views: Sequence[EnsembleView], bench: Benchmark) -> dict:
    """Evaluate target i with views[i], predicting the average of its two heads."""
    return evaluate(lambda x, i: predict(views[i], x, i)[1], bench.target_test())


def _views_for(models_per_target: Sequence[McdModels], pair_index: Callable[[int], int]) -> list[EnsembleView]:
    views = []
    for i, m in enumerate(models_per_target):
        F1, F2 = m.heads[pair_index(i)]
        views.append(EnsembleView(m.G, F1, {i: F2}))
    return views


def fedavg(bundles: Sequence[dict]) -> dict:
    """Uniform parameter averaging of identically shaped model bundles."""
    out = {}
    for name in bundles[0]:
        arrays = [b[name].arrays() for b in bundles]
        avg = [np.mean(np.stack(group), axis=0) for group in zip(*arrays)]
        out[name] = bundles[0][name].with_arrays(avg)
    return out


def run_fed_mcd(cfg: TrainConfig, bench: Benchmark, channel: Channel | None = None) -> TrainReport:
    """Every client runs full MCD on its target plus a source copy; FedAvg each round."""
    _check_clients(cfg, bench)
    channel = channel if channel is not None else Channel()
    report = _report("fed_mcd", cfg, bench)
    ledger = CostLedger()
    C, N = bench.num_classes, bench.num_targets
    glob = mcd_pretrained(cfg, bench)
    report.rounds.append(_round_entry(0, _pair_metrics(_views_for([glob] * N, lambda i: 0), bench)))
    for rnd in range(1, cfg.rounds + 1):
        bundles, flops, advs = [], [], []
        for i in range(N):
            local = McdModels.from_bundle(channel.transfer("broadcast", rnd, i, glob.bundle()))
            counter = FlopCounter()
            local, adv = _mcd_local_steps(
                local, bench.source, bench.targets[i][0], cfg.client_iters, cfg, stream(cfg.seed, MCD, i, rnd), C, counter
            )
            bundles.append(channel.transfer("upload", rnd, i, local.bundle()))
            flops.append(counter.take())
            advs.append(float(np.mean(adv)) if adv else None)
        glob = McdModels.from_bundle(fedavg(bundles))
        metrics = _pair_metrics(_views_for([glob] * N, lambda i: 0), bench)
        up = [channel.params("upload", rnd, i) for i in range(N)]
        down = [channel.params("broadcast", rnd, i) for i in range(N)]
        for i in range(N):
            ledger.add(LedgerRow("fed_mcd", f"client{i}", rnd, flops[i], up[i], down[i]))
        report.rounds.append(_round_entry(rnd, metrics, flops, 0, up, down, {"client_discrepancy": advs}))
    report.ledger = ledger.to_dicts()
    report.artifacts.update(models=glob, channel=channel)
    return report


def run_cent_mcd(cfg: TrainConfig, bench: Benchmark, mode: str) -> TrainReport:
    """Centralised MCD with direct access to all target data.

    one2one trains a separate model per target, one2combined a single model
    on the pooled targets, one2multiple a shared extractor with one head pair
    per target. Steps are grouped as ``rounds x client_iters`` so that a
    single-target one2one run follows the same sampling as one Fed-MCD client.
    """
    method = f"cent_mcd_{mode}"
    report = _report(method, cfg, bench)
    ledger = CostLedger()
    C, N = bench.num_classes, bench.num_targets
    source = bench.source
    targets = bench.target_train()
    if mode == "one2one":
        per_target = [mcd_pretrained(cfg, bench) for _ in range(N)]
    elif mode == "one2combined":
        shared = mcd_pretrained(cfg, bench)
        pooled = DomainShard(np.concatenate([t.inputs for t in targets]), None, "combined", "train")
    elif mode == "one2multiple":
        shared = mcd_pretrained(cfg, bench, n_pairs=N)
    else:
        raise ContractError(f"unknown centralised mode {mode!r}")

    def views() -> list[EnsembleView]:
        if mode == "one2one":
            return _views_for(per_target, lambda i: 0)
        if mode == "one2combined":
            return _views_for([shared] * N, lambda i: 0)
        return _views_for([shared] * N, lambda i: i)

    report.rounds.append(_round_entry(0, _pair_metrics(views(), bench)))
    for rnd in range(1, cfg.rounds + 1):
        counter = FlopCounter()
        if mode == "one2one":
            for i in range(N):
                per_target[i], _ = _mcd_local_steps(
                    per_target[i], source, targets[i], cfg.client_iters, cfg, stream(cfg.seed, MCD, i, rnd), C, counter
                )
        elif mode == "one2combined":
            shared, _ = _mcd_local_steps(shared, source, pooled, cfg.client_iters, cfg, stream(cfg.seed, MCD, 0, rnd), C, counter)
        else:
            rng = stream(cfg.seed, MCD, 0, rnd)
            for _ in range(cfg.client_iters):
                si = batch_indices(rng, len(source), cfg.batch_size)
                xts = [t.inputs[batch_indices(rng, len(t), cfg.batch_size)] for t in targets]
                shared, _ = mcd_step(shared, source.inputs[si], source.labels[si], xts, cfg.client_lr, C, counter)
        flops = counter.take()
        ledger.add(LedgerRow(method, "central", rnd, flops, 0, 0))
        report.rounds.append(_round_entry(rnd, _pair_metrics(views(), bench), [flops]))
    report.ledger = ledger.to_dicts()
    report.artifacts.update(models=per_target if mode == "one2one" else shared)
    return report


def run_baseline(kind: str, cfg: TrainConfig, bench: Benchmark, **kwargs) -> TrainReport:
    if kind == "source_only":
        return run_source_only(cfg, bench)
    if kind == "fed_mcd":
        return run_fed_mcd(cfg, bench, **kwargs)
    if kind == "fed_oracle":
        return run_dualadapt(replace(cfg, use_gmm=False), bench, method="fed_oracle", oracle=True, **kwargs)
    if kind.startswith("cent_mcd_"):
        return run_cent_mcd(cfg, bench, kind[len("cent_mcd_") :])
    raise ContractError(f"unknown baseline {kind!r}")


def run_method(method: str, cfg: TrainConfig, bench: Benchmark, **kwargs) -> TrainReport:
    """Dispatch any name in :data:`METHODS`, including the ablation variants."""
    if method == "dualadapt":
        return run_dualadapt(cfg, bench, **kwargs)
    if method == "dualadapt_mcd":
        return run_dualadapt(replace(cfg, use_self_training=False, use_gmm=False), bench, method=method, **kwargs)
    if method == "dualadapt_st":
        return run_dualadapt(replace(cfg, use_self_training=True, use_gmm=False), bench, method=method, **kwargs)
    if method in METHODS:
        return run_baseline(method, cfg, bench, **kwargs)
    raise ContractError(f"unknown method {method!r}")
