import json
from dataclasses import replace

import numpy as np
import pytest
from conftest import small_bench, small_cfg

from dualadapt import numerics as nx
from dualadapt.costs import module_cost
from dualadapt.data import SOURCE, DomainShard, ShiftSpec
from dualadapt.errors import ContractError, InsufficientDataError, UnknownClientError
from dualadapt.federation import (
    METHODS,
    BroadcastMsg,
    Channel,
    ClientState,
    EnsembleView,
    ServerState,
    TrainConfig,
    UploadMsg,
    client_round,
    evaluate,
    predict,
    predict_global,
    pretrain,
    run_method,
    server_round,
)
from dualadapt.losses import cross_entropy, discrepancy, one_hot
from dualadapt.nn import ModelConfig, ModelParams, clone_classifier, forward_classifier, forward_features, init_model
from dualadapt.numerics import Tensor
from oracle_inputs import separable_case, server_step_case


def _params(layers, activate_output):
    return ModelParams(tuple((Tensor(W), Tensor(b)) for W, b in layers), "relu", activate_output)


def pretrained_server(bench, cfg):
    G, F = init_model(ModelConfig(input_dim=bench.dim, feature_dim=cfg.feature_dim, num_classes=bench.num_classes, g_hidden=cfg.g_hidden))
    return pretrain(ServerState(G, F, bench.source, bench.num_classes), cfg.pretrain_epochs, cfg)


def broadcast_of(server, with_gmm=True):
    from dualadapt.federation.protocol import fit_source_gmm

    return BroadcastMsg(server.G, server.F_g, fit_source_gmm(server, 1, 0) if with_gmm else None)


# ------------------------------------------------------------------ pretrain


def test_pretrain_separates_linearly_separable_source(frozen):
    x, y = separable_case()
    src = DomainShard(x, y, SOURCE, "train")
    G, F = init_model(ModelConfig(input_dim=4, feature_dim=8, g_hidden=(8,), num_classes=2))
    server = pretrain(ServerState(G, F, src, 2), 20, TrainConfig(batch_size=32))
    pred = predict_global(EnsembleView(server.G, server.F_g), x)[1]
    # a logistic-regression reference reaches the frozen value on the same data
    assert frozen["separable_lr_accuracy"] >= 0.95
    assert np.mean(pred == y) >= 0.95


def test_pretrain_zero_epochs_is_identity(bench):
    G, F = init_model(ModelConfig(input_dim=bench.dim))
    server = pretrain(ServerState(G, F, bench.source, bench.num_classes), 0, TrainConfig())
    assert server.G.equals(G) and server.F_g.equals(F)


def test_pretrain_is_deterministic(bench, cfg):
    a, b = pretrained_server(bench, cfg), pretrained_server(bench, cfg)
    assert a.G.equals(b.G) and a.F_g.equals(b.F_g)


def test_server_state_rejects_target_data(bench):
    G, F = init_model(ModelConfig(input_dim=bench.dim))
    with pytest.raises(ContractError):
        ServerState(G, F, bench.targets[0][1], bench.num_classes)
    with pytest.raises(ContractError):
        ServerState(G, F, bench.targets[0][0], bench.num_classes)


def test_client_state_rejects_labels(bench):
    with pytest.raises(ContractError):
        ClientState(0, bench.source, bench.num_classes)


# ------------------------------------------------------------------ client round


@pytest.fixture(scope="module")
def setup():
    bench = small_bench(seed=2)
    cfg = small_cfg(pretrain_epochs=4)
    server = pretrained_server(bench, cfg)
    return bench, cfg, server


def test_client_round_without_iterations_keeps_global_head(setup):
    bench, cfg, server = setup
    client = ClientState(0, bench.targets[0][0], bench.num_classes)
    up = client_round(client, broadcast_of(server), 0, cfg)
    assert up.F_l.equals(server.F_g)
    assert client.flops == 0


def test_client_round_leaves_shared_models_untouched(setup):
    bench, cfg, server = setup
    G0, F0 = server.G.arrays(), server.F_g.arrays()
    client = ClientState(1, bench.targets[1][0], bench.num_classes)
    msg = broadcast_of(server)
    up = client_round(client, msg, 5, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(msg.G.arrays(), G0))
    assert all(np.array_equal(a, b) for a, b in zip(msg.F_g.arrays(), F0))
    assert not up.F_l.equals(server.F_g)


def test_client_round_discrepancy_grows_without_self_training(setup):
    bench, _, server = setup
    shard = bench.targets[0][0]
    # full-batch steps so each update ascends the discrepancy on the whole shard
    cfg = small_cfg(lambda_st=0.0, use_gmm=False, client_lr=0.02, batch_size=len(shard))
    msg = broadcast_of(server, with_gmm=False)
    z = forward_features(server.G, shard.inputs)
    p_g = forward_classifier(server.F_g, z)
    rng = np.random.default_rng(0)
    client = ClientState(0, shard, bench.num_classes)
    client.F_l = server.F_g.with_arrays([a + 0.05 * rng.normal(size=a.shape) for a in server.F_g.arrays()])
    values = [discrepancy(p_g, forward_classifier(client.F_l, z)).item()]
    for rnd in range(1, 6):
        client_round(client, msg, 1, cfg, rnd)
        values.append(discrepancy(p_g, forward_classifier(client.F_l, z)).item())
    assert np.all(np.diff(values) >= -1e-9)
    assert values[-1] > values[0]


def test_discrepancy_only_client_is_stuck_at_the_global_head(setup):
    # |p_g - p_l| has zero subgradient at equality, so without self-training
    # a head cloned from F_g receives no update
    bench, _, server = setup
    cfg = small_cfg(lambda_st=0.0, use_gmm=False)
    client = ClientState(0, bench.targets[0][0], bench.num_classes)
    up = client_round(client, broadcast_of(server, with_gmm=False), 4, cfg)
    assert up.F_l.equals(server.F_g)


def test_upload_carries_local_head_and_target_gmm(setup):
    bench, cfg, server = setup
    client = ClientState(2, bench.targets[2][0], bench.num_classes)
    up = client_round(client, broadcast_of(server), 2, cfg)
    assert up.client_id == 2 and up.W_T is client.W_T
    assert up.param_count() == up.F_l.param_count() + up.W_T.param_count()


def test_client_needs_enough_data_for_gmm(setup):
    bench, cfg, server = setup
    tiny = DomainShard(bench.targets[0][0].inputs[:3], None, "target1", "train")
    with pytest.raises(InsufficientDataError):
        client_round(ClientState(0, tiny, bench.num_classes), broadcast_of(server), 1, cfg)


# ------------------------------------------------------------------ server round


def _hand_server(momentum=0.0):
    (G,), (Fg,), (Fl,), x, y, lr = server_step_case()
    server = ServerState(_params([G], True), _params([Fg], False), DomainShard(x, y, SOURCE, "train"), 2)
    cfg = TrainConfig(num_clients=1, batch_size=4, server_lr=lr, momentum=momentum, use_gmm=False)
    return server, _params([Fl], False), cfg


def test_server_step_matches_hand_oracle(frozen):
    server, F_l, cfg = _hand_server()
    out = server_round(server, [UploadMsg(0, F_l, None)], 1, cfg)
    ref = frozen["server_hand_step"]
    (GW, Gb), (FW, Fb) = out.G.arrays(), out.F_g.arrays()
    for got, want in ((GW, "G_W"), (Gb, "G_b"), (FW, "F_W"), (Fb, "F_b")):
        assert np.allclose(got, ref[want], rtol=1e-10, atol=1e-12)
    assert out.objectives["adaptation"] == pytest.approx(ref["adaptation"], rel=1e-10)
    assert out.objectives["source_ce"] == pytest.approx(ref["source_ce"], rel=1e-10)


def test_identical_heads_give_no_adaptation_signal():
    server, _, cfg = _hand_server()
    out = server_round(server, [UploadMsg(0, clone_classifier(server.F_g), None)], 1, cfg)
    assert out.objectives["adaptation"] == 0.0
    # only the source cross-entropy step moved the models
    Gt, Ft = server.G.trainable(), server.F_g.trainable()
    src = server.source
    ce = cross_entropy(forward_classifier(Ft, forward_features(Gt, src.inputs)), one_hot(src.labels, 2))
    grads = nx.grad(ce, Gt.tensors() + Ft.tensors())
    expected = [a - cfg.server_lr * g for a, g in zip(server.G.arrays() + server.F_g.arrays(), grads)]
    got = out.G.arrays() + out.F_g.arrays()
    assert all(np.allclose(a, b, rtol=1e-12, atol=1e-14) for a, b in zip(got, expected))


def test_server_round_needs_uploads():
    server, _, cfg = _hand_server()
    with pytest.raises(ContractError):
        server_round(server, [], 1, cfg)


def test_server_round_ignores_upload_order(setup):
    bench, cfg, server = setup
    msg = broadcast_of(server)
    ups = [client_round(ClientState(i, s, bench.num_classes), msg, 2, cfg) for i, s in enumerate(bench.target_train())]
    a = server_round(server, ups, 2, cfg)
    b = server_round(server, ups[::-1], 2, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.G.arrays() + a.F_g.arrays(), b.G.arrays() + b.F_g.arrays()))


# ------------------------------------------------------------------ inference


def test_predict_averages_heads():
    G = _params([(np.eye(2), np.zeros(2))], True)
    F_g = _params([(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2))], False)
    F_l = _params([(np.array([[0.0, 0.0], [0.0, 1.0]]), np.zeros(2))], False)
    view = EnsembleView(G, F_g, {0: F_l})
    x = np.array([[2.0, 1.0]])
    probs, labels = predict(view, x, 0)
    pg = forward_classifier(F_g, forward_features(G, x)).data
    pl = forward_classifier(F_l, forward_features(G, x)).data
    assert np.array_equal(probs, (pg + pl) / 2)
    assert labels.tolist() == [0]
    with pytest.raises(UnknownClientError):
        predict(view, x, 5)


def test_evaluate_reports_per_target_and_mean():
    shards = [DomainShard(np.zeros((4, 1)), np.array([0, 0, 1, 1]), f"target{i + 1}", "test") for i in range(2)]
    out = evaluate(lambda x, i: np.zeros(len(x), dtype=int) + i, shards)
    assert out == {"per_target_accuracy": [0.5, 0.5], "mean_accuracy": 0.5}


def test_ensemble_equals_global_head_at_round_start(setup):
    bench, cfg, server = setup
    msg = broadcast_of(server)
    clients = [ClientState(i, s, bench.num_classes) for i, s in enumerate(bench.target_train())]
    for c in clients:
        client_round(c, msg, 0, cfg)
    view = EnsembleView(server.G, server.F_g, {c.client_id: c.F_l for c in clients})
    for c, shard in zip(clients, bench.target_test()):
        probs, labels = predict(view, shard.inputs, c.client_id)
        g_probs, g_labels = predict_global(view, shard.inputs)
        assert np.array_equal(probs, g_probs) and np.array_equal(labels, g_labels)


# ------------------------------------------------------------------ full runs


@pytest.fixture(scope="module")
def runs():
    bench, cfg = small_bench(seed=3), small_cfg(seed=3)
    return bench, cfg, {m: run_method(m, cfg, bench) for m in METHODS}


def test_every_method_reports_every_round(runs):
    _, cfg, reports = runs
    for m, r in reports.items():
        expected = 1 if m == "source_only" else cfg.rounds + 1
        assert [e["round"] for e in r.rounds] == list(range(expected)), m
        assert all(0 <= a <= 1 for e in r.rounds for a in e["per_target_accuracy"])


def test_only_the_oracle_violates_privacy(runs):
    _, _, reports = runs
    assert {m for m, r in reports.items() if r.privacy_violating} == {"fed_oracle"}


def test_source_only_and_centralised_runs_communicate_nothing(runs):
    _, _, reports = runs
    for m in ("source_only", "cent_mcd_one2one", "cent_mcd_one2combined", "cent_mcd_one2multiple"):
        assert all(sum(e["upload_params"]) == 0 for e in reports[m].rounds), m


def test_zero_rounds_report_only_pretraining():
    r = run_method("dualadapt", small_cfg(rounds=0), small_bench())
    assert len(r.rounds) == 1 and r.rounds[0]["round"] == 0 and r.ledger == []


def test_client_count_must_match_targets():
    with pytest.raises(ContractError):
        run_method("dualadapt", small_cfg(num_clients=2), small_bench())


def test_unknown_method():
    with pytest.raises(ContractError):
        run_method("fed_avg", small_cfg(), small_bench())


def test_fed_mcd_with_one_client_matches_centralised_one2one():
    bench = small_bench(seed=4, shifts=[ShiftSpec(rotation=0.4)])
    cfg = small_cfg(num_clients=1, seed=4)
    fed = run_method("fed_mcd", cfg, bench)
    cent = run_method("cent_mcd_one2one", cfg, bench)
    assert [e["per_target_accuracy"] for e in fed.rounds] == [e["per_target_accuracy"] for e in cent.rounds]
    a, b = fed.artifacts["models"], cent.artifacts["models"][0]
    assert a.G.equals(b.G) and a.heads[0][0].equals(b.heads[0][0]) and a.heads[0][1].equals(b.heads[0][1])


def test_reports_are_byte_identical_across_reruns():
    bench, cfg = small_bench(seed=5), small_cfg(seed=5)
    assert run_method("dualadapt", cfg, bench).to_json() == run_method("dualadapt", cfg, bench).to_json()


def test_client_order_does_not_change_server_models():
    bench, cfg = small_bench(seed=6), small_cfg(seed=6)
    a = run_method("dualadapt", cfg, bench)
    b = run_method("dualadapt", cfg, bench, client_order=lambda r: [2, 0, 1] if r % 2 else [1, 2, 0])
    sa, sb = a.artifacts["server"], b.artifacts["server"]
    assert all(np.array_equal(x, y) for x, y in zip(sa.G.arrays() + sa.F_g.arrays(), sb.G.arrays() + sb.F_g.arrays()))
    assert a.to_json() == b.to_json()


def test_client_order_must_be_a_permutation():
    with pytest.raises(ContractError):
        run_method("dualadapt", small_cfg(), small_bench(), client_order=lambda r: [0, 0, 1])


def test_uploads_contain_only_model_payloads():
    bench, cfg = small_bench(seed=7), small_cfg(seed=7)
    channel = Channel(keep_payloads=True)
    r = run_method("dualadapt", cfg, bench, channel=channel)
    server = r.artifacts["server"]
    f = module_cost(server.F_g).params
    uploads = [rec for rec in channel.log if rec.direction == "upload"]
    assert len(uploads) == cfg.rounds * cfg.num_clients
    raw = {np.float64(v).tobytes() for s in bench.target_train() for v in s.inputs.ravel()}
    for rec in uploads:
        payload = json.loads(rec.payload)
        assert set(payload) == {"client_id", "F_l", "W_T"}
        w = UploadMsg.from_payload(payload).W_T.param_count()
        assert rec.params == f + w == UploadMsg.payload_params(payload)
        leaves = _leaves({k: v for k, v in payload.items() if k != "client_id"})
        assert not any(np.float64(v).tobytes() in raw for v in leaves)


def _leaves(obj):
    if isinstance(obj, dict):
        return [v for x in obj.values() for v in _leaves(x)]
    if isinstance(obj, list):
        return [v for x in obj for v in _leaves(x)]
    return [obj] if isinstance(obj, (int, float)) and not isinstance(obj, bool) else []


def test_identity_shift_does_not_hurt():
    # targets drawn from the source distribution: adaptation should neither help nor hurt much
    shifts = [ShiftSpec(), ShiftSpec(), ShiftSpec()]
    gaps = []
    for seed in range(5):
        bench = small_bench(seed=seed, shifts=shifts, n=300)
        cfg = small_cfg(seed=seed, pretrain_epochs=10)
        gaps.append(run_method("dualadapt", cfg, bench).mean_accuracy - run_method("source_only", cfg, bench).mean_accuracy)
    assert abs(np.mean(gaps)) <= 0.03


def test_train_config_validation():
    for kw in (dict(num_clients=0), dict(rounds=-1), dict(client_lr=0.0), dict(momentum=1.0), dict(lambda_st=-1.0)):
        with pytest.raises(ContractError):
            TrainConfig(**kw)
    assert replace(TrainConfig(), g_hidden=[3]).g_hidden == (3,)
