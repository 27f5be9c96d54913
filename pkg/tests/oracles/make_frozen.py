"""Regenerate tests/oracles/frozen.json from independent implementations.

Uses torch autograd, scikit-learn and scipy; never imports the package
under test. Run from the repository root:

    python3 tests/oracles/make_frozen.py
"""

import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from scipy.stats import multivariate_normal
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))
import oracle_inputs as oi  # noqa: E402

torch.set_default_dtype(torch.float64)


def t(a, grad=False):
    return torch.tensor(np.asarray(a), dtype=torch.float64, requires_grad=grad)


def ce_gradient():
    logits, labels = oi.ce_logits()
    L = t(logits, grad=True)
    loss = torch.nn.functional.cross_entropy(L, torch.tensor(labels))
    loss.backward()
    return {"loss": loss.item(), "grad": L.grad.numpy().tolist()}


def forward_output():
    x, layers = oi.forward_case()
    h = t(x)
    for W, b in layers:
        h = torch.relu(h @ t(W) + t(b))
    return h.numpy().tolist()


def client_value():
    p_g, p_l, w, lam = oi.client_case()
    pg, pl = t(p_g), t(p_l)
    adv = (pg - pl).abs().sum(dim=1)
    hard = torch.nn.functional.one_hot(pg.argmax(dim=1), pg.shape[1]).double()
    st = -(hard * torch.log(pl)).sum(dim=1)
    return float((-adv + lam * t(w) * st).mean())


def server_two_clients():
    # hand arithmetic with exact fractions
    F = Fraction
    p_g = [[F(6, 10), F(4, 10)], [F(3, 10), F(7, 10)]]
    clients = [
        ([F(1), F(1, 2)], [[F(5, 10), F(5, 10)], [F(3, 10), F(7, 10)]]),
        ([F(2, 10), F(1)], [[F(9, 10), F(1, 10)], [F(0), F(1)]]),
    ]
    total = F(0)
    for w, p_l in clients:
        per = [sum(abs(a - b) for a, b in zip(rg, rl)) for rg, rl in zip(p_g, p_l)]
        total += sum(wi * di for wi, di in zip(w, per)) / len(per)
    return {"p_g": [[float(v) for v in r] for r in p_g],
            "clients": [[[float(v) for v in w], [[float(v) for v in r] for r in p]] for w, p in clients],
            "value": float(total)}


def pca_rank():
    Z = oi.pca_case()
    ratio = np.cumsum(PCA().fit(Z).explained_variance_ratio_)
    r = int(np.argmax(ratio >= 0.8) + 1)
    return {"rank": r, "energy": float(ratio[r - 1])}


def log_density_bruteforce():
    weights, means, variances, z = oi.gmm_case()
    dens = sum(w * multivariate_normal(m, np.diag(v)).pdf(z) for w, m, v in zip(weights, means, variances))
    return float(np.log(dens))


def separable_lr():
    x, y = oi.separable_case()
    return float(LogisticRegression(max_iter=1000).fit(x, y).score(x, y))


def server_hand_step():
    (G,), (Fg,), (Fl,), x, y, lr = oi.server_step_case()
    GW, Gb = t(G[0], True), t(G[1], True)
    FgW, Fgb, FlW, Flb = t(Fg[0]), t(Fg[1]), t(Fl[0]), t(Fl[1])
    X = t(x)
    # proxy of a two-row batch: both rows become the midpoint
    P = ((X[0] + X[1]) / 2).repeat(2, 1)
    z = torch.relu(P @ GW + Gb)
    pg = torch.softmax(z @ FgW + Fgb, dim=1)
    pl = torch.softmax(z @ FlW + Flb, dim=1)
    adapt = (pg - pl).abs().sum(dim=1).mean()
    gW, gb = torch.autograd.grad(adapt, [GW, Gb])
    GW1, Gb1 = (GW - lr * gW).detach().requires_grad_(), (Gb - lr * gb).detach().requires_grad_()
    FgW1, Fgb1 = FgW.clone().requires_grad_(), Fgb.clone().requires_grad_()
    logits = torch.relu(X @ GW1 + Gb1) @ FgW1 + Fgb1
    ce = torch.nn.functional.cross_entropy(logits, torch.tensor(y))
    grads = torch.autograd.grad(ce, [GW1, Gb1, FgW1, Fgb1])
    out = [p - lr * g for p, g in zip([GW1, Gb1, FgW1, Fgb1], grads)]
    return {
        "adaptation": adapt.item(),
        "source_ce": ce.item(),
        "G_W": out[0].detach().numpy().tolist(),
        "G_b": out[1].detach().numpy().tolist(),
        "F_W": out[2].detach().numpy().tolist(),
        "F_b": out[3].detach().numpy().tolist(),
    }


def main():
    frozen = {
        "ce_gradient": ce_gradient(),
        "forward_output": forward_output(),
        "client_objective": client_value(),
        "server_two_clients": server_two_clients(),
        "pca": pca_rank(),
        "log_density": log_density_bruteforce(),
        "separable_lr_accuracy": separable_lr(),
        "server_hand_step": server_hand_step(),
    }
    (HERE / "frozen.json").write_text(json.dumps(frozen, indent=1, sort_keys=True) + "\n")
    print(json.dumps(frozen, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
