"""Fixed inputs shared by the oracle generator and the tests that read its output.

Only numpy is used here so both sides rebuild bit-identical arrays.
"""

import numpy as np


def ce_logits():
    rng = np.random.default_rng(101)
    return rng.normal(size=(4, 3)), np.array([0, 2, 1, 2])


def forward_case():
    x = np.random.default_rng(102).normal(size=(5, 6))
    rng = np.random.default_rng(103)
    W1, b1 = rng.normal(size=(6, 8)), rng.normal(size=8)
    W2, b2 = rng.normal(size=(8, 3)), rng.normal(size=3)
    return x, [(W1, b1), (W2, b2)]


def _softmax(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def client_case():
    rng = np.random.default_rng(104)
    p_g = _softmax(rng.normal(size=(6, 4)))
    p_l = _softmax(rng.normal(size=(6, 4)))
    w = rng.uniform(size=6)
    return p_g, p_l, w, 0.7


def pca_case():
    rng = np.random.default_rng(105)
    mix = np.diag([3.0, 2.0, 1.0, 0.5, 0.2]) @ rng.normal(size=(5, 5))
    return rng.normal(size=(50, 5)) @ mix + rng.normal(size=5)


def gmm_case():
    """Three diagonal 2-D components with an identity PCA basis, and a query point."""
    weights = np.array([0.5, 0.3, 0.2])
    means = np.array([[0.0, 0.0], [1.5, -0.5], [-1.0, 2.0]])
    variances = np.array([[1.0, 0.5], [0.3, 0.8], [2.0, 1.2]])
    z = np.array([0.4, 0.7])
    return weights, means, variances, z


def separable_case():
    rng = np.random.default_rng(106)
    n = 200
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 4))
    x[:, 0] += np.where(y == 1, 3.0, -3.0)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def server_step_case():
    """Tiny server: G 3->4 (relu output), heads 4->2, two labeled source rows."""
    rng = np.random.default_rng(107)
    G = [(rng.normal(size=(3, 4)), rng.normal(size=4) * 0.1)]
    F_g = [(rng.normal(size=(4, 2)), rng.normal(size=2) * 0.1)]
    F_l = [(rng.normal(size=(4, 2)), rng.normal(size=2) * 0.1)]
    x = rng.normal(size=(2, 3))
    y = np.array([0, 1])
    return G, F_g, F_l, x, y, 0.05
