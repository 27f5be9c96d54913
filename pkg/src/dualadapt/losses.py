"""Scalar training objectives.

Probability-level functions take class-probability tensors. The model-level
helpers at the bottom build those probabilities with the frozen pathways
already cut from the tape, so gradients reach only the parameters each
participant is allowed to update.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .nn import ModelParams, forward_classifier, forward_features
from .numerics import Tensor

EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_st: float = 1.0

    def __post_init__(self):
        if not self.lambda_st >= 0:
            raise ContractError("lambda_st must be non-negative")


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def cross_entropy_per_example(probs, labels) -> Tensor:
    probs, labels = nx.as_tensor(probs), nx.as_tensor(labels)
    _same_shape(probs, labels)
    return -nx.sum(labels * nx.log(probs + EPS), axis=1)


def cross_entropy(probs, labels) -> Tensor:
    return nx.mean(cross_entropy_per_example(probs, labels))


def discrepancy_per_example(p_g, p_l) -> Tensor:
    """Per-row L1 distance between two probability tensors."""
    p_g, p_l = nx.as_tensor(p_g), nx.as_tensor(p_l)
    _same_shape(p_g, p_l)
    return nx.sum(nx.abs(p_g - p_l), axis=1)


def discrepancy(p_g, p_l) -> Tensor:
    return nx.mean(discrepancy_per_example(p_g, p_l))


def pseudo_labels(p_g) -> Tensor:
    """One-hot argmax rows; np.argmax already breaks ties toward the lowest index."""
    p = np.asarray(nx.as_tensor(p_g).data)
    out = np.zeros_like(p)
    if p.shape[0]:
        out[np.arange(p.shape[0]), p.argmax(axis=1)] = 1.0
    return Tensor(out)


def one_hot(labels, num_classes: int) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return Tensor(out)


def client_objective(p_g, p_l, w_s, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean of  -L1(p_g, p_l) + lambda_st * w_s * CE(p_l, argmax p_g).

    ``p_g`` is treated as a constant.
    """
    p_g = nx.detach(p_g)
    p_l = nx.as_tensor(p_l)
    w = np.asarray(w_s, dtype=np.float64)
    if w.shape != (p_l.shape[0],):
        raise ShapeError(f"weights shape {w.shape} does not match batch {p_l.shape[0]}")
    if w.size and (w.min() < 0.0 or w.max() > 1.0):
        raise ContractError("self-training weights must lie in [0, 1]")
    adv = discrepancy_per_example(p_g, p_l)
    st = cross_entropy_per_example(p_l, pseudo_labels(p_g))
    return nx.mean(-adv + (cfg.lambda_st * w) * st)


def server_objective(per_client: Sequence[tuple]) -> Tensor:
    """Sum over clients of the weighted mean discrepancy.

    Each entry is ``(weights, p_g, p_l)`` evaluated on the same proxy batch.
    """
    if not per_client:
        raise ContractError("server objective needs at least one client")
    total = None
    for weights, p_g, p_l in per_client:
        w = np.asarray(weights, dtype=np.float64)
        term = nx.mean(nx.mul(w, discrepancy_per_example(p_g, p_l)))
        total = term if total is None else total + term
    return total


def client_loss(G: ModelParams, F_g: ModelParams, F_l: ModelParams, x, w_s, cfg: LossConfig) -> Tensor:
    """Client objective with G and F_g frozen; gradients reach F_l only."""
    z = nx.detach(forward_features(G, x))
    p_g = nx.detach(forward_classifier(F_g, z))
    return client_objective(p_g, forward_classifier(F_l, z), w_s, cfg)


def server_adaptation_loss(G: ModelParams, F_g: ModelParams, clients: Sequence[tuple], x) -> Tensor:
    """Server objective on batch ``x`` with every classifier frozen.

    ``clients`` holds ``(weights, F_l)`` pairs; gradients reach G only.
    """
    z = forward_features(G, x)
    p_g = forward_classifier(F_g.frozen(), z)
    terms = [(w, p_g, forward_classifier(F_l.frozen(), z)) for w, F_l in clients]
    return server_objective(terms)
