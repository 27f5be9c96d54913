"""Server-side proxy target batches built by pairwise averaging of source rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import GmmParams, confidence_weights
from .errors import ContractError, ShapeError
from .nn import ModelParams, forward_features


@dataclass(frozen=True)
class ProxyBatch:
    inputs: np.ndarray  # [B, d]
    provenance: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return self.inputs.shape[0]


def mixup_pair(x_m, x_n) -> np.ndarray:
    x_m = np.asarray(x_m, dtype=np.float64)
    x_n = np.asarray(x_n, dtype=np.float64)
    if x_m.shape != x_n.shape:
        raise ShapeError(f"cannot mix shapes {x_m.shape} and {x_n.shape}")
    return (x_m + x_n) / 2


def build_proxy_batch(source_batch, rng_seed) -> ProxyBatch:
    """One mixup row per source row, each averaged with a distinct random partner."""
    X = np.asarray(source_batch, dtype=np.float64)
    B = X.shape[0]
    if B < 2:
        raise ContractError("a proxy batch needs at least two source rows")
    rng = np.random.default_rng(rng_seed)
    partners = (np.arange(B) + rng.integers(1, B, size=B)) % B
    inputs = (X + X[partners]) / 2
    return ProxyBatch(inputs, tuple((int(m), int(n)) for m, n in zip(range(B), partners)))


def weight_proxy(gmm_T: GmmParams, G: ModelParams, proxy: ProxyBatch) -> np.ndarray:
    z = forward_features(G.frozen(), proxy.inputs).data
    return confidence_weights(gmm_T, z)
