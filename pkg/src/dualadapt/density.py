"""PCA-reduced diagonal Gaussian mixtures over feature vectors.

A fitted :class:`GmmParams` is the density summary that clients upload and
the server broadcasts. Its JSON payload is exactly what the cost accounting
counts as the mixture's parameter count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InsufficientDataError, ShapeError

VAR_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray  # [d]
    components: np.ndarray  # [d, r], orthonormal columns
    explained_energy: float | None = None  # not transmitted

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.components.shape[1]

    def project(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64)
        if Z.shape[-1] != self.input_dim:
            raise ShapeError(f"expected feature dim {self.input_dim}, got {Z.shape[-1]}")
        return (Z - self.mean) @ self.components


def fit_pca(Z, min_energy: float = 0.8) -> PcaBasis:
    """Smallest-rank PCA basis whose eigenvalues cover ``min_energy`` of the variance.

    Components come from the covariance eigendecomposition, sorted by
    descending eigenvalue; each is signed so its largest-magnitude entry is
    positive. Data with zero total variance gets a rank-1 basis.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError("fit_pca expects an [n, d] matrix")
    n, d = Z.shape
    if n < 2:
        raise InsufficientDataError(f"PCA needs at least 2 rows, got {n}")
    mean = Z.mean(axis=0)
    X = Z - mean
    cov = X.T @ X / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0.0:
        r, energy = 1, 1.0
    else:
        frac = np.cumsum(evals) / total
        r = int(np.searchsorted(frac, min_energy - 1e-12) + 1)
        r = min(r, d)
        energy = float(min(frac[r - 1], 1.0))
    comps = evecs[:, :r].copy()
    for j in range(r):
        k = int(np.argmax(np.abs(comps[:, j])))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaBasis(mean, comps, energy)


@dataclass(frozen=True)
class GmmParams:
    pca: PcaBasis
    weights: np.ndarray  # [K]
    means: np.ndarray  # [K, r]
    variances: np.ndarray  # [K, r]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def to_dict(self) -> dict:
        return {
            "mean": self.pca.mean.tolist(),
            "components": self.pca.components.tolist(),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GmmParams":
        d_in = len(d["mean"])
        comps = np.asarray(d["components"], dtype=np.float64).reshape(d_in, -1)
        r = comps.shape[1]
        pca = PcaBasis(np.asarray(d["mean"], dtype=np.float64), comps, None)
        return cls(
            pca,
            np.asarray(d["weights"], dtype=np.float64),
            np.asarray(d["means"], dtype=np.float64).reshape(-1, r),
            np.asarray(d["variances"], dtype=np.float64).reshape(-1, r),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def param_count(self) -> int:
        """Numbers carried on the wire: mean, components, weights, means, variances."""
        return int(
            self.pca.mean.size + self.pca.components.size + self.weights.size + self.means.size + self.variances.size
        )


@dataclass
class EmResult:
    params: GmmParams
    log_likelihoods: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.log_likelihoods)


def _component_log_probs(Y: np.ndarray, weights, means, variances) -> np.ndarray:
    """[n, K] matrix of log(w_k) + log N(y; mu_k, diag var_k)."""
    diff = Y[:, None, :] - means[None, :, :]
    quad = (diff * diff / variances[None, :, :]).sum(axis=2)
    log_det = np.log(variances).sum(axis=1)
    r = Y.shape[1]
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w[None, :] - 0.5 * (quad + log_det[None, :] + r * LOG_2PI)


def _kmeans_pp(Y: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = Y.shape[0]
    centers = [Y[rng.integers(n)]]
    d2 = ((Y - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers.append(Y[idx])
        d2 = np.minimum(d2, ((Y - Y[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def fit_gmm_em(Z, C: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6, min_energy: float = 0.8) -> EmResult:
    """Fit a 2C-component diagonal GMM by EM in PCA coordinates.

    The returned trace holds the mean log-likelihood evaluated before each
    M-step; EM makes it non-decreasing.
    """
    Z = np.asarray(Z, dtype=np.float64)
    K = 2 * int(C)
    n = Z.shape[0]
    if n < K or n < 2:
        raise InsufficientDataError(f"{n} examples cannot support {K} mixture components")
    pca = fit_pca(Z, min_energy)
    Y = pca.project(Z)
    rng = np.random.default_rng(seed)
    means = _kmeans_pp(Y, K, rng)
    variances = np.tile(np.maximum(Y.var(axis=0), VAR_FLOOR), (K, 1))
    weights = np.full(K, 1.0 / K)

    trace: list[float] = []
    for _ in range(max_iters):
        lp = _component_log_probs(Y, weights, means, variances)
        log_norm = logsumexp(lp, axis=1)
        ll = float(log_norm.mean())
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            break
        trace.append(ll)
        resp = np.exp(lp - log_norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        weights = weights / weights.sum()
        alive = nk > 0
        new_means = means.copy()
        new_means[alive] = (resp.T @ Y)[alive] / nk[alive, None]
        new_vars = variances.copy()
        for k in np.flatnonzero(alive):
            diff = Y - new_means[k]
            new_vars[k] = (resp[:, k] @ (diff * diff)) / nk[k]
        means = new_means
        variances = np.maximum(new_vars, VAR_FLOOR)
    else:
        lp = _component_log_probs(Y, weights, means, variances)
        trace.append(float(logsumexp(lp, axis=1).mean()))
    return EmResult(GmmParams(pca, weights, means, variances), trace)


def fit_gmm(Z, C: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6) -> GmmParams:
    return fit_gmm_em(Z, C, seed, max_iters, tol).params


def log_density_batch(gmm: GmmParams, Z) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    Y = gmm.pca.project(Z)
    return logsumexp(_component_log_probs(Y, gmm.weights, gmm.means, gmm.variances), axis=1)


def log_density(gmm: GmmParams, z) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("log_density expects a single feature vector")
    return float(log_density_batch(gmm, z[None, :])[0])


def minmax_weights(log_dens) -> np.ndarray:
    """Map log-densities onto [0, 1] by per-batch min-max scaling.

    A single example, or a batch whose log-densities are all equal, maps to
    all ones.
    """
    ld = np.asarray(log_dens, dtype=np.float64)
    lo, hi = ld.min(), ld.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.ones_like(ld)
    return (ld - lo) / (hi - lo)


def confidence_weights(gmm: GmmParams, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ShapeError("confidence_weights expects a non-empty [batch, d] matrix")
    return minmax_weights(log_density_batch(gmm, Z))
