"""Classical reference: PCA on flattened depth maps, then least-squares regression."""
from dataclasses import dataclass

import numpy as np

from .pipeline import resize_bilinear

PCA_VARIANT = "pca_linreg"
PCA_MAP_SIZE = 64
RIDGE = 1e-8


class RankDeficientError(ValueError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray        # (d,)
    components: np.ndarray  # (m, d), orthonormal rows
    ratios: np.ndarray      # (m,) explained-variance ratios, non-increasing

    @property
    def n_components(self):
        return self.components.shape[0]


def pca_fit(X, var_threshold=0.95):
    """Smallest set of principal components explaining ``var_threshold`` of the variance.

    The eigendecomposition runs on whichever of the covariance (d×d) or the
    Gram matrix (n×n) is smaller; both share their non-zero spectrum.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need an n×d matrix with n >= 2, got shape {X.shape}")
    if not 0 < var_threshold <= 1:
        raise ValueError("var_threshold must lie in (0, 1]")
    n, d = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    if d <= n:
        evals, evecs = np.linalg.eigh(Xc.T @ Xc)
        evals, evecs = evals[::-1], evecs[:, ::-1]
    else:
        evals, u = np.linalg.eigh(Xc @ Xc.T)
        evals, u = evals[::-1], u[:, ::-1]
    evals = np.clip(evals, 0.0, None)
    total = float(np.sum(Xc * Xc))
    if total <= 0 or evals[0] <= 0:
        raise ValueError("data have zero variance")
    ratios = evals / total
    m = int(np.searchsorted(np.cumsum(ratios), var_threshold - 1e-12) + 1)
    m = min(m, int(np.count_nonzero(evals > evals[0] * 1e-12)))
    if d <= n:
        comps = evecs[:, :m].T
    else:
        comps = (Xc.T @ u[:, :m]) / np.sqrt(evals[:m])
        comps = comps.T
    return PcaModel(mean, np.ascontiguousarray(comps), ratios[:m].copy())


def pca_project(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.mean.size:
        raise ValueError(f"expected n×{model.mean.size} input, got {X.shape}")
    return (X - model.mean) @ model.components.T


def pca_reconstruct(model, scores):
    return np.asarray(scores) @ model.components + model.mean


def linreg_fit(scores, targets, ridge=RIDGE):
    """Least squares with intercept; returns ``m + 1`` weights, intercept last."""
    A = np.asarray(scores, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    y = np.asarray(targets, dtype=np.float64).ravel()
    n, m = A.shape
    if y.size != n:
        raise ValueError(f"{n} score rows but {y.size} targets")
    if n <= m:
        raise ValueError(f"need more samples than features, got n={n}, m={m}")
    design = np.hstack([A, np.ones((n, 1))])
    gram = design.T @ design + ridge * np.eye(m + 1)
    if np.linalg.matrix_rank(gram) < m + 1:
        raise RankDeficientError("normal equations are rank deficient even with ridge jitter")
    return np.linalg.solve(gram, design.T @ y)


def linreg_predict(weights, scores):
    A = np.asarray(scores, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.shape[1] + 1 != weights.size:
        raise ValueError(f"weights expect {weights.size - 1} features, got {A.shape[1]}")
    return A @ weights[:-1] + weights[-1]


def flatten_maps(frontal, lateral, size=PCA_MAP_SIZE):
    """Concatenated flattened views, each brought down to at most ``size``×``size``."""
    frontal = np.asarray(frontal)
    lateral = np.asarray(lateral)
    s = frontal.shape[-1]
    if s > size:
        frontal = np.stack([resize_bilinear(m, (size, size)) for m in frontal])
        lateral = np.stack([resize_bilinear(m, (size, size)) for m in lateral])
    n = frontal.shape[0]
    return np.hstack([frontal.reshape(n, -1), lateral.reshape(n, -1)]).astype(np.float64)


@dataclass
class PcaLinreg:
    pca: PcaModel
    weights: np.ndarray


def fit_pca_linreg(frontal, lateral, fat, var_threshold=0.95):
    pca = pca_fit(flatten_maps(frontal, lateral), var_threshold)
    scores = pca_project(pca, flatten_maps(frontal, lateral))
    return PcaLinreg(pca, linreg_fit(scores, fat))


def predict_pca_linreg(model, frontal, lateral):
    return linreg_predict(model.weights, pca_project(model.pca, flatten_maps(frontal, lateral)))
