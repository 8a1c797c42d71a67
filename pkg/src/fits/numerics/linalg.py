"""Pearson correlation and power-iteration PCA."""

from __future__ import annotations

import numpy as np

from fits.errors import DegenerateInput, RankError, ShapeError


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ShapeError(f"pearson_r needs equal lengths >= 2, got {x.size} and {y.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInput("pearson_r: zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def _power_iteration(cov: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    d = cov.shape[0]
    # fixed, non-symmetric start so results do not depend on global RNG state
    v = 1.0 + np.arange(d) / d
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return float(v @ cov @ v), v


def pca_project(rows, n_components: int = 2, tol: float = 1e-10, max_iter: int = 1000):
    """Project mean-centered ``rows`` onto their top principal directions.

    Returns ``(projected, components)`` with ``components`` shaped
    ``(n_components, dim)``; each component's first nonzero coordinate is
    positive so repeated runs give identical coordinates.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_components + 1:
        raise ShapeError(f"pca_project needs >= {n_components + 1} rows, got {x.shape}")
    if n_components > x.shape[1]:
        raise RankError(f"{n_components} components from {x.shape[1]} columns")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    scale = max(float(np.trace(cov)), 1e-300)
    comps = []
    for _ in range(n_components):
        lam, v = _power_iteration(cov, tol, max_iter)
        if lam <= 1e-12 * scale:
            raise RankError("data rank is below the requested number of components")
        v = _fix_sign(v)
        comps.append(v)
        cov = cov - lam * np.outer(v, v)
    components = np.array(comps)
    return xc @ components.T, components
