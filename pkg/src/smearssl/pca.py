"""Top-k PCA by power iteration with deflation, and the patch-token feature
map renderer."""

from __future__ import annotations

import numpy as np

from .errors import ProtocolError
from .vit import VitEncoder

POWER_TOL = 1e-9
POWER_MAX_ITERS = 10000


def top_components(x: np.ndarray, n_components: int = 3, tol: float = POWER_TOL,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows of `x` are observations. Returns (components [k,d] with
    orthonormal rows, explained variances descending, column mean [d]).

    Power iteration on the explicit sample covariance, deflating each found
    eigenpair. Component signs are fixed so the entry of largest magnitude is
    positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2 or n_components > d:
        raise ProtocolError(
            f"cannot extract {n_components} components from {n}x{d} data")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 13])))
    comps = np.zeros((n_components, d))
    variances = np.zeros(n_components)
    for c in range(n_components):
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        for _ in range(POWER_MAX_ITERS):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:  # rank-deficient remainder: any unit vector works
                break
            w /= norm
            if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
                v = w
                break
            v = w
        # re-orthogonalize against previous components (guards slow deflation drift)
        for j in range(c):
            v -= (v @ comps[j]) * comps[j]
        nv = np.linalg.norm(v)
        if nv > 0:
            v /= nv
        lam = float(v @ cov @ v)
        peak = int(np.argmax(np.abs(v)))
        if v[peak] < 0:
            v = -v
        comps[c] = v
        variances[c] = max(lam, 0.0)
        cov = cov - lam * np.outer(v, v)
    return comps, variances, mean


def pca_map(encoder: VitEncoder, image: np.ndarray,
            n_components: int = 3, seed: int = 0,
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projects the encoder's patch tokens for one image onto their top
    principal components and renders them as an RGB map at input resolution.

    Returns (rgb uint8 [H,W,3], components [k,d], explained variances [k]).
    """
    cfg = encoder.cfg
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    _, patch_tokens = encoder.forward_tokens(img[None])
    tokens = patch_tokens.data[0].astype(np.float64)  # [N, d]
    if tokens.shape[0] < n_components:
        raise ProtocolError(f"{tokens.shape[0]} patch tokens cannot support "
                            f"{n_components} components")
    comps, variances, mean = top_components(tokens, n_components, seed=seed)
    proj = (tokens - mean) @ comps.T  # [N, k]

    g = cfg.grid
    channels = []
    for c in range(n_components):
        col = proj[:, c]
        lo, hi = float(col.min()), float(col.max())
        if hi - lo > 0:
            scaled = (col - lo) / (hi - lo) * 255.0
        else:
            scaled = np.zeros_like(col)
        channels.append(scaled.reshape(g, g))
    small = np.stack(channels, axis=-1)
    rgb = np.repeat(np.repeat(small, cfg.patch_size, axis=0), cfg.patch_size, axis=1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8), comps, variances
