"""Image similarity metrics: FID, SSIM, and cosine identity similarity.

Feature extractors are pluggable callables (image -> vector); the hermetic
defaults pool a frozen random conv pyramid, so absolute FID/CSIM values are
comparable between runs of this package but not with published numbers.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np
from scipy.signal import convolve2d

from fewshot_heads.errors import DataError
from fewshot_heads.losses import RandomPyramid
from fewshot_heads.tensors import to_tensor

logger = logging.getLogger(__name__)

FID_EPS = 1e-6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REC601 = np.array([0.299, 0.587, 0.114])

FaceEmbedder = Callable[[np.ndarray], np.ndarray]


# -- FID -----------------------------------------------------------------------------


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(matrix)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def compute_fid(features_a: np.ndarray, features_b: np.ndarray, eps: float = FID_EPS) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), with eps*I
    regularization of both covariances and negative eigenvalues clamped to 0.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError(f"need (n, d) feature sets of equal d, got {fa.shape} and {fb.shape}")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValueError("need at least two feature vectors per set")
    if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(fb))):
        raise DataError("non-finite feature values")

    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    dim = fa.shape[1]
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False)) + eps * np.eye(dim)
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False)) + eps * np.eye(dim)

    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    inner = (inner + inner.T) / 2.0
    eigvals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    trace_sqrt = float(np.sqrt(eigvals).sum())

    diff = mu_a - mu_b
    fid = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(fid, 0.0)


# -- SSIM ----------------------------------------------------------------------------


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


_SSIM_KERNEL = _gaussian_window()


def _luminance(image: np.ndarray) -> np.ndarray:
    """[-1, 1] image -> [0, 1] luminance plane (Rec. 601 weights)."""
    arr = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    if arr.ndim == 3:
        arr = arr @ REC601
    return arr


def compute_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5, K1=0.01/K2=0.03) on luminance."""
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ValueError(f"SSIM needs matching shapes, got {np.shape(a)} vs {np.shape(b)}")
    x = _luminance(a)
    y = _luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}px per side for SSIM")

    def window_mean(img):
        return convolve2d(img, _SSIM_KERNEL, mode="valid")

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_x = window_mean(x)
    mu_y = window_mean(y)
    var_x = window_mean(x * x) - mu_x * mu_x
    var_y = window_mean(y * y) - mu_y * mu_y
    cov_xy = window_mean(x * y) - mu_x * mu_y
    ssim_map = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map.mean())


# -- CSIM ----------------------------------------------------------------------------


def compute_csim(a: np.ndarray, b: np.ndarray, face_embedder: FaceEmbedder) -> float:
    """Cosine similarity between face embeddings of two images."""
    ea = np.asarray(face_embedder(a), dtype=np.float64).reshape(-1)
    eb = np.asarray(face_embedder(b), dtype=np.float64).reshape(-1)
    na = np.linalg.norm(ea)
    nb = np.linalg.norm(eb)
    if na == 0.0 or nb == 0.0:
        logger.warning("zero-norm face embedding; defining cosine similarity as 0")
        return 0.0
    return float(ea @ eb / (na * nb))


# -- default pluggable extractors ----------------------------------------------------


class PooledPyramidFeatures:
    """Image -> feature vector via a frozen random conv pyramid, mean-pooled."""

    def __init__(self, seed: int):
        self._pyramid = RandomPyramid(seed=seed)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        import torch

        with torch.no_grad():
            acts = self._pyramid(to_tensor(np.asarray(image)).unsqueeze(0), (0, 1, 2, 3))
            pooled = [a.mean(dim=(2, 3)).squeeze(0) for a in acts]
            return torch.cat(pooled).numpy().astype(np.float64)


_FID_FEATURE_SEED = 7011
_FACE_EMBED_SEED = 9020


def default_fid_features() -> PooledPyramidFeatures:
    return PooledPyramidFeatures(seed=_FID_FEATURE_SEED)


def default_face_embedder() -> PooledPyramidFeatures:
    return PooledPyramidFeatures(seed=_FACE_EMBED_SEED)


def featurize_images(
    images: Sequence[np.ndarray], extractor: FaceEmbedder | None = None
) -> np.ndarray:
    """Stack per-image feature vectors into an (n, d) array."""
    extractor = extractor or default_fid_features()
    return np.stack([extractor(img) for img in images], axis=0)
