"""Fidelity and coherence metrics for generated volumes.

Overlap metrics (dice, jaccard) and a 95th-percentile surface distance score
volumes against reference masks. Temporal metrics (t_coherence, flicker)
score slice sequences. Distribution distance (frechet_distance) compares
Gaussian summaries of handcrafted per-slice features.

Conventions, chosen once and tested:
  - dice/jaccard of two empty masks is 1.0 (perfect agreement on "nothing").
  - hd95 surfaces are foreground voxels with at least one six-connected
    background neighbor; voxels on the array border count as surface. Both
    masks must be non-empty; callers map the error to a worst-case score.
  - t_coherence uses the squared L2 distance (sum over pixels, not mean)
    between the frames of each pair, averaged over pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError
from .pairing import FramePairIndex
from .volio import Volume

FEATURE_COUNT = 12
_HIST_BINS = 8
_FG_THRESHOLD = 0.3


def _as_binary(a) -> np.ndarray:
    arr = np.asarray(a)
    return arr.astype(bool)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"mask shape mismatch: {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """Dice coefficient 2|A∩B|/(|A|+|B|); both empty -> 1.0."""
    a, b = _as_binary(a), _as_binary(b)
    _check_same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def jaccard(a, b) -> float:
    """Jaccard index |A∩B|/|A∪B|; both empty -> 1.0."""
    a, b = _as_binary(a), _as_binary(b)
    _check_same_shape(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def surface_voxels(mask) -> np.ndarray:
    """Boolean mask of foreground voxels with a six-connected background
    neighbor; the outside of the array counts as background."""
    m = _as_binary(mask)
    if m.ndim != 3:
        raise DimensionError(f"expected (d,h,w) mask, got shape {m.shape}")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    six = ndimage.generate_binary_structure(3, 1)  # faces only
    eroded = ndimage.binary_erosion(padded, structure=six)[1:-1, 1:-1, 1:-1]
    return m & ~eroded


def hd95(a, b, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile surface distance in spacing units.

    For each surface voxel of one mask, the Euclidean distance (weighted by
    per-axis spacing) to the nearest surface voxel of the other; take the
    95th percentile per direction and the max of the two directions.
    """
    a, b = _as_binary(a), _as_binary(b)
    _check_same_shape(a, b)
    if a.ndim != 3:
        raise DimensionError(f"expected (d,h,w) masks, got shape {a.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ContractError(f"spacing must be 3 positive floats, got {spacing!r}")
    if not a.any() or not b.any():
        raise ContractError("hd95 undefined for an empty mask")

    surf_a, surf_b = surface_voxels(a), surface_voxels(b)

    def directed(src: np.ndarray, dst: np.ndarray) -> float:
        # distance at every voxel to the nearest dst surface voxel
        field = ndimage.distance_transform_edt(~dst, sampling=spacing)
        return float(np.percentile(field[src], 95))

    return max(directed(surf_a, surf_b), directed(surf_b, surf_a))


def t_coherence(frames: Sequence[np.ndarray], pairs: Sequence[FramePairIndex]) -> float:
    """Mean over pairs of the squared L2 distance between the paired frames."""
    if not pairs:
        raise ContractError("t_coherence needs at least one pair")
    n = len(frames)
    total = 0.0
    for p in pairs:
        if p.j >= n:
            raise ContractError(f"pair {(p.i, p.j)} out of range for {n} frames")
        diff = np.asarray(frames[p.i], dtype=np.float64) - np.asarray(frames[p.j], dtype=np.float64)
        total += float(np.sum(diff * diff))
    return total / len(pairs)


def flicker(frames: Sequence[np.ndarray]) -> float:
    """Mean over consecutive frames of the mean absolute difference."""
    if len(frames) < 2:
        raise ContractError(f"flicker needs >= 2 frames, got {len(frames)}")
    vals = []
    for a, b in zip(frames, frames[1:]):
        diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        vals.append(float(np.mean(np.abs(diff))))
    return float(np.mean(vals))


@dataclass(frozen=True)
class FeatureSummary:
    """Gaussian summary (mean vector, covariance) of per-slice features."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.ndim != 1 or self.sigma.shape != (self.mu.size, self.mu.size):
            raise DimensionError(
                f"FeatureSummary needs mu (k,) and sigma (k,k); got {self.mu.shape}, {self.sigma.shape}"
            )
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-6):
            raise ContractError("covariance not symmetric within 1e-6")
        eigvals = np.linalg.eigvalsh(0.5 * (self.sigma + self.sigma.T))
        if eigvals.min() < -1e-8:
            raise ContractError(f"covariance not PSD: min eigenvalue {eigvals.min():.3e}")


def slice_features(sl: np.ndarray) -> np.ndarray:
    """Twelve handcrafted features for one (h,w) slice: mean, variance,
    8-bin intensity histogram over [0,1], gradient-magnitude mean, and
    foreground fraction at the 0.3 threshold."""
    s = np.asarray(sl, dtype=np.float64)
    if s.ndim != 2:
        raise DimensionError(f"expected (h,w) slice, got shape {s.shape}")
    hist, _ = np.histogram(s, bins=_HIST_BINS, range=(0.0, 1.0))
    gy, gx = np.gradient(s)
    grad_mean = float(np.mean(np.sqrt(gy * gy + gx * gx)))
    return np.array(
        [float(s.mean()), float(s.var())]
        + (hist / s.size).tolist()
        + [grad_mean, float((s >= _FG_THRESHOLD).mean())],
        dtype=np.float64,
    )


def feature_summary(vol: Volume) -> FeatureSummary:
    """Per-slice features summarized as a Gaussian over slices."""
    if vol.depth < 2:
        raise ContractError(f"feature_summary needs >= 2 slices, got {vol.depth}")
    feats = np.stack([slice_features(vol.voxels[z]) for z in range(vol.depth)])
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False)
    sigma = 0.5 * (sigma + sigma.T)
    return FeatureSummary(mu=mu, sigma=sigma)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, clamping negatives."""
    eigvals, eigvecs = np.linalg.eigh(0.5 * (m + m.T))
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(p: FeatureSummary, q: FeatureSummary) -> float:
    """Fréchet distance between two Gaussian feature summaries:
    ||mu_p - mu_q||^2 + Tr(S_p + S_q - 2 (S_p S_q)^{1/2}).

    The cross term uses sqrt(S_p) S_q sqrt(S_p), which is symmetric PSD and
    shares the eigenvalues of S_p S_q; negative eigenvalues from roundoff
    are clamped at zero.
    """
    if p.mu.size != q.mu.size:
        raise DimensionError(f"feature count mismatch: {p.mu.size} vs {q.mu.size}")
    diff = p.mu - q.mu
    root_p = _psd_sqrt(p.sigma)
    cross = _psd_sqrt(root_p @ q.sigma @ root_p)
    val = float(diff @ diff + np.trace(p.sigma) + np.trace(q.sigma) - 2.0 * np.trace(cross))
    return max(val, 0.0)
