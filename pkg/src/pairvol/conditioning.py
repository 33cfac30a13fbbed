"""Conditioning signals: mask encoding, guidance maps, optical flow, text.

The flow estimator is classical Horn-Schunck and the text embedding is signed
feature hashing. Both stand in for large pretrained models; what matters for
the pipeline is the interface (a dense per-pair flow field, a fixed-width text
vector), not the representational power.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import ndtensor as nd
from .errors import ConfigError, ContractError, DimensionError

DEFAULT_FLOW_ALPHA = 10.0
DEFAULT_FLOW_ITERS = 100
DEFAULT_D_TEXT = 64


@dataclass(frozen=True)
class FlowField:
    """Dense displacement field: u along axis 1 (columns), v along axis 0 (rows)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise DimensionError(f"flow components differ: {self.u.shape} vs {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ContractError("flow field contains non-finite values")


def normalize_mask(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Map integer labels onto [0,1] as label/(n_classes-1), float32."""
    if n_classes < 2:
        raise ConfigError(f"normalize_mask: n_classes must be >= 2, got {n_classes}")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(
            f"mask labels outside [0, {n_classes - 1}]: range {labels.min()}..{labels.max()}"
        )
    return labels.astype(np.float32) / np.float32(n_classes - 1)


def _minmax(x: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0,1]; a constant field maps to all zeros."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def guidance_map(
    frame: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    gamma: float = 1.5,
    blur_sigma: float = 1.5,
) -> np.ndarray:
    """Blend the normalized mask (on foreground) with a smoothed, contrast-
    stretched copy of the frame (on background).

    The frame term is F(H(frame^gamma)): gamma power, Gaussian blur (reflected
    borders, truncated at 3 sigma), then min-max normalization. Foreground
    pixels take the normalized mask value exactly.
    """
    if gamma <= 0:
        raise ConfigError(f"guidance_map: gamma must be positive, got {gamma}")
    if blur_sigma < 0:
        raise ConfigError(f"guidance_map: blur_sigma must be >= 0, got {blur_sigma}")
    frame = np.asarray(frame, dtype=np.float32)
    if frame.shape != np.asarray(labels).shape:
        raise DimensionError(f"guidance_map: frame {frame.shape} vs labels {np.asarray(labels).shape}")
    powed = np.power(np.clip(frame, 0.0, 1.0), gamma)
    if blur_sigma > 0:
        blurred = ndimage.gaussian_filter(powed, sigma=blur_sigma, mode="reflect", truncate=3.0)
    else:
        blurred = powed
    xhat = _minmax(blurred)
    fg = np.asarray(labels) > 0
    out = np.where(fg, normalize_mask(labels, n_classes), xhat)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Horn-Schunck optical flow

_KX = np.array([[-1.0, 1.0], [-1.0, 1.0]]) * 0.25
_KY = np.array([[-1.0, -1.0], [1.0, 1.0]]) * 0.25
_KT = np.ones((2, 2)) * 0.25
_AVG = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]]
)


def horn_schunck_flow(
    a: np.ndarray,
    b: np.ndarray,
    alpha: float = DEFAULT_FLOW_ALPHA,
    iters: int = DEFAULT_FLOW_ITERS,
) -> FlowField:
    """Estimate dense flow a -> b by Horn-Schunck iteration.

    Classic scheme: 2x2 stencils for the space/time derivatives, a weighted
    3x3 neighborhood average for the smoothness coupling, and the closed-form
    pointwise update. Fully deterministic.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError(f"horn_schunck_flow: shapes {a.shape} vs {b.shape}")
    if alpha <= 0:
        raise ConfigError(f"horn_schunck_flow: alpha must be positive, got {alpha}")
    if iters < 1:
        raise ConfigError(f"horn_schunck_flow: iters must be >= 1, got {iters}")

    fx = ndimage.correlate(a, _KX, mode="nearest") + ndimage.correlate(b, _KX, mode="nearest")
    fy = ndimage.correlate(a, _KY, mode="nearest") + ndimage.correlate(b, _KY, mode="nearest")
    ft = ndimage.correlate(b, _KT, mode="nearest") - ndimage.correlate(a, _KT, mode="nearest")

    u = np.zeros_like(a)
    v = np.zeros_like(a)
    denom = alpha * alpha + fx * fx + fy * fy
    for _ in range(iters):
        ubar = ndimage.correlate(u, _AVG, mode="nearest")
        vbar = ndimage.correlate(v, _AVG, mode="nearest")
        shared = (fx * ubar + fy * vbar + ft) / denom
        u = ubar - fx * shared
        v = vbar - fy * shared
    return FlowField(u=u.astype(np.float32), v=v.astype(np.float32))


def hs_energy(a: np.ndarray, b: np.ndarray, flow: FlowField, alpha: float) -> float:
    """Horn-Schunck objective: data term + alpha^2 * smoothness term."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fx = ndimage.correlate(a, _KX, mode="nearest") + ndimage.correlate(b, _KX, mode="nearest")
    fy = ndimage.correlate(a, _KY, mode="nearest") + ndimage.correlate(b, _KY, mode="nearest")
    ft = ndimage.correlate(b, _KT, mode="nearest") - ndimage.correlate(a, _KT, mode="nearest")
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    data = (fx * u + fy * v + ft) ** 2
    guy, gux = np.gradient(u)
    gvy, gvx = np.gradient(v)
    smooth = gux**2 + guy**2 + gvx**2 + gvy**2
    return float(np.sum(data + alpha * alpha * smooth))


# ---------------------------------------------------------------------------
# text embedding

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def text_embed(report: str, d_text: int = DEFAULT_D_TEXT) -> np.ndarray:
    """Signed feature hashing of the report text into a unit L2 vector.

    Tokens are lowercased alphanumeric runs; each token contributes +-1 to one
    bucket. The hash is blake2b, which (unlike the builtin hash) is stable
    across processes. Empty text gives the zero vector.
    """
    if d_text < 8:
        raise ConfigError(f"text_embed: d_text must be >= 8, got {d_text}")
    vec = np.zeros(d_text, dtype=np.float32)
    for token in _TOKEN_RE.findall(report.lower()):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        bucket = int.from_bytes(digest[:4], "little") % d_text
        sign = 1.0 if digest[4] & 1 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0:
        vec /= norm
    return vec


# ---------------------------------------------------------------------------
# trainable adapters (differentiable, run on ndtensor)

def adapt_text(
    v: np.ndarray,
    w1: nd.Tensor,
    b1: nd.Tensor,
    w2: nd.Tensor,
    b2: nd.Tensor,
) -> nd.Tensor:
    """Two-layer silu MLP lifting a text vector batch to the bottleneck width.

    Accepts (d_text,) or (N, d_text); returns (N, d_model). The caller adds
    the result to the bottleneck activations, broadcast over space.
    """
    arr = np.asarray(v)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != w1.shape[0]:
        raise DimensionError(f"adapt_text: vec dim {arr.shape[1]} vs W1 rows {w1.shape[0]}")
    x = nd.Tensor(arr.astype(w1.data.dtype))
    h = nd.silu(nd.linear(x, w1, b1))
    return nd.silu(nd.linear(h, w2, b2))


def adapt_flow(
    uv: nd.Tensor,
    conv1_w: nd.Tensor,
    conv1_b: nd.Tensor,
    conv2_w: nd.Tensor,
    conv2_b: nd.Tensor,
) -> nd.Tensor:
    """Lift an (N,2,h,w) flow stack to (N,c_f,h/2,w/2) level-0 features.

    Stride-1 conv, silu, stride-2 conv; both 3x3 with reflection-free zero pad.
    """
    if uv.ndim != 4 or uv.shape[1] != 2:
        raise DimensionError(f"adapt_flow: need (N,2,h,w), got {uv.shape}")
    h = nd.silu(nd.conv2d(uv, conv1_w, conv1_b, stride=1, pad=1))
    return nd.conv2d(h, conv2_w, conv2_b, stride=2, pad=1)
