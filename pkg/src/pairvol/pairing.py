"""Frame-pair enumeration, relative positional encodings, and pair packing.

A volume of depth D yields training pairs (i, i+k) for each skip interval k
with i divisible by k, so slices at coarse strides anchor the same start
frames the fine strides do. Each packed pair carries the two frames, their
normalized mask channels, the dense flow between them, a hashed text vector,
and sinusoidal encodings of both frames' relative depth positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import (
    DEFAULT_D_TEXT,
    FlowField,
    horn_schunck_flow,
    normalize_mask,
    text_embed,
)
from .errors import ConfigError, ContractError, DimensionError

DEFAULT_SKIPS = (1, 2, 4)
DEFAULT_D_POS = 64
DEFAULT_LAMBDA = 1.0


@dataclass(frozen=True)
class FramePairIndex:
    i: int
    j: int
    k: int

    def __post_init__(self):
        if self.j != self.i + self.k or self.i < 0 or self.k < 1 or self.i % self.k != 0:
            raise ContractError(f"invalid frame pair ({self.i}, {self.j}, skip {self.k})")


@dataclass(frozen=True)
class PairSample:
    """Everything the denoiser consumes for one training pair."""

    frames: np.ndarray  # (2, h, w) float32, values in [0,1]
    cond_maps: np.ndarray  # (2, h, w) float32, values in [0,1]
    flow: FlowField
    text: np.ndarray  # (d_text,) float32
    pos: np.ndarray  # (2*d_pos,) float32, values in [-1,1]
    index: FramePairIndex


def _check_skips(skips) -> tuple[int, ...]:
    skips = tuple(sorted(set(int(k) for k in skips)))
    if not skips:
        raise ConfigError("skip set must be nonempty")
    if skips[0] < 1:
        raise ConfigError(f"skip intervals must be >= 1, got {skips}")
    return skips


def enumerate_pairs(depth: int, skips) -> list[FramePairIndex]:
    """All pairs {(i, i+k) : i mod k = 0, i+k <= depth-1, k in skips}, sorted by (k, i)."""
    if depth < 2:
        raise ConfigError(f"enumerate_pairs: depth must be >= 2, got {depth}")
    out: list[FramePairIndex] = []
    for k in _check_skips(skips):
        for i in range(0, depth - k, k):
            out.append(FramePairIndex(i=i, j=i + k, k=k))
    return out


def relative_position(i: int, f0: int, fN: int) -> float:
    """Normalized depth position r = (i - f0)/(fN - f0) in [0,1]."""
    if fN <= f0:
        raise ContractError(f"relative_position: need f0 < fN, got {f0} >= {fN}")
    if not (f0 <= i <= fN):
        raise ContractError(f"relative_position: i={i} outside [{f0}, {fN}]")
    return (i - f0) / (fN - f0)


def positional_encoding(r: float, d: int, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """Sinusoidal encoding of a scalar position.

    E[2k] = sin(r / 10000^(lam*2k/d)), E[2k+1] = cos of the same argument.
    """
    if d % 2 != 0 or d < 2:
        raise ConfigError(f"positional_encoding: d must be positive and even, got {d}")
    if lam <= 0:
        raise ConfigError(f"positional_encoding: lambda must be positive, got {lam}")
    k2 = np.arange(0, d, 2, dtype=np.float64)
    args = r / np.power(10000.0, lam * k2 / d)
    enc = np.empty(d, dtype=np.float32)
    enc[0::2] = np.sin(args)
    enc[1::2] = np.cos(args)
    return enc


def pair_position_encoding(
    i: int, j: int, f0: int, fN: int, d_pos: int, lam: float = DEFAULT_LAMBDA
) -> np.ndarray:
    """E(r_i) concatenated with E(r_j), length 2*d_pos."""
    ri = relative_position(i, f0, fN)
    rj = relative_position(j, f0, fN)
    return np.concatenate([positional_encoding(ri, d_pos, lam), positional_encoding(rj, d_pos, lam)])


def pack_pair(
    vol: np.ndarray,
    maskvol: np.ndarray,
    idx: FramePairIndex,
    report: str,
    n_classes: int,
    d_pos: int = DEFAULT_D_POS,
    lam: float = DEFAULT_LAMBDA,
    d_text: int = DEFAULT_D_TEXT,
    flow_alpha: float = 10.0,
    flow_iters: int = 100,
) -> PairSample:
    """Assemble the full conditioning bundle for one (i, j) pair.

    ``vol`` and ``maskvol`` are (d, h, w); positional encodings span the whole
    volume (f0=0, fN=d-1). Deterministic given its arguments.
    """
    vol = np.asarray(vol)
    maskvol = np.asarray(maskvol)
    if vol.ndim != 3 or vol.shape != maskvol.shape:
        raise DimensionError(f"pack_pair: vol {vol.shape} vs mask {maskvol.shape}")
    d = vol.shape[0]
    if not (0 <= idx.i < idx.j < d):
        raise ContractError(f"pack_pair: pair ({idx.i}, {idx.j}) out of range for depth {d}")
    fi = vol[idx.i].astype(np.float32)
    fj = vol[idx.j].astype(np.float32)
    frames = np.stack([fi, fj])
    cond = np.stack(
        [normalize_mask(maskvol[idx.i], n_classes), normalize_mask(maskvol[idx.j], n_classes)]
    )
    flow = horn_schunck_flow(fi, fj, alpha=flow_alpha, iters=flow_iters)
    return PairSample(
        frames=frames,
        cond_maps=cond,
        flow=flow,
        text=text_embed(report, d_text),
        pos=pair_position_encoding(idx.i, idx.j, 0, d - 1, d_pos, lam),
        index=idx,
    )
