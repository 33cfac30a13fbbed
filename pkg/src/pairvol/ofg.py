"""Volume synthesis by overlapping-frame guidance.

A trained denoiser renders the volume two frames at a time. The first pair
is conditioned on the first two anatomy masks. Each later iteration n
re-renders frame n together with frame n+1: the conditioning channel for
frame n is a guidance map distilled from the frame already accepted there,
so the pair overlaps the frontier of the finished prefix. A provisional
pair (guidance, next mask) supplies the frame from which the successor's
guidance map is distilled, then the final pair runs with guidance maps on
both channels and overwrites both frames. That overlap carries generated
appearance forward: every frame depends on all frames before it, not just
on its own mask.

The markovian_baseline switch instead renders each pair independently from
its two masks. Nothing generated feeds back, which is the comparison arm
the guided mode is measured against.

Noise for iteration n is drawn from a stream seeded by (seed, n), so the
draws for one iteration do not shift when the mask list grows, and the
provisional and final pair of one iteration start from the same noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .conditioning import guidance_map, normalize_mask, text_embed
from .denoiser import DenoiserConfig, DenoiserWeights, forward
from .errors import ConfigError, ContractError, DimensionError
from .pairing import pair_position_encoding
from .schedule import Schedule, ddim_sample
from .volio import DEFAULT_SPACING, Volume


@dataclass(frozen=True)
class OFGConfig:
    """Inference settings for overlapping-frame guidance.

    guide_next_from_first selects which provisional frame the successor's
    guidance map is distilled from: the default uses the provisional
    successor frame itself; the switch uses the provisional frontier frame
    instead.
    """

    ddim_steps: int = 20
    gamma: float = 1.5
    blur_sigma: float = 1.5
    seed: int = 0
    markovian_baseline: bool = False
    guide_next_from_first: bool = False

    def __post_init__(self):
        if self.ddim_steps < 2:
            raise ConfigError(f"ddim_steps must be >= 2, got {self.ddim_steps}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.blur_sigma < 0:
            raise ConfigError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


def _pair_noise(seed: int, n: int, shape) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    return rng.standard_normal(shape).astype(np.float32)


def sample_pair(
    w: DenoiserWeights,
    dcfg: DenoiserConfig,
    cond_a: np.ndarray,
    cond_b: np.ndarray,
    pos: np.ndarray,
    text: np.ndarray,
    sched: Schedule,
    cfg: OFGConfig,
    x_init: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Denoise one frame pair with a deterministic DDIM chain.

    The packed input at every step is the noisy pair concatenated with the
    two conditioning maps; flow conditioning is zeroed (the denoiser is
    trained with conditioning dropout, so zeros select its unconditional
    flow path). With no x_init, the starting noise comes from cfg.seed.
    Returns the two frames clamped to [0,1].
    """
    cond_a = np.asarray(cond_a, dtype=np.float32)
    cond_b = np.asarray(cond_b, dtype=np.float32)
    if cond_a.ndim != 2 or cond_a.shape != cond_b.shape:
        raise DimensionError(f"conditioning maps {cond_a.shape} vs {cond_b.shape}, need equal 2-D")
    for name, c in (("cond_a", cond_a), ("cond_b", cond_b)):
        if c.min() < 0.0 or c.max() > 1.0:
            raise ContractError(f"{name} outside [0,1]: range {c.min()}..{c.max()}")
    h, wd = cond_a.shape
    if x_init is None:
        x_init = _pair_noise(cfg.seed, 0, (1, 2, h, wd))
    cond = np.stack([cond_a, cond_b])[None]
    flow = np.zeros((1, 2, h, wd), dtype=np.float32)
    text_row = np.asarray(text, dtype=np.float32).reshape(1, -1)
    pos_row = np.asarray(pos, dtype=np.float32).reshape(1, -1)

    def eps_fn(x: np.ndarray, t: int) -> np.ndarray:
        packed = np.concatenate([x.astype(np.float32), cond], axis=1)
        out = forward(w, dcfg, nd.Tensor(packed), t, pos_row, sched, flow=flow, text=text_row)
        return out.data

    x0 = ddim_sample(eps_fn, x_init, sched, cfg.ddim_steps, eta=0.0, x0_clip=(0.0, 1.0))
    frames = np.clip(x0[0], 0.0, 1.0).astype(np.float32)
    return frames[0], frames[1]


def reassemble(frames, spacing=DEFAULT_SPACING) -> Volume:
    """Stack per-depth frames into a Volume, clamping values to [0,1]."""
    if len(frames) == 0:
        raise ContractError("reassemble: no frames")
    arrs = [np.asarray(f, dtype=np.float32) for f in frames]
    first = arrs[0].shape
    for k, a in enumerate(arrs):
        if a.ndim != 2 or a.shape != first:
            raise DimensionError(f"reassemble: frame {k} has shape {a.shape}, expected {first}")
    voxels = np.clip(np.stack(arrs), 0.0, 1.0)
    return Volume(voxels=voxels, spacing=tuple(spacing))


def generate_volume(
    w: DenoiserWeights,
    dcfg: DenoiserConfig,
    masks,
    report: str,
    cfg: OFGConfig,
    sched: Schedule,
    n_classes: int,
    spacing=DEFAULT_SPACING,
) -> Volume:
    """Render a depth-(N+1) volume from N+1 per-frame anatomy masks.

    Frame indices map onto positions with f0=0 and fN=N, so the encodings
    span the requested depth whatever N is. Deterministic for fixed
    (weights, masks, report, cfg).
    """
    if len(masks) < 2:
        raise ContractError(f"need at least 2 masks, got {len(masks)}")
    mask_arrs = [np.asarray(m) for m in masks]
    shape = mask_arrs[0].shape
    for k, m in enumerate(mask_arrs):
        if m.ndim != 2 or m.shape != shape:
            raise DimensionError(f"mask {k} has shape {m.shape}, expected {shape}")
    big_n = len(mask_arrs) - 1
    h, wd = shape
    conds = [normalize_mask(m, n_classes) for m in mask_arrs]
    text = text_embed(report, d_text=dcfg.d_text)

    def pos_for(n: int) -> np.ndarray:
        return pair_position_encoding(n, n + 1, 0, big_n, dcfg.d_pos)

    frames: list[np.ndarray | None] = [None] * (big_n + 1)

    if cfg.markovian_baseline:
        for n in range(big_n):
            x_init = _pair_noise(cfg.seed, n, (1, 2, h, wd))
            a, b = sample_pair(w, dcfg, conds[n], conds[n + 1], pos_for(n), text, sched, cfg,
                               x_init=x_init)
            if n == 0:
                frames[0] = a
            frames[n + 1] = b
        return reassemble(frames, spacing)

    x_init = _pair_noise(cfg.seed, 0, (1, 2, h, wd))
    frames[0], frames[1] = sample_pair(w, dcfg, conds[0], conds[1], pos_for(0), text, sched, cfg,
                                       x_init=x_init)
    for n in range(1, big_n):
        x_init = _pair_noise(cfg.seed, n, (1, 2, h, wd))
        g_here = guidance_map(frames[n], mask_arrs[n], n_classes, cfg.gamma, cfg.blur_sigma)
        prov_a, prov_b = sample_pair(w, dcfg, g_here, conds[n + 1], pos_for(n), text, sched, cfg,
                                     x_init=x_init)
        src = prov_a if cfg.guide_next_from_first else prov_b
        g_next = guidance_map(src, mask_arrs[n + 1], n_classes, cfg.gamma, cfg.blur_sigma)
        frames[n], frames[n + 1] = sample_pair(w, dcfg, g_here, g_next, pos_for(n), text, sched,
                                               cfg, x_init=x_init)
    return reassemble(frames, spacing)
