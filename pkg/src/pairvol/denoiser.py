"""Conditional noise-prediction U-Net over packed frame pairs.

The network maps a (2c+2)-channel packed input [frame_i, frame_j, cond_i,
cond_j] to a 2c-channel noise estimate for the two frames. Conditioning
enters additively: a per-level projection of the timestep + frame-position
embedding, optical-flow features at the first encoder level, and a text
vector at the bottleneck. Additivity means a zeroed adapter contributes
exactly nothing, which is what conditioning dropout relies on.

Layout for depth D (2 or 3): a stride-2 stem, D encoder levels with widths
base*2^l (the deepest is the bottleneck), skip connections by channel
concatenation, nearest-neighbor upsampling in the decoder, and a linear
head back to 2c channels at full resolution. Spatial dims must be divisible
by 2^D.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import ndtensor as nd
from .conditioning import FlowField, adapt_flow, adapt_text
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .pairing import positional_encoding
from .schedule import Schedule

_GN_GROUPS = 4


@dataclass(frozen=True)
class DenoiserConfig:
    c: int = 1
    base_width: int = 16
    depth: int = 2
    d_model: int = 32
    d_pos: int = 64
    c_f: int = 16
    d_text: int = 64
    n_classes: int = 3

    def __post_init__(self):
        if self.depth not in (2, 3):
            raise ConfigError(f"depth must be 2 or 3, got {self.depth}")
        if self.base_width < 8 or self.base_width % _GN_GROUPS != 0:
            raise ConfigError(
                f"base_width must be >= 8 and divisible by {_GN_GROUPS}, got {self.base_width}"
            )
        for name in ("c", "d_model", "d_pos", "c_f", "d_text", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model != self.base_width * 2 ** (self.depth - 1):
            raise ConfigError(
                f"d_model must equal base_width * 2**(depth-1) = "
                f"{self.base_width * 2 ** (self.depth - 1)}, got {self.d_model}"
            )

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2**l for l in range(self.depth))

    @property
    def in_channels(self) -> int:
        return 2 * self.c + 2

    @property
    def out_channels(self) -> int:
        return 2 * self.c


class DenoiserWeights:
    """Named, ordered parameter set; every entry is a grad-enabled Tensor."""

    def __init__(self, params: Mapping[str, nd.Tensor]):
        self.params: dict[str, nd.Tensor] = dict(params)
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise ContractError(f"parameter {name} contains non-finite values")
            p.name = name

    def __getitem__(self, name: str) -> nd.Tensor:
        return self.params[name]

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)


def _param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter's shape, in a fixed order shared by init and loading."""
    widths = cfg.widths
    shapes: dict[str, tuple[int, ...]] = {
        "stem.w": (widths[0], cfg.in_channels, 3, 3),
        "stem.b": (widths[0],),
        "flow.c1.w": (cfg.c_f, 2, 3, 3),
        "flow.c1.b": (cfg.c_f,),
        "flow.c2.w": (widths[0], cfg.c_f, 3, 3),
        "flow.c2.b": (widths[0],),
        "text.l1.w": (cfg.d_text, cfg.d_model),
        "text.l1.b": (cfg.d_model,),
        "text.l2.w": (cfg.d_model, cfg.d_model),
        "text.l2.b": (cfg.d_model,),
    }
    for l, width in enumerate(widths):
        if l > 0:
            shapes[f"down{l}.w"] = (width, widths[l - 1], 3, 3)
            shapes[f"down{l}.b"] = (width,)
        shapes[f"emb{l}.w"] = (3 * cfg.d_pos, width)
        shapes[f"emb{l}.b"] = (width,)
        shapes[f"enc{l}.conv.w"] = (width, width, 3, 3)
        shapes[f"enc{l}.conv.b"] = (width,)
        shapes[f"enc{l}.gn.g"] = (width,)
        shapes[f"enc{l}.gn.b"] = (width,)
    for l in range(cfg.depth - 2, -1, -1):
        shapes[f"dec{l}.conv.w"] = (widths[l], widths[l + 1] + widths[l], 3, 3)
        shapes[f"dec{l}.conv.b"] = (widths[l],)
        shapes[f"dec{l}.gn.g"] = (widths[l],)
        shapes[f"dec{l}.gn.b"] = (widths[l],)
    shapes["head.w"] = (cfg.out_channels, widths[0], 3, 3)
    shapes["head.b"] = (cfg.out_channels,)
    return shapes


def init_weights(cfg: DenoiserConfig, seed: int) -> DenoiserWeights:
    """Fan-in-scaled uniform weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    params: dict[str, nd.Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".gn.g"):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b") or name.endswith(".gn.b"):
            data = np.zeros(shape, dtype=np.float32)
        elif len(shape) == 4:  # conv: fan-in = c_in * k * k
            bound = 1.0 / np.sqrt(shape[1] * shape[2] * shape[3])
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:  # linear (in, out): fan-in = in
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params[name] = nd.Tensor(data, requires_grad=True, name=name)
    return DenoiserWeights(params)


def count_params(w) -> int:
    """Total parameter elements in a weight set or name->Tensor mapping."""
    params = w.params if isinstance(w, DenoiserWeights) else dict(w)
    return sum(int(np.prod(p.shape)) if p.shape else 1 for p in params.values())


def _condition_vector(cfg: DenoiserConfig, t, pos, n: int, sched: Schedule) -> nd.Tensor:
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t_arr.size == 1:
        t_arr = np.full(n, int(t_arr[0]), dtype=np.int64)
    if t_arr.shape != (n,):
        raise DimensionError(f"t must be scalar or ({n},), got shape {t_arr.shape}")
    if t_arr.min() < 1 or t_arr.max() > sched.T:
        raise ContractError(f"timestep out of range 1..{sched.T}: {t_arr.min()}..{t_arr.max()}")

    pos_arr = np.asarray(pos, dtype=np.float32)
    if pos_arr.ndim == 1:
        pos_arr = np.broadcast_to(pos_arr, (n, pos_arr.size))
    if pos_arr.shape != (n, 2 * cfg.d_pos):
        raise DimensionError(f"pos must be (2*d_pos,) or (n, 2*d_pos), got {pos_arr.shape}")

    t_emb = np.stack(
        [positional_encoding(int(ti) / sched.T, cfg.d_pos, lam=1.0) for ti in t_arr]
    ).astype(np.float32)
    return nd.Tensor(np.concatenate([t_emb, pos_arr], axis=1))


def _flow_stack(flow, n: int, h: int, w: int) -> nd.Tensor:
    if isinstance(flow, FlowField):
        arr = np.broadcast_to(np.stack([flow.u, flow.v])[None], (n, 2, h, w)).astype(np.float32)
    else:
        arr = np.asarray(flow, dtype=np.float32)
        if arr.shape != (n, 2, h, w):
            raise DimensionError(f"flow must be (n,2,h,w) = ({n},2,{h},{w}), got {arr.shape}")
    return nd.Tensor(arr.copy())


def forward(
    w: DenoiserWeights,
    cfg: DenoiserConfig,
    packed: nd.Tensor,
    t,
    pos,
    sched: Schedule,
    flow=None,
    text=None,
) -> nd.Tensor:
    """Predict per-frame noise for a batch of packed pairs.

    ``packed`` is (n, 2c+2, h, w) with channels [frame_i, frame_j, cond_i,
    cond_j]. ``flow`` (FlowField or (n,2,h,w) array) and ``text`` ((d_text,)
    or (n,d_text) array) may be None, which skips their additive branch —
    the form conditioning dropout takes.
    """
    x = nd._as_tensor(packed)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"packed must be (n, {cfg.in_channels}, h, w), got {tuple(x.shape)}"
        )
    n, _, h, w_dim = x.shape
    div = 2**cfg.depth
    if h % div != 0 or w_dim % div != 0:
        raise ConfigError(f"spatial dims {h}x{w_dim} not divisible by 2^depth = {div}")

    cond_vec = _condition_vector(cfg, t, pos, n, sched)

    def emb(level: int, width: int) -> nd.Tensor:
        out = nd.linear(cond_vec, w[f"emb{level}.w"], w[f"emb{level}.b"])
        return nd.reshape(out, (n, width, 1, 1))

    def block(x_in: nd.Tensor, prefix: str) -> nd.Tensor:
        y = nd.conv2d(x_in, w[f"{prefix}.conv.w"], w[f"{prefix}.conv.b"], stride=1, pad=1)
        y = nd.group_norm(y, _GN_GROUPS, w[f"{prefix}.gn.g"], w[f"{prefix}.gn.b"])
        return nd.silu(y)

    widths = cfg.widths
    x = nd.conv2d(x, w["stem.w"], w["stem.b"], stride=2, pad=1)
    if flow is not None:
        uv = _flow_stack(flow, n, h, w_dim)
        x = nd.add(x, adapt_flow(uv, w["flow.c1.w"], w["flow.c1.b"], w["flow.c2.w"], w["flow.c2.b"]))
    x = nd.add(x, emb(0, widths[0]))
    x = block(x, "enc0")

    skips = [x]
    for l in range(1, cfg.depth):
        x = nd.conv2d(x, w[f"down{l}.w"], w[f"down{l}.b"], stride=2, pad=1)
        x = nd.add(x, emb(l, widths[l]))
        if l == cfg.depth - 1 and text is not None:
            lifted = adapt_text(text, w["text.l1.w"], w["text.l1.b"], w["text.l2.w"], w["text.l2.b"])
            x = nd.add(x, nd.reshape(lifted, (n, cfg.d_model, 1, 1)))
        x = block(x, f"enc{l}")
        if l < cfg.depth - 1:
            skips.append(x)

    for l in range(cfg.depth - 2, -1, -1):
        x = nd.upsample_nearest2x(x)
        x = nd.concat([x, skips[l]], axis=1)
        x = block(x, f"dec{l}")

    x = nd.upsample_nearest2x(x)
    return nd.conv2d(x, w["head.w"], w["head.b"], stride=1, pad=1)


def save_weights(path, w: DenoiserWeights) -> None:
    nd.save_checkpoint(w.params, path)


def load_weights(path, cfg: DenoiserConfig) -> DenoiserWeights:
    """Read a checkpoint and validate it against the config's shape table."""
    arrays = nd.load_checkpoint(path)
    expected = _param_shapes(cfg)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise FormatError(f"{path}: missing parameters {missing[:4]}{'...' if len(missing) > 4 else ''}")
    params = {}
    for name, shape in expected.items():
        arr = arrays[name]
        if tuple(arr.shape) != shape:
            raise FormatError(f"{path}: parameter {name} has shape {arr.shape}, expected {shape}")
        params[name] = nd.Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return DenoiserWeights(params)
