"""Minimal dense N-D tensor with reverse-mode automatic differentiation.

Only the operations the denoiser needs are provided: conv2d, nearest-neighbor
upsampling, linear, group_norm, silu, add, mul, concat, reshape, sum, mean and
mse. Arrays are float32 by default and row-major NCHW; ops preserve the input
dtype so gradient checking can run the same graph in float64.

Broadcasting is intentionally restricted to the rank patterns the model uses:

* ``add``: same shape, or (N,C,H,W) + (N,C,1,1)
* ``mul``: same shape, a python scalar, (N,G) * (N,1), or (N,C,H,W) * (N,1,1,1)

Reductions go through numpy's fixed pairwise order, so identical seeds and
inputs give bit-identical results run to run in a single-threaded process.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericalError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_debug_checks = False


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled: bool) -> None:
    """Toggle the per-op finite-value assertion (off by default, costs a pass per op)."""
    global _debug_checks
    _debug_checks = enabled


class Tensor:
    """Dense array plus optional gradient buffer and graph linkage.

    Data is immutable by convention after construction: all mutation goes
    through recorded ops, and the in-place optimizer update happens outside
    the graph between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        # numpy float arrays keep their precision (grad_check runs graphs in
        # float64); anything else, lists included, becomes float32
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def _finalize(out: Tensor, parents: Iterable[Tensor], backward: Callable) -> Tensor:
    """Attach graph linkage when grad mode is on and any parent needs grad."""
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise NumericalError("op produced non-finite values on finite inputs")
    parents = tuple(p for p in parents if p.requires_grad)
    if _grad_enabled and parents:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a (N,C,1,1) right operand against NCHW."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        ok = (
            a.ndim == 4
            and b.ndim == 4
            and b.shape == (a.shape[0], a.shape[1], 1, 1)
        )
        if not ok:
            raise DimensionError(f"add: unsupported shapes {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            if b.shape == a.shape:
                b._accumulate(g)
            else:
                b._accumulate(g.sum(axis=(2, 3), keepdims=True))

    return _finalize(out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; right operand may be a scalar, (N,1) against (N,G),
    or (N,1,1,1) against NCHW (used for per-sample conditioning masks)."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        s = float(b)
        out = Tensor(a.data * s)

        def backward_scalar(g):
            if a.requires_grad:
                a._accumulate(g * s)

        return _finalize(out, (a,), backward_scalar)

    b = _as_tensor(b)
    if a.shape != b.shape:
        ok = (a.ndim == 2 and b.shape == (a.shape[0], 1)) or (
            a.ndim == 4 and b.shape == (a.shape[0], 1, 1, 1)
        )
        if not ok:
            raise DimensionError(f"mul: unsupported shapes {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            if b.shape != a.shape:
                axes = tuple(range(1, a.ndim))
                gb = gb.sum(axis=axes, keepdims=True)
            b._accumulate(gb)

    return _finalize(out, (a, b), backward)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other dims must match."""
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            i != axis and t.shape[i] != base[i] for i in range(t.ndim)
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                t._accumulate(g[tuple(idx)])
            offset += s

    return _finalize(out, tensors, backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _finalize(out, (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), numerically stable on both tails."""
    a = _as_tensor(a)
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(x * sig)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * sig * (1.0 + x * (1.0 - sig)))

    return _finalize(out, (a,), backward)


def tsum(a: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.shape, g, dtype=a.data.dtype))

    return _finalize(out, (a,), backward)


def tmean(a: Tensor) -> Tensor:
    """Full reduction to the scalar mean."""
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))
    n = a.size

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(a.shape, g / n, dtype=a.data.dtype))

    return _finalize(out, (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error between two same-shape tensors (scalar output)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.asarray((diff * diff).mean(), dtype=diff.dtype))
    n = diff.size

    def backward(g):
        scale = 2.0 * g / n
        if a.requires_grad:
            a._accumulate(scale * diff)
        if b.requires_grad:
            b._accumulate(-scale * diff)

    return _finalize(out, (a, b), backward)


# ---------------------------------------------------------------------------
# neural ops

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(N,F) @ (F,G) + (G,), bias broadcast over rows."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: inner dims {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} vs out dim {w.shape[1]}")
    out = Tensor(x.data @ w.data + b.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _finalize(out, (x, w, b), backward)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"conv2d: kernel {k} does not fit input {h}x{w} with pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return cols.reshape(n, c * k * k, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int, oh: int, ow: int):
    n, c, h, w = x_shape
    cols = cols.reshape(n, c, k, k, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[:, :, ki, kj]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution, NCHW input and OIKK kernel, square kernel/stride/pad.

    Output spatial dims are floor((H + 2*pad - K) / stride) + 1.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: need NCHW and OIKK, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: non-square kernel {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: channel mismatch, input C={x.shape[1]} kernel I={w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bias shape {b.shape} vs O={w.shape[0]}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d: stride={stride}, pad={pad}")

    n = x.shape[0]
    o, _, k, _ = w.shape
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(o, -1)
    # (N, C*K*K, OH*OW) -> (N, O, OH*OW)
    out_data = np.einsum("ncl,oc->nol", cols, wmat, optimize=True) + b.data[None, :, None]
    out = Tensor(np.ascontiguousarray(out_data.reshape(n, o, oh, ow)))

    def backward(g):
        gmat = g.reshape(n, o, oh * ow)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.einsum("nol,ncl->oc", gmat, cols, optimize=True)
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            gcols = np.einsum("nol,oc->ncl", gmat, wmat, optimize=True)
            x._accumulate(_col2im(gcols, x.shape, k, stride, pad, oh, ow))

    return _finalize(out, (x, w, b), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of an NCHW tensor."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest2x: need NCHW, got {x.shape}")
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))
    n, c, h, w = x.shape

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _finalize(out, (x,), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) normalization to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"group_norm: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ConfigError(f"group_norm: channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} vs C={c}")
    if eps <= 0:
        raise ContractError(f"group_norm: eps must be positive, got {eps}")

    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(n, c, h, w)
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, m)
            # standard normalization backward, per (sample, group)
            t1 = dxhat.sum(axis=2, keepdims=True)
            t2 = (dxhat * xhat_g).sum(axis=2, keepdims=True)
            dx = inv * (dxhat - t1 / m - xhat_g * t2 / m)
            x._accumulate(dx.reshape(n, c, h, w))

    return _finalize(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# backward pass and gradient checking

def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the recorded graph under ``root``."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from a scalar loss.

    Each recorded op's backward rule runs exactly once, in reverse topological
    order, after all downstream contributions have accumulated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients of f at x.

    The check runs in float64 regardless of x's dtype; closed-over float32
    constants are fine since they are identical between the two evaluations.
    """
    if not (0.0 < h < 1e-1):
        raise ContractError(f"grad_check: h must be in (0, 1e-1), got {h}")
    x64 = Tensor(np.asarray(x.data, dtype=np.float64).copy(), requires_grad=True)
    y = f(x64)
    if y.data.size != 1:
        raise ContractError("grad_check: f must be scalar-valued")
    backward(y)
    analytic = x64.grad.ravel().copy()

    flat = x64.data.ravel()
    fd = np.empty_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x64).item()
            flat[i] = orig - h
            fm = f(x64).item()
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))


# ---------------------------------------------------------------------------
# checkpoint format

CKPT_MAGIC = b"CKPT1"
CKPT_VERSION = 1


def save_checkpoint(params: Mapping[str, Tensor], path) -> None:
    """Write parameters in the CKPT1 binary layout (little-endian f32 payloads)."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(params)))
        for name, t in params.items():
            arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a CKPT1 file back into {name: float32 array}; strict on layout."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from None
    if blob[:5] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:5]!r}, expected {CKPT_MAGIC!r}")
    off = 5
    try:
        version, count = struct.unpack_from("<II", blob, off)
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint header: {exc}") from exc
    off += 8
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"truncated checkpoint record: {exc}") from exc
        payload = blob[off : off + nbytes]
        if len(payload) != nbytes:
            raise FormatError(
                f"truncated checkpoint payload for {name!r}: expected {nbytes} bytes, got {len(payload)}"
            )
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        off += nbytes
    return params
