"""Training loop: AdamW, warmup + cosine learning rate, pair batching.

The dataset is a list of (Volume, MaskVolume, report) triples. All frame
pairs are enumerated and packed once up front; each epoch visits every pair
exactly once in a seed-derived order. Two batch-assembly knobs shape the
conditioning distribution:

  - guidance_p: per-frame probability that a conditioning channel uses a
    guidance map built from the true frame instead of the plain normalized
    mask. The coin is tossed separately for the two frames of a pair, so
    mixed pairs (guidance on one side, mask on the other) appear too.
    Inference conditions on guidance maps built from generated frames, and
    its provisional pass pairs a guidance map with a raw mask, so the
    network has to have seen those input families during training.
  - dropout_p: probability a sample's conditioning is removed entirely
    (mask channels, flow, and text all zeroed), which keeps an
    unconditional mode available.

Per-epoch randomness derives from seed and epoch number alone, so a run
resumed at an epoch boundary consumes the same batches the uninterrupted
run would have.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from .conditioning import guidance_map, text_embed
from .denoiser import DenoiserConfig, DenoiserWeights, _param_shapes, forward, init_weights
from .errors import ConfigError, ContractError, FormatError, NumericalError
from .pairing import enumerate_pairs, pack_pair
from .schedule import Schedule

GRAD_CLIP_NORM = 1.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    warmup_steps: int = 200
    weight_decay: float = 1e-4
    skip_set: tuple[int, ...] = (1, 2, 4)
    dropout_p: float = 0.1
    guidance_p: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.lr_min > self.lr_init:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_init {self.lr_init}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        for name in ("dropout_p", "guidance_p"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer(w: DenoiserWeights) -> OptimizerState:
    return OptimizerState(
        m={n: np.zeros_like(p.data) for n, p in w.items()},
        v={n: np.zeros_like(p.data) for n, p in w.items()},
        step=0,
    )


def adamw_step(
    w: DenoiserWeights,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
    wd: float = 0.0,
) -> tuple[DenoiserWeights, OptimizerState]:
    """One decoupled-weight-decay Adam update, in place on w's arrays."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in w.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for parameter {name}")
        if wd != 0.0:
            p.data *= 1.0 - lr * wd
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return w, state


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to lr_init, then cosine decay to lr_min at total_steps."""
    if step < 0 or step > total_steps:
        raise ContractError(f"step {step} outside 0..{total_steps}")
    if step < cfg.warmup_steps:
        return cfg.lr_init * step / cfg.warmup_steps
    span = total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr_init if step < total_steps else cfg.lr_min
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + np.cos(np.pi * frac))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class TrainResult:
    weights: DenoiserWeights
    history: list[tuple[int, float, float]]  # (step, lr, loss)
    state: OptimizerState


def _prepare_pairs(dataset, cfg: TrainConfig, dcfg: DenoiserConfig):
    """Pack every enumerated pair once; precompute both conditioning variants."""
    samples = []
    for vol, msk, report in dataset:
        pairs = enumerate_pairs(vol.depth, cfg.skip_set)
        text = text_embed(report, d_text=dcfg.d_text)
        for idx in pairs:
            s = pack_pair(vol.voxels, msk.labels, idx, report, n_classes=msk.n_classes,
                          d_pos=dcfg.d_pos, d_text=dcfg.d_text)
            guid = np.stack([
                guidance_map(vol.voxels[idx.i], msk.labels[idx.i], msk.n_classes),
                guidance_map(vol.voxels[idx.j], msk.labels[idx.j], msk.n_classes),
            ]).astype(np.float32)
            samples.append({
                "frames": s.frames,
                "cond_mask": s.cond_maps,
                "cond_guid": guid,
                "flow": np.stack([s.flow.u, s.flow.v]).astype(np.float32),
                "text": text.astype(np.float32),
                "pos": s.pos.astype(np.float32),
            })
    if not samples:
        raise ContractError("dataset produced no frame pairs")
    return samples


def _assemble_batch(samples, ids, rng, cfg: TrainConfig, sched: Schedule):
    """Noise the frames and build packed inputs for one batch."""
    n = len(ids)
    frames = np.stack([samples[i]["frames"] for i in ids])  # (n,2,h,w)
    use_guid = rng.random((n, 2)) < cfg.guidance_p
    cond = np.stack([
        np.where(g[:, None, None], samples[i]["cond_guid"], samples[i]["cond_mask"])
        for i, g in zip(ids, use_guid)
    ])
    flow = np.stack([samples[i]["flow"] for i in ids])
    text = np.stack([samples[i]["text"] for i in ids])
    pos = np.stack([samples[i]["pos"] for i in ids])

    drop = rng.random(n) < cfg.dropout_p
    cond[drop] = 0.0
    flow[drop] = 0.0
    text[drop] = 0.0

    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(frames.shape).astype(np.float32)
    ab = sched.alpha_bar[t].astype(np.float32)[:, None, None, None]
    x_t = np.sqrt(ab) * frames + np.sqrt(1.0 - ab) * eps

    packed = np.concatenate([x_t, cond], axis=1).astype(np.float32)
    return packed, t, pos, flow, text, eps


def train_step(w, dcfg, sched, packed, t, pos, flow, text, eps) -> tuple[float, dict]:
    """Forward, loss, backward; returns (loss value, gradient dict)."""
    out = forward(w, dcfg, nd.Tensor(packed), t, pos, sched, flow=flow, text=text)
    loss = nd.mse(out, nd.Tensor(eps))
    nd.backward(loss)
    grads = {}
    for name, p in w.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return float(loss.data), grads


def save_train_checkpoint(path, w: DenoiserWeights, state: OptimizerState, epoch: int) -> None:
    """One CKPT1 file holding parameters, Adam moments, and progress counters."""
    entries = {name: p for name, p in w.items()}
    for name in w.names():
        entries[f"adam.m.{name}"] = nd.Tensor(state.m[name])
        entries[f"adam.v.{name}"] = nd.Tensor(state.v[name])
    entries["meta.step"] = nd.Tensor(np.array([state.step], dtype=np.float32))
    entries["meta.epoch"] = nd.Tensor(np.array([epoch], dtype=np.float32))
    nd.save_checkpoint(entries, path)


def load_train_checkpoint(path, dcfg: DenoiserConfig):
    """Restore (weights, optimizer state, last completed epoch)."""
    arrays = nd.load_checkpoint(path)
    expected = _param_shapes(dcfg)
    params, m, v = {}, {}, {}
    for name, shape in expected.items():
        if name not in arrays:
            raise FormatError(f"{path}: missing parameter {name}")
        if tuple(arrays[name].shape) != shape:
            raise FormatError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
        params[name] = nd.Tensor(arrays[name], requires_grad=True, name=name)
        for prefix, store in (("adam.m.", m), ("adam.v.", v)):
            key = prefix + name
            if key not in arrays:
                raise FormatError(f"{path}: missing optimizer entry {key}")
            store[name] = arrays[key]
    if "meta.step" not in arrays or "meta.epoch" not in arrays:
        raise FormatError(f"{path}: missing progress counters")
    state = OptimizerState(m=m, v=v, step=int(arrays["meta.step"][0]))
    epoch = int(arrays["meta.epoch"][0])
    return DenoiserWeights(params), state, epoch


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in history:
            writer.writerow([step, f"{lr:.10g}", f"{loss:.10g}"])


def train(
    dataset,
    cfg: TrainConfig,
    dcfg: DenoiserConfig,
    sched: Schedule,
    weights: DenoiserWeights | None = None,
    out_dir=None,
    resume_path=None,
) -> TrainResult:
    """Run the optimization loop over all enumerated pairs.

    ``resume_path`` restarts from a training checkpoint at the epoch
    boundary it recorded; step numbering and the per-epoch batch order
    continue exactly as in an uninterrupted run.
    """
    if not dataset:
        raise ContractError("dataset is empty")

    samples = _prepare_pairs(dataset, cfg, dcfg)
    steps_per_epoch = (len(samples) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch

    start_epoch = 0
    if resume_path is not None:
        w, state, last_epoch = load_train_checkpoint(resume_path, dcfg)
        start_epoch = last_epoch + 1
    else:
        w = weights if weights is not None else init_weights(dcfg, cfg.seed)
        state = init_optimizer(w)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[tuple[int, float, float]] = []
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = rng.permutation(len(samples))
        for b in range(steps_per_epoch):
            ids = order[b * cfg.batch_size : (b + 1) * cfg.batch_size].tolist()
            packed, t, pos, flow, text, eps = _assemble_batch(samples, ids, rng, cfg, sched)
            loss, grads = train_step(w, dcfg, sched, packed, t, pos, flow, text, eps)
            lr = float(lr_at(state.step, cfg, total_steps))
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at step {state.step}, lr {lr:.3e}, batch pair ids {ids}"
                )
            clip_grad_norm(grads)
            adamw_step(w, grads, state, lr, wd=cfg.weight_decay)
            history.append((state.step, lr, loss))
            if out is not None and cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
                save_train_checkpoint(out / f"ckpt_step{state.step}.ckpt", w, state, epoch)
        if out is not None:
            save_train_checkpoint(out / "latest.ckpt", w, state, epoch)

    if out is not None:
        save_train_checkpoint(out / "final.ckpt", w, state, cfg.epochs - 1)
        write_history_csv(out / "history.csv", history)
    return TrainResult(weights=w, history=history, state=state)
