"""Denoiser architecture contracts: shapes, conditioning paths, gradients."""

import numpy as np
import pytest

from pairvol import denoiser as dn
from pairvol import ndtensor as nd
from pairvol.errors import ConfigError, ContractError, DimensionError, FormatError
from pairvol.schedule import make_default_schedule

SCHED = make_default_schedule(100)


def tiny_cfg(depth=2):
    return dn.DenoiserConfig(
        base_width=8, depth=depth, d_model=8 * 2 ** (depth - 1),
        d_pos=4, c_f=4, d_text=8,
    )


def make_inputs(cfg, n=2, h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    packed = nd.Tensor(rng.standard_normal((n, cfg.in_channels, h, w)).astype(np.float32))
    pos = rng.standard_normal(2 * cfg.d_pos).astype(np.float32)
    flow = rng.standard_normal((n, 2, h, w)).astype(np.float32)
    text = rng.standard_normal((n, cfg.d_text)).astype(np.float32)
    return packed, pos, flow, text


def analytic_param_count(cfg):
    """Closed-form parameter count from the architecture definition."""
    widths = [cfg.base_width * 2**l for l in range(cfg.depth)]
    total = widths[0] * cfg.in_channels * 9 + widths[0]  # stem
    total += cfg.c_f * 2 * 9 + cfg.c_f  # flow conv1
    total += widths[0] * cfg.c_f * 9 + widths[0]  # flow conv2
    total += cfg.d_text * cfg.d_model + cfg.d_model  # text l1
    total += cfg.d_model * cfg.d_model + cfg.d_model  # text l2
    for l, width in enumerate(widths):
        if l > 0:
            total += width * widths[l - 1] * 9 + width  # down conv
        total += 3 * cfg.d_pos * width + width  # embedding projection
        total += width * width * 9 + width + 2 * width  # enc conv + gn
    for l in range(cfg.depth - 1):
        cat = widths[l + 1] + widths[l]
        total += widths[l] * cat * 9 + widths[l] + 2 * widths[l]  # dec conv + gn
    total += cfg.out_channels * widths[0] * 9 + cfg.out_channels  # head
    return total


class TestConfig:
    def test_default_valid(self):
        cfg = dn.DenoiserConfig()
        assert cfg.widths == (16, 32)
        assert cfg.in_channels == 4
        assert cfg.out_channels == 2

    def test_depth_bounds(self):
        with pytest.raises(ConfigError):
            dn.DenoiserConfig(depth=1)
        with pytest.raises(ConfigError):
            dn.DenoiserConfig(depth=4, d_model=128)

    def test_base_width_bounds(self):
        with pytest.raises(ConfigError):
            dn.DenoiserConfig(base_width=4, d_model=8)
        with pytest.raises(ConfigError):
            dn.DenoiserConfig(base_width=18, d_model=36)

    def test_d_model_must_match_bottleneck(self):
        with pytest.raises(ConfigError):
            dn.DenoiserConfig(base_width=16, depth=2, d_model=64)
        dn.DenoiserConfig(base_width=16, depth=3, d_model=64)  # valid


class TestShapes:
    @pytest.mark.parametrize("depth,h,w", [(2, 8, 8), (2, 16, 32), (3, 16, 16), (3, 32, 24)])
    def test_output_shape(self, depth, h, w):
        cfg = tiny_cfg(depth)
        wts = dn.init_weights(cfg, seed=0)
        packed, pos, flow, text = make_inputs(cfg, n=2, h=h, w=w)
        out = dn.forward(wts, cfg, packed, t=3, pos=pos, sched=SCHED, flow=flow, text=text)
        assert out.shape == (2, cfg.out_channels, h, w)

    def test_indivisible_dims_rejected(self):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=0)
        packed, pos, _, _ = make_inputs(cfg, h=10, w=8)
        with pytest.raises(ConfigError, match="divisible"):
            dn.forward(wts, cfg, packed, t=1, pos=pos, sched=SCHED)

    def test_wrong_channel_count_rejected(self):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=0)
        bad = nd.Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32))
        with pytest.raises(DimensionError):
            dn.forward(wts, cfg, bad, t=1, pos=np.zeros(2 * cfg.d_pos), sched=SCHED)

    def test_timestep_validation(self):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=0)
        packed, pos, _, _ = make_inputs(cfg)
        with pytest.raises(ContractError):
            dn.forward(wts, cfg, packed, t=0, pos=pos, sched=SCHED)
        with pytest.raises(ContractError):
            dn.forward(wts, cfg, packed, t=SCHED.T + 1, pos=pos, sched=SCHED)

    def test_scalar_t_equals_per_sample_t(self):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=0)
        packed, pos, flow, text = make_inputs(cfg)
        a = dn.forward(wts, cfg, packed, t=5, pos=pos, sched=SCHED, flow=flow, text=text)
        b = dn.forward(wts, cfg, packed, t=[5, 5], pos=pos, sched=SCHED, flow=flow, text=text)
        assert np.array_equal(a.data, b.data)


class TestInit:
    def test_seed_deterministic(self):
        cfg = tiny_cfg(2)
        w1, w2 = dn.init_weights(cfg, seed=7), dn.init_weights(cfg, seed=7)
        for name in w1.names():
            assert np.array_equal(w1[name].data, w2[name].data)
        w3 = dn.init_weights(cfg, seed=8)
        assert any(not np.array_equal(w1[n].data, w3[n].data) for n in w1.names())

    @pytest.mark.parametrize("depth", [2, 3])
    def test_param_count_matches_analytic_oracle(self, depth):
        cfg = tiny_cfg(depth)
        assert dn.count_params(dn.init_weights(cfg, seed=0)) == analytic_param_count(cfg)

    def test_default_config_count(self):
        cfg = dn.DenoiserConfig()
        assert dn.count_params(dn.init_weights(cfg, seed=0)) == analytic_param_count(cfg)

    def test_count_params_conventions(self):
        assert dn.count_params({}) == 0
        conv = {
            "w": nd.Tensor(np.zeros((8, 1, 3, 3), dtype=np.float32)),
            "b": nd.Tensor(np.zeros(8, dtype=np.float32)),
        }
        assert dn.count_params(conv) == 80

    def test_initial_output_bounded(self):
        cfg = dn.DenoiserConfig()
        wts = dn.init_weights(cfg, seed=0)
        rng = np.random.default_rng(0)
        packed = nd.Tensor(rng.standard_normal((2, 4, 16, 16)).astype(np.float32))
        pos = rng.standard_normal(2 * cfg.d_pos).astype(np.float32)
        out = dn.forward(wts, cfg, packed, t=50, pos=pos, sched=SCHED)
        assert np.all(np.isfinite(out.data))
        assert np.abs(out.data).max() <= 10.0

    def test_nonfinite_weights_rejected(self):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=0)
        bad = dict(wts.params)
        arr = bad["stem.w"].data.copy()
        arr[0, 0, 0, 0] = np.nan
        bad["stem.w"] = nd.Tensor(arr)
        with pytest.raises(ContractError):
            dn.DenoiserWeights(bad)


class TestConditioning:
    def test_dropout_branch_equals_zero_adapters(self):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=3)
        packed, pos, flow, text = make_inputs(cfg, seed=4)
        dropped = dn.forward(wts, cfg, packed, t=4, pos=pos, sched=SCHED, flow=None, text=None)

        zeroed = {
            name: nd.Tensor(
                np.zeros_like(p.data) if name.startswith(("flow.", "text.")) else p.data.copy(),
                requires_grad=True,
            )
            for name, p in wts.items()
        }
        full = dn.forward(
            dn.DenoiserWeights(zeroed), cfg, packed, t=4, pos=pos, sched=SCHED, flow=flow, text=text
        )
        assert np.allclose(dropped.data, full.data, atol=1e-6)

    def test_cond_j_sensitivity(self):
        # the network must actually consume the second conditioning channel
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=5)
        packed, pos, flow, text = make_inputs(cfg, seed=6)
        base = dn.forward(wts, cfg, packed, t=4, pos=pos, sched=SCHED, flow=flow, text=text)
        bumped = packed.data.copy()
        bumped[:, 3] += 0.5
        out = dn.forward(wts, cfg, nd.Tensor(bumped), t=4, pos=pos, sched=SCHED, flow=flow, text=text)
        assert np.abs(out.data - base.data).max() > 1e-4

    def test_timestep_sensitivity(self):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=5)
        packed, pos, flow, text = make_inputs(cfg, seed=6)
        a = dn.forward(wts, cfg, packed, t=1, pos=pos, sched=SCHED, flow=flow, text=text)
        b = dn.forward(wts, cfg, packed, t=SCHED.T, pos=pos, sched=SCHED, flow=flow, text=text)
        assert np.abs(a.data - b.data).max() > 1e-4

    def test_every_parameter_gets_gradient(self):
        cfg = tiny_cfg(3)
        wts = dn.init_weights(cfg, seed=9)
        packed, pos, flow, text = make_inputs(cfg, n=2, h=8, w=8, seed=10)
        out = dn.forward(wts, cfg, packed, t=[2, 9], pos=pos, sched=SCHED, flow=flow, text=text)
        target = nd.Tensor(np.random.default_rng(11).standard_normal(out.shape).astype(np.float32))
        nd.backward(nd.mse(out, target))
        dead = [n for n, p in wts.items() if p.grad is None or not np.any(p.grad)]
        assert dead == []


class TestGradients:
    def _loss_fn(self, cfg, wts, packed, pos, flow, text, target):
        out = dn.forward(wts, cfg, packed, t=7, pos=pos, sched=SCHED, flow=flow, text=text)
        return nd.mse(out, nd.Tensor(target))

    def test_full_loss_grad_check(self):
        # float64 weights keep the finite-difference probe clean
        cfg = tiny_cfg(2)
        wts32 = dn.init_weights(cfg, seed=12)
        params = {
            n: nd.Tensor(p.data.astype(np.float64), requires_grad=True, name=n)
            for n, p in wts32.items()
        }
        wts = dn.DenoiserWeights(params)
        rng = np.random.default_rng(13)
        packed = nd.Tensor(rng.standard_normal((1, 4, 8, 8)))
        pos = rng.standard_normal(2 * cfg.d_pos)
        flow = rng.standard_normal((1, 2, 8, 8))
        text = rng.standard_normal((1, cfg.d_text))
        target = rng.standard_normal((1, 2, 8, 8))

        err = nd.grad_check(
            lambda x: self._loss_fn(cfg, wts, x, pos, flow, text, target), packed
        )
        assert err <= 1e-3, f"input grad err {err}"

        for name in ("stem.b", "emb0.w", "enc0.gn.g", "enc1.gn.b", "head.b",
                     "flow.c1.w", "text.l1.w", "dec0.gn.g"):
            orig = wts[name]

            def f(p, name=name):
                trial = dict(wts.params)
                trial[name] = p
                return self._loss_fn(cfg, dn.DenoiserWeights(trial), packed, pos, flow, text, target)

            err = nd.grad_check(f, nd.Tensor(orig.data.copy(), requires_grad=True))
            assert err <= 1e-3, f"{name} grad err {err}"


class TestCheckpointRoundtrip:
    def test_roundtrip(self, tmp_path):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=1)
        p = tmp_path / "w.ckpt"
        dn.save_weights(p, wts)
        back = dn.load_weights(p, cfg)
        assert back.names() == wts.names()
        for name in wts.names():
            assert np.array_equal(back[name].data, wts[name].data)

    def test_wrong_config_shape_rejected(self, tmp_path):
        cfg = tiny_cfg(2)
        p = tmp_path / "w.ckpt"
        dn.save_weights(p, dn.init_weights(cfg, seed=1))
        bigger = dn.DenoiserConfig(base_width=16, depth=2, d_model=32, d_pos=4, c_f=4, d_text=8)
        with pytest.raises(FormatError):
            dn.load_weights(p, bigger)

    def test_missing_parameter_rejected(self, tmp_path):
        cfg = tiny_cfg(2)
        wts = dn.init_weights(cfg, seed=1)
        partial = {n: p for n, p in wts.items() if n != "head.b"}
        p = tmp_path / "w.ckpt"
        nd.save_checkpoint(partial, p)
        with pytest.raises(FormatError, match="head.b"):
            dn.load_weights(p, cfg)
