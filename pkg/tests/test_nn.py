"""Layer-level contracts: attention math, timestep features, denoiser shapes."""

import numpy as np
import pytest

from shapegen import nn
from shapegen import tensor as T
from shapegen.tensor import GradientTape, Tensor, backward

from helpers import gradcheck


def rng_for(seed=0):
    return np.random.default_rng(seed)


class TestAttention:
    def test_single_position_returns_value(self):
        rng = rng_for(1)
        q = Tensor(rng.standard_normal((1, 2, 1, 4)).astype(np.float32))
        k = Tensor(rng.standard_normal((1, 2, 1, 4)).astype(np.float32))
        v = Tensor(rng.standard_normal((1, 2, 1, 4)).astype(np.float32))
        out = nn.attention(q, k, v)
        np.testing.assert_allclose(out.data, v.data, rtol=1e-6)

    def test_causal_first_position_sees_only_itself(self):
        rng = rng_for(2)
        q = Tensor(rng.standard_normal((1, 1, 3, 4)).astype(np.float32))
        k = Tensor(rng.standard_normal((1, 1, 3, 4)).astype(np.float32))
        v = Tensor(rng.standard_normal((1, 1, 3, 4)).astype(np.float32))
        out = nn.attention(q, k, v, causal=True)
        np.testing.assert_allclose(out.data[0, 0, 0], v.data[0, 0, 0], rtol=1e-5)

    def test_uniform_queries_average_values(self):
        # hand-computed 3-token case: constant q,k makes every weight 1/3
        v_rows = np.array([[3.0, 0.0], [0.0, 6.0], [3.0, 3.0]], np.float32)
        q = Tensor(np.ones((1, 1, 3, 2), np.float32))
        k = Tensor(np.ones((1, 1, 3, 2), np.float32))
        v = Tensor(v_rows[None, None])
        out = nn.attention(q, k, v)
        np.testing.assert_allclose(out.data[0, 0], np.tile(v_rows.mean(0), (3, 1)),
                                   rtol=1e-6)
        causal = nn.attention(q, k, v, causal=True).data[0, 0]
        np.testing.assert_allclose(causal[1], v_rows[:2].mean(0), rtol=1e-6)

    def test_causal_invariance_to_future_positions(self):
        rng = rng_for(3)
        cfg = nn.TransformerConfig(width=16, heads=4, depth=2, context_length=6)
        enc = nn.TextEncoder(9, cfg, rng)
        ids = np.array([[1, 2, 3, 4, 5, 6]])
        out1 = enc(ids).data
        ids2 = ids.copy()
        ids2[0, 4:] = [7, 8]
        out2 = enc(ids2).data
        np.testing.assert_allclose(out1[0, :4], out2[0, :4], atol=1e-6)
        assert np.abs(out1[0, 4:] - out2[0, 4:]).max() > 1e-4

    def test_attention_gradcheck(self):
        rng = rng_for(4)
        shapes = [(1, 2, 3, 4)] * 3
        arrays = [rng.uniform(-1, 1, s).astype(np.float32) for s in shapes]

        def build(ps):
            out = nn.attention(ps[0], ps[1], ps[2], causal=True)
            r = Tensor(np.linspace(-1, 1, out.size, dtype=np.float32).reshape(out.shape))
            return T.sum_(T.mul(out, r))

        gradcheck(build, arrays)


class TestTimestepEmbed:
    def test_zero_timestep(self):
        e = nn.timestep_embed(0, 8).data
        np.testing.assert_array_equal(e[:4], 0.0)
        np.testing.assert_array_equal(e[4:], 1.0)

    def test_deterministic(self):
        a = nn.timestep_embed(17, 32).data
        b = nn.timestep_embed(17, 32).data
        assert np.array_equal(a, b)

    def test_distinct_timesteps_distinct_vectors(self):
        a = nn.timestep_embed(1, 32).data
        b = nn.timestep_embed(2, 32).data
        assert np.linalg.norm(a - b) > 0

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            nn.timestep_embed(3, 7)

    def test_batched(self):
        e = nn.timestep_embed(np.array([0, 5]), 16)
        assert e.shape == (2, 16)


def test_layer_norm_mean_zero_var_one():
    rng = rng_for(5)
    x = Tensor(rng.uniform(-3, 3, (4, 6, 16)).astype(np.float32))
    y = T.layer_norm(x).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-4)


class TestDenoiser:
    def cfg(self, attn):
        return nn.DenoiserConfig(base_channels=8, channel_multipliers=[1, 2],
                                 resblocks_per_stage=1,
                                 attention_resolutions=attn, cond_width=12)

    def test_output_shape_matches_input(self):
        rng = rng_for(6)
        net = nn.build_denoiser(self.cfg([8]), 16, 3, 3, 24, rng)
        x = Tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
        temb = Tensor(rng.standard_normal((2, 24)).astype(np.float32))
        ctx = Tensor(rng.standard_normal((2, 5, 12)).astype(np.float32))
        out = net(x, temb, ctx)
        assert out.shape == x.shape

    def test_conv_only_runs_at_double_resolution(self):
        rng = rng_for(7)
        net = nn.build_denoiser(self.cfg([]), 16, 3, 3, 24, rng)
        assert not net.has_attention()
        x = Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32))
        temb = Tensor(rng.standard_normal((1, 24)).astype(np.float32))
        out = net(x, temb, None)
        assert out.shape == (1, 3, 32, 32)

    def test_conditioning_tokens_change_output(self):
        rng = rng_for(8)
        net = nn.build_denoiser(self.cfg([16, 8]), 16, 3, 3, 24, rng)
        # zero-init closing convs make a fresh net output zero; nudge them
        for name, p in net.named_parameters():
            if p.data.std() == 0 and p.data.ndim == 4:
                p.data[...] = rng.uniform(-0.05, 0.05, p.data.shape).astype(np.float32)
        x = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32))
        temb = Tensor(rng.standard_normal((1, 24)).astype(np.float32))
        ctx0 = Tensor(np.zeros((1, 4, 12), np.float32))
        ctx1 = Tensor(rng.standard_normal((1, 4, 12)).astype(np.float32))
        a = net(x, temb, ctx0).data
        b = net(x, temb, ctx1).data
        assert np.abs(a - b).max() > 1e-6

    def test_fresh_denoiser_trains(self):
        # zero-init closing convs gate the first step; by the second step
        # gradients must reach most of the network
        from shapegen.optim import adamw_init, adamw_step

        rng = rng_for(9)
        net = nn.build_denoiser(self.cfg([8]), 16, 3, 3, 24, rng)
        params = net.parameters()
        opt = adamw_init(params, lr=1e-3)
        x = Tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
        temb = Tensor(rng.standard_normal((2, 24)).astype(np.float32))
        target = Tensor(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
        losses = []
        for _ in range(6):
            with GradientTape() as tape:
                loss = T.mse(net(x, temb, None), target)
            grads = T.grads_for(tape, loss, params)
            adamw_step(opt, params, grads)
            losses.append(loss.item())
        touched = sum(float(np.abs(g.data).max()) > 0 for g in grads)
        assert touched > len(params) * 0.8
        assert losses[-1] < losses[0]


def test_upsample_nearest2x():
    x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
    y = nn.upsample_nearest2x(x).data
    expect = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]],
                      np.float32)
    np.testing.assert_array_equal(y[0, 0], expect)


def test_parameter_names_are_stable():
    rng = rng_for(10)
    a = nn.TransformerBlock(8, 2, rng)
    b = nn.TransformerBlock(8, 2, rng_for(10))
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
    state = a.state()
    b.load_state(state)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.data, pb.data)
