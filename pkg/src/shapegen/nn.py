"""Reusable layers: linear/conv stacks, attention, transformer blocks, and a
small U-shaped denoiser that maps (noisy image, timestep vector, context
tokens) to predicted noise.

All parameters are fan-in-scaled uniform except biases and the closing
projections of denoiser blocks, which start at zero so a fresh denoiser is
the identity on its skip paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class TransformerConfig:
    width: int
    depth: int
    heads: int
    context_length: int
    causal: bool = True

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


@dataclass
class DenoiserConfig:
    base_channels: int
    channel_multipliers: list[int]
    resblocks_per_stage: int
    attention_resolutions: list[int] = field(default_factory=list)
    cond_width: int = 64

    def __post_init__(self):
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must be nonempty")
        if self.resblocks_per_stage < 1:
            raise ValueError("resblocks_per_stage must be >= 1")


class Module:
    """Parameter container; registration order fixes the parameter order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, p in self._params.items():
            out.append((prefix + name, p))
        for name, child in self._children.items():
            out.extend(child.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {list(arr.shape)} != {list(p.data.shape)}"
                )
            p.data[...] = arr

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        self._children[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((n_in, n_out), np.float32)
        else:
            w = _uniform(rng, (n_in, n_out), 1.0 / math.sqrt(n_in))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return T.add(y, self.b) if self.b is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, bias: bool = True,
                 zero_init: bool = False):
        super().__init__()
        self.stride, self.pad = stride, pad
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), np.float32)
        else:
            w = _uniform(rng, (c_out, c_in, k, k), 1.0 / math.sqrt(c_in * k * k))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros((c_out, 1, 1), np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.w, stride=self.stride, pad=self.pad)
        return T.add(y, self.b) if self.b is not None else y


class LayerNorm(Module):
    """Affine layer norm over the last axis."""

    def __init__(self, dim: int):
        super().__init__()
        self.g = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x), self.g), self.b)


class ChannelNorm(Module):
    """Layer norm over the channel axis of NCHW feature maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = LayerNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        t = T.transpose(x, (0, 2, 3, 1))
        return T.transpose(self.norm(t), (0, 3, 1, 2))


def timestep_embed(t, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal features for integer timesteps; first half sin, second cos.

    Accepts a scalar or a 1-d array of timesteps; returns (dim,) or (B, dim).
    """
    if dim % 2 != 0:
        raise ValueError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = ts[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        emb = emb[0]
    return Tensor(emb)


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """softmax(QK^T / sqrt(d)) V over (B, H, T, d) head tensors."""
    if q.shape[-1] != k.shape[-1] or k.shape[:-2] != v.shape[:-2] or k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(
            f"attention: incompatible shapes q={list(q.shape)} k={list(k.shape)} v={list(v.shape)}"
        )
    d = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), Tensor(1.0 / math.sqrt(d)))
    if causal:
        tq, tk = q.shape[-2], k.shape[-2]
        if tq != tk:
            raise T.ShapeError(f"attention: causal mask needs square scores, got {tq}x{tk}")
        mask = np.triu(np.full((tq, tk), -1e9, np.float32), k=1)
        scores = T.add(scores, Tensor(mask[None, None]))
    return T.matmul(T.softmax(scores, axis=-1), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * d))


class MultiHeadAttention(Module):
    """Self-attention; optional extra context tokens are concatenated into the
    key/value sequence (so queries can read both the sequence and the context)."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 causal: bool = False):
        super().__init__()
        self.heads, self.causal = heads, causal
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.out = Linear(width, width, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        src = T.concat([x, context], axis=1) if context is not None else x
        if context is not None and self.causal:
            raise T.ShapeError("attention: causal masking with context tokens is unsupported")
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(src), self.heads)
        v = _split_heads(self.v(src), self.heads)
        return self.out(_merge_heads(attention(q, k, v, causal=self.causal)))


class TransformerBlock(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator,
                 causal: bool = False):
        super().__init__()
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, rng, causal=causal)
        self.ln2 = LayerNorm(width)
        self.fc1 = Linear(width, 4 * width, rng)
        self.fc2 = Linear(4 * width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.fc2(T.gelu(self.fc1(self.ln2(x)))))


class TransformerStack(Module):
    """Pre-norm transformer blocks plus a closing layer norm."""

    def __init__(self, width: int, depth: int, heads: int,
                 rng: np.random.Generator, causal: bool = False):
        super().__init__()
        self.blocks = ModuleList(
            TransformerBlock(width, heads, rng, causal=causal) for _ in range(depth)
        )
        self.ln = LayerNorm(width)

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.ln(x)


class TextEncoder(Module):
    """Token + learned positional embeddings feeding a transformer stack."""

    def __init__(self, vocab_size: int, cfg: TransformerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.tok = Tensor(_uniform(rng, (vocab_size, cfg.width), 0.02), requires_grad=True)
        self.pos = Tensor(_uniform(rng, (cfg.context_length, cfg.width), 0.02),
                          requires_grad=True)
        self.stack = TransformerStack(cfg.width, cfg.depth, cfg.heads, rng,
                                      causal=cfg.causal)

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.atleast_2d(ids)
        if ids.shape[1] > self.cfg.context_length:
            raise T.ShapeError(
                f"text length {ids.shape[1]} exceeds context {self.cfg.context_length}"
            )
        pos = T.slice_(self.pos, (slice(0, ids.shape[1]), slice(0, self.cfg.width)))
        x = T.add(T.embedding(self.tok, ids), pos)
        return self.stack(x)


def upsample_nearest2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    r = T.reshape(x, (b, c, h, 1, w, 1))
    r = T.concat([r, r], axis=3)
    r = T.concat([r, r], axis=5)
    return T.reshape(r, (b, c, 2 * h, 2 * w))


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = ChannelNorm(c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, pad=1)
        self.temb = Linear(temb_dim, c_out, rng)
        self.norm2 = ChannelNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, pad=1, zero_init=True)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.gelu(self.norm1(x)))
        tproj = self.temb(T.gelu(temb))
        h = T.add(h, T.reshape(tproj, (tproj.shape[0], tproj.shape[1], 1, 1)))
        h = self.conv2(T.gelu(self.norm2(h)))
        skip = self.skip(x) if self.skip is not None else x
        return T.add(h, skip)


class SpatialAttention(Module):
    """Attention over flattened feature-map positions, optionally reading
    projected conditioning tokens through the concatenated key/value path."""

    def __init__(self, channels: int, cond_width: int | None, rng: np.random.Generator):
        super().__init__()
        heads = max(1, channels // 16)
        self.norm = ChannelNorm(channels)
        self.attn = MultiHeadAttention(channels, heads, rng)
        self.ctx_proj = (
            Linear(cond_width, channels, rng) if cond_width is not None else None
        )

    def __call__(self, x: Tensor, context: Tensor | None) -> Tensor:
        b, c, h, w = x.shape
        tokens = T.reshape(T.transpose(self.norm(x), (0, 2, 3, 1)), (b, h * w, c))
        ctx = None
        if context is not None and self.ctx_proj is not None:
            ctx = self.ctx_proj(context)
        out = self.attn(tokens, context=ctx)
        out = T.transpose(T.reshape(out, (b, h, w, c)), (0, 3, 1, 2))
        return T.add(x, out)


class UNet(Module):
    """Conditioned denoiser. forward(x, temb, context) -> tensor shaped like x.

    Attention lives only at stages whose build-time feature size is listed in
    cfg.attention_resolutions; with an empty list the net is purely
    convolutional and runs at any input size whose side is divisible by
    2**(len(channel_multipliers) - 1).
    """

    def __init__(self, cfg: DenoiserConfig, image_size: int, in_channels: int,
                 out_channels: int, temb_dim: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        levels = len(cfg.channel_multipliers)
        attn_sizes = set(cfg.attention_resolutions)
        size = image_size
        base = cfg.base_channels

        self.in_conv = Conv2d(in_channels, base, 3, rng, pad=1)
        self.down_blocks = ModuleList()
        self.down_attns = ModuleList()
        self.downsamples = ModuleList()
        skip_channels = [base]
        ch = base
        plan = []
        for level, mult in enumerate(cfg.channel_multipliers):
            out_ch = base * mult
            for _ in range(cfg.resblocks_per_stage):
                self.down_blocks.append(ResBlock(ch, out_ch, temb_dim, rng))
                ch = out_ch
                use_attn = size in attn_sizes
                self.down_attns.append(
                    SpatialAttention(ch, cfg.cond_width, rng) if use_attn else Module()
                )
                plan.append(use_attn)
                skip_channels.append(ch)
            if level < levels - 1:
                self.downsamples.append(Conv2d(ch, ch, 3, rng, stride=2, pad=1))
                skip_channels.append(ch)
                size //= 2
        self._down_attn_plan = plan

        self.mid1 = ResBlock(ch, ch, temb_dim, rng)
        self.mid_attn = SpatialAttention(ch, cfg.cond_width, rng) if attn_sizes else None
        self.mid2 = ResBlock(ch, ch, temb_dim, rng)

        self.up_blocks = ModuleList()
        self.up_attns = ModuleList()
        self.upsamples = ModuleList()
        up_plan = []
        for level in reversed(range(levels)):
            out_ch = base * cfg.channel_multipliers[level]
            for _ in range(cfg.resblocks_per_stage + 1):
                self.up_blocks.append(
                    ResBlock(ch + skip_channels.pop(), out_ch, temb_dim, rng)
                )
                ch = out_ch
                use_attn = size in attn_sizes
                self.up_attns.append(
                    SpatialAttention(ch, cfg.cond_width, rng) if use_attn else Module()
                )
                up_plan.append(use_attn)
            if level > 0:
                self.upsamples.append(Conv2d(ch, ch, 3, rng, pad=1))
                size *= 2
        self._up_attn_plan = up_plan
        assert not skip_channels

        self.out_norm = ChannelNorm(ch)
        self.out_conv = Conv2d(ch, out_channels, 3, rng, pad=1, zero_init=True)

    def __call__(self, x: Tensor, temb: Tensor, context: Tensor | None = None) -> Tensor:
        cfg = self.cfg
        levels = len(cfg.channel_multipliers)
        h = self.in_conv(x)
        skips = [h]
        bi = 0
        di = 0
        for level in range(levels):
            for _ in range(cfg.resblocks_per_stage):
                h = self.down_blocks[bi](h, temb)
                if self._down_attn_plan[bi]:
                    h = self.down_attns[bi](h, context)
                bi += 1
                skips.append(h)
            if level < levels - 1:
                h = self.downsamples[di](h)
                di += 1
                skips.append(h)

        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, context)
        h = self.mid2(h, temb)

        bi = 0
        ui = 0
        for level in reversed(range(levels)):
            for _ in range(cfg.resblocks_per_stage + 1):
                h = self.up_blocks[bi](T.concat([h, skips.pop()], axis=1), temb)
                if self._up_attn_plan[bi]:
                    h = self.up_attns[bi](h, context)
                bi += 1
            if level > 0:
                h = self.upsamples[ui](upsample_nearest2x(h))
                ui += 1
        assert not skips
        return self.out_conv(T.gelu(self.out_norm(h)))

    def has_attention(self) -> bool:
        return any(self._down_attn_plan) or any(self._up_attn_plan) or (
            self.mid_attn is not None
        )


def build_denoiser(cfg: DenoiserConfig, image_size: int, in_channels: int,
                   out_channels: int, temb_dim: int, rng: np.random.Generator) -> UNet:
    return UNet(cfg, image_size, in_channels, out_channels, temb_dim, rng)
