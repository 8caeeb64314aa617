"""Image decoder: a diffusion denoiser conditioned on the contrastive image
embedding (projected into the timestep vector and into four extra context
tokens appended after the encoded caption), trained with conditioning dropout
so classifier-free guidance works at sampling time. Also the convolution-only
upsampler stage conditioned on a blurred low-res channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from . import diffusion as df
from . import nn
from . import tensor as T
from .clip import ClipModel, embed_image
from .nn import DenoiserConfig, Linear, Module, TextEncoder, TransformerConfig, UNet
from .optim import adamw_init, adamw_step, ema_init, ema_update
from .tensor import GradientTape, Tensor

EMBED_TOKENS = 4


@dataclass
class DecoderConfig:
    image_size: int = ds.LO_RES
    base_channels: int = 32
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2])
    resblocks_per_stage: int = 1
    attention_resolutions: list[int] = field(default_factory=lambda: [8])
    cond_width: int = 64
    time_width: int = 128
    text_depth: int = 2
    text_heads: int = 4
    embed_dim: int = 32
    embed_plane_channels: int = 8
    embed_drop: float = 0.1
    caption_drop: float = 0.5
    schedule: str = "cosine"
    diffusion_steps: int = 100

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(
            base_channels=self.base_channels,
            channel_multipliers=list(self.channel_multipliers),
            resblocks_per_stage=self.resblocks_per_stage,
            attention_resolutions=list(self.attention_resolutions),
            cond_width=self.cond_width,
        )


class DecoderModel(Module):
    """Denoiser with three embedding routes: added to the timestep vector,
    appended as four context tokens after the encoded caption, and broadcast
    as extra input channels (the spatial route is what makes conditioning
    bite at desk scale; the attention routes alone learn too slowly here)."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(cfg.denoiser(), cfg.image_size,
                         3 + cfg.embed_plane_channels, 3, cfg.time_width, rng)
        self.time_fc1 = Linear(cfg.time_width, cfg.time_width, rng)
        self.time_fc2 = Linear(cfg.time_width, cfg.time_width, rng)
        self.embed_to_time = Linear(cfg.embed_dim, cfg.time_width, rng)
        self.embed_to_plane = Linear(cfg.embed_dim, cfg.embed_plane_channels, rng)
        self.embed_to_tokens = Linear(cfg.embed_dim, EMBED_TOKENS * cfg.cond_width, rng)
        self.null_embedding = Tensor(
            rng.uniform(-0.02, 0.02, cfg.embed_dim).astype(np.float32),
            requires_grad=True,
        )
        self.text_pathway = TextEncoder(
            len(ds.VOCAB),
            TransformerConfig(width=cfg.cond_width, depth=cfg.text_depth,
                              heads=cfg.text_heads,
                              context_length=ds.CONTEXT_LENGTH, causal=True),
            rng,
        )
        self.schedule = df.make_schedule(cfg.schedule, cfg.diffusion_steps)

    def time_vector(self, t, batch: int, z: Tensor) -> Tensor:
        ts = np.broadcast_to(np.asarray(t), (batch,))
        sin = nn.timestep_embed(ts, self.cfg.time_width)
        temb = self.time_fc2(T.gelu(self.time_fc1(sin)))
        # embedding projection joins after the timestep MLP
        return T.add(temb, self.embed_to_time(z))

    def context_tokens(self, z: Tensor, caption_ids: np.ndarray) -> Tensor:
        b = z.shape[0]
        etok = T.reshape(self.embed_to_tokens(z),
                         (b, EMBED_TOKENS, self.cfg.cond_width))
        ttok = self.text_pathway(caption_ids)
        return T.concat([ttok, etok], axis=1)

    def __call__(self, x_t: Tensor, t, z: Tensor, caption_ids: np.ndarray) -> Tensor:
        b, _, h, w = x_t.shape
        temb = self.time_vector(t, b, z)
        ctx = self.context_tokens(z, caption_ids)
        plane = T.reshape(self.embed_to_plane(z),
                          (b, self.cfg.embed_plane_channels, 1, 1))
        plane = T.add(Tensor(np.zeros((b, self.cfg.embed_plane_channels, h, w),
                                      np.float32)), plane)
        return self.unet(T.concat([x_t, plane], axis=1), temb, ctx)


def _null_rows(model: DecoderModel, batch: int) -> Tensor:
    zeros = Tensor(np.zeros((batch, model.cfg.embed_dim), np.float32))
    return T.add(zeros, model.null_embedding)


def decoder_forward(
    model: DecoderModel,
    x_t: Tensor,
    t,
    z_i: np.ndarray | None,
    caption_ids: np.ndarray | None,
) -> Tensor:
    """Predict eps; z_i=None selects the learned null embedding and
    caption_ids=None the empty caption (together: the unconditional branch)."""
    b = x_t.shape[0]
    if z_i is None:
        z = _null_rows(model, b)
    else:
        z_i = np.atleast_2d(np.asarray(z_i, np.float32))
        if z_i.shape != (b, model.cfg.embed_dim):
            raise ValueError(f"decoder_forward: z_i shape {list(z_i.shape)}")
        z = Tensor(z_i)
    if caption_ids is None:
        caption_ids = np.tile(ds.empty_caption(), (b, 1))
    else:
        caption_ids = np.atleast_2d(caption_ids)
    return model(x_t, t, z, caption_ids)


def sample_condition_drops(rng: np.random.Generator, n: int, embed_drop: float,
                           caption_drop: float) -> tuple[np.ndarray, np.ndarray]:
    """Independent per-example drop masks (True = drop) at the configured rates."""
    return rng.random(n) < embed_drop, rng.random(n) < caption_drop


def train_decoder(
    cfg: DecoderConfig,
    records: list[ds.DatasetRecord],
    clip_model: ClipModel,
    steps: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    ema_decay: float = 0.999,
    seed: int = 0,
    verbose: bool = False,
    log_every: int = 200,
):
    """eps-prediction MSE training with per-example conditioning dropout.

    The embedding branch drops to the learned null vector, the caption branch
    to the empty caption. Returns (model, ema_state, loss_curve).
    """
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC]))
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    model = DecoderModel(cfg, init_rng)
    params = model.parameters()
    opt = adamw_init(params, lr=lr, weight_decay=weight_decay)
    ema = ema_init(params, ema_decay)
    images = ds.stack_images(records)
    captions = ds.stack_captions(records)
    z_all = _embed_images_chunked(clip_model, images)
    empty = ds.empty_caption()
    sched = model.schedule
    losses = []
    for step in range(steps):
        idx = data_rng.integers(0, len(records), batch_size)
        x0 = images[idx]
        t = data_rng.integers(1, sched.T + 1, batch_size)
        noise = data_rng.standard_normal(x0.shape).astype(np.float32)
        x_t = df.q_sample(sched, x0, t, noise).astype(np.float32)

        drop_e, drop_c = sample_condition_drops(data_rng, batch_size,
                                                cfg.embed_drop, cfg.caption_drop)
        z_batch = z_all[idx].copy()
        z_batch[drop_e] = 0.0
        ids = captions[idx].copy()
        ids[drop_c] = empty

        with GradientTape() as tape:
            mask = Tensor(drop_e.astype(np.float32)[:, None])
            z = T.add(Tensor(z_batch), T.mul(mask, model.null_embedding))
            pred = model(Tensor(x_t), t, z, ids)
            loss = T.mse(pred, Tensor(noise))
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"train_decoder: loss diverged to {value} at step {step}")
        losses.append(value)
        grads = T.grads_for(tape, loss, params)
        adamw_step(opt, params, grads)
        ema_update(ema, params)
        if verbose and (step % log_every == 0 or step == steps - 1):
            print(f"[decoder] step {step} loss {value:.4f}")
    return model, ema, losses


def _embed_images_chunked(clip_model: ClipModel, images: np.ndarray,
                          chunk: int = 256) -> np.ndarray:
    outs = [
        embed_image(clip_model, images[i : i + chunk])
        for i in range(0, len(images), chunk)
    ]
    return np.concatenate(outs, axis=0)


def decode(
    model: DecoderModel,
    z_i: np.ndarray | None,
    caption_ids: np.ndarray | None,
    guidance_scale: float = 1.0,
    eta: float = 0.0,
    steps: int = 50,
    rng: np.random.Generator | None = None,
    x_T: np.ndarray | None = None,
    batch: int | None = None,
) -> np.ndarray:
    """Sample images. z_i may be (D,), (B, D), or None (caption-only decode);
    an explicit x_T seeds the chain, which makes eta=0 decoding a pure
    function of (z_i, caption, x_T)."""
    if guidance_scale < 0:
        raise ValueError("decode: guidance_scale must be >= 0")
    if rng is None:
        rng = np.random.default_rng(0)
    if z_i is not None:
        z_i = np.atleast_2d(np.asarray(z_i, np.float32))
        b = z_i.shape[0]
    elif batch is not None:
        b = batch
    elif caption_ids is not None and np.asarray(caption_ids).ndim == 2:
        b = np.asarray(caption_ids).shape[0]
    else:
        b = 1
    if caption_ids is not None:
        caption_ids = np.atleast_2d(caption_ids)
        if caption_ids.shape[0] == 1 and b > 1:
            caption_ids = np.tile(caption_ids, (b, 1))

    size = model.cfg.image_size

    def cond_fn(x, t):
        return decoder_forward(model, Tensor(x), t, z_i, caption_ids).data

    def uncond_fn(x, t):
        return decoder_forward(model, Tensor(x), t, None, None).data

    return df.sample_loop(
        model.schedule, cond_fn, (b, 3, size, size), steps=steps, eta=eta,
        rng=rng, guidance_scale=guidance_scale, uncond_fn=uncond_fn,
        x_start=x_T,
    )


def invert(
    model: DecoderModel,
    image: np.ndarray,
    z_i: np.ndarray,
    caption_ids: np.ndarray | None = None,
    steps: int = 50,
) -> np.ndarray:
    """DDIM-invert an image under its own conditioning; returns x_T."""
    x0 = np.atleast_2d(np.asarray(image, np.float32))
    if x0.ndim == 3:
        x0 = x0[None]
    z_i = np.atleast_2d(np.asarray(z_i, np.float32))
    if caption_ids is not None:
        caption_ids = np.atleast_2d(caption_ids)

    def cond_fn(x, t):
        return decoder_forward(model, Tensor(x), t, z_i, caption_ids).data

    return df.ddim_invert(model.schedule, cond_fn, x0, steps=steps)


# ---------------------------------------------------------------------------
# upsampler
# ---------------------------------------------------------------------------


@dataclass
class UpsamplerConfig:
    target_size: int = ds.HI_RES
    base_channels: int = 32
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2])
    resblocks_per_stage: int = 1
    time_width: int = 128
    blur_kernel: int = 3
    blur_sigma: float = 0.6
    schedule: str = "cosine"
    diffusion_steps: int = 100

    @property
    def crop_size(self) -> int:
        # train on crops covering one-fourth of the target area
        return self.target_size // 2


class UpsamplerModel(Module):
    def __init__(self, cfg: UpsamplerConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dn = DenoiserConfig(
            base_channels=cfg.base_channels,
            channel_multipliers=list(cfg.channel_multipliers),
            resblocks_per_stage=cfg.resblocks_per_stage,
            attention_resolutions=[],
            cond_width=1,
        )
        self.unet = UNet(dn, cfg.crop_size, 6, 3, cfg.time_width, rng)
        self.time_fc1 = Linear(cfg.time_width, cfg.time_width, rng)
        self.time_fc2 = Linear(cfg.time_width, cfg.time_width, rng)
        self.schedule = df.make_schedule(cfg.schedule, cfg.diffusion_steps)
        assert not self.unet.has_attention()

    def __call__(self, x_and_cond: Tensor, t) -> Tensor:
        ts = np.broadcast_to(np.asarray(t), (x_and_cond.shape[0],))
        sin = nn.timestep_embed(ts, self.cfg.time_width)
        temb = self.time_fc2(T.gelu(self.time_fc1(sin)))
        return self.unet(x_and_cond, temb, None)


def gaussian_blur(images: np.ndarray, kernel: int = 3, sigma: float = 0.6) -> np.ndarray:
    """Separable gaussian blur with edge-replicate padding, so constant images
    stay constant. images: (..., H, W) float32."""
    if kernel % 2 != 1:
        raise ValueError("blur kernel must be odd")
    half = kernel // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k1 = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    pad = [(0, 0)] * (images.ndim - 2) + [(half, half), (half, half)]
    padded = np.pad(images.astype(np.float64), pad, mode="edge")
    h, w = images.shape[-2:]
    out = np.zeros_like(images, dtype=np.float64)
    for i in range(kernel):
        for j in range(kernel):
            out += k2[i, j] * padded[..., i : i + h, j : j + w]
    return out.astype(np.float32)


def upsample_nearest_np(images: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(images, 2, axis=-2), 2, axis=-1)


def train_upsampler(
    cfg: UpsamplerConfig,
    records: list[ds.DatasetRecord],
    steps: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    ema_decay: float = 0.999,
    seed: int = 0,
    verbose: bool = False,
    log_every: int = 200,
):
    """Train on random crops (half the side, a quarter of the area) of the
    high-res target, conditioned on a blurred-then-upsampled low-res channel.
    No caption conditioning and no guidance anywhere in this stage."""
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CA1E]))
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    model = UpsamplerModel(cfg, init_rng)
    params = model.parameters()
    opt = adamw_init(params, lr=lr)
    ema = ema_init(params, ema_decay)
    hi = ds.stack_images_hr(records)
    lo = ds.stack_images(records)
    crop = cfg.crop_size
    sched = model.schedule
    losses = []
    for step in range(steps):
        idx = data_rng.integers(0, len(records), batch_size)
        cond_full = upsample_nearest_np(
            gaussian_blur(lo[idx], cfg.blur_kernel, cfg.blur_sigma)
        )
        hr = hi[idx]
        max_off = cfg.target_size - crop
        ys = data_rng.integers(0, max_off + 1, batch_size)
        xs = data_rng.integers(0, max_off + 1, batch_size)
        hr_crop = np.stack([hr[i, :, y : y + crop, x : x + crop]
                            for i, (y, x) in enumerate(zip(ys, xs))])
        cond_crop = np.stack([cond_full[i, :, y : y + crop, x : x + crop]
                              for i, (y, x) in enumerate(zip(ys, xs))])
        t = data_rng.integers(1, sched.T + 1, batch_size)
        noise = data_rng.standard_normal(hr_crop.shape).astype(np.float32)
        x_t = df.q_sample(sched, hr_crop, t, noise).astype(np.float32)
        stacked = np.concatenate([x_t, cond_crop], axis=1)
        with GradientTape() as tape:
            pred = model(Tensor(stacked), t)
            loss = T.mse(pred, Tensor(noise))
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"train_upsampler: loss diverged at step {step}")
        losses.append(value)
        grads = T.grads_for(tape, loss, params)
        adamw_step(opt, params, grads)
        ema_update(ema, params)
        if verbose and (step % log_every == 0 or step == steps - 1):
            print(f"[upsampler] step {step} loss {value:.4f}")
    return model, ema, losses


def upsample(
    model: UpsamplerModel,
    low_res: np.ndarray,
    steps: int = 15,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run the conv-only denoiser at the full target resolution, conditioned
    on the clean low-res input. Deterministic DDIM (eta=0)."""
    if rng is None:
        rng = np.random.default_rng(0)
    low = np.asarray(low_res, np.float32)
    single = low.ndim == 3
    if single:
        low = low[None]
    size = model.cfg.target_size
    if low.shape[1:] != (3, size // 2, size // 2):
        raise ValueError(f"upsample: expected (*,3,{size//2},{size//2}), got {list(low.shape)}")
    cond = upsample_nearest_np(low)

    def model_fn(x, t):
        return model(Tensor(np.concatenate([x, cond], axis=1)), t).data

    out = df.sample_loop(model.schedule, model_fn, (low.shape[0], 3, size, size),
                         steps=steps, eta=0.0, rng=rng)
    return out[0] if single else out
