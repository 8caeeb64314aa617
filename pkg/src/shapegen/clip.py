"""Toy contrastive image/text encoders sharing a unit-sphere embedding space.

The image side is a four-stage conv net with global average pooling (16x16
inputs make patch tokenization degenerate); the text side is a causal
transformer read out at the end token. Both project to the same dimension
and are trained with the symmetric InfoNCE objective at a learned, clamped
temperature. After training the model is frozen; downstream stages only ever
read embeddings from it.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from . import nn
from . import tensor as T
from .nn import Conv2d, Linear, Module, TextEncoder, TransformerConfig
from .optim import adamw_init, adamw_step, ema_init, ema_update
from .tensor import GradientTape, Tensor

EMBED_DIM = 32

_LOG_TEMP_MIN = math.log(1.0 / 100.0)
_LOG_TEMP_MAX = math.log(100.0)


@dataclass
class ClipConfig:
    embed_dim: int = EMBED_DIM
    conv_channels: int = 32
    text_width: int = 64
    text_depth: int = 2
    text_heads: int = 4
    context_length: int = ds.CONTEXT_LENGTH


class ImageEncoder(Module):
    def __init__(self, cfg: ClipConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.conv_channels
        self.conv1 = Conv2d(3, c, 3, rng, pad=1)
        self.conv2 = Conv2d(c, 2 * c, 3, rng, stride=2, pad=1)
        self.conv3 = Conv2d(2 * c, 2 * c, 3, rng, stride=2, pad=1)
        self.conv4 = Conv2d(2 * c, 2 * c, 3, rng, stride=2, pad=1)
        self.proj = Linear(2 * c, cfg.embed_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(self.conv1(x))
        h = T.gelu(self.conv2(h))
        h = T.gelu(self.conv3(h))
        h = T.gelu(self.conv4(h))
        pooled = T.mean(h, axis=(2, 3))
        return self.proj(pooled)


class ClipModel(Module):
    def __init__(self, cfg: ClipConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg, rng)
        tcfg = TransformerConfig(
            width=cfg.text_width, depth=cfg.text_depth, heads=cfg.text_heads,
            context_length=cfg.context_length, causal=True,
        )
        self.text_encoder = TextEncoder(len(ds.VOCAB), tcfg, rng)
        self.text_proj = Linear(cfg.text_width, cfg.embed_dim, rng)
        self.log_temperature = Tensor(np.array([math.log(1 / 0.07)], np.float32),
                                      requires_grad=True)

    # -- tape-tracked paths used in training ---------------------------------

    def embed_image_t(self, images: Tensor) -> Tensor:
        return T.l2_normalize(self.image_encoder(images))

    def embed_text_t(self, captions: np.ndarray) -> Tensor:
        captions = np.atleast_2d(captions)
        feats = self.text_encoder(captions)
        ends = np.argmax(captions == ds.END, axis=1)
        idx = np.zeros((captions.shape[0], 1, self.cfg.text_width), dtype=np.int64)
        idx[:, 0, :] = ends[:, None]
        picked = T.gather(feats, idx, axis=1)
        picked = T.reshape(picked, (captions.shape[0], self.cfg.text_width))
        return T.l2_normalize(self.text_proj(picked))

    def clamp_temperature(self) -> None:
        np.clip(self.log_temperature.data, _LOG_TEMP_MIN, _LOG_TEMP_MAX,
                out=self.log_temperature.data)


def embed_image(model: ClipModel, image: np.ndarray) -> np.ndarray:
    """Unit-norm embedding of one image (3,16,16) or a batch (B,3,16,16)."""
    image = np.asarray(image, np.float32)
    single = image.ndim == 3
    if single:
        image = image[None]
    if image.shape[1:] != (3, ds.LO_RES, ds.LO_RES):
        raise ValueError(f"embed_image: bad shape {list(image.shape)}")
    out = model.embed_image_t(Tensor(image)).data
    return out[0] if single else out


def embed_text(model: ClipModel, caption: np.ndarray) -> np.ndarray:
    caption = np.asarray(caption)
    single = caption.ndim == 1
    out = model.embed_text_t(caption).data
    return out[0] if single else out


def symmetric_infonce(zi: Tensor, zt: Tensor, scale: Tensor) -> Tensor:
    """Mean of image->text and text->image cross-entropies on scale * zi zt^T."""
    n = zi.shape[0]
    logits = T.mul(T.matmul(zi, T.transpose(zt, (1, 0))), scale)
    labels = np.arange(n)
    loss_i = T.cross_entropy(logits, labels)
    loss_t = T.cross_entropy(T.transpose(logits, (1, 0)), labels)
    return T.mul(T.add(loss_i, loss_t), Tensor(0.5))


def contrastive_loss(model: ClipModel, images: Tensor, captions: np.ndarray) -> Tensor:
    """Symmetric cross-entropy over the temperature-scaled cosine matrix."""
    n = captions.shape[0]
    if n < 2:
        raise ValueError("contrastive_loss: batch size must be >= 2")
    keys = {captions[i].tobytes() for i in range(n)}
    if len(keys) != n:
        raise ValueError("contrastive_loss: duplicate captions in batch")
    zi = model.embed_image_t(images)
    zt = model.embed_text_t(captions)
    return symmetric_infonce(zi, zt, T.exp(model.log_temperature))


def unique_caption_batch(rng: np.random.Generator, captions: np.ndarray,
                         batch_size: int) -> np.ndarray:
    """Random indices whose captions are pairwise distinct."""
    n = captions.shape[0]
    order = rng.permutation(n)
    out, seen = [], set()
    for i in order:
        key = captions[i].tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(i)
        if len(out) == batch_size:
            break
    if len(out) < batch_size:
        raise ValueError(
            f"dataset has only {len(out)} distinct captions; need {batch_size}"
        )
    return np.array(out)


def train_clip(
    cfg: ClipConfig,
    records: list[ds.DatasetRecord],
    steps: int,
    batch_size: int = 32,
    lr: float = 3e-4,
    ema_decay: float = 0.999,
    seed: int = 0,
    log_every: int = 100,
    verbose: bool = False,
):
    """Train from scratch; returns (model, ema_state, loss_curve).

    Deterministic given seed. Aborts with RuntimeError on NaN loss.
    """
    if not records:
        raise ValueError("train_clip: empty dataset")
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC11]))
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    model = ClipModel(cfg, init_rng)
    params = model.parameters()
    opt = adamw_init(params, lr=lr)
    ema = ema_init(params, ema_decay)
    images = ds.stack_images(records)
    captions = ds.stack_captions(records)
    losses = []
    for step in range(steps):
        idx = unique_caption_batch(data_rng, captions, batch_size)
        with GradientTape() as tape:
            loss = contrastive_loss(model, Tensor(images[idx]), captions[idx])
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"train_clip: loss diverged to {value} at step {step}")
        losses.append(value)
        grads = T.grads_for(tape, loss, params)
        adamw_step(opt, params, grads)
        model.clamp_temperature()
        ema_update(ema, params)
        if verbose and (step % log_every == 0 or step == steps - 1):
            print(f"[clip] step {step} loss {value:.4f}")
    return model, ema, losses


def retrieval_top1(model: ClipModel, records: list[ds.DatasetRecord]) -> float:
    """Text -> image top-1 accuracy over the full cross-product."""
    if not records:
        raise ValueError("retrieval_top1: empty evaluation set")
    zi = embed_image(model, ds.stack_images(records))
    zt = embed_text(model, ds.stack_captions(records))
    sims = zt @ zi.T
    return float((sims.argmax(axis=1) == np.arange(len(records))).mean())


def params_checksum(model: Module) -> int:
    crc = 0
    for name, p in model.named_parameters():
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(p.data.tobytes(), crc)
    return crc
