"""Caption -> image-embedding priors.

Two variants, matching the two-stage stack's first stage:

  * Autoregressive: image embeddings are PCA-reduced, each retained dimension
    quantized into uniform buckets, and the code sequence predicted by a
    causal transformer conditioned on a prefix of [caption tokens, projected
    text embedding, quantized image-text dot product].
  * Diffusion: a causal transformer denoises the continuous embedding
    directly, predicting the clean vector (not the noise) from
    [encoded caption, text embedding, timestep, noised embedding, query].

Embeddings entering the diffusion prior are rescaled so their per-coordinate
variance matches the pixel variance the noise schedules were tuned for; the
constant is recomputed from data rather than hard-coded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from . import diffusion as df
from . import nn
from . import tensor as T
from .clip import ClipModel, embed_image, embed_text
from .nn import Linear, Module, TransformerStack
from .optim import adamw_init, adamw_step, ema_init, ema_update
from .tensor import GradientTape, Tensor

ZT_TOKENS = 4


# ---------------------------------------------------------------------------
# PCA + quantizer
# ---------------------------------------------------------------------------


@dataclass
class PcaBasis:
    mean: np.ndarray          # (D,)
    components: np.ndarray    # (K, D), orthonormal rows, eigenvalue-ordered
    eigenvalues: np.ndarray   # (K,), descending

    @property
    def k_max(self) -> int:
        return self.components.shape[0]


def fit_pca(embeddings: np.ndarray, mse_fraction: float = 0.01) -> PcaBasis:
    """Eigendecompose the covariance of mean-centered embeddings and keep the
    smallest K whose reconstruction MSE is below `mse_fraction` of the total
    variance. Rank-deficient inputs cap K at the numerical rank."""
    x = np.asarray(embeddings, np.float64)
    n, d = x.shape
    if n < d:
        raise ValueError(f"fit_pca: need at least {d} samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]
    total = eigvals.sum()
    rank = int((eigvals > eigvals[0] * 1e-10).sum()) if total > 0 else 1
    tails = total - np.cumsum(eigvals)  # tails[j]: residual MSE keeping j+1 comps
    below = np.nonzero(tails < mse_fraction * total)[0]
    k = int(below[0]) + 1 if below.size else d
    k = max(1, min(k, rank))
    return PcaBasis(
        mean=mean,
        components=eigvecs[:, :k].T.copy(),
        eigenvalues=eigvals[:k].copy(),
    )


def pca_project(basis: PcaBasis, embedding: np.ndarray, k: int | None = None) -> np.ndarray:
    k = basis.k_max if k is None else k
    if not 1 <= k <= basis.k_max:
        raise ValueError(f"pca_project: k={k} out of range [1, {basis.k_max}]")
    x = np.asarray(embedding, np.float64)
    return (x - basis.mean) @ basis.components[:k].T


def pca_reconstruct(basis: PcaBasis, coefficients: np.ndarray,
                    renormalize: bool = True) -> np.ndarray:
    """Back-project coefficients; the result is rescaled onto the unit sphere
    because encoder embeddings live there."""
    c = np.asarray(coefficients, np.float64)
    k = c.shape[-1]
    if not 1 <= k <= basis.k_max:
        raise ValueError(f"pca_reconstruct: k={k} out of range [1, {basis.k_max}]")
    v = basis.mean + c @ basis.components[:k]
    if renormalize:
        v = v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    return v.astype(np.float32)


@dataclass
class QuantizerSpec:
    buckets_per_dim: int
    lo: np.ndarray  # (K,) inclusive lower range edges
    hi: np.ndarray  # (K,) upper range edges, strictly above lo

    @property
    def width(self) -> np.ndarray:
        return (self.hi - self.lo) / self.buckets_per_dim


def fit_quantizer(coefficients: np.ndarray, buckets_per_dim: int = 64) -> QuantizerSpec:
    c = np.asarray(coefficients, np.float64)
    lo = c.min(axis=0)
    hi = c.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1e-6)
    return QuantizerSpec(buckets_per_dim=buckets_per_dim, lo=lo, hi=hi)


def quantize(spec: QuantizerSpec, coefficients: np.ndarray) -> np.ndarray:
    """Uniform bucketing over the per-dimension range; out-of-range values
    clamp to the edge buckets."""
    c = np.asarray(coefficients, np.float64)
    ids = np.floor((c - spec.lo) / spec.width).astype(np.int64)
    return np.clip(ids, 0, spec.buckets_per_dim - 1)


def dequantize(spec: QuantizerSpec, ids: np.ndarray) -> np.ndarray:
    return spec.lo + (np.asarray(ids, np.float64) + 0.5) * spec.width


# ---------------------------------------------------------------------------
# AR prior
# ---------------------------------------------------------------------------


@dataclass
class ArPriorConfig:
    width: int = 128
    depth: int = 3
    heads: int = 4
    buckets_per_dim: int = 64
    dot_buckets: int = 64
    embed_dim: int = 32
    text_drop: float = 0.1


class ArPriorModel(Module):
    """Causal transformer over [caption | z_t tokens | dot token | codes]."""

    def __init__(self, cfg: ArPriorConfig, k: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.k = k
        self.prefix_len = ds.CONTEXT_LENGTH + ZT_TOKENS + 1
        self.seq_len = self.prefix_len + k
        w = cfg.width
        self.tok = Tensor(rng.uniform(-0.02, 0.02, (len(ds.VOCAB), w)).astype(np.float32),
                          requires_grad=True)
        self.code_tok = Tensor(
            rng.uniform(-0.02, 0.02, (cfg.buckets_per_dim, w)).astype(np.float32),
            requires_grad=True)
        # one extra dot row embeds "text conditioning dropped"
        self.dot_tok = Tensor(
            rng.uniform(-0.02, 0.02, (cfg.dot_buckets + 1, w)).astype(np.float32),
            requires_grad=True)
        self.pos = Tensor(rng.uniform(-0.02, 0.02, (self.seq_len, w)).astype(np.float32),
                          requires_grad=True)
        self.zt_proj = Linear(cfg.embed_dim, ZT_TOKENS * w, rng)
        self.null_zt = Tensor(rng.uniform(-0.02, 0.02, cfg.embed_dim).astype(np.float32),
                              requires_grad=True)
        self.stack = TransformerStack(w, cfg.depth, cfg.heads, rng, causal=True)
        self.head = Linear(w, cfg.buckets_per_dim, rng, zero_init=True)
        # fitted data transforms and the empirical dot-product sample, set by training
        self.pca: PcaBasis | None = None
        self.quantizer: QuantizerSpec | None = None
        self.dot_lo: float = -1.0
        self.dot_hi: float = 1.0
        self.dot_samples: np.ndarray | None = None

    def dot_bucket(self, dots: np.ndarray) -> np.ndarray:
        width = (self.dot_hi - self.dot_lo) / self.cfg.dot_buckets
        ids = np.floor((np.asarray(dots, np.float64) - self.dot_lo) / width).astype(np.int64)
        return np.clip(ids, 0, self.cfg.dot_buckets - 1)

    def _tokens(self, caption_ids: np.ndarray, zt: np.ndarray | Tensor,
                dot_ids: np.ndarray, code_ids: np.ndarray | None) -> Tensor:
        b = caption_ids.shape[0]
        w = self.cfg.width
        cap = T.embedding(self.tok, caption_ids)
        zt_t = zt if isinstance(zt, Tensor) else Tensor(np.asarray(zt, np.float32))
        ztt = T.reshape(self.zt_proj(zt_t), (b, ZT_TOKENS, w))
        dott = T.reshape(T.embedding(self.dot_tok, dot_ids), (b, 1, w))
        parts = [cap, ztt, dott]
        length = self.prefix_len
        if code_ids is not None and code_ids.shape[1] > 0:
            parts.append(T.embedding(self.code_tok, code_ids))
            length += code_ids.shape[1]
        seq = T.concat(parts, axis=1)
        pos = T.slice_(self.pos, (slice(0, length), slice(0, w)))
        return T.add(seq, pos)

    def logits(self, caption_ids: np.ndarray, zt, dot_ids: np.ndarray,
               code_ids: np.ndarray | None) -> Tensor:
        """Logits over code buckets at every position from the dot token on;
        position prefix_len - 1 + j predicts code j+1."""
        x = self.stack(self._tokens(caption_ids, zt, dot_ids, code_ids))
        b, length, w = x.shape
        out = T.slice_(x, (slice(0, b), slice(self.prefix_len - 1, length), slice(0, w)))
        return self.head(out)


def _embed_all(clip_model: ClipModel, records: list[ds.DatasetRecord], chunk=256):
    images = ds.stack_images(records)
    captions = ds.stack_captions(records)
    zi = np.concatenate([
        embed_image(clip_model, images[i : i + chunk]) for i in range(0, len(images), chunk)
    ])
    zt = np.concatenate([
        embed_text(clip_model, captions[i : i + chunk]) for i in range(0, len(captions), chunk)
    ])
    return zi, zt, captions


def train_ar_prior(
    cfg: ArPriorConfig,
    records: list[ds.DatasetRecord],
    clip_model: ClipModel,
    steps: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    weight_decay: float = 0.04,
    ema_decay: float = 0.999,
    seed: int = 0,
    verbose: bool = False,
    log_every: int = 200,
):
    """Next-token cross-entropy over code positions only; the caption, text
    embedding, and dot token drop out together 10% of the time."""
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA2]))
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    zi, zt, captions = _embed_all(clip_model, records)
    basis = fit_pca(zi)
    coeffs = pca_project(basis, zi)
    quant = fit_quantizer(coeffs, cfg.buckets_per_dim)
    codes = quantize(quant, coeffs)
    dots = (zi * zt).sum(axis=1)

    model = ArPriorModel(cfg, basis.k_max, init_rng)
    model.pca = basis
    model.quantizer = quant
    model.dot_lo = float(dots.min())
    model.dot_hi = float(dots.max()) if dots.max() > dots.min() else float(dots.min()) + 1e-6
    model.dot_samples = np.sort(dots).astype(np.float32)
    dot_ids_all = model.dot_bucket(dots)

    params = model.parameters()
    opt = adamw_init(params, lr=lr, weight_decay=weight_decay)
    ema = ema_init(params, ema_decay)
    empty = ds.empty_caption()
    k = basis.k_max
    losses = []
    for step in range(steps):
        idx = data_rng.integers(0, len(records), batch_size)
        ids = captions[idx].copy()
        zt_b = zt[idx].copy()
        dot_b = dot_ids_all[idx].copy()
        drop = data_rng.random(batch_size) < cfg.text_drop
        ids[drop] = empty
        zt_b[drop] = 0.0
        dot_b[drop] = cfg.dot_buckets  # the reserved null row
        code_b = codes[idx]
        with GradientTape() as tape:
            mask = Tensor(drop.astype(np.float32)[:, None])
            zt_in = T.add(Tensor(zt_b), T.mul(mask, model.null_zt))
            logits = model.logits(ids, zt_in, dot_b, code_b[:, :-1])
            flat = T.reshape(logits, (batch_size * k, cfg.buckets_per_dim))
            loss = T.cross_entropy(flat, code_b.reshape(-1))
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"train_ar_prior: loss diverged at step {step}")
        losses.append(value)
        grads = T.grads_for(tape, loss, params)
        adamw_step(opt, params, grads)
        ema_update(ema, params)
        if verbose and (step % log_every == 0 or step == steps - 1):
            print(f"[ar-prior] step {step} loss {value:.4f}")
    return model, ema, losses


def sample_top_half_dot(model: ArPriorModel, rng: np.random.Generator) -> float:
    """Draw a dot-product value from the upper half of the training
    distribution (at or above the empirical median)."""
    s = model.dot_samples
    idx = rng.integers(len(s) // 2, len(s))
    return float(s[idx])


def sample_ar_prior(
    model: ArPriorModel,
    caption_ids: np.ndarray,
    clip_model: ClipModel,
    rng: np.random.Generator,
    temperature: float = 1.0,
    guidance_scale: float = 1.0,
) -> np.ndarray:
    """Autoregressive decode of quantized codes, then dequantize, back-project,
    and renormalize. Guidance (off by default) extrapolates conditional from
    unconditional logits."""
    caption_ids = np.atleast_2d(caption_ids)
    if caption_ids.shape[0] != 1:
        raise ValueError("sample_ar_prior: one caption at a time")
    zt = embed_text(clip_model, caption_ids[0])[None]
    dot_id = model.dot_bucket(np.array([sample_top_half_dot(model, rng)]))
    empty = ds.empty_caption()[None]
    null_dot = np.array([model.cfg.dot_buckets])
    codes = np.zeros((1, 0), dtype=np.int64)
    for _ in range(model.k):
        logits = model.logits(caption_ids, zt, dot_id, codes).data[0, -1]
        if guidance_scale != 1.0:
            u = model.logits(empty, model.null_zt.data[None], null_dot, codes).data[0, -1]
            logits = u + guidance_scale * (logits - u)
        if temperature <= 0.0:
            nxt = int(np.argmax(logits))
        else:
            z = logits.astype(np.float64) / temperature
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        codes = np.concatenate([codes, [[nxt]]], axis=1)
    coeffs = dequantize(model.quantizer, codes[0])
    return pca_reconstruct(model.pca, coeffs)


# ---------------------------------------------------------------------------
# diffusion prior
# ---------------------------------------------------------------------------


@dataclass
class DiffusionPriorConfig:
    width: int = 128
    depth: int = 3
    heads: int = 4
    embed_dim: int = 32
    text_drop: float = 0.1
    schedule: str = "cosine"
    diffusion_steps: int = 100


class DiffusionPriorModel(Module):
    """Causal transformer over [caption, z_t, timestep, noised z_i, query];
    the query position's output is read as the clean-embedding prediction."""

    def __init__(self, cfg: DiffusionPriorConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.seq_len = ds.CONTEXT_LENGTH + 4
        self.tok = Tensor(rng.uniform(-0.02, 0.02, (len(ds.VOCAB), w)).astype(np.float32),
                          requires_grad=True)
        self.pos = Tensor(rng.uniform(-0.02, 0.02, (self.seq_len, w)).astype(np.float32),
                          requires_grad=True)
        self.zt_in = Linear(cfg.embed_dim, w, rng)
        self.time_in = Linear(w, w, rng)
        self.z_in = Linear(cfg.embed_dim, w, rng)
        self.query = Tensor(rng.uniform(-0.02, 0.02, w).astype(np.float32),
                            requires_grad=True)
        self.null_zt = Tensor(rng.uniform(-0.02, 0.02, cfg.embed_dim).astype(np.float32),
                              requires_grad=True)
        self.stack = TransformerStack(w, cfg.depth, cfg.heads, rng, causal=True)
        self.head = Linear(w, cfg.embed_dim, rng, zero_init=True)
        self.schedule = df.make_schedule(cfg.schedule, cfg.diffusion_steps)
        self.input_scale: float = 1.0  # set from data before training

    def __call__(self, caption_ids: np.ndarray, zt, t, z_noised) -> Tensor:
        b = caption_ids.shape[0]
        w = self.cfg.width
        cap = T.embedding(self.tok, caption_ids)
        zt_t = zt if isinstance(zt, Tensor) else Tensor(np.asarray(zt, np.float32))
        zt_tok = T.reshape(self.zt_in(zt_t), (b, 1, w))
        ts = np.broadcast_to(np.asarray(t), (b,))
        time_tok = T.reshape(self.time_in(nn.timestep_embed(ts, w)), (b, 1, w))
        zn = z_noised if isinstance(z_noised, Tensor) else Tensor(np.asarray(z_noised, np.float32))
        z_tok = T.reshape(self.z_in(zn), (b, 1, w))
        query = T.add(Tensor(np.zeros((b, 1, w), np.float32)),
                      T.reshape(self.query, (1, 1, w)))
        seq = T.concat([cap, zt_tok, time_tok, z_tok, query], axis=1)
        seq = T.add(seq, self.pos)
        out = self.stack(seq)
        last = T.slice_(out, (slice(0, b), slice(self.seq_len - 1, self.seq_len),
                              slice(0, w)))
        return self.head(T.reshape(last, (b, w)))


def embedding_input_scale(images: np.ndarray, embeddings: np.ndarray) -> tuple[float, str]:
    """Scale factor making per-coordinate embedding variance match the pixel
    variance the schedules are tuned for, with a note recording the numbers."""
    pixel_var = float(np.asarray(images, np.float64).var())
    emb_var = float(np.asarray(embeddings, np.float64).var(axis=0).mean())
    scale = float(np.sqrt(pixel_var / emb_var))
    note = (
        f"pixel_var={pixel_var:.6f} emb_var={emb_var:.6f} "
        f"scale=sqrt(pixel_var/emb_var)={scale:.4f}"
    )
    return scale, note


def train_diffusion_prior(
    cfg: DiffusionPriorConfig,
    records: list[ds.DatasetRecord],
    clip_model: ClipModel,
    steps: int,
    batch_size: int = 64,
    lr: float = 1e-3,
    weight_decay: float = 0.06,
    ema_decay: float = 0.999,
    seed: int = 0,
    verbose: bool = False,
    log_every: int = 200,
):
    """MSE on the clean (scaled) embedding with 10% text-conditioning dropout."""
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1FF]))
    data_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    zi, zt, captions = _embed_all(clip_model, records)
    model = DiffusionPriorModel(cfg, init_rng)
    scale, note = embedding_input_scale(ds.stack_images(records), zi)
    model.input_scale = scale
    if verbose:
        print(f"[diff-prior] input scale: {note}")
    z_scaled = (zi * scale).astype(np.float32)
    sched = model.schedule
    params = model.parameters()
    opt = adamw_init(params, lr=lr, weight_decay=weight_decay)
    ema = ema_init(params, ema_decay)
    empty = ds.empty_caption()
    losses = []
    for step in range(steps):
        idx = data_rng.integers(0, len(records), batch_size)
        x0 = z_scaled[idx]
        t = data_rng.integers(1, sched.T + 1, batch_size)
        noise = data_rng.standard_normal(x0.shape).astype(np.float32)
        x_t = df.q_sample(sched, x0, t, noise).astype(np.float32)
        ids = captions[idx].copy()
        zt_b = zt[idx].copy()
        drop = data_rng.random(batch_size) < cfg.text_drop
        ids[drop] = empty
        zt_b[drop] = 0.0
        with GradientTape() as tape:
            mask = Tensor(drop.astype(np.float32)[:, None])
            zt_in = T.add(Tensor(zt_b), T.mul(mask, model.null_zt))
            pred = model(ids, zt_in, t, x_t)
            loss = T.mse(pred, Tensor(x0))
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"train_diffusion_prior: loss diverged at step {step}")
        losses.append(value)
        grads = T.grads_for(tape, loss, params)
        adamw_step(opt, params, grads)
        ema_update(ema, params)
        if verbose and (step % log_every == 0 or step == steps - 1):
            print(f"[diff-prior] step {step} loss {value:.4f}")
    return model, ema, losses


def _prior_chain(model: DiffusionPriorModel, caption_ids: np.ndarray,
                 zt: np.ndarray | None, steps: int, guidance_scale: float,
                 rng: np.random.Generator) -> np.ndarray:
    d = model.cfg.embed_dim
    b = caption_ids.shape[0]

    def x0_model(ids, zt_arr):
        def fn(x, t):
            pred_x0 = model(ids, zt_arr, t, x).data
            return df.x0_to_eps(model.schedule, x, t, pred_x0)

        return fn

    cond = x0_model(caption_ids, zt)
    uncond = None
    if guidance_scale != 1.0:
        empty = np.tile(ds.empty_caption(), (b, 1))
        null = np.tile(model.null_zt.data[None], (b, 1))
        uncond = x0_model(empty, null)
    out = df.sample_loop(model.schedule, cond, (b, d), steps=steps, eta=0.0,
                         rng=rng, guidance_scale=guidance_scale,
                         uncond_fn=uncond, clamp=False)
    z = out / model.input_scale
    return (z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-12)).astype(
        np.float32
    )


def sample_diffusion_prior(
    model: DiffusionPriorModel,
    caption_ids: np.ndarray,
    clip_model: ClipModel,
    steps: int = 64,
    guidance_scale: float = 1.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Draw two candidates per caption and keep the one with the higher dot
    product against the caption's text embedding. Accepts (12,) or (B, 12)."""
    if rng is None:
        rng = np.random.default_rng(0)
    single = np.asarray(caption_ids).ndim == 1
    caption_ids = np.atleast_2d(caption_ids)
    zt = embed_text(clip_model, caption_ids)
    c1 = _prior_chain(model, caption_ids, zt, steps, guidance_scale, rng)
    c2 = _prior_chain(model, caption_ids, zt, steps, guidance_scale, rng)
    d1 = (c1 * zt).sum(axis=1)
    d2 = (c2 * zt).sum(axis=1)
    pick = np.where((d1 >= d2)[:, None], c1, c2)
    return pick[0] if single else pick
