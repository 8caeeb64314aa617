"""Desk-scale evaluation: Fréchet distance on embedding statistics, caption
similarity scoring, the pairwise-preference probe, binomial intervals, and
the guidance sweep.

The feature space for Fréchet statistics is the frozen contrastive image
embedding; absolute values are not comparable to inception-feature numbers,
but relative comparisons between configurations are.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataset as ds
from .clip import ClipModel, embed_image, embed_text
from .decoder import DecoderModel, decode


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    x = np.asarray(features, np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_gaussian: need (N>=2, D) features")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / (x.shape[0] - 1)
    return GaussianStats(mean=mean, covariance=cov)


def _check_cov(name: str, cov: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    cov = np.asarray(cov, np.float64)
    asym = np.abs(cov - cov.T).max()
    if asym > tol:
        raise ValueError(f"frechet_distance: {name} not symmetric (dev {asym:.2e})")
    cov = 0.5 * (cov + cov.T)
    w = np.linalg.eigvalsh(cov)
    floor = -tol * max(1.0, float(np.abs(w).max()))
    if w.min() < floor:
        raise ValueError(f"frechet_distance: {name} not PSD (min eig {w.min():.2e})")
    return cov


def sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    w = np.maximum(w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def sqrtm_product(cov_a: np.ndarray, cov_b: np.ndarray) -> np.ndarray:
    """Principal square root of cov_a @ cov_b via the symmetrized product:
    A (A Σ_b A)^(1/2) A^{-1} with A = Σ_a^(1/2). A tiny ridge keeps A
    invertible; only the trace of the result feeds the Fréchet distance."""
    a = np.asarray(cov_a, np.float64)
    b = np.asarray(cov_b, np.float64)
    ridge = 1e-12 * max(1.0, float(np.trace(a)) / a.shape[0])
    root_a = sqrtm_psd(a + ridge * np.eye(a.shape[0]))
    inner = sqrtm_psd(root_a @ b @ root_a)
    # inner @ inv(root_a) without forming the inverse; root_a is symmetric
    inner_inv_a = np.linalg.solve(root_a, inner.T).T
    return root_a @ inner_inv_a


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("frechet_distance: dimension mismatch")
    ca = _check_cov("first covariance", a.covariance)
    cb = _check_cov("second covariance", b.covariance)
    diff = a.mean - b.mean
    root_a = sqrtm_psd(ca)
    trace_term = np.trace(sqrtm_psd(root_a @ cb @ root_a))
    val = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * trace_term)
    return max(val, 0.0)


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range * data_range / mse)


def clip_score(images: np.ndarray, caption_ids: np.ndarray, clip_model: ClipModel) -> float:
    """Mean cosine between matched image and caption embeddings."""
    images = np.asarray(images, np.float32)
    caption_ids = np.atleast_2d(caption_ids)
    if images.ndim == 3:
        images = images[None]
    if len(images) == 0:
        raise ValueError("clip_score: empty input")
    if len(images) != len(caption_ids):
        raise ValueError("clip_score: image/caption count mismatch")
    zi = embed_image(clip_model, images)
    zt = embed_text(clip_model, caption_ids)
    return float((zi * zt).sum(axis=1).mean())


def preference_probe_fit(
    x_embeds: np.ndarray,
    y_embeds: np.ndarray,
    labels: np.ndarray,
    steps: int = 500,
    lr: float = 0.5,
) -> np.ndarray:
    """Logistic regression on difference vectors d = y - x.

    P(prefer y) = sigmoid(w . d); a constant offset in the underlying linear
    score cancels in the difference, so there is no bias term."""
    x = np.asarray(x_embeds, np.float64)
    y = np.asarray(y_embeds, np.float64)
    lab = np.asarray(labels, np.float64)
    if set(np.unique(lab)) - {0.0, 1.0}:
        raise ValueError("preference_probe_fit: labels must be 0/1")
    if len(np.unique(lab)) < 2:
        raise ValueError("preference_probe_fit: need both labels present")
    d = y - x
    w = np.zeros(d.shape[1])
    n = len(d)
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(d @ w)))
        grad = d.T @ (p - lab) / n
        w -= lr * grad
    return w


def preference_probability(w: np.ndarray, x_embed: np.ndarray, y_embed: np.ndarray) -> float:
    """Probability that y is preferred over x under the fitted probe."""
    return float(1.0 / (1.0 + np.exp(-(np.asarray(y_embed) - np.asarray(x_embed)) @ w)))


def normal_approx_interval(wins: int, n: int, p_conf: float = 0.95) -> tuple[float, float]:
    """p_hat +/- 1.96 sqrt(p_hat (1-p_hat) / n), clipped to [0, 1]."""
    if n < 1:
        raise ValueError("normal_approx_interval: n must be >= 1")
    if not 0 <= wins <= n:
        raise ValueError(f"normal_approx_interval: wins {wins} outside [0, {n}]")
    if p_conf != 0.95:
        raise ValueError("normal_approx_interval: only p_conf=0.95 is supported")
    p = wins / n
    half = 1.96 * np.sqrt(p * (1.0 - p) / n)
    return (float(max(0.0, p - half)), float(min(1.0, p + half)))


# ---------------------------------------------------------------------------
# guidance sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    scale: float
    frechet: float
    clip_score: float


def guidance_sweep(
    decoder_model: DecoderModel,
    clip_model: ClipModel,
    prompt_ids: np.ndarray,
    scales: list[float],
    rng: np.random.Generator,
    real_stats: GaussianStats,
    z_rows: np.ndarray | None = None,
    sample_steps: int = 50,
    eta: float = 0.0,
) -> list[SweepRow]:
    """Decode every prompt at each guidance scale and score the batches.

    The conditioning embeddings (z_rows, e.g. prior samples) and the chain
    starts are drawn once and held fixed, so only the guidance scale varies
    across rows. z_rows=None exercises the caption-only decoder path."""
    prompt_ids = np.atleast_2d(prompt_ids)
    b = prompt_ids.shape[0]
    size = decoder_model.cfg.image_size
    x_T = rng.standard_normal((b, 3, size, size)).astype(np.float32)
    rows = []
    for scale in scales:
        imgs = decode(decoder_model, z_rows, prompt_ids, guidance_scale=float(scale),
                      eta=eta, steps=sample_steps, rng=np.random.default_rng(0),
                      x_T=x_T, batch=b)
        feats = embed_image(clip_model, imgs)
        fd = frechet_distance(real_stats, fit_gaussian(feats))
        cs = clip_score(imgs, prompt_ids, clip_model)
        rows.append(SweepRow(scale=float(scale), frechet=fd, clip_score=cs))
    return rows


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scale", "frechet", "clip_score"])
        for r in rows:
            writer.writerow([f"{r.scale:g}", f"{r.frechet:.6f}", f"{r.clip_score:.6f}"])


def write_svg_lineplot(path, xs: list[float], series: dict[str, list[float]],
                       title: str = "") -> None:
    """Minimal SVG polyline plot, one line per named series."""
    w, h, m = 480, 320, 42
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    all_ys = [v for ys in series.values() for v in ys]
    y_lo, y_hi = min(all_ys), max(all_ys)
    if y_hi - y_lo < 1e-12:
        y_hi = y_lo + 1.0
    x_lo, x_hi = min(xs), max(xs)
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0

    def px(x):
        return m + (x - x_lo) / (x_hi - x_lo) * (w - 2 * m)

    def py(y):
        return h - m - (y - y_lo) / (y_hi - y_lo) * (h - 2 * m)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w/2:.0f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{m}" y1="{h-m}" x2="{w-m}" y2="{h-m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h-m}" stroke="black"/>',
        f'<text x="{m}" y="{h-m+16}" font-size="10">{x_lo:g}</text>',
        f'<text x="{w-m}" y="{h-m+16}" text-anchor="end" font-size="10">{x_hi:g}</text>',
        f'<text x="{m-4}" y="{h-m}" text-anchor="end" font-size="10">{y_lo:.3g}</text>',
        f'<text x="{m-4}" y="{m+4}" text-anchor="end" font-size="10">{y_hi:.3g}</text>',
    ]
    for i, (name, ys) in enumerate(series.items()):
        color = colors[i % len(colors)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{w-m}" y="{m + 14 * i}" text-anchor="end" font-size="11" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
