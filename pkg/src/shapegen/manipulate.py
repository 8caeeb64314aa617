"""Bipartite-latent manipulations: variations, interpolations, text-directed
edits, and the progressive-PCA probe. Every operation works on (z_i, x_T):
the image embedding plus the DDIM-inverted residual noise.
"""

from __future__ import annotations

import warnings

import numpy as np

from .clip import ClipModel, embed_image, embed_text
from .decoder import DecoderModel, decode, invert
from .diffusion import BipartiteLatent
from .prior import PcaBasis, pca_project, pca_reconstruct


def slerp(a: np.ndarray, b: np.ndarray, theta: float) -> np.ndarray:
    """Constant-speed interpolation along the great circle between unit
    vectors; falls back to a normalized lerp when the angle is tiny.
    Antipodal endpoints have no unique path and are rejected."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    for name, v in (("a", a), ("b", b)):
        n = np.linalg.norm(v)
        if abs(n - 1.0) > 1e-4:
            raise ValueError(f"slerp: {name} is not unit norm (|{name}|={n:.6f})")
    if theta == 0.0:
        return a.astype(np.float32)
    if theta == 1.0:
        return b.astype(np.float32)
    dot = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if dot <= -1.0 + 1e-7:
        raise ValueError("slerp: endpoints are antipodal; path undefined")
    omega = np.arccos(dot)
    if omega < 1e-4:
        v = (1.0 - theta) * a + theta * b
        return (v / np.linalg.norm(v)).astype(np.float32)
    s = np.sin(omega)
    v = np.sin((1.0 - theta) * omega) / s * a + np.sin(theta * omega) / s * b
    return v.astype(np.float32)


def slerp_raw(a: np.ndarray, b: np.ndarray, theta: float) -> np.ndarray:
    """Great-circle interpolation for arbitrary-norm tensors (DDIM latents);
    the angle comes from the normalized dot, endpoints are reproduced exactly."""
    if theta == 0.0:
        return np.asarray(a, np.float32).copy()
    if theta == 1.0:
        return np.asarray(b, np.float32).copy()
    af = np.asarray(a, np.float64).reshape(-1)
    bf = np.asarray(b, np.float64).reshape(-1)
    na, nb = np.linalg.norm(af), np.linalg.norm(bf)
    dot = float(np.clip(af @ bf / (na * nb), -1.0, 1.0))
    omega = np.arccos(dot)
    if omega < 1e-4:
        v = (1.0 - theta) * af + theta * bf
    else:
        s = np.sin(omega)
        v = np.sin((1.0 - theta) * omega) / s * af + np.sin(theta * omega) / s * bf
    return v.reshape(np.shape(a)).astype(np.float32)


def encode_bipartite(
    clip_model: ClipModel,
    decoder_model: DecoderModel,
    image: np.ndarray,
    invert_steps: int | None = None,
) -> BipartiteLatent:
    """Image -> (z_i, x_T). Inversion runs at the full schedule length unless
    a coarser stride is requested."""
    z_i = embed_image(clip_model, image)
    steps = invert_steps or decoder_model.schedule.T
    x_T = invert(decoder_model, image[None], z_i[None], steps=steps)[0]
    return BipartiteLatent(z_i=z_i, x_T=x_T)


def variations(
    image: np.ndarray,
    eta: float,
    n: int,
    rng: np.random.Generator,
    clip_model: ClipModel,
    decoder_model: DecoderModel,
    steps: int | None = None,
    guidance_scale: float = 1.0,
) -> np.ndarray:
    """n decodes of the same bipartite latent with stochastic (eta > 0) DDIM,
    perceptually centered on the source image."""
    if eta == 0.0 and n > 1:
        warnings.warn("variations: eta=0 makes all outputs identical")
    latent = encode_bipartite(clip_model, decoder_model, image)
    steps = steps or decoder_model.schedule.T
    outs = []
    for _ in range(n):
        outs.append(
            decode(decoder_model, latent.z_i[None], None, guidance_scale=guidance_scale,
                   eta=eta, steps=steps, rng=rng, x_T=latent.x_T[None])[0]
        )
    return np.stack(outs)


def interpolate(
    x1: np.ndarray,
    x2: np.ndarray,
    num_steps: int,
    latent_mode: str,
    rng: np.random.Generator,
    clip_model: ClipModel,
    decoder_model: DecoderModel,
    steps: int | None = None,
) -> np.ndarray:
    """Frames along the great circle between two images' embeddings.

    latent_mode "endpoints" slerps the two inverted latents, so the first and
    last frames reconstruct the inputs; "random" fixes one sampled latent for
    the whole row, which generally does not reconstruct them."""
    if num_steps < 2:
        raise ValueError("interpolate: need at least 2 steps")
    if latent_mode not in ("endpoints", "random"):
        raise ValueError(f"interpolate: unknown latent_mode {latent_mode!r}")
    steps = steps or decoder_model.schedule.T
    l1 = encode_bipartite(clip_model, decoder_model, x1)
    thetas = np.linspace(0.0, 1.0, num_steps)
    if latent_mode == "endpoints":
        l2 = encode_bipartite(clip_model, decoder_model, x2)
        lat_fn = lambda th: slerp_raw(l1.x_T, l2.x_T, th)
        z2 = l2.z_i
    else:
        fixed = rng.standard_normal(l1.x_T.shape).astype(np.float32)
        lat_fn = lambda th: fixed
        z2 = embed_image(clip_model, x2)
    zs = np.stack([slerp(l1.z_i, z2, float(th)) for th in thetas])
    x_Ts = np.stack([lat_fn(float(th)) for th in thetas])
    return decode(decoder_model, zs, None, guidance_scale=1.0, eta=0.0,
                  steps=steps, rng=rng, x_T=x_Ts)


def text_diff(
    image: np.ndarray,
    caption_from: np.ndarray,
    caption_to: np.ndarray,
    thetas: list[float],
    clip_model: ClipModel,
    decoder_model: DecoderModel,
    steps: int | None = None,
) -> np.ndarray:
    """Rotate the image embedding toward the normalized text-embedding
    difference, decoding each interpolate against the same inverted latent."""
    zt_from = embed_text(clip_model, caption_from)
    zt_to = embed_text(clip_model, caption_to)
    diff = zt_to.astype(np.float64) - zt_from.astype(np.float64)
    norm = np.linalg.norm(diff)
    if norm < 1e-6:
        raise ValueError("text_diff: captions embed identically; diff undefined")
    z_d = (diff / norm).astype(np.float32)
    latent = encode_bipartite(clip_model, decoder_model, image)
    steps = steps or decoder_model.schedule.T
    zs = np.stack([slerp(latent.z_i, z_d, float(th)) for th in thetas])
    x_Ts = np.tile(latent.x_T[None], (len(thetas), 1, 1, 1))
    return decode(decoder_model, zs, None, guidance_scale=1.0, eta=0.0,
                  steps=steps, rng=np.random.default_rng(0), x_T=x_Ts)


def default_thetas(max_theta: float = 0.5, count: int = 8) -> list[float]:
    if not 0.0 < max_theta <= 1.0:
        raise ValueError("max_theta must be in (0, 1]")
    return [float(v) for v in np.linspace(0.0, max_theta, count)]


def pca_probe(
    image: np.ndarray,
    ks: list[int],
    basis: PcaBasis,
    clip_model: ClipModel,
    decoder_model: DecoderModel,
    seed: int = 0,
    steps: int | None = None,
) -> np.ndarray:
    """Decode reconstructions of the image embedding from progressively more
    principal components, with the residual latent and seed held fixed."""
    for k in ks:
        if not 1 <= k <= basis.k_max:
            raise ValueError(f"pca_probe: k={k} out of range [1, {basis.k_max}]")
    latent = encode_bipartite(clip_model, decoder_model, image)
    steps = steps or decoder_model.schedule.T
    zs = np.stack([
        pca_reconstruct(basis, pca_project(basis, latent.z_i, k))
        for k in ks
    ])
    x_Ts = np.tile(latent.x_T[None], (len(ks), 1, 1, 1))
    return decode(decoder_model, zs, None, guidance_scale=1.0, eta=0.0,
                  steps=steps, rng=np.random.default_rng(seed), x_T=x_Ts)
