"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale stack trains once into a cache directory (SHAPEGEN_ACCEPT_DIR,
default .accept_cache/ in the repo root) and is reused on later runs; stage
wall-clock budgets are read from the pipeline's timing log, so they refer to
the original training run.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from shapegen import clip as cl
from shapegen import dataset as ds
from shapegen import decoder as dec
from shapegen import diffusion as df
from shapegen import manipulate as man
from shapegen import metrics as mt
from shapegen import pipeline as pl
from shapegen import prior as pr
from shapegen import tensor as T
from shapegen.config import resolve_config

from helpers import gradcheck

SEED = 0


def report(num: int, desc: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[acceptance] criterion {num}: {desc}: {status}{suffix}")
    assert ok, f"criterion {num} failed: {desc}{suffix}"


class Stack:
    def __init__(self, out_dir):
        self.cfg = resolve_config()
        self.paths = pl.run_pipeline(self.cfg, out_dir, SEED)
        self.timings = pl.read_timings(self.paths.timings)
        self.train_records = ds.load_dataset(self.paths.dataset_train)
        self.eval_records = ds.load_dataset(self.paths.dataset_eval)
        self.clip = pl.load_clip(self.paths.clip, self.cfg)
        self.decoder = pl.load_decoder(self.paths.decoder, self.cfg)
        self.decoder_caption_only = pl.load_decoder(
            self.paths.decoder_caption_only, self.cfg, caption_only=True)
        self.upsampler = pl.load_upsampler(self.paths.upsampler, self.cfg)
        self.prior_ar = pl.load_ar_prior(self.paths.prior_ar, self.cfg)
        self.prior_diffusion = pl.load_diffusion_prior(self.paths.prior_diffusion,
                                                       self.cfg)
        self.invert_steps = self.cfg["manipulate.invert_steps"]

    def eval_images(self, n):
        return ds.stack_images(self.eval_records[:n])

    def eval_captions(self, n):
        return ds.stack_captions(self.eval_records[:n])


@pytest.fixture(scope="session")
def stack():
    cache = os.environ.get("SHAPEGEN_ACCEPT_DIR")
    out = Path(cache) if cache else Path(__file__).resolve().parent.parent / ".accept_cache"
    return Stack(out)


def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    cases = 0

    def weighted_loss(build):
        def fn(ps):
            out = build(ps)
            r = T.Tensor(np.linspace(-0.8, 1.0, out.size,
                                     dtype=np.float32).reshape(out.shape))
            return T.sum_(T.mul(out, r))

        return fn

    unary = {
        "exp": T.exp, "log": T.log, "sqrt": T.sqrt, "tanh": T.tanh,
        "gelu": T.gelu,
        "softmax": lambda x: T.softmax(x, axis=-1),
        "layer_norm": T.layer_norm,
        "mean": lambda x: T.mean(x, axis=1),
        "sum": lambda x: T.sum_(x, axis=0, keepdims=True),
        "pow": lambda x: T.pow_const(x, 1.3),
        "reshape": lambda x: T.reshape(x, (4, 3)),
        "transpose": lambda x: T.transpose(x, (1, 0)),
        "slice": lambda x: T.slice_(x, (slice(0, 2), slice(1, 4))),
    }
    for _ in range(5):
        for name, op in unary.items():
            x = rng.uniform(0.5, 1.5, (3, 4)).astype(np.float32)
            gradcheck(weighted_loss(lambda ps, op=op: op(ps[0])), [x])
            cases += 1
    for _ in range(5):
        for maker in [
            lambda: ([rng.uniform(0.5, 1.5, (3, 4)).astype(np.float32),
                      rng.uniform(0.5, 1.5, (3, 4)).astype(np.float32)],
                     lambda ps: T.add(ps[0], ps[1])),
            lambda: ([rng.uniform(0.5, 1.5, (3, 4)).astype(np.float32),
                      rng.uniform(0.5, 1.5, (4,)).astype(np.float32)],
                     lambda ps: T.mul(ps[0], ps[1])),
            lambda: ([rng.uniform(-1, 1, (3, 4)).astype(np.float32),
                      rng.uniform(-1, 1, (4, 2)).astype(np.float32)],
                     lambda ps: T.matmul(ps[0], ps[1])),
            lambda: ([rng.uniform(-1, 1, (2, 2, 5, 5)).astype(np.float32),
                      rng.uniform(-0.5, 0.5, (3, 2, 3, 3)).astype(np.float32)],
                     lambda ps: T.conv2d(ps[0], ps[1], stride=1, pad=1)),
            lambda: ([rng.uniform(-1, 1, (4, 6)).astype(np.float32)],
                     lambda ps: T.embedding(ps[0], np.array([[0, 3], [2, 1]]))),
            lambda: ([rng.uniform(-1, 1, (3, 5)).astype(np.float32)],
                     lambda ps: T.gather(ps[0], np.array([[1], [0], [4]]), axis=1)),
            lambda: ([rng.uniform(0.5, 1.5, (2, 6)).astype(np.float32),
                      rng.uniform(0.5, 1.5, (2, 6)).astype(np.float32)],
                     lambda ps: T.concat([ps[0], ps[1]], axis=0)),
        ]:
            arrays, build = maker()
            gradcheck(weighted_loss(build), arrays)
            cases += 1
    elapsed = time.perf_counter() - t0
    report(1, "autodiff matches central differences (1e-3 rel)",
           cases >= 100 and elapsed < 60.0,
           f"{cases} cases in {elapsed:.1f}s")


def test_criterion_2_diffusion_identities(stack):
    sched = stack.decoder.schedule
    sigma_ok = all(
        abs(df.ddim_sigma(sched, t, t - 1, 1.0) -
            np.sqrt((1 - sched.alpha_bars[t - 1]) / (1 - sched.alpha_bars[t])
                    * sched.betas[t - 1])) <= 1e-6
        for t in range(2, sched.T + 1)
    )
    rng = np.random.default_rng(2)
    x_t = rng.standard_normal(64)
    eps = rng.standard_normal(64)
    inv_ok = True
    for t in range(1, sched.T + 1):
        x0 = df.eps_to_x0(sched, x_t, t, eps)
        inv_ok &= bool(np.abs(df.x0_to_eps(sched, x_t, t, x0) - eps).max() <= 1e-5)
        e2 = df.x0_to_eps(sched, x_t, t, x0)
        inv_ok &= bool(np.abs(df.eps_to_x0(sched, x_t, t, e2) - x0).max() <= 1e-5)

    rec = stack.eval_records[0]
    z = cl.embed_image(stack.clip, rec.image)
    x_T = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
    a = dec.decode(stack.decoder, z[None], None, eta=0.0, steps=50,
                   rng=np.random.default_rng(0), x_T=x_T)
    b = dec.decode(stack.decoder, z[None], None, eta=0.0, steps=50,
                   rng=np.random.default_rng(1), x_T=x_T)
    deterministic = bool(np.array_equal(a, b))
    report(2, "DDIM sigma/Nconversion/determinism identities",
           sigma_ok and inv_ok and deterministic)


def test_criterion_3_clip_retrieval(stack):
    acc = cl.retrieval_top1(stack.clip, stack.eval_records[:256])
    train_time = stack.timings.get("train-clip", float("nan"))
    ok = acc >= 0.90 and (np.isnan(train_time) or train_time < 1800)
    report(3, "held-out text->image retrieval >= 90%", ok,
           f"top1 {acc:.3f}, training {train_time:.0f}s")


def _reconstruct(stack, images, captions=None):
    z = cl.embed_image(stack.clip, images)
    x_T = dec.invert(stack.decoder, images, z, caption_ids=captions,
                     steps=stack.invert_steps)
    return dec.decode(stack.decoder, z, captions, guidance_scale=1.0, eta=0.0,
                      steps=stack.invert_steps, rng=np.random.default_rng(0),
                      x_T=x_T)


def test_criterion_4_reconstruction_psnr(stack):
    images = stack.eval_images(32)
    out = _reconstruct(stack, images)
    psnrs = [mt.psnr(a, b) for a, b in zip(images, out)]
    mean_psnr = float(np.mean(psnrs))
    report(4, "embed -> invert -> decode reconstruction >= 25 dB",
           mean_psnr >= 25.0, f"mean PSNR {mean_psnr:.2f} dB")


def test_criterion_5_interpolation_endpoints(stack):
    pairs = [(stack.eval_records[2 * i].image, stack.eval_records[2 * i + 1].image)
             for i in range(6)]
    end_psnrs = []
    rand_psnrs = []
    for i, (a, b) in enumerate(pairs):
        frames = man.interpolate(a, b, 2, "endpoints",
                                 np.random.default_rng(50 + i), stack.clip,
                                 stack.decoder, steps=stack.invert_steps)
        end_psnrs += [mt.psnr(a, frames[0]), mt.psnr(b, frames[1])]
        frames_r = man.interpolate(a, b, 2, "random",
                                   np.random.default_rng(50 + i), stack.clip,
                                   stack.decoder, steps=stack.invert_steps)
        rand_psnrs += [mt.psnr(a, frames_r[0]), mt.psnr(b, frames_r[1])]
    mean_end = float(np.mean(end_psnrs))
    mean_rand = float(np.mean(rand_psnrs))
    report(5, "endpoint latents reconstruct sources; random latents need not",
           mean_end >= 25.0 and mean_rand < 25.0,
           f"endpoints {mean_end:.2f} dB, random {mean_rand:.2f} dB")


def test_criterion_6_prior_benefit(stack):
    n = 256
    prompts = stack.eval_captions(n)
    rng = np.random.default_rng(60)
    z_prior = pr.sample_diffusion_prior(stack.prior_diffusion, prompts,
                                        stack.clip,
                                        steps=stack.cfg["prior.sample_steps"],
                                        rng=rng)
    z_text = cl.embed_text(stack.clip, prompts)
    scale = stack.cfg["decoder.guidance_scale"]
    steps = stack.cfg["decoder.sample_steps"]
    x_T = rng.standard_normal((n, 3, 16, 16)).astype(np.float32)
    imgs_prior = dec.decode(stack.decoder, z_prior, prompts, guidance_scale=scale,
                            eta=0.0, steps=steps, rng=np.random.default_rng(0),
                            x_T=x_T)
    imgs_text = dec.decode(stack.decoder, z_text, prompts, guidance_scale=scale,
                           eta=0.0, steps=steps, rng=np.random.default_rng(0),
                           x_T=x_T)
    s_prior = mt.clip_score(imgs_prior, prompts, stack.clip)
    s_text = mt.clip_score(imgs_text, prompts, stack.clip)
    real = mt.fit_gaussian(cl.embed_image(stack.clip, stack.eval_images(n)))
    f_prior = mt.frechet_distance(real, mt.fit_gaussian(
        cl.embed_image(stack.clip, imgs_prior)))
    f_text = mt.frechet_distance(real, mt.fit_gaussian(
        cl.embed_image(stack.clip, imgs_text)))
    report(6, "prior-sampled embeddings beat z_t-as-z_i decodes",
           s_prior > s_text and f_prior < f_text,
           f"clip {s_prior:.4f} vs {s_text:.4f}; frechet {f_prior:.3f} vs {f_text:.3f}")


def test_criterion_7_guidance_behavior(stack):
    n = 256
    prompts = stack.eval_captions(n)
    scales = [1.0, 2.0, 3.0, 4.0]
    rng = np.random.default_rng(70)
    z = pr.sample_diffusion_prior(stack.prior_diffusion, prompts, stack.clip,
                                  steps=stack.cfg["prior.sample_steps"], rng=rng)
    real = mt.fit_gaussian(cl.embed_image(stack.clip, stack.eval_images(n)))
    rows_unclip = mt.guidance_sweep(stack.decoder, stack.clip, prompts, scales,
                                    np.random.default_rng(71), real, z_rows=z,
                                    sample_steps=stack.cfg["decoder.sample_steps"])
    rows_caption = mt.guidance_sweep(stack.decoder_caption_only, stack.clip,
                                     prompts, scales, np.random.default_rng(71),
                                     real, z_rows=None,
                                     sample_steps=stack.cfg["decoder.sample_steps"])
    deg_unclip = rows_unclip[-1].frechet - rows_unclip[0].frechet
    deg_caption = rows_caption[-1].frechet - rows_caption[0].frechet
    cs = [r.clip_score for r in rows_unclip]
    monotone = all(b >= a - 1e-6 for a, b in zip(cs, cs[1:]))
    report(7, "guidance hurts Frechet less with the embedding stage; CLIP-score non-decreasing",
           deg_unclip < deg_caption and monotone,
           f"degradation {deg_unclip:.3f} vs {deg_caption:.3f}; scores {['%.4f' % c for c in cs]}")


def test_criterion_8_pca_properties(stack):
    zi = cl.embed_image(stack.clip, ds.stack_images(stack.train_records))
    basis = stack.prior_ar.pca
    centered = zi.astype(np.float64) - zi.mean(axis=0)
    total_var = centered.var(axis=0).sum()
    recon = pr.pca_reconstruct(basis, pr.pca_project(basis, zi), renormalize=False)
    mse = float(((recon - zi) ** 2).sum(axis=1).mean())
    rule_ok = mse < 0.01 * total_var

    errs = []
    for k in range(1, basis.k_max + 1):
        rk = pr.pca_reconstruct(basis, pr.pca_project(basis, zi[:512], k),
                                renormalize=False)
        errs.append(float(((rk - zi[:512]) ** 2).sum(axis=1).mean()))
    monotone = all(a >= b - 1e-9 for a, b in zip(errs, errs[1:]))

    rng = np.random.default_rng(80)
    spec = stack.prior_ar.quantizer
    v = rng.uniform(spec.lo, spec.hi, (100_000, basis.k_max))
    q_err = np.abs(pr.dequantize(spec, pr.quantize(spec, v)) - v)
    quant_ok = bool((q_err <= spec.width / 2 + 1e-12).all())
    report(8, "PCA 1% rule, monotone reconstruction, quantizer round trip",
           rule_ok and monotone and quant_ok,
           f"K={basis.k_max}, tail mse {mse:.2e} vs {0.01 * total_var:.2e}")


def test_criterion_9_prior_mechanics(stack):
    model = stack.prior_ar
    caption = stack.eval_records[0].caption[None]
    zt = cl.embed_text(stack.clip, caption)
    rng = np.random.default_rng(90)
    codes = rng.integers(0, model.cfg.buckets_per_dim, (1, model.k - 1))
    base = model.logits(caption, zt, np.array([3]), codes).data
    j = model.k // 2
    pert = codes.copy()
    pert[0, j] = (pert[0, j] + 11) % model.cfg.buckets_per_dim
    changed = model.logits(caption, zt, np.array([3]), pert).data
    causal_ok = bool(np.array_equal(base[0, : j + 1], changed[0, : j + 1]))

    dp = stack.prior_diffusion
    cap = stack.eval_records[1].caption
    zt1 = cl.embed_text(stack.clip, cap)
    rng2 = np.random.default_rng(91)
    picked = pr.sample_diffusion_prior(dp, cap, stack.clip, steps=16,
                                       rng=np.random.default_rng(91))
    c1 = pr._prior_chain(dp, cap[None], zt1[None], 16, 1.0, rng2)
    c2 = pr._prior_chain(dp, cap[None], zt1[None], 16, 1.0, rng2)
    best = max(float(c1 @ zt1), float(c2 @ zt1))
    rerank_ok = abs(float(picked @ zt1) - best) < 1e-5

    median = float(np.median(model.dot_samples))
    draws = [pr.sample_top_half_dot(model, np.random.default_rng(92 + i))
             for i in range(300)]
    top_half_ok = min(draws) >= median - 1e-6
    report(9, "causal mask, rerank dominance, top-half dot sampling",
           causal_ok and rerank_ok and top_half_ok)


def test_criterion_10_statistics():
    lo, hi = mt.normal_approx_interval(500, 1000)
    half = (hi - lo) / 2
    interval_ok = abs(half - 0.031) < 5e-4 and abs((lo + hi) / 2 - 0.5) < 1e-12

    rng = np.random.default_rng(100)
    a = rng.standard_normal((5, 5))
    cov = a @ a.T / 5 + 0.1 * np.eye(5)
    mu = rng.standard_normal(5)
    stats = mt.GaussianStats(mu, cov)
    zero_ok = mt.frechet_distance(stats, stats) <= 1e-6
    delta = rng.standard_normal(5)
    shifted = mt.GaussianStats(mu + delta, cov.copy())
    shift_ok = abs(mt.frechet_distance(stats, shifted) - delta @ delta) < 1e-6
    report(10, "normal-approximation interval and Frechet closed forms",
           interval_ok and zero_ok and shift_ok,
           f"interval +/-{half:.4f}")


def test_criterion_11_smoke_pipeline(stack, tmp_path):
    cfg = resolve_config(Path(__file__).resolve().parent.parent / "configs" / "smoke.txt")
    t0 = time.perf_counter()
    paths_a = pl.run_pipeline(cfg, tmp_path / "a", seed=5, log=lambda *a: None)
    smoke_time = time.perf_counter() - t0
    paths_b = pl.run_pipeline(cfg, tmp_path / "b", seed=5, log=lambda *a: None)

    mismatched = []
    for pa in sorted((tmp_path / "a").rglob("*")):
        if pa.is_dir() or pa.name == "timings.csv":
            continue
        pb = tmp_path / "b" / pa.relative_to(tmp_path / "a")
        if not pb.exists() or pa.read_bytes() != pb.read_bytes():
            mismatched.append(pa.name)
    desk_total = sum(stack.timings.values())
    ok = smoke_time < 300 and not mismatched and desk_total < 4 * 3600
    report(11, "smoke pipeline < 5 min, artifacts bit-reproducible, desk run < 4 h",
           ok,
           f"smoke {smoke_time:.0f}s, desk {desk_total:.0f}s, mismatches {mismatched}")
