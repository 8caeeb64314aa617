"""Stage orchestration: dataset -> contrastive encoders -> decoder (+ a
caption-only ablation twin) -> upsampler -> priors -> sample sheet.

Each stage writes one artifact file and is skipped when that file already
exists, so an interrupted run resumes from the latest completed stage.
Everything derives from (config, seed); reruns are bit-reproducible.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import clip as cl
from . import dataset as ds
from . import decoder as dec
from . import imageio
from . import prior as pr
from .config import Config


def clip_config(cfg: Config) -> cl.ClipConfig:
    return cl.ClipConfig(
        conv_channels=cfg["clip.conv_channels"],
        text_width=cfg["clip.text_width"],
        text_depth=cfg["clip.text_depth"],
        text_heads=cfg["clip.text_heads"],
    )


def decoder_config(cfg: Config, caption_only: bool = False) -> dec.DecoderConfig:
    return dec.DecoderConfig(
        base_channels=cfg["decoder.base_channels"],
        channel_multipliers=cfg.int_list("decoder.channel_multipliers"),
        resblocks_per_stage=cfg["decoder.resblocks_per_stage"],
        attention_resolutions=cfg.int_list("decoder.attention_resolutions"),
        cond_width=cfg["decoder.cond_width"],
        time_width=cfg["decoder.time_width"],
        text_depth=cfg["decoder.text_depth"],
        text_heads=cfg["decoder.text_heads"],
        embed_drop=1.0 if caption_only else cfg["decoder.embed_drop"],
        caption_drop=0.1 if caption_only else cfg["decoder.caption_drop"],
        schedule=cfg["decoder.schedule"],
        diffusion_steps=cfg["decoder.diffusion_steps"],
    )


def upsampler_config(cfg: Config) -> dec.UpsamplerConfig:
    return dec.UpsamplerConfig(
        base_channels=cfg["upsampler.base_channels"],
        channel_multipliers=cfg.int_list("upsampler.channel_multipliers"),
        resblocks_per_stage=cfg["upsampler.resblocks_per_stage"],
        time_width=cfg["upsampler.time_width"],
        blur_kernel=cfg["upsampler.blur_kernel"],
        blur_sigma=cfg["upsampler.blur_sigma"],
        schedule=cfg["upsampler.schedule"],
        diffusion_steps=cfg["upsampler.diffusion_steps"],
    )


def ar_prior_config(cfg: Config) -> pr.ArPriorConfig:
    return pr.ArPriorConfig(
        width=cfg["prior.width"],
        depth=cfg["prior.depth"],
        heads=cfg["prior.heads"],
        buckets_per_dim=cfg["prior.buckets_per_dim"],
        dot_buckets=cfg["prior.dot_buckets"],
        text_drop=cfg["prior.text_drop"],
    )


def diffusion_prior_config(cfg: Config) -> pr.DiffusionPriorConfig:
    return pr.DiffusionPriorConfig(
        width=cfg["prior.width"],
        depth=cfg["prior.depth"],
        heads=cfg["prior.heads"],
        text_drop=cfg["prior.text_drop"],
        schedule=cfg["prior.schedule"],
        diffusion_steps=cfg["prior.diffusion_steps"],
    )


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------


def save_clip(path, model: cl.ClipModel, ema) -> None:
    ckpt.save_checkpoint(path, ckpt.pack_model(model, ema.shadow))


def load_clip(path, cfg: Config, use_ema: bool = True) -> cl.ClipModel:
    model = cl.ClipModel(clip_config(cfg), np.random.default_rng(0))
    ckpt.unpack_model(model, ckpt.load_checkpoint(path), use_ema=use_ema)
    return model


def save_decoder(path, model: dec.DecoderModel, ema) -> None:
    ckpt.save_checkpoint(path, ckpt.pack_model(model, ema.shadow))


def load_decoder(path, cfg: Config, caption_only: bool = False,
                 use_ema: bool = True) -> dec.DecoderModel:
    model = dec.DecoderModel(decoder_config(cfg, caption_only), np.random.default_rng(0))
    ckpt.unpack_model(model, ckpt.load_checkpoint(path), use_ema=use_ema)
    return model


def save_upsampler(path, model: dec.UpsamplerModel, ema) -> None:
    ckpt.save_checkpoint(path, ckpt.pack_model(model, ema.shadow))


def load_upsampler(path, cfg: Config, use_ema: bool = True) -> dec.UpsamplerModel:
    model = dec.UpsamplerModel(upsampler_config(cfg), np.random.default_rng(0))
    ckpt.unpack_model(model, ckpt.load_checkpoint(path), use_ema=use_ema)
    return model


def save_ar_prior(path, model: pr.ArPriorModel, ema) -> None:
    extras = {
        "pca_mean": model.pca.mean,
        "pca_components": model.pca.components,
        "pca_eigenvalues": model.pca.eigenvalues,
        "quant_lo": model.quantizer.lo,
        "quant_hi": model.quantizer.hi,
        "quant_buckets": np.array([model.quantizer.buckets_per_dim]),
        "dot_range": np.array([model.dot_lo, model.dot_hi]),
        "dot_samples": model.dot_samples,
    }
    ckpt.save_checkpoint(path, ckpt.pack_model(model, ema.shadow, extras))


def load_ar_prior(path, cfg: Config, use_ema: bool = True) -> pr.ArPriorModel:
    tensors = ckpt.load_checkpoint(path)
    k = tensors["extra/pca_components"].shape[0]
    model = pr.ArPriorModel(ar_prior_config(cfg), k, np.random.default_rng(0))
    extras = ckpt.unpack_model(model, tensors, use_ema=use_ema)
    model.pca = pr.PcaBasis(
        mean=extras["pca_mean"].astype(np.float64),
        components=extras["pca_components"].astype(np.float64),
        eigenvalues=extras["pca_eigenvalues"].astype(np.float64),
    )
    model.quantizer = pr.QuantizerSpec(
        buckets_per_dim=int(extras["quant_buckets"][0]),
        lo=extras["quant_lo"].astype(np.float64),
        hi=extras["quant_hi"].astype(np.float64),
    )
    model.dot_lo = float(extras["dot_range"][0])
    model.dot_hi = float(extras["dot_range"][1])
    model.dot_samples = extras["dot_samples"]
    return model


def save_diffusion_prior(path, model: pr.DiffusionPriorModel, ema) -> None:
    extras = {"input_scale": np.array([model.input_scale])}
    ckpt.save_checkpoint(path, ckpt.pack_model(model, ema.shadow, extras))


def load_diffusion_prior(path, cfg: Config, use_ema: bool = True) -> pr.DiffusionPriorModel:
    model = pr.DiffusionPriorModel(diffusion_prior_config(cfg), np.random.default_rng(0))
    extras = ckpt.unpack_model(model, ckpt.load_checkpoint(path), use_ema=use_ema)
    model.input_scale = float(extras["input_scale"][0])
    return model


def _write_losses(path, losses: list[float]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, f"{v:.6f}"])


# ---------------------------------------------------------------------------
# the end-to-end run
# ---------------------------------------------------------------------------


class PipelinePaths:
    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.dataset_train = self.out / "dataset_train.bin"
        self.dataset_eval = self.out / "dataset_eval.bin"
        self.clip = self.out / "clip.ckpt"
        self.decoder = self.out / "decoder.ckpt"
        self.decoder_caption_only = self.out / "decoder_caption_only.ckpt"
        self.upsampler = self.out / "upsampler.ckpt"
        self.prior_ar = self.out / "prior_ar.ckpt"
        self.prior_diffusion = self.out / "prior_diffusion.ckpt"
        self.sheet = self.out / "samples" / "sheet.png"
        self.sheet_meta = self.out / "samples" / "sheet.txt"
        self.resolved = self.out / "config.resolved.txt"
        self.timings = self.out / "timings.csv"


def read_timings(path) -> dict[str, float]:
    """Last recorded wall-clock seconds per stage."""
    out: dict[str, float] = {}
    if not Path(path).exists():
        return out
    for line in Path(path).read_text().splitlines():
        if "," in line:
            name, secs = line.rsplit(",", 1)
            out[name] = float(secs)
    return out


def run_pipeline(cfg: Config, out_dir, seed: int, log=print,
                 sample_prompts: int = 8) -> PipelinePaths:
    """Run every stage, skipping those whose artifact already exists."""
    paths = PipelinePaths(out_dir)
    paths.out.mkdir(parents=True, exist_ok=True)
    paths.sheet.parent.mkdir(parents=True, exist_ok=True)
    cfg.dump(paths.resolved)
    t_start = time.perf_counter()

    def stage(path: Path, name: str, fn):
        if path.exists():
            log(f"[pipeline] {name}: exists, skipping ({path.name})")
            return
        t0 = time.perf_counter()
        fn()
        elapsed = time.perf_counter() - t0
        with open(paths.timings, "a") as f:
            f.write(f"{name},{elapsed:.3f}\n")
        log(f"[pipeline] {name}: done in {elapsed:.1f}s")

    stage(paths.dataset_train, "gen-data(train)", lambda: ds.save_dataset(
        paths.dataset_train, ds.generate_dataset(cfg["data.n_train"], seed)))
    stage(paths.dataset_eval, "gen-data(eval)", lambda: ds.save_dataset(
        paths.dataset_eval, ds.generate_unique_caption_dataset(cfg["data.n_eval"], seed + 1)))

    records = ds.load_dataset(paths.dataset_train)

    def do_clip():
        model, ema, losses = cl.train_clip(
            clip_config(cfg), records, steps=cfg["clip.steps"],
            batch_size=cfg["clip.batch"], lr=cfg["clip.lr"],
            ema_decay=cfg["clip.ema_decay"], seed=seed, verbose=True)
        save_clip(paths.clip, model, ema)
        _write_losses(paths.out / "clip_loss.csv", losses)

    stage(paths.clip, "train-clip", do_clip)
    clip_model = load_clip(paths.clip, cfg)

    def do_decoder(path, caption_only, steps):
        model, ema, losses = dec.train_decoder(
            decoder_config(cfg, caption_only), records, clip_model, steps=steps,
            batch_size=cfg["decoder.batch"], lr=cfg["decoder.lr"],
            ema_decay=cfg["decoder.ema_decay"], seed=seed, verbose=True)
        save_decoder(path, model, ema)
        suffix = "_caption_only" if caption_only else ""
        _write_losses(paths.out / f"decoder{suffix}_loss.csv", losses)

    stage(paths.decoder, "train-decoder",
          lambda: do_decoder(paths.decoder, False, cfg["decoder.steps"]))
    if cfg["pipeline.train_caption_only"]:
        stage(paths.decoder_caption_only, "train-decoder(caption-only)",
              lambda: do_decoder(paths.decoder_caption_only, True,
                                 cfg["pipeline.caption_only_steps"]))

    def do_upsampler():
        model, ema, losses = dec.train_upsampler(
            upsampler_config(cfg), records, steps=cfg["upsampler.steps"],
            batch_size=cfg["upsampler.batch"], lr=cfg["upsampler.lr"],
            ema_decay=cfg["upsampler.ema_decay"], seed=seed, verbose=True)
        save_upsampler(paths.upsampler, model, ema)
        _write_losses(paths.out / "upsampler_loss.csv", losses)

    stage(paths.upsampler, "train-upsampler", do_upsampler)

    def do_ar():
        model, ema, losses = pr.train_ar_prior(
            ar_prior_config(cfg), records, clip_model, steps=cfg["prior.ar.steps"],
            batch_size=cfg["prior.ar.batch"], lr=cfg["prior.ar.lr"],
            weight_decay=cfg["prior.ar.weight_decay"],
            ema_decay=cfg["prior.ar.ema_decay"], seed=seed, verbose=True)
        save_ar_prior(paths.prior_ar, model, ema)
        _write_losses(paths.out / "prior_ar_loss.csv", losses)

    stage(paths.prior_ar, "train-prior(ar)", do_ar)

    def do_diff():
        model, ema, losses = pr.train_diffusion_prior(
            diffusion_prior_config(cfg), records, clip_model,
            steps=cfg["prior.diffusion.steps"],
            batch_size=cfg["prior.diffusion.batch"], lr=cfg["prior.diffusion.lr"],
            weight_decay=cfg["prior.diffusion.weight_decay"],
            ema_decay=cfg["prior.diffusion.ema_decay"], seed=seed, verbose=True)
        save_diffusion_prior(paths.prior_diffusion, model, ema)
        _write_losses(paths.out / "prior_diffusion_loss.csv", losses)
        zi = dec._embed_images_chunked(clip_model, ds.stack_images(records))
        _, note = pr.embedding_input_scale(ds.stack_images(records), zi)
        (paths.out / "prior_diffusion_scale.txt").write_text(note + "\n")

    stage(paths.prior_diffusion, "train-prior(diffusion)", do_diff)

    def do_sheet():
        eval_records = ds.load_dataset(paths.dataset_eval)
        prompts = ds.stack_captions(eval_records[:sample_prompts])
        prior_model = load_diffusion_prior(paths.prior_diffusion, cfg)
        decoder_model = load_decoder(paths.decoder, cfg)
        upsampler_model = load_upsampler(paths.upsampler, cfg)
        rng = np.random.default_rng(seed)
        z = pr.sample_diffusion_prior(prior_model, prompts, clip_model,
                                      steps=cfg["prior.sample_steps"],
                                      guidance_scale=cfg["prior.guidance_scale"],
                                      rng=rng)
        low = dec.decode(decoder_model, z, prompts,
                         guidance_scale=cfg["decoder.guidance_scale"],
                         eta=cfg["decoder.eta"], steps=cfg["decoder.sample_steps"],
                         rng=rng)
        high = dec.upsample(upsampler_model, low,
                            steps=cfg["upsampler.sample_steps"], rng=rng)
        imageio.save_grid(paths.sheet, list(high), ncols=4)
        lines = [
            f"seed = {seed}",
            f"guidance = {cfg['decoder.guidance_scale']}",
            f"eta = {cfg['decoder.eta']}",
            f"steps = {cfg['decoder.sample_steps']}",
            "prompts:",
        ] + ["  " + ds.detokenize(p) for p in prompts]
        paths.sheet_meta.write_text("\n".join(lines) + "\n")

    stage(paths.sheet, "sample-sheet", do_sheet)
    log(f"[pipeline] total wall clock {time.perf_counter() - t_start:.1f}s")
    return paths
