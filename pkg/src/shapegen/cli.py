"""Command-line entry point. Batch subcommands only; every run is seeded and
reproducible, outputs land in --out (or $SHAPEGEN_OUT, default ./out)."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import clip as cl
from . import dataset as ds
from . import decoder as dec
from . import imageio
from . import manipulate as man
from . import metrics as mt
from . import pipeline as pl
from . import prior as pr
from .config import ConfigError, resolve_config


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master random seed")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="shapegen",
        description="Two-stage text-to-image stack on captioned shapes",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate and save a dataset")
    _common(sp)
    sp.add_argument("--n", type=int, default=None, help="record count")
    sp.add_argument("--eval", action="store_true",
                    help="generate the unique-caption evaluation split")

    for name in ("train-clip", "train-upsampler"):
        sp = sub.add_parser(name, help=f"{name.replace('-', ' ')} stage")
        _common(sp)

    sp = sub.add_parser("train-decoder", help="train the image decoder")
    _common(sp)
    sp.add_argument("--caption-only", action="store_true",
                    help="ablation: always drop the image embedding")

    sp = sub.add_parser("train-prior", help="train an embedding prior")
    _common(sp)
    sp.add_argument("--kind", choices=["ar", "diffusion"], required=True)

    sp = sub.add_parser("sample", help="text -> image samples")
    _common(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--prior", choices=["ar", "diffusion"], default="diffusion")
    sp.add_argument("--hires", action="store_true", help="run the upsampler too")

    sp = sub.add_parser("variations", help="stochastic decodes around one image")
    _common(sp)
    sp.add_argument("--index", type=int, default=0, help="eval-dataset image index")
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--eta", type=float, default=0.9)

    sp = sub.add_parser("interpolate", help="blend two images")
    _common(sp)
    sp.add_argument("--index-a", type=int, default=0)
    sp.add_argument("--index-b", type=int, default=1)
    sp.add_argument("--latent-mode", choices=["endpoints", "random"],
                    default="endpoints")

    sp = sub.add_parser("textdiff", help="language-directed edit of one image")
    _common(sp)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--to", required=True, help="target caption")
    sp.add_argument("--from", dest="from_caption", default=None,
                    help="baseline caption (defaults to the image's own)")
    sp.add_argument("--max-theta", type=float, default=None)

    sp = sub.add_parser("probe-pca", help="decode progressively truncated embeddings")
    _common(sp)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--ks", default="2,4,8,16", help="comma-separated k values")

    sp = sub.add_parser("eval", help="retrieval / reconstruction / prior metrics")
    _common(sp)

    sp = sub.add_parser("sweep", help="guidance-scale sweep (CSV + SVG)")
    _common(sp)
    sp.add_argument("--scales", default="1,2,3,4")
    sp.add_argument("--prompts", type=int, default=64)
    sp.add_argument("--caption-only", action="store_true",
                    help="sweep the caption-only decoder instead")

    sp = sub.add_parser("pipeline", help="run every stage end to end (resumable)")
    _common(sp)

    return p


class CliContext:
    def __init__(self, args):
        self.cfg = resolve_config(args.config, args.set)
        out = args.out or os.environ.get("SHAPEGEN_OUT") or "./out"
        self.paths = pl.PipelinePaths(out)
        self.seed = args.seed
        self.paths.out.mkdir(parents=True, exist_ok=True)

    def need(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(
                f"missing {path} - run `shapegen {hint}` first"
            )
        return path

    def records(self, split="train"):
        path = self.paths.dataset_train if split == "train" else self.paths.dataset_eval
        hint = "gen-data" if split == "train" else "gen-data --eval"
        return ds.load_dataset(self.need(path, hint))

    def clip_model(self):
        return pl.load_clip(self.need(self.paths.clip, "train-clip"), self.cfg)

    def decoder_model(self, caption_only=False):
        if caption_only:
            return pl.load_decoder(
                self.need(self.paths.decoder_caption_only,
                          "train-decoder --caption-only"),
                self.cfg, caption_only=True)
        return pl.load_decoder(self.need(self.paths.decoder, "train-decoder"), self.cfg)


def _cmd_gen_data(args) -> int:
    ctx = CliContext(args)
    cfg = ctx.cfg
    if args.eval:
        n = args.n or cfg["data.n_eval"]
        records = ds.generate_unique_caption_dataset(n, ctx.seed + 1)
        ds.save_dataset(ctx.paths.dataset_eval, records)
        print(f"wrote {len(records)} eval records -> {ctx.paths.dataset_eval}")
    else:
        n = args.n or cfg["data.n_train"]
        records = ds.generate_dataset(n, ctx.seed)
        ds.save_dataset(ctx.paths.dataset_train, records)
        print(f"wrote {len(records)} records -> {ctx.paths.dataset_train}")
    return 0


def _cmd_train_clip(args) -> int:
    ctx = CliContext(args)
    cfg = ctx.cfg
    model, ema, losses = cl.train_clip(
        pl.clip_config(cfg), ctx.records(), steps=cfg["clip.steps"],
        batch_size=cfg["clip.batch"], lr=cfg["clip.lr"],
        ema_decay=cfg["clip.ema_decay"], seed=ctx.seed, verbose=True)
    pl.save_clip(ctx.paths.clip, model, ema)
    pl._write_losses(ctx.paths.out / "clip_loss.csv", losses)
    print(f"saved {ctx.paths.clip}")
    return 0


def _cmd_train_decoder(args) -> int:
    ctx = CliContext(args)
    cfg = ctx.cfg
    caption_only = args.caption_only
    steps = cfg["pipeline.caption_only_steps"] if caption_only else cfg["decoder.steps"]
    model, ema, losses = dec.train_decoder(
        pl.decoder_config(cfg, caption_only), ctx.records(), ctx.clip_model(),
        steps=steps, batch_size=cfg["decoder.batch"], lr=cfg["decoder.lr"],
        ema_decay=cfg["decoder.ema_decay"], seed=ctx.seed, verbose=True)
    path = ctx.paths.decoder_caption_only if caption_only else ctx.paths.decoder
    pl.save_decoder(path, model, ema)
    suffix = "_caption_only" if caption_only else ""
    pl._write_losses(ctx.paths.out / f"decoder{suffix}_loss.csv", losses)
    print(f"saved {path}")
    return 0


def _cmd_train_upsampler(args) -> int:
    ctx = CliContext(args)
    cfg = ctx.cfg
    model, ema, losses = dec.train_upsampler(
        pl.upsampler_config(cfg), ctx.records(), steps=cfg["upsampler.steps"],
        batch_size=cfg["upsampler.batch"], lr=cfg["upsampler.lr"],
        ema_decay=cfg["upsampler.ema_decay"], seed=ctx.seed, verbose=True)
    pl.save_upsampler(ctx.paths.upsampler, model, ema)
    pl._write_losses(ctx.paths.out / "upsampler_loss.csv", losses)
    print(f"saved {ctx.paths.upsampler}")
    return 0


def _cmd_train_prior(args) -> int:
    ctx = CliContext(args)
    cfg = ctx.cfg
    if args.kind == "ar":
        model, ema, losses = pr.train_ar_prior(
            pl.ar_prior_config(cfg), ctx.records(), ctx.clip_model(),
            steps=cfg["prior.ar.steps"], batch_size=cfg["prior.ar.batch"],
            lr=cfg["prior.ar.lr"], weight_decay=cfg["prior.ar.weight_decay"],
            ema_decay=cfg["prior.ar.ema_decay"], seed=ctx.seed, verbose=True)
        pl.save_ar_prior(ctx.paths.prior_ar, model, ema)
        pl._write_losses(ctx.paths.out / "prior_ar_loss.csv", losses)
        print(f"saved {ctx.paths.prior_ar} (K={model.k})")
    else:
        model, ema, losses = pr.train_diffusion_prior(
            pl.diffusion_prior_config(cfg), ctx.records(), ctx.clip_model(),
            steps=cfg["prior.diffusion.steps"],
            batch_size=cfg["prior.diffusion.batch"], lr=cfg["prior.diffusion.lr"],
            weight_decay=cfg["prior.diffusion.weight_decay"],
            ema_decay=cfg["prior.diffusion.ema_decay"], seed=ctx.seed,
            verbose=True)
        pl.save_diffusion_prior(ctx.paths.prior_diffusion, model, ema)
        pl._write_losses(ctx.paths.out / "prior_diffusion_loss.csv", losses)
        print(f"saved {ctx.paths.prior_diffusion} (scale={model.input_scale:.3f})")
    return 0


def _sidecar(path: Path, **fields) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in fields.items()))


def _cmd_sample(args) -> int:
    ctx = CliContext(args)
    cfg = ctx.cfg
    clip_model = ctx.clip_model()
    decoder_model = ctx.decoder_model()
    ids = ds.tokenize(args.prompt)
    prompts = np.tile(ids, (args.n, 1))
    rng = np.random.default_rng(ctx.seed)
    if args.prior == "diffusion":
        prior_model = pl.load_diffusion_prior(
            ctx.need(ctx.paths.prior_diffusion, "train-prior --kind diffusion"), cfg)
        z = pr.sample_diffusion_prior(prior_model, prompts, clip_model,
                                      steps=cfg["prior.sample_steps"],
                                      guidance_scale=cfg["prior.guidance_scale"],
                                      rng=rng)
    else:
        prior_model = pl.load_ar_prior(
            ctx.need(ctx.paths.prior_ar, "train-prior --kind ar"), cfg)
        z = np.stack([
            pr.sample_ar_prior(prior_model, ids, clip_model, rng)
            for _ in range(args.n)
        ])
    imgs = dec.decode(decoder_model, z, prompts,
                      guidance_scale=cfg["decoder.guidance_scale"],
                      eta=cfg["decoder.eta"], steps=cfg["decoder.sample_steps"],
                      rng=rng)
    if args.hires:
        upsampler = pl.load_upsampler(
            ctx.need(ctx.paths.upsampler, "train-upsampler"), cfg)
        imgs = dec.upsample(upsampler, imgs, steps=cfg["upsampler.sample_steps"],
                            rng=rng)
    out_dir = ctx.paths.out / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    slug = "-".join(args.prompt.split())[:48]
    grid = out_dir / f"{slug}.png"
    imageio.save_grid(grid, list(imgs), ncols=min(4, args.n))
    _sidecar(grid.with_suffix(".txt"), prompt=args.prompt, seed=ctx.seed,
             prior=args.prior, guidance=cfg["decoder.guidance_scale"],
             eta=cfg["decoder.eta"], steps=cfg["decoder.sample_steps"],
             hires=args.hires)
    print(f"wrote {grid}")
    return 0


def _cmd_variations(args) -> int:
    ctx = CliContext(args)
    records = ctx.records("eval")
    rec = records[args.index]
    imgs = man.variations(rec.image, eta=args.eta, n=args.n,
                          rng=np.random.default_rng(ctx.seed),
                          clip_model=ctx.clip_model(),
                          decoder_model=ctx.decoder_model(),
                          steps=ctx.cfg["manipulate.invert_steps"])
    out = ctx.paths.out / f"variations_{args.index}.png"
    imageio.save_grid(out, [rec.image] + list(imgs), ncols=args.n + 1)
    _sidecar(out.with_suffix(".txt"), index=args.index, eta=args.eta, n=args.n,
             seed=ctx.seed, caption=ds.detokenize(rec.caption))
    print(f"wrote {out}")
    return 0


def _cmd_interpolate(args) -> int:
    ctx = CliContext(args)
    records = ctx.records("eval")
    a, b = records[args.index_a], records[args.index_b]
    frames = man.interpolate(a.image, b.image, ctx.cfg["manipulate.frames"],
                             args.latent_mode, np.random.default_rng(ctx.seed),
                             ctx.clip_model(), ctx.decoder_model(),
                             steps=ctx.cfg["manipulate.invert_steps"])
    out = ctx.paths.out / f"interp_{args.index_a}_{args.index_b}_{args.latent_mode}.png"
    imageio.save_grid(out, list(frames), ncols=len(frames))
    _sidecar(out.with_suffix(".txt"), index_a=args.index_a, index_b=args.index_b,
             mode=args.latent_mode, seed=ctx.seed)
    print(f"wrote {out}")
    return 0


def _cmd_textdiff(args) -> int:
    ctx = CliContext(args)
    records = ctx.records("eval")
    rec = records[args.index]
    base = (ds.tokenize(args.from_caption) if args.from_caption
            else rec.caption)
    target = ds.tokenize(args.to)
    max_theta = args.max_theta or ctx.cfg["manipulate.max_theta"]
    thetas = man.default_thetas(max_theta, ctx.cfg["manipulate.frames"])
    frames = man.text_diff(rec.image, base, target, thetas, ctx.clip_model(),
                           ctx.decoder_model(),
                           steps=ctx.cfg["manipulate.invert_steps"])
    out = ctx.paths.out / f"textdiff_{args.index}.png"
    imageio.save_grid(out, list(frames), ncols=len(frames))
    _sidecar(out.with_suffix(".txt"), index=args.index,
             from_caption=ds.detokenize(base), to_caption=args.to,
             thetas=",".join(f"{t:.3f}" for t in thetas), seed=ctx.seed)
    print(f"wrote {out}")
    return 0


def _cmd_probe_pca(args) -> int:
    ctx = CliContext(args)
    records = ctx.records("eval")
    rec = records[args.index]
    prior_model = pl.load_ar_prior(
        ctx.need(ctx.paths.prior_ar, "train-prior --kind ar"), ctx.cfg)
    ks = [int(v) for v in args.ks.split(",")]
    ks = [min(k, prior_model.pca.k_max) for k in ks]
    frames = man.pca_probe(rec.image, ks, prior_model.pca, ctx.clip_model(),
                           ctx.decoder_model(), seed=ctx.seed,
                           steps=ctx.cfg["manipulate.invert_steps"])
    out = ctx.paths.out / f"pca_probe_{args.index}.png"
    imageio.save_grid(out, list(frames) + [rec.image], ncols=len(ks) + 1)
    _sidecar(out.with_suffix(".txt"), index=args.index,
             ks=",".join(map(str, ks)), seed=ctx.seed)
    print(f"wrote {out}")
    return 0


def _cmd_eval(args) -> int:
    ctx = CliContext(args)
    cfg = ctx.cfg
    clip_model = ctx.clip_model()
    eval_records = ctx.records("eval")
    rows = [("retrieval_top1", cl.retrieval_top1(clip_model, eval_records))]

    decoder_model = ctx.decoder_model()
    n_recon = min(cfg["eval.recon_images"], len(eval_records))
    psnrs = []
    for rec in eval_records[:n_recon]:
        z = cl.embed_image(clip_model, rec.image)
        x_T = dec.invert(decoder_model, rec.image[None], z[None],
                         steps=cfg["manipulate.invert_steps"])
        out = dec.decode(decoder_model, z[None], None, guidance_scale=1.0,
                         eta=0.0, steps=cfg["manipulate.invert_steps"],
                         rng=np.random.default_rng(0), x_T=x_T)[0]
        psnrs.append(mt.psnr(rec.image, out))
    rows.append(("reconstruction_psnr_db", float(np.mean(psnrs))))

    if ctx.paths.prior_diffusion.exists():
        prior_model = pl.load_diffusion_prior(ctx.paths.prior_diffusion, cfg)
        n = min(cfg["eval.prompts"], len(eval_records))
        prompts = ds.stack_captions(eval_records[:n])
        rng = np.random.default_rng(ctx.seed)
        z = pr.sample_diffusion_prior(prior_model, prompts, clip_model,
                                      steps=cfg["prior.sample_steps"], rng=rng)
        imgs = dec.decode(decoder_model, z, prompts,
                          guidance_scale=cfg["decoder.guidance_scale"],
                          eta=cfg["decoder.eta"],
                          steps=cfg["decoder.sample_steps"], rng=rng)
        rows.append(("prior_clip_score", mt.clip_score(imgs, prompts, clip_model)))
        real = mt.fit_gaussian(cl.embed_image(
            clip_model, ds.stack_images(eval_records[:n])))
        fake = mt.fit_gaussian(cl.embed_image(clip_model, imgs))
        rows.append(("prior_frechet", mt.frechet_distance(real, fake)))

    out = ctx.paths.out / "eval.csv"
    with open(out, "w") as f:
        f.write("metric,value\n")
        for name, value in rows:
            f.write(f"{name},{value:.6f}\n")
            print(f"{name}: {value:.4f}")
    print(f"wrote {out}")
    return 0


def _cmd_sweep(args) -> int:
    ctx = CliContext(args)
    cfg = ctx.cfg
    clip_model = ctx.clip_model()
    decoder_model = ctx.decoder_model(caption_only=args.caption_only)
    eval_records = ctx.records("eval")
    n = min(args.prompts, len(eval_records))
    prompts = ds.stack_captions(eval_records[:n])
    scales = [float(v) for v in args.scales.split(",")]
    rng = np.random.default_rng(ctx.seed)
    z = None
    if not args.caption_only:
        prior_model = pl.load_diffusion_prior(
            ctx.need(ctx.paths.prior_diffusion, "train-prior --kind diffusion"), cfg)
        z = pr.sample_diffusion_prior(prior_model, prompts, clip_model,
                                      steps=cfg["prior.sample_steps"], rng=rng)
    real = mt.fit_gaussian(cl.embed_image(clip_model, ds.stack_images(eval_records[:n])))
    rows = mt.guidance_sweep(decoder_model, clip_model, prompts, scales, rng,
                             real, z_rows=z,
                             sample_steps=cfg["decoder.sample_steps"])
    tag = "caption_only" if args.caption_only else "unclip"
    csv_path = ctx.paths.out / f"sweep_{tag}.csv"
    mt.write_sweep_csv(csv_path, rows)
    mt.write_svg_lineplot(ctx.paths.out / f"sweep_{tag}.svg",
                          [r.scale for r in rows],
                          {"frechet": [r.frechet for r in rows],
                           "clip_score": [r.clip_score for r in rows]},
                          title=f"guidance sweep ({tag})")
    for r in rows:
        print(f"scale {r.scale:g}: frechet {r.frechet:.4f} clip_score {r.clip_score:.4f}")
    print(f"wrote {csv_path}")
    return 0


def _cmd_pipeline(args) -> int:
    ctx = CliContext(args)
    pl.run_pipeline(ctx.cfg, ctx.paths.out, ctx.seed)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-clip": _cmd_train_clip,
    "train-decoder": _cmd_train_decoder,
    "train-upsampler": _cmd_train_upsampler,
    "train-prior": _cmd_train_prior,
    "sample": _cmd_sample,
    "variations": _cmd_variations,
    "interpolate": _cmd_interpolate,
    "textdiff": _cmd_textdiff,
    "probe-pca": _cmd_probe_pca,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "pipeline": _cmd_pipeline,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError, IOError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
