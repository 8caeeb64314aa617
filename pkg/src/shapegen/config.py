"""Flat key=value configuration with typed defaults.

Config files are plain text, one `key = value` per line, '#' comments. CLI
flags override file values. Unknown keys are rejected up front, and every run
writes its fully resolved configuration next to its outputs.
"""

from __future__ import annotations

from pathlib import Path

# every tunable, its desk-scale default, and (implicitly) its type
DEFAULTS: dict[str, object] = {
    "data.n_train": 4096,
    "data.n_eval": 256,
    "clip.steps": 2000,
    "clip.batch": 32,
    "clip.lr": 3e-4,
    "clip.conv_channels": 32,
    "clip.text_width": 64,
    "clip.text_depth": 2,
    "clip.text_heads": 4,
    "clip.ema_decay": 0.999,
    "decoder.steps": 3000,
    "decoder.batch": 24,
    "decoder.lr": 1e-3,
    "decoder.base_channels": 24,
    "decoder.channel_multipliers": "1,2",
    "decoder.resblocks_per_stage": 1,
    "decoder.attention_resolutions": "8",
    "decoder.cond_width": 64,
    "decoder.time_width": 128,
    "decoder.text_depth": 2,
    "decoder.text_heads": 4,
    "decoder.embed_drop": 0.1,
    "decoder.caption_drop": 0.5,
    "decoder.schedule": "cosine",
    "decoder.diffusion_steps": 100,
    "decoder.ema_decay": 0.999,
    "decoder.guidance_scale": 2.0,
    "decoder.sample_steps": 50,
    "decoder.eta": 0.0,
    "upsampler.steps": 1500,
    "upsampler.batch": 16,
    "upsampler.lr": 1e-3,
    "upsampler.base_channels": 24,
    "upsampler.channel_multipliers": "1,2",
    "upsampler.resblocks_per_stage": 1,
    "upsampler.time_width": 128,
    "upsampler.blur_kernel": 3,
    "upsampler.blur_sigma": 0.6,
    "upsampler.schedule": "cosine",
    "upsampler.diffusion_steps": 100,
    "upsampler.ema_decay": 0.999,
    "upsampler.sample_steps": 15,
    "prior.width": 128,
    "prior.depth": 3,
    "prior.heads": 4,
    "prior.buckets_per_dim": 64,
    "prior.dot_buckets": 64,
    "prior.text_drop": 0.1,
    "prior.ar.steps": 2000,
    "prior.ar.batch": 32,
    "prior.ar.lr": 1e-3,
    "prior.ar.weight_decay": 0.04,
    "prior.ar.ema_decay": 0.999,
    "prior.diffusion.steps": 2500,
    "prior.diffusion.batch": 64,
    "prior.diffusion.lr": 1e-3,
    "prior.diffusion.weight_decay": 0.06,
    "prior.diffusion.ema_decay": 0.999,
    "prior.sample_steps": 64,
    "prior.guidance_scale": 1.0,
    "prior.schedule": "cosine",
    "prior.diffusion_steps": 100,
    "pipeline.train_caption_only": True,
    "pipeline.caption_only_steps": 2000,
    "eval.prompts": 256,
    "eval.recon_images": 32,
    "manipulate.invert_steps": 100,
    "manipulate.max_theta": 0.5,
    "manipulate.frames": 8,
}


class ConfigError(ValueError):
    pass


class Config:
    def __init__(self, values: dict[str, object]):
        self._values = values

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def int_list(self, key: str) -> list[int]:
        raw = str(self[key]).strip()
        return [int(v) for v in raw.split(",") if v != ""]

    def items(self):
        return sorted(self._values.items())

    def dump(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in self.items()]
        Path(path).write_text("\n".join(lines) + "\n")


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected int, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: expected float, got {raw!r}") from e
    return raw.strip()


def parse_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_config(file_path=None, overrides: list[str] | None = None) -> Config:
    """Defaults <- optional file <- CLI key=value overrides; unknown keys fail."""
    values = dict(DEFAULTS)
    raw: dict[str, str] = {}
    if file_path is not None:
        raw.update(parse_config_file(file_path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return Config(values)
