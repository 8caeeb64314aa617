"""Noise schedules, forward noising, prediction-space conversions, DDIM
stepping with stochasticity eta, DDIM inversion, and classifier-free guidance
combination. Shared by the image decoder, the upsampler, and the embedding
prior.

Chain state and schedule constants are float64 so the algebraic identities
(eps/x0 inversion, the eta=1 posterior-std match) hold to tight tolerance;
model calls cast to float32 at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray       # (T,) float64, betas[i] is beta_{i+1}
    alpha_bars: np.ndarray  # (T+1,) float64, alpha_bars[0] == 1.0

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[np.asarray(t)]


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    """Cosine (squared-cosine ramp) or linear beta schedule with T steps.

    alpha_bars is recomputed as the cumulative product of (1 - beta), so the
    defining identity holds exactly rather than only up to clipping.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "cosine":
        s = 0.008
        ts = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((ts + s) / (1 + s) * math.pi / 2.0) ** 2
        abar = f / f[0]
        betas = 1.0 - abar[1:] / abar[:-1]
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.clip(betas, 1e-8, 0.999)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind=kind, T=T, betas=betas, alpha_bars=alpha_bars)


@dataclass
class BipartiteLatent:
    """(z_i, x_T): the embedding the encoder kept plus the DDIM-inverted
    residual noise; together they pin down a reconstruction."""

    z_i: np.ndarray
    x_T: np.ndarray


def _coeffs(schedule: NoiseSchedule, t, ndim: int):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError(f"t out of range [0, {schedule.T}]: {t}")
    ab = schedule.alpha_bars[t]
    while ab.ndim < ndim:
        ab = ab[..., None]
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    t may be a scalar or a per-example array; t=0 is the identity edge.
    """
    if np.shape(noise) != np.shape(x0):
        raise ValueError(f"q_sample: noise shape {np.shape(noise)} != x0 {np.shape(x0)}")
    a, b = _coeffs(schedule, t, np.ndim(x0))
    return a * np.asarray(x0, np.float64) + b * np.asarray(noise, np.float64)


_SQRT_AB_FLOOR = 1e-8


def eps_to_x0(schedule: NoiseSchedule, x_t: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    a, b = _coeffs(schedule, t, np.ndim(x_t))
    return (np.asarray(x_t, np.float64) - b * np.asarray(eps, np.float64)) / np.maximum(
        a, _SQRT_AB_FLOOR
    )


def x0_to_eps(schedule: NoiseSchedule, x_t: np.ndarray, t, x0: np.ndarray) -> np.ndarray:
    a, b = _coeffs(schedule, t, np.ndim(x_t))
    return (np.asarray(x_t, np.float64) - a * np.asarray(x0, np.float64)) / np.maximum(
        b, _SQRT_AB_FLOOR
    )


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t_prev]
    return float(
        eta
        * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
        * math.sqrt(1.0 - ab_t / ab_prev)
    )


def ddim_step(
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    pred_eps: np.ndarray,
    eta: float,
    noise: np.ndarray | None = None,
    t_prev: int | None = None,
    clip_x0: bool = False,
) -> np.ndarray:
    """One reverse step t -> t_prev (default t-1). eta=0 is deterministic and
    ignores `noise`; eta=1 matches the ancestral posterior noise level.

    clip_x0 clamps the implied clean estimate to [-1, 1] before stepping;
    image chains need this near t=T, where 1/sqrt(alpha_bar) amplifies any
    prediction error by orders of magnitude."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t out of range [1, {schedule.T}]: {t}")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must be in [0, {t}), got {t_prev}")
    x0 = eps_to_x0(schedule, x_t, t, pred_eps)
    if clip_x0:
        x0 = np.clip(x0, -1.0, 1.0)
    ab_prev = schedule.alpha_bars[t_prev]
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = math.sqrt(ab_prev) * x0 + dir_coeff * np.asarray(pred_eps, np.float64)
    if sigma > 0.0:
        if noise is None:
            raise ValueError("ddim_step: eta > 0 requires noise")
        out = out + sigma * np.asarray(noise, np.float64)
    return out


def cfg_combine(uncond_pred: np.ndarray, cond_pred: np.ndarray, scale: float) -> np.ndarray:
    """uncond + scale * (cond - uncond); scale 0 and 1 return the inputs."""
    if np.shape(uncond_pred) != np.shape(cond_pred):
        raise ValueError(
            f"cfg_combine: shapes {np.shape(uncond_pred)} != {np.shape(cond_pred)}"
        )
    if scale < 0:
        raise ValueError(f"cfg_combine: scale must be >= 0, got {scale}")
    u = np.asarray(uncond_pred, np.float64)
    return u + scale * (np.asarray(cond_pred, np.float64) - u)


def strided_timesteps(T: int, steps: int) -> list[int]:
    """`steps` timesteps evenly spaced over [1, T], descending, endpoints kept."""
    if steps > T:
        raise ValueError(f"steps {steps} exceeds schedule length {T}")
    if steps == 1:
        return [T]
    ts = np.linspace(T, 1, steps)
    out = [int(round(v)) for v in ts]
    assert out[0] == T and out[-1] == 1 and len(set(out)) == len(out)
    return out


def sample_loop(
    schedule: NoiseSchedule,
    model_fn,
    shape: tuple[int, ...],
    steps: int,
    eta: float,
    rng: np.random.Generator,
    guidance_scale: float = 1.0,
    uncond_fn=None,
    x_start: np.ndarray | None = None,
    clamp: bool = True,
) -> np.ndarray:
    """Run the strided reverse chain from x_T ~ N(0,1) (or `x_start`).

    model_fn(x_f32, t) predicts eps for the conditional branch; uncond_fn,
    required when guidance_scale != 1, predicts the unconditional branch.
    `clamp` bounds the implied clean estimate each step and the final output
    to [-1, 1] (image chains); embedding chains run unclamped.
    Deterministic given rng state and x_start.
    """
    if guidance_scale != 1.0 and uncond_fn is None:
        raise ValueError("sample_loop: guidance needs an unconditional branch")
    ts = strided_timesteps(schedule.T, steps)
    if x_start is not None:
        x = np.asarray(x_start, np.float64)
    else:
        x = rng.standard_normal(shape).astype(np.float64)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        x32 = x.astype(np.float32)
        eps = np.asarray(model_fn(x32, t), np.float64)
        if guidance_scale != 1.0:
            eps = cfg_combine(np.asarray(uncond_fn(x32, t), np.float64), eps,
                              guidance_scale)
        noise = None
        if eta > 0.0 and t_prev > 0:
            noise = rng.standard_normal(x.shape)
        x = ddim_step(schedule, x, t, eps, eta, noise=noise, t_prev=t_prev,
                      clip_x0=clamp)
    if clamp:
        x = np.clip(x, -1.0, 1.0)
    return x.astype(np.float32)


def ddim_invert(
    schedule: NoiseSchedule,
    model_fn,
    x0: np.ndarray,
    steps: int,
    guidance_scale: float = 1.0,
    uncond_fn=None,
    clip_x0: bool = True,
    refine: int = 2,
) -> np.ndarray:
    """Recover the x_T that the deterministic (eta=0) chain decodes back to x0.

    Runs the eta=0 update in reversed index order over the same stride as
    sampling. Each step first guesses eps at the source state, then runs
    `refine` fixed-point iterations re-evaluating eps at the provisional
    target state; the sampler evaluates there, so this keeps the two chains
    consistent where the signal-to-noise ratio is extreme. clip_x0 keeps the
    running clean estimate in [-1, 1], matching the image sampling chain.
    """
    if guidance_scale != 1.0 and uncond_fn is None:
        raise ValueError("ddim_invert: guidance needs an unconditional branch")

    def predict(x64, t):
        x32 = x64.astype(np.float32)
        eps = np.asarray(model_fn(x32, t), np.float64)
        if guidance_scale != 1.0:
            eps = cfg_combine(np.asarray(uncond_fn(x32, t), np.float64), eps,
                              guidance_scale)
        return eps

    ts = list(reversed(strided_timesteps(schedule.T, steps)))  # ascending, ends at T
    x = np.asarray(x0, np.float64)
    s = 0
    for t in ts:
        a, b = _coeffs(schedule, t, np.ndim(x))

        def step_from(eps):
            x0_hat = eps_to_x0(schedule, x, s, eps)
            if clip_x0:
                x0_hat = np.clip(x0_hat, -1.0, 1.0)
            return a * x0_hat + b * eps

        x_next = step_from(predict(x, t))
        for _ in range(refine):
            x_next = step_from(predict(x_next, t))
        x = x_next
        s = t
    return x.astype(np.float32)
