"""Noise schedule, forward process, deterministic DDIM, and the train step.

The denoiser predicts the clean latent, so the sampler recovers the implied
noise from the prediction at each level and re-noises to the next level with
eta = 0 (fully deterministic given the starting noise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericFailure, RangeError
from .denoiser import DenoiserParams, denoise_batch
from .guidance import GuidanceScales
from .optim import OptimizerState, grads_for, optimizer_step
from .tensor import Tensor, mse_loss


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative noise levels for T training steps plus the inference subset."""

    timesteps: int
    betas: np.ndarray
    alpha_bars: np.ndarray           # alpha_bars[t-1] = prod_{s<=t}(1 - beta_s)
    inference_steps: tuple[int, ...]

    def __post_init__(self):
        ab = self.alpha_bars
        if len(ab) != self.timesteps or len(self.betas) != self.timesteps:
            raise ConfigError("schedule arrays must have length T")
        if not (np.all(np.diff(ab) < 0) and ab[0] < 1.0 and ab[-1] > 0.0):
            raise ConfigError("alpha-bar sequence must decrease inside (0, 1)")
        steps = self.inference_steps
        if (
            len(steps) < 1
            or any(s2 <= s1 for s1, s2 in zip(steps, steps[1:]))
            or steps[0] < 1
            or steps[-1] != self.timesteps
        ):
            raise ConfigError(
                "inference steps must strictly increase within 1..T and include T"
            )

    def alpha_bar(self, t) -> np.ndarray | float:
        """alpha-bar with the t=0 extension alpha_bar(0) = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.timesteps):
            raise RangeError(f"timestep {t} outside [0, {self.timesteps}]")
        padded = np.concatenate(([1.0], self.alpha_bars))
        out = padded[t]
        return float(out) if out.ndim == 0 else out


def linear_schedule(
    timesteps: int = 500,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    n_inference: int = 50,
) -> DiffusionSchedule:
    betas = np.linspace(beta_start, beta_end, timesteps)
    return DiffusionSchedule(
        timesteps=timesteps,
        betas=betas,
        alpha_bars=np.cumprod(1.0 - betas),
        inference_steps=inference_subsequence(timesteps, n_inference),
    )


def inference_subsequence(timesteps: int, n: int) -> tuple[int, ...]:
    """n near-evenly spaced levels of 1..T with both endpoints included."""
    if not (1 <= n <= timesteps):
        raise ConfigError(f"need 1 <= inference steps <= {timesteps}, got {n}")
    if n == 1:
        return (timesteps,)
    pts = np.unique(np.round(np.linspace(1, timesteps, n)).astype(int))
    return tuple(int(p) for p in pts)


def forward_noise(x0, t, eps, schedule: DiffusionSchedule):
    """Reparameterized forward draw sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    Vectorized: with 2-d inputs, ``t`` may be one level per row.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and eps {eps.shape} disagree")
    ab = schedule.alpha_bar(t)
    if np.ndim(ab) == 1:
        ab = np.asarray(ab)[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_step(x_t, x0_hat, t: int, t_prev: int, schedule: DiffusionSchedule):
    """One deterministic step: invert the implied noise, re-noise at t_prev."""
    if not (0 <= t_prev < t <= schedule.timesteps):
        raise RangeError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    eps_hat = (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * eps_hat


def sample_batch(
    params: DenoiserParams,
    cond1: np.ndarray,
    cond2: np.ndarray,
    scales: GuidanceScales,
    null1: np.ndarray,
    null2: np.ndarray,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    steps: int | None = None,
) -> np.ndarray:
    """Guided DDIM from pure noise; deterministic given the rng state.

    The branch condition stream is fixed across noise levels, so its token
    and key/value projections are computed once per chunk and reused at every
    step. Trajectories are independent, so the batch runs in cache-friendly
    chunks; the starting noise is drawn up front for the whole batch.
    """
    from .denoiser import precompute_condition_cache
    from .guidance import branch_conditions, compose_predictions
    from .tensor import no_grad

    seq = (
        schedule.inference_steps
        if steps is None
        else inference_subsequence(schedule.timesteps, steps)
    )
    levels = list(seq)[::-1] + [0]
    b, dim = cond1.shape
    x_start = rng.standard_normal((b, dim))
    out = np.empty_like(x_start)
    chunk = 50
    with no_grad():
        for lo in range(0, b, chunk):
            hi = min(b, lo + chunk)
            cb = hi - lo
            c1s, c2s, k = branch_conditions(
                cond1[lo:hi], cond2[lo:hi], null1[lo:hi], null2[lo:hi], scales
            )
            cache = precompute_condition_cache(params, c1s, c2s)
            x = x_start[lo:hi].copy()
            for t, t_prev in zip(levels[:-1], levels[1:]):
                ts = np.full(k * cb, t, dtype=int)
                preds = denoise_batch(
                    params, np.concatenate([x] * k, axis=0), ts, cond_cache=cache
                ).data
                x0_hat = compose_predictions(preds, cb, scales)
                x = ddim_step(x, x0_hat, t, t_prev, schedule)
            out[lo:hi] = x
    return out


def sample(
    params: DenoiserParams,
    cond1: np.ndarray,
    cond2: np.ndarray,
    scales: GuidanceScales,
    null1: np.ndarray,
    null2: np.ndarray,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    steps: int | None = None,
) -> np.ndarray:
    out = sample_batch(
        params,
        np.asarray(cond1, dtype=np.float64)[None, :],
        np.asarray(cond2, dtype=np.float64)[None, :],
        scales,
        np.asarray(null1, dtype=np.float64)[None, :],
        np.asarray(null2, dtype=np.float64)[None, :],
        schedule,
        rng,
        steps,
    )
    return out[0]


@dataclass
class TrainBatch:
    """Arranged examples with dropout applied, plus sampled noise levels."""

    cond1: Tensor | np.ndarray
    cond2: Tensor | np.ndarray
    target: np.ndarray
    ts: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        n = len(self.target)
        if not (len(self.ts) == n == len(self.eps)):
            raise DimensionError("train batch arrays must have equal length")


def train_step(
    params: DenoiserParams,
    batch: TrainBatch,
    schedule: DiffusionSchedule,
    state: OptimizerState,
    extra_params: list[Tensor] | None = None,
    step_index: int = 0,
) -> float:
    """One x0-target MSE step; aborts loudly on a non-finite loss."""
    plist = params.parameter_list() + list(extra_params or [])
    x_t = forward_noise(batch.target, batch.ts, batch.eps, schedule)
    pred = denoise_batch(params, x_t, batch.ts, batch.cond1, batch.cond2)
    loss = mse_loss(pred, Tensor(batch.target))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericFailure(f"non-finite loss {value} at step {step_index}")
    for p in plist:
        p.zero_grad()
    loss.backward()
    optimizer_step(plist, grads_for(plist), state)
    return value


def regression_step(
    params: DenoiserParams,
    cond1,
    cond2,
    target: np.ndarray,
    state: OptimizerState,
    step_index: int = 0,
) -> float:
    """Non-diffusion arm: regress the target from a zero latent at level 0."""
    plist = params.parameter_list()
    zeros = np.zeros_like(target)
    ts = np.zeros(len(target), dtype=int)
    pred = denoise_batch(params, zeros, ts, cond1, cond2)
    loss = mse_loss(pred, Tensor(target))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericFailure(f"non-finite loss {value} at step {step_index}")
    for p in plist:
        p.zero_grad()
    loss.backward()
    optimizer_step(plist, grads_for(plist), state)
    return value


def regression_predict(
    params: DenoiserParams, cond1: np.ndarray, cond2: np.ndarray
) -> np.ndarray:
    """Deterministic one-shot prediction (same transformer, zero latent, t=0)."""
    from .tensor import no_grad

    with no_grad():
        out = denoise_batch(
            params,
            np.zeros_like(cond1),
            np.zeros(len(cond1), dtype=int),
            cond1,
            cond2,
        )
    return out.data
