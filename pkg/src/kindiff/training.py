"""Epoch-driven training for the denoiser and the non-diffusion regressor.

Every random draw comes from a stream derived from (seed, purpose, epoch), so
a run is bit-reproducible and resuming from an epoch-boundary checkpoint
continues the identical trajectory the uninterrupted run would have taken.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dataset import (
    ConditionDropoutPolicy,
    TaskArrangement,
    TripletDataset,
    arrange_dataset,
    dropout_masks,
)
from .denoiser import DenoiserConfig, DenoiserParams, denoise_batch, init_denoiser_params
from .diffusion import DiffusionSchedule, TrainBatch, train_step, regression_step
from .errors import NumericFailure
from .guidance import NullConditionRegistry
from .latent import SyntheticWorld
from .optim import OptimizerState
from .rng import rng_for
from .tensor import Tensor, mse_loss, mul, no_grad, take_rows


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    epochs: int = 40
    min_epochs: int = 4
    patience: int = 5
    plateau_tol: float = 1e-3
    heldout_frac: float = 0.1
    seed: int = 0


@dataclass
class TrainResult:
    params: DenoiserParams
    registry: NullConditionRegistry | None
    opt_state: OptimizerState
    step_log: list[tuple[int, float, float, float]]  # (step, loss, lr, wall_time)
    epoch_log: list[tuple[int, float, float]]        # (epoch, train_loss, heldout_loss)
    epochs_run: int
    heldout_indices: np.ndarray


def split_indices(n: int, heldout_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = rng_for(seed, "heldout-split").permutation(n)
    n_held = int(round(heldout_frac * n))
    return perm[n_held:], perm[:n_held]


def _cond_with_nulls(
    rows: np.ndarray,
    drop: np.ndarray,
    null_idx: np.ndarray,
    registry: NullConditionRegistry,
):
    """Condition batch with dropped slots replaced by their registry entries.

    For learned nulls the substitution goes through the tape so gradients
    reach exactly the rows that were substituted.
    """
    if registry.mode == "learned" and drop.any():
        m = drop.astype(np.float64)[:, None]
        base = Tensor(rows * (1.0 - m))
        return base + mul(take_rows(registry.table, null_idx), Tensor(m))
    if drop.any():
        out = rows.copy()
        out[drop] = registry.table.data[null_idx[drop]]
        return out
    return rows


def train_denoiser(
    ds: TripletDataset,
    task: TaskArrangement,
    world: SyntheticWorld,
    den_cfg: DenoiserConfig,
    schedule: DiffusionSchedule,
    policy: ConditionDropoutPolicy,
    registry: NullConditionRegistry,
    tcfg: TrainingConfig,
    on_epoch_end=None,
    start_state: tuple[DenoiserParams, OptimizerState, int] | None = None,
) -> TrainResult:
    """x0-target MSE training with condition dropout and plateau stopping.

    ``on_epoch_end(epoch, result_so_far)`` supports checkpoint cadence;
    ``start_state`` resumes from an epoch boundary.
    """
    cond1_all, cond2_all, target_all, ages, genders = arrange_dataset(ds, task, world)
    null_idx_all = registry.entry_indices(ages, genders)
    train_idx, held_idx = split_indices(len(ds), tcfg.heldout_frac, tcfg.seed)

    if start_state is None:
        params = init_denoiser_params(den_cfg, rng_for(tcfg.seed, "init"))
        extra = [registry.table] if registry.mode == "learned" else []
        state = OptimizerState(
            lr=tcfg.lr,
            beta1=tcfg.beta1,
            beta2=tcfg.beta2,
            eps=tcfg.opt_eps,
            weight_decay=tcfg.weight_decay,
        ).init_for(params.parameter_list() + extra)
        first_epoch = 0
    else:
        params, state, first_epoch = start_state
        extra = [registry.table] if registry.mode == "learned" else []

    # fixed held-out noise draws keep the plateau curve comparable across epochs
    hrng = rng_for(tcfg.seed, "heldout-noise")
    held_ts = hrng.integers(1, schedule.timesteps + 1, len(held_idx))
    held_eps = hrng.standard_normal((len(held_idx), ds.fathers.shape[1]))
    held_d1, held_d2 = dropout_masks(policy, hrng, len(held_idx))

    step_log: list[tuple[int, float, float, float]] = []
    epoch_log: list[tuple[int, float, float]] = []
    best_held = np.inf
    stall = 0
    t_start = time.perf_counter()
    global_step = first_epoch * ((len(train_idx) + tcfg.batch_size - 1) // tcfg.batch_size)

    epoch = first_epoch
    for epoch in range(first_epoch, tcfg.epochs):
        erng = rng_for(tcfg.seed, "epoch", epoch)
        order = train_idx[erng.permutation(len(train_idx))]
        epoch_losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            idx = order[lo : lo + tcfg.batch_size]
            b = len(idx)
            ts = erng.integers(1, schedule.timesteps + 1, b)
            eps = erng.standard_normal((b, ds.fathers.shape[1]))
            d1, d2 = dropout_masks(policy, erng, b)
            nids = null_idx_all[idx]
            batch = TrainBatch(
                cond1=_cond_with_nulls(cond1_all[idx], d1, nids, registry),
                cond2=_cond_with_nulls(cond2_all[idx], d2, nids, registry),
                target=target_all[idx],
                ts=ts,
                eps=eps,
            )
            loss = train_step(
                params, batch, schedule, state,
                extra_params=extra, step_index=global_step,
            )
            step_log.append(
                (global_step, loss, state.lr, time.perf_counter() - t_start)
            )
            epoch_losses.append(loss)
            global_step += 1

        held_loss = _heldout_loss(
            params, registry, schedule,
            cond1_all[held_idx], cond2_all[held_idx], target_all[held_idx],
            held_ts, held_eps, held_d1, held_d2, null_idx_all[held_idx],
        )
        epoch_log.append((epoch, float(np.mean(epoch_losses)), held_loss))
        result = TrainResult(
            params, registry, state, step_log, epoch_log, epoch + 1, held_idx
        )
        if on_epoch_end is not None:
            on_epoch_end(epoch, result)
        if held_loss < best_held * (1.0 - tcfg.plateau_tol):
            best_held = held_loss
            stall = 0
        else:
            stall += 1
            if epoch + 1 >= tcfg.min_epochs and stall >= tcfg.patience:
                break

    return TrainResult(params, registry, state, step_log, epoch_log, epoch + 1, held_idx)


def _heldout_loss(
    params, registry, schedule, c1, c2, target, ts, eps, d1, d2, nids
) -> float:
    from .diffusion import forward_noise

    if len(target) == 0:
        return float("nan")
    c1 = c1.copy()
    c2 = c2.copy()
    c1[d1] = registry.table.data[nids[d1]]
    c2[d2] = registry.table.data[nids[d2]]
    with no_grad():
        x_t = forward_noise(target, ts, eps, schedule)
        pred = denoise_batch(params, x_t, ts, c1, c2)
        loss = mse_loss(pred, Tensor(target))
    value = loss.item()
    if not np.isfinite(value):
        raise NumericFailure(f"non-finite held-out loss {value}")
    return value


def train_regression(
    ds: TripletDataset,
    task: TaskArrangement,
    world: SyntheticWorld,
    den_cfg: DenoiserConfig,
    tcfg: TrainingConfig,
    on_epoch_end=None,
) -> TrainResult:
    """Non-diffusion arm: the same transformer regresses the target directly."""
    cond1_all, cond2_all, target_all, _, _ = arrange_dataset(ds, task, world)
    train_idx, held_idx = split_indices(len(ds), tcfg.heldout_frac, tcfg.seed)

    params = init_denoiser_params(den_cfg, rng_for(tcfg.seed, "init"))
    state = OptimizerState(
        lr=tcfg.lr,
        beta1=tcfg.beta1,
        beta2=tcfg.beta2,
        eps=tcfg.opt_eps,
        weight_decay=tcfg.weight_decay,
    ).init_for(params.parameter_list())

    step_log: list[tuple[int, float, float, float]] = []
    epoch_log: list[tuple[int, float, float]] = []
    best_held = np.inf
    stall = 0
    t_start = time.perf_counter()
    global_step = 0

    epoch = 0
    for epoch in range(tcfg.epochs):
        erng = rng_for(tcfg.seed, "epoch", epoch)
        order = train_idx[erng.permutation(len(train_idx))]
        epoch_losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            idx = order[lo : lo + tcfg.batch_size]
            loss = regression_step(
                params, cond1_all[idx], cond2_all[idx], target_all[idx],
                state, step_index=global_step,
            )
            step_log.append(
                (global_step, loss, state.lr, time.perf_counter() - t_start)
            )
            epoch_losses.append(loss)
            global_step += 1

        if len(held_idx):
            with no_grad():
                pred = denoise_batch(
                    params,
                    np.zeros_like(target_all[held_idx]),
                    np.zeros(len(held_idx), dtype=int),
                    cond1_all[held_idx],
                    cond2_all[held_idx],
                )
                held_loss = mse_loss(pred, Tensor(target_all[held_idx])).item()
        else:
            held_loss = float("nan")
        epoch_log.append((epoch, float(np.mean(epoch_losses)), held_loss))
        result = TrainResult(params, None, state, step_log, epoch_log, epoch + 1, held_idx)
        if on_epoch_end is not None:
            on_epoch_end(epoch, result)
        if held_loss < best_held * (1.0 - tcfg.plateau_tol):
            best_held = held_loss
            stall = 0
        else:
            stall += 1
            if epoch + 1 >= tcfg.min_epochs and stall >= tcfg.patience:
                break

    return TrainResult(params, None, state, step_log, epoch_log, epoch + 1, held_idx)
