"""Null-condition registries and relational guidance composition.

During training each condition slot is replaced by a null latent with fixed
probability; the nulls are indexed by the target's age group and gender (nine
age bins, two genders, 18 entries). At inference the per-condition directions
(conditional minus unconditional prediction) are scaled independently and
added back onto the unconditional prediction, trading fidelity against
diversity per condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import TaskArrangement
from .errors import ConfigError, DimensionError, RangeError
from .latent import (
    N_AGE_BINS,
    SyntheticWorld,
    age_bin_index,
    age_bin_midpoint,
    apply_attributes_batch,
    sample_prior_batch,
)
from .denoiser import DenoiserParams, denoise, denoise_batch
from .tensor import Tensor

N_NULL_ENTRIES = N_AGE_BINS * 2


@dataclass(frozen=True)
class GuidanceScales:
    g1: float = 1.2
    g2: float = 1.2

    def __post_init__(self):
        for g in (self.g1, self.g2):
            if not np.isfinite(g) or g < 0:
                raise ConfigError(f"guidance scales must be finite and >= 0, got {g}")


def default_scales(task: TaskArrangement) -> GuidanceScales:
    """Inference defaults: both parents at 1.2 for child prediction; for
    partner prediction 1.2 on the child condition and 0 on the parent."""
    if task is TaskArrangement.CHILD:
        return GuidanceScales(1.2, 1.2)
    return GuidanceScales(1.2, 0.0)


class NullConditionRegistry:
    """18 null latents (age bin x gender); learned entries are trainable."""

    def __init__(self, mode: str, table: Tensor):
        if mode not in ("mean", "learned"):
            raise ConfigError(f"unknown null mode {mode!r}")
        if table.ndim != 2 or table.shape[0] != N_NULL_ENTRIES:
            raise DimensionError(
                f"null table shape {table.shape} != ({N_NULL_ENTRIES}, total_dim)"
            )
        self.mode = mode
        self.table = table

    @property
    def total_dim(self) -> int:
        return self.table.shape[1]

    @staticmethod
    def entry_index(age: float, gender: int) -> int:
        if not (0.0 <= age <= 1.0):
            raise RangeError(f"age {age} outside [0, 1]")
        return age_bin_index(age) * 2 + int(gender)

    def entry_indices(self, ages: np.ndarray, genders: np.ndarray) -> np.ndarray:
        return np.array(
            [self.entry_index(float(a), int(g)) for a, g in zip(ages, genders)],
            dtype=np.intp,
        )

    def null_for(self, age: float, gender: int) -> np.ndarray:
        return self.table.data[self.entry_index(age, gender)].copy()

    def as_learned(self) -> "NullConditionRegistry":
        """Trainable copy warm-started at the current entries."""
        return NullConditionRegistry(
            "learned", Tensor(self.table.data.copy(), requires_grad=True)
        )


def build_mean_nulls(
    world: SyntheticWorld, n_samples: int, rng: np.random.Generator
) -> NullConditionRegistry:
    """Empirical means: per combo, average prior draws retargeted to the
    combo's midpoint age and gender."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    table = np.empty((N_NULL_ENTRIES, world.spec.total_dim))
    for b in range(N_AGE_BINS):
        mid = age_bin_midpoint(b)
        for gender in (0, 1):
            draws = sample_prior_batch(world, rng, n_samples)
            edited = apply_attributes_batch(
                world,
                draws,
                np.full(n_samples, mid),
                np.full(n_samples, gender),
            )
            table[b * 2 + gender] = edited.mean(axis=0)
    return NullConditionRegistry("mean", Tensor(table))


def rtg_compose_batch(
    params: DenoiserParams,
    x_t: np.ndarray,
    ts: np.ndarray,
    cond1: np.ndarray,
    cond2: np.ndarray,
    scales: GuidanceScales,
    null1: np.ndarray,
    null2: np.ndarray,
) -> np.ndarray:
    """Scaled composition of per-condition directions, evaluated in one
    stacked denoiser call (three or fewer branch evaluations)."""
    b = x_t.shape[0]
    c1s, c2s, k = branch_conditions(cond1, cond2, null1, null2, scales)
    xs = np.concatenate([x_t] * k, axis=0)
    tss = np.concatenate([ts] * k)
    preds = denoise_batch(params, xs, tss, c1s, c2s).data
    return compose_predictions(preds, b, scales)


def branch_conditions(
    cond1: np.ndarray,
    cond2: np.ndarray,
    null1: np.ndarray,
    null2: np.ndarray,
    scales: GuidanceScales,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Stacked (cond1, cond2) rows for the evaluations the composition needs:
    the unconditional base plus one single-condition branch per nonzero scale."""
    stacks = [(null1, null2)]
    if scales.g1 != 0.0:
        stacks.append((cond1, null2))
    if scales.g2 != 0.0:
        stacks.append((null1, cond2))
    c1s = np.concatenate([s[0] for s in stacks], axis=0)
    c2s = np.concatenate([s[1] for s in stacks], axis=0)
    return c1s, c2s, len(stacks)


def compose_predictions(
    preds: np.ndarray, b: int, scales: GuidanceScales
) -> np.ndarray:
    """Combine stacked branch predictions as (1-g1-g2)*base + g1*b1 + g2*b2.

    This is the per-condition direction form rearranged so a degenerate scale
    pair reduces exactly to the corresponding single branch."""
    base = preds[:b]
    out = (1.0 - scales.g1 - scales.g2) * base
    k = 1
    if scales.g1 != 0.0:
        out += scales.g1 * preds[k * b : (k + 1) * b]
        k += 1
    if scales.g2 != 0.0:
        out += scales.g2 * preds[k * b : (k + 1) * b]
    return out


def rtg_compose(
    params: DenoiserParams,
    x_t: np.ndarray,
    t: int,
    cond1: np.ndarray,
    cond2: np.ndarray,
    scales: GuidanceScales,
    null1: np.ndarray,
    null2: np.ndarray,
) -> np.ndarray:
    return rtg_compose_batch(
        params,
        np.asarray(x_t, dtype=np.float64)[None, :],
        np.array([t]),
        np.asarray(cond1, dtype=np.float64)[None, :],
        np.asarray(cond2, dtype=np.float64)[None, :],
        scales,
        np.asarray(null1, dtype=np.float64)[None, :],
        np.asarray(null2, dtype=np.float64)[None, :],
    )[0]
