"""Simulated kinship triplets and their training-time arrangements.

A triplet holds father/mother latents drawn from the world prior (opposite
genders enforced), a mixing weight w, and a child built as w*father +
(1-w)*mother before its own age/gender targets are written in. Arrangement
relabels a triplet for child prediction or either partner-prediction task;
condition dropout substitutes null latents at the rates that make guidance
possible at inference.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .container import load_container, save_container
from .errors import ConfigError, DimensionError
from .latent import (
    AGE_SCALE_YEARS,
    AttributeLabel,
    SegmentationSpec,
    SyntheticWorld,
    age_bin_midpoint,
    apply_attributes_batch,
    attribute_readout,
    make_world,
    sample_prior_batch,
)
from .rng import rng_for

FATHER_GENDER = 1
MOTHER_GENDER = 0


@dataclass(frozen=True)
class WeightDist:
    """Uniform interpolation-weight distribution, bounded inside (0, 1)."""

    low: float = 0.25
    high: float = 0.75

    def __post_init__(self):
        if not (0.0 < self.low <= self.high < 1.0):
            raise ConfigError(f"weight support [{self.low}, {self.high}] not in (0,1)")

    def sample(self, rng: np.random.Generator, n: int | None = None):
        return rng.uniform(self.low, self.high, size=n)


def desk_combos() -> np.ndarray:
    """10 ages x 2 genders; ages sit at age-group midpoints (bin 0 holds two)."""
    years = [1.0, 2.0, 6.0, 14.5, 24.5, 34.5, 44.5, 54.5, 64.5, 84.5]
    ages = [y / AGE_SCALE_YEARS for y in years]
    return np.array([(a, g) for a in ages for g in (0, 1)])


def paper_combos() -> np.ndarray:
    """200 combinations: integer ages 0-99 on the 0-1 scale, both genders."""
    ages = [y / AGE_SCALE_YEARS for y in range(100)]
    return np.array([(a, g) for a in ages for g in (0, 1)])


def combos_table(kind: str) -> np.ndarray:
    if kind == "desk":
        return desk_combos()
    if kind == "paper":
        return paper_combos()
    raise ConfigError(f"unknown combo table {kind!r}")


@dataclass
class KinshipTriplet:
    father: np.ndarray
    mother: np.ndarray
    child: np.ndarray
    father_label: AttributeLabel
    mother_label: AttributeLabel
    child_label: AttributeLabel
    weight: float


class TaskArrangement(enum.Enum):
    CHILD = "child"
    PARTNER_FATHER = "partner-father"  # target is the father
    PARTNER_MOTHER = "partner-mother"  # target is the mother


@dataclass
class TripletDataset:
    """Struct-of-arrays triplet store plus the config needed to rebuild it."""

    fathers: np.ndarray        # (n, total_dim)
    mothers: np.ndarray
    children: np.ndarray
    child_ages: np.ndarray     # (n,)
    child_genders: np.ndarray  # (n,)
    weights: np.ndarray        # (n,)
    seed: int
    w_dist: WeightDist
    group_dims: tuple[int, ...]
    world_meta: dict

    def __len__(self) -> int:
        return len(self.weights)

    def triplet(self, i: int, world: SyntheticWorld) -> KinshipTriplet:
        return KinshipTriplet(
            father=self.fathers[i],
            mother=self.mothers[i],
            child=self.children[i],
            father_label=attribute_readout(world, self.fathers[i]),
            mother_label=attribute_readout(world, self.mothers[i]),
            child_label=AttributeLabel(
                age=float(self.child_ages[i]), gender=int(self.child_genders[i])
            ),
            weight=float(self.weights[i]),
        )


def world_meta(world: SyntheticWorld) -> dict:
    return {
        "seed": world.seed,
        "prior_std": world.prior_std.tolist(),
        "age_gain": world.age_gain,
        "gender_magnitude": world.gender_magnitude,
        "group_dims": list(world.spec.group_dims),
    }


def world_from_meta(meta: dict) -> SyntheticWorld:
    spec = SegmentationSpec(group_dims=tuple(meta["group_dims"]))
    return make_world(
        spec,
        seed=meta["seed"],
        prior_std=np.asarray(meta["prior_std"]),
        age_gain=meta["age_gain"],
        gender_magnitude=meta["gender_magnitude"],
    )


def _raw_parents(
    world: SyntheticWorld, rng: np.random.Generator, n: int
) -> tuple[np.ndarray, np.ndarray]:
    fathers = sample_prior_batch(world, rng, n)
    mothers = sample_prior_batch(world, rng, n)
    ages_f = np.clip(0.5 + world.age_gain * (fathers @ world.d_age), 0, 1)
    ages_m = np.clip(0.5 + world.age_gain * (mothers @ world.d_age), 0, 1)
    fathers = apply_attributes_batch(world, fathers, ages_f, np.full(n, FATHER_GENDER))
    mothers = apply_attributes_batch(world, mothers, ages_m, np.full(n, MOTHER_GENDER))
    return fathers, mothers


def generate_triplet(
    world: SyntheticWorld,
    rng: np.random.Generator,
    w_dist: WeightDist,
    combos: np.ndarray,
) -> KinshipTriplet:
    father, mother = (a[0] for a in _raw_parents(world, rng, 1))
    w = float(w_dist.sample(rng))
    raw_child = w * father + (1.0 - w) * mother
    age, gender = combos[rng.integers(len(combos))]
    label = AttributeLabel(age=float(age), gender=int(gender))
    child = apply_attributes_batch(
        world, raw_child[None, :], np.array([label.age]), np.array([label.gender])
    )[0]
    return KinshipTriplet(
        father=father,
        mother=mother,
        child=child,
        father_label=attribute_readout(world, father),
        mother_label=attribute_readout(world, mother),
        child_label=label,
        weight=w,
    )


def generate_dataset(
    world: SyntheticWorld,
    n: int,
    w_dist: WeightDist,
    seed: int,
    combos: np.ndarray | None = None,
) -> TripletDataset:
    """n independent triplets, bit-reproducible from (seed, config).

    Each triplet draws from its own derived stream, so generation could be
    farmed out across workers without changing the sequential result.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    if combos is None:
        combos = desk_combos()
    dim = world.spec.total_dim
    fathers = np.empty((n, dim))
    mothers = np.empty((n, dim))
    children = np.empty((n, dim))
    ages = np.empty(n)
    genders = np.empty(n)
    weights = np.empty(n)
    for i in range(n):
        t = generate_triplet(world, rng_for(seed, "triplet", i), w_dist, combos)
        fathers[i] = t.father
        mothers[i] = t.mother
        children[i] = t.child
        ages[i] = t.child_label.age
        genders[i] = t.child_label.gender
        weights[i] = t.weight
    return TripletDataset(
        fathers=fathers,
        mothers=mothers,
        children=children,
        child_ages=ages,
        child_genders=genders,
        weights=weights,
        seed=seed,
        w_dist=w_dist,
        group_dims=world.spec.group_dims,
        world_meta=world_meta(world),
    )


def save_dataset(ds: TripletDataset, path) -> None:
    meta = {
        "kind": "triplet-dataset",
        "n": len(ds),
        "seed": ds.seed,
        "w_low": ds.w_dist.low,
        "w_high": ds.w_dist.high,
        "group_dims": list(ds.group_dims),
        "world": ds.world_meta,
    }
    save_container(
        path,
        meta,
        {
            "fathers": ds.fathers,
            "mothers": ds.mothers,
            "children": ds.children,
            "child_ages": ds.child_ages,
            "child_genders": ds.child_genders,
            "weights": ds.weights,
        },
    )


def load_dataset(path) -> TripletDataset:
    meta, blocks = load_container(path)
    if meta.get("kind") != "triplet-dataset":
        raise ConfigError(f"{path}: not a triplet dataset container")
    return TripletDataset(
        fathers=blocks["fathers"],
        mothers=blocks["mothers"],
        children=blocks["children"],
        child_ages=blocks["child_ages"],
        child_genders=blocks["child_genders"],
        weights=blocks["weights"],
        seed=int(meta["seed"]),
        w_dist=WeightDist(low=meta["w_low"], high=meta["w_high"]),
        group_dims=tuple(meta["group_dims"]),
        world_meta=meta["world"],
    )


# ---------------------------------------------------------------------------
# task arrangement and condition dropout
# ---------------------------------------------------------------------------

def arrange_example(
    t: KinshipTriplet, task: TaskArrangement
) -> tuple[np.ndarray, np.ndarray, np.ndarray, AttributeLabel]:
    """Relabel one triplet as (cond1, cond2, target, target label)."""
    if task is TaskArrangement.CHILD:
        return t.father, t.mother, t.child, t.child_label
    if task is TaskArrangement.PARTNER_MOTHER:
        return t.child, t.father, t.mother, t.mother_label
    return t.child, t.mother, t.father, t.father_label


def arrange_dataset(
    ds: TripletDataset, task: TaskArrangement, world: SyntheticWorld
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized arrangement: (cond1, cond2, target, target_ages, target_genders)."""
    if task is TaskArrangement.CHILD:
        return ds.fathers, ds.mothers, ds.children, ds.child_ages, ds.child_genders
    if task is TaskArrangement.PARTNER_MOTHER:
        tgt = ds.mothers
        genders = np.full(len(ds), MOTHER_GENDER, dtype=float)
        other = ds.fathers
    else:
        tgt = ds.fathers
        genders = np.full(len(ds), FATHER_GENDER, dtype=float)
        other = ds.mothers
    ages = np.clip(0.5 + world.age_gain * (tgt @ world.d_age), 0, 1)
    return ds.children, other, tgt, ages, genders


@dataclass(frozen=True)
class ConditionDropoutPolicy:
    """Null-substitution rates; the three cases are mutually exclusive."""

    p_only1: float = 0.10
    p_only2: float = 0.10
    p_both: float = 0.01

    def __post_init__(self):
        ps = (self.p_only1, self.p_only2, self.p_both)
        if any(p < 0 for p in ps) or sum(ps) > 1.0:
            raise ConfigError(f"invalid dropout rates {ps}")


def dropout_masks(
    policy: ConditionDropoutPolicy, rng: np.random.Generator, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example booleans (drop1, drop2) drawn at the policy's exact rates."""
    u = rng.random(n)
    only1 = u < policy.p_only1
    only2 = (u >= policy.p_only1) & (u < policy.p_only1 + policy.p_only2)
    both = (u >= policy.p_only1 + policy.p_only2) & (
        u < policy.p_only1 + policy.p_only2 + policy.p_both
    )
    return only1 | both, only2 | both


def apply_dropout(
    example: tuple[np.ndarray, np.ndarray, np.ndarray, AttributeLabel],
    policy: ConditionDropoutPolicy,
    rng: np.random.Generator,
    nulls,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, AttributeLabel]:
    """Replace conditions with the target's age/gender null per the policy."""
    cond1, cond2, target, label = example
    drop1, drop2 = (m[0] for m in dropout_masks(policy, rng, 1))
    if drop1 or drop2:
        null = nulls.null_for(label.age, label.gender)
        if drop1:
            cond1 = null
        if drop2:
            cond2 = null
    return cond1, cond2, target, label


def linear_partner_baseline(
    child: np.ndarray, known_parent: np.ndarray
) -> np.ndarray:
    """Mirror the child about the known parent: 2*child - parent."""
    child = np.asarray(child, dtype=np.float64)
    known_parent = np.asarray(known_parent, dtype=np.float64)
    if child.shape != known_parent.shape:
        raise DimensionError(
            f"baseline shapes disagree: {child.shape} vs {known_parent.shape}"
        )
    return 2.0 * child - known_parent
