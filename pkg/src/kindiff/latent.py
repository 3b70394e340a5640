"""Segmented style latents, attribute labels, and the synthetic latent world.

A style latent is a flat float64 vector partitioned into feature groups by a
``SegmentationSpec``. The ``SyntheticWorld`` supplies everything the verifiable
desk setup needs in place of a pretrained image stack: a Gaussian prior, two
orthonormal attribute directions with affine readouts, and deterministic
attribute editing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, RangeError
from .rng import rng_for

# Age groups in years (inclusive bounds); ages on the 0-1 scale are year/99.
AGE_BIN_BOUNDS_YEARS: tuple[tuple[int, int], ...] = (
    (0, 2),
    (3, 9),
    (10, 19),
    (20, 29),
    (30, 39),
    (40, 49),
    (50, 59),
    (60, 69),
    (70, 99),
)
AGE_SCALE_YEARS = 99.0
N_AGE_BINS = len(AGE_BIN_BOUNDS_YEARS)

POSE_BIN_CENTERS = np.linspace(-90.0, 90.0, 13)
FRONTAL_POSE_INDEX = 6


def age_bin_index(age: float) -> int:
    """Bin for a 0-1 age; an age exactly on a boundary goes to the higher bin."""
    years = age * AGE_SCALE_YEARS
    for i in range(N_AGE_BINS - 1, -1, -1):
        if years >= AGE_BIN_BOUNDS_YEARS[i][0]:
            return i
    return 0


def age_bin_midpoint(i: int) -> float:
    lo, hi = AGE_BIN_BOUNDS_YEARS[i]
    return (lo + hi) / 2.0 / AGE_SCALE_YEARS


@dataclass(frozen=True)
class SegmentationSpec:
    """Widths of the per-feature groups a latent splits into."""

    group_dims: tuple[int, ...]

    def __post_init__(self):
        if len(self.group_dims) < 1:
            raise DimensionError("segmentation needs at least one group")
        if any(w < 1 for w in self.group_dims):
            raise DimensionError(f"group widths must be >= 1: {self.group_dims}")
        object.__setattr__(self, "group_dims", tuple(int(w) for w in self.group_dims))

    @property
    def n_groups(self) -> int:
        return len(self.group_dims)

    @property
    def total_dim(self) -> int:
        return sum(self.group_dims)

    @property
    def offsets(self) -> np.ndarray:
        return np.cumsum((0,) + self.group_dims)


def desk_segmentation() -> SegmentationSpec:
    """26 equal groups of width 4 (total 104): fast while keeping the group count."""
    return SegmentationSpec(group_dims=(4,) * 26)


# Style-parameter widths of the full-scale generator (26 groups, total 9088):
# per-resolution conv styles interleaved with the toRGB styles. The paper-scale
# stack never states this table; it is supplied here as an external constant.
PAPER_GROUP_DIMS: tuple[int, ...] = (
    512, 512,            # 4x4 conv, toRGB
    512, 512, 512,       # 8x8 conv0, conv1, toRGB
    512, 512, 512,       # 16x16
    512, 512, 512,       # 32x32
    512, 512, 512,       # 64x64
    512, 256, 256,       # 128x128
    256, 128, 128,       # 256x256
    128, 64, 64,         # 512x512
    64, 32, 32,          # 1024x1024
)


def paper_segmentation() -> SegmentationSpec:
    return SegmentationSpec(group_dims=PAPER_GROUP_DIMS)


def split_groups(s: np.ndarray, spec: SegmentationSpec) -> list[np.ndarray]:
    """Slice a latent into its groups; concatenating them reproduces it exactly."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (spec.total_dim,):
        raise DimensionError(
            f"latent shape {s.shape} does not match segmentation total "
            f"({spec.total_dim},)"
        )
    offs = spec.offsets
    return [s[offs[g] : offs[g + 1]].copy() for g in range(spec.n_groups)]


def merge_groups(groups: list[np.ndarray], spec: SegmentationSpec) -> np.ndarray:
    if len(groups) != spec.n_groups:
        raise DimensionError(
            f"expected {spec.n_groups} groups, got {len(groups)}"
        )
    for g, (part, width) in enumerate(zip(groups, spec.group_dims)):
        if np.asarray(part).shape != (width,):
            raise DimensionError(
                f"group {g} has shape {np.asarray(part).shape}, expected ({width},)"
            )
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in groups])


@dataclass
class AttributeLabel:
    """Age on the 0-1 scale, binary gender, and a 13-bin yaw encoding."""

    age: float
    gender: int
    pose: np.ndarray = field(
        default_factory=lambda: one_hot_pose(FRONTAL_POSE_INDEX)
    )

    def __post_init__(self):
        self.age = float(min(1.0, max(0.0, self.age)))
        self.gender = int(self.gender)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (13,):
            raise DimensionError(f"pose must have 13 bins, got {self.pose.shape}")


def one_hot_pose(index: int) -> np.ndarray:
    v = np.zeros(13)
    v[index] = 1.0
    return v


def pose_bins(yaw_degrees: float) -> np.ndarray:
    """Linear interpolation weights over 13 yaw bins centered at -90..90 by 15."""
    if not (-90.0 <= yaw_degrees <= 90.0):
        raise RangeError(f"yaw {yaw_degrees} outside [-90, 90]")
    pos = (yaw_degrees + 90.0) / 15.0
    lo = int(np.floor(pos))
    if lo >= 12:
        return one_hot_pose(12)
    frac = pos - lo
    v = np.zeros(13)
    v[lo] = 1.0 - frac
    v[lo + 1] = frac
    return v


@dataclass
class SyntheticWorld:
    """Stand-in for the pretrained latent distribution and its probes.

    Attribute semantics are linear: age reads out affinely along ``d_age``
    (clamped to [0, 1]) and gender is the sign along ``d_gender``; the two
    directions are unit-norm and mutually orthogonal.
    """

    spec: SegmentationSpec
    prior_mean: np.ndarray
    prior_std: np.ndarray
    d_age: np.ndarray
    d_gender: np.ndarray
    age_gain: float
    gender_magnitude: float
    seed: int

    def __post_init__(self):
        n = self.spec.total_dim
        for name in ("prior_mean", "prior_std", "d_age", "d_gender"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise DimensionError(f"world.{name} shape {arr.shape} != ({n},)")
            setattr(self, name, arr)
        if abs(np.dot(self.d_age, self.d_gender)) >= 1e-10:
            raise DimensionError("attribute directions must be orthogonal")


def make_world(
    spec: SegmentationSpec,
    seed: int = 0,
    prior_std: float | np.ndarray = 1.0,
    age_gain: float = 0.1,
    gender_magnitude: float = 2.0,
) -> SyntheticWorld:
    n = spec.total_dim
    rng = rng_for(seed, "world-directions")
    d_age = rng.standard_normal(n)
    d_age /= np.linalg.norm(d_age)
    d_gender = rng.standard_normal(n)
    d_gender -= np.dot(d_gender, d_age) * d_age
    d_gender /= np.linalg.norm(d_gender)
    # second orthogonalization pass kills the last bit of rounding residue
    d_gender -= np.dot(d_gender, d_age) * d_age
    d_gender /= np.linalg.norm(d_gender)
    std = np.broadcast_to(np.asarray(prior_std, dtype=np.float64), (n,)).copy()
    return SyntheticWorld(
        spec=spec,
        prior_mean=np.zeros(n),
        prior_std=std,
        d_age=d_age,
        d_gender=d_gender,
        age_gain=float(age_gain),
        gender_magnitude=float(gender_magnitude),
        seed=int(seed),
    )


def sample_prior(world: SyntheticWorld, rng: np.random.Generator) -> np.ndarray:
    return world.prior_mean + world.prior_std * rng.standard_normal(
        world.spec.total_dim
    )


def sample_prior_batch(
    world: SyntheticWorld, rng: np.random.Generator, n: int
) -> np.ndarray:
    return world.prior_mean + world.prior_std * rng.standard_normal(
        (n, world.spec.total_dim)
    )


def readout_age(world: SyntheticWorld, s: np.ndarray) -> float | np.ndarray:
    raw = 0.5 + world.age_gain * (np.asarray(s) @ world.d_age)
    return np.clip(raw, 0.0, 1.0)


def readout_gender(world: SyntheticWorld, s: np.ndarray) -> int | np.ndarray:
    comp = np.asarray(s) @ world.d_gender
    return (comp > 0).astype(int)


def attribute_readout(world: SyntheticWorld, s: np.ndarray) -> AttributeLabel:
    """Age/gender from the linear probes; pose is fixed frontal in this world."""
    return AttributeLabel(
        age=float(readout_age(world, s)),
        gender=int(readout_gender(world, s)),
        pose=one_hot_pose(FRONTAL_POSE_INDEX),
    )


def apply_attributes(
    world: SyntheticWorld, s: np.ndarray, target: AttributeLabel
) -> np.ndarray:
    """Overwrite the attribute-plane components so the readout hits ``target``.

    Components orthogonal to both directions are untouched. The gender
    component keeps its current value when the sign already matches (making a
    matching target a fixed point) and otherwise flips to the world's signed
    default magnitude.
    """
    out = apply_attributes_batch(
        world,
        np.asarray(s, dtype=np.float64)[None, :],
        np.array([target.age]),
        np.array([target.gender]),
    )
    return out[0]


def apply_attributes_batch(
    world: SyntheticWorld,
    latents: np.ndarray,
    ages: np.ndarray,
    genders: np.ndarray,
) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    out = latents.copy()
    age_comp = latents @ world.d_age
    new_age_comp = (np.asarray(ages) - 0.5) / world.age_gain
    out += np.outer(new_age_comp - age_comp, world.d_age)

    gen_comp = latents @ world.d_gender
    want_pos = np.asarray(genders).astype(bool)
    has_pos = gen_comp > 0
    flip = want_pos != has_pos
    new_gen = np.where(
        flip,
        np.where(want_pos, world.gender_magnitude, -world.gender_magnitude),
        gen_comp,
    )
    out += np.outer(new_gen - gen_comp, world.d_gender)
    return out
