"""Offset-MLP attribute retargeting trained against differentiable probes.

The block maps (latent, age, gender, pose) to an additive offset. Training
builds three variants per example: retargeted to the requested attributes,
reconstructed at the ground-truth attributes, and cycle-mapped back from the
retargeted variant, then scores them with six weighted losses (identity,
age, gender, pose, offset regularization, perceptual).

The probes are synthetic stand-ins wired to the latent world: the age probe
is the world's affine readout without its clamp, the gender probe a logistic
on the gender component, the pose probe a fixed linear map to 13 values,
identity is unit-normalization, and the perceptual map is a fixed random
projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericFailure
from .latent import SyntheticWorld, pose_bins, readout_age, readout_gender
from .optim import OptimizerState, grads_for, optimizer_step
from .rng import rng_for
from .tensor import (
    Tensor,
    concat,
    leaky_relu,
    matmul,
    mul,
    no_grad,
    softplus,
    sqrt,
    tmean,
    tsum,
)

ATTR_INPUT_EXTRA = 15  # age + gender + 13 pose bins


@dataclass
class AttributeBlockParams:
    """MLP weights; output width equals the latent width."""

    weights: list[Tensor]
    biases: list[Tensor]
    latent_dim: int

    def parameter_list(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def as_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w.data
            out[f"b{i}"] = b.data
        return out

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray]) -> "AttributeBlockParams":
        n = len(arrays) // 2
        weights = [Tensor(arrays[f"w{i}"], requires_grad=True) for i in range(n)]
        biases = [Tensor(arrays[f"b{i}"], requires_grad=True) for i in range(n)]
        return AttributeBlockParams(
            weights=weights, biases=biases, latent_dim=weights[-1].shape[1]
        )


def init_attribute_block(
    latent_dim: int,
    rng: np.random.Generator,
    hidden: int | None = None,
    n_hidden: int = 3,
    slope: float = 0.2,
    final_std: float = 0.0,
) -> AttributeBlockParams:
    """He-scaled hidden layers; the output layer starts at (or near) zero.

    Training passes a tiny ``final_std`` so the offset-norm regularizer never
    sits exactly on the nondifferentiable point of the L2 norm at step one.
    """
    if hidden is None:
        hidden = 4 * latent_dim
    dims = [latent_dim + ATTR_INPUT_EXTRA] + [hidden] * n_hidden + [latent_dim]
    weights, biases = [], []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        if i == len(dims) - 2:
            w = final_std * rng.standard_normal((din, dout))
        else:
            w = rng.standard_normal((din, dout)) * np.sqrt(2.0 / (din * (1 + slope**2)))
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(dout), requires_grad=True))
    return AttributeBlockParams(weights=weights, biases=biases, latent_dim=latent_dim)


def _attr_inputs(ages, genders, poses, n: int) -> np.ndarray:
    ages = np.broadcast_to(np.asarray(ages, dtype=np.float64).reshape(-1, 1), (n, 1))
    genders = np.broadcast_to(
        np.asarray(genders, dtype=np.float64).reshape(-1, 1), (n, 1)
    )
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim == 1:
        poses = np.broadcast_to(poses, (n, 13))
    if poses.shape != (n, 13):
        raise DimensionError(f"pose batch shape {poses.shape} != ({n}, 13)")
    return np.concatenate([ages, genders, poses], axis=1)


def offset_mlp(params: AttributeBlockParams, w, ages, genders, poses) -> Tensor:
    """The raw offset M(w, age, gender, pose); w may be a Tensor or array."""
    wt = w if isinstance(w, Tensor) else Tensor(np.atleast_2d(w))
    n = wt.shape[0]
    x = concat([wt, Tensor(_attr_inputs(ages, genders, poses, n))], axis=1)
    last = len(params.weights) - 1
    for i, (wi, bi) in enumerate(zip(params.weights, params.biases)):
        x = matmul(x, wi) + bi
        if i != last:
            x = leaky_relu(x, 0.2)
    return x


def offset_apply(params: AttributeBlockParams, w, ages, genders, poses) -> Tensor:
    """Retargeted latent w + M(w, attrs)."""
    wt = w if isinstance(w, Tensor) else Tensor(np.atleast_2d(w))
    return wt + offset_mlp(params, wt, ages, genders, poses)


@dataclass
class AttrBatch:
    """One training batch of latents with ground-truth and requested attributes."""

    latents: np.ndarray
    gt_ages: np.ndarray
    gt_genders: np.ndarray
    gt_poses: np.ndarray
    target_ages: np.ndarray
    target_genders: np.ndarray
    target_poses: np.ndarray


def three_variants(
    params: AttributeBlockParams, batch: AttrBatch
) -> tuple[Tensor, Tensor, Tensor]:
    """(retargeted, reconstructed, cycle) variants of the batch latents."""
    w = Tensor(batch.latents)
    w_syn = offset_apply(
        params, w, batch.target_ages, batch.target_genders, batch.target_poses
    )
    w_rec = offset_apply(params, w, batch.gt_ages, batch.gt_genders, batch.gt_poses)
    w_cyc = offset_apply(
        params, w_syn, batch.gt_ages, batch.gt_genders, batch.gt_poses
    )
    return w_syn, w_rec, w_cyc


@dataclass(frozen=True)
class LossWeights:
    lambda_id: float = 0.5
    lambda_age: float = 8.0
    lambda_gen: float = 1.0
    lambda_pose: float = 8.0
    lambda_reg: float = 0.05
    lambda_per: float = 0.5
    xi: float = 0.1  # down-weight of the retargeted variant's identity term

    def __post_init__(self):
        vals = (
            self.lambda_id, self.lambda_age, self.lambda_gen,
            self.lambda_pose, self.lambda_reg, self.lambda_per, self.xi,
        )
        if any(v < 0 for v in vals):
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class ProbeSet:
    """Differentiable stand-ins for the pretrained attribute/identity networks."""

    d_age: np.ndarray
    age_gain: float
    d_gender: np.ndarray
    gender_logit_scale: float
    pose_matrix: np.ndarray       # (13, latent_dim)
    perceptual_matrix: np.ndarray  # (per_dim, latent_dim)

    def age(self, w: Tensor) -> Tensor:
        comp = matmul(w, Tensor(self.d_age[:, None]))
        return mul(comp, self.age_gain) + 0.5

    def gender_logit(self, w: Tensor) -> Tensor:
        comp = matmul(w, Tensor(self.d_gender[:, None]))
        return mul(comp, self.gender_logit_scale)

    def pose(self, w: Tensor) -> Tensor:
        return matmul(w, Tensor(self.pose_matrix.T))

    def identity(self, w: Tensor) -> Tensor:
        norms = sqrt(tsum(mul(w, w), axis=-1, keepdims=True))
        return w / norms

    def perceptual(self, w: Tensor) -> Tensor:
        return matmul(w, Tensor(self.perceptual_matrix.T))


def make_probes(world: SyntheticWorld, seed: int = 0, perceptual_dim: int = 64) -> ProbeSet:
    """Fixed probe maps tied to the world's attribute geometry.

    The perceptual rows are projected off the age/gender directions: the
    feature map must tolerate attribute retargeting the way an image-space
    perceptual network tolerates age edits, otherwise it vetoes the very
    offsets the block exists to produce.
    """
    n = world.spec.total_dim
    rng = rng_for(seed, "probes")
    perceptual = rng.standard_normal((perceptual_dim, n)) / np.sqrt(n)
    for d in (world.d_age, world.d_gender):
        perceptual -= np.outer(perceptual @ d, d)
    # pose is an independent factor: its readout rows stay off the age and
    # gender directions, and their scale keeps raw readouts near the 0-1
    # range of the bin encoding
    pose = rng.standard_normal((13, n))
    for d in (world.d_age, world.d_gender):
        pose -= np.outer(pose @ d, d)
    pose *= 0.3 / np.linalg.norm(pose, axis=1, keepdims=True)
    return ProbeSet(
        d_age=world.d_age,
        age_gain=world.age_gain,
        d_gender=world.d_gender,
        gender_logit_scale=4.0,
        pose_matrix=pose,
        perceptual_matrix=perceptual,
    )


def _row_sumsq(t: Tensor) -> Tensor:
    return tsum(mul(t, t), axis=-1)


def _row_norms(t: Tensor) -> Tensor:
    return sqrt(_row_sumsq(t))


def _row_cos(a: Tensor, b: Tensor) -> Tensor:
    dots = tsum(mul(a, b), axis=-1)
    return dots / (_row_norms(a) * _row_norms(b))


def _bce_with_logit(logit: Tensor, labels: np.ndarray) -> Tensor:
    # softplus(l) - l*y, the stable binary cross-entropy
    y = Tensor(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    return tmean(softplus(logit) - mul(logit, y))


def attribute_losses(
    probes: ProbeSet,
    weights: LossWeights,
    variants: tuple[Tensor, Tensor, Tensor],
    batch: AttrBatch,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted total plus a per-term breakdown (batch means of the formulas).

    The distance terms use squared L2 norms: the unsquared form has
    residual-independent gradient magnitudes that stall the adaptive
    optimizer long before the retargeting accuracy this block must reach.
    """
    w_syn, w_rec, w_cyc = variants
    w = Tensor(batch.latents)

    def age_term(var, ages):
        diff = probes.age(var) - Tensor(np.asarray(ages, dtype=np.float64).reshape(-1, 1))
        return tmean(_row_sumsq(diff))

    l_age = (
        age_term(w_syn, batch.target_ages)
        + age_term(w_rec, batch.gt_ages)
        + age_term(w_cyc, batch.gt_ages)
    )
    l_gen = (
        _bce_with_logit(probes.gender_logit(w_syn), batch.target_genders)
        + _bce_with_logit(probes.gender_logit(w_rec), batch.gt_genders)
        + _bce_with_logit(probes.gender_logit(w_cyc), batch.gt_genders)
    )

    def pose_term(var, poses):
        return tmean(_row_sumsq(probes.pose(var) - Tensor(poses)))

    l_pose = (
        pose_term(w_syn, batch.target_poses)
        + pose_term(w_rec, batch.gt_poses)
        + pose_term(w_cyc, batch.gt_poses)
    )

    rid = probes.identity(w)
    l_id = (
        mul(tmean(1.0 - _row_cos(probes.identity(w_syn), rid)), weights.xi)
        + tmean(1.0 - _row_cos(probes.identity(w_rec), rid))
        + tmean(1.0 - _row_cos(probes.identity(w_cyc), rid))
    )

    l_reg = (
        tmean(_row_sumsq(w_syn - w))
        + tmean(_row_sumsq(w_rec - w))
        + tmean(_row_sumsq(w_cyc - w_syn))
    )

    pw = probes.perceptual(w)
    l_per = (
        tmean(_row_sumsq(probes.perceptual(w_syn) - pw))
        + tmean(_row_sumsq(probes.perceptual(w_rec) - pw))
        + tmean(_row_sumsq(probes.perceptual(w_cyc) - pw))
    )

    total = (
        mul(l_id, weights.lambda_id)
        + mul(l_age, weights.lambda_age)
        + mul(l_gen, weights.lambda_gen)
        + mul(l_pose, weights.lambda_pose)
        + mul(l_reg, weights.lambda_reg)
        + mul(l_per, weights.lambda_per)
    )
    breakdown = {
        "id": l_id.item(),
        "age": l_age.item(),
        "gender": l_gen.item(),
        "pose": l_pose.item(),
        "reg": l_reg.item(),
        "perceptual": l_per.item(),
        "total": total.item(),
    }
    return total, breakdown


def sample_attr_batch(
    world: SyntheticWorld, rng: np.random.Generator, n: int
) -> AttrBatch:
    from .latent import sample_prior_batch

    latents = sample_prior_batch(world, rng, n)
    gt_ages = np.asarray(readout_age(world, latents))
    gt_genders = np.asarray(readout_gender(world, latents)).astype(float)
    gt_poses = np.tile(pose_bins(0.0), (n, 1))
    target_ages = rng.uniform(0.0, 1.0, n)
    target_genders = rng.integers(0, 2, n).astype(float)
    target_poses = np.stack([pose_bins(y) for y in rng.uniform(-90.0, 90.0, n)])
    return AttrBatch(
        latents=latents,
        gt_ages=gt_ages,
        gt_genders=gt_genders,
        gt_poses=gt_poses,
        target_ages=target_ages,
        target_genders=target_genders,
        target_poses=target_poses,
    )


def train_attribute_block(
    world: SyntheticWorld,
    probes: ProbeSet,
    weights: LossWeights,
    epochs: int = 30,
    steps_per_epoch: int = 25,
    batch_size: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
    hidden: int | None = None,
) -> tuple[AttributeBlockParams, list[dict[str, float]]]:
    """Optimize the six-loss objective on prior draws with random targets."""
    params = init_attribute_block(
        world.spec.total_dim, rng_for(seed, "attr-init"), hidden=hidden
    )
    state = OptimizerState(lr=lr).init_for(params.parameter_list())
    log: list[dict[str, float]] = []
    for epoch in range(epochs):
        erng = rng_for(seed, "attr-epoch", epoch)
        for _ in range(steps_per_epoch):
            batch = sample_attr_batch(world, erng, batch_size)
            variants = three_variants(params, batch)
            total, breakdown = attribute_losses(probes, weights, variants, batch)
            if not np.isfinite(breakdown["total"]):
                raise NumericFailure(
                    f"attribute training diverged at epoch {epoch}"
                )
            for p in params.parameter_list():
                p.zero_grad()
            total.backward()
            optimizer_step(params.parameter_list(), grads_for(params.parameter_list()), state)
        breakdown["epoch"] = epoch
        log.append(breakdown)
    return params, log


def evaluate_attribute_block(
    world: SyntheticWorld,
    params: AttributeBlockParams,
    n: int = 1000,
    seed: int = 123,
) -> dict[str, float]:
    """Held-out retargeting quality via the world's readouts."""
    batch = sample_attr_batch(world, rng_for(seed, "attr-eval"), n)
    with no_grad():
        w_syn = offset_apply(
            params,
            batch.latents,
            batch.target_ages,
            batch.target_genders,
            batch.target_poses,
        ).data
    ages = np.asarray(readout_age(world, w_syn))
    genders = np.asarray(readout_gender(world, w_syn))
    base = batch.latents / np.linalg.norm(batch.latents, axis=1, keepdims=True)
    syn = w_syn / np.linalg.norm(w_syn, axis=1, keepdims=True)
    ident = float(np.mean(np.sum(base * syn, axis=1)))
    cross = float(np.mean(np.sum(base * np.roll(syn, 1, axis=0), axis=1)))
    return {
        "age_mse": float(np.mean((ages - batch.target_ages) ** 2)),
        "gender_acc": float(np.mean(genders == batch.target_genders.astype(int))),
        "identity_cos": ident,
        "unrelated_cos": cross,
    }
