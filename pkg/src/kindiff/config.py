"""Run configuration: one JSON document, two presets, explicit validation.

``desk-scale`` keeps the paper-scale group count but shrinks widths and model
size so the full pipeline runs in workstation minutes; ``paper-scale`` records
the full-size settings. CLI flags override individual keys after the preset
is applied.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .container import canonical_json
from .dataset import ConditionDropoutPolicy, WeightDist
from .denoiser import DenoiserConfig
from .diffusion import DiffusionSchedule, linear_schedule
from .errors import ConfigError
from .latent import (
    PAPER_GROUP_DIMS,
    SegmentationSpec,
    SyntheticWorld,
    make_world,
)
from .rng import rng_for
from .training import TrainingConfig


@dataclass(frozen=True)
class WorldSection:
    prior_std: float = 1.0
    age_gain: float = 0.1
    gender_magnitude: float = 2.0
    seed: int = 1001


@dataclass(frozen=True)
class DatasetSection:
    n: int = 20000
    w_low: float = 0.25
    w_high: float = 0.75
    combos: str = "desk"  # "desk" (20) or "paper" (200)
    seed: int = 2001


@dataclass(frozen=True)
class DenoiserSection:
    embed_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: int = 2


@dataclass(frozen=True)
class ScheduleSection:
    timesteps: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    inference_steps: int = 50


@dataclass(frozen=True)
class DropoutSection:
    p_only1: float = 0.10
    p_only2: float = 0.10
    p_both: float = 0.01


@dataclass(frozen=True)
class GuidanceSection:
    null_mode: str = "mean"  # "mean" or "learned"
    null_samples: int = 1000
    # None defers to the per-task defaults (child 1.2/1.2, partner 1.2/0.0)
    g1: float | None = None
    g2: float | None = None


@dataclass(frozen=True)
class TrainSection:
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
    checkpoint_every: int = 0  # epochs; 0 disables mid-run checkpoints
    seed: int = 3001


@dataclass(frozen=True)
class EvalSection:
    samples_per_family: int = 20
    n_families: int = 50
    embed_dim: int = 32
    embed_seed: int = 4001
    sample_steps: int | None = None  # None: the schedule's inference steps
    seed: int = 5001


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk-scale"
    group_dims: tuple[int, ...] = (4,) * 26
    world: WorldSection = field(default_factory=WorldSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    dropout: DropoutSection = field(default_factory=DropoutSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    training: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)


def desk_config() -> RunConfig:
    return RunConfig()


def paper_config() -> RunConfig:
    """Full-scale settings as published; not sized for a workstation run."""
    return RunConfig(
        preset="paper-scale",
        group_dims=PAPER_GROUP_DIMS,
        dataset=DatasetSection(n=100000, combos="paper"),
        denoiser=DenoiserSection(embed_dim=512, n_layers=8, n_heads=8, mlp_ratio=4),
        guidance=GuidanceSection(null_mode="learned", null_samples=10000),
        training=TrainSection(batch_size=1000, epochs=4000, patience=4000),
    )


_PRESETS = {"desk-scale": desk_config, "paper-scale": paper_config}


def preset_config(name: str) -> RunConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return _PRESETS[name]()


# ---------------------------------------------------------------------------
# JSON round-trip
# ---------------------------------------------------------------------------

def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["group_dims"] = list(cfg.group_dims)
    return out


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    preset = doc.pop("preset", "desk-scale")
    base = preset_config(preset)
    sections = {
        "world": WorldSection,
        "dataset": DatasetSection,
        "denoiser": DenoiserSection,
        "schedule": ScheduleSection,
        "dropout": DropoutSection,
        "guidance": GuidanceSection,
        "training": TrainSection,
        "eval": EvalSection,
    }
    kwargs: dict = {"preset": preset}
    if "group_dims" in doc:
        kwargs["group_dims"] = tuple(doc.pop("group_dims"))
    for name, cls in sections.items():
        if name in doc:
            given = doc.pop(name)
            bad = set(given) - {f.name for f in dataclasses.fields(cls)}
            if bad:
                raise ConfigError(f"unknown keys in config section {name}: {sorted(bad)}")
            kwargs[name] = dataclasses.replace(getattr(base, name), **given)
    if doc:
        raise ConfigError(f"unknown top-level config keys: {sorted(doc)}")
    cfg = dataclasses.replace(base, **kwargs)
    validate_config(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(
        canonical_json(config_to_dict(cfg)).encode("utf-8")
    ).hexdigest()


def with_master_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Rederive every per-section seed from one master seed."""

    def derived(tag: str) -> int:
        return int(rng_for(seed, "master", tag).integers(2**31))

    return dataclasses.replace(
        cfg,
        world=dataclasses.replace(cfg.world, seed=derived("world")),
        dataset=dataclasses.replace(cfg.dataset, seed=derived("dataset")),
        training=dataclasses.replace(cfg.training, seed=derived("training")),
        eval=dataclasses.replace(
            cfg.eval, seed=derived("eval"), embed_seed=derived("embed")
        ),
    )


def validate_config(cfg: RunConfig) -> None:
    if cfg.denoiser.embed_dim % cfg.denoiser.n_heads != 0:
        raise ConfigError(
            f"embed_dim {cfg.denoiser.embed_dim} not divisible by "
            f"{cfg.denoiser.n_heads} heads"
        )
    if cfg.denoiser.embed_dim % 2 != 0:
        raise ConfigError("embed_dim must be even for the timestep embedding")
    if cfg.dataset.n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {cfg.dataset.n}")
    if not (0.0 < cfg.dataset.w_low <= cfg.dataset.w_high < 1.0):
        raise ConfigError("weight support must sit inside (0, 1)")
    ps = (cfg.dropout.p_only1, cfg.dropout.p_only2, cfg.dropout.p_both)
    if any(p < 0 for p in ps) or sum(ps) > 1.0:
        raise ConfigError(f"invalid dropout rates {ps}")
    if cfg.guidance.null_mode not in ("mean", "learned"):
        raise ConfigError(f"unknown null mode {cfg.guidance.null_mode!r}")
    if not (1 <= cfg.schedule.inference_steps <= cfg.schedule.timesteps):
        raise ConfigError("inference steps must lie in 1..timesteps")
    if not (0.0 <= cfg.training.heldout_frac < 1.0):
        raise ConfigError("heldout fraction must be in [0, 1)")
    total = sum(cfg.group_dims)
    if cfg.eval.embed_dim > total:
        raise ConfigError(
            f"eval embed_dim {cfg.eval.embed_dim} exceeds latent dim {total}"
        )
    if cfg.eval.sample_steps is not None and not (
        1 <= cfg.eval.sample_steps <= cfg.schedule.timesteps
    ):
        raise ConfigError("eval sample_steps must lie in 1..timesteps")
    # instantiating the spec revalidates group widths
    SegmentationSpec(group_dims=cfg.group_dims)


# ---------------------------------------------------------------------------
# materialization helpers
# ---------------------------------------------------------------------------

def build_segmentation(cfg: RunConfig) -> SegmentationSpec:
    return SegmentationSpec(group_dims=cfg.group_dims)


def build_world(cfg: RunConfig) -> SyntheticWorld:
    return make_world(
        build_segmentation(cfg),
        seed=cfg.world.seed,
        prior_std=cfg.world.prior_std,
        age_gain=cfg.world.age_gain,
        gender_magnitude=cfg.world.gender_magnitude,
    )


def build_weight_dist(cfg: RunConfig) -> WeightDist:
    return WeightDist(low=cfg.dataset.w_low, high=cfg.dataset.w_high)


def build_denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        spec=build_segmentation(cfg),
        embed_dim=cfg.denoiser.embed_dim,
        n_layers=cfg.denoiser.n_layers,
        n_heads=cfg.denoiser.n_heads,
        mlp_ratio=cfg.denoiser.mlp_ratio,
    )


def build_schedule(cfg: RunConfig) -> DiffusionSchedule:
    return linear_schedule(
        timesteps=cfg.schedule.timesteps,
        beta_start=cfg.schedule.beta_start,
        beta_end=cfg.schedule.beta_end,
        n_inference=cfg.schedule.inference_steps,
    )


def build_dropout_policy(cfg: RunConfig) -> ConditionDropoutPolicy:
    return ConditionDropoutPolicy(
        p_only1=cfg.dropout.p_only1,
        p_only2=cfg.dropout.p_only2,
        p_both=cfg.dropout.p_both,
    )


def build_training_config(cfg: RunConfig) -> TrainingConfig:
    t = cfg.training
    return TrainingConfig(
        batch_size=t.batch_size,
        lr=t.lr,
        weight_decay=t.weight_decay,
        beta1=t.beta1,
        beta2=t.beta2,
        opt_eps=t.opt_eps,
        epochs=t.epochs,
        min_epochs=t.min_epochs,
        patience=t.patience,
        plateau_tol=t.plateau_tol,
        heldout_frac=t.heldout_frac,
        seed=t.seed,
    )
