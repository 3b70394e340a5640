"""Evaluation protocols: family scoring, ablation arms, guidance sweeps,
and the linear partner baseline comparison.

Family evaluation mirrors the quantitative protocol: per held-out family,
generate a fixed number of samples at the true target's age/gender, score
diversity within the sample set, identity similarity against the true target,
and ranking quality with negatives drawn from other families' targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import TaskArrangement, TripletDataset, arrange_dataset, linear_partner_baseline
from .denoiser import DenoiserParams
from .diffusion import DiffusionSchedule, regression_predict, sample_batch
from .errors import ConfigError
from .guidance import GuidanceScales, NullConditionRegistry, default_scales
from .latent import SyntheticWorld
from .metrics import (
    EmbeddingMap,
    MetricReport,
    attribute_metrics,
    cosine_similarity,
    diversity_score,
    auc_roc,
    make_embedding,
)
from .rng import rng_for
from .training import split_indices


def joint_scales() -> GuidanceScales:
    """Scales that collapse the composition to the plain joint conditional."""
    return GuidanceScales(0.0, 0.0)


def sample_joint_batch(
    params: DenoiserParams,
    cond1: np.ndarray,
    cond2: np.ndarray,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    steps: int | None = None,
) -> np.ndarray:
    """DDIM with both conditions attached directly (no guidance composition).

    With zero scales the composition is exactly the base branch, so passing
    the true conditions as the null slots evaluates the joint conditional."""
    return sample_batch(
        params, cond1, cond2, joint_scales(), cond1, cond2, schedule, rng, steps
    )


@dataclass
class FamilyEvalSettings:
    samples_per_family: int = 20
    n_families: int = 50
    sample_steps: int | None = None
    seed: int = 5001


def eval_family_indices(
    ds: TripletDataset, train_seed: int, heldout_frac: float, n_families: int
) -> np.ndarray:
    _, held = split_indices(len(ds), heldout_frac, train_seed)
    if len(held) == 0:
        raise ConfigError("no held-out families available for evaluation")
    return held[:n_families]


@dataclass
class FamilyEvalResult:
    report: MetricReport
    per_family_ds: np.ndarray
    per_family_idsim: np.ndarray


def _family_conditions(
    ds: TripletDataset, task: TaskArrangement, world: SyntheticWorld, idx: np.ndarray
):
    c1, c2, target, ages, genders = arrange_dataset(ds, task, world)
    return c1[idx], c2[idx], target[idx], ages[idx], genders[idx]


def evaluate_families(
    params: DenoiserParams,
    registry: NullConditionRegistry,
    ds: TripletDataset,
    task: TaskArrangement,
    world: SyntheticWorld,
    schedule: DiffusionSchedule,
    embed: EmbeddingMap,
    settings: FamilyEvalSettings,
    cfg_hash: str,
    scales: GuidanceScales | None = None,
    mode: str = "rtg",
    train_seed: int = 3001,
    heldout_frac: float = 0.1,
) -> FamilyEvalResult:
    """Generate per-family samples and aggregate DS / ID-sim / AUC / attributes.

    ``mode``: "rtg" (guided), "joint" (no guidance), or "regression"
    (deterministic one-shot predictions repeated per family).
    """
    fam_idx = eval_family_indices(ds, train_seed, heldout_frac, settings.n_families)
    c1, c2, targets, ages, genders = _family_conditions(ds, task, world, fam_idx)
    n_fam = len(fam_idx)
    k = settings.samples_per_family
    if scales is None:
        scales = default_scales(task)

    ds_scores, id_sims, pos_all, neg_all = [], [], [], []
    age_mses, gender_accs = [], []
    neg_rng = rng_for(settings.seed, "negatives")
    for j in range(n_fam):
        cond1 = np.repeat(c1[j][None], k, axis=0)
        cond2 = np.repeat(c2[j][None], k, axis=0)
        if mode == "regression":
            samples = np.repeat(
                regression_predict(params, c1[j][None], c2[j][None]), k, axis=0
            )
        else:
            srng = rng_for(settings.seed, "family", int(fam_idx[j]))
            if mode == "joint":
                samples = sample_joint_batch(
                    params, cond1, cond2, schedule, srng, settings.sample_steps
                )
            else:
                null = registry.null_for(float(ages[j]), int(genders[j]))
                nulls = np.repeat(null[None], k, axis=0)
                samples = sample_batch(
                    params, cond1, cond2, scales, nulls, nulls,
                    schedule, srng, settings.sample_steps,
                )
        ds_scores.append(diversity_score(samples, embed))
        pos = [identity_pair(embed, s, targets[j]) for s in samples]
        others = fam_idx[fam_idx != fam_idx[j]]
        neg_idx = neg_rng.choice(others, size=k)
        neg_pos = {int(v): targets[fam_idx == v][0] for v in np.unique(neg_idx)}
        neg = [identity_pair(embed, s, neg_pos[int(v)]) for s, v in zip(samples, neg_idx)]
        pos_all.extend(pos)
        neg_all.extend(neg)
        id_sims.append(float(np.mean(pos)))
        am, ga = attribute_metrics(
            world, samples, np.full(k, ages[j]), np.full(k, genders[j])
        )
        age_mses.append(am)
        gender_accs.append(ga)

    report = MetricReport(
        ds=float(np.mean(ds_scores)),
        id_sim=float(np.mean(id_sims)),
        auc=auc_roc(pos_all, neg_all),
        age_mse=float(np.mean(age_mses)),
        gender_acc=float(np.mean(gender_accs)),
        n_families=n_fam,
        samples_per_family=k,
        config_hash=cfg_hash,
        extras={"mode": mode, "task": task.value, "g1": scales.g1, "g2": scales.g2},
    )
    return FamilyEvalResult(
        report=report,
        per_family_ds=np.asarray(ds_scores),
        per_family_idsim=np.asarray(id_sims),
    )


def identity_pair(embed: EmbeddingMap, a: np.ndarray, b: np.ndarray) -> float:
    return cosine_similarity(embed(a), embed(b))


def guidance_sweep(
    params: DenoiserParams,
    registry: NullConditionRegistry,
    ds: TripletDataset,
    world: SyntheticWorld,
    schedule: DiffusionSchedule,
    embed: EmbeddingMap,
    g1_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0),
    g2: float = 1.2,
    n_pairs: int = 5,
    samples_per_pair: int = 25,
    sample_steps: int | None = None,
    seed: int = 6001,
    train_seed: int = 3001,
    heldout_frac: float = 0.1,
) -> list[dict[str, float]]:
    """Mean embedding-cosine to each condition and DS across the g1 grid."""
    fam_idx = eval_family_indices(ds, train_seed, heldout_frac, n_pairs)
    c1, c2, _, ages, genders = _family_conditions(
        ds, TaskArrangement.CHILD, world, fam_idx
    )
    rows = []
    for g1 in g1_grid:
        scales = GuidanceScales(g1, g2)
        cos1s, cos2s, dss = [], [], []
        for j in range(len(fam_idx)):
            cond1 = np.repeat(c1[j][None], samples_per_pair, axis=0)
            cond2 = np.repeat(c2[j][None], samples_per_pair, axis=0)
            null = registry.null_for(float(ages[j]), int(genders[j]))
            nulls = np.repeat(null[None], samples_per_pair, axis=0)
            srng = rng_for(seed, "sweep", int(fam_idx[j]), f"{g1:.3f}", f"{g2:.3f}")
            samples = sample_batch(
                params, cond1, cond2, scales, nulls, nulls, schedule, srng, sample_steps
            )
            cos1s.extend(identity_pair(embed, s, c1[j]) for s in samples)
            cos2s.extend(identity_pair(embed, s, c2[j]) for s in samples)
            dss.append(diversity_score(samples, embed))
        rows.append(
            {
                "g1": g1,
                "g2": g2,
                "cos_to_cond1": float(np.mean(cos1s)),
                "cos_to_cond2": float(np.mean(cos2s)),
                "ds": float(np.mean(dss)),
                "n_samples": len(cos1s),
            }
        )
    return rows


def partner_baseline_comparison(
    params: DenoiserParams,
    registry: NullConditionRegistry,
    ds: TripletDataset,
    world: SyntheticWorld,
    schedule: DiffusionSchedule,
    embed: EmbeddingMap,
    task: TaskArrangement = TaskArrangement.PARTNER_MOTHER,
    n_families: int = 40,
    samples_per_family: int = 8,
    sample_steps: int | None = None,
    seed: int = 7001,
    train_seed: int = 3001,
    heldout_frac: float = 0.1,
) -> dict:
    """Linear 2*child - parent baseline vs the learned partner sampler.

    The exactness of the linear identity is checked on raw mid-point
    interpolants (before attribute retargeting breaks the algebra); the
    similarity comparison runs on the stored held-out families.
    """
    if task is TaskArrangement.CHILD:
        raise ConfigError("partner baseline needs a partner task")
    fam_idx = eval_family_indices(ds, train_seed, heldout_frac, n_families)
    c1, c2, targets, ages, genders = _family_conditions(ds, task, world, fam_idx)

    base_sims, model_sims = [], []
    scales = default_scales(task)
    for j in range(len(fam_idx)):
        pred_lin = linear_partner_baseline(c1[j], c2[j])
        base_sims.append(identity_pair(embed, pred_lin, targets[j]))
        cond1 = np.repeat(c1[j][None], samples_per_family, axis=0)
        cond2 = np.repeat(c2[j][None], samples_per_family, axis=0)
        null = registry.null_for(float(ages[j]), int(genders[j]))
        nulls = np.repeat(null[None], samples_per_family, axis=0)
        srng = rng_for(seed, "partner", int(fam_idx[j]))
        samples = sample_batch(
            params, cond1, cond2, scales, nulls, nulls, schedule, srng, sample_steps
        )
        model_sims.append(
            float(np.mean([identity_pair(embed, s, targets[j]) for s in samples]))
        )

    # algebraic exactness on equal-weight raw interpolants (pre-attribute)
    mid_children = 0.5 * ds.fathers[fam_idx] + 0.5 * ds.mothers[fam_idx]
    if task is TaskArrangement.PARTNER_MOTHER:
        known, truth = ds.fathers[fam_idx], ds.mothers[fam_idx]
    else:
        known, truth = ds.mothers[fam_idx], ds.fathers[fam_idx]
    recon = np.stack(
        [linear_partner_baseline(c, k) for c, k in zip(mid_children, known)]
    )
    mid_err = float(np.max(np.abs(recon - truth)))

    return {
        "task": task.value,
        "n_families": len(fam_idx),
        "baseline_mean_idsim": float(np.mean(base_sims)),
        "model_mean_idsim": float(np.mean(model_sims)),
        "midpoint_max_error": mid_err,
        "baseline_sims": base_sims,
        "model_sims": model_sims,
    }
