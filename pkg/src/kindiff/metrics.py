"""Latent-level evaluation: diversity, identity similarity, ranking, attributes.

Identity features come from a fixed seeded orthonormal projection of the
latent (a stand-in for a pretrained face embedder, keeping cosine geometry
honest). Diversity is the mean pairwise cosine among samples generated for
one condition; lower means more diverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .latent import SyntheticWorld, readout_age, readout_gender
from .rng import rng_for


@dataclass
class EmbeddingMap:
    """Orthonormal-row projection total_dim -> embed_dim (identity allowed)."""

    matrix: np.ndarray  # (embed_dim, total_dim); rows orthonormal

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        gram = self.matrix @ self.matrix.T
        if not np.allclose(gram, np.eye(len(self.matrix)), atol=1e-10):
            raise ConfigError("embedding rows must be orthonormal within 1e-10")

    @property
    def embed_dim(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, latents: np.ndarray) -> np.ndarray:
        return np.asarray(latents, dtype=np.float64) @ self.matrix.T


def make_embedding(total_dim: int, embed_dim: int = 32, seed: int = 0) -> EmbeddingMap:
    if embed_dim > total_dim:
        raise ConfigError(
            f"embed_dim {embed_dim} cannot exceed latent dim {total_dim}"
        )
    if embed_dim == total_dim:
        return EmbeddingMap(np.eye(total_dim))
    g = rng_for(seed, "embedding").standard_normal((total_dim, embed_dim))
    q, _ = np.linalg.qr(g)
    return EmbeddingMap(q.T)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine via dot/sqrt(dot*dot); bit-identical inputs give exactly 1.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cosine shapes disagree: {a.shape} vs {b.shape}")
    na2, nb2 = float(a @ a), float(b @ b)
    if na2 == 0.0 or nb2 == 0.0:
        raise ConfigError("cosine of a zero-norm vector is undefined")
    return float(np.clip((a @ b) / np.sqrt(na2 * nb2), -1.0, 1.0))


def identity_similarity(a: np.ndarray, b: np.ndarray, embed: EmbeddingMap) -> float:
    return cosine_similarity(embed(a), embed(b))


def diversity_score(samples: np.ndarray, embed: EmbeddingMap) -> float:
    """Mean pairwise cosine over ordered pairs i != j of embedded samples."""
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples)
    if n < 2:
        raise ConfigError(f"diversity needs >= 2 samples, got {n}")
    y = embed(samples)
    gram = y @ y.T
    norms2 = np.diag(gram).copy()
    if np.any(norms2 == 0.0):
        raise ConfigError("diversity undefined for zero-norm embeddings")
    cos = gram / np.sqrt(np.outer(norms2, norms2))
    np.clip(cos, -1.0, 1.0, out=cos)
    return float((cos.sum() - np.trace(cos)) / (n * (n - 1)))


def auc_roc(pos_scores, neg_scores) -> float:
    """P(random positive outranks random negative), ties counted half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigError("auc_roc needs nonempty score lists")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(len(combined))
    ranks[order] = np.arange(1, len(combined) + 1)
    # average ranks within tie groups
    sorted_vals = combined[order]
    i = 0
    while i < len(sorted_vals):
        j = i
        while j + 1 < len(sorted_vals) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    rank_sum = ranks[: len(pos)].sum()
    u = rank_sum - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def attribute_metrics(
    world: SyntheticWorld,
    outputs: np.ndarray,
    target_ages: np.ndarray,
    target_genders: np.ndarray,
) -> tuple[float, float]:
    """(age MSE on the 0-1 scale, gender sign accuracy) of readouts vs targets."""
    outputs = np.asarray(outputs, dtype=np.float64)
    ages = np.asarray(readout_age(world, outputs))
    genders = np.asarray(readout_gender(world, outputs))
    if len(outputs) != len(target_ages) or len(outputs) != len(target_genders):
        raise DimensionError("attribute_metrics inputs must align")
    age_mse = float(np.mean((ages - np.asarray(target_ages)) ** 2))
    gender_acc = float(np.mean(genders == np.asarray(target_genders).astype(int)))
    return age_mse, gender_acc


def weight_recovery(
    children: np.ndarray, father: np.ndarray, mother: np.ndarray
) -> np.ndarray:
    """Project children onto the father-mother axis: the mixing-weight oracle."""
    father = np.asarray(father, dtype=np.float64)
    mother = np.asarray(mother, dtype=np.float64)
    d = father - mother
    dd = float(d @ d)
    if dd == 0.0:
        raise ConfigError("weight recovery undefined for identical parents")
    children = np.atleast_2d(np.asarray(children, dtype=np.float64))
    return (children - mother) @ d / dd


def wasserstein1_to_uniform(samples, low: float, high: float) -> float:
    """Exact 1-Wasserstein distance between an empirical sample and U(low, high).

    Integrates |F_hat - F_uniform| piecewise: the empirical CDF is constant
    between breakpoints and the uniform CDF is linear, so each segment is a
    trapezoid split at its sign change.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(s)
    if n == 0:
        raise ConfigError("need at least one sample")
    if not high > low:
        raise ConfigError(f"invalid uniform support [{low}, {high}]")

    def f_uni(x):
        return np.clip((x - low) / (high - low), 0.0, 1.0)

    pts = np.unique(np.concatenate([s, [low, high]]))
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        fhat = np.searchsorted(s, a, side="right") / n
        fa = fhat - f_uni(a)
        fb = fhat - f_uni(b)
        if fa * fb >= 0:
            total += 0.5 * (abs(fa) + abs(fb)) * (b - a)
        else:
            # linear integrand crosses zero inside the segment
            x0 = a + (b - a) * abs(fa) / (abs(fa) + abs(fb))
            total += 0.5 * abs(fa) * (x0 - a) + 0.5 * abs(fb) * (b - x0)
    return float(total)


def spearman_rho(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ConfigError("spearman needs two equal-length 1-d samples, n >= 2")

    def ranks(v):
        order = np.argsort(v, kind="mergesort")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        sv = v[order]
        i = 0
        while i < len(sv):
            j = i
            while j + 1 < len(sv) and sv[j + 1] == sv[i]:
                j += 1
            if j > i:
                r[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
            i = j + 1
        return r

    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0.0:
        raise ConfigError("spearman undefined for constant sequences")
    return float((rx @ ry) / denom)


@dataclass
class MetricReport:
    """One evaluation arm's aggregate scores plus its provenance."""

    ds: float | None
    id_sim: float
    auc: float
    age_mse: float
    gender_acc: float
    n_families: int
    samples_per_family: int
    config_hash: str
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ds is not None and not (-1.0 <= self.ds <= 1.0):
            raise ConfigError(f"DS {self.ds} outside [-1, 1]")
        if not (0.0 <= self.auc <= 1.0):
            raise ConfigError(f"AUC {self.auc} outside [0, 1]")
        if not (0.0 <= self.gender_acc <= 1.0):
            raise ConfigError(f"gender accuracy {self.gender_acc} outside [0, 1]")

    def to_dict(self) -> dict:
        out = {
            "ds": self.ds,
            "id_sim": self.id_sim,
            "auc": self.auc,
            "age_mse": self.age_mse,
            "gender_acc": self.gender_acc,
            "n_families": self.n_families,
            "samples_per_family": self.samples_per_family,
            "config_hash": self.config_hash,
        }
        out.update(self.extras)
        return out

    CSV_FIELDS = (
        "ds",
        "id_sim",
        "auc",
        "age_mse",
        "gender_acc",
        "n_families",
        "samples_per_family",
        "config_hash",
    )
