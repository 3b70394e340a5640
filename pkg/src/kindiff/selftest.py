"""Built-in oracle checks runnable without any trained artifacts.

Each check is a fast, deterministic verification of a core contract:
finite-difference agreement of gradients, sampler inversion identities,
guidance composition algebra, dropout rates, and structural round trips.
"""

from __future__ import annotations

import numpy as np

from .dataset import ConditionDropoutPolicy, WeightDist, dropout_masks, generate_triplet, desk_combos
from .denoiser import DenoiserConfig, denoise_batch, init_denoiser_params
from .diffusion import ddim_step, forward_noise, linear_schedule
from .guidance import GuidanceScales, rtg_compose, build_mean_nulls
from .latent import (
    SegmentationSpec,
    desk_segmentation,
    make_world,
    merge_groups,
    pose_bins,
    split_groups,
)
from .metrics import auc_roc, diversity_score, make_embedding
from .optim import OptimizerState, optimizer_step
from .rng import rng_for
from .tensor import Tensor, attention, layer_norm, matmul, mse_loss, softmax, tsum


def _fd_gradient(f, x: Tensor, h: float = 1e-6) -> np.ndarray:
    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = fd.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return fd


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-10)
    return float(np.abs(a - b).max() / denom)


def run_selftest(verbose: bool = True) -> bool:
    checks: list[tuple[str, bool, str]] = []

    def record(name: str, ok: bool, detail: str = ""):
        checks.append((name, ok, detail))
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))

    rng = np.random.default_rng(0)

    # gradient spot checks against central differences
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 3)))

    def f_mat():
        return tsum(matmul(a, b) * w)

    f_mat().backward()
    err = max(_rel_err(_fd_gradient(f_mat, a), a.grad), _rel_err(_fd_gradient(f_mat, b), b.grad))
    record("matmul gradient vs finite differences", err < 1e-6, f"rel err {err:.2e}")

    for t in (a, b):
        t.zero_grad()
    x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    wx = Tensor(rng.standard_normal((2, 5)))

    def f_soft():
        return tsum(softmax(x, -1) * wx)

    f_soft().backward()
    err = _rel_err(_fd_gradient(f_soft, x), x.grad)
    record("softmax gradient vs finite differences", err < 1e-6, f"rel err {err:.2e}")

    # softmax normalization at an extreme input
    s = softmax(Tensor([[1000.0, 0.0]]), -1).data
    record(
        "softmax stability and normalization",
        abs(s.sum() - 1.0) < 1e-12 and abs(s[0, 0] - 1.0) < 1e-12,
        f"sum {s.sum():.1e}",
    )

    # AdamW hand-evaluated first step
    p = Tensor(np.zeros(1), requires_grad=True)
    state = OptimizerState(lr=0.1, weight_decay=0.0).init_for([p])
    optimizer_step([p], [np.ones(1)], state)
    record(
        "optimizer first-step magnitude",
        abs(p.data[0] + 0.1) < 1e-8,
        f"param {p.data[0]:.6f}",
    )

    # forward/inverse noise identity
    sched = linear_schedule()
    x0 = rng.standard_normal(16)
    eps = rng.standard_normal(16)
    x_t = forward_noise(x0, 300, eps, sched)
    eps_back = (x_t - np.sqrt(sched.alpha_bar(300)) * x0) / np.sqrt(
        1 - sched.alpha_bar(300)
    )
    record(
        "forward-noise epsilon inversion",
        _rel_err(eps, eps_back) < 1e-12,
        f"rel err {_rel_err(eps, eps_back):.1e}",
    )

    # DDIM with an oracle predictor lands exactly on x0
    x = forward_noise(x0, 500, eps, sched)
    levels = [500, 350, 200, 90, 10, 0]
    for t, tp in zip(levels[:-1], levels[1:]):
        x = ddim_step(x, x0, t, tp, sched)
    record(
        "oracle DDIM terminates at x0",
        _rel_err(x, x0) < 1e-12,
        f"rel err {_rel_err(x, x0):.1e}",
    )

    # guidance composition identities on a tiny random model
    spec = SegmentationSpec(group_dims=(2, 3, 2))
    cfg = DenoiserConfig(spec=spec, embed_dim=8, n_layers=1, n_heads=2)
    params = init_denoiser_params(cfg, rng, zero_untokenizer=False)
    xt = rng.standard_normal(7)
    c1, c2 = rng.standard_normal(7), rng.standard_normal(7)
    n1, n2 = rng.standard_normal(7), rng.standard_normal(7)
    from .denoiser import denoise

    uncond = denoise(xt, 5, n1, n2, params)
    zero = rtg_compose(params, xt, 5, c1, c2, GuidanceScales(0, 0), n1, n2)
    pure = rtg_compose(params, xt, 5, c1, c2, GuidanceScales(1.0, 0.0), n1, n2)
    cond_only = denoise(xt, 5, c1, n2, params)
    nulldelta = rtg_compose(params, xt, 5, n1, c2, GuidanceScales(3.0, 0.7), n1, n2)
    nulldelta2 = rtg_compose(params, xt, 5, n1, c2, GuidanceScales(0.1, 0.7), n1, n2)
    ok = (
        np.max(np.abs(zero - uncond)) < 1e-12
        and np.max(np.abs(pure - cond_only)) < 1e-12
        and np.max(np.abs(nulldelta - nulldelta2)) < 1e-12
    )
    record("guidance composition identities", ok)

    # dropout rates over a large draw
    d1, d2 = dropout_masks(ConditionDropoutPolicy(), rng_for(1, "drop"), 200000)
    only1 = np.mean(d1 & ~d2)
    only2 = np.mean(d2 & ~d1)
    both = np.mean(d1 & d2)
    ok = (
        abs(only1 - 0.10) < 0.005 and abs(only2 - 0.10) < 0.005 and abs(both - 0.01) < 0.005
    )
    record(
        "condition dropout rates",
        ok,
        f"{only1:.4f}/{only2:.4f}/{both:.4f}",
    )

    # split/merge round trip and pose encoding
    spec = desk_segmentation()
    v = rng.standard_normal(spec.total_dim)
    ok = np.array_equal(merge_groups(split_groups(v, spec), spec), v)
    record("segmentation split/merge round trip", ok)
    pb = pose_bins(7.5)
    record(
        "pose interpolation at 7.5 degrees",
        abs(pb[6] - 0.5) < 1e-12 and abs(pb[7] - 0.5) < 1e-12 and abs(pb.sum() - 1) < 1e-12,
    )

    # triplet interpolation invariant
    world = make_world(spec, seed=3)
    trip = generate_triplet(world, rng_for(4, "t"), WeightDist(), desk_combos())
    raw = trip.weight * trip.father + (1 - trip.weight) * trip.mother
    diff = trip.child - raw
    plane = np.abs(diff @ world.d_age) + np.abs(diff @ world.d_gender)
    ortho = np.linalg.norm(diff - (diff @ world.d_age) * world.d_age - (diff @ world.d_gender) * world.d_gender)
    record(
        "triplet child = interpolation + attribute-plane edit",
        ortho < 1e-9,
        f"orthogonal residue {ortho:.1e}",
    )

    # ranking metric on hand cases
    ok = (
        auc_roc([0.9, 0.8], [0.1, 0.2]) == 1.0
        and abs(auc_roc([0.6], [0.4, 0.7]) - 0.5) < 1e-12
        and abs(auc_roc([1, 2], [1, 2]) - 0.5) < 1e-12
    )
    record("rank-sum AUC hand cases", ok)

    embed = make_embedding(spec.total_dim, 16, seed=0)
    same = np.repeat(rng.standard_normal(spec.total_dim)[None], 4, axis=0)
    record(
        "diversity of identical samples is exactly 1",
        diversity_score(same, embed) == 1.0,
    )

    return all(ok for _, ok, _ in checks)
