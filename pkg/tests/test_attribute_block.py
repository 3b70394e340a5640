import numpy as np
import pytest

from kindiff.attribute_block import (
    AttrBatch,
    AttributeBlockParams,
    LossWeights,
    ProbeSet,
    attribute_losses,
    evaluate_attribute_block,
    init_attribute_block,
    make_probes,
    offset_apply,
    sample_attr_batch,
    three_variants,
    train_attribute_block,
)
from kindiff.errors import ConfigError
from kindiff.latent import SegmentationSpec, make_world, pose_bins
from kindiff.optim import grads_for
from kindiff.rng import rng_for
from kindiff.tensor import Tensor

from gradcheck import block_rel_err, fd_gradient, analytic_gradients


@pytest.fixture(scope="module")
def tiny_world():
    return make_world(SegmentationSpec(group_dims=(3, 3)), seed=5)


def ones_batch(world, n=3, seed=0):
    return sample_attr_batch(world, rng_for(seed, "b"), n)


def test_zero_mlp_is_identity(tiny_world):
    params = init_attribute_block(6, rng_for(0, "i"), hidden=8)
    batch = ones_batch(tiny_world)
    out = offset_apply(
        params, batch.latents, batch.target_ages, batch.target_genders,
        batch.target_poses,
    ).data
    assert np.array_equal(out, batch.latents)
    assert out.shape == batch.latents.shape


def test_three_variants_zero_mlp_all_equal(tiny_world):
    params = init_attribute_block(6, rng_for(0, "i"), hidden=8)
    batch = ones_batch(tiny_world)
    syn, rec, cyc = three_variants(params, batch)
    assert np.array_equal(syn.data, batch.latents)
    assert np.array_equal(rec.data, batch.latents)
    assert np.array_equal(cyc.data, batch.latents)


def _randomize(params, seed=3, scale=0.1):
    r = np.random.default_rng(seed)
    for t in params.parameter_list():
        t.data[...] = scale * r.standard_normal(t.shape)
    return params


def test_variants_with_matching_targets(tiny_world):
    params = _randomize(init_attribute_block(6, rng_for(0, "i"), hidden=8))
    batch = ones_batch(tiny_world)
    batch.target_ages = batch.gt_ages.copy()
    batch.target_genders = batch.gt_genders.copy()
    batch.target_poses = batch.gt_poses.copy()
    syn, rec, cyc = three_variants(params, batch)
    assert np.allclose(syn.data, rec.data, atol=1e-14)


def test_cycle_depends_on_target(tiny_world):
    params = _randomize(init_attribute_block(6, rng_for(0, "i"), hidden=8))
    batch = ones_batch(tiny_world)
    _, _, cyc1 = three_variants(params, batch)
    batch.target_ages = np.clip(batch.target_ages + 0.3, 0, 1)
    _, _, cyc2 = three_variants(params, batch)
    assert not np.allclose(cyc1.data, cyc2.data)


def test_rec_ignores_target_attrs(tiny_world):
    params = _randomize(init_attribute_block(6, rng_for(0, "i"), hidden=8))
    batch = ones_batch(tiny_world)
    _, rec1, _ = three_variants(params, batch)
    batch.target_ages = np.clip(batch.target_ages + 0.4, 0, 1)
    batch.target_genders = 1.0 - batch.target_genders
    _, rec2, _ = three_variants(params, batch)
    assert np.array_equal(rec1.data, rec2.data)


def test_all_zero_weights_give_zero_total(tiny_world):
    params = _randomize(init_attribute_block(6, rng_for(0, "i"), hidden=8))
    probes = make_probes(tiny_world, seed=1)
    weights = LossWeights(0, 0, 0, 0, 0, 0, xi=0.0)
    batch = ones_batch(tiny_world)
    total, breakdown = attribute_losses(probes, weights, three_variants(params, batch), batch)
    assert total.item() == 0.0
    assert all(v >= 0 for k, v in breakdown.items() if k != "epoch")


def test_zero_mlp_reg_zero_age_residual(tiny_world):
    params = init_attribute_block(6, rng_for(0, "i"), hidden=8)
    probes = make_probes(tiny_world, seed=1)
    batch = ones_batch(tiny_world)
    batch.target_ages = batch.gt_ages.copy()
    batch.target_genders = batch.gt_genders.copy()
    batch.target_poses = batch.gt_poses.copy()
    total, bd = attribute_losses(
        probes, LossWeights(), three_variants(params, batch), batch
    )
    assert bd["reg"] == 0.0
    # each age term reduces to the unmodified latent's squared probe residual
    resid = np.mean(
        (
            (0.5 + tiny_world.age_gain * (batch.latents @ tiny_world.d_age))
            - batch.gt_ages
        )
        ** 2
    )
    assert bd["age"] == pytest.approx(3 * resid, rel=1e-9, abs=1e-12)


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(lambda_id=-1.0)


def test_total_monotone_in_weights(tiny_world):
    params = _randomize(init_attribute_block(6, rng_for(0, "i"), hidden=8))
    probes = make_probes(tiny_world, seed=1)
    batch = ones_batch(tiny_world)
    variants = three_variants(params, batch)
    lo, _ = attribute_losses(probes, LossWeights(lambda_age=1.0), variants, batch)
    hi, _ = attribute_losses(probes, LossWeights(lambda_age=5.0), variants, batch)
    assert hi.item() >= lo.item()


def test_hand_computed_total_matches_formulas():
    # 2-dim latent, explicit probes, one linear offset layer: evaluate the
    # six losses with independent numpy arithmetic
    world = make_world(SegmentationSpec(group_dims=(1, 1)), seed=0)
    probes = ProbeSet(
        d_age=np.array([1.0, 0.0]),
        age_gain=1.0,
        d_gender=np.array([0.0, 1.0]),
        gender_logit_scale=2.0,
        pose_matrix=np.vstack([np.ones((1, 2)), np.zeros((12, 2))]),
        perceptual_matrix=np.array([[1.0, -1.0]]),
    )
    rng = np.random.default_rng(7)
    w0 = 0.05 * rng.standard_normal((17, 2))
    b0 = 0.02 * rng.standard_normal(2)
    params = AttributeBlockParams(
        weights=[Tensor(w0, requires_grad=True)],
        biases=[Tensor(b0, requires_grad=True)],
        latent_dim=2,
    )
    latent = np.array([[0.4, -0.2]])
    gt = dict(age=0.9, gender=1.0, pose=pose_bins(0.0))
    tgt = dict(age=0.3, gender=0.0, pose=pose_bins(30.0))
    batch = AttrBatch(
        latents=latent,
        gt_ages=np.array([gt["age"]]),
        gt_genders=np.array([gt["gender"]]),
        gt_poses=gt["pose"][None],
        target_ages=np.array([tgt["age"]]),
        target_genders=np.array([tgt["gender"]]),
        target_poses=tgt["pose"][None],
    )
    weights = LossWeights()
    total, bd = attribute_losses(
        probes, weights, three_variants(params, batch), batch
    )

    def mlp(w, age, gender, pose):
        x = np.concatenate([w, [age, gender], pose])
        return x @ w0 + b0

    syn = latent[0] + mlp(latent[0], tgt["age"], tgt["gender"], tgt["pose"])
    rec = latent[0] + mlp(latent[0], gt["age"], gt["gender"], gt["pose"])
    cyc = syn + mlp(syn, gt["age"], gt["gender"], gt["pose"])

    def age_of(v):
        return 0.5 + v @ probes.d_age

    def bce(v, y):
        logit = 2.0 * (v @ probes.d_gender)
        return np.logaddexp(0.0, logit) - logit * y

    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

    def sq(v):
        return float(np.sum(np.square(v)))

    l_age = (
        sq(tgt["age"] - age_of(syn))
        + sq(gt["age"] - age_of(rec))
        + sq(gt["age"] - age_of(cyc))
    )
    l_gen = bce(syn, tgt["gender"]) + bce(rec, gt["gender"]) + bce(cyc, gt["gender"])
    l_pose = (
        sq(tgt["pose"] - probes.pose_matrix @ syn)
        + sq(gt["pose"] - probes.pose_matrix @ rec)
        + sq(gt["pose"] - probes.pose_matrix @ cyc)
    )
    w = latent[0]
    l_id = (
        weights.xi * (1 - cos(syn, w)) + (1 - cos(rec, w)) + (1 - cos(cyc, w))
    )
    l_reg = sq(syn - w) + sq(rec - w) + sq(cyc - syn)
    P = probes.perceptual_matrix
    l_per = sq(P @ w - P @ syn) + sq(P @ w - P @ rec) + sq(P @ w - P @ cyc)
    expected = (
        0.5 * l_id + 8 * l_age + 1 * l_gen + 8 * l_pose + 0.05 * l_reg + 0.5 * l_per
    )
    assert total.item() == pytest.approx(expected, abs=1e-12)


def test_loss_gradients_match_fd(tiny_world):
    params = _randomize(init_attribute_block(6, rng_for(2, "i"), hidden=6), scale=0.05)
    probes = make_probes(tiny_world, seed=1)
    batch = ones_batch(tiny_world, n=2, seed=4)

    def loss():
        return attribute_losses(
            probes, LossWeights(), three_variants(params, batch), batch
        )[0]

    tensors = params.parameter_list()
    grads = analytic_gradients(loss, tensors)
    for t, g in zip(tensors, grads):
        fd = fd_gradient(loss, t)
        assert block_rel_err(fd, g) < 1e-4


def test_training_improves_attribute_control():
    # desk-world retargeting quality: the held-out readouts must hit the
    # requested attributes while identity features stay far from unrelated
    from kindiff.latent import desk_segmentation

    world = make_world(desk_segmentation(), seed=3)
    probes = make_probes(world, seed=4)
    params, log = train_attribute_block(
        world, probes, LossWeights(), epochs=60, steps_per_epoch=25,
        batch_size=128, lr=5e-3, seed=1,
    )
    assert log[-1]["total"] < log[0]["total"]
    scores = evaluate_attribute_block(world, params, n=1000, seed=11)
    assert scores["age_mse"] < 0.01
    assert scores["gender_acc"] > 0.95
    assert scores["identity_cos"] > scores["unrelated_cos"]
