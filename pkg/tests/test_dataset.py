import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from kindiff.dataset import (
    ConditionDropoutPolicy,
    TaskArrangement,
    WeightDist,
    apply_dropout,
    arrange_dataset,
    arrange_example,
    desk_combos,
    dropout_masks,
    generate_dataset,
    generate_triplet,
    linear_partner_baseline,
    load_dataset,
    paper_combos,
    save_dataset,
)
from kindiff.errors import ConfigError, DimensionError
from kindiff.guidance import build_mean_nulls
from kindiff.latent import desk_segmentation, make_world
from kindiff.metrics import weight_recovery
from kindiff.rng import rng_for


@pytest.fixture(scope="module")
def world():
    return make_world(desk_segmentation(), seed=7)


@pytest.fixture(scope="module")
def small_ds(world):
    return generate_dataset(world, 200, WeightDist(), seed=5)


def _attr_plane_removed(world, v):
    return (
        v
        - (v @ world.d_age) * world.d_age
        - (v @ world.d_gender) * world.d_gender
    )


def test_triplet_child_is_interpolation_before_attributes(world):
    t = generate_triplet(world, rng_for(1, "t"), WeightDist(), desk_combos())
    raw = t.weight * t.father + (1 - t.weight) * t.mother
    assert np.allclose(
        _attr_plane_removed(world, t.child), _attr_plane_removed(world, raw),
        atol=1e-12,
    )


def test_triplet_parents_have_opposite_genders(world):
    t = generate_triplet(world, rng_for(2, "t"), WeightDist(), desk_combos())
    assert {t.father_label.gender, t.mother_label.gender} == {0, 1}
    assert t.father_label.gender == 1


def test_interpolation_endpoints():
    father = np.array([1.0, 2.0])
    mother = np.array([-3.0, 5.0])
    assert np.array_equal(1.0 * father + 0.0 * mother, father)
    assert np.allclose(0.5 * father + 0.5 * mother, (father + mother) / 2)


def test_weight_dist_requires_open_interval():
    with pytest.raises(ConfigError):
        WeightDist(low=0.0, high=0.5)
    with pytest.raises(ConfigError):
        WeightDist(low=0.5, high=1.0)


def test_child_between_parents_componentwise(world):
    # pre-attribute interpolant lies on the parental segment
    t = generate_triplet(world, rng_for(3, "t"), WeightDist(), desk_combos())
    raw = t.weight * t.father + (1 - t.weight) * t.mother
    lo = np.minimum(t.father, t.mother) - 1e-12
    hi = np.maximum(t.father, t.mother) + 1e-12
    assert np.all(raw >= lo) and np.all(raw <= hi)


def test_dataset_deterministic_and_sized(world, tmp_path):
    a = generate_dataset(world, 50, WeightDist(), seed=9)
    b = generate_dataset(world, 50, WeightDist(), seed=9)
    assert np.array_equal(a.children, b.children)
    assert len(a) == 50
    pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
    save_dataset(a, pa)
    save_dataset(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_dataset_size_validation(world):
    with pytest.raises(ConfigError):
        generate_dataset(world, 0, WeightDist(), seed=1)


def test_dataset_roundtrip(world, small_ds, tmp_path):
    path = tmp_path / "ds.bin"
    save_dataset(small_ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.children, small_ds.children)
    assert np.array_equal(back.weights, small_ds.weights)
    assert back.w_dist == small_ds.w_dist
    assert back.group_dims == small_ds.group_dims


def test_dataset_corruption_detected(world, small_ds, tmp_path):
    path = tmp_path / "ds.bin"
    save_dataset(small_ds, path)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ConfigError):
        load_dataset(path)


def test_weight_recovery_against_stored_weights(world):
    ds = generate_dataset(world, 400, WeightDist(), seed=11)
    errs_pre, errs_post = [], []
    for i in range(len(ds)):
        raw = ds.weights[i] * ds.fathers[i] + (1 - ds.weights[i]) * ds.mothers[i]
        w_pre = weight_recovery(raw, ds.fathers[i], ds.mothers[i])[0]
        w_post = weight_recovery(ds.children[i], ds.fathers[i], ds.mothers[i])[0]
        errs_pre.append(abs(w_pre - ds.weights[i]))
        errs_post.append(abs(w_post - ds.weights[i]))
    assert max(errs_pre) < 1e-9
    assert np.mean(errs_post) < 0.05


def test_combo_tables():
    desk = desk_combos()
    paper = paper_combos()
    assert desk.shape == (20, 2)
    assert paper.shape == (200, 2)
    assert set(desk[:, 1]) == {0.0, 1.0}
    assert paper[:, 0].min() == 0.0 and paper[:, 0].max() == 1.0


# -- arrangement ----------------------------------------------------------------

def test_arrange_example_variants(world):
    t = generate_triplet(world, rng_for(4, "t"), WeightDist(), desk_combos())
    c1, c2, target, label = arrange_example(t, TaskArrangement.CHILD)
    assert c1 is t.father and c2 is t.mother and target is t.child
    c1, c2, target, label = arrange_example(t, TaskArrangement.PARTNER_MOTHER)
    assert c1 is t.child and c2 is t.father and target is t.mother
    assert label.gender == 0
    c1, c2, target, label = arrange_example(t, TaskArrangement.PARTNER_FATHER)
    assert c1 is t.child and c2 is t.mother and target is t.father
    assert label.gender == 1


def test_arrangement_preserves_latent_multiset(world, small_ds):
    for task in TaskArrangement:
        c1, c2, target, _, _ = arrange_dataset(small_ds, task, world)
        stacked = np.sort(
            np.concatenate([c1, c2, target], axis=0).reshape(-1)
        )
        original = np.sort(
            np.concatenate(
                [small_ds.fathers, small_ds.mothers, small_ds.children], axis=0
            ).reshape(-1)
        )
        assert np.array_equal(stacked, original)


# -- dropout ---------------------------------------------------------------------

def test_zero_policy_never_drops():
    d1, d2 = dropout_masks(
        ConditionDropoutPolicy(0.0, 0.0, 0.0), rng_for(0, "d"), 1000
    )
    assert not d1.any() and not d2.any()


def test_dropout_rates_within_half_percent():
    d1, d2 = dropout_masks(ConditionDropoutPolicy(), rng_for(1, "d"), 100000)
    only1 = np.mean(d1 & ~d2)
    only2 = np.mean(d2 & ~d1)
    both = np.mean(d1 & d2)
    assert abs(only1 - 0.10) < 0.005
    assert abs(only2 - 0.10) < 0.005
    assert abs(both - 0.01) < 0.005


def test_dropout_deterministic_per_seed():
    a = dropout_masks(ConditionDropoutPolicy(), rng_for(3, "d"), 500)
    b = dropout_masks(ConditionDropoutPolicy(), rng_for(3, "d"), 500)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_policy_validation():
    with pytest.raises(ConfigError):
        ConditionDropoutPolicy(0.6, 0.5, 0.0)
    with pytest.raises(ConfigError):
        ConditionDropoutPolicy(-0.1, 0.0, 0.0)


def test_apply_dropout_substitutes_target_null(world):
    t = generate_triplet(world, rng_for(5, "t"), WeightDist(), desk_combos())
    registry = build_mean_nulls(world, 50, rng_for(6, "nulls"))
    example = arrange_example(t, TaskArrangement.CHILD)
    always = ConditionDropoutPolicy(0.0, 0.0, 1.0)
    c1, c2, target, label = apply_dropout(example, always, rng_for(7, "d"), registry)
    expected = registry.null_for(label.age, label.gender)
    assert np.array_equal(c1, expected) and np.array_equal(c2, expected)
    assert target is t.child


# -- linear partner baseline ------------------------------------------------------

def test_baseline_midpoint_recovers_partner(rng):
    f = rng.standard_normal(10)
    m = rng.standard_normal(10)
    child = 0.5 * (f + m)
    assert np.allclose(linear_partner_baseline(child, f), m, atol=1e-12)


def test_baseline_child_equals_parent(rng):
    f = rng.standard_normal(10)
    assert np.array_equal(linear_partner_baseline(f, f), f)


@given(st.floats(0.05, 0.95), st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_baseline_error_scales_with_weight_offset(w, seed):
    r = np.random.default_rng(seed)
    f = r.standard_normal(12)
    m = r.standard_normal(12)
    child = w * f + (1 - w) * m
    err = np.linalg.norm(linear_partner_baseline(child, f) - m)
    assert err == pytest.approx(abs(2 * w - 1) * np.linalg.norm(f - m), rel=1e-9, abs=1e-9)


def test_baseline_shape_mismatch():
    with pytest.raises(DimensionError):
        linear_partner_baseline(np.zeros(3), np.zeros(4))
