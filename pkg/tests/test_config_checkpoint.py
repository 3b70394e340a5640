import dataclasses
import json

import numpy as np
import pytest

from kindiff.checkpoint import load_checkpoint, save_checkpoint
from kindiff.config import (
    RunConfig,
    build_denoiser_config,
    build_schedule,
    config_from_dict,
    config_hash,
    config_to_dict,
    desk_config,
    load_config,
    paper_config,
    preset_config,
    save_config,
    with_master_seed,
)
from kindiff.container import load_container, save_container
from kindiff.denoiser import init_denoiser_params
from kindiff.errors import ConfigError
from kindiff.guidance import build_mean_nulls
from kindiff.latent import make_world
from kindiff.optim import OptimizerState
from kindiff.rng import rng_for


def test_config_json_roundtrip(tmp_path):
    cfg = desk_config()
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_paper_preset_values():
    cfg = paper_config()
    assert sum(cfg.group_dims) == 9088
    assert len(cfg.group_dims) == 26
    assert cfg.denoiser.embed_dim == 512
    assert cfg.denoiser.n_layers == 8
    assert cfg.denoiser.n_heads == 8
    assert cfg.dataset.n == 100000
    assert cfg.dataset.combos == "paper"
    assert cfg.training.batch_size == 1000
    assert cfg.training.epochs == 4000
    assert cfg.schedule.timesteps == 500
    assert cfg.schedule.inference_steps == 50
    assert cfg.guidance.null_samples == 10000


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError):
        preset_config("galaxy-scale")


def test_unknown_keys_rejected():
    doc = config_to_dict(desk_config())
    doc["denoiser"]["banana"] = 1
    with pytest.raises(ConfigError, match="banana"):
        config_from_dict(doc)
    doc = config_to_dict(desk_config())
    doc["bogus"] = {}
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict(doc)


def test_cross_field_validation():
    doc = config_to_dict(desk_config())
    doc["denoiser"]["embed_dim"] = 30  # not divisible by 4 heads
    with pytest.raises(ConfigError):
        config_from_dict(doc)
    doc = config_to_dict(desk_config())
    doc["dropout"]["p_only1"] = 0.9
    doc["dropout"]["p_only2"] = 0.2
    with pytest.raises(ConfigError):
        config_from_dict(doc)
    doc = config_to_dict(desk_config())
    doc["eval"]["embed_dim"] = 4000
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_master_seed_rederives_section_seeds():
    cfg = desk_config()
    a = with_master_seed(cfg, 1)
    b = with_master_seed(cfg, 1)
    c = with_master_seed(cfg, 2)
    assert a == b
    assert a.dataset.seed != c.dataset.seed
    assert a.training.seed != c.training.seed
    assert a.dataset.seed != a.training.seed


def test_config_hash_sensitivity():
    cfg = desk_config()
    other = dataclasses.replace(
        cfg, training=dataclasses.replace(cfg.training, lr=2e-3)
    )
    assert config_hash(cfg) != config_hash(other)


# -- container/checkpoint -----------------------------------------------------

def test_container_roundtrip_and_integrity(tmp_path, rng):
    path = tmp_path / "c.bin"
    blocks = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}
    save_container(path, {"kind": "test", "x": 1}, blocks)
    meta, back = load_container(path)
    assert meta == {"kind": "test", "x": 1}
    assert np.array_equal(back["a"], blocks["a"])
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ConfigError):
        load_container(path)


def _mini_config():
    doc = config_to_dict(desk_config())
    doc["group_dims"] = [2, 2, 2]
    doc["denoiser"] = {"embed_dim": 8, "n_layers": 1, "n_heads": 2, "mlp_ratio": 2}
    doc["eval"]["embed_dim"] = 4
    doc["schedule"]["timesteps"] = 20
    doc["schedule"]["inference_steps"] = 4
    return config_from_dict(doc)


def test_checkpoint_roundtrip_byte_exact(tmp_path):
    cfg = _mini_config()
    world = make_world(build_denoiser_config(cfg).spec, seed=1)
    params = init_denoiser_params(build_denoiser_config(cfg), rng_for(0, "p"))
    schedule = build_schedule(cfg)
    registry = build_mean_nulls(world, 20, rng_for(1, "n"))
    state = OptimizerState().init_for(params.parameter_list())
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(
        p1, cfg, "child", params, schedule, registry=registry,
        opt_state=state, epoch=3,
    )
    ck = load_checkpoint(p1)
    assert ck.task == "child"
    assert ck.epoch == 3
    assert ck.registry.mode == "mean"
    assert len(ck.opt_state.m) == len(params.parameter_list())
    save_checkpoint(
        p2, ck.config, ck.task, ck.params, schedule, registry=ck.registry,
        opt_state=ck.opt_state, epoch=ck.epoch,
    )
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_config_hash_mismatch_fails(tmp_path):
    cfg = _mini_config()
    params = init_denoiser_params(build_denoiser_config(cfg), rng_for(0, "p"))
    schedule = build_schedule(cfg)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, cfg, "child", params, schedule)
    other = dataclasses.replace(
        cfg, training=dataclasses.replace(cfg.training, lr=9e-3)
    )
    with pytest.raises(ConfigError, match="hash"):
        load_checkpoint(path, expected_config=other)
    back = load_checkpoint(path, expected_config=cfg)
    assert np.array_equal(back.params["pos"].data, params["pos"].data)


def test_checkpoint_learned_registry_mode_roundtrip(tmp_path):
    cfg = _mini_config()
    world = make_world(build_denoiser_config(cfg).spec, seed=1)
    params = init_denoiser_params(build_denoiser_config(cfg), rng_for(0, "p"))
    registry = build_mean_nulls(world, 10, rng_for(1, "n")).as_learned()
    path = tmp_path / "l.ckpt"
    save_checkpoint(path, cfg, "child", params, build_schedule(cfg), registry=registry)
    back = load_checkpoint(path)
    assert back.registry.mode == "learned"
    assert back.registry.table.requires_grad


def test_checkpoint_attr_section_roundtrip(tmp_path):
    cfg = _mini_config()
    params = init_denoiser_params(build_denoiser_config(cfg), rng_for(0, "p"))
    attr = {"w0": np.ones((3, 2)), "b0": np.zeros(2)}
    path = tmp_path / "attr.ckpt"
    save_checkpoint(
        path, cfg, "child", params, build_schedule(cfg), attribute_block=attr
    )
    back = load_checkpoint(path)
    assert np.array_equal(back.attribute_block["w0"], attr["w0"])


def test_not_a_checkpoint_rejected(tmp_path):
    path = tmp_path / "raw.bin"
    save_container(path, {"kind": "something"}, {"x": np.zeros(2)})
    with pytest.raises(ConfigError):
        load_checkpoint(path)
