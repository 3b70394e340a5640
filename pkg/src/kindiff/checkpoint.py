"""Checkpoint container: config, denoiser weights, nulls, optimizer, schedule.

Built on the shared binary container, so save -> load -> save is byte-exact
and every block is CRC-checked. Loading against a different configuration
fails loudly on the stored config hash.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (
    RunConfig,
    build_denoiser_config,
    config_from_dict,
    config_hash,
    config_to_dict,
)
from .container import load_container, save_container
from .denoiser import DenoiserParams
from .diffusion import DiffusionSchedule
from .errors import ConfigError
from .guidance import NullConditionRegistry
from .optim import OptimizerState
from .tensor import Tensor


@dataclass
class Checkpoint:
    config: RunConfig
    task: str
    epoch: int
    params: DenoiserParams
    registry: NullConditionRegistry | None
    opt_state: OptimizerState | None
    schedule_betas: np.ndarray
    attribute_block: dict[str, np.ndarray] | None


def save_checkpoint(
    path: str | Path,
    config: RunConfig,
    task: str,
    params: DenoiserParams,
    schedule: DiffusionSchedule,
    registry: NullConditionRegistry | None = None,
    opt_state: OptimizerState | None = None,
    epoch: int = 0,
    attribute_block: dict[str, np.ndarray] | None = None,
) -> None:
    blocks: dict[str, np.ndarray] = {}
    for name, arr in params.as_arrays().items():
        blocks[f"denoiser/{name}"] = arr
    blocks["schedule/betas"] = schedule.betas
    sections = ["denoiser", "schedule"]
    meta: dict = {
        "kind": "checkpoint",
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
        "task": task,
        "epoch": epoch,
    }
    if registry is not None:
        blocks["nulls/table"] = registry.table.data
        meta["null_mode"] = registry.mode
        sections.append("nulls")
    if opt_state is not None:
        meta["opt"] = {
            "lr": opt_state.lr,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "weight_decay": opt_state.weight_decay,
            "step": opt_state.step,
            "count": len(opt_state.m),
        }
        for i, (m, v) in enumerate(zip(opt_state.m, opt_state.v)):
            blocks[f"opt/m/{i:04d}"] = m
            blocks[f"opt/v/{i:04d}"] = v
        sections.append("opt")
    if attribute_block is not None:
        for name, arr in attribute_block.items():
            blocks[f"attr/{name}"] = arr
        sections.append("attr")
    meta["sections_present"] = sections
    save_container(path, meta, blocks)


def load_checkpoint(
    path: str | Path, expected_config: RunConfig | None = None
) -> Checkpoint:
    meta, blocks = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise ConfigError(f"{path}: not a checkpoint container")
    config = config_from_dict(meta["config"])
    stored_hash = meta["config_hash"]
    if stored_hash != config_hash(config):
        raise ConfigError(f"{path}: stored config does not match its hash")
    if expected_config is not None and config_hash(expected_config) != stored_hash:
        raise ConfigError(
            f"{path}: checkpoint config hash {stored_hash[:12]} does not match "
            f"the requested configuration {config_hash(expected_config)[:12]}"
        )

    den_arrays = {
        name.split("/", 1)[1]: arr
        for name, arr in blocks.items()
        if name.startswith("denoiser/")
    }
    params = DenoiserParams.from_arrays(build_denoiser_config(config), den_arrays)

    registry = None
    if "nulls/table" in blocks:
        mode = meta["null_mode"]
        registry = NullConditionRegistry(
            mode, Tensor(blocks["nulls/table"], requires_grad=(mode == "learned"))
        )

    opt_state = None
    if "opt" in meta:
        o = meta["opt"]
        opt_state = OptimizerState(
            lr=o["lr"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
            weight_decay=o["weight_decay"],
            step=o["step"],
            m=[blocks[f"opt/m/{i:04d}"] for i in range(o["count"])],
            v=[blocks[f"opt/v/{i:04d}"] for i in range(o["count"])],
        )

    attr = None
    attr_blocks = {
        name.split("/", 1)[1]: arr
        for name, arr in blocks.items()
        if name.startswith("attr/")
    }
    if attr_blocks:
        attr = attr_blocks

    return Checkpoint(
        config=config,
        task=meta["task"],
        epoch=int(meta["epoch"]),
        params=params,
        registry=registry,
        opt_state=opt_state,
        schedule_betas=blocks["schedule/betas"],
        attribute_block=attr,
    )
