"""Command-line driver: dataset generation, training, sampling, evaluation,
ablation, guidance sweeps, the partner baseline, and a self-test suite.

Exit codes: 0 success, 2 configuration error, 3 numeric failure. The
``STYLEDIT_THREADS`` environment variable caps BLAS parallelism; it must be
set before any numpy work, which is why this module configures the thread
environment at import time.
"""

from __future__ import annotations

import os

_cap = os.environ.get("STYLEDIT_THREADS")
if _cap:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    RunConfig,
    build_denoiser_config,
    build_dropout_policy,
    build_schedule,
    build_segmentation,
    build_training_config,
    build_weight_dist,
    build_world,
    config_hash,
    load_config,
    preset_config,
    with_master_seed,
)
from .container import load_container, save_container
from .dataset import (
    TaskArrangement,
    combos_table,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .diffusion import sample_batch
from .errors import ConfigError, DimensionError, NumericFailure, RangeError
from .experiments import (
    FamilyEvalSettings,
    evaluate_families,
    guidance_sweep,
    partner_baseline_comparison,
)
from .guidance import GuidanceScales, build_mean_nulls, default_scales
from .latent import readout_age, readout_gender
from .metrics import make_embedding
from .rng import rng_for
from .training import train_denoiser, train_regression


def _parse_task(name: str) -> TaskArrangement:
    try:
        return TaskArrangement(name)
    except ValueError:
        raise ConfigError(
            f"unknown task {name!r}; choose child, partner-father, partner-mother"
        )


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else preset_config(args.preset)
    if args.seed is not None:
        cfg = with_master_seed(cfg, args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    world = build_world(cfg)
    ds = generate_dataset(
        world,
        cfg.dataset.n,
        build_weight_dist(cfg),
        seed=cfg.dataset.seed,
        combos=combos_table(cfg.dataset.combos),
    )
    path = out / "dataset.bin"
    save_dataset(ds, path)
    print(
        f"wrote {path}: n={len(ds)} seed={ds.seed} "
        f"w~U({ds.w_dist.low},{ds.w_dist.high}) combos={cfg.dataset.combos} "
        f"config={config_hash(cfg)[:12]}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    task = _parse_task(args.task)
    ds = load_dataset(args.dataset)
    if tuple(ds.group_dims) != tuple(cfg.group_dims):
        raise ConfigError(
            f"dataset groups {ds.group_dims} do not match config {cfg.group_dims}"
        )
    world = build_world(cfg)
    schedule = build_schedule(cfg)
    den_cfg = build_denoiser_config(cfg)
    tcfg = build_training_config(cfg)
    policy = build_dropout_policy(cfg)
    registry = build_mean_nulls(
        world, cfg.guidance.null_samples, rng_for(cfg.world.seed, "mean-nulls")
    )
    if cfg.guidance.null_mode == "learned":
        registry = registry.as_learned()

    ckpt_path = out / "checkpoint.bin"
    start_state = None
    if args.resume:
        prev = load_checkpoint(args.resume, expected_config=cfg)
        if prev.task != task.value:
            raise ConfigError(
                f"resume checkpoint task {prev.task!r} != requested {task.value!r}"
            )
        if prev.registry is not None:
            registry = prev.registry
        start_state = (prev.params, prev.opt_state, prev.epoch)
        print(f"resuming from {args.resume} at epoch {prev.epoch}")

    def on_epoch_end(epoch, result):
        cadence = cfg.training.checkpoint_every
        if cadence and (epoch + 1) % cadence == 0:
            save_checkpoint(
                ckpt_path, cfg, task.value, result.params, schedule,
                registry=result.registry, opt_state=result.opt_state,
                epoch=result.epochs_run,
            )
        print(
            f"epoch {epoch}: train {result.epoch_log[-1][1]:.6f} "
            f"held {result.epoch_log[-1][2]:.6f}",
            flush=True,
        )

    try:
        result = train_denoiser(
            ds, task, world, den_cfg, schedule, policy, registry, tcfg,
            on_epoch_end=on_epoch_end, start_state=start_state,
        )
    except NumericFailure:
        print(
            f"training aborted on numeric failure; last cadence checkpoint "
            f"(if any) retained at {ckpt_path}",
            file=sys.stderr,
        )
        raise

    save_checkpoint(
        ckpt_path, cfg, task.value, result.params, schedule,
        registry=result.registry, opt_state=result.opt_state,
        epoch=result.epochs_run,
    )
    _write_csv(
        out / "loss.csv",
        ("step", "loss", "lr", "wall_time"),
        (
            {"step": s, "loss": repr(l), "lr": repr(lr), "wall_time": repr(w)}
            for s, l, lr, w in result.step_log
        ),
    )
    _write_csv(
        out / "epochs.csv",
        ("epoch", "train_loss", "heldout_loss"),
        (
            {"epoch": e, "train_loss": repr(tr), "heldout_loss": repr(he)}
            for e, tr, he in result.epoch_log
        ),
    )
    print(
        f"trained {result.epochs_run} epochs; final held-out loss "
        f"{result.epoch_log[-1][2]:.6f}; wrote {ckpt_path}"
    )
    return 0


def _scales_for(cfg: RunConfig, task: TaskArrangement, args) -> GuidanceScales:
    g1 = args.g1 if getattr(args, "g1", None) is not None else cfg.guidance.g1
    g2 = args.g2 if getattr(args, "g2", None) is not None else cfg.guidance.g2
    base = default_scales(task)
    return GuidanceScales(
        g1 if g1 is not None else base.g1, g2 if g2 is not None else base.g2
    )


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    task = _parse_task(ckpt.task)
    out = _out_dir(args)
    world = build_world(cfg)
    schedule = build_schedule(cfg)
    if ckpt.registry is None:
        raise ConfigError("checkpoint has no null-condition registry")

    if args.cond_file:
        meta, blocks = load_container(args.cond_file)
        cond1, cond2 = blocks["cond1"], blocks["cond2"]
        if cond1.ndim == 1:
            cond1, cond2 = cond1[None], cond2[None]
    elif args.dataset is not None and args.index is not None:
        ds = load_dataset(args.dataset)
        from .dataset import arrange_dataset

        c1, c2, _, _, _ = arrange_dataset(ds, task, world)
        cond1, cond2 = c1[args.index][None], c2[args.index][None]
    else:
        raise ConfigError("provide either --cond-file or --dataset with --index")

    age = args.age
    gender = args.gender
    scales = _scales_for(cfg, task, args)
    seed = args.seed if args.seed is not None else cfg.eval.seed
    n = args.n
    rows = []
    all_samples = []
    for pair_idx in range(len(cond1)):
        null = ckpt.registry.null_for(age, gender)
        samples = sample_batch(
            ckpt.params,
            np.repeat(cond1[pair_idx][None], n, axis=0),
            np.repeat(cond2[pair_idx][None], n, axis=0),
            scales,
            np.repeat(null[None], n, axis=0),
            np.repeat(null[None], n, axis=0),
            schedule,
            rng_for(seed, "sample", pair_idx),
            cfg.eval.sample_steps,
        )
        all_samples.append(samples)
        for i, s in enumerate(samples):
            rows.append(
                {
                    "pair": pair_idx,
                    "sample": i,
                    "readout_age": repr(float(readout_age(world, s))),
                    "readout_gender": int(readout_gender(world, s)),
                }
            )
    stacked = np.concatenate(all_samples, axis=0)
    save_container(
        out / "samples.bin",
        {
            "kind": "samples",
            "config_hash": config_hash(cfg),
            "n_per_pair": n,
            "age": age,
            "gender": gender,
            "g1": scales.g1,
            "g2": scales.g2,
            "seed": seed,
        },
        {"samples": stacked},
    )
    _write_csv(
        out / "readouts.csv",
        ("pair", "sample", "readout_age", "readout_gender"),
        rows,
    )
    ages = np.asarray(readout_age(world, stacked))
    print(
        f"wrote {out/'samples.bin'}: {len(stacked)} samples at requested "
        f"age={age} gender={gender}; readout age mean {ages.mean():.4f} "
        f"(target {age})"
    )
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    out = _out_dir(args)
    task = _parse_task(args.task) if args.task else _parse_task(ckpt.task)
    if task.value != ckpt.task:
        raise ConfigError(
            f"checkpoint was trained for task {ckpt.task!r}, not {task.value!r}"
        )
    ds = load_dataset(args.dataset)
    world = build_world(cfg)
    schedule = build_schedule(cfg)
    embed = make_embedding(
        build_segmentation(cfg).total_dim, cfg.eval.embed_dim, cfg.eval.embed_seed
    )
    settings = FamilyEvalSettings(
        samples_per_family=cfg.eval.samples_per_family,
        n_families=cfg.eval.n_families,
        sample_steps=cfg.eval.sample_steps,
        seed=cfg.eval.seed,
    )
    result = evaluate_families(
        ckpt.params, ckpt.registry, ds, task, world, schedule, embed, settings,
        config_hash(cfg), scales=_scales_for(cfg, task, args),
        train_seed=cfg.training.seed, heldout_frac=cfg.training.heldout_frac,
    )
    rep = result.report
    fields = list(rep.CSV_FIELDS) + ["mode", "task", "g1", "g2"]
    _write_csv(out / "metrics.csv", fields, [
        {k: rep.to_dict()[k] for k in fields}
    ])
    with open(out / "metrics.json", "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"eval[{task.value}]: DS={rep.ds:.4f} ID-sim={rep.id_sim:.4f} "
        f"AUC={rep.auc:.4f} ageMSE={rep.age_mse:.5f} genderACC={rep.gender_acc:.4f} "
        f"({rep.n_families} families x {rep.samples_per_family})"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    world = build_world(cfg)
    schedule = build_schedule(cfg)
    den_cfg = build_denoiser_config(cfg)
    policy = build_dropout_policy(cfg)
    embed = make_embedding(
        build_segmentation(cfg).total_dim, cfg.eval.embed_dim, cfg.eval.embed_seed
    )
    task = TaskArrangement.CHILD
    rows = []
    for arm_seed in range(args.seeds):
        tcfg = dataclasses.replace(
            build_training_config(cfg), seed=cfg.training.seed + arm_seed
        )
        registry = build_mean_nulls(
            world, cfg.guidance.null_samples, rng_for(cfg.world.seed, "mean-nulls")
        )
        if cfg.guidance.null_mode == "learned":
            registry = registry.as_learned()
        diff_res = train_denoiser(
            ds, task, world, den_cfg, schedule, policy, registry, tcfg
        )
        reg_res = train_regression(ds, task, world, den_cfg, tcfg)
        settings = FamilyEvalSettings(
            samples_per_family=cfg.eval.samples_per_family,
            n_families=cfg.eval.n_families,
            sample_steps=cfg.eval.sample_steps,
            seed=cfg.eval.seed,
        )
        common = dict(
            ds=ds, task=task, world=world, schedule=schedule, embed=embed,
            settings=settings, cfg_hash=config_hash(cfg),
            train_seed=tcfg.seed, heldout_frac=tcfg.heldout_frac,
        )
        full = evaluate_families(
            diff_res.params, diff_res.registry, mode="rtg", **common
        )
        nortg = evaluate_families(
            diff_res.params, diff_res.registry, mode="joint", **common
        )
        reg = evaluate_families(
            reg_res.params, diff_res.registry, mode="regression", **common
        )
        for arm, res in (("full", full), ("no-rtg", nortg), ("regression", reg)):
            rep = res.report
            rows.append(
                {
                    "seed": tcfg.seed,
                    "arm": arm,
                    "ds": "" if arm == "regression" else repr(rep.ds),
                    "repeat_ds": repr(rep.ds) if arm == "regression" else "",
                    "id_sim": repr(rep.id_sim),
                    "auc": repr(rep.auc),
                    "config_hash": rep.config_hash,
                }
            )
            print(
                f"seed {tcfg.seed} {arm}: "
                + ("DS=n/a (deterministic; repeat DS "
                   f"{rep.ds})" if arm == "regression" else f"DS={rep.ds:.4f}")
                + f" ID-sim={rep.id_sim:.4f}"
            )
    _write_csv(
        out / "ablation.csv",
        ("seed", "arm", "ds", "repeat_ds", "id_sim", "auc", "config_hash"),
        rows,
    )
    print(f"wrote {out/'ablation.csv'}")
    return 0


def cmd_guidance_sweep(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    out = _out_dir(args)
    ds = load_dataset(args.dataset)
    world = build_world(cfg)
    schedule = build_schedule(cfg)
    embed = make_embedding(
        build_segmentation(cfg).total_dim, cfg.eval.embed_dim, cfg.eval.embed_seed
    )
    grid = tuple(float(g) for g in args.grid.split(","))
    rows = guidance_sweep(
        ckpt.params, ckpt.registry, ds, world, schedule, embed,
        g1_grid=grid, g2=args.g2, n_pairs=args.pairs,
        samples_per_pair=args.samples_per_pair,
        sample_steps=cfg.eval.sample_steps, seed=cfg.eval.seed,
        train_seed=cfg.training.seed, heldout_frac=cfg.training.heldout_frac,
    )
    for row in rows:
        row["config_hash"] = config_hash(cfg)
    _write_csv(
        out / "guidance_sweep.csv",
        ("g1", "g2", "cos_to_cond1", "cos_to_cond2", "ds", "n_samples", "config_hash"),
        rows,
    )
    for row in rows:
        print(
            f"g1={row['g1']:.2f} g2={row['g2']:.2f}: cos1={row['cos_to_cond1']:.4f} "
            f"cos2={row['cos_to_cond2']:.4f} DS={row['ds']:.4f}"
        )
    print(f"wrote {out/'guidance_sweep.csv'}")
    return 0


def cmd_partner_baseline(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    out = _out_dir(args)
    task = _parse_task(ckpt.task)
    ds = load_dataset(args.dataset)
    world = build_world(cfg)
    schedule = build_schedule(cfg)
    embed = make_embedding(
        build_segmentation(cfg).total_dim, cfg.eval.embed_dim, cfg.eval.embed_seed
    )
    result = partner_baseline_comparison(
        ckpt.params, ckpt.registry, ds, world, schedule, embed, task=task,
        n_families=cfg.eval.n_families,
        sample_steps=cfg.eval.sample_steps, seed=cfg.eval.seed,
        train_seed=cfg.training.seed, heldout_frac=cfg.training.heldout_frac,
    )
    rows = [
        {
            "family": i,
            "baseline_idsim": repr(b),
            "model_idsim": repr(m),
            "config_hash": config_hash(cfg),
        }
        for i, (b, m) in enumerate(zip(result["baseline_sims"], result["model_sims"]))
    ]
    _write_csv(
        out / "partner_baseline.csv",
        ("family", "baseline_idsim", "model_idsim", "config_hash"),
        rows,
    )
    print(
        f"linear baseline mean ID-sim {result['baseline_mean_idsim']:.4f} vs "
        f"model {result['model_mean_idsim']:.4f}; midpoint max error "
        f"{result['midpoint_max_error']:.2e}"
    )
    print(f"wrote {out/'partner_baseline.csv'}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    ok = run_selftest(verbose=True)
    return 0 if ok else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kindiff",
        description="Conditional latent diffusion over segmented style vectors.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run configuration")
            p.add_argument(
                "--preset",
                default="desk-scale",
                choices=("desk-scale", "paper-scale"),
                help="base preset when --config is absent",
            )
            p.add_argument(
                "--seed", type=int, help="master seed overriding all section seeds"
            )
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("gen-data", help="generate a simulated triplet dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument(
        "--task",
        default="child",
        choices=[t.value for t in TaskArrangement],
    )
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample latents from a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cond-file", help="container with cond1/cond2 blocks")
    p.add_argument("--dataset", help="dataset to draw conditions from")
    p.add_argument("--index", type=int, help="family index within --dataset")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--age", type=float, default=0.25)
    p.add_argument("--gender", type=int, default=0, choices=(0, 1))
    p.add_argument("--g1", type=float)
    p.add_argument("--g2", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="family evaluation metrics")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", help="defaults to the checkpoint's task")
    p.add_argument("--g1", type=float)
    p.add_argument("--g2", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full / no-guidance / regression arms")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", type=int, default=3, help="number of training seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("guidance-sweep", help="scale grid vs condition cosine")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--grid", default="0,0.5,1.0,1.5,2.0")
    p.add_argument("--g2", type=float, default=1.2)
    p.add_argument("--pairs", type=int, default=5)
    p.add_argument("--samples-per-pair", type=int, default=25)
    p.set_defaults(func=cmd_guidance_sweep)

    p = sub.add_parser("partner-baseline", help="linear identity vs learned model")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_partner_baseline)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    common(p, config=False)
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, RangeError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
