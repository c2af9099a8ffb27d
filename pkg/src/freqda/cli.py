"""Command-line entry points: generate-data, train, sweep, ablate, evaluate.

Every command takes ``--config FILE`` plus repeatable ``--set key=value``
overrides, resolves its output directory from ``--out`` or the
FREQDA_OUTPUT_ROOT environment variable, archives the resolved config next to
its outputs, and exits nonzero when any contract error fires.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import evaluation
from .config import ExperimentConfig, archive_config, load_config, resolve_output_dir
from .data import save_domain
from .metrics import METRIC_KINDS
from .model import ModelConfig, QualityModel, load_checkpoint
from .spectral import TRAJECTORY_KINDS, BandWindow, make_trajectory
from .training import run_training

ABLATION_AXES = ("trajectory", "metric", "window", "interval", "bands")


def cmd_generate_data(cfg, out_dir, force=False):
    os.makedirs(out_dir, exist_ok=True)
    for role in ("source", "target"):
        section = getattr(cfg, role)
        dom_dir = os.path.join(out_dir, role)
        manifest = os.path.join(dom_dir, "manifest.json")
        if os.path.exists(manifest) and not force:
            raise FileExistsError(f"{manifest} exists; pass --force to overwrite")
        dataset = cfg.build_domain(section, role)
        save_domain(dataset, dom_dir, manifest_extra={
            "seed": section.seed, "kind": section.kind, "families": section.families,
            "base": section.base, "levels": section.levels,
        })
        print(f"wrote {len(dataset)} {role} images to {dom_dir}")
    archive_config(cfg, out_dir)
    return 0


def _train_once(cfg, out_dir, resume=None):
    source = cfg.build_domain(cfg.source, "source")
    target = cfg.build_domain(cfg.target, "target")
    model_cfg = cfg.build_model_config()
    sched_cfg, spe = cfg.build_scheduler_config(source, target)
    train_cfg = cfg.build_training_config()
    print(f"steps/epoch {spe}; intervals in iterations: T={sched_cfg.T} "
          f"T_w={sched_cfg.T_w} T_m={sched_cfg.T_m} T_a={sched_cfg.T_a} "
          f"({sched_cfg.T / spe:.2f}/{sched_cfg.T_w / spe:.2f}/"
          f"{sched_cfg.T_m / spe:.2f}/{sched_cfg.T_a / spe:.2f} epochs)")
    result, trainer = run_training(model_cfg, sched_cfg, train_cfg, source, target,
                                   out_dir, resume_from=resume)
    window = BandWindow(trainer.trajectory, sched_cfg.m, result.j_star)
    pred = evaluation.predict_scores(trainer.model, target.images, window=window)
    report = evaluation.evaluate_predictions(pred, target.scores)
    return result, report


def cmd_train(cfg, out_dir, resume=None):
    result, report = _train_once(cfg, out_dir, resume=resume)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        f.write(report.to_json())
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump({
            "j_star": result.j_star,
            "history": result.history,
            "checkpoint": result.checkpoint_path,
            "train_log": result.train_log_path,
            "interval_log": result.interval_log_path,
            "target_srocc": report.srocc,
            "target_plcc": report.plcc,
        }, f, indent=2, sort_keys=True)
    archive_config(cfg, out_dir)
    print(f"selected band j*={result.j_star}; target SROCC {report.srocc:.4f} "
          f"PLCC {report.plcc:.4f}")
    return 0


def cmd_sweep(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    source = cfg.build_domain(cfg.source, "source")
    target = cfg.build_domain(cfg.target, "target")
    seeds = [int(s) for s in cfg.sweep.seeds.split(",") if s.strip()]
    best_cells = []
    for seed in seeds:
        result = evaluation.frequency_sweep(
            source, target, seed=seed, channels=cfg.sweep.channels,
            blocks=cfg.sweep.blocks, grid=cfg.model.grid,
            pretrain_iters=cfg.sweep.pretrain_iters,
            batch_size=cfg.train.batch_size,
            shared_extractor=cfg.sweep.shared_extractor,
            per_cell_iters=cfg.sweep.per_cell_iters,
        )
        with open(os.path.join(out_dir, f"grid_seed{seed}.csv"), "w") as f:
            f.write(result.as_csv())
        evaluation.save_heatmap(result.grid, os.path.join(out_dir, f"grid_seed{seed}.png"))
        best_cells.append(list(result.best_cell))
        print(f"seed {seed}: best cell {result.best_cell}")
    with open(os.path.join(out_dir, "sweep_summary.json"), "w") as f:
        json.dump({"seeds": seeds, "best_cells": best_cells}, f, indent=2, sort_keys=True)
    archive_config(cfg, out_dir)
    return 0


def _ablation_values(cfg, axis):
    if axis == "trajectory":
        return [("schedule.trajectory", v) for v in TRAJECTORY_KINDS]
    if axis == "metric":
        return [("schedule.metric", v) for v in METRIC_KINDS]
    if axis == "window":
        return [("schedule.m", v.strip()) for v in cfg.ablate.windows.split(",") if v.strip()]
    if axis == "interval":
        return [("schedule.interval_epochs", v.strip())
                for v in cfg.ablate.intervals.split(",") if v.strip()]
    if axis == "bands":
        return [("schedule.n_bands", v.strip())
                for v in cfg.ablate.band_counts.split(",") if v.strip()]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def cmd_ablate(cfg, out_dir, axis):
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for key, value in _ablation_values(cfg, axis):
        variant = ExperimentConfig.from_mapping(
            dict(_flatten(cfg), **{key: str(value)})
        )
        run_dir = os.path.join(out_dir, f"{axis}_{value}".replace("/", "-"))
        result, report = _train_once(variant, run_dir)
        rows.append((value, result.j_star, report.srocc, report.plcc))
        print(f"{axis}={value}: j*={result.j_star} SROCC={report.srocc:.4f} "
              f"PLCC={report.plcc:.4f}")
    table = os.path.join(out_dir, f"ablation_{axis}.csv")
    with open(table, "w") as f:
        f.write(f"{axis},j_star,srocc,plcc\n")
        for value, j_star, srocc_v, plcc_v in rows:
            f.write(f"{value},{j_star},{repr(srocc_v)},{repr(plcc_v)}\n")
    archive_config(cfg, out_dir)
    return 0


def _flatten(cfg):
    mapping = {}
    for line in cfg.to_text().splitlines():
        key, _, value = line.partition(" = ")
        mapping[key] = value
    return mapping


def cmd_evaluate(cfg, out_dir, checkpoint, on="target"):
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    payload = load_checkpoint(checkpoint)
    net = QualityModel(ModelConfig(**payload["model_config"]))
    net.load_state_dict(payload["model_state"])
    net.eval()
    sched = payload["scheduler_config"]
    state = payload["scheduler_state"]
    band = state["j_star"] if state.get("j_star") is not None else state["j"]
    traj = make_trajectory(sched["trajectory"], sched["grid_h"], sched["grid_w"])
    window = BandWindow(traj, sched["m"], band)
    dataset = cfg.build_domain(getattr(cfg, on), on)
    pred = evaluation.predict_scores(net, dataset.images, window=window)
    report = evaluation.evaluate_predictions(pred, dataset.scores)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        f.write(report.to_json())
    archive_config(cfg, out_dir)
    print(f"{on} SROCC {report.srocc:.4f} PLCC {report.plcc:.4f} (band {band})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="freqda",
        description="Frequency-selective adversarial domain adaptation for "
                    "blind image quality assessment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", help="output directory (default: $FREQDA_OUTPUT_ROOT/<output>)")

    gen = sub.add_parser("generate-data", help="materialize the configured domains on disk")
    common(gen)
    gen.add_argument("--force", action="store_true", help="overwrite existing datasets")

    train = sub.add_parser("train", help="run the three-phase alignment training")
    common(train)
    train.add_argument("--resume", help="checkpoint to resume from")

    sweep = sub.add_parser("sweep", help="per-frequency transferability grid")
    common(sweep)

    ablate = sub.add_parser("ablate", help="comparison table along one axis")
    common(ablate)
    ablate.add_argument("--axis", required=True, choices=ABLATION_AXES)

    ev = sub.add_parser("evaluate", help="score a checkpoint on a configured domain")
    common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--on", choices=("source", "target"), default="target")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        out_dir = resolve_output_dir(cfg, args.out)
        os.makedirs(out_dir, exist_ok=True)
        if args.command == "generate-data":
            return cmd_generate_data(cfg, out_dir, force=args.force)
        if args.command == "train":
            return cmd_train(cfg, out_dir, resume=args.resume)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir)
        if args.command == "ablate":
            return cmd_ablate(cfg, out_dir, axis=args.axis)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out_dir, checkpoint=args.checkpoint, on=args.on)
        raise ValueError(f"unknown command {args.command!r}")
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
