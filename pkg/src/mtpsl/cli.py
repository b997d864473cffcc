"""Command line interface.

    mtpsl gen-data  --config cfg.json --out data.bin
    mtpsl train     --config cfg.json [--strategy ours --seed 3 ...]
    mtpsl compare   --reports runs/ --out table.csv [--plots plots/]
    mtpsl gradcheck [--max-entries 32]

Every experiment config field has an override flag of the same name
(scene fields are prefixed with --scene-); the MTPSL_SEED environment
variable overrides the seed last.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .harness import ExperimentConfig, compare, train
from .synth import SceneConfig, generate_dataset, save_dataset


def _field_type(f: dataclasses.Field):
    if f.type in ("int", int):
        return int
    if f.type in ("float", float):
        return float
    return str


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    skip = {"scene", "ratios", "encoder_widths", "uncertainty"}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in skip:
            continue
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name,
                            type=_field_type(f), default=None)
    parser.add_argument("--ratios", type=str, default=None,
                        help="comma-separated per-task label fractions (imbalanced protocol)")
    parser.add_argument("--encoder-widths", dest="encoder_widths", type=str, default=None,
                        help="comma-separated channel widths, e.g. 16,32,64")
    parser.add_argument("--uncertainty", dest="uncertainty", action="store_true", default=None)
    parser.add_argument("--no-uncertainty", dest="uncertainty", action="store_false", default=None)
    for f in dataclasses.fields(SceneConfig):
        parser.add_argument(f"--scene-{f.name.replace('_', '-')}", dest=f"scene_{f.name}",
                            type=_field_type(f), default=None)


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    base: dict = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    scene = dict(base.pop("scene", {}))
    for f in dataclasses.fields(SceneConfig):
        value = getattr(args, f"scene_{f.name}", None)
        if value is not None:
            scene[f.name] = value
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "scene":
            continue
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name == "ratios":
            value = [float(x) for x in value.split(",")]
        elif f.name == "encoder_widths":
            value = tuple(int(x) for x in value.split(","))
        base[f.name] = value
    base["scene"] = scene
    if os.environ.get("MTPSL_SEED"):
        base["seed"] = int(os.environ["MTPSL_SEED"])
    return ExperimentConfig.from_dict(base)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mtpsl",
                                     description="multi-task partially-supervised learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    p_gen.add_argument("--config", default=None)
    p_gen.add_argument("--out", required=True)
    _add_config_flags(p_gen)

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("--config", default=None)
    _add_config_flags(p_train)

    p_cmp = sub.add_parser("compare", help="aggregate run reports into a table and plots")
    p_cmp.add_argument("--reports", required=True)
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--plots", default=None)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    p_gc.add_argument("--max-entries", type=int, default=32,
                      help="coordinates checked per parameter tensor")
    p_gc.add_argument("--tol", type=float, default=1e-4)

    args = parser.parse_args(argv)

    if args.command == "gen-data":
        cfg = _build_config(args)
        data = generate_dataset(cfg.scene, cfg.n_train, cfg.n_test, cfg.protocol,
                                cfg.seed, cfg.ratios)
        save_dataset(args.out, data)
        print(f"wrote {cfg.n_train}+{cfg.n_test} samples ({cfg.protocol}) to {args.out}")
        return 0

    if args.command == "train":
        cfg = _build_config(args)
        report = train(cfg)
        print(f"run dir: {report.run_dir}")
        print(f"best epoch {report.best_epoch}: {report.best_metrics}")
        print(f"final     : {report.final_metrics}")
        return 0

    if args.command == "compare":
        rows = compare(args.reports, args.out, args.plots)
        for row in rows:
            print(row)
        print(f"wrote {args.out}")
        return 0

    if args.command == "gradcheck":
        from .gradcheck import run_suite

        failed = False
        for result in run_suite(max_entries_per_tensor=args.max_entries):
            ok = result.passed(args.tol)
            failed |= not ok
            print(f"{'PASS' if ok else 'FAIL'}  {result.name:15s} "
                  f"max rel err {result.max_rel_err:.3e} over {result.checked} coords "
                  f"(worst: {result.worst_param})")
        return 1 if failed else 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
