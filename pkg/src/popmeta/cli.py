"""Command-line interface.

Subcommands:
  generate   export population task datasets as CSV + manifest
  train      meta-train one cell and write a checkpoint JSON
  evaluate   few-shot evaluation (MAML + GP) from a checkpoint
  sweep      full protocol for one problem over all population sizes
  plot       re-render the SVG charts from an existing results.csv

A flat key=value config file can supply any option (``--config run.cfg``);
explicit command-line flags take precedence.  Keys use the flag names with
either dashes or underscores.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__, nn
from .experiment import (
    DEFAULT_HIDDEN_SIZES,
    DEFAULT_SHOT_COUNTS,
    ExperimentConfig,
    Problem,
    run_experiment,
)
from .meta import MAMLConfig, MetaModel
from .outputs import charts_for_records, emit_outputs, read_results_csv
from .pca import pca_from_dict, pca_to_dict
from .population import (
    DEFAULT_STIFFNESS_INTERVAL,
    DEFAULT_TEMPERATURE_RANGE,
    FrequencyGrid,
    TargetKind,
    export_datasets,
    make_task_dataset,
    sample_population,
    write_dataset_manifest,
)
from .seeding import derive_seed


def int_list(text: str):
    """Parse '2,4,6,8' or '1-10' (inclusive) into a tuple of ints."""
    out = []
    for token in str(text).split(","):
        token = token.strip()
        if not token:
            continue
        if "-" in token[1:]:
            lo, hi = token.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(token))
    if not out:
        raise argparse.ArgumentTypeError(f"no integers in {text!r}")
    return tuple(out)


def load_config_file(path):
    """Flat ``key = value`` lines; '#' starts a comment."""
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            entries[key.strip().replace("_", "-")] = value.strip()
    return entries


def _config_argv(entries, parser):
    """Turn config-file entries into argv tokens the subparser understands."""
    known = {opt.lstrip("-") for action in parser._actions for opt in action.option_strings}
    flags = {action.option_strings[-1].lstrip("-"): action
             for action in parser._actions if action.option_strings}
    argv = []
    for key, value in entries.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        action = flags.get(key)
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise ValueError(f"config key {key!r}: boolean expected, got {value!r}")
        else:
            argv.extend([f"--{key}", value])
    return argv


def _add_maml_flags(p):
    p.add_argument("--alpha", type=float, default=MAMLConfig.alpha,
                   help="inner (task-specific) learning rate")
    p.add_argument("--beta", type=float, default=MAMLConfig.beta,
                   help="meta learning rate")
    p.add_argument("--epochs", type=int, default=MAMLConfig.epochs)
    p.add_argument("--inner-batch", type=int, default=MAMLConfig.inner_batch)
    p.add_argument("--meta-batch", type=int, default=MAMLConfig.meta_batch)
    p.add_argument("--adapt-steps", type=int, default=MAMLConfig.adapt_steps,
                   help="test-time adaptation gradient steps")
    p.add_argument("--first-order", action="store_true",
                   help="drop the second-order term of the meta gradient")
    p.add_argument("--maml-seed", type=int, default=None,
                   help="override the stream seed derived from the master seed")


def _add_experiment_flags(p, seed_required):
    p.add_argument("--seed", type=int, required=seed_required,
                   help="master seed; every random stream derives from it")
    p.add_argument("--hidden-sizes", type=int_list, default=DEFAULT_HIDDEN_SIZES)
    p.add_argument("--shots", type=int_list, default=DEFAULT_SHOT_COUNTS,
                   help="shot counts, e.g. 1-10 or 1,3,5")
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--eval-samples", type=int, default=100)
    p.add_argument("--train-samples", type=int, default=100)
    p.add_argument("--val-shots", type=int, default=5)
    p.add_argument("--gp-restarts", type=int, default=8)
    p.add_argument("--workers", type=int, default=1)
    _add_maml_flags(p)


def _maml_from_args(args):
    cfg = MAMLConfig(
        alpha=args.alpha, beta=args.beta, epochs=args.epochs,
        inner_batch=args.inner_batch, meta_batch=args.meta_batch,
        adapt_steps=args.adapt_steps, second_order=not args.first_order,
    )
    if args.maml_seed is not None:
        cfg = replace(cfg, seed=args.maml_seed)
    return cfg


def _experiment_config(args, problem, n_train):
    return ExperimentConfig(
        problem=problem,
        master_seed=args.seed,
        n_train_structures=n_train,
        hidden_sizes=tuple(args.hidden_sizes),
        shot_counts=tuple(args.shots),
        n_test_structures=args.n_test,
        eval_samples_per_structure=args.eval_samples,
        train_samples_per_structure=args.train_samples,
        val_shots=args.val_shots,
        maml=_maml_from_args(args),
        gp_restarts=args.gp_restarts,
        workers=args.workers,
    )


def _cell_summary(result):
    return {
        "selected_hidden": result.selected_hidden,
        "validation_losses": {str(k): v for k, v in result.validation_losses.items()},
        "sigma_pop": result.sigma_pop,
        "populations": result.populations,
        "audit": result.audit,
        "timings": result.timings,
        "gp_failures": {str(r.shots): r.n_failed for r in result.records
                        if r.method == "gp"},
        "wall_times": {f"{r.method}_shots{r.shots}": r.wall_time
                       for r in result.records},
    }


def _checkpoint_payload(result):
    return {
        "format": "popmeta-checkpoint-v1",
        "config": result.config.to_dict(),
        "selected_hidden": result.selected_hidden,
        "validation_losses": {str(k): v for k, v in result.validation_losses.items()},
        "model": result.model.to_dict(),
        "pca": pca_to_dict(result.pca_model) if result.pca_model else None,
    }


def cmd_generate(args):
    kinds = {
        "one": [TargetKind.LINE_1HZ],
        "two": [TargetKind.LINE_50HZ],
        "three": [TargetKind.FULL_FRF],
        "all": [TargetKind.LINE_1HZ, TargetKind.LINE_50HZ, TargetKind.FULL_FRF],
    }[args.problem]
    os.makedirs(args.out, exist_ok=True)
    grid = FrequencyGrid.default()
    structures = sample_population(
        args.n_structures, DEFAULT_STIFFNESS_INTERVAL,
        seed=derive_seed(args.seed, "generate"), id_prefix=args.prefix,
    )
    files = []
    for kind in kinds:
        tasks = [
            make_task_dataset(s, args.samples, kind, DEFAULT_TEMPERATURE_RANGE,
                              grid, seed=derive_seed(args.seed, "generate-data"))
            for s in structures
        ]
        path = os.path.join(args.out, f"dataset_{kind.value}.csv")
        export_datasets(tasks, path)
        files.append(os.path.basename(path))
        print(f"wrote {path} ({len(tasks)} structures x {args.samples} samples)")
    write_dataset_manifest(
        os.path.join(args.out, "dataset_manifest.json"),
        target_kind=kinds[0] if len(kinds) == 1 else TargetKind.FULL_FRF,
        grid=grid, temperature_range=DEFAULT_TEMPERATURE_RANGE,
        stiffness_interval=DEFAULT_STIFFNESS_INTERVAL, seed=args.seed,
        n_structures=args.n_structures, samples_per_structure=args.samples,
        files=files,
    )
    print(f"wrote {os.path.join(args.out, 'dataset_manifest.json')}")
    return 0


def cmd_train(args):
    problem = Problem.parse(args.problem)
    hidden = (args.hidden,) if args.hidden else tuple(args.hidden_sizes)
    config = replace(_experiment_config(args, problem, args.n_train),
                     hidden_sizes=hidden)
    from .experiment import build_cell_data, train_cell

    data = build_cell_data(config)
    model, losses = train_cell(config, data)
    payload = {
        "format": "popmeta-checkpoint-v1",
        "config": config.to_dict(),
        "selected_hidden": model.params.hidden,
        "validation_losses": {str(k): v for k, v in losses.items()},
        "model": model.to_dict(),
        "pca": pca_to_dict(data.pca_model) if data.pca_model else None,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh)
    print(f"selected hidden size: {model.params.hidden} "
          f"(validation loss {losses[model.params.hidden]:.6g})")
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args):
    with open(args.checkpoint) as fh:
        payload = json.load(fh)
    if payload.get("format") != "popmeta-checkpoint-v1":
        raise ValueError("not a popmeta checkpoint")
    saved = payload["config"]
    model = MetaModel.from_dict(payload["model"])
    config = ExperimentConfig(
        problem=Problem(saved["problem"]),
        master_seed=saved["master_seed"],
        n_train_structures=saved["n_train_structures"],
        hidden_sizes=(model.params.hidden,),
        shot_counts=tuple(args.shots),
        n_test_structures=args.n_test,
        eval_samples_per_structure=saved["eval_samples_per_structure"],
        train_samples_per_structure=saved["train_samples_per_structure"],
        val_shots=saved["val_shots"],
        maml=MAMLConfig(**saved["maml"]),
        gp_restarts=args.gp_restarts,
        workers=args.workers,
    )
    from .experiment import build_cell_data, evaluate_cell
    from .metrics import population_sigma

    frozen_pca = pca_from_dict(payload["pca"]) if payload["pca"] else None
    data = build_cell_data(config, pca_model=frozen_pca)
    sigma = population_sigma(np.concatenate([ts.eval_y for ts in data.test_sets]))
    records = evaluate_cell(config, data, model, sigma)
    os.makedirs(args.out, exist_ok=True)
    emit_outputs(
        records, args.out,
        manifest_extra={"mode": "evaluate", "checkpoint": args.checkpoint,
                        "config": config.to_dict(), "sigma_pop": sigma,
                        "popmeta_version": __version__, "nn_backend": nn.BACKEND},
        structure_ids=[ts.structure.id for ts in data.test_sets],
    )
    for r in sorted(records, key=lambda r: (r.shots, r.method)):
        print(f"{r.method:>5} shots={r.shots:<2} NMSE = {r.nmse_mean:.3f}% "
              f"+- {r.nmse_std:.3f}%")
    print(f"wrote {args.out}/results.csv")
    return 0


def cmd_sweep(args):
    problem = Problem.parse(args.problem)
    t_start = time.perf_counter()
    records, cells, checkpoints = [], {}, {}
    structure_ids = None
    for n in args.n_train_list:
        config = _experiment_config(args, problem, n)
        result = run_experiment(config)
        records.extend(result.records)
        cells[str(n)] = _cell_summary(result)
        checkpoints[f"{problem.value}_n{n}.json"] = _checkpoint_payload(result)
        if structure_ids is None:
            structure_ids = [sid for sid, _ in result.populations["test"]]
        print(f"n_train={n}: hidden={result.selected_hidden} "
              f"sigma_pop={result.sigma_pop:.6g} "
              f"meta={result.timings['meta_training']:.1f}s "
              f"eval={result.timings['evaluation']:.1f}s", flush=True)
    manifest_extra = {
        "mode": "sweep",
        "problem": problem.value,
        "master_seed": args.seed,
        "n_train_list": list(args.n_train_list),
        "base_config": _experiment_config(args, problem, args.n_train_list[0]).to_dict(),
        "cells": cells,
        "popmeta_version": __version__,
        "nn_backend": nn.BACKEND,
        "total_wall_time": time.perf_counter() - t_start,
    }
    emit_outputs(records, args.out, manifest_extra=manifest_extra,
                 checkpoints=checkpoints, structure_ids=structure_ids)
    print(f"wrote {args.out}/results.csv ({len(records)} records, "
          f"{time.perf_counter() - t_start:.0f}s)")
    return 0


def cmd_plot(args):
    records = read_results_csv(args.results)
    os.makedirs(args.out_dir, exist_ok=True)
    for name, svg in charts_for_records(records).items():
        path = os.path.join(args.out_dir, name)
        with open(path, "w") as fh:
            fh.write(svg)
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="popmeta",
        description="Population-based few-shot modelling benchmark "
                    "(meta-learned networks vs per-structure GPs).",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="export population datasets")
    p.add_argument("--problem", choices=["one", "two", "three", "all"], default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--n-structures", type=int, default=10)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--prefix", default="s")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="meta-train one cell, write a checkpoint")
    p.add_argument("--problem", required=True)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--hidden", type=int, default=None,
                   help="fixed hidden size (default: select over --hidden-sizes)")
    p.add_argument("--out", required=True)
    _add_experiment_flags(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="few-shot evaluation from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int_list, default=DEFAULT_SHOT_COUNTS)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--gp-restarts", type=int, default=8)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="full protocol for one problem")
    p.add_argument("--problem", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train-list", type=int_list, default=(2, 4, 6, 8))
    _add_experiment_flags(p, seed_required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="re-render charts from results.csv")
    p.add_argument("--results", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # splice config-file values in front of explicit flags so flags win
    if "--config" in argv:
        i = argv.index("--config")
        path = argv[i + 1]
        head, tail = argv[:i], argv[i + 2 :]
        if not head:
            raise SystemExit("--config must follow a subcommand")
        sub_name, rest = head[0], head[1:]
        try:
            sp = _find_subparser(parser, sub_name)
        except KeyError:
            raise SystemExit(f"unknown subcommand {sub_name!r}") from None
        argv = [sub_name] + _config_argv(load_config_file(path), sp) + rest + tail
    args = parser.parse_args(argv)
    return args.func(args)


def _find_subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


if __name__ == "__main__":
    sys.exit(main())
