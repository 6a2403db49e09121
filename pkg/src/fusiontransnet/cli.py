"""Command-line entry point: ``fusiontransnet <command> ...``.

Exit codes: 0 on success, 2 on usage, configuration or input errors, 1 on
runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import VARIANT_NAMES, model_config_from_kv, read_kv, resolve_ablation
from .data import (
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    max_min_normalize,
    save_dataset,
    temporal_split,
)
from .errors import ConfigError, DataError, IngestionError
from .model import WindowSampler
from .train import evaluate, report_on_split, run_ablation, train

log = logging.getLogger("fusiontransnet")

USAGE_ERRORS = (ConfigError, IngestionError, DataError, CheckpointError)
CHECKPOINT_NAME = "model.ftn"
SPLITS = ("train", "val", "test")


def _emit(payload, out: str | None = None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _model_config(args):
    values = read_kv(args.config) if getattr(args, "config", None) else {}
    overrides = {}
    if getattr(args, "ablation", None):
        overrides["ablation"] = resolve_ablation(args.ablation)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return model_config_from_kv(values, **overrides)


def _fractions(values: dict) -> tuple[float, float, float]:
    raw = values.get("fractions", "0.7,0.2,0.1")
    try:
        parts = tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"fractions must be three comma-separated numbers, got {raw!r}") from None
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three nonnegative values summing to 1, got {raw!r}")
    return parts


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    values = read_kv(args.config) if args.config else {}
    config = SyntheticConfig.from_kv(values)
    dataset = generate_synthetic(config)
    save_dataset(dataset, args.out)
    log.info("wrote %d steps of %s to %s", dataset.num_steps, ",".join(dataset.mode_names), args.out)
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    values = read_kv(args.config) if args.config else {}
    config = _model_config(args)
    fractions = _fractions(values)
    result = train(dataset, config, fractions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT_NAME, result.model, result.normalization, {"fractions": list(fractions)})
    metrics = {
        "config": config.to_dict(),
        "best_epoch": result.best_epoch,
        "history": result.history,
        "test": report_on_split(result, dataset, "test").to_dict(include_timing=False),
    }
    _emit(metrics, str(out / "metrics.json"))
    log.info("test MAE %.4f RMSE %.4f", metrics["test"]["mae"], metrics["test"]["rmse"])
    return 0


def cmd_eval(args) -> int:
    model, normalization, extra = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    fractions = tuple(extra.get("fractions", (0.7, 0.2, 0.1)))
    splits = temporal_split(dataset.num_steps, fractions, model.config.window)
    _check_modes(model, dataset)
    report = evaluate(model, dataset, normalization, list(splits.targets(args.split, model.config.window)), args.split)
    _emit(report.to_dict(include_timing=False), args.out)
    return 0


def cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    config = _model_config(args)
    seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    if not seeds:
        raise ConfigError("--seeds must be at least 1")
    table = run_ablation(dataset, config, seeds, jobs=args.jobs)
    if args.out:
        _emit(table, args.out)
    header = ["variant"] + [f"seed{s}" for s in seeds] + ["mean"]
    print("\t".join(header))
    for tag, row in table["variants"].items():
        cells = [f"{row['mae'][s]:.4f}" for s in seeds] + [f"{row['mean_mae']:.4f}"]
        print("\t".join([VARIANT_NAMES[tag]] + cells))
    print("\t".join(["HA"] + [f"{table['ha']['mae']:.4f}"] * len(seeds) + [f"{table['ha']['mae']:.4f}"]))
    return 0


def _check_modes(model, dataset) -> None:
    names = [m.name for m in model.modes]
    if dataset.mode_names != names:
        raise DataError(f"checkpoint modes {names} do not match dataset modes {dataset.mode_names}")
    for spec, series in zip(model.modes, dataset.series):
        if [tuple(g) for g in spec.grids] != [tuple(g) for g in series.grid_of_node]:
            raise DataError(f"mode {spec.name}: node grids differ between checkpoint and dataset")


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.replace("x", ",").split(","))
    except ValueError:
        raise ConfigError(f"--node expects a grid cell like 2,3, got {text!r}") from None
    return a, b


def attention_dump(model, dataset, normalization, grid, step: int, top: int = 5) -> dict:
    """Global and local attention rows of every node sitting at ``grid`` for one target step."""
    scaled, _ = max_min_normalize(dataset, normalization)
    sampler = WindowSampler(dataset, scaled, model.config.window)
    out = model.forward(sampler.batch([step]))
    layout = model.layout
    nodes = []
    for m, spec in enumerate(model.modes):
        grids = [tuple(g) for g in spec.grids]
        if grid not in grids:
            continue
        i = grids.index(grid)
        entry = {"mode": spec.name, "node": i}
        if out.global_scores is not None:
            labels = []
            for n in layout.candidate_modes[m]:
                labels += [(model.modes[n].name, list(model.modes[n].grids[j])) for j in range(layout.num_nodes[n])]
            for role, key in ((0, "global_origin"), (1, "global_destination")):
                row = out.global_scores[m][role].data[0, i]
                order = np.argsort(-row, kind="stable")[:top]
                entry[key] = {
                    "row": row.tolist(),
                    "row_sum": float(row.sum()),
                    "top": [
                        {"mode": labels[j][0], "grid": labels[j][1], "weight": float(row[j])}
                        for j in order if row[j] > 0
                    ],
                }
        if out.local_scores is not None and grid in layout.units:
            k = layout.units.index(grid)
            for role, key in ((0, "local_origin"), (1, "local_destination")):
                row = out.local_scores[role].data[0, k, m]
                entry[key] = {
                    "row": {model.modes[n].name: float(row[n]) for n in range(len(model.modes))
                            if layout.unit_presence[k, n]},
                    "row_sum": float(row.sum()),
                }
        nodes.append(entry)
    if not nodes:
        raise ConfigError(f"no node of any mode sits at grid {grid}")
    anchor = {n["mode"]: dataset.mode(n["mode"]).features[:, n["node"], 0].tolist() for n in nodes}
    return {"grid": list(grid), "step": step, "nodes": nodes, "anchor_inflow": anchor}


def cmd_inspect(args) -> int:
    model, normalization, extra = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_modes(model, dataset)
    grid = _parse_grid(args.node)
    fractions = tuple(extra.get("fractions", (0.7, 0.2, 0.1)))
    steps = list(temporal_split(dataset.num_steps, fractions, model.config.window).targets("test", model.config.window))
    step = args.step if args.step is not None else steps[0]
    if not model.config.window <= step < dataset.num_steps:
        raise ConfigError(f"--step must lie in [{model.config.window}, {dataset.num_steps - 1}]")
    _emit(attention_dump(model, dataset, normalization, grid, step, args.top), args.out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusiontransnet", description="Multimodal OD flow forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="key = value synthetic config (defaults if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model and write checkpoint + metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--ablation", default=None, help="full, od, g, l, m or single")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the full model and four variants over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="also write the full table as JSON")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-attention", help="dump attention rows for the nodes at one grid cell")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--node", required=True, help="grid cell as row,col")
    p.add_argument("--step", type=int, default=None, help="target step (default: first test target)")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
