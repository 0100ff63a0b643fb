"""Command-line entry point: dataset generation, training, evaluation,
analysis, and ablation grids.

Every command takes ``--config`` (YAML) and ``--out`` (artifact
directory), writes a resolved-config snapshot beside its outputs, and
renders figures next to each CSV artifact. Exit codes: 0 success,
2 config error, 3 runtime numeric failure. ``DESKRL_OUT_ROOT`` sets the
default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import plotting
from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig, load_config, save_config
from .data import DatasetFormatError, normalize_states, read_dataset, write_dataset
from .envs import generate_dataset
from .model import (
    MIXER_CONV,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .optim import OptimState
from .pipeline import build_model, build_model_config
from .training import evaluate, train, write_eval_csv, write_metrics_csv

OUT_ROOT_ENV = "DESKRL_OUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _out_dir(args, cfg: RunConfig, default_name: str) -> Path:
    if args.out:
        out = Path(args.out)
    elif cfg.out_dir:
        out = Path(cfg.out_dir)
    else:
        out = Path(os.environ.get(OUT_ROOT_ENV, "runs")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: RunConfig):
    path = Path(cfg.dataset.path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path} (run gen-data first)")
    return read_dataset(path)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.dataset.n_episodes < 1:
        raise ConfigError("dataset.n_episodes must be >= 1")
    out = _out_dir(args, cfg, "gen-data")
    dataset = generate_dataset(
        cfg.env,
        cfg.dataset.policy_mix,
        cfg.dataset.n_episodes,
        seed=cfg.env.seed,
        epsilon=cfg.dataset.epsilon,
    )
    write_dataset(dataset, cfg.dataset.path)
    save_config(cfg, out / "resolved_config.yaml")
    returns = dataset.returns()
    by_label: dict[str, list[float]] = {}
    for t in dataset.trajectories:
        by_label.setdefault(t.policy_label, []).append(t.total_return)
    plotting.save_return_histogram(
        {k: np.asarray(v) for k, v in by_label.items()}, out / "return_histogram.png"
    )
    print(f"wrote {len(dataset)} episodes to {cfg.dataset.path}")
    print(
        "returns: "
        f"min {returns.min():.4f}, mean {returns.mean():.4f}, "
        f"median {np.median(returns):.4f}, max {returns.max():.4f}"
    )
    for label, values in sorted(by_label.items()):
        print(f"  {label}: {len(values)} episodes, mean return {np.mean(values):.4f}")
    print(f"max return (default eval target): {dataset.max_return!r}")
    return EXIT_OK


def _train_state_path(out: Path) -> Path:
    return out / "train_state.json"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg, "train")
    dataset = _load_dataset(cfg)
    _, normalized = normalize_states(dataset)

    optim_state = None
    rng_states = None
    if args.resume:
        ckpt_path = out / "checkpoint_final.json"
        state_path = _train_state_path(out)
        if not ckpt_path.exists() or not state_path.exists():
            raise ConfigError(f"--resume needs {ckpt_path} and {state_path}")
        model = load_checkpoint(ckpt_path)
        with open(state_path) as f:
            saved = json.load(f)
        optim_state = OptimState.from_dict(saved["optim"])
        rng_states = saved["rng"]
        print(f"resuming from update {optim_state.step}")
    else:
        model = build_model(cfg, dataset)
        build_model_config(cfg, dataset)  # validates model/dataset compatibility

    train_cfg = cfg.train
    remaining = max(0, train_cfg.total_updates - (optim_state.step if optim_state else 0))
    run_cfg = type(train_cfg)(**{**train_cfg.__dict__, "total_updates": remaining})

    save_config(cfg, out / "resolved_config.yaml")
    try:
        result = train(
            model,
            normalized,
            run_cfg,
            env_spec=cfg.env,
            optim_state=optim_state,
            rng_states=rng_states,
            log_every=args.log_every,
        )
    except NonFiniteError as e:
        # parameters still hold the last completed update
        save_checkpoint(model, out / "checkpoint_final.json")
        print(f"numeric failure: {e}", file=sys.stderr)
        print(f"last-good checkpoint retained at {out / 'checkpoint_final.json'}", file=sys.stderr)
        return EXIT_NUMERIC

    save_checkpoint(model, out / "checkpoint_final.json")
    if result.best_params is not None:
        best = build_model(cfg, dataset)
        best.load_param_values(result.best_params)
        save_checkpoint(best, out / "checkpoint_best.json")
    else:
        save_checkpoint(model, out / "checkpoint_best.json")
    with open(_train_state_path(out), "w") as f:
        json.dump(
            {"optim": result.optim_state.to_dict(), "rng": result.rng_states},
            f,
            default=int,
        )
    write_metrics_csv(result.metrics, out / "metrics.csv")
    plotting.save_training_curves(result.metrics, out / "training_curves.png")
    losses = [r["loss"] for r in result.metrics if r["loss"] is not None]
    if losses:
        print(f"trained {len(losses)} updates; final loss {losses[-1]:.6f}")
    if result.best_eval_return is not None:
        print(f"best in-training eval return: {result.best_eval_return:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def _load_model(args):
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg, "eval")
    model = _load_model(args)
    dataset = _load_dataset(cfg)
    _, normalized = normalize_states(dataset)
    results = evaluate(
        model, cfg.env, normalized.stats, cfg.eval, max_return=normalized.max_return
    )
    save_config(cfg, out / "resolved_config.yaml")
    write_eval_csv(results, out / "eval_returns.csv")
    plotting.save_eval_returns(results, out / "eval_returns.png")
    for r in results:
        print(f"target {r.target:.4f}: return {r.mean:.4f} +- {r.std:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def _resolve_tasks(cfg: RunConfig, model) -> list[str]:
    tasks = list(cfg.analysis.tasks)
    has_conv = any(k == MIXER_CONV for k in model.config.mixers)
    has_attention = any(k != MIXER_CONV for k in model.config.mixers)
    if "auto" in tasks:
        tasks = ["zero_out", "ood_sweep"]
        if has_attention:
            tasks.insert(0, "attention_maps")
        if has_conv:
            tasks.append("filters")
        return tasks
    for task in tasks:
        if task == "attention_maps" and not has_attention:
            raise ConfigError(
                "analysis.tasks: attention_maps needs an attention or direct_attention "
                "block, but every block is conv; use the 'filters' task instead"
            )
        if task == "filters" and not has_conv:
            raise ConfigError(
                "analysis.tasks: filters needs a conv block, but none is present; "
                "use the 'attention_maps' task instead"
            )
    return tasks


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg, "analyze")
    model = _load_model(args)
    dataset = _load_dataset(cfg)
    _, normalized = normalize_states(dataset)
    tasks = _resolve_tasks(cfg, model)
    save_config(cfg, out / "resolved_config.yaml")
    target = normalized.max_return

    if "attention_maps" in tasks:
        maps = an.extract_attention_maps(
            model, normalized, cfg.analysis.probe_windows, seed=cfg.seed
        )
        entries = []
        for layer, matrix in sorted(maps.per_layer.items()):
            an.write_attention_map_csv(matrix, maps.labels, out / f"attention_map_layer{layer}.csv")
            plotting.save_attention_map(
                matrix, maps.labels, out / f"attention_map_layer{layer}.png", f"layer {layer}"
            )
            entries.append((str(layer), cfg.analysis.band, an.bandedness_score(matrix, cfg.analysis.band)))
        an.write_attention_map_csv(maps.mean, maps.labels, out / "attention_map_mean.csv")
        plotting.save_attention_map(maps.mean, maps.labels, out / "attention_map_mean.png", "layer mean")
        entries.append(("mean", cfg.analysis.band, an.bandedness_score(maps.mean, cfg.analysis.band)))
        an.write_bandedness_csv(entries, out / "bandedness.csv")
        print(f"attention maps for layers {sorted(maps.per_layer)} written")

    if "zero_out" in tasks:
        results = [
            an.modal_zero_out_eval(model, cfg.env, modal, cfg.eval, normalized.stats, target)
            for modal in cfg.analysis.zero_out
        ]
        an.write_zero_out_csv(results, out / "zero_out.csv")
        plotting.save_zero_out(results, out / "zero_out.png")
        for r in results:
            print(f"zero-out {r.modal}: ratio {r.ratio:.4f}")

    if "ood_sweep" in tasks:
        points = an.ood_rtg_sweep(
            model, cfg.env, cfg.analysis.ood_multipliers, cfg.eval, normalized.stats, target
        )
        an.write_sweep_csv(points, out / "ood_sweep.csv")
        plotting.save_ood_sweep(points, out / "ood_sweep.png")
        print(f"target sweep over {len(points)} multipliers written")

    if "filters" in tasks:
        banks = an.export_filters(model)
        an.write_filters_csv(banks, out / "filters.csv")
        plotting.save_filters(banks, out / "filters.png")
        print(f"exported {len(banks)} filter banks")

    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg, "ablate")
    if not cfg.analysis.grid:
        raise ConfigError("analysis.grid: no axes configured for ablate")
    dataset_path = Path(cfg.dataset.path)
    if dataset_path.exists():
        dataset = read_dataset(dataset_path)
    else:
        dataset = generate_dataset(
            cfg.env,
            cfg.dataset.policy_mix,
            cfg.dataset.n_episodes,
            seed=cfg.env.seed,
            epsilon=cfg.dataset.epsilon,
        )
    save_config(cfg, out / "resolved_config.yaml")
    try:
        runs, cells = an.run_ablation_grid(
            cfg, cfg.analysis.grid, cfg.analysis.seeds, dataset, jobs=args.jobs
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    an.write_ablation_runs_csv(runs, out / "ablation_runs.csv")
    an.write_ablation_summary_csv(cells, out / "ablation_summary.csv")
    plotting.save_ablation(runs, out / "ablation.png")
    print(f"{len(runs)} runs over {len(cells)} cells")
    for cell in cells:
        desc = ", ".join(f"{k}={v}" for k, v in cell.cell.items())
        print(f"  {desc}: {cell.mean:.4f} +- {cell.std:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskrl",
        description="Desk-scale offline RL lab: datasets, training, evaluation, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--out", default=None, help="artifact directory")

    p = sub.add_parser("gen-data", help="generate an offline dataset from behavior policies")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the out dir's checkpoint")
    p.add_argument("--log-every", type=int, default=0, help="print loss every N updates")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at the configured targets")
    common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="attention maps, zero-out, target sweep, filter export")
    common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ablate", help="train/evaluate every cell of a config grid")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="worker threads for grid cells")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, CheckpointError, an.AnalysisError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
