"""Diagnostics: attention-map extraction, bandedness, modal zero-out,
out-of-distribution target sweeps, ablation grids, and filter export.

All artifacts are written as CSV; figure rendering on top of these tables
lives in :mod:`deskrl.plotting` and is wired up by the CLI.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .data import Dataset, WindowSampler
from .envs import EnvSpec
from .model import (
    MIXER_CONV,
    MODAL_NAMES,
    SequenceModel,
)
from .training import EvalConfig, TAG_EVAL, evaluate_returns

__all__ = [
    "AnalysisError",
    "AttentionMaps",
    "ZeroOutResult",
    "SweepPoint",
    "AblationRun",
    "AblationCell",
    "position_labels",
    "extract_attention_maps",
    "bandedness_score",
    "modal_zero_out_eval",
    "ood_rtg_sweep",
    "export_filters",
    "write_attention_map_csv",
    "read_attention_map_csv",
    "write_bandedness_csv",
    "write_zero_out_csv",
    "write_sweep_csv",
    "write_filters_csv",
    "read_filters_csv",
    "write_ablation_runs_csv",
    "write_ablation_summary_csv",
    "ABLATION_AXES",
    "expand_grid",
    "grid_cell_valid",
]

logger = logging.getLogger(__name__)


class AnalysisError(ValueError):
    """An analysis was requested on an incompatible model or artifact."""


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def position_labels(config) -> list[str]:
    """Column labels for token positions: modality plus 1-based timestep."""
    layout = config.layout()
    return [
        f"{MODAL_NAMES[int(m)]}_{int(t) + 1}"
        for m, t in zip(layout.modal_ids, layout.timesteps)
    ]


@dataclass
class AttentionMaps:
    """Mean mixing weights over a probe set, per attention-bearing layer."""

    per_layer: dict[int, np.ndarray]
    mean: np.ndarray
    labels: list[str]
    n_windows: int


def extract_attention_maps(
    model: SequenceModel,
    dataset: Dataset,
    n_probe_windows: int = 256,
    seed: int = 0,
    layers: list[int] | None = None,
) -> AttentionMaps:
    """Average the attention weights (or the masked direct mixing matrix)
    over sampled probe windows.

    Conv layers have no attention map; probing one is an error (their
    filters are exported by :func:`export_filters` instead).
    """
    mixer_layers = [i for i, kind in enumerate(model.config.mixers) if kind != MIXER_CONV]
    if layers is None:
        layers = mixer_layers
    else:
        for i in layers:
            if i >= len(model.config.mixers) or model.config.mixers[i] == MIXER_CONV:
                raise AnalysisError(
                    f"block {i} uses the conv mixer and has no attention map; "
                    "use export_filters for conv blocks"
                )
    if not layers:
        raise AnalysisError(
            "model has no attention or direct-attention blocks to probe; "
            "use export_filters for conv blocks"
        )
    rng = np.random.default_rng([seed, 0xA77])
    sampler = WindowSampler(dataset, model.config.context_length, rng)
    n = model.config.seq_len
    sums = {i: np.zeros((n, n)) for i in layers}
    for _ in range(n_probe_windows):
        window = sampler.sample()
        capture: list[np.ndarray] = []
        model.forward_window(window, capture=capture)
        for layer_index, mats in zip(mixer_layers, capture):
            if layer_index in sums:
                sums[layer_index] += mats[0]
    per_layer = {i: s / n_probe_windows for i, s in sums.items()}
    mean = np.mean(list(per_layer.values()), axis=0)
    return AttentionMaps(per_layer, mean, position_labels(model.config), n_probe_windows)


def bandedness_score(map_matrix: np.ndarray, band: int) -> float:
    """Fraction of each row's causal mass within ``band`` positions of the
    diagonal, averaged over rows with nonzero mass.

    Scale-invariant: multiplying the map by any c > 0 leaves it unchanged.
    """
    if band < 1:
        raise ValueError("band must be >= 1")
    m = np.abs(np.asarray(map_matrix, dtype=np.float64))
    ratios = []
    for i in range(m.shape[0]):
        total = m[i, : i + 1].sum()
        if total == 0.0:
            continue
        in_band = m[i, max(0, i - band + 1) : i + 1].sum()
        ratios.append(in_band / total)
    if not ratios:
        raise ValueError("bandedness_score: all-zero map")
    return float(np.mean(ratios))


@dataclass
class ZeroOutResult:
    modal: str
    intact_mean: float
    intact_std: float
    zeroed_mean: float
    zeroed_std: float

    @property
    def ratio(self) -> float:
        return self.zeroed_mean / self.intact_mean if self.intact_mean != 0.0 else float("nan")


def modal_zero_out_eval(
    model: SequenceModel,
    env_spec: EnvSpec,
    modal: str,
    eval_config: EvalConfig,
    stats,
    target: float,
) -> ZeroOutResult:
    """Evaluate with one modality's inputs zeroed (the current state is kept
    intact) and report the return relative to the unmodified evaluation.

    Both evaluations run on the same seeded episode stream.
    """
    if modal not in ("rtg", "state", "action"):
        raise ValueError(f"unknown modal {modal!r}; choose rtg, state, or action")
    seed = [eval_config.seed, TAG_EVAL, 0]
    kwargs = dict(
        stats=stats,
        target=target,
        episodes=eval_config.episodes_per_target,
        seed=seed,
        deterministic=eval_config.deterministic,
    )
    intact = evaluate_returns(model, env_spec, **kwargs)
    zeroed = evaluate_returns(model, env_spec, zero_modal=modal, **kwargs)
    return ZeroOutResult(
        modal,
        float(intact.mean()),
        float(intact.std()),
        float(zeroed.mean()),
        float(zeroed.std()),
    )


@dataclass
class SweepPoint:
    multiplier: float
    target: float
    return_mean: float
    return_std: float


def ood_rtg_sweep(
    model: SequenceModel,
    env_spec: EnvSpec,
    multipliers,
    eval_config: EvalConfig,
    stats,
    max_return: float,
) -> list[SweepPoint]:
    """Evaluate at each multiple of the dataset max return, in-distribution
    and beyond."""
    points = []
    for i, mult in enumerate(multipliers):
        target = float(mult) * max_return
        returns = evaluate_returns(
            model,
            env_spec,
            stats,
            target,
            eval_config.episodes_per_target,
            seed=[eval_config.seed, TAG_EVAL, i],
            deterministic=eval_config.deterministic,
        )
        points.append(SweepPoint(float(mult), target, float(returns.mean()), float(returns.std())))
    return points


# ---------------------------------------------------------------------------
# filter export


def export_filters(model: SequenceModel) -> list[tuple[int, str, np.ndarray]]:
    """Per-block, per-bank (d, L) filter coefficient tables for conv blocks."""
    banks = []
    found = False
    for i, kind in enumerate(model.config.mixers):
        if kind != MIXER_CONV:
            continue
        found = True
        if model.config.unified_filter:
            names = ["unified"]
        elif model.config.include_action_tokens:
            names = ["rtg", "state", "action"]
        else:
            names = ["rtg", "state"]
        for name in names:
            banks.append((i, name, model.params[f"block{i}.mixer.filter_{name}"].data.copy()))
    if not found:
        raise AnalysisError("model has no conv blocks; use extract_attention_maps instead")
    return banks


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_AXES = (
    "K",
    "L",
    "filter_count",
    "mixer_kind",
    "activation",
    "include_action_tokens",
    "use_projection_layer",
)


def grid_cell_valid(cell: dict) -> tuple[bool, str]:
    """A cell is skipped when its filter length exceeds the sequence length."""
    k = cell.get("K")
    length = cell.get("L")
    if k is not None and length is not None and length > 3 * k - 1:
        return False, f"filter length {length} exceeds sequence length {3 * k - 1}"
    return True, ""


def expand_grid(axes: dict[str, list]) -> list[dict]:
    """Cartesian product of axis values, in axis-declaration order."""
    for axis in axes:
        if axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
        if axis == "filter_count":
            for v in axes[axis]:
                if v not in (1, 3):
                    raise ValueError("filter_count axis values must be 1 or 3")
    names = list(axes)
    cells = []
    for values in product(*(axes[a] for a in names)):
        cells.append(dict(zip(names, values)))
    return cells


@dataclass
class AblationRun:
    cell: dict
    seed: int
    return_mean: float
    return_std: float


@dataclass
class AblationCell:
    cell: dict
    metric: str
    seeds: list[int]
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def run_ablation_grid(
    base_config,
    axes: dict[str, list],
    seeds,
    dataset: Dataset,
    jobs: int = 1,
) -> tuple[list[AblationRun], list[AblationCell]]:
    """Train and evaluate every valid grid cell for every seed.

    ``base_config`` is a resolved :class:`deskrl.config.RunConfig`; each
    cell applies its axis overrides on top of it and runs the standard
    train-then-evaluate pipeline on the shared dataset. Invalid cells
    (see :func:`grid_cell_valid`) are skipped and logged. Cells are
    independent and may run on worker threads.
    """
    from .pipeline import apply_cell_overrides, execute_run

    cells = expand_grid(axes)
    tasks = []
    for cell in cells:
        ok, reason = grid_cell_valid(cell)
        if not ok:
            logger.warning("skipping ablation cell %s: %s", cell, reason)
            continue
        for seed in seeds:
            tasks.append((cell, int(seed)))

    def run_one(task):
        cell, seed = task
        cfg = apply_cell_overrides(base_config, cell, seed)
        out = execute_run(cfg, dataset)
        first = out.eval_results[0]
        return AblationRun(cell, seed, first.mean, first.std)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(run_one, tasks))
    else:
        runs = [run_one(t) for t in tasks]

    by_cell: dict[str, AblationCell] = {}
    for run in runs:
        key = repr(sorted(run.cell.items()))
        agg = by_cell.get(key)
        if agg is None:
            agg = AblationCell(run.cell, "return_mean", [], [])
            by_cell[key] = agg
        agg.seeds.append(run.seed)
        agg.values.append(run.return_mean)
    return runs, list(by_cell.values())


# ---------------------------------------------------------------------------
# CSV artifacts


def _open_csv(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline="\n")


def write_attention_map_csv(matrix: np.ndarray, labels: list[str], path) -> None:
    with _open_csv(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["position"] + labels)
        for label, row in zip(labels, matrix):
            writer.writerow([label] + [repr(float(v)) for v in row])


def read_attention_map_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path) as f:
        rows = list(csv.reader(f))
    labels = rows[0][1:]
    matrix = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return matrix, labels


def write_bandedness_csv(entries: list[tuple[str, int, float]], path) -> None:
    with _open_csv(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["layer", "band", "score"])
        for layer, band, score in entries:
            writer.writerow([layer, band, repr(float(score))])


def write_zero_out_csv(results: list[ZeroOutResult], path) -> None:
    with _open_csv(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(
            ["modal", "intact_return_mean", "intact_return_std", "zeroed_return_mean", "zeroed_return_std", "return_ratio"]
        )
        for r in results:
            writer.writerow(
                [r.modal, _fmt(r.intact_mean), _fmt(r.intact_std), _fmt(r.zeroed_mean), _fmt(r.zeroed_std), _fmt(r.ratio)]
            )


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with _open_csv(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["multiplier", "target", "return_mean", "return_std"])
        for p in points:
            writer.writerow([_fmt(p.multiplier), _fmt(p.target), _fmt(p.return_mean), _fmt(p.return_std)])


def write_filters_csv(banks: list[tuple[int, str, np.ndarray]], path) -> None:
    length = banks[0][2].shape[1]
    with _open_csv(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["block", "bank", "dim"] + [f"lag_{i}" for i in range(length)])
        for block, bank, coeffs in banks:
            for q in range(coeffs.shape[0]):
                writer.writerow([block, bank, q] + [repr(float(v)) for v in coeffs[q]])


def read_filters_csv(path) -> list[tuple[int, str, np.ndarray]]:
    with open(path) as f:
        rows = list(csv.reader(f))
    header = rows[0]
    length = len(header) - 3
    grouped: dict[tuple[int, str], list[tuple[int, list[float]]]] = {}
    for row in rows[1:]:
        key = (int(row[0]), row[1])
        grouped.setdefault(key, []).append((int(row[2]), [float(v) for v in row[3 : 3 + length]]))
    banks = []
    for (block, bank), entries in grouped.items():
        entries.sort()
        banks.append((block, bank, np.array([coeffs for _, coeffs in entries])))
    return banks


def _cell_columns(runs: list[AblationRun]) -> list[str]:
    cols: list[str] = []
    for run in runs:
        for key in run.cell:
            if key not in cols:
                cols.append(key)
    return cols


def write_ablation_runs_csv(runs: list[AblationRun], path) -> None:
    cols = _cell_columns(runs)
    with _open_csv(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(cols + ["seed", "return_mean", "return_std"])
        for run in runs:
            writer.writerow(
                [_fmt(run.cell.get(c, "")) for c in cols]
                + [run.seed, _fmt(run.return_mean), _fmt(run.return_std)]
            )


def write_ablation_summary_csv(cells: list[AblationCell], path) -> None:
    cols: list[str] = []
    for cell in cells:
        for key in cell.cell:
            if key not in cols:
                cols.append(key)
    with _open_csv(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(cols + ["metric", "n_seeds", "seeds", "values", "mean", "std"])
        for cell in cells:
            writer.writerow(
                [_fmt(cell.cell.get(c, "")) for c in cols]
                + [
                    cell.metric,
                    len(cell.seeds),
                    ";".join(str(s) for s in cell.seeds),
                    ";".join(repr(v) for v in cell.values),
                    _fmt(cell.mean),
                    _fmt(cell.std),
                ]
            )
