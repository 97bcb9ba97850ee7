"""Robustness and train-size sweeps over corrupted copies of the training set.

A sweep walks a grid of corruption levels (or train-set fractions). Every
cell corrupts a fresh copy of the training split, trains each requested
model with each of the cell's seeds, and evaluates on the untouched test
split, so test and validation data are byte-identical across all cells.
Cell failures are recorded, not raised, and never abort the rest of the
grid. Aggregation reports the per-cell median (robustness sweeps) or the
mean with a normal-approximation 95% confidence interval (train-size
sweep).

Classifier baselines read the whole record at once; their "episode length"
is reported as the full feature count to keep one result schema for every
model.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .baselines import CartConfig, FfnnConfig, cart_train, ffnn_train
from .catalog import FEATURE_COUNT, Dataset
from .corruption import CorruptionConfig, default_corruption_config, \
    inject_missingness, inject_noise
from .dqn import VARIANTS, AgentConfig, train
from .env import DEFAULT_MAX_STEPS, TerminalCause
from .evaluate import EpisodeOutcome, PolicyAgent, compute_metrics, \
    run_episodes

__all__ = [
    "SWEEP_KINDS",
    "DEFAULT_GRIDS",
    "DEFAULT_MODELS",
    "CLASSIFIER_MODELS",
    "SweepSpec",
    "CellResult",
    "AggregateRow",
    "CELL_CSV_COLUMNS",
    "corrupt_train",
    "classifier_outcomes",
    "run_cell",
    "run_sweep",
    "aggregate_sweep",
    "write_sweep_csv",
    "read_sweep_csv",
    "write_figure_table",
    "write_sweep_summary",
    "write_timing_report",
]

SWEEP_KINDS = ("missingness", "noise", "noise+missingness", "train-size")

DEFAULT_GRIDS = {
    "missingness": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7),
    "noise": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "noise+missingness": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7),
    "train-size": (0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0),
}

CLASSIFIER_MODELS = ("cart", "ffnn")

# The train-size comparison runs the double+dueling+prioritized agent; the
# corruption sweeps run the dueling+prioritized one.
DEFAULT_MODELS = {
    "missingness": ("dueling-per", "cart", "ffnn"),
    "noise": ("dueling-per", "cart", "ffnn"),
    "noise+missingness": ("dueling-per", "cart", "ffnn"),
    "train-size": ("dueling-ddqn-per", "cart", "ffnn"),
}

COMBINED_FIXED_NOISE = 0.2


@dataclass
class SweepSpec:
    """One sweep request: kind, level grid, models, and the seed protocol."""

    kind: str
    grid: Optional[tuple] = None
    models: Optional[tuple] = None
    seeds_per_cell: int = 5
    base_seed: int = 0
    fixed_noise: float = COMBINED_FIXED_NOISE
    agent_overrides: dict = field(default_factory=dict)
    cart_config: Optional[CartConfig] = None
    ffnn_config: Optional[FfnnConfig] = None
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        if self.grid is None:
            self.grid = DEFAULT_GRIDS.get(self.kind)
        elif not isinstance(self.grid, tuple):
            self.grid = tuple(float(v) for v in self.grid)
        if self.models is None:
            self.models = DEFAULT_MODELS.get(self.kind)
        elif not isinstance(self.models, tuple):
            self.models = tuple(self.models)

    def validate(self) -> None:
        if self.kind not in SWEEP_KINDS:
            raise ValueError(
                f"unknown sweep kind {self.kind!r}; expected one of {SWEEP_KINDS}")
        if not self.grid:
            raise ValueError("sweep grid must be non-empty")
        for level in self.grid:
            if self.kind == "train-size":
                if not 0.0 < level <= 1.0:
                    raise ValueError("train-size fractions must be in (0, 1]")
            elif not 0.0 <= level <= 1.0:
                raise ValueError("corruption levels must be in [0, 1]")
        if not self.models:
            raise ValueError("sweep needs at least one model")
        known = set(VARIANTS) | set(CLASSIFIER_MODELS)
        for model in self.models:
            if model not in known:
                raise ValueError(
                    f"unknown model {model!r}; expected one of {sorted(known)}")
        if self.seeds_per_cell < 1:
            raise ValueError("seeds_per_cell must be at least 1")
        if not 0.0 <= self.fixed_noise <= 1.0:
            raise ValueError("fixed_noise must be in [0, 1]")

    @property
    def aggregate_stat(self) -> str:
        return "mean95" if self.kind == "train-size" else "median"


CELL_CSV_COLUMNS = (
    "kind", "level", "model", "seed", "ok", "error", "accuracy", "macro_f1",
    "macro_auc", "mean_episode_length", "train_wall_time_s",
    "inference_time_per_record_s",
)


@dataclass
class CellResult:
    """Outcome of one (level, model, seed) training-and-evaluation run."""

    kind: str
    level: float
    model: str
    seed: int
    ok: bool
    error: Optional[str] = None
    accuracy: Optional[float] = None
    macro_f1: Optional[float] = None
    macro_auc: Optional[float] = None
    mean_episode_length: Optional[float] = None
    train_wall_time_s: Optional[float] = None
    inference_time_per_record_s: Optional[float] = None

    def to_row(self) -> list:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [self.kind, repr(float(self.level)), self.model,
                str(self.seed), "1" if self.ok else "0", self.error or "",
                fmt(self.accuracy), fmt(self.macro_f1), fmt(self.macro_auc),
                fmt(self.mean_episode_length), fmt(self.train_wall_time_s),
                fmt(self.inference_time_per_record_s)]

    @classmethod
    def from_row(cls, row: dict) -> "CellResult":
        def num(key):
            return float(row[key]) if row[key] != "" else None

        return cls(row["kind"], float(row["level"]), row["model"],
                   int(row["seed"]), row["ok"] == "1", row["error"] or None,
                   num("accuracy"), num("macro_f1"), num("macro_auc"),
                   num("mean_episode_length"), num("train_wall_time_s"),
                   num("inference_time_per_record_s"))


def corrupt_train(train: Dataset, kind: str, level: float,
                  fixed_noise: float = COMBINED_FIXED_NOISE,
                  corruption: Optional[CorruptionConfig] = None,
                  seed: int = 0) -> Dataset:
    """Build the training set for one sweep cell.

    The combined sweep injects noise at the fixed level first, then hides
    values at the cell's missingness level, from one seeded stream. The
    train-size fraction 1.0 returns the training split itself so that cell
    reproduces the uncorrupted run exactly.
    """
    if corruption is None and kind in ("noise", "noise+missingness"):
        corruption = default_corruption_config()
    rng = np.random.default_rng(seed)
    if kind == "missingness":
        return inject_missingness(train, level, rng=rng)
    if kind == "noise":
        return inject_noise(train, level, corruption, rng=rng)
    if kind == "noise+missingness":
        noisy = inject_noise(train, fixed_noise, corruption, rng=rng)
        return inject_missingness(noisy, level, rng=rng)
    if kind == "train-size":
        if level >= 1.0:
            return train
        k = max(1, int(math.floor(level * len(train))))
        rows = rng.choice(len(train), size=k, replace=False)
        rows.sort()
        return train.subset(rows)
    raise ValueError(f"unknown sweep kind {kind!r}")


def classifier_outcomes(model, test: Dataset) -> list:
    """Evaluate a whole-record classifier in the episode-outcome schema."""
    predicted, scores = model.predict(test.values)
    return [
        EpisodeOutcome(int(test.labels[i]), int(predicted[i]), FEATURE_COUNT,
                       scores[i], TerminalCause.DIAGNOSED)
        for i in range(len(test))
    ]


def _evaluate_classifier(model, test: Dataset, seed: int):
    started = time.perf_counter()
    outcomes = classifier_outcomes(model, test)
    elapsed = time.perf_counter() - started
    report = compute_metrics(outcomes, seed=seed)
    report.inference_time_per_record_s = elapsed / len(test)
    return report


def run_cell(kind: str, level: float, model: str, seed: int, train_set: Dataset,
             validation: Dataset, test: Dataset,
             corruption: Optional[CorruptionConfig] = None,
             fixed_noise: float = COMBINED_FIXED_NOISE,
             agent_overrides: Optional[dict] = None,
             cart_config: Optional[CartConfig] = None,
             ffnn_config: Optional[FfnnConfig] = None,
             max_steps: int = DEFAULT_MAX_STEPS,
             timing: bool = True) -> CellResult:
    """Train and evaluate one model on one corrupted cell. Never raises.

    With `timing` False the wall-clock fields stay empty, which keeps every
    derived artifact byte-identical across repeated runs of the same seed.
    """
    result = CellResult(kind, level, model, seed, ok=False)
    try:
        cell_train = corrupt_train(train_set, kind, level, fixed_noise,
                                   corruption, seed)
        started = time.perf_counter()
        if model in CLASSIFIER_MODELS:
            if model == "cart":
                fitted = cart_train(cell_train, cart_config)
            else:
                fitted = ffnn_train(cell_train, ffnn_config, seed=seed)
            train_elapsed = time.perf_counter() - started
            report = _evaluate_classifier(fitted, test, seed)
        else:
            config = AgentConfig.for_variant(model, **(agent_overrides or {}))
            trained = train(cell_train, config, seed=seed,
                            validation=validation)
            train_elapsed = time.perf_counter() - started
            eval_started = time.perf_counter()
            outcomes = run_episodes(PolicyAgent(trained.policy), test,
                                    max_steps=max_steps)
            eval_elapsed = time.perf_counter() - eval_started
            report = compute_metrics(outcomes, seed=seed)
            report.inference_time_per_record_s = eval_elapsed / len(test)
        report.train_wall_time_s = train_elapsed
        result.ok = True
        result.accuracy = report.accuracy
        result.macro_f1 = report.macro_f1
        result.macro_auc = report.macro_auc
        result.mean_episode_length = report.mean_episode_length
        if timing:
            result.train_wall_time_s = report.train_wall_time_s
            result.inference_time_per_record_s = \
                report.inference_time_per_record_s
    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def _run_cell_payload(payload) -> CellResult:
    return run_cell(*payload)


def run_sweep(spec: SweepSpec, train_set: Dataset, validation: Dataset,
              test: Dataset, corruption: Optional[CorruptionConfig] = None,
              jobs: int = 1, timing: bool = True,
              progress: Optional[Callable[[CellResult], None]] = None) -> list:
    """Run every (level, model, seed) cell of a sweep.

    Results arrive in deterministic grid order regardless of `jobs`. Seeds
    are shared across levels and models (base_seed + run index), pairing
    runs for model-to-model comparisons.
    """
    spec.validate()
    if corruption is None and spec.kind in ("noise", "noise+missingness"):
        corruption = default_corruption_config()
    payloads = [
        (spec.kind, level, model, spec.base_seed + run, train_set, validation,
         test, corruption, spec.fixed_noise, spec.agent_overrides,
         spec.cart_config, spec.ffnn_config, spec.max_steps, timing)
        for level in spec.grid
        for model in spec.models
        for run in range(spec.seeds_per_cell)
    ]
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(_run_cell_payload, payloads):
                results.append(result)
                if progress is not None:
                    progress(result)
    else:
        for payload in payloads:
            result = _run_cell_payload(payload)
            results.append(result)
            if progress is not None:
                progress(result)
    return results


@dataclass
class AggregateRow:
    """Per-(level, model) summary: median, or mean with a 95% interval."""

    level: float
    model: str
    stat: str
    n_ok: int
    n_total: int
    accuracy: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None


def aggregate_sweep(rows: Sequence[CellResult], stat: str = "median") -> list:
    """Aggregate cell results per (level, model), preserving grid order."""
    if stat not in ("median", "mean95"):
        raise ValueError("stat must be 'median' or 'mean95'")
    order = []
    grouped = {}
    for row in rows:
        key = (row.level, row.model)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(row)
    out = []
    for level, model in order:
        cells = grouped[(level, model)]
        values = np.array([c.accuracy for c in cells if c.ok], dtype=np.float64)
        agg = AggregateRow(level, model, stat, int(values.size), len(cells))
        if values.size:
            if stat == "median":
                agg.accuracy = float(np.median(values))
            else:
                mean = float(values.mean())
                half = 0.0
                if values.size > 1:
                    sd = float(values.std(ddof=1))
                    half = 1.96 * sd / math.sqrt(values.size)
                agg.accuracy = mean
                agg.ci_low = mean - half
                agg.ci_high = mean + half
        out.append(agg)
    return out


def write_sweep_csv(rows: Sequence[CellResult], path) -> None:
    """Per-run long table: one row per (level, model, seed)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CELL_CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.to_row())


def read_sweep_csv(path) -> list:
    with open(path, newline="") as fh:
        return [CellResult.from_row(row) for row in csv.DictReader(fh)]


def write_figure_table(rows: Sequence[CellResult], stat: str, path) -> None:
    """Figure-ready long table: level on the x axis, one row per model point."""
    aggregates = aggregate_sweep(rows, stat)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if stat == "median":
            writer.writerow(["level", "model", "accuracy_median", "n_ok"])
            for agg in aggregates:
                writer.writerow([
                    repr(float(agg.level)), agg.model,
                    "" if agg.accuracy is None else repr(float(agg.accuracy)),
                    str(agg.n_ok)])
        else:
            writer.writerow(["level", "model", "accuracy_mean", "ci_low",
                             "ci_high", "n_ok"])
            for agg in aggregates:
                def fmt(x):
                    return "" if x is None else repr(float(x))
                writer.writerow([repr(float(agg.level)), agg.model,
                                 fmt(agg.accuracy), fmt(agg.ci_low),
                                 fmt(agg.ci_high), str(agg.n_ok)])


def write_sweep_summary(spec: SweepSpec, rows: Sequence[CellResult],
                        path) -> None:
    """Human-readable structured summary of one sweep."""
    aggregates = aggregate_sweep(rows, spec.aggregate_stat)
    failed = [r for r in rows if not r.ok]
    lines = [
        f"sweep: {spec.kind}",
        f"grid: {' '.join(repr(float(v)) for v in spec.grid)}",
        f"models: {' '.join(spec.models)}",
        f"seeds per cell: {spec.seeds_per_cell} (base seed {spec.base_seed})",
        f"aggregate: {spec.aggregate_stat}",
    ]
    if spec.kind == "noise+missingness":
        lines.append(f"fixed noise level: {repr(float(spec.fixed_noise))}")
    lines.append(f"cells: {len(rows)} total, {len(rows) - len(failed)} ok, "
                 f"{len(failed)} failed")
    lines.append("")
    for level in spec.grid:
        lines.append(f"[level {repr(float(level))}]")
        for agg in aggregates:
            if agg.level != level:
                continue
            if agg.accuracy is None:
                lines.append(f"  {agg.model:<18} FAILED "
                             f"({agg.n_ok}/{agg.n_total} ok)")
            elif spec.aggregate_stat == "median":
                lines.append(
                    f"  {agg.model:<18} accuracy median {agg.accuracy:7.3f} "
                    f"({agg.n_ok}/{agg.n_total} ok)")
            else:
                lines.append(
                    f"  {agg.model:<18} accuracy mean {agg.accuracy:7.3f} "
                    f"ci95 [{agg.ci_low:7.3f}, {agg.ci_high:7.3f}] "
                    f"({agg.n_ok}/{agg.n_total} ok)")
        lines.append("")
    for row in failed:
        lines.append(f"failed: level {repr(float(row.level))} model "
                     f"{row.model} seed {row.seed}: {row.error}")
    if failed:
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def write_timing_report(rows: Sequence[CellResult], path) -> None:
    """Per-model wall-clock table: training time and per-record testing time."""
    order = []
    grouped = {}
    for row in rows:
        if not row.ok:
            continue
        if row.model not in grouped:
            grouped[row.model] = []
            order.append(row.model)
        grouped[row.model].append(row)
    lines = [f"{'Model':<20} {'Training time (s)':>20} "
             f"{'Testing time per record (s)':>30}"]
    for model in order:
        cells = grouped[model]
        train_med = float(np.median([c.train_wall_time_s for c in cells]))
        infer_med = float(np.median(
            [c.inference_time_per_record_s for c in cells]))
        lines.append(f"{model:<20} {train_med:>20.3f} {infer_med:>30.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
