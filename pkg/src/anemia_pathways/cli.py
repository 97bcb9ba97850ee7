"""Command-line entry point.

One binary, six subcommands: ``generate`` synthesizes the labeled record
splits, ``train`` fits an agent or baseline, ``evaluate`` scores one on a
test split, ``sweep`` runs robustness grids, ``pathways`` exports decision
flow graphs, and ``session`` steps through an interactive diagnosis.
Every subcommand exits 0 on success and nonzero with a one-line
diagnostic on failure; all randomness flows through explicit ``--seed``
flags, and report paths receive rendered figures next to the delimited
outputs they illustrate.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import (
    CartConfig,
    FfnnConfig,
    RandomAgent,
    TreeAgent,
    cart_train,
    ffnn_train,
)
from .catalog import Dataset, DiagnosisClass
from .corruption import CorruptionConfig, default_corruption_config
from .dqn import VARIANTS, AgentConfig, Policy, train
from .env import DEFAULT_MAX_STEPS
from .evaluate import (
    PolicyAgent,
    classification_report,
    compute_metrics,
    format_classification_report,
    run_episodes,
)
from .figures import confusion_figure, sweep_figure, training_curve_figure
from .generation import (
    generate_dataset,
    load_dataset_config,
    make_inconclusive,
    split_dataset,
)
from .pathways import aggregate, export_sankey, run_traced, write_traces_csv
from .sessions import DiagnosisSession, InvalidValueError, SessionStatus, parse_value
from .sweeps import (
    SWEEP_KINDS,
    SweepSpec,
    run_sweep,
    write_figure_table,
    write_sweep_csv,
    write_sweep_summary,
    write_timing_report,
)

__all__ = ["main"]

SPLIT_NAMES = ("train", "validation", "test")
BASELINE_MODELS = ("cart", "ffnn")


class CliError(Exception):
    """User-facing failure; main() turns it into exit code 2."""


# --------------------------------------------------------------------------
# shared plumbing


def _parse_override(token: str) -> tuple[str, object]:
    key, sep, text = token.partition("=")
    if not sep or not key:
        raise CliError(f"override {token!r} is not of the form key=value")
    return key, _parse_value_token(text)


def _parse_value_token(text: str):
    if "," in text:
        return tuple(_parse_scalar(part) for part in text.split(","))
    return _parse_scalar(text)


def _parse_scalar(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _overrides_from(args: argparse.Namespace) -> dict:
    out = {}
    for token in args.set or []:
        key, value = _parse_override(token)
        out[key] = value
    return out


def _load_agent_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    import yaml

    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise CliError(f"{path}: expected a mapping of config fields")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}


def _read_split(data_dir: str, split: str) -> Dataset:
    path = Path(data_dir) / f"{split}.csv"
    if not path.exists():
        raise CliError(f"no {split}.csv in {data_dir}; run generate first")
    return Dataset.read_csv(path)


def _ensure_out(path_text: str) -> Path:
    out = Path(path_text)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_text(path: Optional[str]) -> str:
    if path is None:
        return (resources.files("anemia_pathways")
                / "data/dataset_config.yaml").read_text()
    with open(path) as fh:
        return fh.read()


def _parse_classes(text: Optional[str]) -> Optional[list[DiagnosisClass]]:
    if text is None:
        return None
    classes = []
    for slug in text.split(","):
        slug = slug.strip()
        if not slug:
            continue
        try:
            classes.append(DiagnosisClass.from_slug(slug))
        except (KeyError, ValueError):
            valid = ", ".join(cls.slug for cls in DiagnosisClass)
            raise CliError(f"unknown class {slug!r}; valid classes: {valid}")
    return classes


def _load_policy(path_text: str) -> Policy:
    path = Path(path_text)
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    return Policy.load(path)


# --------------------------------------------------------------------------
# generate


def cmd_generate(args: argparse.Namespace) -> int:
    config, split_cfg, _ = load_dataset_config(args.config)
    if args.classes is not None:
        if args.classes <= 0:
            raise CliError("--classes must be a positive record count")
        config.records_per_class = args.classes
        config.validate()

    root = np.random.SeedSequence(args.seed)
    gen_seq, split_seq = root.spawn(2)
    gen_rng = np.random.default_rng(gen_seq)
    clean = generate_dataset(config, rng=gen_rng)
    full = make_inconclusive(clean, config.inconclusive_fraction, rng=gen_rng)
    train_ds, val_ds, test_ds = split_dataset(
        full, split_cfg, rng=np.random.default_rng(split_seq))

    out = _ensure_out(args.out)
    counts = {}
    for name, ds in zip(SPLIT_NAMES, (train_ds, val_ds, test_ds)):
        ds.write_csv(out / f"{name}.csv")
        counts[name] = len(ds)

    digest = hashlib.sha256(_config_text(args.config).encode())
    digest.update(f"records_per_class={config.records_per_class}".encode())
    manifest = {
        "seed": args.seed,
        "config_hash": digest.hexdigest(),
        "records_per_class": config.records_per_class,
        "counts": counts,
        "class_counts": {
            name: {cls.slug: n for cls, n in sorted(ds.class_counts().items())}
            for name, ds in zip(SPLIT_NAMES, (train_ds, val_ds, test_ds))
        },
    }
    with open(out / "manifest.json", "w") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {counts['train']}/{counts['validation']}/{counts['test']} "
          f"train/validation/test records to {out}")
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    if (args.variant is None) == (args.model is None):
        raise CliError("pass exactly one of --variant or --model")
    out = _ensure_out(args.out)
    train_ds = _read_split(args.data, "train")
    overrides = _load_agent_config_file(args.config)
    overrides.update(_overrides_from(args))

    if args.model is not None:
        return _train_baseline(args, train_ds, out, overrides)

    if args.variant not in VARIANTS:
        raise CliError(f"unknown variant {args.variant!r}; valid variants: "
                       + ", ".join(sorted(VARIANTS)))
    if args.timesteps is not None:
        overrides["total_timesteps"] = args.timesteps
    try:
        config = AgentConfig.for_variant(args.variant, **overrides)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad agent config: {exc}")
    val_ds = _read_split(args.data, "validation")

    log_path = out / "training_log.csv"
    result = train(train_ds, config, seed=args.seed, validation=val_ds,
                   log_path=log_path)
    checkpoint = out / "policy.ckpt"
    result.policy.save(checkpoint)
    training_curve_figure(result.evaluations, result.losses,
                          out / "training_curve.png")
    print(f"trained {args.variant} for {config.total_timesteps} steps "
          f"(seed {args.seed}); best validation accuracy "
          f"{result.best_validation_accuracy:.3f} at step {result.best_step}; "
          f"checkpoint {checkpoint}")
    return 0


def _train_baseline(args: argparse.Namespace, train_ds: Dataset, out: Path,
                    overrides: dict) -> int:
    if args.model not in BASELINE_MODELS:
        raise CliError(f"unknown model {args.model!r}; valid models: "
                       + ", ".join(BASELINE_MODELS))
    if args.timesteps is not None:
        raise CliError("--timesteps applies only to --variant runs")
    try:
        if args.model == "cart":
            model = cart_train(train_ds, CartConfig(**overrides))
            path = out / "model.cart.txt"
        else:
            model = ffnn_train(train_ds, FfnnConfig(**overrides),
                               seed=args.seed)
            path = out / "model.ffnn.ckpt"
    except TypeError as exc:
        raise CliError(f"bad {args.model} config: {exc}")
    model.save(path)
    classes, _ = model.predict(train_ds.values)
    labels = np.array([record.label.value for record in train_ds])
    accuracy = 100.0 * float(np.mean(classes == labels))
    print(f"trained {args.model} on {len(train_ds)} records "
          f"(training accuracy {accuracy:.3f}); model {path}")
    return 0


# --------------------------------------------------------------------------
# evaluate


def _agent_for(kind: str, seed: int):
    if kind == "tree":
        return TreeAgent()
    if kind == "random":
        return RandomAgent(seed=seed)
    return PolicyAgent(_load_policy(kind))


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.seeds < 1:
        raise CliError("--seeds must be at least 1")
    test_ds = _read_split(args.data, args.split)
    out = _ensure_out(args.out)

    reports = []
    outcomes_first = None
    for run in range(args.seeds):
        seed = args.seed + run
        agent = _agent_for(args.agent, seed)
        outcomes = run_episodes(agent, test_ds, args.max_steps)
        if outcomes_first is None:
            outcomes_first = outcomes
        reports.append(compute_metrics(outcomes, seed=seed))

    accuracies = [r.accuracy for r in reports]
    lengths = [r.mean_episode_length for r in reports]
    doc = {
        "agent": args.agent,
        "dataset": str(Path(args.data) / f"{args.split}.csv"),
        "seeds": args.seeds,
        "accuracy_mean": float(np.mean(accuracies)),
        "accuracy_sd": float(np.std(accuracies, ddof=1)) if args.seeds > 1 else 0.0,
        "episode_length_mean": float(np.mean(lengths)),
        "runs": [r.to_dict() for r in reports],
    }
    with open(out / "report.json", "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rows = classification_report(outcomes_first)
    with open(out / "classification_report.txt", "w") as fh:
        fh.write(format_classification_report(rows) + "\n")
    confusion_figure(reports[0], out / "confusion.png")

    auc = reports[0].macro_auc
    print(f"accuracy {doc['accuracy_mean']:.3f}"
          + (f" +/- {doc['accuracy_sd']:.3f}" if args.seeds > 1 else "")
          + f"; mean episode length {doc['episode_length_mean']:.3f}"
          + (f"; macro AUC {auc:.3f}" if auc is not None else "")
          + f"; reports in {out}")
    return 0


# --------------------------------------------------------------------------
# sweep


def cmd_sweep(args: argparse.Namespace) -> int:
    train_ds = _read_split(args.data, "train")
    val_ds = _read_split(args.data, "validation")
    test_ds = _read_split(args.data, "test")
    out = _ensure_out(args.out)

    grid = None
    if args.grid is not None:
        try:
            grid = tuple(float(part) for part in args.grid.split(",") if part)
        except ValueError:
            raise CliError(f"--grid must be comma-separated numbers, got "
                           f"{args.grid!r}")
    models = None
    if args.models is not None:
        models = tuple(part.strip() for part in args.models.split(",") if part)

    corruption = default_corruption_config()
    if args.config is not None:
        _, _, mapping = load_dataset_config(args.config)
        corruption = CorruptionConfig.from_mapping(mapping)

    try:
        spec = SweepSpec(kind=args.kind, grid=grid, models=models,
                         seeds_per_cell=args.seeds_per_cell,
                         base_seed=args.seed,
                         agent_overrides=_overrides_from(args),
                         max_steps=args.max_steps)
        spec.validate()
    except ValueError as exc:
        raise CliError(str(exc))

    rows = run_sweep(spec, train_ds, val_ds, test_ds, corruption=corruption,
                     jobs=args.jobs, timing=args.timing)

    write_sweep_csv(rows, out / "cells.csv")
    write_figure_table(rows, spec.aggregate_stat, out / "figure_table.csv")
    write_sweep_summary(spec, rows, out / "summary.txt")
    sweep_figure(rows, spec.aggregate_stat, out / "sweep.png")
    if args.timing:
        write_timing_report(rows, out / "timing.txt")

    failed = sum(1 for row in rows if not row.ok)
    print(f"{args.kind} sweep: {len(rows)} cells, {failed} failed; "
          f"outputs in {out}")
    return 0


# --------------------------------------------------------------------------
# pathways


def cmd_pathways(args: argparse.Namespace) -> int:
    data = _read_split(args.data, args.split)
    if args.max_records is not None:
        if args.max_records < 1:
            raise CliError("--max-records must be at least 1")
        data = data.subset(np.arange(min(args.max_records, len(data))))
    out = _ensure_out(args.out)

    agent = TreeAgent() if args.agent == "tree" \
        else PolicyAgent(_load_policy(args.agent))
    traces = run_traced(agent, data, args.max_steps)
    write_traces_csv(traces, out / "traces.csv")

    class_filter = _parse_classes(args.classes)
    graph = aggregate(traces, class_filter=class_filter,
                      merge=not args.prefix, value_ranges=args.value_ranges)
    with open(out / "sankey.json", "w") as fh:
        fh.write(export_sankey(graph))

    print(f"traced {len(traces)} records -> {len(graph.nodes)} nodes, "
          f"{len(graph.links)} links; outputs in {out}")
    return 0


# --------------------------------------------------------------------------
# session


def cmd_session(args: argparse.Namespace) -> int:
    policy = _load_policy(args.checkpoint)
    session = DiagnosisSession(policy, max_steps=args.max_steps)
    prompt = "value> " if sys.stdin.isatty() else ""

    while not session.done:
        print(f"suggested test: {session.suggestion}")
        try:
            line = input(prompt)
        except EOFError:
            raise CliError("input ended before the session finished")
        try:
            value = parse_value(line)
        except InvalidValueError:
            print("please enter a number or 'missing'")
            continue
        session.observe(session.suggestion, value)

    view = session.view()
    if view.status is SessionStatus.DIAGNOSED:
        print(f"diagnosis: {view.diagnosis.label}")
    else:
        print(f"no diagnosis ({view.cause.value})")
    print("trace:")
    for i, step in enumerate(view.steps, start=1):
        if step.action >= len(policy.catalog):
            print(f"  {i}. {step.label}")
        elif step.value is None:
            print(f"  {i}. {step.label} = missing")
        else:
            print(f"  {i}. {step.label} = {step.value:g}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anemia-pathways",
        description="Learn, evaluate and explore step-by-step anemia "
                    "diagnosis pathways.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate",
                       help="synthesize labeled record splits")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=42, help="generation seed")
    p.add_argument("--config", help="dataset config YAML (default: packaged)")
    p.add_argument("--classes", type=int, default=None,
                   help="records generated per class (default from config)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train an agent variant or baseline")
    p.add_argument("--data", required=True, help="directory with split CSVs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", help="agent variant: " + ", ".join(sorted(VARIANTS)))
    p.add_argument("--model", help="baseline model: cart or ffnn")
    p.add_argument("--timesteps", type=int, default=None,
                   help="environment steps to train the variant for")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--config", help="YAML mapping of config-field overrides")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config-field override; repeatable, wins over --config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score an agent on a split")
    p.add_argument("--data", required=True, help="directory with split CSVs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--agent", required=True,
                   help="'tree', 'random', or a checkpoint path")
    p.add_argument("--split", default="test", choices=SPLIT_NAMES,
                   help="split to evaluate on (default: test)")
    p.add_argument("--seeds", type=int, default=1,
                   help="number of seeded runs to aggregate")
    p.add_argument("--seed", type=int, default=0, help="first run seed")
    p.add_argument("--max-steps", type=int, default=DEFAULT_MAX_STEPS,
                   help="episode step budget")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a robustness or train-size grid")
    p.add_argument("--data", required=True, help="directory with split CSVs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", required=True, choices=SWEEP_KINDS,
                   help="sweep axis")
    p.add_argument("--grid", help="comma-separated levels (default per kind)")
    p.add_argument("--models", help="comma-separated models (default per kind)")
    p.add_argument("--seeds-per-cell", type=int, default=5,
                   help="seeded repetitions per grid cell")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes")
    p.add_argument("--timing", action="store_true",
                   help="record wall times (off keeps artifacts byte-stable)")
    p.add_argument("--config", help="dataset config YAML for corruption rates")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="agent config-field override; repeatable")
    p.add_argument("--max-steps", type=int, default=DEFAULT_MAX_STEPS,
                   help="episode step budget")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pathways", help="export decision-flow graphs")
    p.add_argument("--data", required=True, help="directory with split CSVs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--agent", required=True,
                   help="'tree' or a checkpoint path")
    p.add_argument("--split", default="test", choices=SPLIT_NAMES,
                   help="split to trace (default: test)")
    p.add_argument("--classes",
                   help="comma-separated class slugs to keep (default: all)")
    p.add_argument("--prefix", action="store_true",
                   help="key nodes by full query history instead of merging")
    p.add_argument("--value-ranges", action="store_true",
                   help="annotate links with observed value ranges")
    p.add_argument("--max-records", type=int, default=None,
                   help="trace only the first N records")
    p.add_argument("--max-steps", type=int, default=DEFAULT_MAX_STEPS,
                   help="episode step budget")
    p.set_defaults(func=cmd_pathways)

    p = sub.add_parser("session", help="interactive diagnosis walk")
    p.add_argument("--checkpoint", required=True, help="policy checkpoint")
    p.add_argument("--max-steps", type=int, default=DEFAULT_MAX_STEPS,
                   help="episode step budget")
    p.set_defaults(func=cmd_session)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
