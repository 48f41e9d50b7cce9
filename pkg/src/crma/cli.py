"""Command-line experiment runner.

Subcommands:
  run <config>       seeded runs of the configured methods, aggregated table
  ablate <config>    the full 2^3 component-ablation grid
  baseline <config>  adaptive weighting vs. the uniform-ensemble baseline
  curves <run-dir>   validate per-run metric CSVs and write a manifest

Configs are flat ``key = value`` text with ``#`` comments; every field is
addressable as section.key (see README). Any key can be overridden on the
command line as ``--section.key=value``. Seeds for run i are derived as
base seed + i for both the task and the trainer, so methods see paired
tasks. Exit codes: 0 ok, 1 config error, 2 diverged run.
"""

from __future__ import annotations

import argparse
import difflib
import json
import math
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ShiftSpec, TaskSpec, generate_task
from .trainer import (
    AblationFlags,
    DivergedRunError,
    TrainConfig,
    save_checkpoint,
    train,
    write_history_csv,
)

METHODS = ("crma", "source_only", "uniform_ensemble")

# Table row order for the ablation grid: none, singles, pairs, all.
ABLATION_GRID = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
)


class ConfigError(ValueError):
    """A config file or override is malformed or names an unknown key."""


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    num_seeds: int = 5
    output_dir: str = "results"
    methods: tuple[str, ...] = ("crma", "source_only")


@dataclass
class Variant:
    """One table row: a method plus its ablation flags and weighting mode."""

    method: str
    flags: AblationFlags
    uniform: bool
    label: str


@dataclass
class RunRecord:
    variant: Variant
    seed: int
    accuracy: float
    run_dir: str


# config parsing ---------------------------------------------------------------

_SHIFT_FIELDS = ("rotation", "rotation_deg", "translation", "scale", "noise_std")
_STATIC_KEYS = (
    "task.generator",
    "task.num_classes",
    "task.samples_per_domain",
    "task.seed",
    "task.generator_noise",
    *(f"task.target_shift.{f}" for f in _SHIFT_FIELDS),
    "train.alpha",
    "train.lambda",
    "train.base_lr",
    "train.extractor_lr_multiplier",
    "train.epochs",
    "train.batch_per_domain",
    "train.optimizer",
    "train.scheduler",
    "train.seed",
    "train.intra_da",
    "train.inter_da",
    "train.ast",
    "train.num_extractor_steps",
    "train.ast_start_epoch",
    "train.extractor_hidden",
    "train.head_hidden",
    "run.num_seeds",
    "run.output_dir",
    "run.methods",
)
_SOURCE_SHIFT_RE = re.compile(r"^task\.source_shifts\.(\d+)\.(\w+)$")


def parse_config_text(text: str) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment; later keys win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _suggest(key: str) -> str:
    candidates = list(_STATIC_KEYS) + [
        f"task.source_shifts.{i}.{f}" for i in range(4) for f in _SHIFT_FIELDS
    ]
    close = difflib.get_close_matches(key, candidates, n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _check_keys(kv: dict[str, str]) -> None:
    for key in kv:
        if key in _STATIC_KEYS:
            continue
        m = _SOURCE_SHIFT_RE.match(key)
        if m and m.group(2) in _SHIFT_FIELDS:
            continue
        raise ConfigError(f"unknown config key {key!r}{_suggest(key)}")


def _parse(kind: str, key: str, value: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            lowered = value.lower()
            if lowered in ("true", "1"):
                return True
            if lowered in ("false", "0"):
                return False
            raise ValueError(f"expected true/false, got {value!r}")
        if kind == "optional_float":
            return None if value.lower() == "none" else float(value)
        if kind == "float_pair":
            parts = [float(p) for p in value.split(",")]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated numbers")
            return tuple(parts)
        if kind == "int_tuple":
            return tuple(int(p) for p in value.split(",") if p.strip())
        if kind == "methods":
            methods = tuple(p.strip() for p in value.split(",") if p.strip())
            unknown = [m for m in methods if m not in METHODS]
            if unknown:
                raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
            return methods
        return value
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def _build_shift(kv: dict[str, str], prefix: str) -> ShiftSpec:
    fields: dict[str, object] = {}
    rot_key, deg_key = f"{prefix}.rotation", f"{prefix}.rotation_deg"
    if rot_key in kv and deg_key in kv:
        raise ConfigError(f"set only one of {rot_key!r} and {deg_key!r}")
    if rot_key in kv:
        fields["rotation"] = _parse("float", rot_key, kv[rot_key])
    elif deg_key in kv:
        fields["rotation"] = math.radians(_parse("float", deg_key, kv[deg_key]))
    if f"{prefix}.translation" in kv:
        fields["translation"] = _parse(
            "float_pair", f"{prefix}.translation", kv[f"{prefix}.translation"]
        )
    if f"{prefix}.scale" in kv:
        fields["scale"] = _parse("float", f"{prefix}.scale", kv[f"{prefix}.scale"])
    if f"{prefix}.noise_std" in kv:
        fields["noise_std"] = _parse("float", f"{prefix}.noise_std", kv[f"{prefix}.noise_std"])
    try:
        return ShiftSpec(**fields)
    except ValueError as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def build_experiment_config(kv: dict[str, str]) -> ExperimentConfig:
    """Defaults overlaid with the given keys; unknown keys are rejected."""
    _check_keys(kv)
    cfg = ExperimentConfig()

    task_kwargs: dict[str, object] = {}
    for name, kind in (
        ("generator", "str"),
        ("num_classes", "int"),
        ("samples_per_domain", "int"),
        ("seed", "int"),
        ("generator_noise", "optional_float"),
    ):
        key = f"task.{name}"
        if key in kv:
            task_kwargs[name] = _parse(kind, key, kv[key])

    shift_indices = sorted(
        {int(m.group(1)) for k in kv if (m := _SOURCE_SHIFT_RE.match(k))}
    )
    if shift_indices:
        if shift_indices != list(range(len(shift_indices))):
            raise ConfigError(
                f"task.source_shifts indices must be contiguous from 0, got {shift_indices}"
            )
        task_kwargs["source_shifts"] = [
            _build_shift(kv, f"task.source_shifts.{i}") for i in shift_indices
        ]
    if any(k.startswith("task.target_shift.") for k in kv):
        task_kwargs["target_shift"] = _build_shift(kv, "task.target_shift")
    cfg.task = replace(cfg.task, **task_kwargs)

    train_kwargs: dict[str, object] = {}
    for name, kind in (
        ("alpha", "float"),
        ("base_lr", "float"),
        ("extractor_lr_multiplier", "float"),
        ("epochs", "int"),
        ("batch_per_domain", "int"),
        ("optimizer", "str"),
        ("scheduler", "str"),
        ("seed", "int"),
        ("num_extractor_steps", "int"),
        ("ast_start_epoch", "int"),
        ("extractor_hidden", "int_tuple"),
        ("head_hidden", "int_tuple"),
    ):
        key = f"train.{name}"
        if key in kv:
            train_kwargs[name] = _parse(kind, key, kv[key])
    if "train.lambda" in kv:
        train_kwargs["lam"] = _parse("float", "train.lambda", kv["train.lambda"])
    flags = AblationFlags()
    for name in ("intra_da", "inter_da", "ast"):
        key = f"train.{name}"
        if key in kv:
            setattr(flags, name, _parse("bool", key, kv[key]))
    cfg.train = replace(cfg.train, ablation=flags, **train_kwargs)

    if "run.num_seeds" in kv:
        cfg.num_seeds = _parse("int", "run.num_seeds", kv["run.num_seeds"])
        if cfg.num_seeds < 1:
            raise ConfigError("run.num_seeds must be >= 1")
    if "run.output_dir" in kv:
        cfg.output_dir = kv["run.output_dir"]
    if "run.methods" in kv:
        cfg.methods = _parse("methods", "run.methods", kv["run.methods"])

    try:
        cfg.task.validate()
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def effective_config_text(cfg: ExperimentConfig) -> str:
    """Every key written explicitly; reloading reproduces the config exactly.

    Rotations are written in radians (the canonical field), so the
    round-trip is bit-exact even when the input used rotation_deg.
    """
    lines = {}
    lines["run.num_seeds"] = _fmt(cfg.num_seeds)
    lines["run.output_dir"] = cfg.output_dir
    lines["run.methods"] = ",".join(cfg.methods)
    t = cfg.task
    lines["task.generator"] = t.generator
    lines["task.num_classes"] = _fmt(t.num_classes)
    lines["task.samples_per_domain"] = _fmt(t.samples_per_domain)
    lines["task.seed"] = _fmt(t.seed)
    lines["task.generator_noise"] = _fmt(t.generator_noise)
    shifts = [(f"task.source_shifts.{i}", s) for i, s in enumerate(t.source_shifts)]
    shifts.append(("task.target_shift", t.target_shift))
    for prefix, s in shifts:
        lines[f"{prefix}.rotation"] = _fmt(s.rotation)
        lines[f"{prefix}.translation"] = _fmt(s.translation)
        lines[f"{prefix}.scale"] = _fmt(s.scale)
        lines[f"{prefix}.noise_std"] = _fmt(s.noise_std)
    tr = cfg.train
    lines["train.alpha"] = _fmt(tr.alpha)
    lines["train.lambda"] = _fmt(tr.lam)
    lines["train.base_lr"] = _fmt(tr.base_lr)
    lines["train.extractor_lr_multiplier"] = _fmt(tr.extractor_lr_multiplier)
    lines["train.epochs"] = _fmt(tr.epochs)
    lines["train.batch_per_domain"] = _fmt(tr.batch_per_domain)
    lines["train.optimizer"] = tr.optimizer
    lines["train.scheduler"] = tr.scheduler
    lines["train.seed"] = _fmt(tr.seed)
    lines["train.intra_da"] = _fmt(tr.ablation.intra_da)
    lines["train.inter_da"] = _fmt(tr.ablation.inter_da)
    lines["train.ast"] = _fmt(tr.ablation.ast)
    lines["train.num_extractor_steps"] = _fmt(tr.num_extractor_steps)
    lines["train.ast_start_epoch"] = _fmt(tr.ast_start_epoch)
    lines["train.extractor_hidden"] = _fmt(tr.extractor_hidden)
    lines["train.head_hidden"] = _fmt(tr.head_hidden)
    body = "\n".join(f"{k} = {v}" for k, v in sorted(lines.items()))
    return f"# effective configuration (all keys explicit)\n{body}\n"


# experiment execution ----------------------------------------------------------


def _variant_for(method: str, cfg: ExperimentConfig) -> Variant:
    if method == "source_only":
        return Variant(method, AblationFlags(False, False, False), False, "source_only")
    flags = replace(cfg.train.ablation)
    uniform = method == "uniform_ensemble"
    return Variant(method, flags, uniform, method)


def ablation_variants(cfg: ExperimentConfig) -> list[Variant]:
    variants = []
    for intra, inter, ast in ABLATION_GRID:
        flags = AblationFlags(intra, inter, ast)
        label = f"crma_i{int(intra)}e{int(inter)}a{int(ast)}"
        variants.append(Variant("crma", flags, False, label))
    return variants


def run_variants(cfg: ExperimentConfig, variants: Sequence[Variant]) -> list[RunRecord]:
    """Train every (variant, seed) pair and write per-run artifacts."""
    out_root = Path(cfg.output_dir)
    runs_dir = out_root / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    (out_root / "effective.cfg").write_text(effective_config_text(cfg))

    records = []
    for variant in variants:
        for i in range(cfg.num_seeds):
            task = generate_task(replace(cfg.task, seed=cfg.task.seed + i))
            train_cfg = replace(
                cfg.train,
                seed=cfg.train.seed + i,
                ablation=replace(variant.flags),
                uniform_pseudo_weights=variant.uniform,
            )
            state, history = train(train_cfg, task)
            accuracy = history[-1]["target_acc"]
            run_dir = runs_dir / f"{variant.label}_seed{train_cfg.seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            with open(run_dir / "metrics.csv", "w") as f:
                write_history_csv(history, task.num_sources, f)
            save_checkpoint(state, run_dir / "model.ckpt")
            meta = {
                "method": variant.method,
                "intra_da": variant.flags.intra_da,
                "inter_da": variant.flags.inter_da,
                "ast": variant.flags.ast,
                "seed": train_cfg.seed,
                "epochs": train_cfg.epochs,
                "final_acc": accuracy,
            }
            (run_dir / "run.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
            records.append(RunRecord(variant, train_cfg.seed, accuracy, str(run_dir)))
    return records


def aggregate(records: Sequence[RunRecord]) -> list[dict]:
    """Mean and population std of the accuracy per (method, flags) row."""
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.variant.label, []).append(r)
    rows = []
    for label, group in groups.items():
        accs = np.array([r.accuracy for r in group])
        v = group[0].variant
        rows.append(
            {
                "method": v.method,
                "intra_da": v.flags.intra_da,
                "inter_da": v.flags.inter_da,
                "ast": v.flags.ast,
                "label": label,
                "num_seeds": len(group),
                "acc_mean": float(accs.mean()),
                "acc_std": float(accs.std()),  # population (ddof=0)
            }
        )
    return rows


def write_results(cfg: ExperimentConfig, records: Sequence[RunRecord]) -> list[dict]:
    out_root = Path(cfg.output_dir)
    with open(out_root / "results.csv", "w") as f:
        f.write("method,intra_da,inter_da,ast,seed,target_acc\n")
        for r in records:
            v = r.variant
            f.write(
                f"{v.method},{int(v.flags.intra_da)},{int(v.flags.inter_da)},"
                f"{int(v.flags.ast)},{r.seed},{r.accuracy!r}\n"
            )
    summary = aggregate(records)
    with open(out_root / "summary.csv", "w") as f:
        f.write("method,intra_da,inter_da,ast,num_seeds,acc_mean,acc_std\n")
        for row in summary:
            f.write(
                f"{row['method']},{int(row['intra_da'])},{int(row['inter_da'])},"
                f"{int(row['ast'])},{row['num_seeds']},{row['acc_mean']!r},{row['acc_std']!r}\n"
            )
    text = render_table(summary)
    (out_root / "summary.txt").write_text(text)
    return summary


def render_table(summary: Sequence[dict]) -> str:
    header = f"{'method':<18} {'intra':>5} {'inter':>5} {'ast':>3} {'accuracy':>18} {'seeds':>5}"
    lines = [header, "-" * len(header)]
    for row in summary:
        acc = f"{100 * row['acc_mean']:.2f} +/- {100 * row['acc_std']:.2f}"
        lines.append(
            f"{row['label']:<18} {int(row['intra_da']):>5} {int(row['inter_da']):>5} "
            f"{int(row['ast']):>3} {acc:>18} {row['num_seeds']:>5}"
        )
    return "\n".join(lines) + "\n"


def emit_curves(output_dir) -> Path:
    """Validate every run's metrics CSV and write a manifest of all runs."""
    out_root = Path(output_dir)
    runs_dir = out_root / "runs"
    if not runs_dir.is_dir():
        raise ConfigError(f"no runs directory under {output_dir!r}")
    entries = []
    for run_dir in sorted(runs_dir.iterdir()):
        meta_path = run_dir / "run.json"
        csv_path = run_dir / "metrics.csv"
        if not meta_path.is_file() or not csv_path.is_file():
            continue
        meta = json.loads(meta_path.read_text())
        csv_lines = csv_path.read_text().strip().splitlines()
        n_rows = len(csv_lines) - 1
        if n_rows != meta["epochs"]:
            raise ConfigError(
                f"{csv_path}: expected {meta['epochs']} epoch rows, found {n_rows}"
            )
        entries.append(
            f"{run_dir.name},{meta['method']},{int(meta['intra_da'])},"
            f"{int(meta['inter_da'])},{int(meta['ast'])},{meta['seed']},"
            f"{meta['epochs']},{meta['final_acc']!r}"
        )
    manifest = out_root / "manifest.csv"
    manifest.write_text(
        "run_dir,method,intra_da,inter_da,ast,seed,epochs,final_acc\n"
        + "\n".join(entries)
        + ("\n" if entries else "")
    )
    return manifest


# entry point --------------------------------------------------------------------


def _parse_overrides(extra: Sequence[str]) -> dict[str, str]:
    kv = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(f"expected --section.key=value override, got {arg!r}")
        key, value = arg[2:].split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def _load_experiment(args, extra: Sequence[str]) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    kv = parse_config_text(path.read_text())
    kv.update(_parse_overrides(extra))
    cfg = build_experiment_config(kv)
    if args.out is not None:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.task = replace(cfg.task, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="crma", description="Multi-source adaptation experiment runner"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "ablate", "baseline"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--seed", type=int, default=None, help="base seed for task and training")
        p.add_argument("--out", default=None, help="output directory")
        if name == "baseline":
            p.add_argument("--mode", default="uniform", choices=["uniform"])
    curves_p = sub.add_parser("curves")
    curves_p.add_argument("run_dir")

    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "curves":
            manifest = emit_curves(args.run_dir)
            print(f"wrote {manifest}")
            return 0
        cfg = _load_experiment(args, extra)
        if args.command == "run":
            variants = [_variant_for(m, cfg) for m in cfg.methods]
        elif args.command == "ablate":
            variants = ablation_variants(cfg)
        else:  # baseline
            variants = [_variant_for("uniform_ensemble", cfg), _variant_for("crma", cfg)]
        records = run_variants(cfg, variants)
        summary = write_results(cfg, records)
        print(render_table(summary), end="")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DivergedRunError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
