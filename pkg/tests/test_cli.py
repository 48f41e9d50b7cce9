import json
import math
from pathlib import Path

import numpy as np
import pytest

from crma.cli import (
    ABLATION_GRID,
    ConfigError,
    ExperimentConfig,
    ablation_variants,
    aggregate,
    build_experiment_config,
    effective_config_text,
    main,
    parse_config_text,
    run_variants,
    write_results,
    _variant_for,
)

TINY = """
# small everything so the suite stays fast
task.samples_per_domain = 80
train.epochs = 2
train.batch_per_domain = 16
train.extractor_hidden = 12,8
train.head_hidden = 6
run.num_seeds = 2
"""


def write_cfg(tmp_path, text=TINY, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_parse_config_text_basics():
    kv = parse_config_text("a.b = 1  # trailing comment\n\n# full comment\n c.d=x=y \n")
    assert kv == {"a.b": "1", "c.d": "x=y"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just some words")


def test_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError, match=r"trian\.alpha.*train\.alpha"):
        build_experiment_config({"trian.alpha": "0.5"})


def test_defaults_without_any_keys():
    cfg = build_experiment_config({})
    assert cfg.num_seeds == 5
    assert cfg.methods == ("crma", "source_only")
    assert cfg.train.alpha == 0.5
    assert cfg.train.lam == 0.1
    assert cfg.train.epochs == 50
    assert cfg.train.batch_per_domain == 128
    assert cfg.train.base_lr == 1e-3
    assert len(cfg.task.source_shifts) == 3


def test_value_parsing_and_overrides():
    cfg = build_experiment_config(
        {
            "train.alpha": "0.7",
            "train.lambda": "0.3",
            "train.intra_da": "false",
            "train.extractor_hidden": "10,10",
            "task.generator": "gaussian_blobs",
            "task.num_classes": "4",
            "task.generator_noise": "0.4",
            "task.source_shifts.0.rotation_deg": "10",
            "task.source_shifts.1.rotation": "0.5",
            "task.source_shifts.1.translation": "1.0,-2.0",
            "task.target_shift.scale": "2.0",
            "run.methods": "crma",
        }
    )
    assert cfg.train.alpha == 0.7 and cfg.train.lam == 0.3
    assert cfg.train.ablation.intra_da is False
    assert cfg.train.extractor_hidden == (10, 10)
    assert cfg.task.generator == "gaussian_blobs"
    assert cfg.task.source_shifts[0].rotation == pytest.approx(math.radians(10))
    assert cfg.task.source_shifts[1].rotation == 0.5
    assert cfg.task.source_shifts[1].translation == (1.0, -2.0)
    assert cfg.task.target_shift.scale == 2.0
    assert cfg.methods == ("crma",)


def test_bad_values_are_config_errors():
    for kv in (
        {"train.alpha": "fast"},
        {"train.intra_da": "maybe"},
        {"run.methods": "crma,unknown_method"},
        {"task.source_shifts.0.rotation": "1", "task.source_shifts.0.rotation_deg": "2"},
        {"task.source_shifts.1.rotation": "1"},  # index 0 missing
        {"train.epochs": "0"},
    ):
        with pytest.raises(ConfigError):
            build_experiment_config(kv)


def test_effective_config_round_trips_exactly():
    cfg = build_experiment_config(parse_config_text(TINY))
    text = effective_config_text(cfg)
    reparsed = build_experiment_config(parse_config_text(text))
    assert reparsed == cfg
    # and the re-serialization is byte-stable
    assert effective_config_text(reparsed) == text


def test_ablation_variants_follow_grid_order():
    cfg = ExperimentConfig()
    variants = ablation_variants(cfg)
    assert [(v.flags.intra_da, v.flags.inter_da, v.flags.ast) for v in variants] == list(
        ABLATION_GRID
    )
    assert variants[0].label == "crma_i0e0a0"
    assert variants[-1].label == "crma_i1e1a1"


def test_run_command_end_to_end(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "out"
    code = main(["run", str(cfg_path), "--out", str(out)])
    assert code == 0

    results = (out / "results.csv").read_text().strip().splitlines()
    assert results[0] == "method,intra_da,inter_da,ast,seed,target_acc"
    assert len(results) == 1 + 2 * 2  # two methods x two seeds

    summary = (out / "summary.csv").read_text().strip().splitlines()
    assert summary[0] == "method,intra_da,inter_da,ast,num_seeds,acc_mean,acc_std"
    assert len(summary) == 3
    assert (out / "summary.txt").exists()
    assert (out / "effective.cfg").exists()

    run_dirs = sorted(p.name for p in (out / "runs").iterdir())
    assert run_dirs == ["crma_seed0", "crma_seed1", "source_only_seed0", "source_only_seed1"]
    for d in run_dirs:
        assert (out / "runs" / d / "metrics.csv").exists()
        assert (out / "runs" / d / "model.ckpt").exists()
        meta = json.loads((out / "runs" / d / "run.json").read_text())
        assert set(meta) == {"method", "intra_da", "inter_da", "ast", "seed", "epochs", "final_acc"}
    table = capsys.readouterr().out
    assert "crma" in table and "source_only" in table


def test_rerun_is_bit_identical(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["run", str(cfg_path), "--out", str(out_a)]) == 0
    assert main(["run", str(cfg_path), "--out", str(out_b)]) == 0
    for rel in ("results.csv", "summary.csv", "summary.txt"):
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()
    for run_dir in (out_a / "runs").iterdir():
        twin = out_b / "runs" / run_dir.name
        assert (run_dir / "metrics.csv").read_bytes() == (twin / "metrics.csv").read_bytes()
        assert (run_dir / "model.ckpt").read_bytes() == (twin / "model.ckpt").read_bytes()


def test_rerun_from_effective_config_matches(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out_a = tmp_path / "a"
    assert main(["run", str(cfg_path), "--out", str(out_a)]) == 0
    out_b = tmp_path / "b"
    assert main(["run", str(out_a / "effective.cfg"), "--out", str(out_b)]) == 0
    assert (out_a / "results.csv").read_bytes() == (out_b / "results.csv").read_bytes()


def test_cli_override_applies(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert main(["run", str(cfg_path), "--out", str(out), "--run.num_seeds=1",
                 "--run.methods=source_only"]) == 0
    results = (out / "results.csv").read_text().strip().splitlines()
    assert len(results) == 2
    assert results[1].startswith("source_only,0,0,0,0,")


def test_cli_unknown_key_exits_one(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path, text="trian.alpha = 0.5\n")
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "o")]) == 1
    assert "train.alpha" in capsys.readouterr().err


def test_cli_missing_config_exits_one(tmp_path):
    assert main(["run", str(tmp_path / "nope.cfg")]) == 1


def test_cli_diverged_run_exits_two(tmp_path, monkeypatch, capsys):
    import crma.cli as cli_module
    from crma.trainer import DivergedRunError

    def exploding_train(cfg, task):
        raise DivergedRunError("loss 2e+06 at iteration 3", 3)

    monkeypatch.setattr(cli_module, "train", exploding_train)
    cfg_path = write_cfg(tmp_path)
    assert main(["run", str(cfg_path), "--out", str(tmp_path / "o")]) == 2
    assert "diverged" in capsys.readouterr().err


def test_seed_flag_offsets_both_seeds(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert main(["run", str(cfg_path), "--out", str(out), "--seed", "7",
                 "--run.num_seeds=1", "--run.methods=crma"]) == 0
    results = (out / "results.csv").read_text().strip().splitlines()
    assert results[1].split(",")[4] == "7"
    assert (out / "runs" / "crma_seed7").is_dir()


def test_ablate_command_produces_eight_rows(tmp_path):
    cfg_path = write_cfg(
        tmp_path,
        text=TINY.replace("task.samples_per_domain = 80", "task.samples_per_domain = 40")
        .replace("run.num_seeds = 2", "run.num_seeds = 1")
        .replace("train.epochs = 2", "train.epochs = 1"),
    )
    out = tmp_path / "out"
    assert main(["ablate", str(cfg_path), "--out", str(out)]) == 0
    summary = (out / "summary.csv").read_text().strip().splitlines()
    assert len(summary) == 9
    flag_rows = [tuple(int(x) for x in line.split(",")[1:4]) for line in summary[1:]]
    assert flag_rows == [(int(a), int(b), int(c)) for a, b, c in ABLATION_GRID]


def test_ablation_all_false_row_equals_source_only(tmp_path):
    base = TINY + "run.num_seeds = 1\n"
    cfg_path = write_cfg(tmp_path, text=base)
    out_ab = tmp_path / "ab"
    out_src = tmp_path / "src"
    assert main(["ablate", str(cfg_path), "--out", str(out_ab)]) == 0
    assert main(["run", str(cfg_path), "--out", str(out_src), "--run.methods=source_only"]) == 0
    ab_rows = (out_ab / "results.csv").read_text().strip().splitlines()[1:]
    src_row = (out_src / "results.csv").read_text().strip().splitlines()[1]
    all_false = next(r for r in ab_rows if r.split(",")[1:4] == ["0", "0", "0"])
    assert all_false.split(",")[5] == src_row.split(",")[5]  # same accuracy


def test_baseline_command_runs_uniform_and_adaptive(tmp_path):
    cfg_path = write_cfg(tmp_path, text=TINY + "run.num_seeds = 1\n")
    out = tmp_path / "out"
    assert main(["baseline", str(cfg_path), "--out", str(out)]) == 0
    summary = (out / "summary.csv").read_text().strip().splitlines()
    methods = [line.split(",")[0] for line in summary[1:]]
    assert methods == ["uniform_ensemble", "crma"]


def test_aggregate_matches_recomputation_from_per_seed_rows(tmp_path):
    cfg = build_experiment_config(parse_config_text(TINY))
    cfg.output_dir = str(tmp_path / "out")
    records = run_variants(cfg, [_variant_for("crma", cfg)])
    write_results(cfg, records)

    lines = Path(cfg.output_dir, "results.csv").read_text().strip().splitlines()[1:]
    accs = [float(line.split(",")[5]) for line in lines]
    summary = aggregate(records)[0]
    assert summary["acc_mean"] == pytest.approx(np.mean(accs), rel=1e-15)
    assert summary["acc_std"] == pytest.approx(np.std(accs), rel=1e-12)  # population
    assert summary["num_seeds"] == len(accs)


def test_emit_curves_manifest(tmp_path):
    cfg_path = write_cfg(tmp_path, text=TINY + "run.num_seeds = 1\n")
    out = tmp_path / "out"
    assert main(["run", str(cfg_path), "--out", str(out)]) == 0
    assert main(["curves", str(out)]) == 0
    manifest = (out / "manifest.csv").read_text().strip().splitlines()
    assert manifest[0] == "run_dir,method,intra_da,inter_da,ast,seed,epochs,final_acc"
    assert len(manifest) == 3  # two runs
    assert main(["curves", str(tmp_path / "missing")]) == 1


def test_uniform_ensemble_equals_ast_pseudo_labels_single_source():
    # with one source the weights normalize away: identical pseudo-labels
    from crma.losses import fuse_pseudo_labels

    rng = np.random.default_rng(0)
    d = rng.uniform(0.01, 0.5, (10, 1))
    means = np.array([0.2])
    logits = rng.standard_normal((1, 10, 3))
    e = np.exp(logits)
    mean_preds = e / e.sum(axis=2, keepdims=True)
    adaptive = fuse_pseudo_labels(d, mean_preds, means, 0.1, uniform=False)
    uniform = fuse_pseudo_labels(d, mean_preds, means, 0.1, uniform=True)
    np.testing.assert_allclose(adaptive.probs, uniform.probs, rtol=1e-12)
