import csv
import subprocess
import sys
import time

import numpy as np
import pytest

from odeformer import blocks as B
from odeformer.cli import main
from odeformer.studies import (LinearProbeStack, StudyConfig, StudyReport, cmd_copy_task,
                               cmd_depth_sweep, cmd_gradcheck_suite, cmd_gradient_norm_study,
                               cmd_lm_truncation, cmd_order_study, cmd_scaling_comparison,
                               cmd_schema_comparison)

TINY = dict(
    precision="f64", d_model=8, heads=2, ffn_dim=16, copy_vocab=10, copy_min_len=2, copy_max_len=5,
    copy_val_size=16, copy_batch=8, copy_max_steps=60, copy_min_steps=50, copy_eval_interval=20,
    copy_target_acc=0.2, copy_warmup=10, sweep_depths="1,2", sweep_steps=10,
    lm_d_model=8, lm_heads=2, lm_ffn_dim=16, lm_seq_len=12, lm_batch=4, lm_steps=12, lm_warmup=4,
    lm_eval_windows=6, gn_depth=4, gn_steps=10, gn_log_interval=5, gn_d_model=8, gn_ffn_dim=8,
    gn_seq_len=8, gn_batch=2,
)


def tiny(**kw):
    return StudyConfig(**{**TINY, **kw})


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_round_trip(tmp_path):
    cfg = tiny(variants="Euler, rk4")
    path = tmp_path / "study.cfg"
    cfg.save(path)
    assert StudyConfig.load(path) == cfg
    assert cfg.variant_list(["RK2"]) == ["Euler", "RK4"]
    with pytest.raises(ValueError):
        StudyConfig.from_text("no_such_key=1\n")


def test_report_medians_and_files(tmp_path):
    r = StudyReport("demo")
    for seed, v in ((1, 3.0), (2, 1.0), (3, 10.0)):
        r.add("RK2", 2, "ppl", seed, v)
    r.check("ok", True, "fine")
    assert r.median("RK2", 2, "ppl") == 3.0 and r.passed
    r.write(tmp_path)
    rows = read_rows(tmp_path / "demo.csv")
    assert rows[0] == ["study", "variant", "depth", "metric", "seed", "value"]
    assert [row[4] for row in rows[1:]] == ["1", "2", "3"]
    assert read_rows(tmp_path / "demo_summary.csv")[1] == ["RK2", "2", "ppl", "3.0", "3"]


def test_order_study():
    start = time.perf_counter()
    report = cmd_order_study()
    assert time.perf_counter() - start < 5
    assert report.passed, report.summary_lines()
    assert len(report.properties) == 6
    p = report.median("RK4", 0, "order_cosine")
    assert 3.7 <= p <= 4.3


def test_gradcheck_suite_single_seed():
    report = cmd_gradcheck_suite(seeds=(1,))
    assert report.passed, report.summary_lines()
    variant_rows = [r for r in report.rows if r.metric == "variant_max_rel_error"]
    assert {r.variant for r in variant_rows} == set(B.TAGS)
    assert report.median("RK2", 8, "linear_probe_c0.1") == pytest.approx(1.105 ** 8, rel=1e-12)


def test_copy_task_tiny(tmp_path):
    report = cmd_copy_task(tiny(), seeds=(1, 2), variants=["Euler", "RK2"], out_dir=tmp_path)
    names = {p.name for p in report.properties}
    assert {"converges_Euler", "rk2_not_slower_than_euler", "early_loss_RK2"} <= names
    assert all(r.seed in (1, 2) for r in report.rows)
    assert report.values("Euler", 2, "n_params") == report.values("RK2", 2, "n_params")
    assert (tmp_path / "runs" / "copy_RK2_d2_s1.csv").exists()


def test_copy_task_failure_is_reported():
    report = cmd_copy_task(tiny(copy_max_steps=3, copy_eval_interval=1, copy_target_acc=1.0),
                           seeds=(1,), variants=["Euler"])
    assert not report.passed
    assert report.median("Euler", 2, "steps_to_target") == np.inf


def _csv_snapshot(out):
    """Every CSV under ``out`` minus timing files and the wall-clock column."""
    snap = {}
    for path in sorted(out.rglob("*.csv")):
        if path.name.endswith("_timing.csv"):
            continue
        rows = read_rows(path)
        if rows and rows[0][-1] == "secs":
            rows = [r[:-1] for r in rows]
        snap[str(path.relative_to(out))] = rows
    return snap


def test_copy_study_bit_identical_rerun(tmp_path):
    snaps = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        cmd_copy_task(tiny(), seeds=(1,), variants=["RK2GatedSigmoid"], out_dir=out).write(out)
        snaps.append(_csv_snapshot(out))
    assert snaps[0] == snaps[1] and len(snaps[0]) >= 4


def test_lm_truncation_tiny():
    report = cmd_lm_truncation(tiny(), seeds=(1,), depths=[1])
    assert {r.variant for r in report.rows} == {"Euler", "RK2", "RK4", "RK2GatedSigmoidPair"}
    assert {"ppl_order_depth1", "learnable_le_rk2_depth1", "ppl_at_least_one"} <= {
        p.name for p in report.properties}
    assert all(r.value >= 1.0 for r in report.rows if r.metric == "val_ppl")
    assert report.timings and all(t[2] == 1 for t in report.timings)


def test_schema_comparison_tiny():
    report = cmd_schema_comparison(tiny(), seeds=(1,), variants=["Leapfrog", "RK2", "DLCL"])
    props = {p.name: p for p in report.properties}
    assert props["polynet_probe_factor"].passed and props["dlcl_first_block_is_euler"].passed
    assert "rk_variants_le_leapfrog" in props
    header, rows = report.tables["schema_ranking"]
    assert [r[0] for r in rows] == [1, 2, 3]
    ppls = [float(r[2]) for r in rows]
    assert ppls == sorted(ppls)


def test_scaling_comparison_tiny():
    report = cmd_scaling_comparison(tiny(), seeds=(1,))
    assert len({r.variant for r in report.rows if r.metric == "val_ppl"}) == 7
    props = {p.name: p for p in report.properties}
    assert props["gate_zero_equals_rk2"].passed
    assert "gate_pair_le_half_half" in props


def test_depth_sweep_tiny():
    report = cmd_depth_sweep(tiny(), seeds=(1,), variants=["Euler", "RK2GammaOne"])
    props = {p.name: p for p in report.properties}
    assert props["no_divergence_RK2GammaOne_d2"].passed
    assert props["param_count_monotone_Euler"].passed


def test_gradient_norm_study_tiny():
    report = cmd_gradient_norm_study(tiny(), seeds=(1, 2))
    props = {p.name: p for p in report.properties}
    assert props["probe_ratio_RK2"].passed and props["probe_ratio_RK2GammaOne"].passed
    assert props["norms_finite"].passed
    assert "gamma_one_ratio_ge_rk2" in props
    header, curves = report.tables["gradient_norm_curves"]
    assert len(header) == 4 + 4
    assert {row[2] for row in curves} == {1, 5, 10}


@pytest.mark.parametrize("tag", ["RK2", "RK2GammaOne"])
@pytest.mark.parametrize("c", [0.01, 0.1, 0.5])
def test_linear_probe_stack_ratio(tag, c):
    got = LinearProbeStack(tag, c, 12).grad_ratio(seed=3)
    expected = B.analytic_depth_gradient(tag, c, 12, 0) / B.analytic_depth_gradient(tag, c, 12, 11)
    assert got == pytest.approx(expected, rel=1e-10)


def test_cli_order_study(tmp_path, capsys):
    code = main(["order_study", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    assert out.count("PASS order_") == 6
    assert (tmp_path / "order_study.csv").exists() and (tmp_path / "order_table.csv").exists()


def test_cli_exit_code_on_failure(tmp_path, capsys):
    cfg = tmp_path / "fail.cfg"
    tiny(copy_max_steps=2, copy_eval_interval=1, copy_target_acc=1.0, variants="Euler").save(cfg)
    code = main(["copy-task", "--config", str(cfg), "--seeds", "1", "--out", str(tmp_path / "o")])
    assert code == 1
    assert "FAIL converges_Euler" in capsys.readouterr().out


def test_cli_defaults_parse(capsys):
    assert main(["defaults"]) == 0
    assert StudyConfig.from_text(capsys.readouterr().out) == StudyConfig()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "odeformer.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("order_study", "gradcheck_suite", "copy_task", "lm_truncation", "schema_comparison",
                 "scaling_comparison", "depth_sweep", "gradient_norm_study"):
        assert name in proc.stdout
