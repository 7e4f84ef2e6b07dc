"""End-to-end acceptance checks. The study-backed criteria run the shipped default
configuration over seeds 1, 2, 3 and take several minutes each on one core."""

import csv
import time

import numpy as np
import pytest

from odeformer import blocks as B
from odeformer.checks import autodiff_depth_gradient
from odeformer.models import ModelConfig, init_model
from odeformer.studies import (StudyConfig, cmd_copy_task, cmd_gradcheck_suite, cmd_gradient_norm_study,
                               cmd_lm_truncation, cmd_order_study)
from odeformer.tensor import ParamStore, Tensor

SEEDS = (1, 2, 3)


def test_criterion_1_solver_orders(verdict):
    start = time.perf_counter()
    report = cmd_order_study()
    secs = time.perf_counter() - start
    bounds = {"Euler": (0.9, 1.1), "RK2": (1.9, 2.1), "RK4": (3.7, 4.3)}
    got = {(v, p): report.median(v, 0, f"order_{p}") for v in bounds for p in ("decay", "cosine")}
    ok = secs < 5 and all(bounds[v][0] <= o <= bounds[v][1] for (v, _), o in got.items())
    detail = ", ".join(f"{v}/{p} {o:.3f}" for (v, p), o in got.items())
    assert verdict(1, ok, f"orders {detail}; {secs:.2f}s")


def test_criterion_2_gradient_correctness(verdict):
    start = time.perf_counter()
    report = cmd_gradcheck_suite(seeds=SEEDS)
    secs = time.perf_counter() - start
    errs = [r.value for r in report.rows if r.metric in ("primitive_max_rel_error", "variant_max_rel_error")]
    variants = {r.variant for r in report.rows if r.metric == "variant_max_rel_error"}
    ok = max(errs) < 1e-6 and variants == set(B.TAGS) and secs < 60
    assert verdict(2, ok, f"max rel error {max(errs):.2e} over {len(errs)} checks; {secs:.1f}s")


def test_criterion_3_depth_gradient_closed_form(verdict):
    worst = 0.0
    for tag in ("RK2", "RK2GammaOne"):
        for c in (0.01, 0.1, 0.5):
            for n in range(1, 9):
                expected = B.analytic_depth_gradient(tag, c, 8, 8 - n)
                worst = max(worst, abs(autodiff_depth_gradient(tag, c, n) - expected) / expected)
    rk2 = autodiff_depth_gradient("RK2", 0.1, 8)
    gamma = autodiff_depth_gradient("RK2GammaOne", 0.1, 8)
    ok = (worst <= 1e-10 and rk2 == pytest.approx(2.222788925, abs=1e-9)
          and gamma == pytest.approx(4.594972986, abs=1e-9))
    assert verdict(3, ok, f"max rel error {worst:.2e}; RK2 gap 8 {rk2:.4f}, RK2GammaOne {gamma:.4f}")


def test_criterion_4_gate_identity(verdict):
    rng = np.random.default_rng(2024)
    d = 8
    store, spec = ParamStore(), B.SublayerSpec("FFN", d, ffn_dim=16)
    p = B.init_sublayer(spec, store, "s", rng)
    f = lambda y: B.sublayer_f(spec, p, y)
    rk2 = B.init_variant("RK2", None, "c", d)
    gated = B.init_variant("RK2GatedSigmoidPair", None, "c", d)
    assert all(np.all(t.data == 0) for t in gated.coeffs.values())
    worst = 0.0
    for _ in range(100):
        y = Tensor(rng.standard_normal((2, 5, d)))
        a, _ = B.block_forward(rk2, f, y)
        b, _ = B.block_forward(gated, f, y)
        worst = max(worst, float(np.max(np.abs(a.data - b.data))))
    assert verdict(4, worst <= 1e-12, f"max |RK2 - gated| {worst:.2e} over 100 inputs")


def test_criterion_5_parameter_parity(verdict):
    kw = dict(vocab_size=32, d_model=64, heads=4, ffn_dim=256, enc_depth=6, dec_depth=6)
    euler = init_model(ModelConfig(variant="Euler", **kw)).num_parameters()
    expected_extra = {"RK2": 0, "RK4": 0, "RK2LearnableScalar": 2, "RK2GatedSigmoidPair": 2 * 64 + 1}
    got = {tag: init_model(ModelConfig(variant=tag, **kw)).num_parameters() - euler for tag in expected_extra}
    ok = all(got[t] == 6 * n for t, n in expected_extra.items())
    assert verdict(5, ok, f"Euler {euler} params; extra per block " +
                   ", ".join(f"{t} {got[t] // 6}" for t in got))


@pytest.fixture(scope="module")
def lm_report():
    return cmd_lm_truncation(StudyConfig(), seeds=SEEDS)


def test_criterion_6_lm_truncation_ordering(verdict, lm_report):
    props = {p.name: p for p in lm_report.properties}
    names = ("ppl_order_depth1", "ppl_order_depth2", "learnable_le_rk2_depth1", "cell_cpu_budget")
    ok = all(props[n].passed for n in names)
    assert verdict(6, ok, "; ".join(f"{n}: {props[n].detail}" for n in names))


@pytest.fixture(scope="module")
def gradnorm_report():
    return cmd_gradient_norm_study(StudyConfig(), seeds=SEEDS)


def test_criterion_7_gradient_flow(verdict, gradnorm_report):
    props = {p.name: p for p in gradnorm_report.properties}
    ok = props["gamma_one_ratio_ge_rk2"].passed and props["norms_finite"].passed
    assert verdict(7, ok, props["gamma_one_ratio_ge_rk2"].detail)


@pytest.fixture(scope="module")
def copy_report():
    return cmd_copy_task(StudyConfig(), seeds=SEEDS)


def test_criterion_8_copy_convergence(verdict, copy_report):
    meds = {t: copy_report.median(t, 2, "steps_to_target") for t in B.TAGS}
    ok = all(m <= 5000 for m in meds.values()) and meds["RK2"] <= meds["Euler"]
    slowest = max(meds, key=meds.get)
    assert verdict(8, ok, f"all {len(meds)} variants reach 99%: slowest {slowest} {meds[slowest]:g} steps; "
                   f"RK2 {meds['RK2']:g} vs Euler {meds['Euler']:g}")


def _snapshot(out):
    snap = {}
    for path in sorted(out.rglob("*.csv")):
        if path.name.endswith("_timing.csv"):
            continue
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows and rows[0][-1] == "secs":
            rows = [r[:-1] for r in rows]
        snap[str(path.relative_to(out))] = rows
    return snap


DETERMINISM_CONFIG = dict(
    precision="f64", d_model=16, heads=2, ffn_dim=32, copy_max_steps=60, copy_min_steps=60,
    copy_eval_interval=30, copy_val_size=32, lm_d_model=16, lm_ffn_dim=32, lm_steps=30, lm_eval_windows=32,
    gn_depth=4, gn_steps=20, gn_log_interval=10,
)


def test_criterion_9_determinism(verdict, tmp_path):
    config = StudyConfig(**DETERMINISM_CONFIG)
    studies = {
        "order": lambda out: cmd_order_study(config, out_dir=out),
        "copy": lambda out: cmd_copy_task(config, (1, 2), variants=["Euler", "RK2GatedSigmoid", "DLCL"],
                                          out_dir=out),
        "lm": lambda out: cmd_lm_truncation(config, (1, 2), depths=[1], out_dir=out),
        "gradnorm": lambda out: cmd_gradient_norm_study(config, (1,), out_dir=out),
    }
    differing, files = [], 0
    for name, run in studies.items():
        snaps = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            run(out).write(out)
            snaps.append(_snapshot(out))
        if snaps[0] != snaps[1]:
            differing.append(name)
        files += len(snaps[0])
    detail = f"{files} CSV files compared over reruns of {len(studies)} studies"
    if differing:
        detail += f"; differing: {', '.join(differing)}"
    assert verdict(9, not differing, detail)
