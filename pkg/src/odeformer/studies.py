"""Experiment drivers.

Every study is a pure function of a :class:`StudyConfig` and a seed list. It
returns a :class:`StudyReport` whose rows carry their seed, whose aggregates
are medians over seeds, and whose properties are evaluated on those medians.
"""

from __future__ import annotations

import csv
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import blocks as B
from . import checks
from . import ode_core
from . import tensor as T
from .blocks import BlockState, BlockVariant, block_forward, init_variant, linear_probe
from .errors import NumericalOverflowError
from .kvconfig import KVConfig
from .models import CausalLM, ModelConfig, Seq2Seq, encode, greedy_decode, init_model, lm_forward
from .tasks import CharCorpus, SequenceTask, TaskSpec, make_batch
from .tensor import ParamStore, Tensor, backward
from .train import DTYPES, TrainConfig, block_grad_norms, train

NA = "na"  # seed column for rows that do not depend on a seed


def parse_list(text: str, kind=str) -> list:
    return [kind(x.strip()) for x in str(text).split(",") if x.strip()]


@dataclass
class StudyConfig(KVConfig):
    precision: str = "f32"
    variants: str = ""  # comma list; empty selects each study's default set
    task_seed: int = 1  # fixes held-out splits across training seeds

    # encoder-decoder (copy task, depth sweep)
    d_model: int = 32
    heads: int = 4
    ffn_dim: int = 64
    dropout: float = 0.0
    granularity: str = "Fused"
    position: str = "Sinusoidal"
    copy_depth: int = 2
    copy_dec_depth: int = 1
    copy_vocab: int = 32
    copy_min_len: int = 5
    copy_max_len: int = 20
    copy_val_size: int = 128
    copy_batch: int = 32
    copy_lr: float = 5e-3
    copy_warmup: int = 200
    copy_label_smoothing: float = 0.1
    copy_max_steps: int = 5000
    copy_min_steps: int = 500
    copy_eval_interval: int = 50
    copy_target_acc: float = 0.99
    sweep_depths: str = "2,4,6,8"
    sweep_steps: int = 400

    # causal LM (truncation, schema, scaling, gradient-norm studies)
    corpus_path: Optional[str] = None
    lm_depths: str = "1,2"
    lm_learnable_variant: str = "RK2GatedSigmoidPair"
    lm_learnable_depths: str = "1"
    lm_d_model: int = 64
    lm_heads: int = 4
    lm_ffn_dim: int = 256
    lm_granularity: str = "SanOnly"
    lm_dropout: float = 0.0
    lm_seq_len: int = 32
    lm_batch: int = 16
    lm_steps: int = 1200
    lm_lr: float = 3e-3
    lm_warmup: int = 200
    lm_label_smoothing: float = 0.0
    lm_eval_windows: int = 0  # 0 evaluates every validation window
    lm_cell_budget_secs: float = 120.0
    schema_depth: int = 1
    scaling_depth: int = 1

    gn_depth: int = 12
    gn_steps: int = 2000
    gn_log_interval: int = 100
    gn_d_model: int = 16
    gn_heads: int = 2
    gn_ffn_dim: int = 32
    gn_seq_len: int = 32
    gn_batch: int = 8
    gn_lr: float = 1e-3
    probe_c: float = 0.1
    probe_tolerance: float = 0.05

    def __post_init__(self):
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def variant_list(self, default: Sequence[str]) -> list[str]:
        names = parse_list(self.variants) or list(default)
        return [v if v.startswith("Euler") and v != "Euler" else B.parse_variant(v) for v in names]


# ---------------------------------------------------------------------------
# reports


@dataclass
class Row:
    variant: str
    depth: int
    metric: str
    seed: object
    value: float


@dataclass
class Property:
    name: str
    passed: bool
    detail: str
    timed: bool = False  # depends on wall-clock time, so kept out of the reproducible outputs

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


@dataclass
class StudyReport:
    name: str
    rows: list[Row] = field(default_factory=list)
    properties: list[Property] = field(default_factory=list)
    tables: dict = field(default_factory=dict)  # file stem -> (header, rows)
    timings: list = field(default_factory=list)  # (variant, depth, seed, cpu_secs)

    def add(self, variant, depth, metric, seed, value) -> None:
        self.rows.append(Row(variant, int(depth), metric, seed, float(value)))

    def values(self, variant, depth, metric) -> list[float]:
        return [r.value for r in self.rows
                if r.variant == variant and r.depth == depth and r.metric == metric]

    def median(self, variant, depth, metric) -> float:
        vals = self.values(variant, depth, metric)
        if not vals:
            raise KeyError(f"no rows for {variant}/{depth}/{metric}")
        return float(np.median(vals))

    def aggregates(self) -> list[tuple]:
        groups = defaultdict(list)
        for r in self.rows:
            groups[(r.variant, r.depth, r.metric)].append(r.value)
        return [(v, d, m, float(np.median(x)), len(x)) for (v, d, m), x in groups.items()]

    def check(self, name: str, passed: bool, detail: str, timed: bool = False) -> Property:
        prop = Property(name, bool(passed), detail, timed)
        self.properties.append(prop)
        return prop

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.properties)

    def summary_lines(self) -> list[str]:
        return [p.line() for p in self.properties]

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def dump(path, header, rows):
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
            written.append(path)

        dump(out / f"{self.name}.csv", ["study", "variant", "depth", "metric", "seed", "value"],
             [[self.name, r.variant, r.depth, r.metric, r.seed, repr(r.value)] for r in self.rows])
        dump(out / f"{self.name}_summary.csv", ["variant", "depth", "metric", "median", "n_seeds"],
             [[v, d, m, repr(x), n] for v, d, m, x, n in self.aggregates()])
        dump(out / f"{self.name}_properties.csv", ["property", "passed", "detail"],
             [[p.name, int(p.passed), p.detail] for p in self.properties if not p.timed])
        for stem, (header, rows) in self.tables.items():
            dump(out / f"{stem}.csv", header, rows)
        # wall-clock data is the one output that is not reproducible
        if self.timings:
            dump(out / f"{self.name}_timing.csv", ["variant", "depth", "seed", "cpu_secs"],
                 [[v, d, s, f"{t:.2f}"] for v, d, s, t in self.timings])
        timed = [p for p in self.properties if p.timed]
        if timed:
            dump(out / f"{self.name}_properties_timing.csv", ["property", "passed", "detail"],
                 [[p.name, int(p.passed), p.detail] for p in timed])
        return written


def _fmt(x: float) -> str:
    return f"{x:.4g}"


# ---------------------------------------------------------------------------
# solver orders and gradient checks


ORDER_STEPS = [16, 32, 64, 128]
ORDER_BOUNDS = {"euler": (0.9, 1.1), "rk2": (1.9, 2.1), "rk4": (3.7, 4.3)}
DISPLAY = {"euler": "Euler", "rk2": "RK2", "rk4": "RK4"}


def cmd_order_study(config: Optional[StudyConfig] = None, seeds: Sequence[int] = (), out_dir=None) -> StudyReport:
    """Empirical convergence order of each preset on y' = -y and y' = cos t."""
    report = StudyReport("order_study")
    table = []
    problems = {"decay": ode_core.decay_problem, "cosine": ode_core.cosine_problem}
    for key, scheme in ode_core.PRESETS.items():
        lo, hi = ORDER_BOUNDS[key]
        name = DISPLAY[key]
        for pname, make in problems.items():
            rows = ode_core.order_table(scheme, make(), ORDER_STEPS)
            p_hat = float(np.mean([r["estimated_order"] for r in rows[:-1]]))
            report.add(name, 0, f"order_{pname}", NA, p_hat)
            for r in rows:
                report.add(name, r["n_steps"], f"error_{pname}", NA, r["error"])
                table.append([name, pname, r["n_steps"], repr(r["error"]),
                              "" if math.isnan(r["estimated_order"]) else repr(r["estimated_order"])])
            report.check(f"order_{name}_{pname}", lo <= p_hat <= hi,
                         f"p_hat={p_hat:.4f} expected in [{lo}, {hi}]")
    report.tables["order_table"] = (["scheme", "problem", "n_steps", "error", "estimated_order"], table)
    return report


def cmd_gradcheck_suite(config: Optional[StudyConfig] = None, seeds: Sequence[int] = (1, 2, 3),
                        out_dir=None, tol: float = 1e-6, grid_tol: float = 1e-10) -> StudyReport:
    """Finite-difference checks of every primitive and block variant, plus the
    closed-form depth-gradient grid."""
    report = StudyReport("gradcheck_suite")
    names = sorted(checks.primitive_cases())
    worst_prim, worst_var = 0.0, 0.0
    for seed in seeds:
        for name in names:
            err = checks.primitive_error(name, seed)
            worst_prim = max(worst_prim, err)
            report.add(name, 0, "primitive_max_rel_error", seed, err)
        for tag in B.TAGS:
            err = max(checks.variant_errors(tag, seed).values())
            worst_var = max(worst_var, err)
            report.add(tag, 0, "variant_max_rel_error", seed, err)
    report.check("primitives_gradcheck", worst_prim < tol, f"max rel error {worst_prim:.3g} < {tol:g}")
    report.check("variants_gradcheck", worst_var < tol,
                 f"max rel error {worst_var:.3g} < {tol:g} over {len(B.TAGS)} variants")

    grid = checks.depth_gradient_grid()
    worst_grid = 0.0
    for tag, c, n, got, expected, rel in grid:
        report.add(tag, n, f"depth_gradient_c{c}", NA, got)
        worst_grid = max(worst_grid, rel)
    report.tables["depth_gradient_grid"] = (
        ["variant", "c", "gap", "autodiff", "analytic", "rel_error"],
        [[t, c, n, repr(g), repr(e), repr(r)] for t, c, n, g, e, r in grid])
    report.check("depth_gradient_grid", worst_grid <= grid_tol,
                 f"max rel error {worst_grid:.3g} <= {grid_tol:g} over {len(grid)} cells")

    rk2_8 = checks.autodiff_depth_gradient("RK2", 0.1, 8)
    report.add("RK2", 8, "linear_probe_c0.1", NA, rk2_8)
    report.check("rk2_gap8_value", abs(rk2_8 - 1.105 ** 8) <= 1e-10 * 1.105 ** 8,
                 f"autodiff {rk2_8:.6f} vs 1.105^8 = {1.105 ** 8:.6f}")
    zero = [checks.autodiff_depth_gradient(t, 0.0, 5) for t in ("RK2", "RK2GammaOne")]
    for t, z in zip(("RK2", "RK2GammaOne"), zero):
        report.add(t, 5, "linear_probe_c0", NA, z)
    report.check("zero_probe_identity", all(z == 1.0 for z in zero), f"c=0 gradients {zero}")
    return report


# ---------------------------------------------------------------------------
# copy task


def copy_task_spec(config: StudyConfig) -> TaskSpec:
    return TaskSpec(kind="Copy", vocab_size=config.copy_vocab, min_len=config.copy_min_len,
                    max_len=config.copy_max_len, val_size=config.copy_val_size,
                    test_size=config.copy_val_size, seed=config.task_seed)


def copy_model_config(config: StudyConfig, variant: str, depth: int) -> ModelConfig:
    share = 1
    if variant == "EulerShared2":
        variant, share = "Euler", 2
    return ModelConfig(vocab_size=config.copy_vocab, d_model=config.d_model, heads=config.heads,
                       ffn_dim=config.ffn_dim, enc_depth=depth, dec_depth=config.copy_dec_depth,
                       variant=variant, granularity=config.granularity, dropout=config.dropout,
                       max_len=config.copy_max_len + 2, position=config.position, share_repeat=share)


def token_accuracy(model, batches) -> float:
    """Teacher-forced argmax accuracy over non-pad target positions (EOS included)."""
    correct = total = 0
    with T.no_grad():
        for batch in batches:
            logits, targets = model.logits_and_targets(batch)
            keep = targets != model.config.pad_id
            correct += int(((logits.data.argmax(-1) == targets) & keep).sum())
            total += int(keep.sum())
    return correct / total


def greedy_accuracy(model, seqs, max_extra: int = 2) -> tuple[float, float]:
    """(token accuracy, exact-match rate) of greedy decoding against copy targets."""
    spec_len = max(len(s) for s in seqs) + max_extra
    batch = make_batch(TaskSpec(vocab_size=model.config.vocab_size), seqs)
    outs = greedy_decode(model.config, model.params, batch.source, spec_len)
    correct = total = exact = 0
    for out, ref in zip(outs, seqs):
        ref = list(ref)
        correct += sum(1 for i, t in enumerate(ref) if i < len(out) and out[i] == t)
        total += len(ref)
        exact += int(out == ref)
    return correct / total, exact / len(seqs)


def run_copy(config: StudyConfig, variant: str, depth: int, seed: int, *, steps: Optional[int] = None,
             early_stop: bool = True, metrics_path=None) -> dict:
    """Train one encoder-decoder on the copy task and return its measurements."""
    task = SequenceTask(copy_task_spec(config))
    mcfg = copy_model_config(config, variant, depth)
    model = Seq2Seq(mcfg, init_model(mcfg, seed=seed, dtype=config.dtype))
    val = list(task.batches("val", 256))
    max_steps = config.copy_max_steps if steps is None else steps
    tcfg = TrainConfig(peak_lr=config.copy_lr, warmup_steps=config.copy_warmup, total_steps=max_steps,
                       batch_size=config.copy_batch, label_smoothing=config.copy_label_smoothing,
                       seed=seed, precision=config.precision, log_interval=config.copy_eval_interval)
    out = {"untrained_acc": token_accuracy(model, val), "n_params": model.params.num_parameters()}
    reached = [math.inf]

    def callback(step, loss):
        if step % config.copy_eval_interval:
            return False
        acc = token_accuracy(model, val)
        if acc >= config.copy_target_acc and math.isinf(reached[0]):
            reached[0] = step
        return early_stop and not math.isinf(reached[0]) and step >= config.copy_min_steps

    finite = 1.0
    try:
        res = train(model, task.train_batches(config.copy_batch, seed=seed), tcfg,
                    metrics_path=metrics_path, callback=callback)
        losses = res.losses
    except NumericalOverflowError:
        finite, losses = 0.0, []
    out.update(steps_to_target=reached[0], finite=finite, steps_run=len(losses))
    for k in (1, 50, 500):
        if len(losses) >= k:
            out[f"loss_step{k}"] = losses[k - 1]
    if losses:
        out["final_loss"] = losses[-1]
        out["final_acc"] = token_accuracy(model, val)
        out["greedy_token_acc"], out["greedy_exact"] = greedy_accuracy(model, task.val[:64])
    return out


def _copy_rows(report, variant, depth, seed, result):
    for key in ("steps_to_target", "untrained_acc", "final_acc", "greedy_token_acc", "greedy_exact",
                "final_loss", "finite",
                "loss_step1", "loss_step50", "loss_step500", "n_params"):
        if key in result:
            report.add(variant, depth, key, seed, result[key])


def cmd_copy_task(config: StudyConfig, seeds: Sequence[int] = (1, 2, 3), variants=None, depth=None,
                  out_dir=None) -> StudyReport:
    """Steps to the target copy accuracy per variant and seed."""
    report = StudyReport("copy_task")
    variants = variants or config.variant_list(B.TAGS)
    depth = depth or config.copy_depth
    runs = Path(out_dir) / "runs" if out_dir else None
    for variant in variants:
        for seed in seeds:
            start = time.process_time()
            mpath = runs / f"copy_{variant}_d{depth}_s{seed}.csv" if runs else None
            _copy_rows(report, variant, depth, seed, run_copy(config, variant, depth, seed, metrics_path=mpath))
            report.timings.append((variant, depth, seed, time.process_time() - start))
    limit = config.copy_max_steps
    for variant in variants:
        med = report.median(variant, depth, "steps_to_target")
        report.check(f"converges_{variant}", med <= limit,
                     f"median steps to {config.copy_target_acc:.0%} = {med:g} (limit {limit})")
    for variant in variants:
        fin = min(report.values(variant, depth, "finite"))
        if not report.values(variant, depth, "loss_step50"):
            report.check(f"early_loss_{variant}", False, "runs shorter than 50 steps or diverged")
            continue
        l1, l50 = (report.median(variant, depth, m) for m in ("loss_step1", "loss_step50"))
        report.check(f"early_loss_{variant}", fin == 1.0 and l50 <= l1,
                     f"median loss step1 {_fmt(l1)} -> step50 {_fmt(l50)}")
        if report.values(variant, depth, "loss_step500"):
            l500 = report.median(variant, depth, "loss_step500")
            report.check(f"loss_500_below_50_{variant}", l500 < l50,
                         f"median loss step50 {_fmt(l50)} -> step500 {_fmt(l500)}")
    if "RK2" in variants and "Euler" in variants:
        r, e = (report.median(v, depth, "steps_to_target") for v in ("RK2", "Euler"))
        report.check("rk2_not_slower_than_euler", r <= e, f"median steps RK2 {r:g} <= Euler {e:g}")
    chance = [report.median(v, depth, "untrained_acc") for v in variants]
    report.check("untrained_near_chance", max(chance) < 4.0 / config.copy_vocab,
                 f"untrained accuracy {min(chance):.3f}..{max(chance):.3f} (chance {1 / config.copy_vocab:.3f})")
    return report


def cmd_depth_sweep(config: StudyConfig, seeds: Sequence[int] = (1, 2, 3), variants=None,
                    depths=None, out_dir=None) -> StudyReport:
    """Copy accuracy after a fixed budget, per encoder depth."""
    report = StudyReport("depth_sweep")
    variants = variants or config.variant_list(["Euler", "RK2", "RK2GammaOne", "RK4"])
    depths = depths or parse_list(config.sweep_depths, int)
    runs = Path(out_dir) / "runs" if out_dir else None
    for variant in variants:
        for depth in depths:
            for seed in seeds:
                start = time.process_time()
                mpath = runs / f"sweep_{variant}_d{depth}_s{seed}.csv" if runs else None
                res = run_copy(config, variant, depth, seed, steps=config.sweep_steps, early_stop=False,
                               metrics_path=mpath)
                _copy_rows(report, variant, depth, seed, res)
                report.timings.append((variant, depth, seed, time.process_time() - start))
    deepest = max(depths)
    for variant in variants:
        fin = min(report.values(variant, deepest, "finite"))
        losses = report.values(variant, deepest, "final_loss")
        ok = fin == 1.0 and all(np.isfinite(losses)) and len(losses) == len(seeds)
        report.check(f"no_divergence_{variant}_d{deepest}", ok, f"finite losses at depth {deepest}: {ok}")
        counts = [report.median(variant, d, "n_params") for d in sorted(depths)]
        report.check(f"param_count_monotone_{variant}", all(np.diff(counts) > 0),
                     f"parameters {[int(c) for c in counts]}")
    report.tables["depth_sweep_curve"] = (
        ["variant", "depth", "median_final_acc", "median_final_loss"],
        [[v, d, repr(report.median(v, d, "final_acc")), repr(report.median(v, d, "final_loss"))]
         for v in variants for d in depths if report.values(v, d, "final_acc")])
    return report


# ---------------------------------------------------------------------------
# language modelling


def lm_model_config(config: StudyConfig, corpus: CharCorpus, variant: str, depth: int, **kw) -> ModelConfig:
    share = 1
    if variant == "EulerShared2":
        variant, share = "Euler", 2
    base = dict(vocab_size=corpus.vocab_size, d_model=config.lm_d_model, heads=config.lm_heads,
                ffn_dim=config.lm_ffn_dim, enc_depth=depth, dec_depth=0, variant=variant,
                granularity=config.lm_granularity, dropout=config.lm_dropout,
                max_len=config.lm_seq_len, position=config.position, share_repeat=share)
    base.update(kw)
    return ModelConfig(**base)


def lm_perplexity(model, windows: np.ndarray, batch: int = 128) -> float:
    with T.no_grad():
        losses = [lm_forward(model.config, model.params, windows[i:i + batch]).data
                  for i in range(0, len(windows), batch)]
    keep = windows[:, 1:] != model.config.pad_id
    return float(np.exp(np.concatenate(losses)[keep].mean()))


def run_lm(config: StudyConfig, corpus: CharCorpus, variant: str, depth: int, seed: int,
           metrics_path=None) -> dict:
    mcfg = lm_model_config(config, corpus, variant, depth)
    model = CausalLM(mcfg, init_model(mcfg, seed=seed, dtype=config.dtype))
    tcfg = TrainConfig(peak_lr=config.lm_lr, warmup_steps=config.lm_warmup, total_steps=config.lm_steps,
                       batch_size=config.lm_batch, label_smoothing=config.lm_label_smoothing, seed=seed,
                       precision=config.precision, log_interval=max(1, config.lm_steps // 20))
    start = time.process_time()
    res = train(model, corpus.train_batches(config.lm_batch, config.lm_seq_len, seed), tcfg,
                metrics_path=metrics_path)
    secs = time.process_time() - start
    windows = corpus.eval_windows("val", config.lm_seq_len, config.lm_eval_windows or None)
    tail = res.losses[-min(100, len(res.losses)):]
    return {"val_ppl": lm_perplexity(model, windows), "train_ppl": float(np.exp(np.mean(tail))),
            "n_params": model.params.num_parameters(), "cpu_secs": secs, "model": model}


def _corpus(config: StudyConfig) -> CharCorpus:
    return CharCorpus.from_file(config.corpus_path)


def _lm_grid(report, config, corpus, cells, seeds, out_dir, prefix):
    runs = Path(out_dir) / "runs" if out_dir else None
    for variant, depth in cells:
        for seed in seeds:
            mpath = runs / f"{prefix}_{variant}_d{depth}_s{seed}.csv" if runs else None
            res = run_lm(config, corpus, variant, depth, seed, metrics_path=mpath)
            for key in ("val_ppl", "train_ppl", "n_params"):
                report.add(variant, depth, key, seed, res[key])
            report.timings.append((variant, depth, seed, res["cpu_secs"]))


def _ordered(report, chain, depth, metric="val_ppl"):
    meds = [report.median(v, depth, metric) for v in chain]
    ok = all(a <= b for a, b in zip(meds, meds[1:]))
    detail = " <= ".join(f"{v} {m:.4f}" for v, m in zip(chain, meds))
    return ok, detail


def cmd_lm_truncation(config: StudyConfig, seeds: Sequence[int] = (1, 2, 3), depths=None, variants=None,
                      out_dir=None) -> StudyReport:
    """Validation perplexity of Euler, RK2 and RK4 character LMs, plus a learnable RK2."""
    report = StudyReport("lm_truncation")
    corpus = _corpus(config)
    depths = depths or parse_list(config.lm_depths, int)
    variants = variants or config.variant_list(["Euler", "RK2", "RK4"])
    learnable = B.parse_variant(config.lm_learnable_variant)
    learn_depths = parse_list(config.lm_learnable_depths, int)
    cells = [(v, d) for d in depths for v in variants]
    cells += [(learnable, d) for d in learn_depths if d in depths and learnable not in variants]
    _lm_grid(report, config, corpus, cells, seeds, out_dir, "lm")
    chain = [v for v in ("RK4", "RK2", "Euler") if v in variants]
    for d in depths:
        ok, detail = _ordered(report, chain, d)
        report.check(f"ppl_order_depth{d}", ok, detail)
    if "RK2" in variants:
        for d in learn_depths:
            if d in depths:
                ok, detail = _ordered(report, [learnable, "RK2"], d)
                report.check(f"learnable_le_rk2_depth{d}", ok, detail)
    ppls = [r.value for r in report.rows if r.metric == "val_ppl"]
    report.check("ppl_at_least_one", min(ppls) >= 1.0, f"min PPL {min(ppls):.4f}")
    worst = max(t for *_, t in report.timings)
    report.check("cell_cpu_budget", worst <= config.lm_cell_budget_secs,
                 f"slowest cell {worst:.1f}s CPU (budget {config.lm_cell_budget_secs:g}s)", timed=True)
    return report


SCHEMA_VARIANTS = ["Euler", "Leapfrog", "Multistep", "DLCL", "PolyNet", "RK2", "RK2GammaOne",
                   "RK2LearnableScalar", "RK2GatedSigmoidPair", "RK2GatedSigmoid", "RK2Tanh", "RK4"]


def cmd_schema_comparison(config: StudyConfig, seeds: Sequence[int] = (1, 2, 3), depth=None,
                          variants=None, out_dir=None) -> StudyReport:
    """Copy-task and LM metrics for every block design under one budget, ranked by PPL."""
    report = StudyReport("schema_comparison")
    variants = variants or config.variant_list(SCHEMA_VARIANTS)
    depth = depth or config.schema_depth
    corpus = _corpus(config)
    _lm_grid(report, config, corpus, [(v, depth) for v in variants], seeds, out_dir, "schema_lm")
    runs = Path(out_dir) / "runs" if out_dir else None
    for v in variants:
        for seed in seeds:
            mpath = runs / f"schema_copy_{v}_d{config.copy_depth}_s{seed}.csv" if runs else None
            res = run_copy(config, v, config.copy_depth, seed, metrics_path=mpath)
            for key in ("steps_to_target", "final_acc"):
                report.add(v, config.copy_depth, f"copy_{key}", seed, res[key])

    ranked = sorted(variants, key=lambda v: report.median(v, depth, "val_ppl"))
    report.tables["schema_ranking"] = (
        ["rank", "variant", "median_val_ppl", "median_copy_steps", "n_params"],
        [[i + 1, v, repr(report.median(v, depth, "val_ppl")),
          repr(report.median(v, config.copy_depth, "copy_steps_to_target")),
          int(report.median(v, depth, "n_params"))] for i, v in enumerate(ranked)])
    if "Leapfrog" in variants:
        leap = report.median("Leapfrog", depth, "val_ppl")
        rk = [v for v in variants if v.startswith("RK")]
        worse = [v for v in rk if report.median(v, depth, "val_ppl") > leap]
        report.check("rk_variants_le_leapfrog", not worse,
                     f"Leapfrog {leap:.4f}; RK variants above it: {worse or 'none'}")

    polynet = _probe_factor("PolyNet", 0.1)
    report.add("PolyNet", 1, "probe_factor_c0.1", NA, polynet)
    report.check("polynet_probe_factor", abs(polynet - 1.11) < 1e-12, f"factor {polynet!r}")
    diff = _dlcl_first_block_vs_euler()
    report.add("DLCL", 1, "first_block_vs_euler_maxdiff", NA, diff)
    report.check("dlcl_first_block_is_euler", diff == 0.0, f"max |diff| {diff:g}")
    return report


def _probe_factor(tag: str, c: float) -> float:
    y = Tensor(np.ones((1, 1, 1)))
    v = init_variant(tag, None, "coef", 1, 0)
    state = BlockState.start(y) if tag in B.HISTORY_TAGS else None
    return float(block_forward(v, linear_probe(c), y, state)[0].data.ravel()[0])


def _dlcl_first_block_vs_euler() -> float:
    rng = np.random.default_rng(0)
    store, f = checks._ffn_stage()
    y = Tensor(rng.standard_normal((2, 3, 4)))
    dlcl, _ = block_forward(init_variant("DLCL", None, "c", 4, 0), f, y, BlockState.start(y))
    euler, _ = block_forward(BlockVariant("Euler"), f, y)
    return float(np.abs(dlcl.data - euler.data).max())


SCALING_VARIANTS = ["EulerShared2", "RK2", "RK2GammaOne", "RK2LearnableScalar", "RK2GatedSigmoid",
                    "RK2GatedSigmoidPair", "RK2Tanh"]


def cmd_scaling_comparison(config: StudyConfig, seeds: Sequence[int] = (1, 2, 3), depth=None,
                           variants=None, out_dir=None) -> StudyReport:
    """LM perplexity of the RK2 coefficient schemes and a weight-shared Euler pair."""
    report = StudyReport("scaling_comparison")
    variants = variants or config.variant_list(SCALING_VARIANTS)
    depth = depth or config.scaling_depth
    corpus = _corpus(config)
    _lm_grid(report, config, corpus, [(v, depth) for v in variants], seeds, out_dir, "scaling")
    if "RK2" in variants and "RK2GatedSigmoidPair" in variants:
        ok, detail = _ordered(report, ["RK2GatedSigmoidPair", "RK2"], depth)
        report.check("gate_pair_le_half_half", ok, detail)
    diff = _gate_zero_difference(config, corpus, depth)
    report.add("RK2GatedSigmoidPair", depth, "init_logit_maxdiff_vs_rk2", NA, diff)
    report.check("gate_zero_equals_rk2", diff == 0.0, f"max |logit diff| at init {diff:g}")
    return report


def _gate_zero_difference(config, corpus, depth) -> float:
    windows = corpus.eval_windows("val", config.lm_seq_len, 4)
    outs = []
    for v in ("RK2", "RK2GatedSigmoidPair"):
        mcfg = lm_model_config(config, corpus, v, depth)
        params = init_model(mcfg, seed=1, dtype=config.dtype)
        with T.no_grad():
            outs.append(encode(mcfg, params, windows[:, :-1]).data)
    return float(np.abs(outs[0] - outs[1]).max())


# ---------------------------------------------------------------------------
# gradient norms


class LinearProbeStack:
    """``depth`` blocks with F(y) = c*y and a zero shift added to each block input.

    The gradient of block t's shift equals dE/dy_t summed over positions, so its
    norm tracks the gradient reaching that block.
    """

    def __init__(self, tag: str, c: float, depth: int, d_model: int = 4):
        self.tag, self.c, self.depth = tag, c, depth
        self.params = ParamStore()
        self.variants = []
        for t in range(depth):
            self.params.add(f"probe.layer{t:02d}.shift", np.zeros(d_model))
            self.variants.append(init_variant(tag, self.params, f"probe.layer{t:02d}.coef", d_model, t))

    def block_prefixes(self) -> list[str]:
        return [f"probe.layer{t:02d}" for t in range(self.depth)]

    def forward(self, x: Tensor) -> Tensor:
        f = linear_probe(self.c)
        state = BlockState.start(x) if self.tag in B.HISTORY_TAGS else None
        y = x
        for t, v in enumerate(self.variants):
            y = T.add(y, self.params[f"probe.layer{t:02d}.shift"])
            y, state = block_forward(v, f, y, state)
        return y

    def grad_ratio(self, seed: int = 0) -> float:
        """Bottom-block over top-block gradient norm for a random linear readout."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 3, self.params["probe.layer00.shift"].size)))
        w = Tensor(rng.standard_normal(x.shape))
        self.params.zero_grad()
        backward(T.sum(T.mul(self.forward(x), w)))
        norms = block_grad_norms(self.params, self.block_prefixes())
        return norms[0] / norms[-1]


def cmd_gradient_norm_study(config: StudyConfig, seeds: Sequence[int] = (1, 2, 3), variants=None,
                            depth=None, out_dir=None) -> StudyReport:
    """Per-block gradient norms of deep LMs over training, and the linear-probe check."""
    report = StudyReport("gradient_norm_study")
    variants = variants or config.variant_list(["RK2", "RK2GammaOne"])
    depth = depth or config.gn_depth
    corpus = _corpus(config)
    runs = Path(out_dir) / "runs" if out_dir else None
    curves = []
    ratios = defaultdict(dict)  # (variant, step) -> {seed: ratio}
    for variant in variants:
        for seed in seeds:
            mcfg = lm_model_config(config, corpus, variant, depth, d_model=config.gn_d_model,
                                   heads=config.gn_heads, ffn_dim=config.gn_ffn_dim,
                                   max_len=config.gn_seq_len, granularity="Fused", dropout=0.0)
            model = CausalLM(mcfg, init_model(mcfg, seed=seed, dtype=config.dtype))
            tcfg = TrainConfig(peak_lr=config.gn_lr, warmup_steps=config.lm_warmup,
                               total_steps=config.gn_steps, batch_size=config.gn_batch,
                               label_smoothing=0.0, seed=seed, precision=config.precision,
                               log_interval=config.gn_log_interval)
            start = time.process_time()
            mpath = runs / f"gradnorm_{variant}_d{depth}_s{seed}.csv" if runs else None
            finite = 1.0
            try:
                res = train(model, corpus.train_batches(config.gn_batch, config.gn_seq_len, seed), tcfg,
                            metrics_path=mpath)
                rows = res.rows
            except NumericalOverflowError:
                finite, rows = 0.0, []
            report.timings.append((variant, depth, seed, time.process_time() - start))
            report.add(variant, depth, "finite", seed, finite)
            for row in rows:
                norms = row.grad_norm_per_block
                finite = finite * float(np.all(np.isfinite(norms)))
                ratio = norms[0] / norms[-1]
                ratios[(variant, row.step)][seed] = ratio
                curves.append([variant, seed, row.step, repr(ratio)] + [repr(n) for n in norms])
            if rows:
                report.add(variant, depth, "final_ratio", seed, ratios[(variant, rows[-1].step)][seed])
                report.add(variant, depth, "first_ratio", seed, ratios[(variant, rows[0].step)][seed])
            report.add(variant, depth, "norms_finite", seed, finite)
    report.tables["gradient_norm_curves"] = (
        ["variant", "seed", "step", "bottom_top_ratio"] + [f"block{t:02d}" for t in range(depth)], curves)

    fin = [r.value for r in report.rows if r.metric == "norms_finite"]
    report.check("norms_finite", all(v == 1.0 for v in fin), f"{int(sum(fin))}/{len(fin)} runs finite")
    if "RK2" in variants and "RK2GammaOne" in variants:
        steps = sorted({s for (v, s) in ratios if v == "RK2"} & {s for (v, s) in ratios if v == "RK2GammaOne"})
        wins, table = 0, []
        for s in steps:
            g = float(np.median(list(ratios[("RK2GammaOne", s)].values())))
            r = float(np.median(list(ratios[("RK2", s)].values())))
            wins += g >= r
            table.append([s, repr(g), repr(r)])
        report.tables["gradient_norm_ratio_medians"] = (["step", "RK2GammaOne", "RK2"], table)
        report.check("gamma_one_ratio_ge_rk2", bool(steps) and wins == len(steps),
                     f"median bottom/top ratio RK2GammaOne >= RK2 at {wins}/{len(steps)} logged steps")

    c = config.probe_c
    for tag in ("RK2", "RK2GammaOne"):
        got = LinearProbeStack(tag, c, depth).grad_ratio()
        expected = B.analytic_depth_gradient(tag, c, depth, 0) / B.analytic_depth_gradient(tag, c, depth, depth - 1)
        rel = abs(got - expected) / expected
        report.add(tag, depth, f"probe_ratio_c{c}", NA, got)
        report.add(tag, depth, f"probe_analytic_c{c}", NA, expected)
        report.check(f"probe_ratio_{tag}", rel <= config.probe_tolerance,
                     f"autodiff {got:.6g} vs analytic {expected:.6g} (rel {rel:.2g})")
    return report


STUDIES = {
    "order_study": cmd_order_study,
    "gradcheck_suite": cmd_gradcheck_suite,
    "copy_task": cmd_copy_task,
    "lm_truncation": cmd_lm_truncation,
    "schema_comparison": cmd_schema_comparison,
    "scaling_comparison": cmd_scaling_comparison,
    "depth_sweep": cmd_depth_sweep,
    "gradient_norm_study": cmd_gradient_norm_study,
}
