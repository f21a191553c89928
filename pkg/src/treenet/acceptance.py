"""Acceptance criteria as runnable checks.

Each ``criterion_N`` returns a list of :class:`Outcome` rows (one per
variant where the criterion is per-variant).  ``run_all`` drives them for
the ``verify`` command; the test suite calls them one by one.
"""

from __future__ import annotations

import functools
import io
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from treenet import checkpoint, cost
from treenet.blocks import BlockSpec, build_osa_block, build_tree_block_basic
from treenet.gradcheck import run_gradchecks
from treenet.layers import skip_init
from treenet.tensor import Tensor, no_grad
from treenet.train import DataConfig, desk_config, evaluate, train
from treenet.zoo import VARIANTS, build_model, treenet_spec, with_flags

# Table 1 GFLOPs row and Table 3 parameter column
GFLOPS_TABLE1 = {20: 4.20, 40: 6.68, 58: 7.91, 100: 13.24}
GFLOPS_TABLE3 = {20: 4.20, 40: 6.68, 58: 7.93, 100: 13.24}
PARAMS_M_TABLE3 = {20: 8.37, 40: 17.33, 58: 26.58, 100: 43.42}
OUTPUT_SIZES = {
    "stem": (128, 56, 56),
    "stage2": (256, 56, 56),
    "stage3": (512, 28, 28),
    "stage4": (768, 14, 14),
    "stage5": (1024, 7, 7),
}
GFLOP_TOL = 0.05
PARAM_TOL = 0.03
GRAD_TOL = 1e-4
TRAIN_TOP1 = 0.95
ABLATION_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class Outcome:
    criterion: int
    name: str
    passed: bool
    measured: str
    target: str
    detail: str = ""
    seconds: float = 0.0
    notes: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] C{self.criterion} {self.name}: measured {self.measured} | target {self.target} ({self.seconds:.1f}s){' - ' + self.detail if self.detail else ''}"


def _timed(budget: float):
    """Stamp wall time on every row; exceeding ``budget`` seconds fails the row."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            rows = fn(*args, **kwargs)
            dt = time.perf_counter() - t0
            for r in rows:
                r.seconds = dt
                if dt > budget:
                    r.passed = False
                    r.detail = f"{r.detail}; over runtime budget {budget:g}s".lstrip("; ")
            return rows

        wrapper.budget = budget
        return wrapper

    return deco


def random_block_specs(n: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(n):
        l = int(rng.integers(2, 7))
        k, kp, k_cat, k_in = (int(v) for v in rng.integers(32, 513, size=4))
        specs.append(BlockSpec(l=l, k=k, kp=kp, k_cat=k_cat, k_in=k_in))
    return specs


@_timed(10)
def criterion_1(n: int = 100, seed: int = 0) -> list:
    """Closed-form OSA/Tree weight counts equal enumeration of built blocks."""
    mismatches = []
    with skip_init():
        for s in random_block_specs(n, seed):
            tree_enum = build_tree_block_basic(s).weight_count()
            osa_enum = build_osa_block(s).weight_count()
            if tree_enum != cost.tree_params(s.k_in, s.k, s.kp, s.l, s.k_cat):
                mismatches.append(("tree", s))
            if osa_enum != cost.osa_params(s.k_in, s.k, s.l, s.k_cat):
                mismatches.append(("osa", s))
    return [Outcome(1, "formula-enumeration identity", not mismatches, f"{2 * n - len(mismatches)}/{2 * n} equal", f"{2 * n}/{2 * n}")]


@_timed(1)
def criterion_2() -> list:
    """Difference identity on a grid, and positivity below k'/k = 17/18."""
    bad_identity = 0
    checked = 0
    for k in range(32, 769, 16):
        for kp in range(16, 2 * k + 1, 16):
            for l in range(2, 7):
                checked += 1
                lhs = cost.param_diff(k, kp, l)
                rhs = cost.osa_params(2 * k, k, l, 2 * k) - cost.tree_params(2 * k, k, kp, l, 2 * k)
                bad_identity += lhs != rhs
    k = np.arange(32, 769, dtype=np.int64)[:, None]
    kp = np.arange(1, 726, dtype=np.int64)[None, :]
    region = 18 * kp <= 17 * k
    sign_fail = 0
    for l in (3, 5):
        d = 9 * (l + 1) * k * k - (l + 26) * k * kp - 9 * (l - 2) * kp * kp
        sign_fail += int(((d <= 0) & region).sum())
    ok = bad_identity == 0 and sign_fail == 0
    return [
        Outcome(
            2,
            "param difference identity and sign",
            ok,
            f"{bad_identity} identity mismatches / {checked}; {sign_fail} non-positive in k'/k<=17/18",
            "0 mismatches; 0 non-positive",
        )
    ]


@_timed(1)
def criterion_3() -> list:
    """MAC increment identity and positivity for hw > 3c, g >= 4."""
    bad, sign_fail, checked = 0, 0, 0
    for hw in (7, 14, 28, 56, 112):
        for c in (16, 32, 64, 128, 256, 512, 1024):
            for k in (16, 64, 128, 256):
                for g in (1, 2, 4, 8, 16, 32, 64):
                    checked += 1
                    inc = cost.mac_increment(hw, hw, c, k, g)
                    if Fraction(inc) != Fraction(cost.mac_group(hw, hw, c, 4 * k, g)) - cost.mac_standard(hw, hw, c, k):
                        bad += 1
                    if hw * hw > 3 * c and g >= 4 and not inc > 0:
                        sign_fail += 1
    return [
        Outcome(3, "MAC increment identity and sign", bad == 0 and sign_fail == 0,
                f"{bad} mismatches, {sign_fail} sign failures / {checked}", "0, 0")
    ]


def variant_report(variant: int, size: int = 224) -> cost.CostReport:
    with skip_init():
        model = build_model(treenet_spec(variant))
    return cost.analyze_graph(model, (3, size, size))


@_timed(30)
def criterion_4() -> list:
    """Dense GFLOP-units at 224x224 within 5% of the printed Table 1 values."""
    rows = []
    for v in VARIANTS:
        rep = variant_report(v)
        g = rep.gflop_units
        target = GFLOPS_TABLE1[v]
        rel = g / target - 1
        detail = f"rel {rel:+.2%}; elementwise {rep.elementwise_flops / 1e9:.3f} G itemized separately"
        if GFLOPS_TABLE3[v] != target:
            rel3 = g / GFLOPS_TABLE3[v] - 1
            detail += (f"; Table 3 prints {GFLOPS_TABLE3[v]:.2f} (rel {rel3:+.2%}) for the same model - "
                       f"tables disagree ({target:.2f} vs {GFLOPS_TABLE3[v]:.2f})")
        rows.append(Outcome(4, f"GFLOPs treenet-{v}", abs(rel) <= GFLOP_TOL, f"{g:.3f}", f"{target:.2f} +/- 5%", detail))
    return rows


@_timed(30)
def criterion_5() -> list:
    """Some parameter total within 3% of Table 3; all four totals reported."""
    rows = []
    for v in VARIANTS:
        rep = variant_report(v)
        target = PARAMS_M_TABLE3[v]
        totals = {k: t / 1e6 for k, t in rep.param_totals().items()}
        best = min(totals, key=lambda k: abs(totals[k] / target - 1))
        rel = totals[best] / target - 1
        breakdown = ", ".join(f"{k}={t:.3f}M" for k, t in totals.items())
        rows.append(Outcome(5, f"params treenet-{v}", abs(rel) <= PARAM_TOL, f"{totals[best]:.3f}M ({best}, {rel:+.2%})",
                            f"{target:.2f}M +/- 3%", breakdown))
    return rows


@_timed(120)
def criterion_6(seed: int = 0) -> list:
    results = run_gradchecks(seed=seed, tolerance=GRAD_TOL)
    worst = max(results, key=lambda r: r.max_rel_err)
    failed = [r.name for r in results if not r.passed]
    return [Outcome(6, "gradient checks (f64 central differences)", not failed,
                    f"{len(results) - len(failed)}/{len(results)} pass, worst {worst.max_rel_err:.2e} ({worst.name})",
                    f"all < {GRAD_TOL:g}", "failed: " + ", ".join(failed) if failed else "")]


@_timed(60)
def criterion_7(batch: int = 2) -> list:
    """Real forward at 224x224: stage outputs match Table 1, output stride 32."""
    rows = []
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((batch, 3, 224, 224)).astype(np.float32))
    for v in VARIANTS:
        model = build_model(treenet_spec(v)).eval()
        with no_grad():
            feats = model.features(x)
        got = {k: t.shape[1:] for k, t in feats.items() if k != "logits"}
        logits_ok = feats["logits"].shape == (batch, 1000)
        stride = 224 // feats["stage5"].shape[2]
        ok = got == OUTPUT_SIZES and logits_ok and stride == 32
        measured = ", ".join(f"{k} {s[1]}^2x{s[0]}" for k, s in got.items()) + f", logits {feats['logits'].shape}, stride {stride}"
        rows.append(Outcome(7, f"shapes treenet-{v}", ok, measured, "Table 1 output sizes, stride 32"))
    return rows


def _train_once(seed: int, complete: bool, data: DataConfig, epochs: int = 20):
    spec = treenet_spec(20, width_divisor=4, num_classes=data.classes)
    if not complete:
        spec = with_flags(spec, use_srb=False, use_residual=False, use_eca=False)
    model = build_model(spec, seed=seed)
    train_set, val_set = data.make("train"), data.make("val")
    history = train(model, train_set, desk_config(epochs=epochs, seed=seed))
    return model, history, evaluate(model, train_set), evaluate(model, val_set)


@_timed(1200)
def criterion_8(seeds=ABLATION_SEEDS, epochs: int = 20) -> list:
    """Desk-scale training reaches 95% train top-1; complete block >= basic block on validation (median)."""
    data = DataConfig()
    _, history, train_metrics, _ = _train_once(0, True, data, epochs)
    rows = [Outcome(8, "desk training quarter-width treenet-20", train_metrics["top1"] >= TRAIN_TOP1,
                    f"train top1 {train_metrics['top1']:.3f} after {len(history)} epochs",
                    f">= {TRAIN_TOP1:.2f} within {epochs} epochs", f"final running loss {history[-1]['loss']:.4f}")]
    complete, basic = [], []
    for s in seeds:
        complete.append(_train_once(s, True, data, epochs)[3]["top1"])
        basic.append(_train_once(s, False, data, epochs)[3]["top1"])
    mc, mb = statistics.median(complete), statistics.median(basic)
    rows.append(Outcome(8, "ablation complete >= basic (median val top1)", mc >= mb, f"complete {mc:.3f} vs basic {mb:.3f}",
                        "complete >= basic", f"complete {complete}, basic {basic}"))
    return rows


@_timed(10)
def criterion_9() -> list:
    spec = treenet_spec(20, width_divisor=4, num_classes=4)
    model = build_model(spec, seed=3)
    data = DataConfig(per_class=4)
    train(model, data.make(), desk_config(epochs=2, warmup_epochs=1, batch_size=8))
    blob = checkpoint.dumps(model.state_dict())
    restored = build_model(spec, seed=99)
    restored.load_state_dict(checkpoint.loads(blob))
    blob2 = checkpoint.dumps(restored.state_dict())
    x = Tensor(data.make("val").images[:4])
    with no_grad():
        a = model.eval()(x).data
        b = restored.eval()(x).data
    return [
        Outcome(9, "checkpoint save-load-save byte identity", blob == blob2, f"{len(blob)} bytes, identical={blob == blob2}", "identical"),
        Outcome(9, "load-then-predict logits bitwise equal", bool(np.array_equal(a, b)),
                f"max |diff| {float(np.abs(a - b).max()):.1e}", "bitwise equal"),
    ]


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
}


def run_all(skip=(), out=None) -> list:
    rows = []
    for num, fn in CRITERIA.items():
        if num in skip:
            if out:
                print(f"[SKIP] C{num}", file=out, flush=True)
            continue
        for r in fn():
            rows.append(r)
            if out:
                print(r.line(), file=out, flush=True)
    return rows


def render_matrix(rows: list) -> str:
    buf = io.StringIO()
    passed = sum(r.passed for r in rows)
    for r in rows:
        print(r.line(), file=buf)
    print(f"{passed}/{len(rows)} checks passed", file=buf)
    return buf.getvalue()
