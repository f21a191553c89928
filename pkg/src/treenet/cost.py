"""Parameter, FLOP and memory-access-cost accounting.

Closed forms are evaluated in exact integer/rational arithmetic.  Graph
enumeration walks the leaf layers of a built model with a dry tracer.

Conventions (stamped into every report):

* one multiply-accumulate = one FLOP unit; conv = Ho*Wo*Cout*(Cin/g)*kh*kw,
  FC = D*K;
* MAC = input elements read + output elements written + weights read;
* ``params`` counts conv/FC/attention weights (BN affine terms excluded),
  ``params_with_bn`` adds BN gamma/beta.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from treenet.layers import Module, Tracer
from treenet.tensor import Tensor, no_grad

CONVENTIONS = (
    "flops: multiply-accumulate counted as 1 unit (conv Ho*Wo*Cout*Cin/g*kh*kw, fc D*K)",
    "mac: input elements + output elements + weight elements",
    "params: conv/fc/attention weights and biases, BN excluded; params_with_bn adds BN gamma+beta",
    "dense flops = conv + fc; elementwise flops (bn, relu, pool, add, eca) itemized separately",
)

DENSE_KINDS = ("conv", "fc")


def _exact(x: Fraction):
    return int(x) if x.denominator == 1 else x


# --------------------------------------------------------------------------
# closed forms


def osa_params(k_in: int, k: int, l: int, k_cat: int) -> int:
    return 9 * k_in * k + 9 * (l - 1) * k * k + (k_in + k * l) * k_cat


def tree_params(k_in: int, k: int, kp: int, l: int, k_cat: int) -> int:
    if l < 2:
        raise ValueError(f"Tree blocks need l >= 2, got {l}")
    return k_in * (k + 9 * kp) + (l + 8) * k * kp + 9 * (l - 2) * kp * kp + (l + 1) * k * k_cat


def param_diff(k: int, kp: int, l: int) -> int:
    """OSA minus Tree weight count with k_in = k_cat = 2k."""
    if l < 2:
        raise ValueError(f"Tree blocks need l >= 2, got {l}")
    return 9 * (l + 1) * k * k - (l + 26) * k * kp - 9 * (l - 2) * kp * kp


def mac_standard(h: int, w: int, c: int, k: int) -> int:
    """MAC of a standard 3x3 conv c->k at h x w."""
    return h * w * (c + k) + 9 * c * k


def mac_group(h: int, w: int, c: int, k_hat: int, g: int):
    """MAC of a grouped 3x3 conv c->k_hat with g groups."""
    if k_hat % g:
        raise ValueError(f"k_hat={k_hat} not divisible by g={g}")
    return _exact(h * w * (c + k_hat) + Fraction(9 * c * k_hat, g))


def mac_increment(h: int, w: int, c: int, k: int, g: int):
    """Extra MAC of the 4k-wide grouped conv over the standard one."""
    return _exact(3 * k * (h * w - 3 * c * (1 - Fraction(4, g))))


# --------------------------------------------------------------------------
# graph enumeration


@dataclass
class LayerCost:
    layer: str
    kind: str
    params: int
    params_with_bn: int
    flops: int
    mac: int
    out_shape: tuple = ()

    @property
    def dense(self) -> bool:
        return self.kind in DENSE_KINDS


def _numel(shape) -> int:
    return int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])


def _layer_cost(name, module, in_shapes, out_shape) -> LayerCost:
    kind = module.kind
    n_in = sum(_numel(s) for s in in_shapes)
    n_out = _numel(out_shape)
    weights = sum(p.size for p in module._params.values())
    params, params_bn, flops = weights, weights, 0
    if kind == "conv":
        g = module.geom
        kh, kw = g.kernel
        flops = out_shape[2] * out_shape[3] * g.out_channels * (g.in_channels // g.groups) * kh * kw
    elif kind == "fc":
        flops = module.in_features * module.out_features
    elif kind == "bn":
        params = 0
        flops = n_out
    elif kind in ("relu", "add"):
        flops = n_out
    elif kind == "maxpool":
        flops = n_out * module.kernel * module.kernel
    elif kind == "gap":
        flops = n_in
    elif kind == "eca":
        c = in_shapes[0][1]
        flops = 2 * n_in + c * module.kernel_size + c
    elif kind == "concat":
        flops = 0
    mac = n_in + n_out + weights
    return LayerCost(name, kind, params, params_bn, flops, mac, tuple(out_shape[1:]))


@dataclass
class CostReport:
    name: str
    input_shape: tuple
    rows: list
    conventions: tuple = CONVENTIONS

    def _sum(self, attr, pred=lambda r: True) -> int:
        return sum(getattr(r, attr) for r in self.rows if pred(r))

    @property
    def params(self) -> int:
        return self._sum("params")

    @property
    def params_with_bn(self) -> int:
        return self._sum("params_with_bn")

    @property
    def flops(self) -> int:
        return self._sum("flops")

    @property
    def mac(self) -> int:
        return self._sum("mac")

    @property
    def dense_flops(self) -> int:
        return self._sum("flops", lambda r: r.dense)

    @property
    def elementwise_flops(self) -> int:
        return self._sum("flops", lambda r: not r.dense)

    @property
    def gflop_units(self) -> float:
        return self.dense_flops / 1e9

    def params_excluding(self, prefix: str, with_bn: bool = False) -> int:
        attr = "params_with_bn" if with_bn else "params"
        return self._sum(attr, lambda r: not r.layer.startswith(prefix))

    def param_totals(self) -> dict:
        """The four parameter totals: +/- BN, +/- classifier."""
        return {
            "weights": self.params,
            "weights+bn": self.params_with_bn,
            "weights-classifier": self.params_excluding("classifier"),
            "weights+bn-classifier": self.params_excluding("classifier", with_bn=True),
        }

    def by_kind(self) -> dict:
        out = {}
        for r in self.rows:
            agg = out.setdefault(r.kind, [0, 0, 0])
            agg[0] += r.params_with_bn
            agg[1] += r.flops
            agg[2] += r.mac
        return out

    def to_text(self, per_layer: bool = True) -> str:
        lines = [f"# cost report: {self.name}, input {self.input_shape}"]
        lines += [f"# {c}" for c in self.conventions]
        w = max([len(r.layer) for r in self.rows] + [5])
        head = f"{'layer':<{w}}  {'kind':<7} {'params':>12} {'params_bn':>12} {'flops':>16} {'mac':>14}  out"
        if per_layer:
            lines.append(head)
            for r in self.rows:
                shape = "x".join(str(s) for s in r.out_shape)
                lines.append(
                    f"{r.layer:<{w}}  {r.kind:<7} {r.params:>12,} {r.params_with_bn:>12,} {r.flops:>16,} {r.mac:>14,}  {shape}"
                )
        lines.append(
            f"{'TOTAL':<{w}}  {'':<7} {self.params:>12,} {self.params_with_bn:>12,} {self.flops:>16,} {self.mac:>14,}"
        )
        lines.append(f"dense GFLOP-units (conv+fc): {self.gflop_units:.4f}")
        lines.append(f"elementwise GFLOP-units:     {self.elementwise_flops / 1e9:.4f}")
        for key, val in self.param_totals().items():
            lines.append(f"params[{key}]: {val:,} ({val / 1e6:.3f}M)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\r\n")
        wr.writerow(["layer", "params", "params_with_bn", "flops", "mac"])
        for r in self.rows:
            wr.writerow([r.layer, r.params, r.params_with_bn, r.flops, r.mac])
        wr.writerow(["TOTAL", self.params, self.params_with_bn, self.flops, self.mac])
        return buf.getvalue()


def parse_cost_csv(text: str) -> tuple:
    """Returns (rows, totals) as dicts of ints, from :meth:`CostReport.to_csv` output."""
    reader = csv.DictReader(io.StringIO(text))
    rows, totals = [], None
    for rec in reader:
        vals = {k: int(rec[k]) for k in ("params", "params_with_bn", "flops", "mac")}
        if rec["layer"] == "TOTAL":
            totals = vals
        else:
            rows.append({"layer": rec["layer"], **vals})
    return rows, totals


def analyze_graph(model: Module, input_shape, name: str = "") -> CostReport:
    """Enumerate per-layer cost of ``model`` for one sample of ``input_shape`` (C, H, W)."""
    if not isinstance(model, Module):
        raise TypeError("analyze_graph needs a built model")
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    dtype = next(iter(model.parameters())).dtype if model.parameters() else np.float32
    prev = {id(m): m.training for _, m in model.named_modules()}
    model.eval()
    try:
        with no_grad(), Tracer(model, dry=True) as tr:
            model(Tensor(np.zeros(shape, dtype=dtype), dtype=dtype))
    finally:
        for _, m in model.named_modules():
            object.__setattr__(m, "training", prev[id(m)])
    rows = [_layer_cost(n, m, ins, out) for n, m, ins, out in tr.records]
    return CostReport(name or getattr(getattr(model, "spec", None), "name", type(model).__name__), shape[1:], rows)


def enumerate_weights(model: Module) -> int:
    """Weight count without BN, straight from the parameter tensors."""
    return model.num_parameters(include_bn=False)
