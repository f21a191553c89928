"""``treenet`` command line: summary, cost, gradcheck, train, predict, verify.

Exit codes: 0 success, 1 failed check or internal error, 2 bad usage or input.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from treenet import acceptance, checkpoint, config, cost
from treenet.blocks import BlockSpec, build_osa_block, build_tree_block_basic
from treenet.gradcheck import corrupted_backward, run_gradchecks
from treenet.layers import Tracer, skip_init
from treenet.ops import softmax
from treenet.tensor import Tensor, no_grad
from treenet.train import DataConfig, evaluate, history_to_csv, train
from treenet.zoo import build_model, treenet_spec

log = logging.getLogger("treenet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or unusable input files; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _model_spec(args):
    """ModelSpec from --config or --arch (+ --width-divisor / --num-classes)."""
    if getattr(args, "config", None):
        return _load_config(args.config).model
    try:
        return treenet_spec(args.arch, width_divisor=args.width_divisor, num_classes=args.num_classes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_config(path):
    try:
        return config.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except config.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _stage_shapes(model, size: int) -> dict:
    """Per-section output shapes via a dry trace (no convolution arithmetic)."""
    x = Tensor(np.zeros((1, model.in_channels, size, size), dtype=np.float32))
    model.eval()
    with no_grad(), Tracer(model, dry=True):
        feats = model.features(x)
    return {k: v.shape[1:] for k, v in feats.items()}


def _fmt_shape(shape) -> str:
    if len(shape) == 3:
        return f"{shape[1]}^2 x {shape[0]}" if shape[1] == shape[2] else f"{shape[1]}x{shape[2]} x {shape[0]}"
    return " x ".join(str(s) for s in shape)


def _read_image(path: Path) -> np.ndarray:
    """Load an .npy array (C,H,W or N,C,H,W) or a PPM/PNG image scaled to [0, 1]."""
    try:
        if path.suffix == ".npy":
            arr = np.load(path, allow_pickle=False)
        else:
            from PIL import Image

            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read input {path}: {exc}") from None
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or not np.issubdtype(arr.dtype, np.number):
        raise UsageError(f"input {path} must be a numeric C,H,W or N,C,H,W array, got shape {arr.shape}")
    return np.ascontiguousarray(arr, dtype=np.float32)


# --------------------------------------------------------------------------
# verbs


def cmd_summary(args) -> int:
    spec = _model_spec(args)
    with skip_init():
        model = build_model(spec)
    shapes = _stage_shapes(model, args.input)
    report = cost.analyze_graph(model, (spec.in_channels, args.input, args.input))
    print(f"{spec.name}  input {args.input}^2 x {spec.in_channels}")
    print(f"{'stage':<10} {'output':<14} {'layers':<28} {'l':>2} {'k':>5} {'k_p':>5} {'k_cat':>6}")
    if spec.stem:
        stem = "conv3x3 " + ", ".join(str(w) for w in spec.stem)
        print(f"{'stem':<10} {_fmt_shape(shapes['stem']):<14} {stem:<28}")
    for name, st in zip(spec.stage_names(), spec.stages):
        b = st.block
        layers = ("maxpool 3x3/2, " if st.downsample else "") + f"{b.kind.capitalize()} block x{st.blocks}"
        print(f"{name:<10} {_fmt_shape(shapes[name]):<14} {layers:<28} {b.l:>2} {b.k:>5} {b.kp:>5} {b.k_cat:>6}")
    if "logits" in shapes:
        print(f"{'classifier':<10} {_fmt_shape(shapes['logits']):<14} {'global avg pool, fc':<28}")
    print(f"output stride: {spec.composed_stride()}")
    for key, val in report.param_totals().items():
        print(f"params[{key}]: {val:,} ({val / 1e6:.3f}M)")
    return EXIT_OK


def _block_cost(args) -> int:
    if args.l is None or args.k is None:
        raise UsageError("--block needs --l and --k")
    if args.compare_osa and args.block != "tree":
        raise UsageError("--compare-osa needs --block tree")
    kp = args.kp if args.kp is not None else args.k
    k_in = args.kin if args.kin is not None else args.k
    k_cat = args.kcat if args.kcat is not None else 2 * args.k
    if args.block == "tree" and args.l < 2:
        raise UsageError(f"tree blocks need l >= 2, got {args.l}")
    if args.l < 1 or min(args.k, kp, k_in, k_cat) < 1:
        raise UsageError("block dimensions must be positive")
    osa_spec = BlockSpec(l=args.l, k=args.k, kp=args.k, k_cat=k_cat, k_in=k_in, kind="osa", use_srb=False,
                         use_residual=False, use_eca=False)
    with skip_init():
        if args.block == "tree":
            spec = BlockSpec(l=args.l, k=args.k, kp=kp, k_cat=k_cat, k_in=k_in)
            block = build_tree_block_basic(spec)
            analytic = cost.tree_params(k_in, args.k, kp, args.l, k_cat)
        else:
            spec = osa_spec
            block = build_osa_block(spec)
            analytic = cost.osa_params(k_in, args.k, args.l, k_cat)
        enumerated = block.weight_count()
        report = cost.analyze_graph(block, (k_in, args.input, args.input), name=f"{args.block} block")
    if args.csv:
        sys.stdout.write(report.to_csv())
        return EXIT_OK
    print(report.to_text(per_layer=args.per_layer))
    print(f"params analytic {analytic:,} | enumerated {enumerated:,} | {'equal' if analytic == enumerated else 'MISMATCH'}")
    status = analytic == enumerated
    if args.compare_osa:
        with skip_init():
            osa_enum = build_osa_block(osa_spec).weight_count()
        enum_diff = osa_enum - enumerated
        closed = cost.osa_params(k_in, args.k, args.l, k_cat) - analytic
        print(f"osa params {osa_enum:,}; osa - tree enumerated {enum_diff:,}; closed form {closed:,}")
        if k_in == k_cat == 2 * args.k:
            pred = cost.param_diff(args.k, kp, args.l)
            print(f"param_diff(k={args.k}, k'={kp}, l={args.l}) = {pred:,} ({'matches' if pred == enum_diff else 'MISMATCH'})")
            status &= pred == enum_diff
        else:
            print("param_diff assumes k_in = k_cat = 2k; showing the general closed-form difference only")
        status &= closed == enum_diff
        print("tree block is " + ("lighter" if enum_diff > 0 else "heavier or equal"))
    return EXIT_OK if status else EXIT_FAIL


def cmd_cost(args) -> int:
    if args.block:
        return _block_cost(args)
    if args.compare_osa:
        raise UsageError("--compare-osa needs --block tree")
    if not (args.arch or args.config):
        raise UsageError("cost needs --arch, --config or --block")
    spec = _model_spec(args)
    with skip_init():
        model = build_model(spec)
    report = cost.analyze_graph(model, (spec.in_channels, args.input, args.input))
    if args.csv:
        sys.stdout.write(report.to_csv())
        return EXIT_OK
    print(report.to_text(per_layer=args.per_layer))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt:
        with corrupted_backward(args.corrupt, args.corrupt_factor):
            results = run_gradchecks(seed=args.seed, tolerance=args.tolerance)
    else:
        results = run_gradchecks(seed=args.seed, tolerance=args.tolerance)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks pass at tolerance {args.tolerance:g}")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_train(args) -> int:
    doc = _load_config(args.config) if args.config else config.default_train_doc()
    train_cfg = doc.train or config.default_train_doc().train
    data_cfg = doc.data or DataConfig()
    overrides = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed)) if v is not None}
    try:
        train_cfg = dataclasses.replace(train_cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if doc.model.num_classes != data_cfg.classes:
        raise UsageError(f"model has {doc.model.num_classes} classes but data has {data_cfg.classes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(doc.model, seed=train_cfg.seed)
    train_set, val_set = data_cfg.make("train"), data_cfg.make("val")

    def report(rec):
        print(f"epoch {rec['epoch']:>3}  lr {rec['lr']:.4g}  loss {rec['loss']:.4f}  top1 {rec['top1']:.3f}  "
              f"val_top1 {rec['val_top1']:.3f}", flush=True)

    history = train(model, train_set, train_cfg, val=val_set, on_epoch=report)
    checkpoint.save_model(model, out / "model.trnw")
    (out / "metrics.csv").write_text(history_to_csv(history), newline="")
    (out / "config.yaml").write_text(config.render(config.ConfigDoc(doc.model, train_cfg, data_cfg)))
    final = evaluate(model, train_set)
    print(f"final train top1 (eval mode) {final['top1']:.3f}; wrote {out / 'model.trnw'}, {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    spec = _model_spec(args)
    model = build_model(spec, seed=args.seed)
    if args.checkpoint:
        try:
            checkpoint.load_model(model, args.checkpoint)
        except OSError as exc:
            raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
        except (checkpoint.CheckpointError, KeyError, ValueError) as exc:
            raise UsageError(f"checkpoint {args.checkpoint} does not fit {spec.name}: {exc}") from None
    x = _read_image(Path(args.input))
    if x.shape[1] != spec.in_channels:
        raise UsageError(f"input has {x.shape[1]} channels, model expects {spec.in_channels}")
    model.eval()
    try:
        with no_grad():
            logits = model(Tensor(x)).data
    except ValueError as exc:
        raise UsageError(f"input of shape {x.shape} is unusable: {exc}") from None
    probs = softmax(logits.astype(np.float64))
    k = min(args.top, probs.shape[1])
    for i, p in enumerate(probs):
        order = np.argsort(-p, kind="stable")[:k]
        print(f"sample {i}: " + "  ".join(f"{c}:{p[c]:.6f}" for c in order))
    if args.logits:
        np.save(args.logits, logits)
    return EXIT_OK


def cmd_verify(args) -> int:
    skip = set(args.skip or ())
    if args.skip_training:
        skip.add(8)
    rows = acceptance.run_all(skip=skip, out=sys.stdout)
    passed = sum(r.passed for r in rows)
    print(f"{passed}/{len(rows)} checks passed")
    return EXIT_OK if passed == len(rows) else EXIT_FAIL


# --------------------------------------------------------------------------
# parser


def _add_model_args(p, need_arch=True):
    g = p.add_mutually_exclusive_group(required=need_arch)
    g.add_argument("--arch", help="treenet-20, treenet-40, treenet-58 or treenet-100")
    g.add_argument("--config", help="config file with a model section")
    p.add_argument("--width-divisor", type=int, default=1, help="divide all widths (with --arch)")
    p.add_argument("--num-classes", type=int, default=1000, help="classifier outputs (with --arch)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="treenet", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default $TREENET_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("summary", help="per-stage architecture table")
    _add_model_args(s)
    s.add_argument("--input", type=int, default=224, help="input height/width")
    s.set_defaults(func=cmd_summary)

    c = sub.add_parser("cost", help="parameter, FLOP and MAC report")
    _add_model_args(c, need_arch=False)
    c.add_argument("--block", choices=("tree", "osa"), help="cost a single block instead of a network")
    c.add_argument("--l", type=int, help="block depth")
    c.add_argument("--k", type=int, help="growth rate")
    c.add_argument("--kp", type=int, help="bottleneck width k' (default k)")
    c.add_argument("--kin", type=int, help="input channels (default k)")
    c.add_argument("--kcat", type=int, help="transition width (default 2k)")
    c.add_argument("--input", type=int, default=None, help="spatial size (224 for networks, 56 for blocks)")
    c.add_argument("--compare-osa", action="store_true", help="compare a tree block against the OSA block")
    c.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    c.add_argument("--per-layer", action="store_true", help="include per-layer rows in the table")
    c.set_defaults(func=cmd_cost)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--corrupt", help=argparse.SUPPRESS)
    g.add_argument("--corrupt-factor", type=float, default=1.1, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="train on synthetic data; writes checkpoint and metrics")
    t.add_argument("--config", help="config file (default: desk-scale TreeNet-20/w4)")
    t.add_argument("--out", default="runs/train", help="output directory")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="top-k classes for an image or array")
    _add_model_args(r)
    r.add_argument("--checkpoint", help="weights file; omit for a freshly initialized model")
    r.add_argument("--input", required=True, help=".npy array or PPM/PNG image")
    r.add_argument("--top", type=int, default=5)
    r.add_argument("--seed", type=int, default=0, help="init seed when no checkpoint is given")
    r.add_argument("--logits", help="also save raw logits to this .npy path")
    r.set_defaults(func=cmd_predict)

    v = sub.add_parser("verify", help="run the acceptance criteria")
    v.add_argument("--skip-training", action="store_true", help="skip the desk training criterion")
    v.add_argument("--skip", type=int, action="append", help="skip criterion N (repeatable)")
    v.set_defaults(func=cmd_verify)
    return p


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get("TREENET_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"TREENET_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "input", 0) is None:
        args.input = 56 if getattr(args, "block", None) else 224
    try:
        with threadpool_limits(limits=_threads(args)):
            return args.func(args)
    except UsageError as exc:
        print(f"treenet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        log.exception("internal error")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
