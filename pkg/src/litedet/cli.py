"""Command-line entry point: ``litedet <subcommand> ...``.

Exit codes: 0 success, 1 verification failure, 2 input or usage error.
"""

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import boxloss
from .cost import CostReport, compare_reports, graph_cost, render_delta, render_report
from .errors import LitedetError
from .fixtures import fixture_path
from .graph import (forward_graph, init_weights, load_graph_file, load_weights, output_tensors,
                    save_weights)
from .prune import Pruner, apply_prune, search_speedup
from .rng import SplitMix64
from .tensor import Tensor4, load_tensor, save_tensor

BOX_COLUMNS = ["pred_cx", "pred_cy", "pred_w", "pred_h", "gt_cx", "gt_cy", "gt_w", "gt_h"]


class UsageError(Exception):
    """Bad flag value or unreadable input file (exit code 2)."""


def parse_shape(text):
    try:
        dims = tuple(int(d) for d in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"input shape must look like NxCxHxW, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise UsageError(f"input shape must be four positive ints NxCxHxW, got {text!r}")
    return dims


def _graph(path):
    p = Path(path)
    if not p.exists():
        try:
            p = fixture_path(p.name[:-5] if p.name.endswith(".json") else p.name)
        except KeyError:
            raise UsageError(f"graph file not found: {path}") from None
    return load_graph_file(p)


def _weights(args, g):
    if args.weights:
        if not Path(args.weights).exists():
            raise UsageError(f"weights file not found: {args.weights}")
        return load_weights(args.weights)
    return init_weights(g, args.seed)


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def seeded_input(shape, seed):
    """Uniform [-1, 1) float32 tensor from SplitMix64."""
    u = SplitMix64(seed).random_array(int(np.prod(shape)))
    return Tensor4((2.0 * u - 1.0).astype(np.float32).reshape(shape))


# -- subcommands ---------------------------------------------------------------------------

def cmd_analyze(args):
    g = _graph(args.graph)
    shape = parse_shape(args.input_shape) if args.input_shape else None
    report = graph_cost(g, shape)
    _emit(report.to_json() if args.format == "json" else render_report(report), args.out)
    return 0


def cmd_forward(args):
    g = _graph(args.graph)
    w = _weights(args, g)
    if args.input:
        x = load_tensor(args.input)
    else:
        shape = parse_shape(args.input_shape) if args.input_shape else g.input_shape
        if len(shape) != 4:
            raise UsageError("no --input-shape given and the graph has no meta.input_shape")
        x = seeded_input(shape, args.seed if args.input_seed is None else args.input_seed)
    results = forward_graph(g, w, x)
    if args.nodes:
        unknown = [n for n in args.nodes if n not in results]
        if unknown:
            raise UsageError(f"unknown node outputs: {unknown}")
        chosen = {n: results[n] for n in args.nodes}
    else:
        chosen = output_tensors(g, results)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for name, t in chosen.items():
        line = f"{name}: {'x'.join(map(str, t.shape))}"
        if out_dir:
            path = out_dir / (name.replace("/", "__") + ".t4f")
            save_tensor(path, t)
            line += f" -> {path}"
        print(line)
    return 0


def _read_boxes(path):
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read boxes file: {e}") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != BOX_COLUMNS:
        raise UsageError(f"boxes CSV header must be {','.join(BOX_COLUMNS)}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        n = len(rows) + 1
        try:
            if len(row) != 8:
                raise ValueError(f"expected 8 fields, got {len(row)}")
            vals = [float(c) for c in row]
            boxloss.BoxCWH(*vals[:4])
            boxloss.BoxCWH(*vals[4:])
        except (ValueError, LitedetError) as e:
            raise UsageError(f"boxes CSV row {n} (line {lineno}): {e}") from None
        rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 8)


def _fmt(v):
    return repr(float(v))


def cmd_loss(args):
    try:
        ctx = boxloss.LossContext(args.img_w, args.img_h, args.ratio)
    except LitedetError as e:
        raise UsageError(str(e)) from None
    if args.grad and args.kind != "inner-mpdiou":
        raise UsageError("--grad is only available for --kind inner-mpdiou")
    boxes = _read_boxes(args.boxes)
    pred, gt = boxes[:, :4], boxes[:, 4:]
    grads = None
    if args.kind == "inner-mpdiou":
        loss, grads = boxloss.inner_mpdiou_loss_grad_batch(pred, gt, ctx.img_w, ctx.img_h,
                                                           ctx.ratio, args.distances)
        value = 1.0 - loss
    else:
        fn = boxloss.iou_batch if args.kind == "iou" else boxloss.ciou_batch
        value = fn(pred, gt)
        loss = 1.0 - value
    out = csv.writer(sys.stdout, lineterminator="\n")
    head = ["row", "value", "loss"] + (["grad_cx", "grad_cy", "grad_w", "grad_h"] if args.grad else [])
    out.writerow(head)
    for i in range(len(boxes)):
        row = [i + 1, _fmt(value[i]), _fmt(loss[i])]
        if args.grad:
            row += [_fmt(v) for v in grads[i]]
        out.writerow(row)
    mean = _fmt(loss.mean()) if len(boxes) else "nan"
    out.writerow(["mean", "", mean] + [""] * (4 if args.grad else 0))
    return 0


def cmd_gradcheck(args):
    if args.samples == 0:
        print("warning: --samples 0 checks nothing; passing vacuously", file=sys.stderr)
    res = boxloss.gradcheck(args.samples, args.eps, args.seed, args.distances,
                            corrupt=args.corrupt_gradient)
    print(f"samples={res.checked} rejected_near_kinks={res.rejected} eps={args.eps:g} "
          f"max_rel_err={res.max_rel_err:.3e}")
    if not res.passed:
        print(f"FAIL: sample {res.worst} exceeds 1e-3", file=sys.stderr)
        return 1
    return 0


def cmd_prune(args):
    g = _graph(args.graph)
    w = _weights(args, g)
    pr = Pruner(g, w, args.protect or ())
    plan = search_speedup(g, w, args.target_speedup, args.tolerance, pruner=pr)
    g2, w2 = apply_prune(g, w, plan)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pruned-graph.json").write_text(g2.to_json())
    save_weights(w2, out / "pruned-weights.ldw")
    (out / "plan.json").write_text(plan.to_json())
    before, after = graph_cost(g), graph_cost(g2)
    sys.stdout.write(render_delta(compare_reports(before, after)))
    print(f"achieved_mac_ratio={plan.achieved_mac_ratio:.4f} "
          f"achieved_sparsity={plan.achieved_sparsity:.4f}")
    if plan.warning:
        print(f"warning: {plan.warning}")
    return 0


def _report(path):
    try:
        return CostReport.from_json(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read report: {e}") from None
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"{path}: not a cost report ({e})") from None


def cmd_compare(args):
    delta = compare_reports(_report(args.a), _report(args.b))
    _emit(delta.to_json() if args.format == "json" else render_delta(delta), args.out)
    return 0


# -- argument parsing ------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _positive(kind):
    def conv(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return conv


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _ratio(text):
    v = float(text)
    if not boxloss.RATIO_MIN <= v <= boxloss.RATIO_MAX:
        raise argparse.ArgumentTypeError(f"must lie in [0.5, 1.5], got {text}")
    return v


def _speedup(text):
    v = float(text)
    if not v >= 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def build_parser():
    p = _Parser(prog="litedet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="parameter/MAC report for a graph")
    a.add_argument("--graph", required=True, help="graph JSON (or a shipped fixture name)")
    a.add_argument("--input-shape", help="NxCxHxW; defaults to meta.input_shape")
    a.add_argument("--format", choices=("json", "table"), default="table")
    a.add_argument("--out", help="write the report here instead of stdout")
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("forward", help="run a graph and dump outputs as T4F0 tensors")
    f.add_argument("--graph", required=True)
    f.add_argument("--weights", help="LDW0 weight file; omitted means init from --seed")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--input", help="T4F0 input tensor; omitted means a seeded random input")
    f.add_argument("--input-seed", type=int, help="seed for the random input (default --seed)")
    f.add_argument("--input-shape", help="NxCxHxW for the random input")
    f.add_argument("--nodes", nargs="+", help="node outputs to dump (default: graph outputs)")
    f.add_argument("--out-dir", help="directory for <node>.t4f dumps")
    f.set_defaults(func=cmd_forward)

    lo = sub.add_parser("loss", help="evaluate box losses over a CSV of pairs")
    lo.add_argument("--boxes", required=True, help="CSV path, or - for stdin")
    lo.add_argument("--img-w", type=_positive(float), required=True)
    lo.add_argument("--img-h", type=_positive(float), required=True)
    lo.add_argument("--ratio", type=_ratio, default=1.0)
    lo.add_argument("--kind", choices=("inner-mpdiou", "iou", "ciou"), default="inner-mpdiou")
    lo.add_argument("--distances", choices=boxloss.DISTANCE_MODES, default="inner")
    lo.add_argument("--grad", action="store_true", help="append d loss / d (cx, cy, w, h)")
    lo.set_defaults(func=cmd_loss)

    gc = sub.add_parser("gradcheck", help="analytic vs finite-difference loss gradients")
    gc.add_argument("--samples", type=_non_negative_int, default=500)
    gc.add_argument("--eps", type=_positive(float), default=1e-4)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--distances", choices=boxloss.DISTANCE_MODES, default="inner")
    gc.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("prune", help="LAMP channel pruning to a target MAC speed-up")
    pr.add_argument("--graph", required=True)
    pr.add_argument("--weights")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--target-speedup", type=_speedup, required=True)
    pr.add_argument("--tolerance", type=_positive(float), default=0.02)
    pr.add_argument("--protect", nargs="+", help="node ids or conv names never to prune")
    pr.add_argument("--out-dir", required=True,
                    help="receives pruned-graph.json, pruned-weights.ldw and plan.json")
    pr.set_defaults(func=cmd_prune)

    c = sub.add_parser("compare", help="delta table between two cost-report JSON files")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--format", choices=("json", "table"), default="table")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, LitedetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
