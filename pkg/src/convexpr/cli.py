"""Command-line interface: ``convexpr analyze|eval|layer|bench``.

Exit codes: 0 success, 1 other errors (bad flags, bad JSON, invalid layer
descriptors), 2 expression parse errors, 3 shape errors, 4 numerical mismatch
between plans in ``eval --plan both``. Results go to stdout, diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from typing import Sequence

import numpy as np

from .cost import CostMode
from .errors import ConvExprError, ParseError, ShapeError
from .layers import (
    LayerKind,
    LayerSpec,
    expression,
    param_count,
    rank_count,
    rank_for_compression,
    resnet34_cp_blocks,
)
from .parser import ExpressionSpec, format_subscripts, parse
from .sequencer import EvaluationPlan, execute, left_to_right, optimal
from .tensor import DenseTensor, ShapeEnv, fill_random, splitmix64

__all__ = [
    "ANALYZE_SCHEMA",
    "BENCH_SCHEMA",
    "EVAL_SCHEMA",
    "LAYER_SCHEMA",
    "PLAN_SCHEMA",
    "main",
]

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_PARSE = 2
EXIT_SHAPE = 3
EXIT_MISMATCH = 4

DEFAULT_AXIS_LENGTH = 3

# ---------------------------------------------------------------------------
# JSON schemas of every --json output

_COUNT = {"type": "integer", "minimum": 0}
_DIMS = {"type": "array", "items": {"type": "integer", "minimum": 1}}

PLAN_SCHEMA = {
    "type": "object",
    "required": ["nodes", "total_cost", "peak_elems"],
    "additionalProperties": False,
    "properties": {
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["left", "right", "result", "cost"],
                "additionalProperties": False,
                "properties": {
                    "left": _COUNT,
                    "right": _COUNT,
                    "result": {"type": "string"},
                    "cost": _COUNT,
                },
            },
        },
        "total_cost": _COUNT,
        "peak_elems": _COUNT,
    },
}

_SHAPE_TABLE = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["input", "subscripts", "dims"],
        "additionalProperties": False,
        "properties": {"input": _COUNT, "subscripts": {"type": "string"}, "dims": _DIMS},
    },
}

_BOTH_MODES = {
    "type": "object",
    "required": ["inference", "training"],
    "additionalProperties": False,
    "properties": {"inference": _COUNT, "training": _COUNT},
}

ANALYZE_SCHEMA = {
    "type": "object",
    "required": [
        "expression",
        "shapes",
        "mode",
        "cost_mode",
        "optimal",
        "left_to_right",
        "costs",
        "speedup",
        "peak_elems",
    ],
    "additionalProperties": False,
    "properties": {
        "expression": {"type": "string"},
        "shapes": _SHAPE_TABLE,
        "mode": {"type": "object", "additionalProperties": {"enum": ["full", "same", "valid", "circular"]}},
        "cost_mode": {"enum": ["inference", "training"]},
        "optimal": PLAN_SCHEMA,
        "left_to_right": PLAN_SCHEMA,
        "costs": {
            "type": "object",
            "required": ["optimal", "left_to_right"],
            "additionalProperties": False,
            "properties": {"optimal": _BOTH_MODES, "left_to_right": _BOTH_MODES},
        },
        "speedup": {
            "type": "object",
            "required": ["inference", "training"],
            "additionalProperties": False,
            "properties": {
                "inference": {"type": "number", "minimum": 1},
                "training": {"type": "number", "minimum": 1},
            },
        },
        "peak_elems": {
            "type": "object",
            "required": ["optimal", "left_to_right"],
            "additionalProperties": False,
            "properties": {"optimal": _COUNT, "left_to_right": _COUNT},
        },
    },
}

_RUN = {
    "type": "object",
    "required": ["flops", "predicted", "peak_elems", "sum", "norm", "sha256"],
    "additionalProperties": False,
    "properties": {
        "flops": _COUNT,
        "predicted": _COUNT,
        "peak_elems": _COUNT,
        "sum": {"type": "number"},
        "norm": {"type": "number", "minimum": 0},
        "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
    },
}

EVAL_SCHEMA = {
    "type": "object",
    "required": ["expression", "shapes", "seed", "output_shape", "runs", "max_rel_deviation", "tolerance", "ok"],
    "additionalProperties": False,
    "properties": {
        "expression": {"type": "string"},
        "shapes": _SHAPE_TABLE,
        "seed": {"type": "integer"},
        "output_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "runs": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": False,
            "properties": {"optimal": _RUN, "left_to_right": _RUN},
        },
        "max_rel_deviation": {"type": ["number", "null"], "minimum": 0},
        "tolerance": {"type": "number", "minimum": 0},
        "ok": {"type": "boolean"},
        "out": {"type": "string"},
    },
}

LAYER_SCHEMA = {
    "type": "object",
    "required": ["kind", "expression", "shapes", "params", "original_params", "rank"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": [k.value for k in LayerKind]},
        "expression": {"type": "string"},
        "shapes": _SHAPE_TABLE,
        "params": _COUNT,
        "original_params": _COUNT,
        "rank": {"oneOf": [{"type": "null"}, {"type": "integer", "minimum": 1}, _DIMS]},
        "cr": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    },
}

BENCH_SCHEMA = {
    "type": "object",
    "required": ["suite", "batch", "cr", "rows"],
    "additionalProperties": False,
    "properties": {
        "suite": {"const": "resnet34-cp"},
        "batch": {"type": "integer", "minimum": 1},
        "cr": {"type": "number"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["layer", "S", "T", "H", "Hp", "rank", "left_to_right", "optimal", "speedup"],
                "additionalProperties": False,
                "properties": {
                    "layer": {"type": "string"},
                    "S": {"type": "integer"},
                    "T": {"type": "integer"},
                    "H": {"type": "integer"},
                    "Hp": {"type": "integer"},
                    "rank": {"type": "integer", "minimum": 1},
                    "left_to_right": _COUNT,
                    "optimal": _COUNT,
                    "speedup": {"type": "number"},
                },
            },
        },
    },
}


# ---------------------------------------------------------------------------
# helpers


class UsageError(ConvExprError):
    """Bad command-line usage or malformed JSON argument."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors, which is reserved for parse errors here.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def eng(value: float) -> str:
    """Compact scientific notation, e.g. ``3.87e13``."""
    mantissa, exponent = f"{value:.2e}".split("e")
    return f"{mantissa}e{int(exponent)}"


def _load_json(text: str, what: str):
    if text.startswith("@"):
        try:
            with open(text[1:]) as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read {what} file: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} is not valid JSON: {exc}") from None


def _parse_dims(text: str):
    obj = _load_json(text, "--shapes")
    dims = obj.get("dims") if isinstance(obj, dict) else obj
    if not isinstance(dims, list) or not all(isinstance(d, list) for d in dims):
        raise UsageError('--shapes must look like {"dims": [[...], ...]}')
    return dims


def _resolve_problem(args) -> tuple[ExpressionSpec, ShapeEnv]:
    if (args.expr is None) == (args.layer is None):
        raise UsageError("give exactly one of --expr or --layer")
    if args.layer is not None:
        if args.shapes is not None:
            raise UsageError("--shapes is derived from --layer and cannot be combined with it")
        return expression(LayerSpec.from_json(_load_json(args.layer, "--layer")))
    spec = parse(args.expr)
    if args.shapes is None:
        dims = [[DEFAULT_AXIS_LENGTH] * len(sub) for sub in spec.inputs]
    else:
        dims = _parse_dims(args.shapes)
    return spec, ShapeEnv.from_dims(spec, dims)


def _mode_arg(text: str):
    return None if text == "auto" else text


def _shape_table(env: ShapeEnv) -> list[dict]:
    return [
        {"input": i, "subscripts": format_subscripts(sub), "dims": list(dims)}
        for i, (sub, dims) in enumerate(zip(env.spec.inputs, env.dims))
    ]


def _print_shapes(env: ShapeEnv, out) -> None:
    for row in _shape_table(env):
        print(f"  [{row['input']}] {row['subscripts']:<24} {row['dims']}", file=out)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 1.0


def _print_plan(name: str, plan: EvaluationPlan, out) -> None:
    print(f"{name} plan {plan.encoding()}", file=out)
    n = plan.num_inputs
    for k, node in enumerate(plan.nodes):
        print(
            f"  #{n + k}: {node.left} * {node.right} -> {format_subscripts(node.result) or '(scalar)'}"
            f"  cost {node.cost.total} ({eng(node.cost.total)})",
            file=out,
        )


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(args, out) -> int:
    spec, env = _resolve_problem(args)
    mode = _mode_arg(args.mode)
    cost_mode = CostMode.parse(args.cost)
    plans = {}
    costs = {"optimal": {}, "left_to_right": {}}
    for cm in CostMode:
        opt = optimal(spec, env, mode, cm)
        ltr = left_to_right(spec, env, mode, cm)
        costs["optimal"][cm.value] = opt.total_cost
        costs["left_to_right"][cm.value] = ltr.total_cost
        if cm is cost_mode:
            plans = {"optimal": opt, "left_to_right": ltr}
    speedup = {cm.value: _ratio(costs["left_to_right"][cm.value], costs["optimal"][cm.value]) for cm in CostMode}
    report = {
        "expression": str(spec),
        "shapes": _shape_table(env),
        "mode": {a: m.value for a, m in sorted(plans["optimal"].modes.items())},
        "cost_mode": cost_mode.value,
        "optimal": plans["optimal"].to_json(),
        "left_to_right": plans["left_to_right"].to_json(),
        "costs": costs,
        "speedup": speedup,
        "peak_elems": {k: p.peak_elems for k, p in plans.items()},
    }
    if args.json:
        print(json.dumps(report, indent=2), file=out)
        return EXIT_OK
    print(f"expression  {report['expression']}", file=out)
    print("shapes", file=out)
    _print_shapes(env, out)
    if report["mode"]:
        print("modes       " + ", ".join(f"{a}={m}" for a, m in report["mode"].items()), file=out)
    _print_plan("optimal", plans["optimal"], out)
    _print_plan("left-to-right", plans["left_to_right"], out)
    print(f"{'cost':<12}{'optimal':>28}{'left-to-right':>28}{'speedup':>10}", file=out)
    for cm in CostMode:
        o, l = costs["optimal"][cm.value], costs["left_to_right"][cm.value]
        print(
            f"{cm.value:<12}{f'{o} ({eng(o)})':>28}{f'{l} ({eng(l)})':>28}{speedup[cm.value]:>10.2f}",
            file=out,
        )
    print(
        f"peak intermediate elements: optimal {report['peak_elems']['optimal']}, "
        f"left-to-right {report['peak_elems']['left_to_right']}",
        file=out,
    )
    return EXIT_OK


def _digest(t: DenseTensor) -> dict:
    return {
        "sum": float(np.sum(t.array)),
        "norm": float(np.linalg.norm(t.data)),
        "sha256": hashlib.sha256(t.to_bytes()).hexdigest(),
    }


def input_tensors(env: ShapeEnv, seed: int) -> list[DenseTensor]:
    """Seeded random inputs; input ``i`` uses the ``i``-th SplitMix64 output of ``seed`` as its seed."""
    seeds = splitmix64(seed, len(env.dims))
    return [fill_random(shape, int(s)) for shape, s in zip(env.dims, seeds)]


def max_rel_deviation(a: DenseTensor, ref: DenseTensor) -> float:
    """``max|a - ref| / max|ref|`` (absolute deviation when ``ref`` is all zeros)."""
    diff = float(np.max(np.abs(a.array - ref.array)))
    scale = float(np.max(np.abs(ref.array)))
    return diff / scale if scale > 0 else diff


def cmd_eval(args, out) -> int:
    spec, env = _resolve_problem(args)
    mode = _mode_arg(args.mode)
    planners = {"optimal": optimal, "left_to_right": left_to_right}
    chosen = {"optimal": ["optimal"], "ltr": ["left_to_right"], "both": ["optimal", "left_to_right"]}[args.plan]
    tensors = input_tensors(env, args.seed)
    runs, results = {}, {}
    for name in chosen:
        plan = planners[name](spec, env, mode)
        res = execute(plan, tensors)
        results[name] = res.tensor
        runs[name] = {
            "flops": res.flops,
            "predicted": plan.total_cost,
            "peak_elems": res.peak_elems,
            **_digest(res.tensor),
        }
    first = results[chosen[0]]
    deviation = max_rel_deviation(results["left_to_right"], results["optimal"]) if len(chosen) == 2 else None
    ok = deviation is None or deviation <= args.tol
    report = {
        "expression": str(spec),
        "shapes": _shape_table(env),
        "seed": args.seed,
        "output_shape": list(first.shape),
        "runs": runs,
        "max_rel_deviation": deviation,
        "tolerance": args.tol,
        "ok": ok,
    }
    if args.out:
        try:
            first.save(args.out)
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc}") from None
        report["out"] = args.out
    if args.json:
        print(json.dumps(report, indent=2), file=out)
    else:
        print(f"expression  {report['expression']}", file=out)
        print(f"output      shape {report['output_shape']}", file=out)
        for name, run in runs.items():
            print(
                f"{name:<14} multiplications {run['flops']} (predicted {run['predicted']}), "
                f"peak {run['peak_elems']}, sum {run['sum']:.12g}, sha256 {run['sha256'][:16]}",
                file=out,
            )
        if deviation is not None:
            print(f"max relative deviation {deviation:.3e} (tolerance {args.tol:g})", file=out)
        if args.out:
            print(f"wrote {args.out}", file=out)
    if not ok:
        print(f"error: plans disagree, deviation {deviation:.3e} exceeds {args.tol:g}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_layer(args, out) -> int:
    desc = _load_json(args.desc, "--desc")
    if not isinstance(desc, dict):
        raise UsageError("--desc must be a JSON object")
    kind = LayerKind.parse(args.kind)
    desc = dict(desc)
    if args.cr is not None and "rank" not in desc:
        m = len(desc["S"]) if isinstance(desc.get("S"), list) else 1
        if rank_count(kind, m):
            desc["rank"] = 1  # placeholder, replaced by the solved rank below
    layer = LayerSpec.from_json(desc, kind)
    rank = layer.rank
    if args.cr is not None:
        rank = rank_for_compression(layer, args.cr)
        layer = layer.with_rank(rank)
    spec, env = expression(layer)
    report = {
        "kind": layer.kind.value,
        "expression": str(spec),
        "shapes": _shape_table(env),
        "params": param_count(layer),
        "original_params": layer.T * layer.S * layer.H * layer.W,
        "rank": list(rank) if isinstance(rank, tuple) else rank,
    }
    if args.cr is not None:
        report["cr"] = args.cr
    if args.json:
        print(json.dumps(report, indent=2), file=out)
        return EXIT_OK
    print(f"kind        {report['kind']}", file=out)
    print(f"expression  {report['expression']}", file=out)
    print("shapes", file=out)
    _print_shapes(env, out)
    if rank is not None:
        print(f"rank        {report['rank']}", file=out)
    print(
        f"params      {report['params']} of {report['original_params']} "
        f"({report['params'] / report['original_params']:.4f})",
        file=out,
    )
    return EXIT_OK


def cmd_bench(args, out) -> int:
    if args.suite != "resnet34-cp":
        raise UsageError(f"unknown suite {args.suite!r} (available: resnet34-cp)")
    rows = []
    for layer in resnet34_cp_blocks(args.batch, args.cr):
        spec, env = expression(layer)
        naive = left_to_right(spec, env).total_cost
        best = optimal(spec, env).total_cost
        rows.append(
            {
                "layer": layer.name,
                "S": layer.S,
                "T": layer.T,
                "H": layer.H,
                "Hp": layer.Hp,
                "rank": layer.rank,
                "left_to_right": naive,
                "optimal": best,
                "speedup": naive / best,
            }
        )
    report = {"suite": args.suite, "batch": args.batch, "cr": args.cr, "rows": rows}
    if args.json:
        print(json.dumps(report, indent=2), file=out)
        return EXIT_OK
    print(f"suite {args.suite}, batch {args.batch}, cr {args.cr:g}", file=out)
    print(f"{'layer':<9}{'rank':>6}{'left-to-right':>32}{'optimal':>30}{'speedup':>10}", file=out)
    for row in rows:
        naive, best = row["left_to_right"], row["optimal"]
        print(
            f"{row['layer']:<9}{row['rank']:>6}{f'{naive} ({eng(naive)})':>32}"
            f"{f'{best} ({eng(best)})':>30}{row['speedup']:>10.2f}",
            file=out,
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text!r} must be positive")
    return value


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"{text!r} must be in (0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convexpr", description="Plan and evaluate conv_einsum expressions.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def problem_args(p):
        p.add_argument("--expr", help="conv_einsum string, e.g. 'bshw,tshw->bthw|hw'")
        p.add_argument("--layer", help="layer descriptor JSON (or @file) instead of --expr")
        p.add_argument(
            "--shapes",
            help='per-input dims, e.g. \'{"dims": [[2,3],[3,4]]}\' (default: every axis has length 3)',
        )
        p.add_argument("--mode", default="auto", choices=["auto", "same", "full", "valid", "circular"])
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("analyze", help="compare the optimal and left-to-right plans")
    problem_args(p)
    p.add_argument("--cost", default="inference", choices=["inference", "training"])
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="execute plans on seeded random inputs")
    problem_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plan", default="optimal", choices=["optimal", "ltr", "both"])
    p.add_argument("--out", help="write the output tensor (.json or binary)")
    p.add_argument("--tol", type=float, default=1e-8, help="maximum relative deviation for --plan both")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("layer", help="print a tensorized layer's expression and parameter count")
    p.add_argument("--kind", required=True)
    p.add_argument("--desc", required=True, help="layer descriptor JSON (or @file)")
    p.add_argument("--cr", type=_fraction, help="solve the rank for this compression rate")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_layer)

    p = sub.add_parser("bench", help="planning benchmark over a layer suite")
    p.add_argument("--suite", default="resnet34-cp")
    p.add_argument("--batch", type=_positive_int, default=128)
    p.add_argument("--cr", type=_fraction, default=1.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, out)
    except ParseError as exc:
        print(f"parse error: {exc.message} (at position {exc.position})", file=sys.stderr)
        if exc.source:
            print(exc.pointer(), file=sys.stderr)
        return EXIT_PARSE
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (ConvExprError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
