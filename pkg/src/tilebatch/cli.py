"""Command line front end.

    tilebatch plan SPEC.json
    tilebatch run SPEC.json --verify [--ordering ...] [--bucket-mode ...] [--exec ...]
    tilebatch cost SPEC.json [--profile h20|h800|profile.json]
    tilebatch scenarios [SPEC.json] [--profile ...]

Exit codes: 0 success, 1 verification failure, 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from tilebatch import cost_model
from tilebatch.dispatch import POLICIES, SEQUENTIAL, launch
from tilebatch.errors import TileBatchError, VerificationFailure
from tilebatch.executor import gemm_registry, integer_data, run_and_verify, run_and_verify_batch
from tilebatch.moe_planner import (
    BUCKET_MODES,
    DEFAULT_SMALL_MAX_M,
    NATURAL,
    ORDERINGS,
    SCENARIOS,
    STABLE,
    RoutingTable,
    build_moe_batch,
    scenario_routing,
    threshold_rule,
)
from tilebatch.task_model import Batch, StrategyCatalog, TilingStrategy, default_catalog
from tilebatch.tile_prefix import PADDINGS, REPEAT_LAST, build_nonempty_tile_prefix

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_INPUT = 2

_STRATEGIES = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["id", "tile_m", "tile_n"],
        "properties": {
            "id": {"type": "integer", "minimum": 1},
            "tile_m": {"type": "integer", "minimum": 1},
            "tile_n": {"type": "integer", "minimum": 1},
        },
        "additionalProperties": False,
    },
}

_COMMON = {
    "warp_size": {"type": "integer", "enum": [1, 2, 4, 8, 16, 32, 64]},
    "padding": {"enum": list(PADDINGS)},
    "strategies": _STRATEGIES,
}

GENERIC_SCHEMA = {
    "type": "object",
    "required": ["tasks", "strategies"],
    "properties": {
        **_COMMON,
        "tasks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind", "m", "n", "k"],
                "properties": {
                    "kind": {"type": "integer", "minimum": 1},
                    "m": {"type": "integer", "minimum": 0},
                    "n": {"type": "integer", "minimum": 1},
                    "k": {"type": "integer", "minimum": 1},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}

MOE_SCHEMA = {
    "type": "object",
    "properties": {
        **_COMMON,
        "num_tokens": {"type": "integer", "minimum": 0},
        "num_experts": {"type": "integer", "minimum": 1},
        "top_k": {"type": "integer", "minimum": 1},
        "weight_shape": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "minItems": 2,
            "maxItems": 2,
        },
        "small_max_m": {"type": "integer", "minimum": 0},
        "routing": {
            "oneOf": [
                {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
                {
                    "type": "object",
                    "required": ["scenario"],
                    "properties": {
                        "scenario": {"enum": list(SCENARIOS)},
                        "seed": {"type": "integer"},
                    },
                    "additionalProperties": False,
                    "if": {"properties": {"scenario": {"const": "random"}}},
                    "then": {"required": ["scenario", "seed"]},
                },
            ]
        },
        "gates": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "data": {
            "type": "object",
            "required": ["weights", "tokens"],
            "properties": {
                "weights": {"type": "string"},
                "tokens": {"type": "string"},
                "dtype": {"enum": ["float64", "float32"]},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

# Defaults of an MoE spec: the 4096-token, 64-expert, top-8 configuration.
MOE_DEFAULTS = {
    "num_tokens": 4096,
    "num_experts": 64,
    "top_k": 8,
    "weight_shape": [3584, 2560],
    "routing": {"scenario": "balanced"},
}


class InputError(Exception):
    pass


def load_spec(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text()
        spec = json.loads(text)
    except OSError as exc:
        raise InputError(f"cannot read spec: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"spec is not valid JSON: {exc}") from None
    if not isinstance(spec, dict):
        raise InputError("spec must be a JSON object")
    return spec


def is_generic(spec: dict) -> bool:
    return "tasks" in spec


def validate(spec: dict) -> dict:
    """Schema-check ``spec`` and fill MoE defaults."""
    schema = GENERIC_SCHEMA if is_generic(spec) else MOE_SCHEMA
    try:
        jsonschema.validate(spec, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"spec invalid at {where}: {exc.message}") from None
    if is_generic(spec):
        return spec
    spec = {**MOE_DEFAULTS, **spec}
    if spec["top_k"] > spec["num_experts"]:
        raise InputError(f"top_k={spec['top_k']} exceeds num_experts={spec['num_experts']}")
    return spec


def _catalog(spec: dict) -> StrategyCatalog:
    if "strategies" not in spec:
        return default_catalog()
    return StrategyCatalog(TilingStrategy(s["id"], s["tile_m"], s["tile_n"]) for s in spec["strategies"])


def _generic_batch(spec: dict) -> Batch:
    shapes = [(t["kind"], t["m"], t["n"], t["k"]) for t in spec["tasks"]]
    return Batch.from_shapes(shapes, _catalog(spec), spec.get("warp_size", 32))


def _routing(spec: dict) -> RoutingTable:
    r = spec["routing"]
    if isinstance(r, list):
        return RoutingTable(spec["num_tokens"], spec["num_experts"], spec["top_k"], r, spec.get("gates"))
    routing = scenario_routing(r["scenario"], spec["num_tokens"], spec["num_experts"], spec["top_k"], r.get("seed"))
    if "gates" in spec:
        routing = RoutingTable(routing.num_tokens, routing.num_experts, routing.top_k, routing.choices, spec["gates"])
    return routing


def _moe_data(spec: dict, seed: int):
    k, n = spec["weight_shape"]
    if "data" not in spec:
        return integer_data(spec["num_tokens"], spec["num_experts"], (k, n), seed)
    d = spec["data"]
    dtype = np.dtype(d.get("dtype", "float64"))

    def read(path, shape):
        arr = np.load(path) if path.endswith(".npy") else np.fromfile(path, dtype=dtype)
        if arr.size != int(np.prod(shape)):
            raise InputError(f"{path}: expected {int(np.prod(shape))} elements, found {arr.size}")
        return arr.reshape(shape).astype(np.float64)

    try:
        tokens = read(d["tokens"], (spec["num_tokens"], k))
        weights = read(d["weights"], (spec["num_experts"], k, n))
    except OSError as exc:
        raise InputError(f"cannot read data file: {exc}") from None
    return tokens, weights


def _plan_moe(spec: dict, ordering: str, bucket_mode: str, seed: int, data=None):
    catalog = _catalog(spec)
    weights, tokens = (None, None) if data is None else (data[1], data[0])
    return build_moe_batch(
        _routing(spec),
        tuple(spec["weight_shape"]),
        weights,
        tokens,
        catalog,
        ordering,
        bucket_mode=bucket_mode,
        select=threshold_rule(catalog, spec.get("small_max_m", DEFAULT_SMALL_MAX_M)),
        warp_size=spec.get("warp_size", 32),
        padding=spec.get("padding", REPEAT_LAST),
        seed=seed,
    )


def _emit(payload: dict, out: Optional[str]) -> None:
    text = json.dumps({"schema_version": SCHEMA_VERSION, **payload}, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_plan(args) -> int:
    spec = validate(load_spec(args.spec))
    if is_generic(spec):
        batch = _generic_batch(spec)
        prefix, sigma = build_nonempty_tile_prefix(
            batch.tasks, batch.catalog, batch.warp_size, spec.get("padding", REPEAT_LAST)
        )
        counts = batch.tile_counts()
        payload = {
            "kind": "generic",
            "num_tasks": len(batch),
            "num_nonempty": prefix.logical_len,
            "tasks": [
                {"task": t.index, "kind": t.kind, "m": t.gemm_shape.m, "n": t.gemm_shape.n,
                 "k": t.gemm_shape.k, "tiles": c}
                for t, c in zip(batch.tasks, counts)
            ],
            "prefix": prefix.to_json(),
            "sigma": sigma.to_json(),
        }
    else:
        plan = _plan_moe(spec, args.ordering, args.bucket_mode, args.seed)
        payload = {"kind": "moe", "ordering": args.ordering, "bucket_mode": args.bucket_mode, **plan.to_json()}
    _emit(payload, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    spec = validate(load_spec(args.spec))
    failure = None
    if is_generic(spec):
        batch = _generic_batch(spec)
        if args.verify:
            try:
                report = run_and_verify_batch(batch, args.seed, args.exec)
            except VerificationFailure as exc:
                failure, report = exc, exc.report
            trace = report.trace
        else:
            trace = launch(batch, gemm_registry(batch.catalog), args.exec)
            report = None
    else:
        tokens, weights = _moe_data(spec, args.seed)
        if args.verify:
            try:
                report = run_and_verify(
                    _routing(spec), weights, tokens, _catalog(spec),
                    ordering=args.ordering, bucket_mode=args.bucket_mode, policy=args.exec,
                    warp_size=spec.get("warp_size", 32), seed=args.seed,
                )
            except VerificationFailure as exc:
                failure, report = exc, exc.report
            trace = report.trace
        else:
            plan = _plan_moe(spec, args.ordering, args.bucket_mode, args.seed, (tokens, weights))
            trace = launch(plan.batch, gemm_registry(plan.batch.catalog), args.exec,
                           prefix=plan.prefix, sigma=plan.sigma)
            report = None
    if args.trace_csv and trace is not None:
        Path(args.trace_csv).write_text(trace.to_csv())
    payload = {
        "kind": "generic" if is_generic(spec) else "moe",
        "trace": trace.to_json() if trace is not None else None,
        "verification": report.to_json() if report is not None else None,
    }
    _emit(payload, args.out)
    if failure is not None:
        print(f"verification failed: {failure}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _dry_trace(spec: dict, ordering: str, bucket_mode: str, seed: int):
    if is_generic(spec):
        batch = _generic_batch(spec)
        return launch(batch, gemm_registry(batch.catalog))
    plan = _plan_moe(spec, ordering, bucket_mode, seed)
    return launch(plan.batch, gemm_registry(plan.batch.catalog), prefix=plan.prefix, sigma=plan.sigma)


def cmd_cost(args) -> int:
    spec = validate(load_spec(args.spec))
    profile = cost_model.load_profile(args.profile)
    report = cost_model.estimate(_dry_trace(spec, args.ordering, args.bucket_mode, args.seed), profile)
    if args.csv:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["wave", "blocks", "compute_time", "memory_time", "bound"])
        for i, w in enumerate(report.waves):
            writer.writerow([i, w.blocks, w.compute_time, w.memory_time, w.bound])
        Path(args.csv).write_text(buf.getvalue())
    _emit({"profile": profile.to_json(), "cost": report.to_json()}, args.out)
    return EXIT_OK


def cmd_scenarios(args) -> int:
    spec = load_spec(args.spec)
    if is_generic(spec):
        raise InputError("scenarios needs an MoE spec")
    spec = validate(spec)
    profile = cost_model.load_profile(args.profile)
    reports = cost_model.scenario_compare(
        profile,
        ("best", "balanced", "worst"),
        num_tokens=spec["num_tokens"],
        num_experts=spec["num_experts"],
        top_k=spec["top_k"],
        weight_shape=tuple(spec["weight_shape"]),
        catalog=_catalog(spec),
        ordering=args.ordering,
    )
    rows = [
        {"case": name, "tflops": r.tflops, "peak_percent": 100.0 * r.peak_fraction, "total_time": r.total_time}
        for name, r in reports.items()
    ]
    if args.csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        Path(args.csv).write_text(buf.getvalue())
    if args.table:
        print(f"{'case':<10}{'TFLOPS':>10}{'peak%':>9}")
        for r in rows:
            print(f"{r['case']:<10}{r['tflops']:>10.2f}{r['peak_percent']:>9.2f}")
    else:
        _emit({"profile": profile.to_json(), "ordering": args.ordering, "scenarios": rows}, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilebatch", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, spec_optional=False):
        if spec_optional:
            p.add_argument("spec", nargs="?", help="workload spec JSON (default: built-in MoE config)")
        else:
            p.add_argument("spec", help="workload spec JSON ('-' for stdin)")
        p.add_argument("--ordering", choices=ORDERINGS, default=NATURAL)
        p.add_argument("--bucket-mode", choices=BUCKET_MODES, default=STABLE)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="write JSON report here instead of stdout")

    p = sub.add_parser("plan", help="build the tile prefix, injection and expert order")
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="execute the batch on the CPU reference executor")
    common(p)
    p.add_argument("--verify", action="store_true", help="compare against the naive per-expert loop")
    p.add_argument("--exec", choices=POLICIES, default=SEQUENTIAL)
    p.add_argument("--trace-csv", help="also write the block trace as CSV")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cost", help="estimate run time with the wave cost model")
    common(p)
    p.add_argument("--profile", help=f"h20, h800 or a profile JSON (default: ${cost_model.PROFILE_ENV} or h800)")
    p.add_argument("--csv", help="write per-wave breakdown as CSV")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("scenarios", help="compare best / balanced / worst routing")
    common(p, spec_optional=True)
    p.add_argument("--profile", help=f"h20, h800 or a profile JSON (default: ${cost_model.PROFILE_ENV} or h800)")
    p.add_argument("--csv", help="write the comparison table as CSV")
    p.add_argument("--table", action="store_true", help="print a text table instead of JSON")
    p.set_defaults(func=cmd_scenarios, ordering="half_interval")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, TileBatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
