"""Command-line entry point.

Exit status: 0 on success, 1 on usage or input errors, 2 when the request
does not fit (``Infeasible`` / ``CapacityExceeded``), 3 when ``verify``
finds a deviation above tolerance. Errors are reported on stderr as one JSON
object per line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import re
import sys

from . import memory, planner, report, roofline
from .errors import CapacityExceeded, HeadOffloadError, Infeasible
from .roofline import Phase
from .runtime import Mode, run_prefill, verify_equivalence
from .workload import GIB, TABLE_POLICIES, Policy, PolicyKind, get_model, get_profile

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 1, 2, 3

DEFAULT_VERIFY_POLICIES = "standard,chunked,layer,head:1,head:2"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_TOKENS = re.compile(r"^\s*(\d+)\s*([kKmM]?)\s*$")
_BYTES = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*GiB\s*$")


def tokens(text: str) -> int:
    """``'10K' -> 10240``, ``'1M' -> 1048576``, ``'512' -> 512``."""
    match = _TOKENS.match(text)
    if not match:
        raise argparse.ArgumentTypeError(f"expected a token count like 512, 10K or 1M, got {text!r}")
    scale = {"": 1, "k": 1024, "m": 1024 ** 2}[match.group(2).lower()]
    return int(match.group(1)) * scale


def gib(text: str) -> int:
    """``'24GiB' -> 24 * 2**30`` bytes; the suffix is required."""
    match = _BYTES.match(text)
    if not match:
        raise argparse.ArgumentTypeError(f"expected a size like 24GiB, got {text!r}")
    return round(float(match.group(1)) * GIB)


def policies(text: str) -> list[Policy]:
    if text.strip().lower() == "all":
        return list(TABLE_POLICIES)
    try:
        return [Policy.parse(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="headoffload", description="KV-cache offload analysis and simulation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, hw_default="profile-a", model_default="llama3-8b"):
        p.add_argument("--model", default=model_default, help="builtin name or JSON path")
        p.add_argument("--hw", default=hw_default, help="hardware profile name or JSON path")
        p.add_argument("--gpu", type=gib, help="override device capacity, e.g. 24GiB")
        p.add_argument("--cpu", type=gib, help="override host capacity, e.g. 512GiB")
        p.add_argument("--format", choices=report.FORMATS, default="table")

    p = sub.add_parser("memory", help="on-device memory per policy")
    common(p)
    p.add_argument("--policy", type=policies, default="all")
    p.add_argument("--context", type=tokens, required=True)
    p.add_argument("--chunk", type=tokens, help="prefill chunk (default: planner choice)")
    p.add_argument("--groups", type=int, help="head-groups per layer for head-offload policies")
    p.add_argument("--reserve", type=gib, default=planner.DEFAULT_RESERVE,
                   help="device headroom used to resolve the adaptive policy")

    p = sub.add_parser("roofline", help="per-layer attention roofline table")
    common(p)
    p.add_argument("--context", type=tokens, action="append",
                   help="context length (repeatable; default 1K, 10K, 100K)")

    p = sub.add_parser("maxlen", help="largest context that fits")
    common(p)
    p.add_argument("--policy", type=policies, default="all")
    p.add_argument("--chunk", type=tokens, help="prefill chunk (default: planner choice)")
    p.add_argument("--groups", type=int)
    p.add_argument("--reserve", type=gib, default=0)

    p = sub.add_parser("simulate", help="run the offload pipeline on the simulated clock")
    common(p)
    p.add_argument("--policy", type=policies, default="headinfer")
    p.add_argument("--context", type=tokens, required=True)
    p.add_argument("--chunk", type=tokens)
    p.add_argument("--groups", type=int)
    p.add_argument("--steps", type=int, default=1, help="decode steps after prefill")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.SIMULATED.value)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-layer-prefetch", action="store_true",
                   help="do not prefetch across layer boundaries")
    p.add_argument("--reserve", type=gib, default=planner.DEFAULT_RESERVE)
    p.add_argument("--trace", help="write the timeline event array (JSON) to this file")

    p = sub.add_parser("plan", help="choose chunk size and head groups")
    common(p)
    p.add_argument("--context", type=tokens, required=True)
    p.add_argument("--reserve", type=gib, default=planner.DEFAULT_RESERVE)

    p = sub.add_parser("verify", help="check numeric equivalence against the resident baseline")
    common(p, hw_default="toy", model_default="toy")
    p.add_argument("--policy", type=policies, default=DEFAULT_VERIFY_POLICIES)
    p.add_argument("--context", type=tokens, default=64)
    p.add_argument("--chunk", type=tokens, default=16)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.SIMULATED.value)
    p.add_argument("--fault", action="store_true", help="corrupt one cached value (negative control)")
    return parser


# -- helpers ---------------------------------------------------------------


def _hardware(args):
    hw = get_profile(args.hw)
    changes = {}
    if args.gpu is not None:
        changes["device_capacity"] = args.gpu
    if args.cpu is not None:
        changes["host_capacity"] = args.cpu
    return dataclasses.replace(hw, **changes).validate() if changes else hw


def _apply_groups(policy: Policy, m, groups: int | None) -> Policy:
    if groups is None or policy.kind is not PolicyKind.HEAD_OFFLOAD:
        return policy
    if groups < 1 or m.num_kv_heads % groups:
        raise UsageError(f"--groups must divide the {m.num_kv_heads} kv-heads, got {groups}")
    return Policy.head_offload(m.num_kv_heads // groups)


def _policy_list(args, m, hw, S):
    out = []
    for pol in args.policy:
        if pol.kind is PolicyKind.ADAPTIVE:
            # maxlen has no context to plan for: finest granularity reaches furthest
            pol = (Policy.head_offload(1) if S is None
                   else planner.resolve_policy(pol, m, hw, S, args.reserve))
        pol = _apply_groups(pol, m, getattr(args, "groups", None))
        pol.validate(m)
        out.append(pol)
    return out


def _chunk(args, m, hw, S):
    return args.chunk if args.chunk is not None else planner.select_chunk(m, hw, S)


# -- commands --------------------------------------------------------------


def cmd_memory(args) -> str:
    m, hw = get_model(args.model), _hardware(args)
    S = args.context
    chunk = _chunk(args, m, hw, S)
    rows = [memory.footprint(m, hw, p, S, chunk).row() for p in _policy_list(args, m, hw, S)]
    return report.emit_rows(rows, memory.REPORT_COLUMNS, args.format)


def cmd_roofline(args) -> str:
    m, hw = get_model(args.model), _hardware(args)
    contexts = tuple(args.context) if args.context else roofline.TABLE_CONTEXTS
    rows = roofline.roofline_table(m, hw, contexts)
    if args.format != "table":
        return report.emit_rows(rows, roofline.TABLE_COLUMNS, args.format)
    fmt = {c: report.si for c in ("ops", "memory", "flops", "offload_memory", "offload_flops")}
    fmt["ai"] = fmt["offload_ai"] = report.si
    text = report.emit_rows(rows, roofline.TABLE_COLUMNS, "table", fmt)
    return text + f"\nturning point (prefill, offloaded): {roofline.turning_point(m, hw)} tokens\n"


def cmd_maxlen(args) -> str:
    m, hw = get_model(args.model), _hardware(args)
    chunk = _chunk(args, m, hw, None)
    rows = []
    for pol in _policy_list(args, m, hw, None):
        s = memory.max_context(m, hw, pol, chunk if pol.chunked else None, args.reserve)
        nxt = memory.footprint(m, hw, pol, s + 1, chunk)
        host_bound = nxt.total_on_device + args.reserve <= hw.device_capacity
        rows.append({"policy": pol.label, "chunk": chunk if pol.chunked else s,
                     "max_context": s, "bound": "host" if host_bound else "device"})
    return report.emit_rows(rows, ("policy", "chunk", "max_context", "bound"), args.format)


def cmd_simulate(args) -> str:
    m, hw = get_model(args.model), _hardware(args)
    S = args.context
    pols = _policy_list(args, m, hw, S)
    if len(pols) != 1:
        raise UsageError("simulate takes exactly one policy")
    pol = pols[0]
    chunk = _chunk(args, m, hw, S)
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    rt, pre = run_prefill(m, hw, pol, S, chunk, args.mode, args.seed, args.steps,
                          cross_layer_prefetch=not args.per_layer_prefetch)
    _, dec = rt.decode(args.steps)
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write(json.dumps({"prefill": pre.events(), "decode": dec.events()}))
    record = {
        "model": m.name,
        "hardware": hw.name,
        "policy": pol.label,
        "context": S,
        "chunk": chunk if pol.chunked else S,
        "mode": args.mode,
        "numeric": rt.numeric,
        "prefill_makespan_s": pre.makespan,
        "prefill_overlap": pre.overlap_fraction,
        "prefill_model_s": roofline.phase_time(m, hw, Phase.PREFILL, pol, S, chunk),
        "decode_steps": args.steps,
        "decode_per_token_s": dec.makespan / args.steps if args.steps else 0.0,
        "decode_overlap": dec.overlap_fraction,
        "decode_model_s": roofline.phase_time(m, hw, Phase.DECODE, pol, S),
        "peak_device_gib": rt.device.peak / GIB,
        "host_kv_gib": rt.host_kv_bytes() / GIB,
    }
    return report.emit_record(record, args.format)


def cmd_plan(args) -> str:
    m, hw = get_model(args.model), _hardware(args)
    return report.emit_record(planner.plan(m, hw, args.context, args.reserve).to_dict(), args.format)


def cmd_verify(args) -> tuple[str, int]:
    m, hw = get_model(args.model), _hardware(args)
    pols = _policy_list(args, m, hw, args.context)
    rep = verify_equivalence(m, args.context, args.chunk, pols, args.seed, args.steps, hw,
                             args.mode, inject_fault=args.fault)
    if args.format == "table":
        width = max(len(k) for k in rep.deviations)
        text = "".join(f"{k.ljust(width)}  {v:.3e}\n" for k, v in rep.deviations.items())
        text += rep.line() + "\n"
    else:
        rows = [{"policy": k, "max_abs_deviation": v, "pass": v <= rep.tolerance}
                for k, v in rep.deviations.items()]
        text = report.emit_rows(rows, ("policy", "max_abs_deviation", "pass"), args.format)
    return text, EXIT_OK if rep.passed else EXIT_VERIFY


COMMANDS = {"memory": cmd_memory, "roofline": cmd_roofline, "maxlen": cmd_maxlen,
            "simulate": cmd_simulate, "plan": cmd_plan, "verify": cmd_verify}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), EXIT_USAGE)
    except (Infeasible, CapacityExceeded) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INFEASIBLE)
    except (HeadOffloadError, ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_USAGE)
    text, code = result if isinstance(result, tuple) else (result, EXIT_OK)
    sys.stdout.write(text)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
