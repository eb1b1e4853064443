"""Command-line experiment runner.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Flag values
override values from ``--config``; unknown config keys are a usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import _kernels
from .attention import AttentionStack, WeightLoadError, init_random, load_weights
from .diagnostics import (
    DEFAULTS,
    DEFAULT_DELTA2,
    DEFAULT_LENGTHS,
    DEFAULT_SHIFTS,
    SweepRow,
    length_sweep,
    shift_sweep,
    sweep_json,
    write_csv,
)
from .masks import (
    LayoutError,
    MaskScheme,
    compile_plan,
    full_causal_pairs,
    interleave_chunks,
    pack_documents,
    read_layout_request,
    render_ascii,
)
from .precision import POLICIES

SUBCOMMANDS = ("shift-sweep", "per-token", "length-sweep", "mask", "cost", "pack", "interleave", "selftest")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _policy_list(text: str) -> list:
    names = [v.strip() for v in str(text).split(",") if v.strip()]
    for n in names:
        if n not in POLICIES:
            raise argparse.ArgumentTypeError(f"unknown policy {n!r}; choose from {', '.join(POLICIES)}")
    return names


def _scheme(text: str) -> str:
    try:
        return MaskScheme.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _common(p: argparse.ArgumentParser, model: bool = True):
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--out", help="output path (default: standard output)")
    p.add_argument("--config", help="JSON file with default values for these flags")
    p.add_argument("--threads", type=int, help="upper bound on worker threads; never changes results")
    if model:
        p.add_argument("--policy", type=_policy_list, help="exact, f32, fa2-bf16 or a comma list (default fa2-bf16)")
        p.add_argument("--layers", type=int, help=f"attention layers (default {DEFAULTS['layers']})")
        p.add_argument("--heads", type=int, help=f"heads per layer (default {DEFAULTS['heads']})")
        p.add_argument("--d-model", dest="d_model", type=int, help=f"model width (default {DEFAULTS['d_model']})")
        p.add_argument("-T", "--seq-len", dest="seq_len", type=int, help=f"sequence length (default {DEFAULTS['seq_len']})")
        p.add_argument("--num-sequences", type=int, help=f"inputs averaged per point (default {DEFAULTS['num_sequences']})")
        p.add_argument("--base", type=float, help="rotary base (default 10000)")
        p.add_argument("--weights", help="load W_Q/W_K from a tensor container instead of random init")


_MODEL_DEFAULTS = {
    "seed": 0, "out": None, "threads": None, "policy": ["fa2-bf16"], "base": 10000.0, "weights": None,
    "layers": DEFAULTS["layers"], "heads": DEFAULTS["heads"], "d_model": DEFAULTS["d_model"],
    "seq_len": DEFAULTS["seq_len"], "num_sequences": DEFAULTS["num_sequences"],
}
_PLAIN_DEFAULTS = {"seed": 0, "out": None, "threads": None}

SUB_DEFAULTS = {
    "shift-sweep": {**_MODEL_DEFAULTS, "deltas": list(DEFAULT_SHIFTS), "delta2": DEFAULT_DELTA2, "json": None},
    "per-token": {**_MODEL_DEFAULTS, "delta1": 0, "delta2": DEFAULT_DELTA2, "json": None},
    "length-sweep": {**_MODEL_DEFAULTS, "lengths": list(DEFAULT_LENGTHS), "max_T": max(DEFAULT_LENGTHS),
                     "delta1": 0, "delta2": DEFAULT_DELTA2},
    "mask": {**_PLAIN_DEFAULTS, "layout": None, "scheme": None, "render": False, "max_chunks": 4},
    "cost": {**_PLAIN_DEFAULTS, "layout": None, "lengths": None, "seq_len": None, "schemes": None,
             "max_chunks": 4},
    "pack": {**_PLAIN_DEFAULTS, "lengths": None, "seq_len": None, "scheme": "anchor", "max_chunks": 4},
    "interleave": {**_PLAIN_DEFAULTS, "lengths": None, "max_chunks": 4, "anchor": False},
    "selftest": {**_PLAIN_DEFAULTS, "cases": 500},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ropelab", description="RoPE precision lab and attention mask compiler")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    kw = {"argument_default": argparse.SUPPRESS}

    p = sub.add_parser("shift-sweep", help="mean D for each first shift, second shift fixed", **kw)
    _common(p)
    p.add_argument("--deltas", type=_int_list, help="first shifts (default: the 19-point list ending at 2000)")
    p.add_argument("--delta2", type=int, help=f"fixed second shift (default {DEFAULT_DELTA2})")
    p.add_argument("--json", help="also write a JSON mirror with per-token vectors")

    p = sub.add_parser("per-token", help="per key-column decomposition of D", **kw)
    _common(p)
    p.add_argument("--delta1", type=int, help="first shift (default 0)")
    p.add_argument("--delta2", type=int, help=f"second shift (default {DEFAULT_DELTA2})")
    p.add_argument("--json", help="also write the vector as JSON")

    p = sub.add_parser("length-sweep", help="mean first-key logit difference per sequence length", **kw)
    _common(p)
    p.add_argument("--lengths", type=_int_list, help="sequence lengths (default 64..8192, doubling)")
    p.add_argument("--max-T", dest="max_T", type=int, help="drop lengths above this (default 8192)")
    p.add_argument("--delta1", type=int, help="first shift (default 0)")
    p.add_argument("--delta2", type=int, help=f"second shift (default {DEFAULT_DELTA2})")

    p = sub.add_parser("mask", help="compile a layout request into attention plans (JSON)", **kw)
    _common(p, model=False)
    p.add_argument("--layout", help="layout request JSON: window, docs, scheme, seed")
    p.add_argument("--scheme", type=_scheme, help="override the request's scheme")
    p.add_argument("--render", action="store_true", help="print an ASCII picture of each mask to stderr")
    p.add_argument("--max-chunks", type=int, help="chunks per document for interleaved schemes (default 4)")

    p = sub.add_parser("cost", help="attended pairs and ratio to full causal, per scheme", **kw)
    _common(p, model=False)
    p.add_argument("--layout", help="layout request JSON (its scheme is ignored)")
    p.add_argument("--lengths", type=_int_list, help="document lengths, used with -T")
    p.add_argument("-T", "--seq-len", dest="seq_len", type=int, help="window size")
    p.add_argument("--schemes", help="comma list of schemes (default: all)")
    p.add_argument("--max-chunks", type=int, help="chunks per document for interleaved schemes (default 4)")

    p = sub.add_parser("pack", help="pack document lengths into windows (layout JSON)", **kw)
    _common(p, model=False)
    p.add_argument("--lengths", type=_int_list, help="document lengths")
    p.add_argument("-T", "--seq-len", dest="seq_len", type=int, help="window size")
    p.add_argument("--scheme", type=_scheme, help="scheme that decides anchor/tag insertion (default anchor)")
    p.add_argument("--max-chunks", type=int, help="chunks per document for interleaved schemes (default 4)")

    p = sub.add_parser("interleave", help="split and randomly merge documents (layout JSON)", **kw)
    _common(p, model=False)
    p.add_argument("--lengths", type=_int_list, help="document lengths")
    p.add_argument("--max-chunks", type=int, help="maximum chunks per document (default 4)")
    p.add_argument("--anchor", action="store_true", help="put a shared anchor in front")

    p = sub.add_parser("selftest", help="exhaustive bf16 codec check and mask enumeration oracle", **kw)
    _common(p, model=False)
    p.add_argument("--cases", type=int, help="random layouts per scheme (default 500)")
    return parser


def resolve(command: str, given: dict) -> dict:
    """Built-in defaults < config file < explicit flags."""
    defaults = SUB_DEFAULTS[command]
    config = {}
    path = given.pop("config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in raw.items():
            norm = key.replace("-", "_")
            if norm not in defaults:
                raise UsageError(f"unknown config key {key!r} for {command}")
            config[norm] = value
        if isinstance(config.get("policy"), str):
            config["policy"] = _policy_list(config["policy"])
        for key in ("deltas", "lengths"):
            if isinstance(config.get(key), str):
                config[key] = _int_list(config[key])
    return {**defaults, **config, **given}


def _emit(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _stack(o: dict) -> AttentionStack:
    if o["weights"]:
        return load_weights(o["weights"], base=o["base"])
    return init_random(o["layers"], o["heads"], o["d_model"], o["seed"], base=o["base"])


def cmd_shift_sweep(o: dict) -> int:
    stack = _stack(o)
    rows, mirrors = [], []
    for name in o["policy"]:
        result = shift_sweep(stack, o["deltas"], o["delta2"], name, o["num_sequences"], o["seq_len"], o["seed"])
        rows.extend(result.rows)
        mirrors.append(json.loads(sweep_json(result)))
        top = max(r.value for r in result.rows)
        print(f"{name}: max D = {top!r} over {len(result.rows)} shifts", file=sys.stderr)
    _emit(write_csv(rows), o["out"])
    if o["json"]:
        _emit(json.dumps(mirrors, sort_keys=True), o["json"])
    return 0


def cmd_per_token(o: dict) -> int:
    stack = _stack(o)
    rows, mirror = [], {}
    for name in o["policy"]:
        result = shift_sweep(stack, [o["delta1"]], o["delta2"], name, o["num_sequences"], o["seq_len"], o["seed"])
        vector = result.per_token[o["delta1"]]
        mirror[name] = vector.tolist()
        rows.extend(
            SweepRow(o["delta1"], o["delta2"], o["seq_len"], name, o["seed"], f"per_token:{j}", float(v))
            for j, v in enumerate(vector)
        )
    _emit(write_csv(rows), o["out"])
    if o["json"]:
        _emit(json.dumps(mirror, sort_keys=True), o["json"])
    return 0


def cmd_length_sweep(o: dict) -> int:
    stack = _stack(o)
    lengths = [t for t in o["lengths"] if t <= o["max_T"]]
    if not lengths:
        raise UsageError("no lengths left after --max-T")
    rows = []
    for name in o["policy"]:
        result = length_sweep(stack, lengths, o["delta1"], o["delta2"], name, o["num_sequences"], o["seed"])
        rows.extend(result.rows)
        trend = "increasing" if result.monotone_increasing else "not monotone"
        print(f"{name}: D_logit {trend} over {len(lengths)} lengths", file=sys.stderr)
    _emit(write_csv(rows), o["out"])
    return 0


def _request(o: dict):
    if not o["layout"]:
        raise UsageError("--layout is required")
    try:
        return read_layout_request(o["layout"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad layout request: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_mask(o: dict) -> int:
    req = _request(o)
    scheme = MaskScheme.parse(o["scheme"] or req.scheme)
    layouts = pack_documents(req.lengths, req.window, scheme, doc_ids=req.doc_ids,
                             domains=req.domains, max_chunks=o["max_chunks"], seed=req.seed)
    plans = [compile_plan(layout, scheme) for layout in layouts]
    if o["render"]:
        for k, plan in enumerate(plans):
            print(f"window {k} ({scheme.value}, T={plan.T}, pairs={plan.pair_count})", file=sys.stderr)
            print(render_ascii(plan), file=sys.stderr)
    _emit(json.dumps([p.to_json() for p in plans]) + "\n", o["out"])
    return 0


def cmd_cost(o: dict) -> int:
    if o["layout"]:
        req = _request(o)
        lengths, window, ids, seed = req.lengths, req.window, req.doc_ids, req.seed
    else:
        if not o["lengths"] or not o["seq_len"]:
            raise UsageError("give --layout, or --lengths together with -T")
        lengths, window, ids, seed = o["lengths"], o["seq_len"], None, o["seed"]
    if o["schemes"]:
        try:
            schemes = [MaskScheme.parse(s) for s in str(o["schemes"]).split(",") if s.strip()]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        schemes = list(MaskScheme)
    lines = ["scheme,windows,tokens,pair_count,full_causal_pairs,ratio"]
    for scheme in schemes:
        layouts = pack_documents(lengths, window, scheme, doc_ids=ids, max_chunks=o["max_chunks"], seed=seed)
        pairs = sum(compile_plan(l, scheme).pair_count for l in layouts)
        full = sum(full_causal_pairs(l.T) for l in layouts)
        tokens = sum(l.T for l in layouts)
        ratio = pairs / full if full else 1.0
        lines.append(f"{scheme.value},{len(layouts)},{tokens},{pairs},{full},{ratio!r}")
    _emit("\n".join(lines) + "\n", o["out"])
    return 0


def cmd_pack(o: dict) -> int:
    if not o["lengths"] or not o["seq_len"]:
        raise UsageError("pack needs --lengths and -T")
    layouts = pack_documents(o["lengths"], o["seq_len"], o["scheme"], max_chunks=o["max_chunks"], seed=o["seed"])
    _emit(json.dumps([l.to_json() for l in layouts]) + "\n", o["out"])
    return 0


def cmd_interleave(o: dict) -> int:
    if not o["lengths"]:
        raise UsageError("interleave needs --lengths")
    layout = interleave_chunks(o["lengths"], o["max_chunks"], o["seed"], anchor=o["anchor"])
    _emit(json.dumps(layout.to_json()) + "\n", o["out"])
    return 0


def cmd_selftest(o: dict) -> int:
    from .selftest import run_all

    results = run_all(o["cases"], o["seed"])
    lines = [f"{'PASS' if ok else 'FAIL'} {msg}" for ok, msg in results]
    _emit("\n".join(lines) + "\n", o["out"])
    return 0 if all(ok for ok, _ in results) else 1


COMMANDS = {
    "shift-sweep": cmd_shift_sweep,
    "per-token": cmd_per_token,
    "length-sweep": cmd_length_sweep,
    "mask": cmd_mask,
    "cost": cmd_cost,
    "pack": cmd_pack,
    "interleave": cmd_interleave,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    given = vars(ns)
    command = given.pop("command")
    try:
        options = resolve(command, given)
    except (UsageError, argparse.ArgumentTypeError) as exc:
        print(f"ropelab {command}: error: {exc}", file=sys.stderr)
        return 2
    _kernels.set_threads(options.get("threads"))
    try:
        return COMMANDS[command](options)
    except UsageError as exc:
        print(f"ropelab {command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, OverflowError, LayoutError, WeightLoadError) as exc:
        print(f"ropelab {command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
