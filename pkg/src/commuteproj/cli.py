"""Command line entry point: ``commuteproj <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from .cls import InfeasibleConstraints
from .harness import RUNNERS, ExperimentConfig, Report, write_csv
from .hcurl_proj import FeasibilityError

# config-file key -> (converter, ExperimentConfig attribute)
_KEYS = {
    "mesh": (str, "mesh"),
    "degree": (int, "degree"),
    "variant": (str, "variant"),
    "field": (str, "field"),
    "refine": (int, "refine"),
    "quad-degree": (int, "quad_degree"),
    "tol-feas": (float, "tol_feas"),
    "seed": (int, "seed"),
    "out": (str, "out"),
    "p-sweep": (None, "p_sweep"),
    "no-assert": (None, "check"),
    "samples": (int, "samples"),
}


def parse_sweep(text: str) -> tuple[int, int]:
    """``a..b`` (inclusive) or a single degree."""
    parts = text.split("..")
    try:
        a, b = (int(parts[0]), int(parts[-1])) if len(parts) in (1, 2) else (None, None)
    except ValueError:
        a = None
    if a is None or a < 0 or b < a:
        raise argparse.ArgumentTypeError(f"bad sweep {text!r}; expected a..b with 0 <= a <= b")
    return a, b


def _truthy(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Keys are the long flag names."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in _KEYS:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        conv, attr = _KEYS[key]
        if key == "p-sweep":
            out[attr] = parse_sweep(val)
        elif key == "no-assert":
            out[attr] = not _truthy(val)
        else:
            out[attr] = conv(val)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="commuteproj",
                                 description="Checks and experiments for local commuting projectors "
                                             "onto Nedelec and Raviart-Thomas spaces.")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "check-commute": "curl of the ND projection vs. RT projection of the curl",
        "check-project": "projectors reproduce random conforming fields",
        "convergence": "convergence rate of the global best approximation",
        "equivalence": "local-best vs. global-best ratios",
        "single-tet": "constrained vs. unconstrained best approximation on one element, p-sweep",
        "mixed": "divergence-free RT projection: KKT vs. three-field mixed system",
    }
    for name in RUNNERS:
        sp = sub.add_parser(name, help=helps[name])
        # defaults are None so that only flags actually given override the config file
        sp.add_argument("--config", help="plain-text file of 'key = value' lines")
        sp.add_argument("--mesh", help="mesh file or generator (reftet, cube-kuhn[:refined=k][:bc=D|N|mixed])")
        sp.add_argument("--degree", "-p", type=int)
        sp.add_argument("--variant", choices=["canonical", "alternative"])
        sp.add_argument("--field", help="field id (trig, trig-low, trig-bc, sin-y, sinxy, grad, const, poly:k)")
        sp.add_argument("--refine", type=int)
        sp.add_argument("--quad-degree", type=int, dest="quad_degree")
        sp.add_argument("--tol-feas", type=float, dest="tol_feas")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="CSV output path")
        sp.add_argument("--p-sweep", type=parse_sweep, dest="p_sweep", metavar="A..B")
        sp.add_argument("--no-assert", action="store_const", const=False, dest="check",
                        help="skip feasibility assertions")
        sp.add_argument("--samples", type=int)
        sp.add_argument("--quiet", "-q", action="store_true")
    return ap


def make_config(args) -> ExperimentConfig:
    kw = read_config(args.config) if args.config else {}
    for attr in [a for _, a in _KEYS.values()]:
        val = getattr(args, attr, None)
        if val is not None:
            kw[attr] = val
    return ExperimentConfig(**kw)


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return "" if v is None else str(v)


def print_report(rep: Report, stream=sys.stdout) -> None:
    if not rep.rows:
        return
    cols: list[str] = []
    for r in rep.rows:
        cols += [k for k in r if k not in cols and k != "seconds" and not k.endswith("_constraint")]
    table = [[_cell(r.get(c)) for c in cols] for r in rep.rows]
    width = [max(len(c), *(len(t[i]) for t in table)) for i, c in enumerate(cols)]
    print("  ".join(c.rjust(w) for c, w in zip(cols, width)), file=stream)
    for t in table:
        print("  ".join(x.rjust(w) for x, w in zip(t, width)), file=stream)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = make_config(args)
    except (ValueError, TypeError) as exc:
        print(f"commuteproj: {exc}", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            rep = RUNNERS[args.command](cfg)
    except (FeasibilityError, InfeasibleConstraints) as exc:
        print(f"{args.command}: FAIL: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"commuteproj: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        print_report(rep)
    if cfg.out:
        write_csv(rep.rows, cfg.out)
    print(f"{rep.name}: {rep.status()}" + (f" ({rep.message})" if rep.message else ""))
    return 1 if rep.passed is False else 0


if __name__ == "__main__":
    sys.exit(main())
