"""Command-line entry point ``degrad``.

Exit codes: 0 pass, 1 I/O, schema or usage error, 2 dominance violation
(or a failed demo check), 3 regime error (step size or topology outside
the range where the theory applies).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DegradError, DivergenceConditionError, StepSizeError
from ..topology import Topology, spectrum, topology_factor, topology_from_json, validate
from ..variants import Variant
from .config import MAX_SEED, ConfigError, load_config
from .demos import DEMOS, run_demo
from .experiment import dumps, run_experiment, run_sweep

__all__ = ["main", "EXIT_OK", "EXIT_ERROR", "EXIT_VIOLATION", "EXIT_REGIME"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VIOLATION = 2
EXIT_REGIME = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which collides with the
    # dominance-violation code; route them to exit code 1 instead
    def error(self, message: str):
        raise _UsageError(message)


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64 - 1], got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="degrad", description="Decentralized optimization bound checker.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp: argparse.ArgumentParser, config_required: bool = True) -> None:
        sp.add_argument("--config", required=config_required, metavar="PATH", help="JSON config file")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=_seed, metavar="U64", help="seed (overrides the config)")

    common(sub.add_parser("run", help="run one experiment and compare it with its bound"))
    common(sub.add_parser("sweep", help="run a parameter grid and write a summary CSV"))
    d = sub.add_parser("demo", help="run a curated reproduction")
    d.add_argument("name", choices=sorted(DEMOS), help="demo name")
    common(d, config_required=False)
    common(sub.add_parser("validate-topology", help="diagnose a weight matrix"))
    common(sub.add_parser("spectrum", help="eigenvalues and topology factors"))
    return p


def _err(msg: str) -> None:
    print(f"degrad: error: {msg}", file=sys.stderr)


def _cmd_run(args) -> int:
    exp = load_config(args.config, seed=args.seed)
    out = Path(args.out) if args.out else Path(exp.outputs.dir)
    try:
        res = run_experiment(exp)
    except (StepSizeError, DivergenceConditionError) as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / exp.outputs.bounds).write_text(dumps({"valid": False, "error": str(exc)}))
        _err(f"regime error: {exc}")
        return EXIT_REGIME
    res.write(out)
    cmp_ = res.comparison
    print(f"{cmp_.verdict.upper()}  tightness ratio {cmp_.tightness:.12g}  ({out})")
    return EXIT_OK if cmp_.passed else EXIT_VIOLATION


def _cmd_sweep(args) -> int:
    exp = load_config(args.config, seed=args.seed)
    out = Path(args.out) if args.out else Path(exp.outputs.dir)
    res = run_sweep(exp)
    out.mkdir(parents=True, exist_ok=True)
    path = out / exp.outputs.summary
    path.write_text(res.csv_text())
    print(f"{len(res.rows)} cells, {res.violations} violations ({path})")
    return EXIT_VIOLATION if res.violations else EXIT_OK


def _cmd_demo(args) -> int:
    res = run_demo(args.name, seed=0 if args.seed is None else args.seed)
    for line in res.lines():
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.name}.json").write_text(dumps(res.to_json()))
    return EXIT_OK if res.passed else EXIT_VIOLATION


def _read_topology(path: str, *, check: bool) -> Topology:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from None
    if isinstance(doc, dict) and "topology" in doc:
        doc = doc["topology"]
    return topology_from_json(doc, check=check)


def _write_json(args, name: str, payload: dict) -> None:
    text = dumps(payload)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


def _cmd_validate(args) -> int:
    rep = validate(_read_topology(args.config, check=False))
    payload = {
        "valid": rep.valid,
        "is_symmetric": rep.is_symmetric,
        "rows_sum_to_one": rep.rows_sum_to_one,
        "is_connected": rep.is_connected,
        "is_nonnegative": rep.is_nonnegative,
        "is_bipartite": rep.is_bipartite,
        "is_primitive": rep.is_primitive,
        "satisfies_eig_condition": rep.satisfies_eig_condition,
        "lambda_2": rep.lambda2,
        "lambda_N": rep.lambdaN,
        "messages": list(rep.messages),
    }
    _write_json(args, "validity.json", payload)
    return EXIT_OK if rep.valid else EXIT_REGIME


def _cmd_spectrum(args) -> int:
    topo = _read_topology(args.config, check=True)
    sp = spectrum(topo)
    payload: dict = {
        "n": topo.n_agents,
        "eigenvalues": np.asarray(sp.eigenvalues),
        "lambda_2": sp.lambda2,
        "lambda_N": sp.lambdaN,
        "spectral_gap": 1.0 - sp.lambda2 if topo.n_agents > 1 else None,
    }
    for v in (Variant.DGD, Variant.DIFFUSION_ATC):
        try:
            payload[f"Lambda_{v.value}"] = topology_factor(topo, v)
        except DegradError as exc:
            payload[f"Lambda_{v.value}"] = None
            payload.setdefault("notes", []).append(str(exc))
    _write_json(args, "spectrum.json", payload)
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "demo": _cmd_demo,
    "validate-topology": _cmd_validate,
    "spectrum": _cmd_spectrum,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, dispatch, and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        _err(str(exc))
        return EXIT_ERROR
    try:
        return _COMMANDS[args.command](args)
    except (StepSizeError, DivergenceConditionError) as exc:
        _err(f"regime error: {exc}")
        return EXIT_REGIME
    except (DegradError, OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
