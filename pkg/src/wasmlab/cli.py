"""Command-line entry point.

Exit codes are CI-oriented: 0 when the command's expectation holds, 1 when
an exploit outcome contradicts --expect or a differential run diverges, 2
for usage errors, rejected combinations, and unavailable backends.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .faults import (
    BadConfig,
    InstantiateFailed,
    LabFault,
    UnsupportedCombination,
)
from .host import diff_outcomes, instantiate, parse_script, run_script
from .layout import SCENARIOS, VARIANTS
from .linmem import HardeningConfig
from .scenarios import ScenarioState
from . import exploits, report, service

HARDENING_FLAGS = ("canaries", "checked_copy", "quarantine_and_zero",
                   "template_integrity", "boundary_validation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wasmlab",
        description="memory-corruption-to-web-exploit laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="execute a scripted call list")
    runp.add_argument("--script", required=True, type=Path)
    runp.add_argument("--backend", choices=("sim", "wasm"), default="sim")
    runp.add_argument("--module", type=Path, default=None)
    runp.add_argument("--golden-dir", type=Path, default=None,
                      help="snapshot directory (default: script's directory)")
    runp.add_argument("--update-golden", action="store_true",
                      help="write missing golden snapshots")

    exp = sub.add_parser("exploit", help="run one end-to-end chain")
    exp.add_argument("--scenario", required=True, choices=SCENARIOS)
    exp.add_argument("--vector", required=True, choices=VARIANTS)
    exp.add_argument("--harden", action="append", default=[],
                     choices=HARDENING_FLAGS, metavar="FLAG",
                     help="enable a hardening flag (repeatable)")
    exp.add_argument("--designated", action="store_true",
                     help="enable the pair's designated hardening flag")
    exp.add_argument("--expect", choices=("success", "fail"),
                     default="success")
    exp.add_argument("--backend", choices=("sim", "wasm"), default="sim")
    exp.add_argument("--module", type=Path, default=None)
    exp.add_argument("--out", type=Path, default=None,
                     help="write the JSON report to this path")

    srv = sub.add_parser("serve", help="run one configured HTTP frontend")
    srv.add_argument("--config", required=True, type=Path)
    srv.add_argument("--port", type=int, default=None)
    srv.add_argument("--host", default="127.0.0.1")

    cal = sub.add_parser("calibrate", help="measure the timing oracle")
    cal.add_argument("--vector", choices=("bof", "uaf"), default="bof")
    cal.add_argument("--samples", type=int, default=3)
    cal.add_argument("--amplification", type=int, default=exploits.RECON_B,
                     help="counter bound for the amplifier probes")
    cal.add_argument("--harden", action="append", default=[],
                     choices=HARDENING_FLAGS, metavar="FLAG")
    cal.add_argument("--backend", choices=("sim", "wasm"), default="sim")
    cal.add_argument("--module", type=Path, default=None)
    cal.add_argument("--out-dir", type=Path, default=None,
                     help="write table TSV, threshold JSON, and figure here")

    dif = sub.add_parser("diff", help="compare sim and wasm on one script")
    dif.add_argument("--script", required=True, type=Path)
    dif.add_argument("--module", type=Path, default=None)
    dif.add_argument("--golden-dir", type=Path, default=None)

    return parser


def _hardening_from_flags(flags) -> HardeningConfig:
    return HardeningConfig(**{name: True for name in flags})


def cmd_run(args) -> int:
    text = args.script.read_text(encoding="utf-8")
    config, ops = parse_script(text)
    base_dir = args.golden_dir or args.script.parent
    backend = instantiate(args.backend, config.scenario, config.hardening,
                          variant=config.variant, module_path=args.module)
    try:
        results = run_script(backend, ops, base_dir=base_dir,
                             update_golden=args.update_golden)
    finally:
        backend.close()
    ok = True
    for entry in results:
        print(entry)
        if entry.get("op") == "expect_snapshot" and not entry.get("match"):
            ok = False
    return 0 if ok else 1


def cmd_exploit(args) -> int:
    if args.harden:
        hardening = _hardening_from_flags(args.harden)
    elif args.designated:
        hardening = exploits.resolve_hardening(args.scenario, args.vector,
                                               True)
    else:
        hardening = HardeningConfig()
    rep = exploits.run_exploit(args.scenario, args.vector,
                               backend=args.backend,
                               module_path=args.module,
                               hardening=hardening)
    print(rep.to_json())
    if args.out is not None:
        report.write_json(args.out, rep)
    want_success = args.expect == "success"
    outcome = "success" if rep.success else "contained"
    matched = rep.success == want_success
    print(f"result: {outcome} (expected {args.expect}) -> "
          f"{'ok' if matched else 'MISMATCH'}")
    return 0 if matched else 1


def cmd_serve(args) -> int:
    service.serve(args.config, port=args.port, host=args.host)
    return 0


def cmd_calibrate(args) -> int:
    state = ScenarioState(
        "xsleak", args.vector,
        hardening=_hardening_from_flags(args.harden),
        backend_kind=args.backend, module_path=args.module)
    table = exploits.calibrate(state, samples=args.samples,
                               b=args.amplification)
    print(report.format_calibration_text(table))
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        report.write_tsv(args.out_dir / "calibration.tsv",
                         report.CALIBRATION_COLUMNS,
                         report.calibration_rows(table))
        report.write_json(args.out_dir / "calibration.json", {
            "b": table.b,
            "samples": table.samples,
            "threshold_steps": table.threshold_steps,
            "threshold_elapsed": table.threshold_elapsed,
            "ratio": table.ratio,
        })
        report.render_calibration(table, args.out_dir / "calibration.png")
        print(f"wrote {args.out_dir}/calibration.{{tsv,json,png}}")
    state.close()
    return 0


def cmd_diff(args) -> int:
    text = args.script.read_text(encoding="utf-8")
    base_dir = args.golden_dir or args.script.parent
    outcome = diff_outcomes(text, base_dir=base_dir,
                            module_path=args.module)
    print(f"scenario {outcome['scenario']}/{outcome['variant']} "
          f"ops {outcome['ops']} kinds {outcome['kinds']}")
    for mismatch in outcome["mismatches"]:
        print(f"mismatch at op {mismatch['index']}: {mismatch}")
    print(f"snapshots_equal {outcome['snapshots_equal']}")
    return 0 if outcome["identical"] else 1


COMMANDS = {
    "run": cmd_run,
    "exploit": cmd_exploit,
    "serve": cmd_serve,
    "calibrate": cmd_calibrate,
    "diff": cmd_diff,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UnsupportedCombination, BadConfig, InstantiateFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LabFault as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
