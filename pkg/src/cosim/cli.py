"""Command-line entry point: ``cosim validate|compile|run|assess|workflow``.

Exit codes: 0 success (all criteria pass), 1 diagnostics or failing
criteria, 2 execution error, 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from cosim import __version__
from cosim.errors import CosimError, IllegalTransition, PlanError, SchemaError
from cosim.schema import dump_json, load_json
from cosim.sysconfig import container_from_dict
from cosim.testrunner import (
    AssessmentConfig,
    CampaignPlan,
    assess_campaign,
    emit_report,
    format_summary,
    override_keys,
    run_frt_campaign,
)
from cosim.testspec import (
    STAGES,
    Stage,
    WorkflowState,
    advance_workflow,
    compile_experiment,
    experiment_to_dict,
    parse_experiment,
    parse_test_spec,
    validate_document,
    validate_experiment,
)

EXIT_OK, EXIT_FAIL, EXIT_ERROR, EXIT_USAGE = 0, 1, 2, 64
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("cosim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _key_value(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cosim", description="Holistic co-simulation test workflow.")
    p.add_argument("--version", action="version", version=f"cosim {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{validate,compile,run,assess,workflow}", parser_class=_Parser)

    v = sub.add_parser("validate", help="validate a configuration, test case, test spec or experiment document")
    v.add_argument("file")

    c = sub.add_parser("compile", help="compile a test specification against an RI into an experiment")
    c.add_argument("test_spec")
    c.add_argument("--ri", required=True, help="RI-SC document")
    c.add_argument("-o", "--out", required=True, help="experiment document to write")
    c.add_argument("--step", default="0.01", help="federate step size in seconds (default 0.01)")

    r = sub.add_parser("run", help="run a test campaign and write traces, plot data and a summary")
    r.add_argument("experiment")
    r.add_argument("--plan", required=True, help="campaign plan (sweep points, t0, seed)")
    r.add_argument("-o", "--out", required=True, help="output directory")
    r.add_argument("--seed", type=_seed, help="override the plan seed")
    r.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[],
                   metavar="KEY=VALUE", help=f"assessment override, one of {override_keys()}")
    r.add_argument("--param", dest="params", type=_key_value, action="append", default=[],
                   metavar="FED.PARAM=VALUE", help="federate parameter override, e.g. frt.k_q=0")
    r.add_argument("--workers", type=int, default=1, help="run sweep points in parallel processes")

    a = sub.add_parser("assess", help="re-evaluate verdicts from a stored campaign")
    a.add_argument("outdir")
    a.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[], metavar="KEY=VALUE")

    w = sub.add_parser("workflow", help="show or advance the test workflow state")
    w.add_argument("state_file")
    w.add_argument("event", nargs="?", choices=("proceed", "loop_back", "reset"))
    return p


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {path}")
    return p


def _overrides(pairs: Sequence[tuple[str, Any]]) -> dict:
    out = dict(pairs)
    unknown = sorted(set(out) - set(override_keys()))
    if unknown:
        raise UsageError(f"unknown --set keys {unknown}; known: {override_keys()}")
    return out


def _print_report(report) -> None:
    for line in report.lines():
        print(line)


def cmd_validate(args) -> int:
    try:
        doc = load_json(_existing(args.file))
    except json.JSONDecodeError as exc:
        print(f"ERROR {args.file}: not valid JSON: {exc}")
        return EXIT_FAIL
    report = validate_document(doc)
    _print_report(report)
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_compile(args) -> int:
    spec = parse_test_spec(load_json(_existing(args.test_spec)))
    ri = container_from_dict(load_json(_existing(args.ri)))
    exp = compile_experiment(spec, ri, step_size=args.step)
    dump_json(experiment_to_dict(exp), args.out)
    print(f"wrote {args.out}: {len(exp.scenario_plan['federates'])} federates, "
          f"{len(exp.scenario_plan['connections'])} connections")
    return EXIT_OK


def cmd_run(args) -> int:
    exp = parse_experiment(load_json(_existing(args.experiment)))
    report = validate_experiment(exp)
    if not report.ok:
        _print_report(report)
        return EXIT_FAIL
    plan = CampaignPlan.load(_existing(args.plan))
    if args.seed is not None:
        plan = CampaignPlan(plan.sweep, plan.t0, args.seed)
    overrides = _overrides(args.overrides)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    results = run_frt_campaign(exp, plan, params=dict(args.params), overrides=overrides, workers=args.workers)
    config = AssessmentConfig.from_experiment(exp.assessment, plan.t0, overrides)
    emit_report(results, args.out, config, plan, exp.scenario_plan)
    print(format_summary(results, config))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_assess(args) -> int:
    results, config = assess_campaign(_existing(args.outdir), _overrides(args.overrides))
    print(format_summary(results, config))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_workflow(args) -> int:
    path = Path(args.state_file)
    state = WorkflowState()
    if path.exists() and args.event != "reset":
        state = WorkflowState.from_dict(json.loads(path.read_text()))
    if args.event in ("proceed", "loop_back"):
        state = advance_workflow(state, args.event)
    if args.event is not None or not path.exists():
        dump_json(state.to_dict(), path)
    marks = " -> ".join(f"[{s.value}]" if s is state.stage else s.value for s in STAGES)
    print(f"stage {state.number}/{len(STAGES)}: {state.stage.value}")
    print(marks)
    if state.stage is Stage.PRE_ASSESSMENT:
        print("next: proceed to Evaluation, or loop_back to TestSpec for a re-run")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "compile": cmd_compile,
    "run": cmd_run,
    "assess": cmd_assess,
    "workflow": cmd_workflow,
}


def _configure_logging() -> None:
    level = os.environ.get("COSIM_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"COSIM_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        _configure_logging()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, PlanError, IllegalTransition) as exc:
        print(f"ERROR {exc}", file=sys.stderr)
        return EXIT_FAIL
    except CosimError as exc:
        # specification problems are diagnostics; anything raised while running is an execution error
        diags = getattr(exc, "diagnostics", None)
        if diags:
            for d in diags:
                print(d)
            return EXIT_FAIL
        if args.command in ("validate", "compile"):
            print(f"ERROR {exc}", file=sys.stderr)
            return EXIT_FAIL
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
