"""Command-line entry point.

Exit codes:
    0   success
    1   internal error
    2   calibration infeasible (no threshold pair meets the detection target)
    3   server unreachable
    4   campaign plan infeasible
    64  usage error (bad flags, missing config section)
    65  invalid data (malformed config or parameter values)
    66  missing input (config file, params file, campaign outputs)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .audit_math import plan_campaign
from .calibration import AuditParams
from .errors import CalibrationInfeasible, Infeasible, ProbeError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INFEASIBLE = 2
EXIT_UNREACHABLE = 3
EXIT_PLAN_INFEASIBLE = 4
EXIT_USAGE = 64
EXIT_DATAERR = 65
EXIT_NOINPUT = 66

log = logging.getLogger("lddaudit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="run configuration JSON")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VAL",
                   help="override a config value; dotted keys reach nested sections")
    p.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    p.add_argument("--seed", type=int, help="override rng_seed")
    p.add_argument("--parallel", type=int, default=1, help="concurrent probe batches (1 is deterministic)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lddaudit", description="Commit-then-prove inference auditing.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ceremony", help="calibrate (t1, t2) on benign and attack corpora")
    _common(p)

    p = sub.add_parser("campaign", help="probe and audit a server, then decide ACCEPT or REJECT")
    _common(p)
    p.add_argument("--server", help="base URL of a running service; in process when omitted")
    p.add_argument("--params", type=Path, help="audit_params.json from a ceremony")

    p = sub.add_parser("report", help="plot-ready histograms and tail tables from campaign outputs")
    p.add_argument("inputs", nargs="+", type=Path, help="campaign output directories (benign first)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--bins", type=int, default=40)

    p = sub.add_parser("plan", help="audit count and reject threshold for a campaign")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--p-detect", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--fp", type=float, required=True)
    p.add_argument("--target", type=float, required=True, help="completeness target for false rejection")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("serve", help="run the HTTP service for the configured server")
    _common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return ap


def load_config(args):
    from .pipeline import RunConfig, with_overrides

    try:
        raw = json.loads(args.config.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ValueError(f"{args.config}: {e}") from e
    raw = with_overrides(raw, args.sets)
    if args.seed is not None:
        raw["rng_seed"] = args.seed
    camp = raw.get("campaign")
    if isinstance(camp, dict) and isinstance(camp.get("n_audits"), int) and camp["n_audits"] < 1:
        raise UsageError("campaign.n_audits must be at least 1")
    try:
        return RunConfig.from_dict(raw)
    except KeyError as e:
        raise UsageError(str(e).strip("'\"")) from e


def _out_dir(args, cfg) -> Path:
    return args.out if args.out is not None else Path(cfg.output_dir)


def cmd_ceremony(args) -> int:
    from .pipeline import ceremony, write_ceremony

    cfg = load_config(args)
    if cfg.ceremony is None:
        raise UsageError("config needs a 'ceremony' section with 'benign' and 'attack' deviations")
    result = ceremony(cfg)
    out = _out_dir(args, cfg)
    write_ceremony(out, result)
    p = result.params
    print(f"t1={p.t1!r} t2={p.t2!r} fp={p.estimated_fp:.3g} detection={p.estimated_detection:.3f} -> {out}")
    return EXIT_OK


def cmd_campaign(args) -> int:
    from dataclasses import replace

    from .pipeline import campaign, write_campaign
    from .protocol.auditor import HttpTransport

    cfg = load_config(args)
    if args.params is not None:
        cfg = replace(cfg, audit_params=AuditParams.from_dict(json.loads(args.params.read_text(encoding="utf-8"))))
    if cfg.audit_params is None:
        raise UsageError("no audit params: pass --params or set 'audit_params' in the config")
    if cfg.campaign is None:
        raise UsageError("config needs a 'campaign' section")
    transport = None
    if args.server:
        transport = HttpTransport(args.server)
        transport.health()
    days = campaign(cfg, transport, parallel=args.parallel)
    out = _out_dir(args, cfg)
    rep = write_campaign(out, cfg, days)
    for d in rep["days"]:
        print(f"day {d['day']}: {d['flags']} flags, {d['bottoms']} bottoms, k={rep['reject_threshold_k']} -> {d['decision']}")
    print(f"{rep['decision']} ({rep['reject_days']} reject days) -> {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import report

    for d in args.inputs:
        if not d.is_dir():
            raise FileNotFoundError(f"{d} is not a directory")
    for name in report(args.inputs, args.out, args.bins):
        print(args.out / name)
    return EXIT_OK


def cmd_plan(args) -> int:
    plan = plan_campaign(args.alpha, args.p_detect, args.eta, args.fp, args.target)
    text = plan.to_json()
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "plan.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .pipeline import build_server
    from .service import create_app

    cfg = load_config(args)
    uvicorn.run(create_app(build_server(cfg)), host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {"ceremony": cmd_ceremony, "campaign": cmd_campaign, "report": cmd_report, "plan": cmd_plan,
            "serve": cmd_serve}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"lddaudit: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CalibrationInfeasible as e:
        print(f"lddaudit: calibration infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ProbeError as e:
        print(f"lddaudit: server unreachable: {e}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except Infeasible as e:
        print(f"lddaudit: plan infeasible: {e}", file=sys.stderr)
        return EXIT_PLAN_INFEASIBLE
    except FileNotFoundError as e:
        print(f"lddaudit: missing input: {e}", file=sys.stderr)
        return EXIT_NOINPUT
    except (ValueError, TypeError) as e:
        print(f"lddaudit: invalid data: {e}", file=sys.stderr)
        return EXIT_DATAERR
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
