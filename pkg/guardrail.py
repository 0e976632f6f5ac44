# guardrail.py
"""Command-line entry point: `python guardrail.py <command> ...`."""
import sys
import shlex
import argparse
import logging

from bench import compare_reports, parse_bench_config, report_from_json, report_to_json, run_bench
from errors import ConfigError, EmptySummaryError, SpecViolationError
from interposer import create_interposer, run_until_signalled
from invariant_model import (DEFAULT_SLACK, DEFAULT_WINDOW_MS, parse_config, parse_traffic_log,
                             serialize_config, suggest_fuses, summarize_traffic)
from utils import load_config, parse_hostport, save_config, setup_logging

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVALID = 2


def cmd_check_config(args) -> int:
    try:
        parse_config(load_config(args.file))
    except SpecViolationError as e:
        for violation in e.violations:
            print(violation)
        return EXIT_INVALID
    except ConfigError as e:
        print(str(e))
        return EXIT_INVALID
    except OSError as e:
        logging.error(f"Cannot read {args.file}: {e}")
        return EXIT_ERROR
    print("ok")
    return EXIT_OK


def cmd_suggest(args) -> int:
    try:
        with open(args.source, "r", encoding="ascii") as f:
            records = parse_traffic_log(f)
    except (OSError, UnicodeDecodeError) as e:
        logging.error(f"Cannot read traffic log {args.source}: {e}")
        return EXIT_ERROR
    try:
        draft = suggest_fuses(summarize_traffic(records, args.window_ms), args.slack)
    except (EmptySummaryError, ValueError) as e:
        logging.error(str(e))
        return EXIT_INVALID
    sys.stdout.write(serialize_config(draft).decode("ascii") + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        spec = parse_config(load_config(args.config))
        listen = parse_hostport(args.listen)
        upstream = parse_hostport(args.upstream)
    except SpecViolationError as e:
        for violation in e.violations:
            logging.error(f"Invalid config: {violation}")
        return EXIT_INVALID
    except (ConfigError, ValueError) as e:
        logging.error(f"Invalid config: {e}")
        return EXIT_INVALID
    except OSError as e:
        logging.error(f"Cannot read {args.config}: {e}")
        return EXIT_ERROR

    interposer = create_interposer(
        spec, upstream,
        upstream_cmd=shlex.split(args.upstream_cmd) if args.upstream_cmd else None,
        rss_poll=args.rss_poll,
        usage_poll=not args.no_usage_poll,
        tick_ms=args.tick_ms,
        decision_log=args.decision_log,
        guard_log=args.guard_log,
        traffic_log=args.traffic_log,
    )
    try:
        return run_until_signalled(interposer, listen)
    except OSError as e:
        logging.error(f"Cannot listen on {args.listen}: {e}")
        interposer.stop()
        return EXIT_ERROR


def cmd_bench(args) -> int:
    if args.action:
        if len(args.action) != 3 or args.action[0] != "compare":
            logging.error("usage: guardrail bench compare <a.json> <b.json>")
            return EXIT_INVALID
        return _bench_compare(args.action[1], args.action[2], args.threshold)

    if not args.config or not args.out:
        logging.error("bench needs --config and --out")
        return EXIT_INVALID
    try:
        config = parse_bench_config(load_config(args.config))
    except ConfigError as e:
        logging.error(f"Invalid bench config: {e}")
        return EXIT_INVALID
    except OSError as e:
        logging.error(f"Cannot read {args.config}: {e}")
        return EXIT_ERROR

    bench = run_bench(config)
    try:
        save_config(args.out, report_to_json(bench))
    except OSError:
        return EXIT_ERROR
    logging.info(f"Report written to {args.out}")
    return EXIT_OK


def _bench_compare(path_a: str, path_b: str, threshold: float | None) -> int:
    try:
        a = report_from_json(load_config(path_a))
        b = report_from_json(load_config(path_b))
    except (ConfigError, OSError) as e:
        logging.error(f"Cannot load reports: {e}")
        return EXIT_ERROR
    preference, justification = compare_reports(a, b, a.threshold_s if threshold is None else threshold)
    print(preference.value)
    print(justification)
    return EXIT_OK


def cmd_faultsvc(args) -> int:
    import fault_service
    return fault_service.main(args.rest)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guardrail",
                                     description="Dependability middleware: fuses, cops and guards for a black-box upstream.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check-config", help="validate an invariant config")
    p.add_argument("file")
    p.set_defaults(func=cmd_check_config)

    p = sub.add_parser("suggest", help="draft input fuses from a traffic log")
    p.add_argument("--from", dest="source", required=True, help="traffic log written by run --traffic-log")
    p.add_argument("--slack", type=float, default=DEFAULT_SLACK)
    p.add_argument("--window-ms", type=int, default=DEFAULT_WINDOW_MS)
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("run", help="run the interposer")
    p.add_argument("--config", required=True)
    p.add_argument("--listen", required=True, help="host:port")
    p.add_argument("--upstream", required=True, help="host:port")
    p.add_argument("--decision-log")
    p.add_argument("--guard-log")
    p.add_argument("--traffic-log")
    p.add_argument("--upstream-cmd", help="command that starts the upstream; enables supervision")
    p.add_argument("--tick-ms", type=int, default=50, help="resource cop tick period")
    p.add_argument("--rss-poll", action="store_true", help="budget the supervised process's RSS")
    p.add_argument("--no-usage-poll", action="store_true", help="don't poll POST /ctl/usage")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run the predictability benchmark, or `bench compare a b`")
    p.add_argument("action", nargs="*")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, help="patience threshold for compare (default: a's)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("faultsvc", help="run the fault-injection fixture")
    p.add_argument("rest", nargs=argparse.REMAINDER)
    p.set_defaults(func=cmd_faultsvc)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    if getattr(args, "tick_ms", 1) <= 0:
        logging.error("--tick-ms must be > 0")
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
