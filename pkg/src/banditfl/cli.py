"""Command-line entry point.

    banditfl run [config.ini] [--key=value ...]
    banditfl plot-data <run_dir>
    banditfl verify

Every config key can be overridden from the command line as --key=value;
`run` without a config file uses the built-in defaults.
"""

from __future__ import annotations

import argparse
import sys

from .config import parse_config
from .errors import ConfigError, RecordParseError
from .runner import emit_plot_data, run_experiment, run_verification


def _split_overrides(extra: list[str]) -> dict[str, str]:
    overrides = {}
    for token in extra:
        if token.startswith("--") and "=" in token:
            key, _, value = token[2:].partition("=")
            overrides[key.replace("-", "_")] = value
        else:
            raise ConfigError(f"unrecognized argument {token!r}; overrides look like --key=value")
    return overrides


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="banditfl",
        description="Deterministic federated-learning experiments with fair weight allocation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="run an experiment grid from a config file")
    run_parser.add_argument("config", nargs="?", default=None, help="INI config (defaults if omitted)")

    plot_parser = sub.add_parser("plot-data", help="flatten a run's records into long-format CSV")
    plot_parser.add_argument("run_dir")

    sub.add_parser("verify", help="run the allocator/estimator verification suites")

    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(path=args.config, overrides=_split_overrides(extra))
            results = run_experiment(cfg, report=print)
            failed = [r for r in results if r.status != "ok"]
            print(f"summary: {cfg.output_dir}/summary.csv ({len(results)} cells, {len(failed)} failed)")
            return 1 if failed else 0
        if extra:
            raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "plot-data":
            print(emit_plot_data(args.run_dir))
            return 0
        return 0 if run_verification() else 1
    except (ConfigError, RecordParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
