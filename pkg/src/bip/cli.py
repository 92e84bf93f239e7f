"""``bip`` command line: one subcommand per experiment method."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, set_value
from .experiments import collect_reports, run_experiment

SUBCOMMANDS = {
    "prior-samples": "prior_samples",
    "map": "map",
    "ensemble": "ensemble",
    "last-layer": "last_layer",
    "pcn": "pcn",
    "gpr": "gpr_baseline",
    "tails": "tails",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*SUBCOMMANDS, "report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "report",
                       help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="method seed (restart init and chain); the data seed is unaffected")
        p.add_argument("--output", type=Path, default=None, help="output directory")
        p.add_argument("--paper-scale", action="store_true",
                       help="full resolution and chain lengths (hours of compute)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        set_value(cfg, key.strip(), value)
    if args.seed is not None:
        cfg.optimizer.init_seed = args.seed
        cfg.pcn.chain_seed = args.seed
        cfg.tails.seed = args.seed
    if args.output is not None:
        cfg.output.dir = str(args.output)
    cfg.paper_scale = args.paper_scale
    return cfg.validate()


def _report(args) -> int:
    root = args.output or Path(load_config(args.config).output.dir if args.config else ".")
    rows = collect_reports(root)
    if not rows:
        print(f"no metrics.json found under {root}", file=sys.stderr)
        return 1
    cols = ["run", "problem", "prior", "method", "rel_l1_of_mean", "mean_rel_l1", "std_rel_l1"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.4f}" if isinstance(r.get(c), float) else str(r.get(c, ""))
                              for c in cols))
    text = "\n".join(lines) + "\n"
    (Path(root) / "report.csv").write_text(text)
    print("relative L1 errors in percent")
    print(text, end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return _report(args)
        cfg = _config(args)
        result = run_experiment(cfg, SUBCOMMANDS[args.command])
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"bip {args.command}: {exc}", file=sys.stderr)
        return 2
    summary = {"method": result.method, "prior": result.prior, "output": cfg.output.dir}
    if result.report is not None:
        summary["metrics_percent"] = result.report.as_dict()
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
