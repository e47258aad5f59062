import argparse
import json
import logging
import sys
from typing import List, Optional

from app.commands import COMMANDS, cmd_oze
from app.config import LOG_LEVEL, load_config
from app.errors import EXIT_OK, RcmError
from app.grid import set_fft_workers
from app.metrics import metrics
from app.storage import write_metrics

logger = logging.getLogger("rcm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcm",
        description="Random connection model: simulation, Ornstein-Zernike solves and low-intensity expansions",
    )
    parser.add_argument("--config", help="INI config file with [model], [box], [run], [output] sections")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--threads", type=int, help="worker threads (overrides the config)")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="logging level (default from RCM_LOG_LEVEL)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pairconn", help="estimate the pair connectedness function")
    sub.add_parser("cluster-dist", help="estimate the cluster size distribution and mean")
    oze = sub.add_parser("oze", help="solve the Ornstein-Zernike equation for a given P")
    oze.add_argument("p_file", help="P as a binary grid (.bin), grid CSV, or pairconn table CSV")
    oze.add_argument("--zero-intensity", action="store_true", help="solve at t = 0 (Q = P)")
    sub.add_parser("expand", help="assemble the coefficients p_n, q_n and the truncated series")
    sub.add_parser("validate", help="run the acceptance suite")
    sub.add_parser("sample", help="write one sample as points and edges CSVs")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config).with_overrides(seed=args.seed, out=args.out, threads=args.threads)
        if args.command == "oze" and args.zero_intensity:
            config = config.model_copy(update={"run": config.run.model_copy(update={"zero_intensity": True})})
        set_fft_workers(config.run.threads)
        metrics.reset()

        if args.command == "oze":
            result = cmd_oze(config, args.p_file)
        else:
            result = COMMANDS[args.command](config)
        write_metrics(config.output.directory)
    except RcmError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        print(json.dumps(e.to_dict(), sort_keys=True, default=str), file=sys.stderr)
        return e.exit_code

    for path in result.get("files", []):
        logger.info(f"wrote {path}")
    return result.get("exit_code", EXIT_OK)


if __name__ == "__main__":
    sys.exit(main())
