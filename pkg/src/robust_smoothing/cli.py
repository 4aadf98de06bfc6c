"""``robust-smoothing`` command line.

Exit codes: 0 success, 2 invalid configuration, 3 file-system error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from .harness import ConfigError, load_config, run_experiment
from .iterative_smoothers import SMOOTHER_NAMES

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

log = logging.getLogger("robust_smoothing")


def _config_path(name: str) -> Path:
    """A path on disk, or the name of a bundled config such as ``ct_constant``."""
    p = Path(name)
    if p.exists() or p.suffix:
        return p
    bundled = resources.files("robust_smoothing") / "configs" / f"{name}.yaml"
    return Path(str(bundled))


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robust-smoothing", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte-Carlo experiment")
    run.add_argument("--config", required=True, help="YAML file or bundled config name")
    run.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    run.add_argument("--seed", type=int, help="base seed override")
    run.add_argument("--trials", type=int, help="trial count override")
    run.add_argument("--workers", type=int, help="worker processes, 0 = all cores")

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("--config", required=True)

    sub.add_parser("list-smoothers", help="print the available smoother variants")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list-smoothers":
        print("\n".join(SMOOTHER_NAMES))
        return EXIT_OK
    try:
        cfg = load_config(_config_path(args.config))
        if args.command == "validate":
            print(f"{args.config}: ok ({cfg.trials} trials, smoothers: {', '.join(cfg.smoother_names)})")
            return EXIT_OK
        cfg = cfg.with_overrides(seed=args.seed, trials=args.trials, workers=args.workers, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        rows = run_experiment(cfg)
    except OSError as exc:
        print(f"cannot write results: {exc}", file=sys.stderr)
        return EXIT_IO
    last = {}
    for r in rows:
        last[r["smoother"]] = r
    for name, r in last.items():
        print(f"{name:10s} final rmse {r['rmse_mean']:.4g} (se {r['rmse_se']:.2g})  "
              f"nees {r['nees_mean']:.4g}  diverged {r['diverged_fraction']:.2f}")
    print(f"results written to {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
