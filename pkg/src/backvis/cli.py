"""Command line entry point: ``backvis <experiment-id> --config <file>``."""
import argparse
import sys

from .experiments import REGISTRY, ConfigError, load_config, make_config, run


def build_parser():
    p = argparse.ArgumentParser(
        prog="backvis",
        description="Run a visualization experiment and write metrics.csv, images and a manifest.",
        epilog="experiments: " + ", ".join(REGISTRY))
    p.add_argument("experiment", nargs="?", help="experiment id")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output directory (default: $BACKVIS_OUT or ./backvis-out)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--list", action="store_true", help="list experiments and their knobs")
    return p


def _list():
    for name, exp in REGISTRY.items():
        print(f"{name}: {exp.summary}")
        print(f"    knobs: {', '.join(sorted(exp.knobs))}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.list:
        _list()
        return 0
    if not args.experiment:
        print("backvis: an experiment id is required (see --list)", file=sys.stderr)
        return 2
    try:
        if args.config:
            cfg = load_config(args.experiment, args.config, args.out, args.seed)
        else:
            cfg = make_config(args.experiment, {}, args.out, args.seed)
        result = run(cfg)
    except (ConfigError, OSError) as exc:
        print(f"backvis: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(result.rows)} metric rows and {len(result.files)} images to {result.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
