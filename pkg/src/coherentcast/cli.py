"""``coherentcast`` command line.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

import argparse
import logging
import os
import sys

from . import pipeline
from .config import HORIZONS, WEIGHT_MODES, RunConfig, load_config, write_config
from .errors import ConfigurationError, ContractViolation, DivergenceError, InvariantError, NumericalError

COMMANDS = {
    "ingest": pipeline.cmd_ingest,
    "train-base": pipeline.cmd_train_base,
    "forecast": pipeline.cmd_forecast,
    "train-reconciler": pipeline.cmd_train_reconciler,
    "evaluate": pipeline.cmd_evaluate,
    "sweep-activations": pipeline.cmd_sweep_activations,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="coherentcast", description="Coherent probabilistic hierarchical forecasts.")
    parser.add_argument("command", choices=list(COMMANDS) + ["synth"])
    parser.add_argument("--config", required=True, help="key = value config file (written by 'synth')")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--horizon", type=int, choices=HORIZONS)
    parser.add_argument("--weight-mode", choices=WEIGHT_MODES)
    parser.add_argument("--scenarios", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    return parser


def _synth(args):
    """Write bundled synthetic inputs next to the config and a config pointing at them."""
    from .synthetic import write_synthetic_inputs

    base = os.path.dirname(os.path.abspath(args.config))
    paths = write_synthetic_inputs(os.path.join(base, "data"))
    cfg = bundled_config(paths, args.out or os.path.join(base, "out"))
    write_config(cfg, args.config)
    print(f"wrote synthetic inputs to {os.path.join(base, 'data')} and config {args.config}")
    return 0


def bundled_config(paths, out_dir):
    """Settings for the 60-day synthetic set.

    Narrower networks and a short epoch cap keep the whole pipeline within a
    few minutes on one CPU core; every other setting keeps its default.
    """
    return RunConfig(sessions=paths["sessions"], weather=paths["weather"], holidays=paths["holidays"],
                     out_dir=out_dir, clock_start="2024-03-04", clock_end="2024-05-03",
                     lstm_hidden=32, picnn_hidden=20, max_epochs=15, patience=5, val_origin_stride=4, dcl_epochs=20)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "synth":
            return _synth(args)
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        cfg = load_config(args.config, {"seed": args.seed, "horizon": args.horizon, "out_dir": args.out,
                                        "scenarios": args.scenarios})
        if args.command == "train-reconciler":
            pipeline.cmd_train_reconciler(cfg, args.weight_mode)
        else:
            if args.weight_mode:
                cfg = cfg.replace(weight_mode=args.weight_mode)
            COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (DivergenceError, NumericalError, InvariantError, pipeline.ScenarioShapeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
