#!/usr/bin/env python3

import argparse
import atexit
import logging
import signal
import sys

from dcache.config import load_config
from dcache.exceptions import ConfigError, DCacheError
from ExperimentRunner import MODES, ExperimentRunner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTERNAL = 3
EXIT_INTERRUPTED = 130

# Runner whose temp files must be removed on exit
runner = None
_handlers_registered = False


def cleanup():
    global runner
    if runner is not None:
        runner.cleanup()
        runner = None


def signal_handler(sig, frame):
    print(f"\n[WARN] Received signal {sig}, shutting down...")
    cleanup()
    sys.exit(EXIT_INTERRUPTED)


def register_signal_handlers():
    global _handlers_registered
    if _handlers_registered:
        return
    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)
    # Register atexit handler as a fallback
    atexit.register(cleanup)
    _handlers_registered = True


def configure_logging(verbose=False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )


def build_parser():
    parser = argparse.ArgumentParser(
        description='Cached masked-diffusion inference: runs, comparisons and sweeps',
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='Log every denoising step')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Run one generation in baseline, cached or compare mode')
    run.add_argument('--config', required=True, help='Experiment JSON file')
    run.add_argument('--mode', choices=MODES, default='compare')
    run.add_argument('--out', default=None, help='Output directory (overrides output_dir)')
    run.add_argument('--trace', action='store_true', help='Write per-token similarity traces')
    run.set_defaults(func=run_command)

    sweep = sub.add_parser('sweep', help='Run every point of the config sweep grid')
    sweep.add_argument('--config', required=True, help='Experiment JSON file')
    sweep.add_argument('--out', default=None, help='Output directory (overrides output_dir)')
    sweep.add_argument('--jobs', type=int, default=1, help='Grid points run in parallel')
    sweep.set_defaults(func=sweep_command)
    return parser


def _guarded(body):
    """Run ``body`` and translate library errors into exit codes."""
    global runner
    try:
        body()
        return EXIT_OK
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DCacheError as e:
        logger.error("%s: %s", type(e).__name__, e)
        print(f"[ERROR] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except KeyboardInterrupt:
        print("\n[WARN] Interrupted")
        return EXIT_INTERRUPTED
    finally:
        cleanup()


def run_command(args):
    def body():
        global runner
        cfg = load_config(args.config)
        runner = ExperimentRunner(cfg, out_dir=args.out)
        runner.run(args.mode, trace=args.trace or cfg.trace)
    return _guarded(body)


def sweep_command(args):
    def body():
        global runner
        cfg = load_config(args.config)
        if cfg.sweep is None:
            raise ConfigError(f"{args.config} has no sweep section")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        runner = ExperimentRunner(cfg, out_dir=args.out, jobs=args.jobs)
        runner.sweep()
    return _guarded(body)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    register_signal_handlers()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
