#!/usr/bin/env python3
"""
Command line interface for ganaug experiments

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv

from data_ingest import synth_benchmark
from harness import ExperimentRunner, evaluate_checkpoints, read_summary
from utils.errors import ConfigError, GanAugError
from utils.logger import logger
from utils.validators import REGIMES, SynthConfig, apply_overrides, load_experiment_config
from version import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as ConfigError instead of exiting"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_args(parser: argparse.ArgumentParser, required: bool = True):
    parser.add_argument('--config', type=Path, required=required, help='TOML experiment config')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config key, e.g. --set gan.epochs=30 (repeatable)')


def build_parser() -> argparse.ArgumentParser:
    parser = CliArgumentParser(prog='ganaug', description='GAN-balanced binary image classification')
    parser.add_argument('--version', action='version', version=f'ganaug {__version__}')
    subparsers = parser.add_subparsers(dest='command', metavar='command')

    synth = subparsers.add_parser('synth', help='Write the synthetic blob benchmark')
    synth.add_argument('--out', type=Path, required=True, help='Output directory')
    synth.add_argument('--seed', type=int, default=None, help='Seed (default: config seed or 0)')
    _add_config_args(synth, required=False)

    for name, help_text in (('ingest', 'Load manifests, write the split manifests and balance report'),
                            ('train-gan', 'Train the translation GANs the configured regimes need'),
                            ('augment', 'Build the augmented training sets')):
        sub = subparsers.add_parser(name, help=help_text)
        _add_config_args(sub)
        sub.add_argument('--regime', action='append', choices=REGIMES, help='Restrict to these regimes')

    train_clf = subparsers.add_parser('train-clf', help='Train the classifier for each regime')
    _add_config_args(train_clf)
    train_clf.add_argument('--regime', action='append', choices=REGIMES, help='Restrict to these regimes')

    evaluate = subparsers.add_parser('eval', help='Evaluate classifiers on the validation set')
    _add_config_args(evaluate, required=False)
    evaluate.add_argument('--checkpoint', action='append', default=[], metavar='REGIME=PATH',
                          help='Classifier checkpoint to evaluate (repeatable, without --config)')
    evaluate.add_argument('--manifest', type=Path, help='Validation manifest (without --config)')
    evaluate.add_argument('--out', type=Path, help='Output directory (without --config)')
    evaluate.add_argument('--threshold', type=float, default=0.5)

    run = subparsers.add_parser('run', help='Run the full experiment')
    _add_config_args(run)
    run.add_argument('--resume', action='store_true', help='Skip stages that already completed')

    report = subparsers.add_parser('report', help='Print the comparison of a finished experiment')
    report.add_argument('--dir', type=Path, help='Experiment directory')
    _add_config_args(report, required=False)

    return parser


def _load_config(args, extra: Optional[List[str]] = None):
    overrides = list(args.overrides) + (extra or [])
    return load_experiment_config(args.config, overrides)


def _regime_overrides(args) -> List[str]:
    regimes = getattr(args, 'regime', None)
    return [f"regimes={json.dumps(sorted(set(regimes)))}"] if regimes else []


def _run_until(args, until: str, resume: bool = True) -> int:
    config = _load_config(args, _regime_overrides(args))
    summary = ExperimentRunner(config, resume=resume).run(until)
    print(f"{until} done: {config.output_dir}")
    if until == "report":
        _print_summary(summary)
    return EXIT_OK


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _print_summary(summary: Dict):
    for regime, values in summary.get("regimes", {}).items():
        print(f"{regime}: roc_auc={_fmt(values['roc_auc'])} pr_auc={_fmt(values['pr_auc'])} "
              f"recall@{values['threshold']}={_fmt(values['recall_at_threshold'])} "
              f"balance_ratio={values['balance_ratio']}")


def cmd_synth(args) -> int:
    if args.config is not None:
        config = _load_config(args)
        synth = config.data.synth or SynthConfig()
        seed = config.seed if args.seed is None else args.seed
    else:
        try:
            synth = SynthConfig.model_validate(apply_overrides({}, args.overrides))
        except ValueError as e:
            raise ConfigError(f"Invalid synth override: {e}") from e
        seed = args.seed or 0
    manifest = synth_benchmark(synth, seed, args.out)
    print(f"wrote {manifest.n} images to {args.out} (split counts {manifest.split_counts})")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.config is not None:
        return _run_until(args, "evaluate")
    if not args.checkpoint or args.manifest is None or args.out is None:
        raise ConfigError("eval needs --config, or --checkpoint REGIME=PATH with --manifest and --out")
    checkpoints = {}
    for item in args.checkpoint:
        if "=" not in item:
            raise ConfigError(f"--checkpoint '{item}' must look like REGIME=PATH")
        regime, path = item.split("=", 1)
        checkpoints[regime.strip()] = Path(path)
    metrics, out_dir = evaluate_checkpoints(checkpoints, args.manifest, args.out, threshold=args.threshold)
    for regime, values in metrics.items():
        print(f"{regime}: roc_auc={_fmt(values['roc_auc'])} pr_auc={_fmt(values['pr_auc'])}")
    print(f"plots written to {out_dir / 'plots'}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.dir is not None:
        directory = args.dir
    elif args.config is not None:
        directory = _load_config(args).output_dir
    else:
        raise ConfigError("report needs --dir or --config")
    summary = read_summary(directory)
    table_path = Path(directory) / "metrics" / "comparison.csv"
    if table_path.is_file():
        print(pd.read_csv(table_path).to_string(index=False))
    _print_summary(summary)
    if summary.get("failures"):
        for failure in summary["failures"]:
            print(f"FAILED {failure['stage']}: {failure['message']}")
        return EXIT_FAILURE
    return EXIT_OK


COMMANDS: Dict[str, Callable] = {
    'synth': cmd_synth,
    'ingest': lambda args: _run_until(args, "ingest"),
    'train-gan': lambda args: _run_until(args, "gan"),
    'augment': lambda args: _run_until(args, "augment"),
    'train-clf': lambda args: _run_until(args, "classifier"),
    'eval': cmd_eval,
    'run': lambda args: _run_until(args, "report", resume=args.resume),
    'report': cmd_report,
}


def cli(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except ConfigError as e:
        logger.error("CLI_USAGE_ERROR", exception=e, key=e.key)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except GanAugError as e:
        logger.error("CLI_RUNTIME_ERROR", exception=e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as e:
        logger.error("CLI_UNEXPECTED_ERROR", exception=e)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(cli(sys.argv[1:]))
