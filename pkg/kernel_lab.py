"""
kernel_lab experiment runner
============================

Runs one experiment subcommand from a flat key=value config and writes its
results as CSV.

    python kernel_lab.py calib-rates --config configs/calib_rates.cfg --seed 7
    python kernel_lab.py kqd-test N=500 reps=20 --out results/kqd_small.csv
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Environment first: KERNEL_LAB_LOG_LEVEL and KERNEL_LAB_WORKERS may come from .env
load_dotenv(override=False)

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app.config_manager import SCHEMAS, load_experiment_config, parse_overrides
from app.exceptions import KernelLabError
from app.experiments import run_experiment

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
USAGE_EXIT_CODE = 2


class KernelLabApp:
    """Command-line application wrapping the experiment subcommands"""

    def __init__(self):
        self._configure_logging()
        self.parser = self._build_parser()

    def _configure_logging(self):
        """Root handler from KERNEL_LAB_LOG_LEVEL; quiet third-party loggers"""
        level_name = os.getenv('KERNEL_LAB_LOG_LEVEL', 'INFO').upper()
        level = getattr(logging, level_name, None)
        if not isinstance(level, int):
            level = logging.INFO
        logging.basicConfig(level=level, format=LOG_FORMAT)
        noisy_loggers = [
            'dotenv',
            'concurrent.futures',
        ]
        for logger_name in noisy_loggers:
            logging.getLogger(logger_name).setLevel(logging.WARNING)

    def _build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog='kernel_lab',
                                         description='Kernel discrepancy and quadrature experiments')
        subparsers = parser.add_subparsers(dest='command', help='Experiment to run')
        for name in sorted(SCHEMAS):
            sub = subparsers.add_parser(name, help=f'Run the {name} experiment')
            sub.add_argument('--config', help='key=value config file')
            sub.add_argument('--seed', help='root seed (unsigned 64-bit)')
            sub.add_argument('--out', help='CSV output path')
            sub.add_argument('--reps', help='number of repetitions')
            sub.add_argument('overrides', nargs='*', help='key=value overrides')
        return parser

    def run(self, argv: Optional[List[str]] = None) -> int:
        args = self.parser.parse_args(argv)
        if not args.command:
            self.parser.print_usage()
            return USAGE_EXIT_CODE

        try:
            overrides = parse_overrides(args.overrides)
            for key in ('seed', 'out', 'reps'):
                value = getattr(args, key)
                if value is not None:
                    overrides[key] = value
            config = load_experiment_config(args.command, args.config, overrides)
            summary = run_experiment(config)
        except (KernelLabError, ValueError) as e:
            print(f"⚠ {e}")
            self.parser.print_usage()
            return USAGE_EXIT_CODE

        print(f"✓ {summary.headline()} -> {config.out}")
        return 0


def main():
    sys.exit(KernelLabApp().run())


if __name__ == '__main__':
    main()
