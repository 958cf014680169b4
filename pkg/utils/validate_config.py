#!/usr/bin/env python3
"""
Experiment Configuration Validator
==================================
Checks a kernel_lab config file against a subcommand's schema before a long
run is started.

Usage:
    python utils/validate_config.py kqd-test --file configs/kqd_test.cfg
"""

import os
import sys
from pathlib import Path
from typing import Dict, List, Tuple

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.config_manager import SCHEMAS, allowed_keys, load_experiment_config, read_config_file, schema_for
from app.exceptions import ConfigError


# ANSI color codes for terminal output
class Colors:
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    RED = '\033[91m'
    BLUE = '\033[94m'
    BOLD = '\033[1m'
    END = '\033[0m'


def print_colored(message: str, color: str):
    print(f"{color}{message}{Colors.END}")


def check_unknown_keys(subcommand: str, values: Dict[str, str]) -> List[Tuple[str, str]]:
    """Keys the subcommand does not accept"""
    allowed = set(allowed_keys(subcommand))
    return [(key, f"Unknown key for {subcommand}") for key in values if key not in allowed]


def check_values(subcommand: str, values: Dict[str, str]) -> List[Tuple[str, str]]:
    """Values that do not parse"""
    schema = schema_for(subcommand)
    issues = []
    for key, raw in values.items():
        option = schema.get(key)
        if option is None:
            continue
        try:
            option.parse(raw)
        except ValueError as e:
            issues.append((key, f"Invalid value '{raw}': {e}"))
    return issues


def check_recommendations(subcommand: str, values: Dict[str, str]) -> List[Tuple[str, str]]:
    """Settings that run but give weak or non-reproducible results"""
    recommendations = []
    try:
        config = load_experiment_config(subcommand, overrides=values)
    except ConfigError:
        return recommendations

    if config['reps'] < 10:
        recommendations.append(('reps', f"Only {config['reps']} repetitions; averages will be noisy"))
    grid = config.get('N')
    if isinstance(grid, list) and grid != sorted(grid):
        recommendations.append(('N', 'Grid sizes are not increasing; rate slopes assume an ordered grid'))
    if subcommand == 'calib-rates' and isinstance(grid, list) and len(grid) < 3:
        recommendations.append(('N', 'Rate slopes need at least three grid sizes'))
    if subcommand == 'kqd-test' and config['permutations'] < 100:
        recommendations.append(('permutations', 'Fewer than 100 permutations gives a coarse threshold'))
    if subcommand == 'mmd-bench' and config['timing']:
        recommendations.append(('timing', 'Runtimes differ between runs; the CSV is not byte-reproducible'))
    return recommendations


def validate_config_file(subcommand: str, filepath: Path) -> bool:
    """Validate a config file and return True if it can be run"""
    print_colored(f"\n{'='*60}", Colors.BLUE)
    print_colored(f"Validating {subcommand}: {filepath}", Colors.BOLD)
    print_colored(f"{'='*60}\n", Colors.BLUE)

    try:
        values = read_config_file(filepath)
    except ConfigError as e:
        print_colored(f"❌ ERROR: {e}", Colors.RED)
        return False

    print_colored(f"✓ Loaded {len(values)} settings\n", Colors.GREEN)

    has_errors = False
    print_colored("Checking keys...", Colors.BOLD)
    issues = check_unknown_keys(subcommand, values) + check_values(subcommand, values)
    if issues:
        has_errors = True
        for key, issue in issues:
            print_colored(f"  ❌ {key}: {issue}", Colors.RED)
    else:
        print_colored("  ✓ All keys known and parsable", Colors.GREEN)
    print()

    if not has_errors:
        try:
            load_experiment_config(subcommand, filepath)
        except ConfigError as e:
            has_errors = True
            print_colored(f"  ❌ {e.key or 'config'}: {e}", Colors.RED)

    print_colored("Recommendations...", Colors.BOLD)
    recommendations = [] if has_errors else check_recommendations(subcommand, values)
    if recommendations:
        for key, recommendation in recommendations:
            print_colored(f"  ⚠  {key}: {recommendation}", Colors.YELLOW)
    else:
        print_colored("  ✓ Nothing to add", Colors.GREEN)
    print()

    print_colored(f"{'='*60}", Colors.BLUE)
    if has_errors:
        print_colored("❌ VALIDATION FAILED", Colors.RED)
        return False
    print_colored("✅ VALIDATION PASSED", Colors.GREEN)
    return True


def main():
    import argparse

    parser = argparse.ArgumentParser(description='Validate a kernel_lab experiment configuration')
    parser.add_argument('subcommand', choices=sorted(SCHEMAS))
    parser.add_argument('--file', required=True, help='Path to the config file')
    args = parser.parse_args()

    success = validate_config_file(args.subcommand, Path(args.file))
    sys.exit(0 if success else 1)


if __name__ == '__main__':
    main()
