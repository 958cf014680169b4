"""
Experiment Configuration Manager
================================

Resolves the flat key=value configuration of one experiment subcommand.
Values are layered: schema defaults, then the config file (parsed with
python-dotenv), then command-line overrides.

Usage:
    python -m app.config_manager show kqd-test --config configs/kqd_test.cfg
    python -m app.config_manager template cbq-demo
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Union

from dotenv import dotenv_values

from app.exceptions import ConfigError
from app.kernels import KernelSpec

logger = logging.getLogger(__name__)

KERNEL_PREFIX = 'kernel.'
KERNEL_KEYS = ('family', 'tau2', 'lengthscale', 'nu', 'hurst', 'degree', 'offset', 'lambda')
RESULTS_DIR = 'results'


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"expected a boolean, got '{raw}'")


def _list_of(cast: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(raw: str) -> List[Any]:
        items = [item.strip() for item in raw.split(',') if item.strip()]
        if not items:
            raise ValueError("expected a non-empty comma-separated list")
        return [cast(item) for item in items]
    return parse


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise ValueError(f"expected a positive integer, got {value}")
    return value


def _seed(raw: str) -> int:
    value = int(raw, 0)
    if not 0 <= value < 2 ** 64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {value}")
    return value


@dataclass(frozen=True)
class Option:
    parse: Callable[[str], Any]
    default: str
    help: str = ''


COMMON_OPTIONS: Dict[str, Option] = {
    'seed': Option(_seed, '0', 'root seed for every random stream'),
    'workers': Option(int, '0', 'replicate threads; 0 reads KERNEL_LAB_WORKERS'),
}

SCHEMAS: Dict[str, Dict[str, Option]] = {
    'calib-rates': {
        'process': Option(str, 'ifbm', 'bm, fbm, ifbm, iifbm, ou or jump'),
        'H': Option(float, '0.5', 'Hurst parameter'),
        'rate': Option(float, '0.2', 'OU mean-reversion rate'),
        'T': Option(float, '1.0', 'interval end'),
        'estimators': Option(_list_of(str.upper), 'CV,ML', 'subset of CV, ML, ICV'),
        'N': Option(_list_of(_positive_int), '100,1000,10000', 'grid sizes'),
        'reps': Option(_positive_int, '100', 'seeded paths per grid size'),
    },
    'calib-limits': {
        'checks': Option(_list_of(str), 'bm-cv,bm-ml,jump-cv,ml-linear,ml-square',
                         'limit checks to run'),
        'N': Option(_list_of(_positive_int), '10000,100000', 'grid sizes'),
        'T': Option(float, '1.0', 'interval end'),
        'reps': Option(_positive_int, '100', 'seeded paths per random check'),
    },
    'mmd-bench': {
        'estimators': Option(_list_of(str), 'mmd-v,mmd-u,mmd-linear,mmd-multi,ekqd', 'statistics to time'),
        'N': Option(_list_of(_positive_int), '1000,4000', 'sample sizes'),
        'reps': Option(_positive_int, '3', 'repetitions per size'),
        'P': Option(str, 'gaussian', 'sampler for the first sample'),
        'Q': Option(str, 'laplace', 'sampler for the second sample'),
        'timing': Option(_parse_bool, 'false', 'record wall-clock runtimes (not reproducible)'),
    },
    'ow-bench': {
        'theta': Option(_list_of(float), '3,1,0.1,0.1', 'g-and-k model parameter (A,B,g,k)'),
        'theta_data': Option(_list_of(float), '3,1,0.1,0.1', 'g-and-k parameter of the data'),
        'N': Option(_positive_int, '256', 'model sample size'),
        'M': Option(_positive_int, '10000', 'data sample size'),
        'reps': Option(_positive_int, '20', 'seeded repetitions'),
    },
    'kqd-test': {
        'statistics': Option(_list_of(str), 'ekqd,mmd-u', 'statistics to test with'),
        'N': Option(_list_of(_positive_int), '500,5000', 'sample sizes'),
        'reps': Option(_positive_int, '50', 'repetitions per size'),
        'P': Option(str, 'gaussian', 'sampler for the first sample'),
        'Q': Option(str, 'laplace', 'sampler for the second sample'),
        'level': Option(float, '0.05', 'test level'),
        'permutations': Option(_positive_int, '300', 'permutations per test'),
        'p': Option(_positive_int, '2', 'KQD power'),
        'L': Option(int, '0', 'directions; 0 uses ceil(log N)'),
        'M': Option(int, '0', 'anchors per direction; 0 uses ceil(log N)'),
        'reference': Option(str, 'pooled', 'pooled, gaussian-iqr or uniform-iqr'),
        'median': Option(_parse_bool, 'false', 'median-heuristic lengthscale'),
    },
    'cbq-demo': {
        'N': Option(_list_of(_positive_int), '10,50', 'samples per parameter (T = N)'),
        'reps': Option(_positive_int, '10', 'seeded repetitions'),
        'd': Option(_positive_int, '2', 'dimension of the regression weights'),
        'eta': Option(float, '1.0', 'observation precision'),
        'n_obs': Option(_positive_int, '10', 'observations in the fixed design'),
        'test_points': Option(_positive_int, '100', 'held-out parameter points for RMSE'),
        'methods': Option(_list_of(str.lower), 'cbq,lsmc,klsmc', 'estimators to compare'),
    },
}

KERNEL_DEFAULTS: Dict[str, Dict[str, str]] = {
    'mmd-bench': {'kernel.family': 'gaussian', 'kernel.lengthscale': '1.0'},
    'kqd-test': {'kernel.family': 'polynomial', 'kernel.degree': '3', 'kernel.offset': '1.0'},
}


@dataclass
class ExperimentConfig:
    """Resolved configuration of one subcommand run"""
    subcommand: str
    values: Dict[str, Any] = field(default_factory=dict)
    out: str = ''
    kernel_fragment: Dict[str, str] = field(default_factory=dict)
    source: Optional[str] = None

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    @property
    def seed(self) -> int:
        return self.values['seed']

    @property
    def workers(self) -> Optional[int]:
        return self.values['workers'] or None

    def kernel(self) -> KernelSpec:
        if not self.kernel_fragment:
            raise ConfigError(f"'{self.subcommand}' takes no kernel settings")
        try:
            return KernelSpec.from_config(self.kernel_fragment, prefix=KERNEL_PREFIX)
        except ValueError as exc:
            raise ConfigError(f"invalid kernel settings: {exc}", KERNEL_PREFIX + 'family') from exc


def schema_for(subcommand: str) -> Dict[str, Option]:
    try:
        schema = SCHEMAS[subcommand]
    except KeyError:
        raise ConfigError(f"unknown subcommand '{subcommand}'; expected one of {sorted(SCHEMAS)}") from None
    return {**COMMON_OPTIONS, **schema}


def allowed_keys(subcommand: str) -> List[str]:
    keys = list(schema_for(subcommand)) + ['out']
    if subcommand in KERNEL_DEFAULTS:
        keys += [KERNEL_PREFIX + k for k in KERNEL_KEYS]
    return keys


def parse_overrides(tokens: Iterable[str]) -> Dict[str, str]:
    """key=value tokens from the command line"""
    overrides = {}
    for token in tokens:
        key, sep, value = token.partition('=')
        if not sep or not key.strip():
            raise ConfigError(f"override '{token}' is not of the form key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file '{path}' does not exist")
    raw = dotenv_values(path)
    values = {}
    for key, value in raw.items():
        if value is None:
            raise ConfigError(f"key '{key}' in {path} has no value", key)
        values[key] = value
    return values


def load_experiment_config(subcommand: str, path: Optional[Union[str, Path]] = None,
                           overrides: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """
    Resolve defaults, the optional config file and overrides for one subcommand.

    Raises:
        ConfigError: unknown subcommand, unknown key or unparsable value
    """
    schema = schema_for(subcommand)
    allowed = set(allowed_keys(subcommand))

    raw: Dict[str, str] = {key: opt.default for key, opt in schema.items()}
    raw['out'] = os.path.join(RESULTS_DIR, f"{subcommand}.csv")
    raw.update(KERNEL_DEFAULTS.get(subcommand, {}))
    layers = []
    if path is not None:
        layers.append(read_config_file(path))
    if overrides:
        layers.append(dict(overrides))
    for layer in layers:
        for key, value in layer.items():
            if key not in allowed:
                raise ConfigError(f"unknown key '{key}' for '{subcommand}'", key)
            raw[key] = value

    values = {}
    for key, opt in schema.items():
        try:
            values[key] = opt.parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"invalid value for '{key}': {exc}", key) from exc
    if values['workers'] < 0:
        raise ConfigError("workers must be >= 0", 'workers')

    fragment = {k: v for k, v in raw.items() if k.startswith(KERNEL_PREFIX)}
    config = ExperimentConfig(subcommand=subcommand, values=values, out=raw['out'],
                              kernel_fragment=fragment, source=str(path) if path else None)
    if fragment:
        config.kernel()
    logger.debug(f"Resolved {subcommand} config: {values}")
    return config


def render_template(subcommand: str) -> str:
    """Commented config file listing every key with its default"""
    lines = [f"# kernel_lab {subcommand} configuration", ""]
    for key, opt in schema_for(subcommand).items():
        if opt.help:
            lines.append(f"# {opt.help}")
        lines.append(f"{key}={opt.default}")
    lines.append(f"out={os.path.join(RESULTS_DIR, subcommand + '.csv')}")
    for key, value in KERNEL_DEFAULTS.get(subcommand, {}).items():
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def main():
    """Main CLI interface"""
    import argparse

    parser = argparse.ArgumentParser(description='kernel_lab configuration manager')
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    show_parser = subparsers.add_parser('show', help='Print the resolved configuration')
    show_parser.add_argument('subcommand', choices=sorted(SCHEMAS))
    show_parser.add_argument('--config', help='config file')
    show_parser.add_argument('overrides', nargs='*', help='key=value overrides')

    template_parser = subparsers.add_parser('template', help='Write a commented config template')
    template_parser.add_argument('subcommand', choices=sorted(SCHEMAS))
    template_parser.add_argument('--dir', default='configs', help='target directory')

    args = parser.parse_args()

    if not args.command:
        parser.print_help()
        return

    if args.command == 'show':
        try:
            config = load_experiment_config(args.subcommand, args.config, parse_overrides(args.overrides))
        except ConfigError as e:
            print(f"⚠ {e}")
            raise SystemExit(1)
        print(f"✓ {args.subcommand} ({config.source or 'defaults'})")
        for key, value in config.values.items():
            print(f"   {key} = {value}")
        print(f"   out = {config.out}")
        if config.kernel_fragment:
            print(f"   kernel = {config.kernel().spec_id}")

    elif args.command == 'template':
        Path(args.dir).mkdir(parents=True, exist_ok=True)
        target = os.path.join(args.dir, args.subcommand.replace('-', '_') + '.cfg')
        if os.path.exists(target):
            print(f"⚠ {target} already exists")
            return
        with open(target, 'w', encoding='utf-8') as f:
            f.write(render_template(args.subcommand))
        print(f"✓ Created {target}")


if __name__ == '__main__':
    main()
