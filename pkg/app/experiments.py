"""
Experiment subcommands.

Each runner takes a resolved ExperimentConfig, writes its long-format CSV
through ResultsLogger and returns an ExperimentSummary for the entry script
to print. Replicate seeds are derived from the config seed by stream
splitting, so a run is reproducible regardless of the worker count.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from app.bq import standard_gaussian_base, ow_mmd2
from app.calibration import (ESTIMATORS, Partition, PathSamplerSpec, ProcessKind, ml_functional_limit,
                             quadratic_variation, rate_slope, sample_path)
from app.cbq import (cbq_fit, cbq_predict_batch, empirical_bayes_grid, select_klsmc,
                     select_lsmc_degree)
from app.config_manager import ExperimentConfig
from app.exceptions import ConfigError
from app.kernels import KernelSpec, median_heuristic
from app.kqd import KqdConfig, ReferenceRule
from app.mmd import mmd2_u, mmd2_v
from app.results_logger import ResultsLogger
from app.simulators import BayesLinearProblem, gandk_generator, gandk_sampler, named_sampler, uniform_thetas
from app.two_sample import (STATISTIC_NAMES, TestConfig, make_statistic, replicate_streams, run_replicates,
                            wilson_interval)
from utils.replicate_pool import ReplicatePool
from utils.rng import RngStream

logger = logging.getLogger(__name__)

COLUMNS = {
    'calib-rates': ['process', 'H', 's', 'estimator', 'N', 'seed', 'tau2_hat'],
    'calib-limits': ['check', 'N', 'seed', 'value', 'target'],
    'mmd-bench': ['estimator', 'N', 'rep', 'seed', 'value', 'runtime_s'],
    'ow-bench': ['estimator', 'N', 'M', 'seed', 'estimate', 'reference', 'abs_error'],
    'kqd-test': ['statistic', 'N', 'rep', 'seed', 'value', 'threshold', 'reject'],
    'cbq-demo': ['method', 'N', 'T', 'seed', 'rmse'],
}

SMOOTHNESS = {
    ProcessKind.BM: 0,
    ProcessKind.FBM: 0,
    ProcessKind.OU: 0,
    ProcessKind.PIECEWISE_JUMP: 0,
    ProcessKind.IFBM: 1,
    ProcessKind.IIFBM: 2,
}


@dataclass
class ExperimentSummary:
    experiment: str
    rows: int
    metrics: Dict[str, float] = field(default_factory=dict)
    runtime_s: float = 0.0

    def headline(self) -> str:
        shown = ', '.join(f"{k}={v:.4g}" for k, v in self.metrics.items())
        return f"{self.experiment}: {shown} ({self.rows} rows, {self.runtime_s:.1f}s)"


def replicate_seed(seed: int, rep: int) -> int:
    return RngStream.root(seed).split(f"rep/{rep}").state


def _choice(value: str, allowed, key: str):
    if value not in allowed:
        raise ConfigError(f"invalid value '{value}' for '{key}'; expected one of {sorted(allowed)}", key)
    return value


# Calibration

def run_calib_rates(config: ExperimentConfig, pool: ReplicatePool) -> ExperimentSummary:
    """Amplitude estimates over seeded paths for each grid size, plus log-log slopes"""
    try:
        process = ProcessKind(config['process'])
    except ValueError:
        raise ConfigError(f"unknown process '{config['process']}'", 'process') from None
    names = config['estimators']
    for name in names:
        _choice(name, ESTIMATORS, 'estimators')
    H, T, rate = config['H'], config['T'], config['rate']
    seeds = [replicate_seed(config.seed, r) for r in range(config['reps'])]

    means = {name: [] for name in names}
    with ResultsLogger(config.out, COLUMNS['calib-rates']) as results:
        for N in config['N']:
            part = Partition.uniform(N, T)

            def replicate(seed: int) -> Dict[str, float]:
                path = sample_path(PathSamplerSpec(process, part, seed=seed, hurst=H, rate=rate))
                return {name: ESTIMATORS[name](part, path).value for name in names}

            estimates = pool.map_ordered(replicate, seeds)
            for seed, values in zip(seeds, estimates):
                for name in names:
                    results.log_row({'process': process.value, 'H': H, 's': SMOOTHNESS[process],
                                     'estimator': name, 'N': N, 'seed': seed, 'tau2_hat': values[name]})
            for name in names:
                means[name].append(float(np.mean([v[name] for v in estimates])))
            logger.info(f"calib-rates {process.value} N={N}: "
                        + ', '.join(f"{n}={means[n][-1]:.4g}" for n in names))
        rows = results.rows_written

    metrics = {}
    if len(config['N']) >= 3:
        for name in names:
            metrics[f"slope_{name}"] = rate_slope(config['N'], means[name])
    else:
        for name in names:
            metrics[f"mean_{name}"] = means[name][-1]
    return ExperimentSummary('calib-rates', rows, metrics)


LIMIT_CHECKS = ('bm-cv', 'bm-ml', 'bm-icv', 'bm-qv', 'jump-cv', 'ml-linear', 'ml-square')


def _limit_value(check: str, part: Partition, seed: int) -> float:
    x = part.points
    if check == 'ml-linear':
        return ml_functional_limit(part, x)
    if check == 'ml-square':
        return ml_functional_limit(part, x ** 2)
    if check == 'jump-cv':
        path = sample_path(PathSamplerSpec(ProcessKind.PIECEWISE_JUMP, part, seed=seed))
        return ESTIMATORS['CV'](part, path).value
    path = sample_path(PathSamplerSpec(ProcessKind.BM, part, seed=seed))
    if check == 'bm-qv':
        return quadratic_variation(part, path)
    return ESTIMATORS[check.split('-')[1].upper()](part, path).value


def _limit_target(check: str, T: float) -> float:
    if check == 'ml-linear':
        return T
    if check == 'ml-square':
        return 4.0 * T ** 3 / 3.0
    if check == 'jump-cv':
        return 1.0 / T
    if check == 'bm-qv':
        return T
    return 1.0


def run_calib_limits(config: ExperimentConfig, pool: ReplicatePool) -> ExperimentSummary:
    """Large-N limits of the amplitude estimators against their known targets"""
    checks = config['checks']
    for check in checks:
        _choice(check, LIMIT_CHECKS, 'checks')
    T = config['T']
    seeds = [replicate_seed(config.seed, r) for r in range(config['reps'])]

    metrics = {}
    with ResultsLogger(config.out, COLUMNS['calib-limits']) as results:
        for check in checks:
            target = _limit_target(check, T)
            deterministic = check.startswith('ml-')
            for N in config['N']:
                part = Partition.uniform(N, T)
                if deterministic:
                    values = [_limit_value(check, part, 0)]
                    row_seeds = [None]
                else:
                    values = pool.map_ordered(lambda s: _limit_value(check, part, s), seeds)
                    row_seeds = seeds
                for seed, value in zip(row_seeds, values):
                    results.log_row({'check': check, 'N': N, 'seed': seed, 'value': value, 'target': target})
                metrics[f"{check}@{N}"] = float(np.mean(values)) / target
        rows = results.rows_written
    return ExperimentSummary('calib-limits', rows, metrics)


# Discrepancy benchmarks

def run_mmd_bench(config: ExperimentConfig, pool: ReplicatePool) -> ExperimentSummary:
    """Estimator values (and optionally runtimes) on one pair of samples per repetition"""
    spec = config.kernel()
    names = config['estimators']
    for name in names:
        _choice(name, STATISTIC_NAMES, 'estimators')
    sampler_P, sampler_Q = named_sampler(config['P']), named_sampler(config['Q'])
    timing = config['timing']

    totals: Dict[str, List[float]] = {name: [] for name in names}
    with ResultsLogger(config.out, COLUMNS['mmd-bench']) as results:
        for N in config['N']:
            for r in range(config['reps']):
                p_stream, q_stream, test_seed = replicate_streams(config.seed, r)
                X, Y = sampler_P(p_stream, N), sampler_Q(q_stream, N)
                for name in names:
                    stat = make_statistic(name, spec, KqdConfig.log_scaled(N, seed=test_seed))
                    start = time.perf_counter()
                    value = float(stat(X, Y))
                    elapsed = time.perf_counter() - start
                    totals[name].append(elapsed)
                    results.log_row({'estimator': name, 'N': N, 'rep': r, 'seed': test_seed, 'value': value,
                                     'runtime_s': elapsed if timing else None})
        rows = results.rows_written
    metrics = {f"mean_s_{name}": float(np.mean(v)) for name, v in totals.items()}
    return ExperimentSummary('mmd-bench', rows, metrics)


def run_ow_bench(config: ExperimentConfig, pool: ReplicatePool) -> ExperimentSummary:
    """
    V-statistic against optimally-weighted MMD^2 between a g-and-k model sample of
    size N and a data sample of size M.
    """
    theta, theta_data = config['theta'], config['theta_data']
    if len(theta) != 4 or len(theta_data) != 4:
        raise ConfigError("g-and-k parameters need four values A,B,g,k", 'theta')
    N, M = config['N'], config['M']
    generate = gandk_generator(theta)
    data_sampler = gandk_sampler(theta_data)
    root = RngStream.root(config.seed)

    reference_data = data_sampler(root.split('reference/data'), M)
    kernel_k = KernelSpec.gaussian(lengthscale=median_heuristic(reference_data, seed=config.seed))
    if list(theta) == list(theta_data):
        reference = 0.0
    else:
        model = gandk_sampler(theta)(root.split('reference/model'), M)
        reference = mmd2_u(kernel_k, model, reference_data)
    logger.info(f"ow-bench reference MMD^2 = {reference:.6g} with {kernel_k.spec_id}")

    def replicate(r: int):
        stream = root.split(f"rep/{r}")
        Q = data_sampler(stream.split('data'), M)
        U = stream.split('base').normal((N, 1))
        kernel_c = KernelSpec.gaussian(lengthscale=median_heuristic(U, seed=config.seed))
        v_stat = mmd2_v(kernel_k, generate(U), Q)
        ow = ow_mmd2(kernel_k, kernel_c, standard_gaussian_base(kernel_c), generate, U, Q)
        return stream.state, {'mmd-v': v_stat, 'ow': ow}

    outputs = pool.map_ordered(replicate, range(config['reps']))
    errors: Dict[str, List[float]] = {'mmd-v': [], 'ow': []}
    with ResultsLogger(config.out, COLUMNS['ow-bench']) as results:
        for seed, values in outputs:
            for name, value in values.items():
                err = abs(value - reference)
                errors[name].append(err)
                results.log_row({'estimator': name, 'N': N, 'M': M, 'seed': seed, 'estimate': value,
                                 'reference': reference, 'abs_error': err})
        rows = results.rows_written
    metrics = {f"mean_abs_error_{k}": float(np.mean(v)) for k, v in errors.items()}
    return ExperimentSummary('ow-bench', rows, metrics)


# Two-sample testing

def _kqd_config(config: ExperimentConfig, N: int) -> KqdConfig:
    size = max(1, math.ceil(math.log(N)))
    try:
        reference = ReferenceRule(config['reference'])
    except ValueError:
        raise ConfigError(f"unknown reference rule '{config['reference']}'", 'reference') from None
    return KqdConfig(p=config['p'], L=config['L'] or size, M=config['M'] or size, reference=reference)


def run_kqd_test(config: ExperimentConfig, pool: ReplicatePool) -> ExperimentSummary:
    """Permutation-test rejection rates per statistic and sample size"""
    spec = config.kernel()
    names = config['statistics']
    for name in names:
        _choice(name, STATISTIC_NAMES, 'statistics')
    sampler_P, sampler_Q = named_sampler(config['P']), named_sampler(config['Q'])
    test_cfg = TestConfig(level=config['level'], permutations=config['permutations'], seed=config.seed)

    metrics = {}
    with ResultsLogger(config.out, COLUMNS['kqd-test']) as results:
        for N in config['N']:
            for name in names:
                stat = make_statistic(name, spec, _kqd_config(config, N), median=config['median'])
                outcomes = run_replicates(stat, sampler_P, sampler_Q, N, config['reps'], test_cfg, pool)
                for r, outcome in enumerate(outcomes):
                    results.log_row({'statistic': name, 'N': N, 'rep': r,
                                     'seed': replicate_streams(config.seed, r)[2],
                                     'value': outcome.statistic, 'threshold': outcome.threshold,
                                     'reject': outcome.reject})
                rejections = sum(o.reject for o in outcomes)
                rate = rejections / len(outcomes)
                lo, hi = wilson_interval(rejections, len(outcomes))
                metrics[f"{name}@{N}"] = rate
                logger.info(f"kqd-test {name} N={N}: rejection rate {rate:.3f} [{lo:.3f}, {hi:.3f}]")
        rows = results.rows_written
    return ExperimentSummary('kqd-test', rows, metrics)


# Conditional Bayesian quadrature

def _rmse(pred, truth) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2)))


CBQ_METHODS = ('cbq', 'lsmc', 'klsmc')


def cbq_replicate(problem: BayesLinearProblem, N: int, seed: int, test_points: int,
                  methods=CBQ_METHODS, pool: Optional[ReplicatePool] = None) -> Dict[str, float]:
    """RMSE of each method on held-out parameter points, with T = N"""
    stream = RngStream.root(seed).split('cbq-demo')
    d = problem.d
    thetas = uniform_thetas(N, d, stream.split('thetas'))
    test = uniform_thetas(test_points, d, stream.split('test'))
    validation = uniform_thetas(test_points, d, stream.split('validation'))
    truth_test = problem.true_integrals(test)
    truth_val = problem.true_integrals(validation)
    task = problem.task(thetas, N, seed)
    mc = task.mc_means()

    rmse = {}
    if 'cbq' in methods:
        selection = empirical_bayes_grid(task)
        post = cbq_fit(task.with_kernels(selection.kernel_X, selection.kernel_Theta),
                       lambda_theta=selection.lambda_theta, pool=pool)
        rmse['cbq'] = _rmse(cbq_predict_batch(post, test), truth_test)
    if 'lsmc' in methods:
        model, _ = select_lsmc_degree(thetas, mc, validation, truth_val)
        rmse['lsmc'] = _rmse(model.predict(test), truth_test)
    if 'klsmc' in methods:
        model, _ = select_klsmc(thetas, mc, validation, truth_val, task.kernel_Theta)
        rmse['klsmc'] = _rmse(model.predict(test), truth_test)
    return rmse


def run_cbq_demo(config: ExperimentConfig, pool: ReplicatePool) -> ExperimentSummary:
    """CBQ against LSMC and KLSMC on the Bayesian linear regression task"""
    methods = config['methods']
    for m in methods:
        _choice(m, CBQ_METHODS, 'methods')
    metrics = {}
    with ResultsLogger(config.out, COLUMNS['cbq-demo']) as results:
        for N in config['N']:
            per_method: Dict[str, List[float]] = {m: [] for m in methods}
            for r in range(config['reps']):
                seed = replicate_seed(config.seed, r)
                problem = BayesLinearProblem.generate(d=config['d'], n_obs=config['n_obs'],
                                                      eta=config['eta'], seed=seed)
                rmse = cbq_replicate(problem, N, seed, config['test_points'], methods, pool)
                for m in methods:
                    per_method[m].append(rmse[m])
                    results.log_row({'method': m, 'N': N, 'T': N, 'seed': seed, 'rmse': rmse[m]})
            for m in methods:
                metrics[f"{m}@{N}"] = float(np.mean(per_method[m]))
        rows = results.rows_written
    return ExperimentSummary('cbq-demo', rows, metrics)


EXPERIMENTS: Dict[str, Callable[[ExperimentConfig, ReplicatePool], ExperimentSummary]] = {
    'calib-rates': run_calib_rates,
    'calib-limits': run_calib_limits,
    'mmd-bench': run_mmd_bench,
    'ow-bench': run_ow_bench,
    'kqd-test': run_kqd_test,
    'cbq-demo': run_cbq_demo,
}


def run_experiment(config: ExperimentConfig, pool: Optional[ReplicatePool] = None) -> ExperimentSummary:
    runner = EXPERIMENTS[config.subcommand]
    start = time.perf_counter()
    if pool is None:
        with ReplicatePool(config.workers, name=config.subcommand) as own_pool:
            summary = runner(config, own_pool)
    else:
        summary = runner(config, pool)
    summary.runtime_s = time.perf_counter() - start
    return summary
