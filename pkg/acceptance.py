"""
Experiment-level acceptance checks.

These runs take seconds to minutes and depend on sampled channels, so they
live outside the default test run. Each case names a check, its input and
the expected outcome; the report goes to acceptance_report.json.

    python acceptance.py [--only simulation_ordering] [--threads 4]
"""

import argparse
import json
import logging
import time
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from analysis import critical_load, priority_correlations
from config import ExperimentConfig, load_config
from musmdp import solve_musmdp
from qa_policy import QaSpec
from rb_lp import solve_rb
from schedulers import SchedulerSpec, qaa_rank
from simulator import SimConfig, run_batch

logger = getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / "configs"


def musmdp_dominance(inputs: Dict, threads: int = 1) -> Dict:
    """Joint optimum against each fixed-QA RB optimum at matched discounting."""
    config = load_config(CONFIG_DIR / inputs['config'])
    base = config.user_groups()[0]
    m = inputs['subchannels']
    _, joint = solve_musmdp([base], m, config.discount, config.solver, config.musmdp.tail_tol)
    rb = {}
    for qa in inputs['qa']:
        group = base.model_copy(update={'qa': QaSpec.model_validate(qa)})
        _, solution = solve_rb([group], m, config.discount, config.solver)
        rb[group.qa.label] = solution.objective
    best = max(rb.values())
    return {
        'musmdp_objective': joint.objective,
        'rb_objectives': rb,
        'dominates': all(joint.objective >= value - 1e-6 for value in rb.values()),
        'best_fixed_share': best / joint.objective if joint.objective else None,
    }


ORDERED_KINDS = ('QAA', 'BEAS', 'PF', 'BCF', 'LBF')


def scheduler_specs(config: ExperimentConfig) -> Dict[str, SchedulerSpec]:
    """The config's spec for each compared kind, defaults where it has none."""
    configured = {spec.kind: spec for spec in config.schedulers}
    return {kind: configured.get(kind, SchedulerSpec(kind=kind)) for kind in ORDERED_KINDS}


def simulation_ordering(inputs: Dict, threads: int = 1) -> Dict:
    """Mean reward ordering QAA >= BEAS >= baselines, plus the LP upper bound for QAA."""
    config = load_config(CONFIG_DIR / inputs['config'])
    groups = tuple(config.user_groups())
    seeds = list(range(inputs['seeds']))
    specs = scheduler_specs(config)
    per_m = {}
    for m in inputs['subchannels']:
        model_solution = solve_rb(groups, m, config.discount, config.solver)[1]
        ranking = qaa_rank(model_solution.groups)
        batches = {}
        for kind, spec in specs.items():
            sim = SimConfig(groups=groups, subchannels=m, scheduler=spec,
                            horizon=inputs['horizon'], discount=config.discount)
            batches[kind] = run_batch(sim, seeds, threads, ranking if kind == 'QAA' else None)

        def beats(first: str, second: str) -> bool:
            gap = batches[first].mean['reward'] - batches[second].mean['reward']
            pooled = np.hypot(batches[first].stderr['reward'], batches[second].stderr['reward'])
            return bool(gap > pooled)

        best_baseline = max(('PF', 'BCF', 'LBF'), key=lambda kind: batches[kind].mean['reward'])
        bound = 1.02 * model_solution.per_user_objective
        per_m[str(m)] = {
            'reward': {kind: batch.mean['reward'] for kind, batch in batches.items()},
            'rebuffer_fraction': {kind: batch.mean['rebuffer_fraction'] for kind, batch in batches.items()},
            'qaa_beats_beas': beats('QAA', 'BEAS'),
            'beas_beats_baselines': beats('BEAS', best_baseline),
            'lp_bound': bound,
            'qaa_below_bound': all(summary['reward'] <= bound for summary in batches['QAA'].per_seed),
            'pf_bcf_rebuffer_above_qaa': all(
                batches[kind].mean['rebuffer_fraction'] >= batches['QAA'].mean['rebuffer_fraction']
                for kind in ('PF', 'BCF')),
        }
    return per_m


def critical_load_trends(inputs: Dict, threads: int = 1) -> Dict:
    """Critical load position and the channel / buffer priority trends around it."""
    config = load_config(CONFIG_DIR / inputs['config'])
    group = config.user_groups()[0].model_copy(update={'qa': QaSpec.dbp(inputs['dbp_threshold'])})
    found, sweep = critical_load(group.channel, group.qa, group.video, config.subchannels,
                                 group.count, config.discount, config.solver, threads)
    correlations = {}
    for label, m in inputs['correlation_points'].items():
        solution = solve_rb([group], m, config.discount, config.solver)[1]
        correlations[label] = priority_correlations(qaa_rank(solution.groups), group.video)
    return {
        'critical_load': found.rho,
        'bracket': list(found.bracket),
        'sweep': sweep.to_frame().to_dict(orient='records'),
        'correlations': correlations,
    }


CHECKS = {
    'musmdp_dominance': musmdp_dominance,
    'simulation_ordering': simulation_ordering,
    'critical_load_trends': critical_load_trends,
}


class AcceptanceTester:
    """Runs the experiment-level cases and collects a pass/fail report."""

    def __init__(self, threads: int = 1):
        self.threads = threads
        self.test_results = []

    def load_test_cases(self) -> List[Dict]:
        return [
            {
                'name': 'musmdp_dominance',
                'input': {
                    'config': 'desk.json',
                    'subchannels': 2,
                    'qa': [{'kind': 'DBP', 'threshold': 3}, {'kind': 'CBP'},
                           {'kind': 'BPP', 'switch_fraction': 0.5}],
                },
                'expected': {'dominates': True, 'min_best_fixed_share': 0.7},
            },
            {
                'name': 'simulation_ordering',
                'input': {'config': 'table1.json', 'subchannels': [8, 12], 'seeds': 20, 'horizon': 600},
                'expected': {'qaa_beats_beas': True, 'beas_beats_baselines': True,
                             'qaa_below_bound': True, 'pf_bcf_rebuffer_above_qaa_at': 8},
            },
            {
                'name': 'critical_load_trends',
                'input': {'config': 'table1.json', 'dbp_threshold': 10,
                          'correlation_points': {'rho_2.5': 8, 'rho_2.0': 10}},
                'expected': {'critical_load': [1.9, 2.7], 'channel_at': 'rho_2.5',
                             'buffer_at': 'rho_2.0', 'min_abs_correlation': 0.2},
            },
        ]

    def evaluate(self, name: str, result: Dict, expected: Dict) -> bool:
        if name == 'musmdp_dominance':
            return result['dominates'] and (result['best_fixed_share'] or 0) >= expected['min_best_fixed_share']
        if name == 'simulation_ordering':
            ordered = all(entry['qaa_beats_beas'] and entry['beas_beats_baselines'] and entry['qaa_below_bound']
                          for entry in result.values())
            return ordered and result[str(expected['pf_bcf_rebuffer_above_qaa_at'])]['pf_bcf_rebuffer_above_qaa']
        low, high = expected['critical_load']
        channel = result['correlations'][expected['channel_at']]['channel']
        buffer = result['correlations'][expected['buffer_at']]['buffer']
        limit = expected['min_abs_correlation']
        return (low <= result['critical_load'] <= high
                and channel is not None and channel < -limit
                and buffer is not None and buffer > limit)

    def run_test(self, test_case: Dict) -> Dict:
        name = test_case['name']
        logger.info("acceptance: %s", name)
        start = time.time()
        result = CHECKS[name](test_case['input'], self.threads)
        passed = self.evaluate(name, result, test_case['expected'])
        return {
            'test_name': name,
            'result': result,
            'expected': test_case['expected'],
            'passed': bool(passed),
            'execution_time': time.time() - start,
        }

    def run_all_tests(self, only: Optional[List[str]] = None,
                      report_path: Path = Path('acceptance_report.json')) -> Dict:
        cases = [case for case in self.load_test_cases() if not only or case['name'] in only]
        results = []
        for case in cases:
            result = self.run_test(case)
            results.append(result)
            self.test_results.append(result)

        report = {
            'timestamp': time.strftime('%Y-%m-%d %H:%M:%S'),
            'total_tests': len(results),
            'passed_tests': sum(1 for r in results if r['passed']),
            'test_results': results,
        }
        with open(report_path, 'w') as f:
            json.dump(report, f, indent=2, default=str)

        for r in results:
            status = "PASS" if r['passed'] else "FAIL"
            print(f"   {status} | {r['test_name']} ({r['execution_time']:.1f}s)")
        print(f"Full report saved to: {report_path.absolute()}")
        return report


def main():
    parser = argparse.ArgumentParser(description="experiment-level acceptance checks")
    parser.add_argument('--only', nargs='*')
    parser.add_argument('--threads', type=int, default=1)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    tester = AcceptanceTester(args.threads)
    return tester.run_all_tests(args.only)


if __name__ == "__main__":
    report = main()
    print(f"Passed {report['passed_tests']} of {report['total_tests']}")
