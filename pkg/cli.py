"""
Command-line entry point.

    python cli.py solve-rb --config configs/table1.json --out out/
    python cli.py rank --config configs/table1.json --out out/
    python cli.py simulate --config configs/table1.json --out out/ --threads 4

Every run writes ``resolved_config.json`` next to its artifacts. Failures are
reported as one JSON object on stderr with exit code 1 (2 for config errors).
"""

import argparse
import json
import logging
import sys
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from analysis import (SweepPoint, buffer_limit_sweep, comparison_table, find_critical_load,
                      heatmap_frame, lambda_avg, layer_time_shares, load_sweep, mu_avg,
                      priority_correlations)
from artifacts import file_sha256, read_json, write_csv, write_json
from config import ExperimentConfig, load_config, resolve_output_dir
from database import ExperimentDatabase
from errors import ArtifactError, ConfigError, CriticalLoadError, ToolkitError
from lp_solver import check_solution, solve
from musmdp import solve_musmdp
from rb_lp import RbGroupSolution, build_rb_model, solve_rb, unpack_rb_solution
from schedulers import PriorityRanking, qaa_rank
from simulator import SimConfig, run, run_batch

logger = getLogger(__name__)

RB_SOLUTION = "rb_solution.json"
MUSMDP_SOLUTION = "musmdp_solution.json"
RANKING = "ranking.json"
METRICS = "metrics.json"
RESOLVED_CONFIG = "resolved_config.json"


class RunContext:
    """Config, output directory and ledger shared by one subcommand run."""

    def __init__(self, args: argparse.Namespace, config: ExperimentConfig):
        self.args = args
        self.config = config
        self.out = resolve_output_dir(config, args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.ledger = None if args.no_ledger else ExperimentDatabase(str(self.out / "runs.db"))
        self.run_id = None
        if self.ledger:
            seed = config.seeds[0] if len(config.seeds) == 1 else None
            self.run_id = self.ledger.start_run(args.command, config.config_hash(), seed, str(self.out))
        self.written: List[Tuple[str, Path, Optional[str]]] = []

    def json(self, name: str, kind: str, payload: Dict) -> Path:
        path = write_json(self.out / name, kind, payload)
        self.written.append((name, path, kind))
        return path

    def csv(self, name: str, frame) -> Path:
        path = write_csv(self.out / name, frame)
        self.written.append((name, path, None))
        return path

    def finish(self, error: Optional[Dict] = None):
        if not self.ledger:
            return
        for name, path, kind in self.written:
            self.ledger.record_artifact(self.run_id, {
                'name': name, 'path': str(path), 'sha256': file_sha256(path), 'schema': kind})
        self.ledger.finish_run(self.run_id, "failed" if error else "completed", error)
        self.log_summary()

    def log_summary(self) -> Dict:
        """Read this run back from the ledger and log one line about it."""
        run = self.ledger.get_run(self.run_id)
        artifacts = self.ledger.get_artifacts(self.run_id)
        metrics = self.ledger.get_metrics(run_id=self.run_id)
        summary = {
            'run_id': self.run_id,
            'status': run['status'],
            'artifacts': [artifact['name'] for artifact in artifacts],
            'metric_rows': len(metrics),
        }
        best = max(metrics, key=lambda row: row['reward'] if row['reward'] is not None else float('-inf'),
                   default=None)
        if best is not None:
            summary['best'] = {'scheduler': best['scheduler'], 'subchannels': best['subchannels'],
                               'reward': best['reward']}
        logger.info("run %s %s: %d artifacts, %d metric rows%s", self.run_id, run['status'],
                    len(artifacts), len(metrics),
                    f", best {best['scheduler']} at M={best['subchannels']}" if best else "")
        return summary


# ======================
# Subcommands
# ======================

def cmd_solve_rb(ctx: RunContext):
    config = ctx.config
    groups = config.user_groups()
    solutions = {}
    for m in config.subchannels:
        model = build_rb_model(groups, m, config.discount)
        lp = solve(model.problem, config.solver)
        solution = unpack_rb_solution(model, lp)
        checks = check_solution(model.problem, lp)
        entry = solution.to_dict()
        entry['checks'] = checks
        solutions[str(m)] = entry
        logger.info("RB M=%d: objective %.6f (per user %.6f), gap %.2e",
                    m, solution.objective, solution.per_user_objective, checks['duality_gap'])
        if ctx.args.export_lp:
            ctx.json(f"rb_lp_M{m}.json", "lp_problem", model.problem.to_dict())
    ctx.json(RB_SOLUTION, "rb_solution", {'model_hash': config.model_hash(), 'solutions': solutions})


def cmd_solve_musmdp(ctx: RunContext):
    config = ctx.config
    groups = config.user_groups()
    solutions = {}
    for m in config.subchannels:
        model, solution = solve_musmdp(groups, m, config.discount, config.solver, config.musmdp.tail_tol)
        entry = solution.to_dict()
        entry['checks'] = check_solution(model.problem, solution.lp)
        solutions[str(m)] = entry
        if ctx.args.export_lp:
            ctx.json(f"musmdp_lp_M{m}.json", "lp_problem", model.problem.to_dict())
    ctx.json(MUSMDP_SOLUTION, "musmdp_solution", {'model_hash': config.model_hash(), 'solutions': solutions})


def _stored_rb(ctx: RunContext) -> Dict[int, List[RbGroupSolution]]:
    document = read_json(ctx.out / RB_SOLUTION, "rb_solution")
    _check_hash(ctx, document, RB_SOLUTION)
    groups = ctx.config.user_groups()
    return {
        int(m): [RbGroupSolution.from_dict(data, group) for data, group in zip(entry['groups'], groups)]
        for m, entry in document['solutions'].items()
    }


def _stored_rankings(ctx: RunContext) -> Dict[int, PriorityRanking]:
    document = read_json(ctx.out / RANKING, "ranking")
    _check_hash(ctx, document, RANKING)
    return {int(m): PriorityRanking.from_dict(data) for m, data in document['rankings'].items()}


def _check_hash(ctx: RunContext, document: Dict, name: str):
    if document.get('model_hash') != ctx.config.model_hash():
        raise ArtifactError(f"{name} was produced from a different model configuration",
                            {'artifact': name, 'expected': ctx.config.model_hash(),
                             'found': document.get('model_hash')})


def cmd_rank(ctx: RunContext):
    rankings = {str(m): qaa_rank(groups).to_dict() for m, groups in _stored_rb(ctx).items()}
    ctx.json(RANKING, "ranking", {'model_hash': ctx.config.model_hash(), 'rankings': rankings})


def cmd_simulate(ctx: RunContext):
    config = ctx.config
    groups = tuple(config.user_groups())
    rankings: Dict[int, PriorityRanking] = {}
    if any(spec.kind == 'QAA' for spec in config.schedulers):
        if (ctx.out / RANKING).exists():
            rankings = _stored_rankings(ctx)
        else:
            logger.info("no %s in %s; solving rankings in-process", RANKING, ctx.out)

    results, entries = {}, []
    for m in config.subchannels:
        for spec in config.schedulers:
            sim = SimConfig(groups=groups, subchannels=m, scheduler=spec, horizon=config.horizon,
                            discount=config.discount, seed=config.seeds[0],
                            warmup_slots=config.warmup_slots)
            ranking = rankings.get(m)
            if spec.kind == 'QAA' and ranking is None:
                _, solution = solve_rb(groups, m, config.discount, config.solver)
                ranking = rankings[m] = qaa_rank(solution.groups)
            batch = run_batch(sim, config.seeds, ctx.args.threads, ranking)
            results[(spec.label, m)] = batch
            entries.append(dict(batch.to_dict(), scheduler=spec.label, subchannels=m))
            if ctx.ledger:
                ctx.ledger.record_metrics(ctx.run_id, spec.label, m, len(config.seeds), batch.mean)
            if ctx.args.trace:
                traced = run(sim.model_copy(update={'record_trace': True}), ranking)
                ctx.csv(f"trace_{spec.label}_M{m}_seed{sim.seed}.csv", traced.trace)

    ctx.json(METRICS, "metrics", {'results': entries})
    ctx.csv("comparison.csv", comparison_table(results, config.num_users))


def cmd_sweep(ctx: RunContext):
    config = ctx.config
    groups = config.user_groups()
    if len(groups) != 1:
        logger.warning("sweep uses the first group only (%s)", groups[0].name)
    sweep = load_sweep(groups[0], config.subchannels, config.discount, config.solver, ctx.args.threads)
    ctx.csv("sweep.csv", sweep.to_frame())
    critical = None
    if sweep.critical is not None:
        critical = {'rho': sweep.critical.rho, 'bracket': list(sweep.critical.bracket)}
    ctx.json("critical_load.json", "critical_load", {'critical_load': critical})
    if config.buffer_limits:
        m = config.subchannels[0]
        ctx.csv("buffer_sweep.csv", buffer_limit_sweep(groups[0], config.buffer_limits, m,
                                                       config.discount, config.solver))


def cmd_analyze(ctx: RunContext):
    config = ctx.config
    stored = _stored_rb(ctx)
    rankings = _stored_rankings(ctx)
    points, per_m = [], {}
    for m, group_solutions in sorted(stored.items()):
        first = group_solutions[0]
        video = first.group.video
        shares = layer_time_shares(first.x0, first.x1, video)
        drain = mu_avg(first.x0, first.x1, video)
        entry = {'layer_time_shares': shares.tolist(), 'mu_avg': drain}
        if m > 0:
            rho = config.num_users / m
            entry['rho'] = rho
            entry['lambda_avg'] = lambda_avg(first.group.channel, rho)
            points.append(SweepPoint(m, rho, entry['lambda_avg'], drain, float('nan')))
        ranking = rankings.get(m)
        if ranking is not None:
            entry['correlations'] = []
            for g, solved in enumerate(group_solutions):
                ctx.csv(f"heatmap_g{g}_M{m}.csv", heatmap_frame(ranking, solved.group.video, g))
                entry['correlations'].append(priority_correlations(ranking, solved.group.video, g))
        per_m[str(m)] = entry

    critical = None
    if len(points) >= 2:
        try:
            found = find_critical_load(points)
            critical = {'rho': found.rho, 'bracket': list(found.bracket)}
        except CriticalLoadError as exc:
            logger.warning("%s", exc.message)
    ctx.json("analysis.json", "analysis", {'subchannels': per_m, 'critical_load': critical})


COMMANDS = {
    'solve-rb': cmd_solve_rb,
    'solve-musmdp': cmd_solve_musmdp,
    'rank': cmd_rank,
    'simulate': cmd_simulate,
    'sweep': cmd_sweep,
    'analyze': cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="SVC multi-user streaming scheduler toolkit")
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        command = sub.add_parser(name)
        command.add_argument('--config', required=True, help="experiment config (JSON)")
        command.add_argument('--out', help="output directory (overrides config and environment)")
        command.add_argument('--seed', type=int, help="replace the config's seed list with one seed")
        command.add_argument('--threads', type=int, default=1)
        command.add_argument('--log-level', default='INFO')
        command.add_argument('--no-ledger', action='store_true', help="do not record the run in runs.db")
        if name in ('solve-rb', 'solve-musmdp'):
            command.add_argument('--export-lp', action='store_true', help="also write the LP itself")
        if name == 'simulate':
            command.add_argument('--trace', action='store_true', help="write a slot trace per scheduler and M")
    return parser


def _report(error: Dict, code: int) -> int:
    sys.stderr.write(json.dumps(error, sort_keys=True) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config, args.seed)
    except ConfigError as exc:
        return _report(exc.to_dict(), 2)

    ctx = None
    try:
        ctx = RunContext(args, config)
        ctx.json(RESOLVED_CONFIG, "resolved_config",
                 {'config': config.resolved(), 'config_hash': config.config_hash()})
        COMMANDS[args.command](ctx)
    except ToolkitError as exc:
        error = exc.to_dict()
    except ValidationError as exc:
        error = ConfigError.from_validation(exc).to_dict()
    else:
        ctx.finish()
        return 0
    if ctx is not None:
        ctx.finish(error)
    return _report(error, 1)


if __name__ == "__main__":
    sys.exit(main())
