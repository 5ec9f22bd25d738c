import json
import logging
from pathlib import Path

import pytest

import cli
from config import OUTPUT_DIR_ENV
from database import ExperimentDatabase

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
DESK = str(CONFIG_DIR / "desk.json")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_solve_rb_writes_solution(tmp_path):
    assert cli.main(['solve-rb', '--config', DESK, '--out', str(tmp_path)]) == 0
    document = json.loads((tmp_path / "rb_solution.json").read_text())
    assert document['schema'] == 'rb_solution'
    entry = document['solutions']['2']
    assert len(entry['groups'][0]['x0']) == 32
    assert entry['checks']['duality_gap'] < 1e-7
    resolved = json.loads((tmp_path / "resolved_config.json").read_text())
    assert resolved['config']['discount'] == 0.95


def test_rank_needs_a_solution(tmp_path, capsys):
    assert cli.main(['rank', '--config', DESK, '--out', str(tmp_path)]) == 1
    assert _error(capsys)['error'] == 'artifact_error'
    stats = ExperimentDatabase(str(tmp_path / "runs.db")).get_statistics()
    assert stats['failed_runs'] == 1


def test_solve_then_rank(tmp_path):
    out = str(tmp_path)
    assert cli.main(['solve-rb', '--config', DESK, '--out', out]) == 0
    assert cli.main(['rank', '--config', DESK, '--out', out]) == 0
    ranking = json.loads((tmp_path / "ranking.json").read_text())['rankings']['2']
    assert ranking['num_active'] >= 1
    stats = ExperimentDatabase(str(tmp_path / "runs.db")).get_statistics()
    assert stats['runs_by_subcommand'] == {'rank': 1, 'solve-rb': 1}


def test_rank_rejects_solution_of_another_model(tmp_path, capsys):
    out = str(tmp_path)
    assert cli.main(['solve-rb', '--config', DESK, '--out', out]) == 0
    other = json.loads(Path(DESK).read_text())
    other['discount'] = 0.9
    other_path = tmp_path / "other.json"
    other_path.write_text(json.dumps(other))
    assert cli.main(['rank', '--config', str(other_path), '--out', out]) == 1
    assert 'different model' in _error(capsys)['message']


def test_simulate_is_reproducible(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    for out in (first, second):
        assert cli.main(['simulate', '--config', DESK, '--out', str(out), '--no-ledger']) == 0
    assert (first / "metrics.json").read_bytes() == (second / "metrics.json").read_bytes()
    assert (first / "comparison.csv").read_bytes() == (second / "comparison.csv").read_bytes()
    assert not (first / "runs.db").exists()
    results = json.loads((first / "metrics.json").read_text())['results']
    assert [entry['scheduler'] for entry in results] == ['QAA', 'BEAS', 'PF', 'BCF', 'LBF']


def test_seed_flag(tmp_path):
    assert cli.main(['simulate', '--config', DESK, '--out', str(tmp_path), '--seed', '7', '--trace']) == 0
    results = json.loads((tmp_path / "metrics.json").read_text())['results']
    assert all(entry['seeds'] == [7] for entry in results)
    assert (tmp_path / "trace_QAA_M2_seed7.csv").exists()


def test_run_summary_is_read_back_from_the_ledger(tmp_path, caplog):
    with caplog.at_level(logging.INFO, logger='cli'):
        assert cli.main(['simulate', '--config', DESK, '--out', str(tmp_path), '--seed', '7']) == 0
    lines = [record.getMessage() for record in caplog.records if 'metric rows' in record.getMessage()]
    assert len(lines) == 1
    assert 'completed' in lines[0] and '5 metric rows, best ' in lines[0]
    run_id = lines[0].split()[1]
    ledger = ExperimentDatabase(str(tmp_path / "runs.db"))
    assert len(ledger.get_metrics(run_id=run_id)) == 5
    assert 'metrics.json' in [artifact['name'] for artifact in ledger.get_artifacts(run_id)]


def test_invalid_config_exit_code(tmp_path, capsys):
    data = json.loads(Path(DESK).read_text())
    data['horizon'] = 0
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    assert cli.main(['solve-rb', '--config', str(path), '--out', str(tmp_path)]) == 2
    error = _error(capsys)
    assert error['error'] == 'config_invalid'
    assert error['details']['issues'][0]['path'] == 'horizon'


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert cli.main(['solve-rb', '--config', DESK]) == 0
    assert (tmp_path / "env" / "rb_solution.json").exists()


def test_sweep_and_analyze(tmp_path):
    data = json.loads(Path(DESK).read_text())
    data['subchannels'] = [1, 2, 3]
    path = tmp_path / "desk.json"
    path.write_text(json.dumps(data))
    out = str(tmp_path / "out")
    for command in ('sweep', 'solve-rb', 'rank', 'analyze'):
        assert cli.main([command, '--config', str(path), '--out', out]) == 0
    analysis = json.loads((tmp_path / "out" / "analysis.json").read_text())
    assert set(analysis['subchannels']) == {'1', '2', '3'}
    assert (tmp_path / "out" / "heatmap_g0_M2.csv").exists()
    assert (tmp_path / "out" / "sweep.csv").exists()


def test_highs_on_the_twenty_user_model(tmp_path):
    data = json.loads((CONFIG_DIR / "table1.json").read_text())
    data['subchannels'] = [8]
    data['solver'] = {'method': 'highs'}
    path = tmp_path / "table1.json"
    path.write_text(json.dumps(data))
    assert cli.main(['solve-rb', '--config', str(path), '--out', str(tmp_path), '--export-lp']) == 0
    entry = json.loads((tmp_path / "rb_solution.json").read_text())['solutions']['8']
    assert entry['num_variables'] == 2 * 1764
    assert entry['method'] == 'highs'
    assert (tmp_path / "rb_lp_M8.json").exists()
