"""
Run ledger.

SQLite record of every CLI run, its artifacts and its aggregate metrics.
The CLI reads a run back only to log its summary; no computation uses it.
"""

import json
import sqlite3
import uuid
from datetime import datetime, timezone
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Optional

logger = getLogger(__name__)

__all__ = ['ExperimentDatabase']


class ExperimentDatabase:
    def __init__(self, db_path: str = "runs.db"):
        self.db_path = Path(db_path)
        self.conn: Optional[sqlite3.Connection] = None
        self.initialize_database()

    def connect(self):
        """Establish database connection"""
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self.conn.row_factory = sqlite3.Row
        return self.conn

    def initialize_database(self):
        conn = self.connect()
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT UNIQUE NOT NULL,
                subcommand TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                seed INTEGER,
                status TEXT DEFAULT 'running',
                output_dir TEXT,
                error TEXT,
                started_at TIMESTAMP NOT NULL,
                finished_at TIMESTAMP
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS artifacts (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                name TEXT NOT NULL,
                path TEXT NOT NULL,
                sha256 TEXT NOT NULL,
                schema TEXT,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                scheduler TEXT NOT NULL,
                subchannels INTEGER NOT NULL,
                seeds INTEGER NOT NULL,
                reward REAL,
                rebuffer_fraction REAL,
                base_only_fraction REAL,
                summary TEXT,
                FOREIGN KEY (run_id) REFERENCES runs(run_id)
            )
        """)

        conn.commit()
        conn.close()

    def start_run(self, subcommand: str, config_hash: str, seed: Optional[int] = None,
                  output_dir: Optional[str] = None) -> str:
        run_id = f"RUN-{uuid.uuid4().hex[:12].upper()}"
        conn = self.connect()
        conn.execute("""
            INSERT INTO runs (run_id, subcommand, config_hash, seed, output_dir, started_at)
            VALUES (?, ?, ?, ?, ?, ?)
        """, (run_id, subcommand, config_hash, seed, output_dir, _now()))
        conn.commit()
        conn.close()
        logger.debug("ledger: started %s (%s)", run_id, subcommand)
        return run_id

    def finish_run(self, run_id: str, status: str = "completed", error: Optional[Dict] = None):
        conn = self.connect()
        conn.execute("""
            UPDATE runs SET status = ?, error = ?, finished_at = ? WHERE run_id = ?
        """, (status, json.dumps(error, sort_keys=True) if error else None, _now(), run_id))
        conn.commit()
        conn.close()

    def record_artifact(self, run_id: str, artifact: Dict) -> bool:
        conn = self.connect()
        conn.execute("""
            INSERT INTO artifacts (run_id, name, path, sha256, schema)
            VALUES (?, ?, ?, ?, ?)
        """, (run_id, artifact.get('name'), artifact.get('path'), artifact.get('sha256'),
              artifact.get('schema')))
        conn.commit()
        conn.close()
        return True

    def record_metrics(self, run_id: str, scheduler: str, subchannels: int, seeds: int,
                       summary: Dict) -> bool:
        conn = self.connect()
        conn.execute("""
            INSERT INTO metrics (run_id, scheduler, subchannels, seeds, reward,
                                 rebuffer_fraction, base_only_fraction, summary)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """, (run_id, scheduler, subchannels, seeds, summary.get('reward'),
              summary.get('rebuffer_fraction'), summary.get('base_only_fraction'),
              json.dumps(summary, sort_keys=True)))
        conn.commit()
        conn.close()
        return True

    def get_run(self, run_id: str) -> Optional[Dict]:
        conn = self.connect()
        row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        conn.close()
        return dict(row) if row else None

    def get_artifacts(self, run_id: str) -> List[Dict]:
        conn = self.connect()
        rows = conn.execute("SELECT * FROM artifacts WHERE run_id = ? ORDER BY id", (run_id,)).fetchall()
        conn.close()
        return [dict(row) for row in rows]

    def get_metrics(self, scheduler: Optional[str] = None, run_id: Optional[str] = None) -> List[Dict]:
        clauses, params = [], []
        if scheduler:
            clauses.append("scheduler = ?")
            params.append(scheduler)
        if run_id:
            clauses.append("run_id = ?")
            params.append(run_id)
        where = f" WHERE {' AND '.join(clauses)}" if clauses else ""
        conn = self.connect()
        rows = conn.execute(f"SELECT * FROM metrics{where} ORDER BY id", params).fetchall()
        conn.close()
        return [dict(row) for row in rows]

    def get_statistics(self) -> Dict:
        conn = self.connect()
        cursor = conn.cursor()

        stats = {}
        cursor.execute("SELECT COUNT(*) as count FROM runs")
        stats['total_runs'] = cursor.fetchone()['count']

        cursor.execute("SELECT COUNT(*) as count FROM runs WHERE status = 'failed'")
        stats['failed_runs'] = cursor.fetchone()['count']

        cursor.execute("SELECT COUNT(*) as count FROM artifacts")
        stats['total_artifacts'] = cursor.fetchone()['count']

        cursor.execute("SELECT subcommand, COUNT(*) as count FROM runs GROUP BY subcommand ORDER BY subcommand")
        stats['runs_by_subcommand'] = {row['subcommand']: row['count'] for row in cursor.fetchall()}

        conn.close()
        return stats


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()
