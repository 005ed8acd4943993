"""
SQLite ledger of benchmark runs.

Every harness invocation is stored as one ``benchmarks`` row and each
pipeline run as one ``benchmark_runs`` row pointing at it.
"""

import logging
import sqlite3
from datetime import datetime, timezone
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

DATABASE_FILE = "salient_benchmark.db"


class BenchmarkDatabase:
    """Manages the SQLite database of benchmark runs."""

    def __init__(self, db_path: str = DATABASE_FILE):
        self.db_path = db_path
        self.init_database()

    def init_database(self) -> None:
        with sqlite3.connect(self.db_path) as conn:
            conn.execute('''
                CREATE TABLE IF NOT EXISTS benchmarks (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    started_at TIMESTAMP NOT NULL,
                    dataset TEXT NOT NULL,
                    selection_mode TEXT NOT NULL,
                    num_points INTEGER NOT NULL,
                    runs INTEGER NOT NULL,
                    config TEXT NOT NULL
                )
            ''')
            conn.execute('''
                CREATE TABLE IF NOT EXISTS benchmark_runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    benchmark_id INTEGER NOT NULL REFERENCES benchmarks (id),
                    run_index INTEGER NOT NULL,
                    seed INTEGER NOT NULL,
                    direction TEXT NOT NULL,
                    success INTEGER NOT NULL,
                    status TEXT NOT NULL,
                    failure_cause TEXT,
                    frames_processed INTEGER NOT NULL,
                    frames_total INTEGER NOT NULL,
                    keyframes INTEGER NOT NULL DEFAULT 0,
                    elapsed_seconds REAL NOT NULL DEFAULT 0.0,
                    rmse_ate REAL,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            ''')
            conn.execute('''
                CREATE INDEX IF NOT EXISTS idx_runs_benchmark
                ON benchmark_runs (benchmark_id)
            ''')

    def start_benchmark(self, dataset: str, selection_mode: str, num_points: int, runs: int, config: str) -> int:
        started_at = datetime.now(timezone.utc).isoformat()
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute('''
                INSERT INTO benchmarks (started_at, dataset, selection_mode, num_points, runs, config)
                VALUES (?, ?, ?, ?, ?, ?)
            ''', (started_at, dataset, selection_mode, num_points, runs, config))
            benchmark_id = cursor.lastrowid
            if benchmark_id is None:
                raise RuntimeError("Failed to get ID for inserted benchmark record")
        logger.info(f"Started benchmark {benchmark_id} on {dataset} ({selection_mode}, {runs} runs)")
        return benchmark_id

    def save_run(self, benchmark_id: int, record: Dict) -> int:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute('''
                INSERT INTO benchmark_runs
                (benchmark_id, run_index, seed, direction, success, status, failure_cause,
                 frames_processed, frames_total, keyframes, elapsed_seconds, rmse_ate)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            ''', (
                benchmark_id,
                record["run_index"],
                record["seed"],
                record["direction"],
                int(bool(record["success"])),
                record["status"],
                record.get("failure_cause"),
                record["frames_processed"],
                record["frames_total"],
                record.get("keyframes", 0),
                record.get("elapsed_seconds", 0.0),
                record.get("rmse_ate"),
            ))
            return cursor.lastrowid

    def get_runs(self, benchmark_id: int) -> List[Dict]:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute('''
                SELECT * FROM benchmark_runs
                WHERE benchmark_id = ?
                ORDER BY direction, run_index
            ''', (benchmark_id,))
            columns = [desc[0] for desc in cursor.description]
            return [dict(zip(columns, row)) for row in cursor.fetchall()]

    def get_success_rates(self, benchmark_id: int) -> Dict[str, float]:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute('''
                SELECT direction, AVG(success) FROM benchmark_runs
                WHERE benchmark_id = ?
                GROUP BY direction
            ''', (benchmark_id,))
            return {direction: float(rate) for direction, rate in cursor.fetchall()}

    def get_latest_benchmark(self) -> Optional[Dict]:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.execute("SELECT * FROM benchmarks ORDER BY id DESC LIMIT 1")
            row = cursor.fetchone()
            if not row:
                return None
            columns = [desc[0] for desc in cursor.description]
            return dict(zip(columns, row))
