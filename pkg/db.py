import os
import sqlite3
import time

# Ledger location follows the output root unless LOCLAB_DB_PATH points elsewhere
# (e.g. a shared disk when several output roots should share one record).
DB_FILENAME = "ledger.db"


def db_path(root: str) -> str:
    return os.getenv("LOCLAB_DB_PATH") or os.path.join(root, DB_FILENAME)


def init_db(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with sqlite3.connect(path) as conn:
        conn.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                hash TEXT NOT NULL,
                kind TEXT NOT NULL,
                status TEXT NOT NULL,
                path TEXT NOT NULL,
                wall_time REAL,
                updated REAL NOT NULL,
                PRIMARY KEY (hash, kind)
            )
            """
        )
        conn.execute(
            """
            CREATE TABLE IF NOT EXISTS cells (
                sweep_hash TEXT NOT NULL,
                cell_id TEXT NOT NULL,
                status TEXT NOT NULL,
                error TEXT,
                updated REAL NOT NULL,
                PRIMARY KEY (sweep_hash, cell_id)
            )
            """
        )


def record_run(path: str, run_hash: str, kind: str, status: str, run_dir: str,
               wall_time: float | None = None) -> None:
    with sqlite3.connect(path) as conn:
        conn.execute(
            """
            INSERT INTO runs (hash, kind, status, path, wall_time, updated)
            VALUES (?, ?, ?, ?, ?, ?)
            ON CONFLICT(hash, kind) DO UPDATE SET
                status = excluded.status,
                path = excluded.path,
                wall_time = excluded.wall_time,
                updated = excluded.updated
            """,
            (run_hash, kind, status, run_dir, wall_time, time.time()),
        )


def get_run(path: str, run_hash: str, kind: str) -> tuple[str, str, str, float | None] | None:
    """(kind, status, path, wall_time) for a hash and run kind, or None when never recorded."""
    with sqlite3.connect(path) as conn:
        row = conn.execute(
            "SELECT kind, status, path, wall_time FROM runs WHERE hash = ? AND kind = ?",
            (run_hash, kind),
        ).fetchone()
    return (row[0], row[1], row[2], row[3]) if row else None


def record_cell(path: str, sweep_hash: str, cell_id: str, status: str,
                error: str | None = None) -> None:
    with sqlite3.connect(path) as conn:
        conn.execute(
            """
            INSERT INTO cells (sweep_hash, cell_id, status, error, updated)
            VALUES (?, ?, ?, ?, ?)
            ON CONFLICT(sweep_hash, cell_id) DO UPDATE SET
                status = excluded.status,
                error = excluded.error,
                updated = excluded.updated
            """,
            (sweep_hash, cell_id, status, error, time.time()),
        )


def completed_cells(path: str, sweep_hash: str) -> set[str]:
    with sqlite3.connect(path) as conn:
        try:
            rows = conn.execute(
                "SELECT cell_id FROM cells WHERE sweep_hash = ? AND status = 'ok'",
                (sweep_hash,),
            ).fetchall()
        except sqlite3.OperationalError:
            return set()
    return {row[0] for row in rows}


def clear_sweep(path: str, sweep_hash: str) -> None:
    with sqlite3.connect(path) as conn:
        conn.execute("DELETE FROM cells WHERE sweep_hash = ?", (sweep_hash,))
