"""
Record Store for the critical loop-soup laboratory

This module implements the checkpoint store of experiment runs: an SQLite
database holding the canonical config of every run and its append-only
result records, plus the atomic JSON-lines export that is rewritten after
each completed scale.
"""

import os
import json
import sqlite3
import logging
import tempfile
from typing import List, Dict, Any, Iterable, Optional, Set

from config import RUN_CONFIG, SCHEMA_VERSION
from errors import StorageError, SchemaMismatchError

logger = logging.getLogger(__name__)

# Record fields in storage and export order
RECORD_FIELDS = (
    "config_hash",
    "kind",
    "scale_key",
    "scale",
    "label",
    "estimate",
    "stderr",
    "ci_lo",
    "ci_hi",
    "replicas",
    "wall_time",
    "annex",
    "schema_version",
)


def record_line(record: Dict[str, Any], include_timing: bool = False) -> str:
    """
    Serialize one record as a JSON line.

    Args:
        record: Record dictionary with the RECORD_FIELDS keys
        include_timing: Keep wall_time; it is dropped by default so that
            exports are identical between runs

    Returns:
        Compact JSON with sorted keys and no trailing newline
    """
    data = {key: record.get(key) for key in RECORD_FIELDS if key != "wall_time" or include_timing}
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def write_jsonl(path: str, lines: Iterable[str]) -> None:
    """
    Replace a file with the given lines in one step.

    The text goes to a temporary file in the same directory, which is then
    moved over the target with os.replace.

    Raises:
        StorageError: if the file cannot be written
    """
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(prefix=".records-", suffix=".tmp", dir=directory)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
                for line in lines:
                    f.write(line)
                    f.write("\n")
            os.replace(tmp_path, path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.unlink(tmp_path)
            raise
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    """
    Read a JSON-lines record file.

    Raises:
        StorageError: if the file is missing or a line is not JSON
        SchemaMismatchError: if a record carries another schema version
    """
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise StorageError(f"{path}:{number}: not a JSON record ({e})") from e
                if record.get("schema_version") != SCHEMA_VERSION:
                    raise SchemaMismatchError(
                        f"{path}:{number}: record schema {record.get('schema_version')!r}, expected {SCHEMA_VERSION}"
                    )
                records.append(record)
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e
    return records


class RecordStore:
    """
    SQLite store of run configs and their result records.

    Records are only ever inserted; every scale is written in one
    transaction so an interrupted or failing write leaves no partial scale.
    """

    def __init__(self, directory: str, db_name: str = RUN_CONFIG["db_name"]):
        """
        Initialize the store.

        Args:
            directory: Run directory holding the database
            db_name: Database file name

        Raises:
            StorageError: if the directory cannot be created
        """
        self.directory = directory
        self.db_path = os.path.join(directory, db_name)
        try:
            os.makedirs(directory, exist_ok=True)
        except OSError as e:
            raise StorageError(f"cannot create output directory {directory}: {e}") from e
        self.initialize_db()

    def get_connection(self) -> sqlite3.Connection:
        """
        Get a connection to the SQLite database.

        Returns:
            SQLite connection object
        """
        try:
            conn = sqlite3.connect(self.db_path)
        except sqlite3.Error as e:
            raise StorageError(f"cannot open {self.db_path}: {e}") from e
        conn.row_factory = sqlite3.Row
        return conn

    def initialize_db(self) -> None:
        """Create the tables and indexes if they don't exist."""
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            cursor.execute('''
            CREATE TABLE IF NOT EXISTS configs (
                config_hash TEXT PRIMARY KEY,
                canonical TEXT NOT NULL,
                created DATETIME DEFAULT CURRENT_TIMESTAMP
            )
            ''')
            cursor.execute('''
            CREATE TABLE IF NOT EXISTS records (
                record_id INTEGER PRIMARY KEY AUTOINCREMENT,
                config_hash TEXT NOT NULL,
                kind TEXT NOT NULL,
                scale_key TEXT NOT NULL,
                scale REAL NOT NULL,
                label TEXT NOT NULL,
                estimate REAL,
                stderr REAL,
                ci_lo REAL,
                ci_hi REAL,
                replicas INTEGER NOT NULL,
                wall_time REAL NOT NULL,
                annex TEXT NOT NULL,
                schema_version INTEGER NOT NULL,
                UNIQUE (config_hash, scale_key, label)
            )
            ''')
            cursor.execute('''
            CREATE INDEX IF NOT EXISTS idx_records_scale ON records(config_hash, scale_key)
            ''')
            conn.commit()
        except sqlite3.Error as e:
            raise StorageError(f"cannot initialize {self.db_path}: {e}") from e
        finally:
            conn.close()

    def register_config(self, config_hash: str, canonical: str) -> None:
        """
        Store the canonical JSON of a config under its hash.

        Raises:
            StorageError: if the hash is already bound to different JSON
        """
        conn = self.get_connection()
        try:
            row = conn.execute("SELECT canonical FROM configs WHERE config_hash = ?", (config_hash,)).fetchone()
            if row is not None:
                if row["canonical"] != canonical:
                    raise StorageError(f"config hash {config_hash[:12]} is bound to a different config")
                return
            with conn:
                conn.execute("INSERT INTO configs (config_hash, canonical) VALUES (?, ?)", (config_hash, canonical))
        except sqlite3.Error as e:
            raise StorageError(f"cannot register config {config_hash[:12]}: {e}") from e
        finally:
            conn.close()

    def get_config(self, config_hash: str) -> Optional[str]:
        """Canonical JSON stored for a hash, or None."""
        conn = self.get_connection()
        try:
            row = conn.execute("SELECT canonical FROM configs WHERE config_hash = ?", (config_hash,)).fetchone()
        finally:
            conn.close()
        return row["canonical"] if row is not None else None

    def config_hashes(self) -> List[str]:
        conn = self.get_connection()
        try:
            rows = conn.execute("SELECT config_hash FROM configs ORDER BY created, config_hash").fetchall()
        finally:
            conn.close()
        return [row["config_hash"] for row in rows]

    def append_records(self, records: List[Dict[str, Any]]) -> int:
        """
        Insert the records of one scale in a single transaction.

        Args:
            records: Record dictionaries with the RECORD_FIELDS keys

        Returns:
            Number of inserted records

        Raises:
            StorageError: if any insert fails; nothing is written then
        """
        if not records:
            return 0
        rows = []
        for record in records:
            row = dict(record)
            row["annex"] = json.dumps(record["annex"], sort_keys=True, separators=(",", ":"), allow_nan=False)
            rows.append(tuple(row[key] for key in RECORD_FIELDS))
        placeholders = ", ".join("?" for _ in RECORD_FIELDS)
        conn = self.get_connection()
        try:
            with conn:
                conn.executemany(f"INSERT INTO records ({', '.join(RECORD_FIELDS)}) VALUES ({placeholders})", rows)
        except sqlite3.Error as e:
            logger.error("Rolled back %d records: %s", len(rows), e)
            raise StorageError(f"cannot append records to {self.db_path}: {e}") from e
        finally:
            conn.close()
        return len(rows)

    def completed_scales(self, config_hash: str) -> Set[str]:
        """Scale keys that already have records for a config."""
        conn = self.get_connection()
        try:
            rows = conn.execute("SELECT DISTINCT scale_key FROM records WHERE config_hash = ?", (config_hash,)).fetchall()
        except sqlite3.Error as e:
            raise StorageError(f"cannot read {self.db_path}: {e}") from e
        finally:
            conn.close()
        return {row["scale_key"] for row in rows}

    def get_records(self, config_hash: Optional[str] = None) -> List[Dict[str, Any]]:
        """
        Read records back in insertion order.

        Args:
            config_hash: Restrict to one config; all records when None

        Returns:
            Record dictionaries with the annex decoded
        """
        query = f"SELECT {', '.join(RECORD_FIELDS)} FROM records"
        params: tuple = ()
        if config_hash is not None:
            query += " WHERE config_hash = ?"
            params = (config_hash,)
        query += " ORDER BY record_id"
        conn = self.get_connection()
        try:
            rows = conn.execute(query, params).fetchall()
        except sqlite3.Error as e:
            raise StorageError(f"cannot read {self.db_path}: {e}") from e
        finally:
            conn.close()
        records = []
        for row in rows:
            record = {key: row[key] for key in RECORD_FIELDS}
            record["annex"] = json.loads(record["annex"])
            records.append(record)
        return records

    def export_jsonl(self, path: Optional[str] = None, include_timing: bool = False) -> str:
        """
        Rewrite the JSON-lines export of every stored record.

        Returns:
            Path of the written file
        """
        path = path or os.path.join(self.directory, RUN_CONFIG["records_name"])
        write_jsonl(path, (record_line(r, include_timing) for r in self.get_records()))
        return path
