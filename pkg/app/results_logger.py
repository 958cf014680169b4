"""
Results Logger for kernel_lab experiments
Writes long-format CSV rows with a fixed column order and full float precision
"""
import csv
import logging
import math
import os
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '.17g'


def format_value(value: Any) -> str:
    """Locale-free cell text: 17 significant digits, true/false, nan/inf"""
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return 'nan'
        if math.isinf(v):
            return 'inf' if v > 0 else '-inf'
        return format(v, FLOAT_FORMAT)
    return str(value)


def parse_value(text: str) -> Any:
    """Inverse of format_value for the types written by experiments"""
    if text == '':
        return None
    if text in ('true', 'false'):
        return text == 'true'
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


class ResultsLogger:
    """Append-only CSV writer shared by replicate threads"""

    def __init__(self, path: str, columns: Sequence[str]):
        if not columns:
            raise ValueError("results logger needs at least one column")
        self.path = path
        self.columns = list(columns)
        self.rows_written = 0
        self._lock = threading.RLock()
        self._file = None
        self._writer = None

    def _ensure_open(self):
        """Create the parent directory and write the header on first use"""
        if self._file is not None:
            return
        parent = os.path.dirname(self.path)
        if parent:
            Path(parent).mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, 'w', encoding='utf-8', newline='')
        self._writer = csv.writer(self._file, lineterminator='\n')
        self._writer.writerow(self.columns)

    def log_row(self, row: Mapping[str, Any]):
        """
        Write one row

        Args:
            row: mapping with exactly the logger's columns
        """
        missing = [c for c in self.columns if c not in row]
        extra = [k for k in row if k not in self.columns]
        if missing or extra:
            raise ValueError(f"row columns do not match header (missing {missing}, extra {extra})")
        with self._lock:
            self._ensure_open()
            self._writer.writerow([format_value(row[c]) for c in self.columns])
            self.rows_written += 1

    def log_rows(self, rows: Iterable[Mapping[str, Any]]):
        with self._lock:
            for row in rows:
                self.log_row(row)

    def close(self):
        with self._lock:
            if self._file is None:
                # header-only file for runs that produced no rows
                self._ensure_open()
            self._file.close()
            self._file = None
            self._writer = None
        logger.info(f"Wrote {self.rows_written} rows to {self.path}")

    def __enter__(self) -> 'ResultsLogger':
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def read_results(path: str, columns: Optional[Sequence[str]] = None) -> List[Dict[str, Any]]:
    """
    Parse a results CSV back into typed rows

    Args:
        path: CSV written by ResultsLogger
        columns: expected header; checked when given
    """
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return []
        if columns is not None and list(columns) != header:
            raise ValueError(f"unexpected header {header}, expected {list(columns)}")
        return [dict(zip(header, (parse_value(cell) for cell in row))) for row in reader]
