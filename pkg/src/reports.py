"""
JSON and CSV emission for command reports.

Every command writes its report either to a path (``--out``/``--csv``) or,
when no path is given, to stdout.  Logging goes to stderr, so stdout stays
parseable.  Write failures surface as OSError for the CLI to map onto exit
code 2.
"""

import csv
import io
import json
import logging
import os
import sys
from typing import Iterable, Mapping, Optional, Sequence

logger = logging.getLogger(__name__)


def _open_target(path: Optional[str]):
    if path is None or path == "-":
        return None
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return open(path, "w", encoding="utf-8", newline="")


def write_json(payload: Mapping, path: Optional[str] = None) -> None:
    """Write *payload* as indented UTF-8 JSON to *path*, or stdout if None."""
    text = json.dumps(payload, indent=2, sort_keys=False) + "\n"
    fh = _open_target(path)
    if fh is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with fh:
        fh.write(text)
    logger.info("Wrote JSON report to %s", path)


def csv_text(rows: Iterable[Mapping], fieldnames: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_csv(rows: Iterable[Mapping], fieldnames: Sequence[str], path: Optional[str] = None) -> None:
    text = csv_text(rows, fieldnames)
    fh = _open_target(path)
    if fh is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    with fh:
        fh.write(text)
    logger.info("Wrote CSV report to %s", path)
