import json
from pathlib import Path
from typing import Optional

import jsonschema
import pytest

from src import main as cli
from src.tensor_core import Rng

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schemas"


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def validate():
    """validate(name, payload) checks *payload* against schemas/<name>.schema.json."""

    def _validate(name: str, payload: dict) -> None:
        schema = json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text())
        jsonschema.validate(payload, schema)

    return _validate


@pytest.fixture
def run_cli(monkeypatch):
    """run_cli(*argv) -> exit code; stdout/stderr via capsys in the test."""
    for name in ("PSCONV_THREADS", "PSCONV_LOG_LEVEL", "PSCONV_SEED", "PSCONV_PATTERN",
                 "PSCONV_BENCH_REPEATS", "PSCONV_BENCH_WARMUP"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("PSCONV_THREADS", "1")

    def _run(*argv: str) -> int:
        try:
            cli.main(list(argv))
        except SystemExit as exc:
            code: Optional[int] = exc.code if isinstance(exc.code, int) else 1
            return code or 0
        return 0

    return _run
