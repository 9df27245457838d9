from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable

from common.errors import ArtifactIOError, ValidationError


def dumps(record: dict[str, Any]) -> str:
    # sorted keys + fixed separators keep files byte-identical across runs
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_records(path: str | Path, records: Iterable[dict[str, Any]]) -> Path:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", encoding="utf-8", newline="\n") as f:
            for r in records:
                f.write(dumps(r))
                f.write("\n")
    except OSError as e:
        raise ArtifactIOError(p, e) from e
    return p


def append_record(path: str | Path, record: dict[str, Any]) -> None:
    p = Path(path)
    try:
        with p.open("a", encoding="utf-8", newline="\n") as f:
            f.write(dumps(record))
            f.write("\n")
    except OSError as e:
        raise ArtifactIOError(p, e) from e


def read_records(path: str | Path) -> list[dict[str, Any]]:
    """
    Reads a line-delimited JSON file. Blank lines are skipped.
    Malformed lines raise ValidationError naming the 1-based line number.
    """
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactIOError(p, e) from e

    out: list[dict[str, Any]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{p}:{lineno}: malformed record ({e.msg})") from e
        if not isinstance(rec, dict):
            raise ValidationError(f"{p}:{lineno}: record must be an object, got {type(rec).__name__}")
        out.append(rec)
    return out
