"""JSONL instruction datasets: one {"instruction", "input"?, "output"?, "id"?} object per line."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .errors import DatasetError
from .text import PromptRecord


def _optional_text(d: dict, key: str, lineno: int) -> str | None:
    value = d.get(key)
    if value is None:
        return None
    if not isinstance(value, str):
        raise DatasetError(f"field {key!r} must be a string", line=lineno)
    return value


def parse_dataset(path: str | Path) -> list[PromptRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise DatasetError(f"dataset {path} does not exist") from exc
    except UnicodeDecodeError as exc:
        raise DatasetError(f"dataset {path} is not UTF-8: {exc}") from exc
    records = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except ValueError as exc:
            raise DatasetError(f"malformed JSON: {exc}", line=lineno) from exc
        if not isinstance(d, dict):
            raise DatasetError("expected a JSON object", line=lineno)
        instruction = d.get("instruction")
        if not isinstance(instruction, str) or not instruction.strip():
            raise DatasetError("missing or empty 'instruction'", line=lineno)
        rid = str(d["id"]) if d.get("id") is not None else str(lineno)
        if rid in seen:
            raise DatasetError(f"duplicate id {rid!r}", line=lineno)
        seen.add(rid)
        records.append(PromptRecord(
            id=rid,
            instruction=instruction,
            input=_optional_text(d, "input", lineno) or None,
            reference_output=_optional_text(d, "output", lineno),
        ))
    return records


def write_dataset(records: Iterable[PromptRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            d = {"id": r.id, "instruction": r.instruction}
            if r.input:
                d["input"] = r.input
            if r.reference_output is not None:
                d["output"] = r.reference_output
            fh.write(json.dumps(d, ensure_ascii=False) + "\n")
