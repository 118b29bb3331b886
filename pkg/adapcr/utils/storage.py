import os
import uuid
from pathlib import Path

import polars as pl

from .logger import logger


def tmp_path_for(path: Path | str) -> str:
    return f"{path}.{uuid.uuid4().hex}.tmp"


def ensure_parent(path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_ndjson_atomic(df: pl.DataFrame, path: Path | str) -> None:
    """Write a frame as JSONL and publish it with an atomic replace."""
    path = ensure_parent(path)
    tmp_path = tmp_path_for(path)
    logger.info(f"Saving into {path}.", extra={"fields": {"rows": df.height}})
    df.write_ndjson(tmp_path)
    # Atomic replace (POSIX-safe)
    os.replace(tmp_path, path)


def write_csv_atomic(df: pl.DataFrame, path: Path | str) -> None:
    path = ensure_parent(path)
    tmp_path = tmp_path_for(path)
    logger.info(f"Saving into {path}.", extra={"fields": {"rows": df.height}})
    df.write_csv(tmp_path)
    # Atomic replace (POSIX-safe)
    os.replace(tmp_path, path)


def write_text_atomic(text: str, path: Path | str) -> None:
    path = ensure_parent(path)
    tmp_path = tmp_path_for(path)
    with open(tmp_path, "w", encoding="utf-8") as f:
        f.write(text)
    # Atomic replace (POSIX-safe)
    os.replace(tmp_path, path)


def read_ndjson(path: Path | str, schema: dict) -> pl.DataFrame:
    """Read a JSONL table; an empty file reads as an empty frame with `schema`."""
    path = Path(path)
    if path.stat().st_size == 0:
        return pl.DataFrame(schema=schema)
    return pl.read_ndjson(path, schema=schema)


def iter_lines(path: Path | str):
    """Yield (line_number, stripped line) for every non-blank line, 1-based."""
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()
            if line:
                yield line_number, line
