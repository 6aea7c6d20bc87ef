"""CSV/JSON artifacts written by the command-line tools."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

RUN_COLUMNS = ["run_id", "seed", "k", "n_k", "T_k", "train_loss", "bellman_error", "gap", "wall_ms"]
SWEEP_COLUMNS = ["run_id", "n", "seed", "final_gap", "wall_ms", "status", "error"]


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON of everything that affects results (not ``output_dir``)."""
    content = {k: v for k, v in config.items() if k != "output_dir"}
    canonical = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: _fmt(row.get(c)) for c in columns})
    return buf.getvalue()


def run_rows(run_id: str, record) -> list[dict]:
    rows = []
    for it in record.iterations:
        rows.append({
            "run_id": run_id,
            "seed": record.seed,
            "k": it.k,
            "n_k": it.n_k,
            "T_k": it.T_k,
            "train_loss": it.train_loss,
            "bellman_error": it.bellman_error,
            "gap": it.gap,
            "wall_ms": it.wall_ms,
        })
    return rows


def write_run_csv(path, rows) -> None:
    atomic_write_text(path, _csv_text(RUN_COLUMNS, rows))


def write_sweep_csv(path, rows) -> None:
    atomic_write_text(path, _csv_text(SWEEP_COLUMNS, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
