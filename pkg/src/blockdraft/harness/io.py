"""Artifact readers and writers: JSON reports, CSV tables, JSONL decode traces."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

from ..engine import CycleRecord, DecodeTrace

SCHEMA_VERSION = 1


def dump_json(obj: dict) -> str:
    body = {"schema_version": SCHEMA_VERSION}
    body.update({k: v for k, v in obj.items() if k != "schema_version"})
    return json.dumps(body, indent=2, allow_nan=True) + "\n"


def write_json(path: Path, obj: dict) -> Path:
    path = Path(path)
    path.write_text(dump_json(obj))
    return path


def read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text())


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def trace_header(tr: DecodeTrace, target_hash: str = "", drafter_hash: str = "") -> dict:
    return {
        "type": "header",
        "schema_version": SCHEMA_VERSION,
        "seed": tr.seed,
        "stream_id": tr.stream_id,
        "k": tr.k,
        "T": tr.temperature,
        "drafter_kind": tr.drafter_kind,
        "prompt": list(tr.prompt),
        "target_hash": target_hash,
        "drafter_hash": drafter_hash,
    }


def write_traces(path: Path, traces: Sequence[DecodeTrace], target_hash: str = "", drafter_hash: str = "") -> Path:
    """One header line per trace followed by one line per cycle."""
    path = Path(path)
    with path.open("w") as fh:
        for tr in traces:
            fh.write(json.dumps(trace_header(tr, target_hash, drafter_hash)) + "\n")
            for c in tr.cycles:
                fh.write(json.dumps({"type": "cycle", **c.to_dict()}) + "\n")
    return path


def read_traces(path: Path) -> list[DecodeTrace]:
    traces: list[DecodeTrace] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.get("type")
        if kind == "header":
            traces.append(
                DecodeTrace(
                    prompt=tuple(rec["prompt"]),
                    seed=rec["seed"],
                    stream_id=rec.get("stream_id", 0),
                    k=rec["k"],
                    temperature=rec["T"],
                    drafter_kind=rec.get("drafter_kind", "factorized"),
                )
            )
        elif kind == "cycle":
            if not traces:
                raise ValueError(f"{path}:{lineno}: cycle record before any header")
            traces[-1].cycles.append(CycleRecord.from_dict(rec))
        else:
            raise ValueError(f"{path}:{lineno}: unknown record type {kind!r}")
    for tr in traces:
        out = list(tr.prompt)
        for c in tr.cycles:
            out.extend(c.emitted)
        tr.output = tuple(out)
    return traces
