"""Export and re-import of joint-attention traces.

CSV layout (one row per matrix entry)::

    sequence_id,mechanism,matrix_name,i,j,value

with ``matrix_name`` in ``e, f, alpha, beta``. A companion file
``<name>.summary.csv`` holds the per-frame series::

    sequence_id,mechanism,stream,frame,mean_score,negative

``mean_score`` is the frame's mean pre-softmax score as a key (spatial frame
i: mean over j of ``e[i, j]``; temporal frame j: mean over i of ``f[i, j]``)
and ``negative`` is 1 when that mean is below zero.

A ``.json`` path stores both tables in one document under ``rows`` and
``summary``.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .attention import AttentionTrace

TRACE_FORMAT = "jointattn-trace"
TRACE_VERSION = 1
ROW_FIELDS = ["sequence_id", "mechanism", "matrix_name", "i", "j", "value"]
SUMMARY_FIELDS = ["sequence_id", "mechanism", "stream", "frame", "mean_score", "negative"]
MATRICES = ("e", "f", "alpha", "beta")


def frame_summary(trace: AttentionTrace) -> list[tuple[str, int, float, bool]]:
    """(stream, frame, mean pre-softmax score, negative?) for every frame of both streams."""
    out = []
    for stream, scores in (("spatial", trace.e.mean(axis=1)), ("temporal", trace.f.mean(axis=0))):
        for k, s in enumerate(scores):
            out.append((stream, k, float(s), bool(s < 0)))
    return out


def trace_rows(trace: AttentionTrace, sequence_id=0, mechanism: str = "jna") -> list[list]:
    rows = []
    for name in MATRICES:
        m = getattr(trace, name)
        for i in range(m.shape[0]):
            for j in range(m.shape[1]):
                rows.append([sequence_id, mechanism, name, i, j, float(m[i, j])])
    return rows


def summary_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.csv")


def export_traces(items: Iterable[tuple[object, AttentionTrace]], path: str | Path,
                  mechanism: str = "jna") -> None:
    path = Path(path)
    rows, summary = [], []
    for seq_id, trace in items:
        rows.extend(trace_rows(trace, seq_id, mechanism))
        for stream, frame, score, neg in frame_summary(trace):
            summary.append([seq_id, mechanism, stream, frame, score, int(neg)])
    if path.suffix == ".json":
        payload = {
            "format": TRACE_FORMAT, "version": TRACE_VERSION,
            "rows": [dict(zip(ROW_FIELDS, r)) for r in rows],
            "summary": [dict(zip(SUMMARY_FIELDS, r)) for r in summary],
        }
        path.write_text(json.dumps(payload, indent=1))
        return
    for target, header, body in ((path, ROW_FIELDS, rows), (summary_path(path), SUMMARY_FIELDS, summary)):
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[repr(x) if isinstance(x, float) else x for x in r] for r in body])


def export_trace(trace: AttentionTrace, path: str | Path, sequence_id=0, mechanism: str = "jna") -> None:
    export_traces([(sequence_id, trace)], path, mechanism)


def load_traces(path: str | Path) -> dict[str, AttentionTrace]:
    """Re-import an exported file; keys are sequence ids as strings."""
    path = Path(path)
    if path.suffix == ".json":
        payload = json.loads(path.read_text())
        if payload.get("format") != TRACE_FORMAT:
            raise ValueError(f"{path} is not a trace export")
        records = [(str(r["sequence_id"]), r["matrix_name"], int(r["i"]), int(r["j"]), float(r["value"]))
                   for r in payload["rows"]]
    else:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ROW_FIELDS:
                raise ValueError(f"unexpected trace header {reader.fieldnames}")
            records = [(r["sequence_id"], r["matrix_name"], int(r["i"]), int(r["j"]), float(r["value"]))
                       for r in reader]
    grouped: dict[str, dict[str, list]] = {}
    for seq, name, i, j, v in records:
        grouped.setdefault(seq, {}).setdefault(name, []).append((i, j, v))
    traces = {}
    for seq, mats in grouped.items():
        built = {}
        for name in MATRICES:
            entries = mats.get(name, [])
            n = 1 + max(max(i, j) for i, j, _ in entries)
            m = np.zeros((n, n))
            for i, j, v in entries:
                m[i, j] = v
            built[name] = m
        traces[seq] = AttentionTrace(**built)
    return traces
