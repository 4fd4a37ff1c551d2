"""Byte-stable persistence of run logs: per-frame JSONL, resolved config and
an aggregate summary."""

from __future__ import annotations

import json
import math
from pathlib import Path

from .adapt import RunLog

RUN_LOG_NAME = "run.jsonl"
SUMMARY_NAME = "summary.json"
CONFIG_NAME = "config.resolved.json"


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def summarize(log: RunLog) -> dict:
    summary = {
        "frames": len(log.records),
        "method": log.method,
        "seed": log.seed,
        "config_hash": log.config_hash,
        "n_prompts": log.n_prompts if log.records else 0,
        "mean_miou_xm": log.mean("miou_xm") if log.records else None,
        "mean_miou_2d": log.mean("miou_2d") if log.records else None,
        "mean_miou_3d": log.mean("miou_3d") if log.records else None,
        "per_class_iou": log.mean_class_iou(),
    }
    return _jsonable(summary)


def persist_run(log: RunLog, out_dir, resolved_config: str = None) -> dict:
    """Write run.jsonl (omitted when no frames ran), summary.json and, when
    given, config.resolved.json. Returns the summary dict."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if log.records:
            lines = "".join(_dump(r) + "\n" for r in log.records)
            (out / RUN_LOG_NAME).write_text(lines, encoding="utf-8")
        summary = summarize(log)
        (out / SUMMARY_NAME).write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        if resolved_config is not None:
            (out / CONFIG_NAME).write_text(resolved_config, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write run artifacts under {out}: {exc}") from exc
    return summary


def read_run_log(path) -> list:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
