"""Trace files: JSONL (full records), CSV (plotting columns), JSON summary."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..diagnostics import StepDiagnostics, convergence_tracker, fit_exponential_law, trace_statistics
from ..errors import ValidationError
from ..policy import SoftmaxPolicy
from .runner import TrainingTrace

FORMATS = ("jsonl", "csv", "summary")
CSV_COLUMNS = ("step", "avg_entropy", "expected_reward", "predicted_dH", "actual_dH", "grad_norm", "cov_term")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def trace_to_jsonl(trace: TrainingTrace) -> str:
    lines = [_dumps({"type": "header", "config_digest": trace.config_digest, "config": trace.config})]
    lines += [_dumps({"type": "step", **r.to_dict()}) for r in trace.records]
    lines.append(
        _dumps(
            {
                "type": "final",
                "final_policy": trace.final_policy.to_json(),
                "diverged": trace.diverged,
                "divergence_step": trace.divergence_step,
            }
        )
    )
    return "\n".join(lines) + "\n"


def trace_from_jsonl(text: str) -> TrainingTrace:
    header, final, records = None, None, []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {n}: {exc}", "trace") from None
        kind = obj.pop("type", None)
        if kind == "header":
            header = obj
        elif kind == "step":
            records.append(StepDiagnostics.from_dict(obj))
        elif kind == "final":
            final = obj
        else:
            raise ValidationError(f"line {n}: unknown record type {kind!r}", "trace")
    if header is None or final is None:
        raise ValidationError("missing header or final line", "trace")
    return TrainingTrace(
        config_digest=header["config_digest"],
        records=records,
        final_policy=SoftmaxPolicy.from_json(final["final_policy"]),
        config=header["config"],
        diverged=final["diverged"],
        divergence_step=final["divergence_step"],
    )


def read_trace(path) -> TrainingTrace:
    return trace_from_jsonl(Path(path).read_text(encoding="utf-8"))


def trace_to_csv(trace: TrainingTrace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in trace.records:
        writer.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c) for c in CSV_COLUMNS])
    return buf.getvalue()


def trace_summary(trace: TrainingTrace, stability=None) -> dict:
    records = trace.records
    out = {
        "config_digest": trace.config_digest,
        "num_records": len(records),
        "diverged": trace.diverged,
        "divergence_step": trace.divergence_step,
    }
    if records:
        last = records[-1]
        out["last_record"] = {"step": last.step, "avg_entropy": last.avg_entropy, "expected_reward": last.expected_reward}
    points = [(r.avg_entropy, r.expected_reward) for r in records]
    if len(points) >= 8:
        try:
            out["exp_fit"] = asdict(fit_exponential_law(points))
        except ValidationError as exc:
            out["exp_fit"] = {"a": None, "b": None, "r_squared": None, "error": str(exc)}
    if len(records) >= 20:
        stats = trace_statistics(records)
        out["pearson_dH_vs_cov"] = stats.pearson_dH_vs_cov
        out["cov_sparsity"] = stats.cov_sparsity
    if records:
        lr = float(trace.config.get("learning_rate", 0.1))
        conv = convergence_tracker(records, learning_rate=lr)
        out["convergence"] = {"rate_ok": conv.rate_ok, "loglog_slope": conv.loglog_slope}
    if stability is not None:
        out["stability"] = stability
    return out


def emit_outputs(trace: TrainingTrace, formats, out_dir, stem: str = "trace", stability=None) -> dict:
    """Write the requested formats into ``out_dir``; returns format -> path."""
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValidationError(f"unknown formats {sorted(unknown)}", "formats")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for fmt in formats:
        if fmt == "jsonl":
            path, text = out_dir / f"{stem}.jsonl", trace_to_jsonl(trace)
        elif fmt == "csv":
            path, text = out_dir / f"{stem}.csv", trace_to_csv(trace)
        else:
            path = out_dir / f"{stem}.summary.json"
            text = json.dumps(_plain(trace_summary(trace, stability)), indent=2, sort_keys=True) + "\n"
        path.write_text(text, encoding="utf-8")
        written[fmt] = path
    return written


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
