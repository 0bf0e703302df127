"""Report rows, the fixed-column CSV and the JSON summary."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

REPORT_VERSION = 1
CSV_COLUMNS = ("sweep_id", "seed", "step", "batch", "stage", "rouge1_f1", "rougeL_f1", "meteor_lite",
               "trr", "ppl_test", "adapter_l2", "wall_ms", "error")
METRICS = ("rouge1_f1", "rougeL_f1", "meteor_lite", "trr")
# excluded from determinism comparisons
TIMING_COLUMNS = ("wall_ms",)


class ReportError(ValueError):
    pass


@dataclass
class ReportRow:
    sweep_id: str
    seed: int
    step: int | None
    batch: int | None
    stage: str
    rouge1_f1: float | None = None
    rougeL_f1: float | None = None
    meteor_lite: float | None = None
    trr: float | None = None
    ppl_test: float | None = None
    adapter_l2: float | None = None
    wall_ms: float | None = None
    error: str = ""


assert tuple(f.name for f in fields(ReportRow)) == CSV_COLUMNS


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v).replace("\n", " ")


def rows_to_csv(rows: Sequence[ReportRow], drop: Iterable[str] = ()) -> str:
    drop = set(drop)
    cols = [c for c in CSV_COLUMNS if c not in drop]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in cols])
    return buf.getvalue()


def _parse(col: str, text: str):
    if text == "":
        return "" if col == "error" else None
    if col in ("seed", "step", "batch"):
        return int(text)
    if col in ("sweep_id", "stage", "error"):
        return text
    return float(text)


def read_csv(path) -> list[ReportRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise ReportError(f"{path}: unexpected CSV header {header}")
        return [ReportRow(**{c: _parse(c, v) for c, v in zip(CSV_COLUMNS, line)}) for line in reader]


def mean_std(values: Sequence[float]) -> dict:
    """Mean and sample standard deviation (n − 1 denominator; None for n < 2)."""
    vals = [float(v) for v in values]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    m = math.fsum(vals) / len(vals)
    std = math.sqrt(math.fsum((v - m) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else None
    return {"mean": m, "std": std, "n": len(vals)}


def summarize(rows: Sequence[ReportRow]) -> dict:
    """Per (sweep point, stage, metric): mean ± std across seeds of each seed's mean over rows."""
    per: dict = {}
    for r in rows:
        if r.error:
            continue
        bucket = per.setdefault(r.sweep_id, {}).setdefault(r.stage, {})
        for m in METRICS:
            if getattr(r, m) is not None:
                bucket.setdefault(m, {}).setdefault(r.seed, []).append(getattr(r, m))
    out = {}
    for sid, stages in per.items():
        out[sid] = {stage: {m: mean_std([math.fsum(v) / len(v) for _, v in sorted(by_seed.items())])
                            for m, by_seed in metrics.items()}
                    for stage, metrics in stages.items()}
    return out


def emit_report(rows: Sequence[ReportRow], out_dir, config: dict | None = None,
                points: dict | None = None, extras: dict | None = None) -> dict[str, Path]:
    """Write ``report.csv`` and ``summary.json``; returns their paths."""
    if not rows:
        raise ReportError("cannot emit an empty report")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "report.csv"
        csv_path.write_text(rows_to_csv(rows), encoding="utf-8")
        summary = {
            "format_version": REPORT_VERSION,
            "columns": list(CSV_COLUMNS),
            "summary": summarize(rows),
            "errors": sorted({(r.sweep_id, r.seed, r.error) for r in rows if r.error}),
            "points": points or {},
            "config": config or {},
            **(extras or {}),
        }
        json_path = out_dir / "summary.json"
        json_path.write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"failed to write report to {out_dir}: {exc}") from exc
    return {"csv": csv_path, "summary": json_path}


def load_summary(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format_version") != REPORT_VERSION:
        raise ReportError(f"{path}: unsupported summary version {data.get('format_version')}")
    data["errors"] = [list(e) for e in data["errors"]]
    return data
