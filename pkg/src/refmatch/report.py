"""Report rendering (json, csv, table) and run manifests."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .errors import FormatError, ValidationError
from .geometry import LabelMetrics, MetricReport

FORMATS = ("json", "csv", "table")
LABEL_METRICS = ("dice", "giou", "iou", "ap", "accuracy")
AGGREGATES = ("mean_dice", "mean_giou", "accuracy")
AGGREGATE_ROW = "ALL"


def _num(v):
    return "" if v is None else repr(float(v))


def write_report(report: MetricReport, fmt="json") -> str:
    if fmt == "json":
        return report.to_json()
    if fmt == "csv":
        return _to_csv(report)
    if fmt == "table":
        return _to_table(report)
    raise ValidationError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def _to_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "label", "value"])
    for label in sorted(report.per_label):
        m = report.per_label[label]
        for name in LABEL_METRICS:
            w.writerow([name, label, _num(getattr(m, name))])
    for name in AGGREGATES:
        w.writerow([name, "", _num(getattr(report, name))])
    return buf.getvalue()


def read_csv_report(text: str) -> MetricReport:
    """Inverse of the csv rendering."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["metric", "label", "value"]:
        raise FormatError("csv report must start with the header metric,label,value", offset=0)
    per_label, agg = {}, {}
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise FormatError(f"line {n}: expected 3 fields, got {len(row)}")
        metric, label, value = row
        val = float(value) if value != "" else None
        if label == "" and metric in AGGREGATES:
            agg[metric] = val
        elif metric in LABEL_METRICS:
            setattr(per_label.setdefault(label, LabelMetrics()), metric, val)
        else:
            raise FormatError(f"line {n}: unknown metric {metric!r}")
    return MetricReport(per_label, agg.get("mean_dice"), agg.get("mean_giou"), agg.get("accuracy"))


def _to_table(report: MetricReport) -> str:
    def cell(v):
        return "-" if v is None else f"{v:.4f}"

    header = ["label", "dice", "giou", "iou", "ap", "accuracy"]
    rows = []
    for label in sorted(report.per_label):
        m = report.per_label[label]
        rows.append([label] + [cell(getattr(m, k)) for k in LABEL_METRICS])
    rows.append([AGGREGATE_ROW, cell(report.mean_dice), cell(report.mean_giou), "-", "-", cell(report.accuracy)])
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
             for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def load_report(path) -> MetricReport:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", offset=len(text[: exc.pos].encode("utf-8")), path=path) from exc
    return MetricReport.from_dict(data)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int = 0
    version: str = __version__
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, path):
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)


def manifest_path(output) -> Path:
    """Manifest location for a file output: ``name.manifest.json`` beside it."""
    p = Path(output)
    return p.with_name(p.stem + ".manifest.json")
