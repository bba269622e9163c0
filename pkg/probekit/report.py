"""Probe record persistence, aggregation across runs, and SVG layer curves."""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union
from xml.sax.saxutils import escape, quoteattr

from pydantic import ValidationError

from .exceptions import DataError, InputError
from .models.records import CSV_HEADER, LayerAggregate, ProbeRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SPLIT_COLORS = {"train": "#1f77b4", "test": "#d62728"}


# ---------- CSV / JSON ----------
def _row(record: ProbeRecord) -> List[str]:
    return [
        record.scenario,
        str(record.run),
        str(record.checkpoint_step),
        record.probe_point,
        str(record.layer_index),
        record.split,
        f"{record.error_rate:.6f}",
        str(record.probe_epochs_used),
    ]


def write_records(records: Iterable[ProbeRecord], path: PathLike) -> Path:
    """CSV at ``path`` plus a JSON mirror at ``path`` with a ``.json`` suffix."""
    path = Path(path)
    records = list(records)
    mirror = [dict(r.model_dump(), error_rate=round(r.error_rate, 6)) for r in records]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in records:
                writer.writerow(_row(r))
        path.with_suffix(".json").write_text(json.dumps(mirror, indent=2) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write records to {path}: {exc}") from exc
    logger.info("Wrote %d records to %s", len(records), path)
    return path


def read_records(path: PathLike) -> List[ProbeRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing records file: {path}")
    records: List[ProbeRecord] = []
    seen: Dict[Tuple, int] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise InputError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise InputError(f"{path}:{line}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                record = ProbeRecord.model_validate(dict(zip(CSV_HEADER, row)))
            except ValidationError as exc:
                raise InputError(f"{path}:{line}: {exc.errors()[0]['loc']} {exc.errors()[0]['msg']}") from exc
            if record.key in seen:
                raise InputError(f"{path}:{line}: duplicate record {record.key}, first on line {seen[record.key]}")
            seen[record.key] = line
            records.append(record)
    return records


# ---------- Aggregation ----------
def aggregate_mean(records: Sequence[ProbeRecord], split: Optional[str] = None) -> List[LayerAggregate]:
    """Mean, min and max error per (probe point, split) across runs.

    All records must share scenario and checkpoint step.
    """
    chosen = [r for r in records if split is None or r.split == split]
    if not chosen:
        raise InputError("aggregate_mean: no records to aggregate")
    groups = {(r.scenario, r.checkpoint_step) for r in chosen}
    if len(groups) != 1:
        raise InputError(f"aggregate_mean: records span several scenario/checkpoint pairs: {sorted(groups)}")
    buckets: Dict[Tuple[str, str], List[ProbeRecord]] = {}
    for r in chosen:
        buckets.setdefault((r.probe_point, r.split), []).append(r)
    out = []
    for (point, sp), group in buckets.items():
        errors = sorted(r.error_rate for r in group)
        out.append(
            LayerAggregate(
                probe_point=point,
                layer_index=group[0].layer_index,
                split=sp,
                mean=sum(errors) / len(errors),
                min=errors[0],
                max=errors[-1],
                count=len(errors),
            )
        )
    out.sort(key=lambda a: (a.split, a.layer_index, a.probe_point))
    return out


# ---------- SVG ----------
class SvgCanvas:
    """Minimal SVG 1.1 writer with a fixed plot area mapping error rate to y."""

    def __init__(self, width: int = 720, height: int = 420):
        self.width, self.height = width, height
        self.left, self.right, self.top, self.bottom = 64, width - 24, 48, height - 64
        self.parts: List[str] = []

    def y_of(self, error: float) -> float:
        return self.bottom - error * (self.bottom - self.top)

    def add(self, element: str) -> None:
        self.parts.append(element)

    def text(self, x: float, y: float, content: str, extra: str = "") -> None:
        attrs = f" {extra}" if extra else ""
        self.add(f'<text x="{x:.2f}" y="{y:.2f}"{attrs}>{escape(content)}</text>')

    def line(self, x1: float, y1: float, x2: float, y2: float, extra: str = "") -> None:
        self.add(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" {extra}/>')

    def render(self) -> str:
        head = (
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n'
        )
        return head + "\n".join(self.parts) + "\n</svg>\n"


def render_layer_curve(
    records: Sequence[ProbeRecord],
    path: PathLike,
    splits: Sequence[str] = ("train", "test"),
    guide: bool = True,
    title: Optional[str] = None,
) -> Path:
    """Probe error against layer index for one checkpoint, one series per split.

    With several runs the mean is drawn with a shaded min/max envelope.
    """
    if not records:
        raise InputError("render_layer_curve: at least one record is required")
    aggregates = [a for a in aggregate_mean(records) if a.split in splits]
    layers = sorted({a.layer_index for a in aggregates} or {0})
    lo, hi = layers[0], layers[-1]

    canvas = SvgCanvas()

    def x_of(layer: int) -> float:
        if hi == lo:
            return (canvas.left + canvas.right) / 2
        return canvas.left + (layer - lo) / (hi - lo) * (canvas.right - canvas.left)

    first = records[0]
    canvas.add('<rect x="0" y="0" width="100%" height="100%" fill="#ffffff"/>')
    canvas.text(
        canvas.width / 2,
        24,
        title or f"{first.scenario} step {first.checkpoint_step}",
        'text-anchor="middle" font-family="sans-serif" font-size="16"',
    )
    # axes and ticks
    canvas.line(canvas.left, canvas.top, canvas.left, canvas.bottom, 'stroke="#000000"')
    canvas.line(canvas.left, canvas.bottom, canvas.right, canvas.bottom, 'stroke="#000000"')
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = canvas.y_of(tick)
        canvas.line(canvas.left - 4, y, canvas.left, y, 'stroke="#000000"')
        canvas.text(canvas.left - 8, y + 4, f"{tick:.2f}", 'text-anchor="end" font-family="sans-serif" font-size="11"')
    step = max(1, (hi - lo) // 8)
    for layer in range(lo, hi + 1, step):
        x = x_of(layer)
        canvas.line(x, canvas.bottom, x, canvas.bottom + 4, 'stroke="#000000"')
        canvas.text(x, canvas.bottom + 18, str(layer), 'text-anchor="middle" font-family="sans-serif" font-size="11"')
    canvas.text(
        (canvas.left + canvas.right) / 2,
        canvas.height - 16,
        "layer index",
        'text-anchor="middle" font-family="sans-serif" font-size="13"',
    )
    canvas.text(
        18,
        (canvas.top + canvas.bottom) / 2,
        "probe error rate",
        f'text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {(canvas.top + canvas.bottom) / 2:.2f})"',
    )
    if guide:
        y = canvas.y_of(0.5)
        canvas.line(canvas.left, y, canvas.right, y, 'class="guide" stroke="#777777" stroke-dasharray="6,4"')

    for sp in splits:
        series = sorted((a for a in aggregates if a.split == sp), key=lambda a: (a.layer_index, a.probe_point))
        if not series:
            continue
        color = SPLIT_COLORS.get(sp, "#000000")
        if any(a.count > 1 for a in series):
            upper = [f"{x_of(a.layer_index):.2f},{canvas.y_of(a.max):.2f}" for a in series]
            lower = [f"{x_of(a.layer_index):.2f},{canvas.y_of(a.min):.2f}" for a in reversed(series)]
            canvas.add(f'<polygon class="envelope" points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.15"/>')
        points = " ".join(f"{x_of(a.layer_index):.2f},{canvas.y_of(a.mean):.2f}" for a in series)
        canvas.add(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a in series:
            canvas.add(
                f'<circle class="mark" data-split={quoteattr(sp)} data-point={quoteattr(a.probe_point)} '
                f'cx="{x_of(a.layer_index):.2f}" cy="{canvas.y_of(a.mean):.2f}" r="3" fill="{color}"/>'
            )
    for i, sp in enumerate(splits):
        y = canvas.top + 14 + 16 * i
        color = SPLIT_COLORS.get(sp, "#000000")
        canvas.line(canvas.right - 90, y - 4, canvas.right - 70, y - 4, f'stroke="{color}" stroke-width="2"')
        canvas.text(canvas.right - 64, y, sp, 'font-family="sans-serif" font-size="12"')

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(canvas.render())
    except OSError as exc:
        raise DataError(f"cannot write plot {path}: {exc}") from exc
    return path


def render_report(records: Sequence[ProbeRecord], out_dir: PathLike, split: str = "test") -> List[Path]:
    """One ``{scenario}_step{n}.svg`` per (scenario, checkpoint) plus ``aggregates.json``."""
    out_dir = Path(out_dir)
    grouped: Dict[Tuple[str, int], List[ProbeRecord]] = {}
    for r in records:
        grouped.setdefault((r.scenario, r.checkpoint_step), []).append(r)
    paths: List[Path] = []
    summary: Dict[str, Dict[str, List[dict]]] = {}
    for (scenario, step), group in sorted(grouped.items()):
        paths.append(
            render_layer_curve(
                group, out_dir / f"{scenario}_step{step}.svg", splits=(split,), guide=_two_class(scenario)
            )
        )
        summary.setdefault(scenario, {})[str(step)] = [a.model_dump() for a in aggregate_mean(group)]
    target = out_dir / "aggregates.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {target}: {exc}") from exc
    paths.append(target)
    return paths


def _two_class(scenario: str) -> bool:
    return scenario == "untrained32"
