"""Record and report serialization.

Per-frame records go to CSV with repr-round-trip floats so reruns are
byte-identical; wall-clock timings are confined to their own file so they
never break that identity. Charts are hand-assembled SVG for the same
reason: no library timestamps or generated ids.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .metrics import MetricsReport
from .strategies import LocalizationRecord

RECORD_FIELDS = [
    "frame_id", "predicted_e", "predicted_n", "gt_e", "gt_n", "error_m",
    "tile_id", "inlier_count", "reproj_rmse", "fallback", "status",
    "pitch_deg", "altitude_m", "map_label", "noise_level",
    "retrieved_ids", "retrieved_d", "tile_width_px", "map_gsd", "gt_tile_id",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_records_csv(records: list[LocalizationRecord], path):
    lines = [",".join(RECORD_FIELDS)]
    for r in records:
        lines.append(",".join([
            r.frame_id,
            _fmt(r.predicted_e), _fmt(r.predicted_n),
            _fmt(r.gt_e), _fmt(r.gt_n), _fmt(r.error_m),
            str(r.tile_id), str(r.inlier_count), _fmt(r.reproj_rmse),
            "1" if r.fallback else "0", r.status,
            _fmt(r.pitch_deg), _fmt(r.altitude_m),
            r.map_label, r.noise_level,
            ";".join(str(i) for i in r.retrieved_ids),
            ";".join(_fmt(d) for d in r.retrieved_d),
            _fmt(r.tile_width_px), _fmt(r.map_gsd), str(r.gt_tile_id),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_records_csv(path) -> list[LocalizationRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RECORD_FIELDS:
            raise ValueError(
                f"{path}: unexpected record schema {reader.fieldnames}")
        for row in reader:
            records.append(LocalizationRecord(
                frame_id=row["frame_id"],
                predicted_e=float(row["predicted_e"]),
                predicted_n=float(row["predicted_n"]),
                gt_e=float(row["gt_e"]),
                gt_n=float(row["gt_n"]),
                error_m=float(row["error_m"]),
                tile_id=int(row["tile_id"]),
                inlier_count=int(row["inlier_count"]),
                reproj_rmse=float(row["reproj_rmse"]),
                fallback=row["fallback"] == "1",
                status=row["status"],
                pitch_deg=float(row["pitch_deg"]),
                altitude_m=float(row["altitude_m"]),
                map_label=row["map_label"],
                noise_level=row["noise_level"],
                retrieved_ids=tuple(int(i) for i in row["retrieved_ids"].split(";") if i),
                retrieved_d=tuple(float(d) for d in row["retrieved_d"].split(";") if d),
                tile_width_px=float(row["tile_width_px"]),
                map_gsd=float(row["map_gsd"]),
                gt_tile_id=int(row["gt_tile_id"]),
            ))
    return records


def write_timings_csv(records: list[LocalizationRecord], path):
    keys = sorted({k for r in records for k in r.timings})
    lines = [",".join(["frame_id", "noise_level"] + keys)]
    for r in records:
        vals = [f"{r.timings.get(k, 0.0):.6f}" for k in keys]
        lines.append(",".join([r.frame_id, r.noise_level] + vals))
    Path(path).write_text("\n".join(lines) + "\n")


def write_metric_tables_csv(report: MetricsReport, path):
    lines = ["metric,key,value"]
    for t, v in sorted(report.accuracy.items()):
        lines.append(f"accuracy_at_t,{t:g},{v!r}")
    for k, v in sorted(report.recall.items()):
        lines.append(f"recall_at_k,{k},{v!r}")
    for k, v in sorted(report.sdm.items()):
        lines.append(f"sdm_at_k,{k},{v!r}")
    for k, v in sorted(report.pdm.items()):
        lines.append(f"pdm_at_k,{k},{v!r}")
    for bin_label, row in report.by_pitch.items():
        for t, v in sorted(row.items()):
            lines.append(f"pitch {bin_label} A@{t:g},{bin_label},{v!r}")
    for label, row in report.by_noise.items():
        for t, v in sorted(row.items()):
            lines.append(f"noise {label} A@{t:g},{label},{v!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# minimal deterministic SVG charts


_SVG_W = 640
_SVG_H = 400
_MARGIN = 56
_SERIES_FILL = ("#3a6ea5", "#e0a040", "#6aa84f")


def _svg_header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]


def _grouped_bar_svg(title: str, groups: dict[str, dict[float, float]], path):
    """Bar chart: one group per category, one bar per threshold, 0..100%."""
    parts = _svg_header(title)
    plot_w = _SVG_W - 2 * _MARGIN
    plot_h = _SVG_H - 2 * _MARGIN
    x0, y0 = _MARGIN, _SVG_H - _MARGIN
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y0 - frac * plot_h
        parts.append(f'<line x1="{x0}" y1="{y:.1f}" x2="{x0 + plot_w}" y2="{y:.1f}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{frac * 100:.0f}</text>')
    keys = list(groups.keys())
    thresholds = sorted({t for row in groups.values() for t in row}) or [0.0]
    group_w = plot_w / max(1, len(keys))
    bar_w = 0.8 * group_w / max(1, len(thresholds))
    for gi, key in enumerate(keys):
        gx = x0 + gi * group_w + 0.1 * group_w
        for ti, t in enumerate(thresholds):
            val = groups[key].get(t)
            if val is None:
                continue
            h = val / 100.0 * plot_h
            color = _SERIES_FILL[ti % len(_SERIES_FILL)]
            parts.append(
                f'<rect x="{gx + ti * bar_w:.1f}" y="{y0 - h:.1f}" '
                f'width="{bar_w:.1f}" height="{h:.1f}" fill="{color}"/>')
        parts.append(
            f'<text x="{x0 + gi * group_w + group_w / 2:.1f}" y="{y0 + 16}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="11">{key}</text>')
    for ti, t in enumerate(thresholds):
        color = _SERIES_FILL[ti % len(_SERIES_FILL)]
        lx = x0 + ti * 110
        parts.append(f'<rect x="{lx}" y="{_SVG_H - 22}" width="12" height="12" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{lx + 16}" y="{_SVG_H - 12}" '
                     f'font-family="sans-serif" font-size="11">A@{t:g}m</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def write_pitch_chart_svg(report: MetricsReport, path):
    _grouped_bar_svg("Localization accuracy by pitch bin (deg)",
                     report.by_pitch, path)


def write_noise_chart_svg(report: MetricsReport, path):
    _grouped_bar_svg("Localization accuracy by prior-noise level",
                     report.by_noise, path)
