"""Accuracy-vs-rate line charts rendered as plain SVG text.

One chart per (kind, task, group); one polyline per method, averaged over
seeds. Module-integrated grids are drawn against the encoder rate with one
chart per decoder rate. Output bytes depend only on the input rows.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Iterable, Sequence

from .harness import RESULT_HEADER
from .tasks import DataError

WIDTH, HEIGHT = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 56, 120, 32, 44
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def read_rows(path: str | Path) -> list[dict]:
    """Parse a result CSV; malformed rows raise DataError naming the file row."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty CSV")
        if tuple(header) != RESULT_HEADER:
            raise DataError(f"{path}: row 1: expected header {','.join(RESULT_HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(RESULT_HEADER):
                raise DataError(f"{path}: row {lineno}: expected {len(RESULT_HEADER)} fields, got {len(rec)}")
            row = dict(zip(RESULT_HEADER, rec))
            try:
                for k in ("enc_rate", "dec_rate", "accuracy", "kept_fraction"):
                    row[k] = float(row[k])
            except ValueError:
                raise DataError(f"{path}: row {lineno}: non-numeric rate or accuracy") from None
            if not 0.0 <= row["accuracy"] <= 1.0:
                raise DataError(f"{path}: row {lineno}: accuracy {row['accuracy']} outside [0, 1]")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no result rows")
    return rows


def _series(rows: Iterable[dict]) -> dict[tuple, dict[str, list[tuple[float, float]]]]:
    """chart key -> method -> sorted (rate, mean accuracy) points."""
    acc: dict[tuple, dict[str, dict[float, list[float]]]] = {}
    for r in rows:
        if r["kind"] == "module-integrated":
            key = (r["kind"], r["task"], f"dec={r['dec_rate']:g}")
            x = r["enc_rate"]
        else:
            key = (r["kind"], r["task"], r["group"])
            x = max(r["enc_rate"], r["dec_rate"])
        acc.setdefault(key, {}).setdefault(r["method"], {}).setdefault(x, []).append(r["accuracy"])
    out = {}
    for key in sorted(acc):
        out[key] = {m: sorted((x, sum(v) / len(v)) for x, v in pts.items()) for m, pts in sorted(acc[key].items())}
    return out


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def render_svg(title: str, series: dict[str, list[tuple[float, float]]]) -> str:
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x: float) -> str:
        return f"{LEFT + x * pw:.2f}"

    def py(y: float) -> str:
        return f"{TOP + (1 - y) * ph:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for i in range(6):
        t = i / 5
        out.append(f'<line x1="{px(t)}" y1="{py(0)}" x2="{px(t)}" y2="{HEIGHT - BOTTOM + 4}" stroke="#333"/>')
        out.append(f'<text x="{px(t)}" y="{HEIGHT - BOTTOM + 16}" text-anchor="middle">{t:.1f}</text>')
        out.append(f'<line x1="{LEFT - 4}" y1="{py(t)}" x2="{px(1)}" y2="{py(t)}" stroke="#ddd"/>')
        out.append(f'<text x="{LEFT - 6}" y="{float(py(t)) + 4:.2f}" text-anchor="end">{t:.1f}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle">prune rate</text>')
    out.append(f'<text x="14" y="{TOP + ph / 2:.1f}" text-anchor="middle" transform="rotate(-90 14 {TOP + ph / 2:.1f})">accuracy</text>')
    for i, (method, pts) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{px(x)},{py(y)}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = TOP + 8 + 16 * i
        out.append(f'<line x1="{WIDTH - RIGHT + 12}" y1="{ly}" x2="{WIDTH - RIGHT + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - RIGHT + 36}" y="{ly + 4}">{_esc(method)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _file_name(key: tuple) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", "__".join(str(k) for k in key)) + ".svg"


def render_plots(csv_paths: Sequence[str | Path], out_dir: str | Path) -> list[Path]:
    """Write one SVG per chart; all inputs are parsed before anything is written."""
    rows = []
    for p in csv_paths:
        rows.extend(read_rows(p))
    charts = _series(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key, series in charts.items():
        path = out_dir / _file_name(key)
        path.write_text(render_svg(" / ".join(key), series), encoding="utf-8")
        written.append(path)
    return written
