"""Plot-ready tables and a static SVG from run logs.

Every number written here is recomputed from the line-delimited logs in a run
directory. Histograms use the evaluation log of an arm when present and fall
back to the episode rows of its training log.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .experiments import ARMS

HIST_FIELDS = ("ttc_near_miss_count", "r_threshold_count")
HIST_TITLES = {"ttc_near_miss_count": "TTC near-miss count", "r_threshold_count": "r threshold count"}


def read_jsonl(path) -> list[dict]:
    with open(path) as fp:
        return [json.loads(line) for line in fp if line.strip()]


@dataclass
class ArmLogs:
    arm: str
    updates: list[dict]
    episodes: list[dict]
    source: str


def find_arms(logs_dir) -> list[ArmLogs]:
    """Arms in canonical order, then any other ``*_training.jsonl`` prefixes alphabetically."""
    logs_dir = Path(logs_dir)
    names = sorted(p.name[: -len("_training.jsonl")] for p in logs_dir.glob("*_training.jsonl"))
    names = [a for a in ARMS if a in names] + [a for a in names if a not in ARMS]
    out = []
    for arm in names:
        rows = read_jsonl(logs_dir / f"{arm}_training.jsonl")
        updates = [r for r in rows if r.get("type") == "update"]
        eval_path = logs_dir / f"{arm}_evaluation.jsonl"
        if eval_path.exists():
            episodes, source = read_jsonl(eval_path), "evaluation"
        else:
            episodes, source = [r for r in rows if r.get("type") == "episode"], "training"
        out.append(ArmLogs(arm, updates, episodes, source))
    return out


def histogram(values) -> list[tuple[int, int]]:
    """Counts for every integer from 0 to the maximum, zeros included."""
    counts = Counter(int(v) for v in values)
    top = max(counts, default=-1)
    return [(v, counts.get(v, 0)) for v in range(top + 1)]


def loss_curve(updates: list[dict]) -> list[tuple[int, float]]:
    return [(int(u["update_index"]), float(u["loss"])) for u in updates]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_table(path, header: tuple[str, str], rows) -> Path:
    path = Path(path)
    lines = ["\t".join(header)] + [f"{_fmt(a)}\t{_fmt(b)}" for a, b in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _bars(x0, y0, w, h, hist, title) -> list[str]:
    out = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#888"/>',
           f'<text x="{x0 + w / 2:.1f}" y="{y0 - 6}" text-anchor="middle" font-size="12">{escape(title)}</text>']
    if not hist:
        return out
    peak = max(c for _, c in hist) or 1
    bw = w / len(hist)
    for i, (_, c) in enumerate(hist):
        bh = h * c / peak
        out.append(f'<rect x="{x0 + i * bw:.2f}" y="{y0 + h - bh:.2f}" width="{bw * 0.9:.2f}" '
                   f'height="{bh:.2f}" fill="#4a7"/>')
    out.append(f'<text x="{x0}" y="{y0 + h + 14}" font-size="10">0</text>')
    out.append(f'<text x="{x0 + w}" y="{y0 + h + 14}" text-anchor="end" font-size="10">{hist[-1][0]}</text>')
    out.append(f'<text x="{x0 + 3}" y="{y0 + 12}" font-size="10">max {peak}</text>')
    return out


def _curve(x0, y0, w, h, curve, title) -> list[str]:
    out = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#888"/>',
           f'<text x="{x0 + w / 2:.1f}" y="{y0 - 6}" text-anchor="middle" font-size="12">{escape(title)}</text>']
    if len(curve) < 2:
        return out
    ys = [v for _, v in curve]
    lo, hi = min(ys), max(ys)
    span = (hi - lo) or 1.0
    pts = " ".join(f"{x0 + w * i / (len(curve) - 1):.2f},{y0 + h - h * (v - lo) / span:.2f}"
                   for i, v in enumerate(ys))
    out.append(f'<polyline points="{pts}" fill="none" stroke="#357" stroke-width="1.2"/>')
    out.append(f'<text x="{x0 + 3}" y="{y0 + 12}" font-size="10">{hi:.3g}</text>')
    out.append(f'<text x="{x0 + 3}" y="{y0 + h - 4}" font-size="10">{lo:.3g}</text>')
    return out


def render_svg(arms: list[ArmLogs], path) -> Path:
    """Rows: loss curve, then one row per histogram field; one column per arm."""
    cw, ch, pad = 240, 150, 40
    width = pad + len(arms) * (cw + pad)
    height = pad + 3 * (ch + pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for col, a in enumerate(arms):
        x0 = pad + col * (cw + pad)
        parts += _curve(x0, pad, cw, ch, loss_curve(a.updates), f"{a.arm}: loss")
        for row, fld in enumerate(HIST_FIELDS, start=1):
            hist = histogram(r[fld] for r in a.episodes)
            parts += _bars(x0, pad + row * (ch + pad), cw, ch, hist, f"{a.arm}: {HIST_TITLES[fld]}")
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


def build_report(logs_dir, out_dir) -> list[Path]:
    """Write per-arm loss and histogram tables plus ``report.svg``; returns the written paths."""
    arms = find_arms(logs_dir)
    if not arms:
        raise FileNotFoundError(f"no *_training.jsonl logs in {logs_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for a in arms:
        written.append(write_table(out / f"{a.arm}_loss.tsv", ("update_index", "loss"), loss_curve(a.updates)))
        for fld in HIST_FIELDS:
            short = fld.split("_")[0]
            written.append(write_table(out / f"{a.arm}_{short}_hist.tsv", (fld, "episodes"),
                                       histogram(r[fld] for r in a.episodes)))
    written.append(render_svg(arms, out / "report.svg"))
    return written
