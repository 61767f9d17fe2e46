"""Quality and complexity accounting plus report emission."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PSNR_CAP = 99.0
REPORT_FIELDS = ("scene", "complexity", "mode", "target", "penalty", "fqr", "psnr",
                 "bitops", "storage_bytes")
REPORT_METADATA = {
    "bitops": "sum over multiply-accumulates of weight bits x input-activation bits",
    "storage_bytes": "sum of ceil(count * B / 8) over parameter components plus container metadata",
    "complexity": "mean L1 finite-difference image gradient (|dx| + |dy|), averaged over channels",
}

# CARF container sizes; integer-inference writes exactly this much metadata
HEADER_BYTES = 64
RECORD_BYTES = 96


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def fqr(bits: Iterable[int]) -> float:
    bits = list(bits)
    if not bits:
        raise ValueError("fqr needs at least one component")
    return sum(bits) / len(bits)


@dataclass(frozen=True)
class Mac:
    """Multiply-accumulates of one layer: weight component x input component."""

    weight: str
    activation: str
    count: int


def mac_workload(registry, model, samples: int) -> list[Mac]:
    """Per-layer MAC counts for ``samples`` field evaluations.

    A layer fed by a concatenation splits its MACs by input width.
    """
    shapes = model.cfg.layer_shapes()
    feeds = _feeds_with_widths(model.cfg.dim, shapes)
    out = []
    for name, (n_out, n_in) in shapes.items():
        for act, width in feeds[name]:
            out.append(Mac(name, act, n_out * width * samples))
    return out


def layer_inputs(dim: int) -> dict[str, list[tuple[str, int]]]:
    """Which component quantizes each layer's input, and over how many input columns."""
    from .field import FieldConfig, SH_DIM

    if dim == 2:
        names = list(FieldConfig(dim=2).layer_shapes())
        feeds = {names[0]: [("codebook", 0)]}
        for prev, name in zip(names, names[1:]):
            feeds[name] = [(f"{prev}.relu", 0)]
    else:
        feeds = {"density.0": [("codebook", 0)], "density.1": [("density.0.relu", 0)],
                 "color.0": [("density.out", 15), ("sh", SH_DIM)],
                 "color.1": [("color.0.relu", 0)], "color.2": [("color.1.relu", 0)]}
    return feeds


def _feeds_with_widths(dim: int, shapes) -> dict[str, list[tuple[str, int]]]:
    feeds = layer_inputs(dim)
    return {k: [(a, w or shapes[k][1]) for a, w in v] for k, v in feeds.items()}


def bitops(registry, workload: Sequence[Mac]) -> int:
    """Bit-weighted multiply count: sum of count * B_weight * B_input."""
    bits = {c.name: c.state.bits for c in registry}
    covered = {m.weight for m in workload}
    missing = [c.name for c in registry if c.role == "weight" and c.name not in covered]
    if missing:
        raise ValueError(f"workload has no entry for weight components {missing}")
    total = 0
    for m in workload:
        if m.weight not in bits or m.activation not in bits:
            raise ValueError(f"workload references unknown component {m}")
        total += m.count * bits[m.weight] * bits[m.activation]
    return total


def storage_bytes(registry, include_metadata: bool = True) -> int:
    total = sum(math.ceil(c.count * c.state.bits / 8) for c in registry if c.count)
    if include_metadata:
        total += metadata_bytes(len(registry))
    return total


def metadata_bytes(m: int) -> int:
    return HEADER_BYTES + RECORD_BYTES * m


def avg_image_gradient(images) -> float:
    """Mean of |dx| + |dy| per pixel and channel, averaged over images.

    Forward differences; the last row/column contribute zero, so the sum is over
    adjacent pixel pairs divided by H*W*C.
    """
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    vals = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[..., None]
        gx = np.abs(np.diff(img, axis=1)).sum()
        gy = np.abs(np.diff(img, axis=0)).sum()
        vals.append((gx + gy) / img.size)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return "" if v is None else str(v)


def report_csv(records: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in records:
        w.writerow([_fmt(r.get(k)) for k in REPORT_FIELDS])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def emit_report(records: Sequence[dict], out_dir) -> dict[str, Path]:
    """Write report.csv, report.json and two SVG scatter plots."""
    if not records:
        raise ValueError("report needs at least one record")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot create report directory {out}: {exc}") from exc
    paths = {
        "csv": out / "report.csv",
        "json": out / "report.json",
        "complexity_svg": out / "complexity_vs_fqr.svg",
        "psnr_svg": out / "psnr_vs_fqr.svg",
    }
    payload = {"metadata": REPORT_METADATA,
               "records": [{k: _jsonable(v) for k, v in r.items()} for r in records]}
    try:
        paths["csv"].write_text(report_csv(records))
        paths["json"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        paths["complexity_svg"].write_text(scatter_svg(
            [r["complexity"] for r in records], [r["fqr"] for r in records],
            "scene complexity (avg image gradient)", "FQR (mean bitwidth)",
            labels=[str(r.get("scene", "")) for r in records]))
        paths["psnr_svg"].write_text(scatter_svg(
            [r["fqr"] for r in records], [r["psnr"] for r in records],
            "FQR (mean bitwidth)", "PSNR (dB)",
            labels=[str(r.get("scene", "")) for r in records]))
    except OSError as exc:
        raise ValueError(f"cannot write report to {out}: {exc}") from exc
    return paths


def scatter_svg(xs: Sequence[float], ys: Sequence[float], xlabel: str, ylabel: str,
                labels: Sequence[str] | None = None, width: int = 800, height: int = 600) -> str:
    """Minimal deterministic scatter plot; one <circle class="marker"> per point."""
    left, right, top, bottom = 90, 30, 30, 70
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]

    def span(v):
        lo, hi = min(v), max(v)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        return lo - pad, hi + pad

    x0, x1 = span(xs)
    y0, y1 = span(ys)
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for i in range(5):
        tx = x0 + (x1 - x0) * i / 4
        ty = y0 + (y1 - y0) * i / 4
        lines.append(f'<text x="{px(tx):.2f}" y="{top + ph + 20}" font-size="12" '
                     f'text-anchor="middle">{tx:.3g}</text>')
        lines.append(f'<text x="{left - 8}" y="{py(ty) + 4:.2f}" font-size="12" '
                     f'text-anchor="end">{ty:.3g}</text>')
    lines.append(f'<text x="{left + pw / 2:.1f}" y="{height - 20}" font-size="14" '
                 f'text-anchor="middle">{_esc(xlabel)}</text>')
    lines.append(f'<text x="20" y="{top + ph / 2:.1f}" font-size="14" text-anchor="middle" '
                 f'transform="rotate(-90 20 {top + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (x, y) in enumerate(zip(xs, ys)):
        lines.append(f'<circle class="marker" cx="{px(x):.2f}" cy="{py(y):.2f}" r="5" '
                     f'fill="steelblue"/>')
        if labels and labels[i]:
            lines.append(f'<text x="{px(x) + 7:.2f}" y="{py(y) - 7:.2f}" font-size="11">'
                         f'{_esc(labels[i])}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
