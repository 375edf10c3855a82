"""Image and report output: 8-bit PNG, float PFM, working-set CSV, SVG plots."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..render import WorkingSetReport


def write_png(path, image: np.ndarray) -> None:
    """Store a float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_pfm(path, image: np.ndarray) -> None:
    """Store a float image as binary PFM (little-endian, bottom-up rows)."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("PFM writer expects an (H, W, 3) image")
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"PF":
            raise ValueError("not a color PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w, 3)[::-1].astype(np.float64)


def write_workingset_csv(path, reports: list[WorkingSetReport]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(WorkingSetReport.csv_header() + "\n")
        for r in reports:
            f.write(r.csv_row() + "\n")


def read_workingset_csv(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        expected = WorkingSetReport.csv_header().split(",")
        if header != expected:
            raise ValueError(f"unexpected working-set CSV header: {header}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            if len(vals) != len(expected):
                raise ValueError(f"bad working-set CSV row: {line}")
            rows.append({
                "frame_id": int(vals[0]),
                "touched_node_count": int(vals[1]),
                "touched_bytes": int(vals[2]),
                "total_bytes": int(vals[3]),
                "fraction": float(vals[4]),
            })
    return rows


def write_line_plot_svg(path, ys, *, title: str, ylabel: str,
                        width: int = 640, height: int = 360) -> None:
    """Minimal dependency-free line plot of one series against its index."""
    ys = [float(v) for v in ys]
    n = len(ys)
    pad = 48
    y_max = max(ys) if ys else 1.0
    y_max = y_max if y_max > 0 else 1.0
    xs_px = [pad + (width - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
    ys_px = [height - pad - (height - 2 * pad) * (v / y_max) for v in ys]
    points = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs_px, ys_px))
    svg = f"""<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">
<rect width="100%" height="100%" fill="white"/>
<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>
<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>
<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>
<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})" text-anchor="middle">{ylabel}</text>
<text x="{width / 2}" y="{height - 12}" font-size="11" text-anchor="middle">frame</text>
<text x="{pad - 4}" y="{pad}" font-size="10" text-anchor="end">{y_max:.4g}</text>
<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">0</text>
<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{points}"/>
</svg>
"""
    Path(path).write_text(svg, encoding="utf-8")
