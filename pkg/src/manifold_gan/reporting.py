"""Static outputs: metrics CSV, result tables, and plain PGM/PPM image grids."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError
from .training import CSV_FIELDS, aggregate

RESULT_FIELDS = ("method", "dataset", "n_labeled", "seed", "test_error")


# -- CSV -------------------------------------------------------------------------

def write_metrics_csv(path, history: Iterable[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for row in history:
            w.writerow([int(row["epoch"])] + [repr(float(row[k])) for k in CSV_FIELDS[1:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in CSV_FIELDS} for r in rows]


def append_results(path, rows: Iterable[Mapping]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([r["method"], r["dataset"], int(r["n_labeled"]), int(r["seed"]),
                        repr(float(r["test_error"]))])


# -- report table ------------------------------------------------------------------

@dataclass
class ReportRow:
    method: str
    dataset: str
    n_labeled: int
    mean_error: float  # percent
    std_error: float  # percent, sample standard deviation
    seeds: int


def collect_report(metrics_dir) -> list[ReportRow]:
    """One row per (method, dataset, n_labeled) over every results.csv below ``metrics_dir``."""
    groups: dict[tuple, list[float]] = {}
    for path in sorted(Path(metrics_dir).rglob("results.csv")):
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                key = (r["method"], r["dataset"], int(r["n_labeled"]))
                groups.setdefault(key, []).append(100.0 * float(r["test_error"]))
    rows = []
    for (method, dataset, n_labeled), errors in groups.items():
        mean, std = aggregate(errors)
        rows.append(ReportRow(method, dataset, n_labeled, mean, std, len(errors)))
    return rows


def render_report(rows: Sequence[ReportRow]) -> str:
    lines = ["| Method | Dataset | N_l | Error (%) | Seeds |",
             "|---|---|---:|---:|---:|"]
    for r in rows:
        lines.append(f"| {r.method} | {r.dataset} | {r.n_labeled} | "
                     f"{r.mean_error:.2f} ± {r.std_error:.2f} | {r.seeds} |")
    return "\n".join(lines) + "\n"


# -- images ------------------------------------------------------------------------------

def to_pixels(values) -> np.ndarray:
    """Map [-1, 1] intensities to bytes: round((v + 1) * 127.5), clamped."""
    return np.clip(np.round((np.asarray(values, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def image_grid(images) -> np.ndarray:
    """Lay a batch out left to right; returns ``[c, h, n * w]``.

    Flat vectors of length D are shown as 1 x D grayscale strips.
    """
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[:, None, None, :]
    n, c, h, w = images.shape
    return images.transpose(1, 2, 0, 3).reshape(c, h, n * w)


def write_pnm(path, pixels) -> None:
    """Plain (ASCII) PGM for one channel, PPM for three."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise FormatError(f"PNM output needs 1 or 3 channels, got {c}")
    magic = "P2" if c == 1 else "P3"
    flat = pixels.transpose(1, 2, 0).reshape(-1)
    lines, cur = [], ""
    for v in flat:
        tok = str(int(v))
        if cur and len(cur) + 1 + len(tok) > 70:
            lines.append(cur)
            cur = tok
        else:
            cur = f"{cur} {tok}" if cur else tok
    if cur:
        lines.append(cur)
    Path(path).write_text(f"{magic}\n{w} {h}\n255\n" + "\n".join(lines) + "\n")


def read_pnm(path) -> np.ndarray:
    """Parse a plain PGM/PPM file into ``[c, h, w]`` bytes."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] not in ("P2", "P3"):
        raise FormatError(f"{path}: not a plain PGM/PPM file")
    c = 1 if tokens[0] == "P2" else 3
    w, h, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval}, expected 255")
    values = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if values.size != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} samples, found {values.size}")
    return values.astype(np.uint8).reshape(h, w, c).transpose(2, 0, 1)
