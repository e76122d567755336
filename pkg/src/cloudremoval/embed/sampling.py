"""Grid histogram over a 2-D embedding and round-robin uniform sampling."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..raster_io import atomic_write_text


@dataclass
class EmbeddingPoint:
    tile_id: str
    y: tuple[float, float]


@dataclass
class GridHistogram:
    """``cells[row][col]`` lists the tile ids in that cell.

    Rows follow the embedding's second coordinate, columns the first.
    """

    grid_size: int
    bounds: tuple[float, float, float, float]  # (xmin, ymin, xmax, ymax)
    cells: list[list[list[str]]]

    @property
    def counts(self) -> np.ndarray:
        return np.array([[len(c) for c in row] for row in self.cells], dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def cell_of(self) -> dict[str, tuple[int, int]]:
        return {tid: (r, c) for r, row in enumerate(self.cells)
                for c, ids in enumerate(row) for tid in ids}


def _cell_index(values: np.ndarray, lo: float, hi: float, g: int) -> np.ndarray:
    # ceil(t*g) - 1 puts a point on an interior boundary into the lower cell
    if hi <= lo:
        return np.zeros(len(values), dtype=np.int64)
    t = (values - lo) / (hi - lo)
    return np.clip(np.ceil(t * g).astype(np.int64) - 1, 0, g - 1)


def grid_histogram(points: Sequence[EmbeddingPoint], grid_size: int = 45) -> GridHistogram:
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    if not points:
        raise ValueError("need at least one embedded point")
    Y = np.array([p.y for p in points], dtype=np.float64)
    if not np.all(np.isfinite(Y)):
        raise ValueError("embedding coordinates must be finite")
    xmin, ymin = Y.min(axis=0)
    xmax, ymax = Y.max(axis=0)
    cols = _cell_index(Y[:, 0], xmin, xmax, grid_size)
    rows = _cell_index(Y[:, 1], ymin, ymax, grid_size)
    cells: list[list[list[str]]] = [[[] for _ in range(grid_size)] for _ in range(grid_size)]
    for p, r, c in zip(points, rows, cols):
        cells[r][c].append(p.tile_id)
    return GridHistogram(grid_size, (float(xmin), float(ymin), float(xmax), float(ymax)), cells)


def uniform_sample(hist: GridHistogram, k: int, seed: int = 0) -> list[str]:
    """Draw ``k`` tiles, one per non-empty cell per pass, cells in row-major order.

    Within a cell, tiles are taken in a seeded random order. Cells that run
    out are skipped on later passes, so draw counts of cells that still
    have tiles differ by at most one.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > hist.total:
        raise ValueError(f"cannot draw {k} tiles from a population of {hist.total}")
    rng = np.random.default_rng(seed)
    queues = []
    for row in hist.cells:
        for ids in row:
            if ids:
                order = rng.permutation(len(ids))
                queues.append([ids[i] for i in order])
    selected: list[str] = []
    depth = 0
    while len(selected) < k:
        for queue in queues:
            if depth < len(queue):
                selected.append(queue[depth])
                if len(selected) == k:
                    break
        depth += 1
    return selected


def heatmap_pixels(hist: GridHistogram, cell_px: int = 8, cmap: str = "viridis") -> np.ndarray:
    """RGB uint8 rendering of cell counts; row 0 of the grid is the top row."""
    from matplotlib import colormaps

    counts = hist.counts.astype(np.float64)
    peak = counts.max()
    scaled = counts / peak if peak > 0 else counts
    rgba = colormaps[cmap](scaled)
    rgb = np.rint(rgba[:, :, :3] * 255).astype(np.uint8)
    return np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)


def render_heatmap(hist: GridHistogram, path: str | os.PathLike, cell_px: int = 8,
                   cmap: str = "viridis") -> Path:
    from PIL import Image

    path = Path(path)
    Image.fromarray(heatmap_pixels(hist, cell_px, cmap)).save(path)
    return path


def write_selection(path: str | os.PathLike, selected: Sequence[str], hist: GridHistogram,
                    header: dict | None = None) -> Path:
    """Selected-sample manifest: tile ids with their grid cells."""
    cell = hist.cell_of()
    doc = {
        **(header or {}),
        "k": len(selected),
        "grid_size": hist.grid_size,
        "bounds": list(hist.bounds),
        "selected": [{"tile_id": tid, "cell": list(cell[tid])} for tid in selected],
    }
    path = Path(path)
    atomic_write_text(path, json.dumps(doc, indent=1))
    return path


def read_selection(path: str | os.PathLike) -> list[str]:
    doc = json.loads(Path(path).read_text())
    return [rec["tile_id"] for rec in doc["selected"]]
