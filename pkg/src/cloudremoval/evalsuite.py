"""Reconstruction/mask metrics, evaluation reports and comparison panels."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .raster_io import BandImage, atomic_write_text

logger = logging.getLogger(__name__)

SYNTH_COLUMNS = ("RGB", "NIR", "Cloud-free RGB", "Ground truth", "Cloud mask")
REAL_COLUMNS = ("RGB", "NIR", "Cloud-free RGB", "NIR2RGB", "Cloud mask")


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(reference, candidate, max_value: float = 255.0) -> float:
    """10 log10(MAX^2 / MSE) in dB; ``inf`` for identical inputs."""
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    _check_shapes(ref, cand)
    mse = np.mean((ref - cand) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_value ** 2 / mse))


def mask_metrics(true_alpha, predicted, threshold: float = 0.5) -> tuple[float | None, float]:
    """Pearson correlation and IoU of the ``>= threshold`` sets.

    Correlation is None when either input is constant. IoU is 1 when both
    thresholded sets are empty.
    """
    t = np.asarray(true_alpha, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    _check_shapes(t, p)
    corr = None
    if t.std() > 0 and p.std() > 0:
        corr = float(np.clip(np.corrcoef(t, p)[0, 1], -1.0, 1.0))
    tb, pb = t >= threshold, p >= threshold
    union = np.count_nonzero(tb | pb)
    iou = 1.0 if union == 0 else np.count_nonzero(tb & pb) / union
    return corr, float(iou)


@dataclass
class EvalRecord:
    group_id: str
    mae_rgb: float
    psnr: float | None  # None when infinite
    psnr_infinite: bool
    mask_corr: float | None
    mask_iou: float | None


def evaluate_group(group_id: str, target_rgb: BandImage, predicted_rgb: BandImage,
                   true_alpha: np.ndarray | None = None, predicted_alpha: np.ndarray | None = None) -> EvalRecord:
    ref = target_rgb.data.astype(np.float64)
    cand = predicted_rgb.data.astype(np.float64)
    _check_shapes(ref, cand)
    value = psnr(ref, cand, target_rgb.max_value)
    corr = iou = None
    if true_alpha is not None and predicted_alpha is not None:
        corr, iou = mask_metrics(true_alpha, predicted_alpha)
    return EvalRecord(group_id, float(np.abs(ref - cand).mean()), None if math.isinf(value) else value,
                      math.isinf(value), corr, iou)


def summarize(records: Sequence[EvalRecord]) -> dict:
    def mean(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    return {
        "groups": len(records),
        "mae_rgb": mean(r.mae_rgb for r in records),
        "psnr": mean(r.psnr for r in records),
        "psnr_infinite": sum(r.psnr_infinite for r in records),
        "mask_corr": mean(r.mask_corr for r in records),
        "mask_iou": mean(r.mask_iou for r in records),
    }


def write_report(path: str | os.PathLike, records: Sequence[EvalRecord]) -> Path:
    """One JSON line per group followed by a ``{"summary": ...}`` line."""
    lines = [json.dumps(asdict(r)) for r in records]
    lines.append(json.dumps({"summary": summarize(records)}))
    path = Path(path)
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def read_report(path: str | os.PathLike) -> tuple[list[dict], dict]:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    summary = rows.pop()["summary"] if rows and "summary" in rows[-1] else {}
    return rows, summary


def _to_rgb8(image: BandImage) -> np.ndarray:
    data = image.data.astype(np.float64) / image.max_value
    if image.bands == 1:
        data = np.repeat(data, 3, axis=2)
    return np.rint(data[:, :, :3] * 255).astype(np.uint8)


def panel_pixels(tiles: Sequence[BandImage], labels: Sequence[str], margin: int = 4,
                 label_height: int = 18) -> np.ndarray:
    """Compose a labeled horizontal strip; width = n * side + (n + 1) * margin."""
    from PIL import Image, ImageDraw, ImageFont

    if len(tiles) != len(labels):
        raise ValueError("one label per tile required")
    sizes = {(t.height, t.width) for t in tiles}
    if len(sizes) != 1:
        raise ValueError(f"panel tiles differ in size: {sorted(sizes)}")
    (h, w), = sizes
    n = len(tiles)
    canvas = Image.new("RGB", (n * w + (n + 1) * margin, h + label_height + 2 * margin), "white")
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for i, (tile, label) in enumerate(zip(tiles, labels)):
        x0 = margin + i * (w + margin)
        draw.text((x0, margin), label, fill="black", font=font)
        canvas.paste(Image.fromarray(_to_rgb8(tile)), (x0, margin + label_height))
    return np.asarray(canvas)


def render_panel(path: str | os.PathLike, cloudy_rgb: BandImage, nir: BandImage, predicted_rgb: BandImage,
                 mask: BandImage, ground_truth: BandImage | None = None,
                 nir2rgb: BandImage | None = None, margin: int = 4) -> Path:
    """Write the RGB | NIR | Cloud-free RGB | Ground truth | Cloud mask strip.

    Without ground truth (real clouds) the fourth column shows the
    NIR-only baseline prediction labeled NIR2RGB.
    """
    from PIL import Image

    if ground_truth is not None:
        fourth, labels = ground_truth, SYNTH_COLUMNS
    elif nir2rgb is not None:
        fourth, labels = nir2rgb, REAL_COLUMNS
    else:
        raise ValueError("need either ground truth or an NIR2RGB prediction for column 4")
    pixels = panel_pixels([cloudy_rgb, nir, predicted_rgb, fourth, mask], labels, margin)
    path = Path(path)
    Image.fromarray(pixels).save(path)
    return path


Predictor = Callable[[dict[str, BandImage]], tuple[BandImage, np.ndarray | None]]


def evaluate_dataset(root: str | os.PathLike, records, predictor: Predictor,
                     panel_dir: str | os.PathLike | None = None, max_panels: int = 8) -> list[EvalRecord]:
    """Evaluate ``predictor`` on every manifest record.

    ``predictor`` maps a group's images to (predicted RGB, predicted alpha
    or None).
    """
    from .raster_io import load_group_images

    if panel_dir is not None:
        Path(panel_dir).mkdir(parents=True, exist_ok=True)
    results = []
    for i, rec in enumerate(records):
        imgs = load_group_images(root, rec)
        pred_rgb, pred_alpha = predictor(imgs)
        true_alpha = imgs["mask"].data[:, :, 0] / imgs["mask"].max_value
        results.append(evaluate_group(rec.group_id, imgs["target_rgb"], pred_rgb, true_alpha, pred_alpha))
        if panel_dir is not None and i < max_panels:
            alpha = pred_alpha if pred_alpha is not None else np.zeros_like(true_alpha)
            mask_max = imgs["mask"].max_value
            mask_img = BandImage(np.rint(np.clip(alpha, 0, 1) * mask_max), imgs["mask"].value_depth)
            render_panel(Path(panel_dir) / f"{rec.group_id}.png", imgs["cloudy_rgb"], imgs["nir"], pred_rgb,
                         mask_img, ground_truth=imgs["target_rgb"])
    return results
