"""Tile feature extractors and the on-disk feature cache."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ..raster_io import BandImage, atomic_write_text

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class FeatureVector:
    tile_id: str
    values: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"tile {self.tile_id}: non-finite feature entries")


class FeatureExtractor(Protocol):
    name: str
    dimension: int

    def __call__(self, image: BandImage) -> np.ndarray: ...


def _rgb_unit(image: BandImage) -> np.ndarray:
    if image.bands < 3:
        raise ValueError(f"feature extraction needs >= 3 bands, got {image.bands}")
    return image.data[:, :, :3].astype(np.float32) / image.max_value


class HistogramExtractor:
    """Per-channel intensity histograms plus a gradient-orientation histogram.

    Each histogram is normalized to unit mass. Used when no pretrained
    weights are available.
    """

    name = "histogram"

    def __init__(self, bins: int = 32, orientation_bins: int = 16):
        self.bins = bins
        self.orientation_bins = orientation_bins
        self.dimension = 3 * bins + orientation_bins

    def __call__(self, image: BandImage) -> np.ndarray:
        rgb = _rgb_unit(image)
        parts = []
        for c in range(3):
            hist, _ = np.histogram(rgb[:, :, c], bins=self.bins, range=(0.0, 1.0))
            parts.append(hist / max(hist.sum(), 1))
        gray = rgb.mean(axis=2)
        gy, gx = np.gradient(gray)
        magnitude = np.hypot(gx, gy)
        angle = np.mod(np.arctan2(gy, gx), np.pi)
        hist, _ = np.histogram(angle, bins=self.orientation_bins, range=(0.0, np.pi), weights=magnitude)
        total = hist.sum()
        parts.append(hist / total if total > 0 else hist)
        return np.concatenate(parts).astype(np.float32)


class AlexNetExtractor:
    """Penultimate fully-connected activations (4096-d) of an AlexNet.

    ``weights`` is a torchvision-format state dict file (``.pth``).
    """

    name = "alexnet-fc7"
    dimension = 4096

    def __init__(self, weights: str | os.PathLike, device: str = "cpu"):
        import torch
        from torchvision.models import alexnet

        path = Path(weights)
        if not path.is_file():
            raise FileNotFoundError(f"feature extractor weights not found: {path}")
        net = alexnet(weights=None)
        net.load_state_dict(torch.load(path, map_location=device, weights_only=True))
        net.classifier = net.classifier[:6]  # drop the 1000-way head, keep fc7 + ReLU
        self.net = net.eval().to(device)
        self.device = device

    def __call__(self, image: BandImage) -> np.ndarray:
        import torch
        import torch.nn.functional as F

        rgb = (_rgb_unit(image) - IMAGENET_MEAN) / IMAGENET_STD
        x = torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)))[None].to(self.device)
        x = F.interpolate(x, size=(224, 224), mode="bilinear", align_corners=False)
        with torch.no_grad():
            out = self.net(x)
        return out[0].cpu().numpy().astype(np.float32)


def make_extractor(kind: str = "alexnet", weights: str | None = None) -> FeatureExtractor:
    if kind == "alexnet":
        if weights is None:
            raise FileNotFoundError("alexnet extractor requires a weights file")
        return AlexNetExtractor(weights)
    if kind == "histogram":
        return HistogramExtractor()
    raise ValueError(f"unknown feature extractor '{kind}'")


def extract_features(tile_id: str, image: BandImage, extractor: FeatureExtractor) -> FeatureVector:
    values = np.asarray(extractor(image), dtype=np.float32)
    if values.shape != (extractor.dimension,):
        raise ValueError(f"extractor returned shape {values.shape}, declared {extractor.dimension}")
    return FeatureVector(tile_id, values)


def write_feature_cache(path: str | os.PathLike, vectors: Sequence[FeatureVector], extractor_name: str) -> Path:
    """Store vectors as a flat little-endian float32 file plus a JSON index.

    ``path`` names the binary; the index goes next to it as ``<path>.json``.
    """
    path = Path(path)
    dim = len(vectors[0].values) if vectors else 0
    matrix = np.zeros((len(vectors), dim), dtype="<f4")
    for i, vec in enumerate(vectors):
        if len(vec.values) != dim:
            raise ValueError("feature vectors differ in dimension")
        matrix[i] = vec.values
    matrix.tofile(path)
    index = {
        "extractor": extractor_name,
        "dimension": dim,
        "count": len(vectors),
        "dtype": "<f4",
        "tile_ids": [v.tile_id for v in vectors],
    }
    atomic_write_text(Path(f"{path}.json"), json.dumps(index, indent=1))
    return path


def read_feature_cache(path: str | os.PathLike) -> tuple[dict, np.ndarray]:
    """Return (index, memory-mapped (count, dimension) matrix)."""
    path = Path(path)
    index = json.loads(Path(f"{path}.json").read_text())
    shape = (index["count"], index["dimension"])
    if shape[0] == 0:
        return index, np.zeros(shape, dtype="<f4")
    return index, np.memmap(path, dtype=index["dtype"], mode="r", shape=shape)
