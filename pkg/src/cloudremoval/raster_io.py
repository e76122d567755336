"""Raster loading/saving, scene tiling and pixel-domain normalization.

PNG (8/16-bit, 1, 3 or 4 bands) goes through OpenCV, which unlike Pillow
writes 16-bit multi-band PNGs. GeoTIFF is read/written with tifffile; only
the pixel grid is kept, no geo-referencing.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np

SUPPORTED_BANDS = (1, 3, 4)
SUPPORTED_DEPTHS = (8, 16)

# Dataset layout: <root>/<group_id>/<file>
GROUP_FILES = {
    "target_rgb": "target_rgb.png",
    "nir": "nir.png",
    "cloudy_rgb": "cloudy_rgb.png",
    "mask": "mask.png",
}
MANIFEST_NAME = "manifest.json"


class RasterError(Exception):
    """Raised for unreadable, corrupt or unsupported rasters."""


@dataclass
class BandImage:
    """A multiband raster stored as an (H, W, B) integer array."""

    data: np.ndarray
    value_depth: int = 8
    ground_resolution: float | None = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise RasterError(f"expected (H, W, B) data, got shape {data.shape}")
        if data.shape[2] not in SUPPORTED_BANDS:
            raise RasterError(f"unsupported band count {data.shape[2]}")
        if self.value_depth not in SUPPORTED_DEPTHS:
            raise RasterError(f"unsupported value depth {self.value_depth}")
        dtype = np.uint8 if self.value_depth == 8 else np.uint16
        if data.dtype != dtype:
            if data.size and (data.min() < 0 or data.max() > self.max_value):
                raise RasterError(f"samples outside [0, {self.max_value}]")
            data = data.astype(dtype)
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def max_value(self) -> int:
        return (1 << self.value_depth) - 1

    def select(self, bands: Sequence[int]) -> "BandImage":
        return BandImage(self.data[:, :, list(bands)], self.value_depth, self.ground_resolution)


@dataclass
class Tile:
    scene_id: str
    origin: tuple[int, int]
    image: BandImage

    @property
    def side(self) -> int:
        return self.image.width


def _depth_of(dtype: np.dtype) -> int:
    if dtype == np.uint8:
        return 8
    if dtype == np.uint16:
        return 16
    raise RasterError(f"unsupported sample type {dtype}")


def load_image(path: str | os.PathLike) -> BandImage:
    """Read a PNG or (Geo)TIFF raster, inferring band count and depth."""
    path = Path(path)
    if not path.is_file():
        raise RasterError(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix in (".tif", ".tiff"):
        import tifffile

        try:
            data = tifffile.imread(path)
        except Exception as exc:  # tifffile raises a zoo of types
            raise RasterError(f"cannot read {path}: {exc}") from exc
    else:
        data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if data is None:
            raise RasterError(f"cannot decode {path}")
        if data.ndim == 3:
            # OpenCV stores BGR(A)
            order = [2, 1, 0] + list(range(3, data.shape[2]))
            data = data[:, :, order]
    if data.ndim == 3 and data.shape[2] not in SUPPORTED_BANDS:
        raise RasterError(f"{path}: unsupported band count {data.shape[2]}")
    return BandImage(np.ascontiguousarray(data), _depth_of(data.dtype))


def save_image(image: BandImage, path: str | os.PathLike) -> Path:
    """Write ``image`` losslessly; the format follows the file suffix."""
    path = Path(path)
    data = image.data
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        tifffile.imwrite(path, data[:, :, 0] if image.bands == 1 else data)
        return path
    if image.bands == 1:
        out = data[:, :, 0]
    else:
        order = [2, 1, 0] + list(range(3, image.bands))
        out = np.ascontiguousarray(data[:, :, order])
    if not cv2.imwrite(str(path), out):
        raise RasterError(f"cannot write {path}")
    return path


def window_count(height: int, width: int, side: int, stride: int) -> int:
    return ((height - side) // stride + 1) * ((width - side) // stride + 1)


def iter_windows(height: int, width: int, side: int, stride: int) -> Iterator[tuple[int, int]]:
    for row in range(0, height - side + 1, stride):
        for col in range(0, width - side + 1, stride):
            yield row, col


def extract_tiles(
    scene: BandImage,
    side: int = 256,
    stride: int = 256,
    scene_id: str = "scene",
    valid_mask: np.ndarray | None = None,
) -> list[Tile]:
    """Cut every fully-contained ``side`` x ``side`` window, row-major.

    When ``valid_mask`` (H, W bool) is given, windows touching any invalid
    pixel are dropped.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if side < 1 or side > min(scene.width, scene.height):
        raise ValueError(f"tile side {side} larger than scene {scene.height}x{scene.width}")
    if valid_mask is not None and valid_mask.shape != (scene.height, scene.width):
        raise ValueError("validity mask shape does not match scene")
    tiles = []
    for row, col in iter_windows(scene.height, scene.width, side, stride):
        if valid_mask is not None and not valid_mask[row:row + side, col:col + side].all():
            continue
        window = scene.data[row:row + side, col:col + side].copy()
        tiles.append(Tile(scene_id, (row, col), BandImage(window, scene.value_depth, scene.ground_resolution)))
    return tiles


def normalize_values(values: np.ndarray, value_depth: int) -> np.ndarray:
    scale = float((1 << value_depth) - 1)
    return (2.0 * np.asarray(values, dtype=np.float64) / scale - 1.0).astype(np.float32)


def normalize(img: BandImage) -> np.ndarray:
    """Map stored samples to [-1, 1] using the declared (not observed) depth."""
    return normalize_values(img.data, img.value_depth)


def denormalize(t: np.ndarray, value_depth: int = 8) -> BandImage:
    """Rounded inverse of :func:`normalize`; out-of-range input is clipped."""
    scale = float((1 << value_depth) - 1)
    values = (np.asarray(t, dtype=np.float64) + 1.0) * 0.5 * scale
    values = np.clip(np.rint(values), 0, scale)
    return BandImage(values, value_depth)


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class ManifestRecord:
    group_id: str
    scene_id: str
    origin: tuple[int, int]
    paths: dict[str, str]
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "id": self.group_id,
            "scene_id": self.scene_id,
            "origin": list(self.origin),
            "paths": dict(self.paths),
            **self.extra,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "ManifestRecord":
        extra = {k: v for k, v in rec.items() if k not in ("id", "scene_id", "origin", "paths")}
        return cls(rec["id"], rec["scene_id"], tuple(rec["origin"]), dict(rec["paths"]), extra)


def write_manifest(root: Path, records: Sequence[ManifestRecord], header: dict | None = None) -> Path:
    root = Path(root)
    doc = {**(header or {}), "groups": [r.to_json() for r in records]}
    path = root / MANIFEST_NAME
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))
    return path


def read_manifest(root: str | os.PathLike) -> tuple[dict, list[ManifestRecord]]:
    """Return (header, records). ``root`` may be the directory or the file."""
    path = Path(root)
    if path.suffix != ".json":
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    header = {k: v for k, v in doc.items() if k != "groups"}
    return header, [ManifestRecord.from_json(r) for r in doc.get("groups", [])]


def load_group_images(root: str | os.PathLike, record: ManifestRecord) -> dict[str, BandImage]:
    root = Path(root)
    out = {}
    for key in GROUP_FILES:
        rel = record.paths.get(key)
        if rel is None:
            raise RasterError(f"group {record.group_id}: manifest lacks '{key}'")
        out[key] = load_image(root / rel)
    shapes = {(img.height, img.width) for img in out.values()}
    if len(shapes) != 1:
        raise RasterError(f"group {record.group_id}: rasters differ in size {sorted(shapes)}")
    return out
