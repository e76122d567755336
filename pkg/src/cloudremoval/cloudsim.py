"""Synthetic cloud generation and paired training-data assembly.

Clouds are fractal sums of improved Perlin noise, turned into an opacity
map by a linear ramp and alpha-blended onto the clean RGB tile. Both the
clean target and the cloudy composite are then color corrected against a
shared reference. The NIR band is left untouched.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .raster_io import (
    GROUP_FILES,
    BandImage,
    ManifestRecord,
    Tile,
    save_image,
    write_manifest,
)

logger = logging.getLogger(__name__)

# 8 lattice gradients: the four diagonals and four axes.
_GRAD_X = np.array([1, -1, 1, -1, 1, -1, 0, 0], dtype=np.float64)
_GRAD_Y = np.array([1, 1, -1, -1, 0, 0, 1, -1], dtype=np.float64)


@dataclass(frozen=True)
class NoiseParams:
    seed: int = 0
    octaves: int = 5
    base_frequency: float = 4.0
    persistence: float = 0.5
    lacunarity: float = 2.0

    def __post_init__(self) -> None:
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not 0.0 < self.persistence <= 1.0:
            raise ValueError("persistence must lie in (0, 1]")
        if self.lacunarity <= 1.0:
            raise ValueError("lacunarity must be > 1")
        if self.base_frequency <= 0.0:
            raise ValueError("base_frequency must be > 0")


@dataclass
class CloudField:
    alpha: np.ndarray
    thresholds: tuple[float, float]
    params: NoiseParams | None = None


@dataclass
class TileGroup:
    """One training sample. ``cloudy_raw`` is the composite before color correction."""

    group_id: str
    target_rgb: Tile
    nir: Tile
    cloudy_rgb: Tile
    mask: Tile
    alpha: np.ndarray
    cloudy_raw: np.ndarray
    seed: int = 0
    degenerate_channels: tuple[int, ...] = ()


def permutation_table(seed: int) -> np.ndarray:
    """Seeded shuffle of 0..255, duplicated to 512 entries for wraparound."""
    perm = np.random.default_rng(seed).permutation(256)
    return np.concatenate([perm, perm]).astype(np.int64)


def fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _grad(h, x, y):
    h = h & 7
    return _GRAD_X[h] * x + _GRAD_Y[h] * y


def perlin2(x, y, perm: np.ndarray):
    """Improved Perlin noise in 2-D; accepts scalars or broadcastable arrays.

    ``perm`` must be the 512-entry table from :func:`permutation_table`.
    Returns values in [-1, 1], exactly 0 on the integer lattice.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xf = np.floor(x)
    yf = np.floor(y)
    xi = xf.astype(np.int64) & 255
    yi = yf.astype(np.int64) & 255
    x = x - xf
    y = y - yf
    u = fade(x)
    v = fade(y)

    a = perm[xi] + yi
    b = perm[xi + 1] + yi
    aa, ab = perm[a], perm[a + 1]
    ba, bb = perm[b], perm[b + 1]

    x1 = _grad(aa, x, y) + u * (_grad(ba, x - 1.0, y) - _grad(aa, x, y))
    x2 = _grad(ab, x, y - 1.0) + u * (_grad(bb, x - 1.0, y - 1.0) - _grad(ab, x, y - 1.0))
    out = x1 + v * (x2 - x1)
    return out if out.ndim else float(out)


def fbm(params: NoiseParams, width: int, height: int) -> np.ndarray:
    """Octave sum of :func:`perlin2` over a (height, width) pixel grid.

    Pixel (r, c) samples the noise at (c / width, r / height) scaled by each
    octave's frequency, so ``base_frequency`` counts cycles per tile side.
    The sum is divided by the total amplitude, keeping output in [-1, 1].
    """
    perm = permutation_table(params.seed)
    u = np.arange(width, dtype=np.float64) / width
    v = np.arange(height, dtype=np.float64) / height
    uu, vv = np.meshgrid(u, v)
    total = np.zeros((height, width), dtype=np.float64)
    amplitude = 1.0
    norm = 0.0
    for octave in range(params.octaves):
        freq = params.base_frequency * params.lacunarity ** octave
        total += amplitude * perlin2(freq * uu, freq * vv, perm)
        norm += amplitude
        amplitude *= params.persistence
    return total / norm


def alpha_from_noise(noise: np.ndarray, t0: float = 0.0, t1: float = 0.6,
                     params: NoiseParams | None = None) -> CloudField:
    if not t0 < t1:
        raise ValueError(f"thresholds must satisfy t0 < t1, got ({t0}, {t1})")
    alpha = np.clip((np.asarray(noise, dtype=np.float64) - t0) / (t1 - t0), 0.0, 1.0)
    return CloudField(alpha, (t0, t1), params)


def blend(clean_rgb: np.ndarray, field: CloudField, cloud_color) -> np.ndarray:
    """Alpha-composite a cloud of ``cloud_color`` over ``clean_rgb`` (float result)."""
    clean = np.asarray(clean_rgb, dtype=np.float64)
    alpha = field.alpha
    if clean.shape[:2] != alpha.shape:
        raise ValueError(f"cloud field {alpha.shape} does not match image {clean.shape[:2]}")
    color = np.broadcast_to(np.asarray(cloud_color, dtype=np.float64), clean.shape[2:])
    a = alpha[:, :, None] if clean.ndim == 3 else alpha
    return (1.0 - a) * clean + a * color


def _clipped(channel: np.ndarray, percentiles: tuple[float, float]) -> np.ndarray:
    lo, hi = np.percentile(channel, percentiles)
    return np.clip(channel, lo, hi)


def channel_stats(img: np.ndarray, clip_percentiles: tuple[float, float] = (2.0, 98.0)) -> np.ndarray:
    """Per-channel (mean, std) after percentile clipping, shape (B, 2)."""
    data = np.asarray(img, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    out = np.empty((data.shape[2], 2))
    for c in range(data.shape[2]):
        ch = _clipped(data[:, :, c], clip_percentiles)
        out[c] = ch.mean(), ch.std()
    return out


def color_correct(
    img: np.ndarray,
    reference_stats: np.ndarray,
    clip_percentiles: tuple[float, float] = (2.0, 98.0),
    max_value: int = 255,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Percentile-clip each channel, then match it to the reference mean/std.

    Returns the corrected integer-valued image and the indices of channels
    that had zero variance after clipping (those pass through unchanged).
    """
    low, high = clip_percentiles
    if not low < high:
        raise ValueError("clip percentiles must satisfy low < high")
    data = np.asarray(img, dtype=np.float64)
    if data.size == 0:
        raise ValueError("empty image")
    squeeze = data.ndim == 2
    if squeeze:
        data = data[:, :, None]
    ref = np.asarray(reference_stats, dtype=np.float64).reshape(-1, 2)
    if ref.shape[0] != data.shape[2]:
        raise ValueError(f"{ref.shape[0]} reference channels for a {data.shape[2]}-band image")
    out = np.empty_like(data)
    degenerate = []
    for c in range(data.shape[2]):
        ch = _clipped(data[:, :, c], clip_percentiles)
        mean, std = ch.mean(), ch.std()
        if std <= 1e-12:
            out[:, :, c] = data[:, :, c]
            degenerate.append(c)
            continue
        out[:, :, c] = (ch - mean) * (ref[c, 1] / std) + ref[c, 0]
    out = np.clip(np.rint(out), 0, max_value)
    return (out[:, :, 0] if squeeze else out), tuple(degenerate)


def synthesize_group(
    group_id: str,
    clean_rgb: Tile,
    nir: Tile,
    params: NoiseParams,
    thresholds: tuple[float, float] = (0.0, 0.6),
    cloud_color=None,
    reference_stats: np.ndarray | None = None,
    clip_percentiles: tuple[float, float] = (2.0, 98.0),
) -> TileGroup:
    """Compose fbm -> alpha -> blend -> color correction for one tile pair.

    ``cloud_color`` defaults to white at the tile's depth. Without
    ``reference_stats`` the clean tile's own stats are used.
    """
    rgb = clean_rgb.image
    if (rgb.height, rgb.width) != (nir.image.height, nir.image.width):
        raise ValueError(f"group {group_id}: RGB and NIR tiles differ in size")
    if rgb.bands != 3:
        raise ValueError(f"group {group_id}: expected 3-band RGB, got {rgb.bands}")
    max_value = rgb.max_value
    if cloud_color is None:
        cloud_color = (max_value,) * 3
    cloud_color = np.asarray(cloud_color, dtype=np.float64)
    if cloud_color.min() < 0 or cloud_color.max() > max_value:
        raise ValueError("cloud color outside pixel range")
    if reference_stats is None:
        reference_stats = channel_stats(rgb.data, clip_percentiles)

    noise = fbm(params, rgb.width, rgb.height)
    field = alpha_from_noise(noise, *thresholds, params=params)
    composite = blend(rgb.data, field, cloud_color)
    cloudy_raw = np.clip(np.rint(composite), 0, max_value)

    target, deg_t = color_correct(rgb.data, reference_stats, clip_percentiles, max_value)
    cloudy, deg_c = color_correct(cloudy_raw, reference_stats, clip_percentiles, max_value)
    mask = np.rint(field.alpha * max_value)

    depth = rgb.value_depth
    def tile(data):
        return Tile(clean_rgb.scene_id, clean_rgb.origin, BandImage(data, depth))

    return TileGroup(
        group_id=group_id,
        target_rgb=tile(target),
        nir=nir,
        cloudy_rgb=tile(cloudy),
        mask=tile(mask),
        alpha=field.alpha,
        cloudy_raw=cloudy_raw.astype(rgb.data.dtype),
        seed=params.seed,
        degenerate_channels=tuple(sorted(set(deg_t) | set(deg_c))),
    )


@dataclass
class CloudSimConfig:
    seed: int = 0
    octaves: int = 5
    base_frequency: float = 4.0
    persistence: float = 0.5
    lacunarity: float = 2.0
    thresholds: tuple[float, float] = (0.0, 0.6)
    cloud_color: tuple[float, float, float] | None = None
    clip_percentiles: tuple[float, float] = (2.0, 98.0)
    reference_stats: list[list[float]] | None = None
    group_count: int | None = None

    def validate(self) -> None:
        self.noise_params(0)
        t0, t1 = self.thresholds
        if not t0 < t1:
            raise ValueError(f"cloudsim thresholds must satisfy t0 < t1, got ({t0}, {t1})")
        lo, hi = self.clip_percentiles
        if not 0 <= lo < hi <= 100:
            raise ValueError("clip percentiles must satisfy 0 <= low < high <= 100")
        if self.group_count is not None and self.group_count < 0:
            raise ValueError("group_count must be >= 0")

    def group_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, index]).generate_state(1)[0])

    def noise_params(self, seed: int) -> NoiseParams:
        return NoiseParams(seed, self.octaves, self.base_frequency, self.persistence, self.lacunarity)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_group(root: Path, group: TileGroup) -> dict[str, str]:
    """Write one group directory atomically; return relative paths."""
    root = Path(root)
    final = root / group.group_id
    tmp = Path(tempfile.mkdtemp(dir=root, prefix=f".{group.group_id}."))
    try:
        images = {
            "target_rgb": group.target_rgb.image,
            "nir": group.nir.image,
            "cloudy_rgb": group.cloudy_rgb.image,
            "mask": group.mask.image,
        }
        for key, name in GROUP_FILES.items():
            save_image(images[key], tmp / name)
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return {key: f"{group.group_id}/{name}" for key, name in GROUP_FILES.items()}


def build_dataset(
    tiles: Iterable[tuple[Tile, Tile]],
    config: CloudSimConfig,
    root: str | os.PathLike,
    group_ids: Sequence[str] | None = None,
) -> Path:
    """Synthesize one group per (rgb, nir) tile pair and write the dataset.

    Returns the manifest path. Group seeds derive from ``config.seed`` and
    the pair index, and are recorded alongside file checksums.
    """
    config.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pairs = list(tiles)
    if group_ids is None:
        group_ids = [f"g{i:06d}" for i in range(len(pairs))]
    if len(group_ids) != len(pairs):
        raise ValueError("group_ids and tiles differ in length")
    if len(set(group_ids)) != len(group_ids):
        raise ValueError("duplicate group ids")

    ref = None if config.reference_stats is None else np.asarray(config.reference_stats)
    records = []
    for index, ((rgb, nir), gid) in enumerate(zip(pairs, group_ids)):
        params = config.noise_params(config.group_seed(index))
        group = synthesize_group(gid, rgb, nir, params, tuple(config.thresholds),
                                 config.cloud_color, ref, tuple(config.clip_percentiles))
        paths = write_group(root, group)
        checksums = {k: sha256_file(root / p) for k, p in paths.items()}
        records.append(ManifestRecord(
            gid, rgb.scene_id, rgb.origin, paths,
            {"seed": params.seed, "noise": asdict(params), "sha256": checksums,
             "cloud_fraction": float(group.alpha.mean())},
        ))
        logger.debug("wrote group %s", gid)
    cfg = asdict(config)
    header = {"format": "cloudremoval-dataset/1", "cloudsim": cfg, "count": len(records)}
    return write_manifest(root, records, header)


def synthetic_scene(seed: int, size: int = 512, value_depth: int = 8) -> tuple[BandImage, BandImage]:
    """Procedural RGB + NIR scene standing in for real satellite imagery.

    Land cover (water, vegetation, bare soil, built-up) is drawn from
    low-frequency noise; NIR follows the usual spectral behavior (dark
    water, bright vegetation), so RGB is largely predictable from NIR.
    """
    rng = np.random.default_rng(seed)
    scale = float((1 << value_depth) - 1)
    sub = [int(s) for s in rng.integers(0, 2**31 - 1, size=4)]
    land = fbm(NoiseParams(sub[0], 4, 3.0, 0.5, 2.0), size, size)
    veg = fbm(NoiseParams(sub[1], 4, 5.0, 0.5, 2.0), size, size)
    texture = fbm(NoiseParams(sub[2], 3, 48.0, 0.6, 2.0), size, size)
    blocks = fbm(NoiseParams(sub[3], 1, 24.0, 0.5, 2.0), size, size)

    # RGB, NIR reflectances in [0, 1]
    palette = {
        "water": ((0.08, 0.16, 0.28), 0.04),
        "vegetation": ((0.16, 0.36, 0.14), 0.62),
        "soil": ((0.52, 0.42, 0.30), 0.38),
        "urban": ((0.62, 0.60, 0.58), 0.24),
    }
    cls = np.full((size, size), "soil", dtype=object)
    cls[veg > 0.05] = "vegetation"
    cls[(land > -0.05) & (np.abs(blocks) > 0.25)] = "urban"
    cls[land < -0.25] = "water"

    rgb = np.zeros((size, size, 3))
    nir = np.zeros((size, size))
    for name, (color, nir_ref) in palette.items():
        sel = cls == name
        rgb[sel] = color
        nir[sel] = nir_ref
    rgb *= (1.0 + 0.25 * texture)[:, :, None]
    nir *= 1.0 + 0.25 * texture
    rgb += rng.normal(0.0, 0.01, rgb.shape)
    nir += rng.normal(0.0, 0.01, nir.shape)
    rgb = np.clip(np.rint(rgb * scale), 0, scale)
    nir = np.clip(np.rint(nir * scale), 0, scale)
    return BandImage(rgb, value_depth), BandImage(nir, value_depth)


def synthetic_tile_pairs(count: int, side: int = 64, scene_size: int = 512, seed: int = 0,
                         stride: int | None = None, value_depth: int = 8) -> list[tuple[Tile, Tile]]:
    """First ``count`` co-registered (rgb, nir) tiles cut from successive synthetic scenes."""
    from .raster_io import extract_tiles

    stride = stride or side
    pairs: list[tuple[Tile, Tile]] = []
    scene_index = 0
    while len(pairs) < count:
        rgb, nir = synthetic_scene(seed + scene_index, scene_size, value_depth)
        sid = f"synthetic-{seed + scene_index}"
        pairs += zip(extract_tiles(rgb, side, stride, sid), extract_tiles(nir, side, stride, sid))
        scene_index += 1
    return pairs[:count]
