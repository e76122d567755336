"""Cloud removal with a trained generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..raster_io import BandImage, denormalize
from .checkpoint import Checkpoint, load_checkpoint, load_generator
from .networks import Generator
from .training import stack_inputs


class BandMismatch(ValueError):
    pass


@dataclass
class Prediction:
    rgb: BandImage
    mask: BandImage | None
    mask_alpha: np.ndarray | None  # opacity in [0, 1]


def _as_generator(model) -> Generator:
    if isinstance(model, Generator):
        return model.eval()
    if isinstance(model, Checkpoint):
        return load_generator(model)
    return load_generator(load_checkpoint(model))


def mode_of(spec) -> str:
    return {4: "rgbn", 1: "nir", 3: "rgb"}[spec.input_channels]


def predict(model, cloudy_rgb: BandImage | None = None, nir: BandImage | None = None,
            rgbn: BandImage | None = None) -> Prediction:
    """Run the generator in inference mode (dropout off, running BN stats).

    ``model`` is a Generator, a Checkpoint or a checkpoint path. Inputs are
    either separate ``cloudy_rgb``/``nir`` images or one 4-band ``rgbn``.
    Output depth follows the first supplied input.
    """
    gen = _as_generator(model)
    spec = gen.spec
    if rgbn is not None:
        if rgbn.bands != 4:
            raise BandMismatch(f"expected a 4-band RGBN image, got {rgbn.bands} bands")
        cloudy_rgb, nir = rgbn.select([0, 1, 2]), rgbn.select([3])
    mode = mode_of(spec)
    try:
        x = stack_inputs(mode, cloudy_rgb, nir)
    except ValueError as exc:
        raise BandMismatch(f"model expects '{mode}' input: {exc}") from exc
    _, h, w = x.shape
    m = spec.tile_multiple
    if h % m or w % m:
        raise ValueError(f"tile sides must be divisible by {m}, got {h}x{w}")
    depth = (cloudy_rgb if cloudy_rgb is not None else nir).value_depth
    dtype = next(gen.parameters()).dtype
    with torch.no_grad():
        out = gen(torch.from_numpy(x)[None].to(dtype))[0].cpu().numpy().astype(np.float64)
    rgb = denormalize(out[:3].transpose(1, 2, 0), depth)
    if spec.output_channels < 4:
        return Prediction(rgb, None, None)
    alpha = np.clip((out[3] + 1.0) * 0.5, 0.0, 1.0)
    return Prediction(rgb, denormalize(out[3], depth), alpha)
