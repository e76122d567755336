"""Checkpoint archive.

A checkpoint is a zip file holding ``config.json`` (model spec, training
config, counters, optimizer hyper-parameters) and one binary blob per
tensor. A blob is ``<u4 ndim``, ``ndim`` x ``<u4`` dims, then the values as
little-endian float32. Blob names:

    generator/<state-dict key>        parameters and batch-norm buffers
    discriminator/<state-dict key>
    g_optim/<param index>/<field>     Adam moments and step count
    d_optim/<param index>/<field>
    rng/torch                         torch CPU RNG state (raw bytes)
"""

from __future__ import annotations

import json
import os
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .networks import Discriminator, Generator
from .spec import ModelSpec
from .training import TrainConfig, TrainState, _adam

FORMAT = "cloudremoval-checkpoint/1"


def encode_tensor(t: torch.Tensor | np.ndarray) -> bytes:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def decode_tensor(blob: bytes) -> torch.Tensor:
    (ndim,) = struct.unpack_from("<I", blob, 0)
    shape = struct.unpack_from(f"<{ndim}I", blob, 4)
    offset = 4 + 4 * ndim
    arr = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


@dataclass
class Checkpoint:
    spec: ModelSpec
    config: TrainConfig
    generator: dict[str, torch.Tensor]
    discriminator: dict[str, torch.Tensor]
    g_optim: dict = field(default_factory=dict)
    d_optim: dict = field(default_factory=dict)
    epoch: int = 0
    iteration: int = 0
    rng_state: bytes | None = None


def _optim_blobs(prefix: str, opt_state: dict) -> dict[str, bytes]:
    out = {}
    for idx, fields in opt_state["state"].items():
        for name, value in fields.items():
            out[f"{prefix}/{idx}/{name}"] = encode_tensor(torch.as_tensor(value))
    return out


def save_checkpoint(path: str | os.PathLike, state: TrainState) -> Path:
    """Write ``state`` atomically (temp file + rename)."""
    path = Path(path)
    g_opt = state.g_optimizer.state_dict()
    d_opt = state.d_optimizer.state_dict()
    meta = {
        "format": FORMAT,
        "epoch": state.epoch,
        "iteration": state.iteration,
        "model_spec": state.spec.to_dict(),
        "train_config": state.config.to_dict(),
        "g_optim_groups": g_opt["param_groups"],
        "d_optim_groups": d_opt["param_groups"],
    }
    blobs: dict[str, bytes] = {}
    for prefix, net in (("generator", state.generator), ("discriminator", state.discriminator)):
        for key, tensor in net.state_dict().items():
            blobs[f"{prefix}/{key}"] = encode_tensor(tensor)
    blobs.update(_optim_blobs("g_optim", g_opt))
    blobs.update(_optim_blobs("d_optim", d_opt))
    tmp = path.with_name(f".{path.name}.tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.json", json.dumps(meta, indent=1, sort_keys=True))
        for name in sorted(blobs):
            zf.writestr(name, blobs[name])
        zf.writestr("rng/torch", torch.get_rng_state().numpy().tobytes())
    os.replace(tmp, path)
    return path


def _collect_optim(zf: zipfile.ZipFile, prefix: str, groups: list) -> dict:
    state: dict[int, dict] = {}
    for name in zf.namelist():
        if name.startswith(prefix + "/"):
            _, idx, field_name = name.split("/")
            value = decode_tensor(zf.read(name))
            state.setdefault(int(idx), {})[field_name] = value
    return {"state": state, "param_groups": groups}


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("config.json"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
        nets: dict[str, dict[str, torch.Tensor]] = {"generator": {}, "discriminator": {}}
        for name in zf.namelist():
            head, _, key = name.partition("/")
            if head in nets:
                nets[head][key] = decode_tensor(zf.read(name))
        g_optim = _collect_optim(zf, "g_optim", meta["g_optim_groups"])
        d_optim = _collect_optim(zf, "d_optim", meta["d_optim_groups"])
        rng = zf.read("rng/torch") if "rng/torch" in zf.namelist() else None
    return Checkpoint(
        spec=ModelSpec.from_dict(meta["model_spec"]),
        config=TrainConfig.from_dict(meta["train_config"]),
        generator=nets["generator"],
        discriminator=nets["discriminator"],
        g_optim=g_optim,
        d_optim=d_optim,
        epoch=meta["epoch"],
        iteration=meta["iteration"],
        rng_state=rng,
    )


def _load_net(net: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    reference = net.state_dict()
    converted = {}
    for key, ref in reference.items():
        if key not in tensors:
            raise ValueError(f"checkpoint lacks tensor {key}")
        value = tensors[key]
        if tuple(value.shape) != tuple(ref.shape):
            raise ValueError(f"{key}: checkpoint shape {tuple(value.shape)} != model {tuple(ref.shape)}")
        converted[key] = value.to(ref.dtype)
    net.load_state_dict(converted)


def load_generator(ckpt: Checkpoint) -> Generator:
    net = Generator(ckpt.spec)
    _load_net(net, ckpt.generator)
    return net.eval()


def restore_state(ckpt: Checkpoint, config: TrainConfig | None = None) -> TrainState:
    """Rebuild networks and optimizers; ``config`` may extend the run length."""
    config = config or ckpt.config
    gen = Generator(ckpt.spec)
    disc = Discriminator(ckpt.spec)
    _load_net(gen, ckpt.generator)
    _load_net(disc, ckpt.discriminator)
    g_opt = _adam(gen.parameters(), config)
    d_opt = _adam(disc.parameters(), config)
    if ckpt.g_optim["state"]:
        g_opt.load_state_dict(ckpt.g_optim)
    if ckpt.d_optim["state"]:
        d_opt.load_state_dict(ckpt.d_optim)
    if ckpt.rng_state is not None:
        torch.set_rng_state(torch.frombuffer(bytearray(ckpt.rng_state), dtype=torch.uint8))
    return TrainState(config, ckpt.spec, gen, disc, g_opt, d_opt, ckpt.epoch, ckpt.iteration)
