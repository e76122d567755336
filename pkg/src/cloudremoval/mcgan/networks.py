"""U-Net generator and patch discriminator built from a :class:`ModelSpec`."""

from __future__ import annotations

import torch
import torch.nn as nn

from .spec import LayerSpec, ModelSpec


def _block(layer: LayerSpec, in_channels: int) -> nn.Sequential:
    """Conv -> BatchNorm -> activation -> Dropout, following the C/B/R/D letters."""
    pad = 1  # k4/s2 halves (or doubles) a side; k3/s1 keeps it
    if layer.kind == "conv":
        conv = nn.Conv2d(in_channels, layer.filters, layer.kernel, layer.stride, pad, bias=not layer.batch_norm)
    else:
        conv = nn.ConvTranspose2d(in_channels, layer.filters, layer.kernel, layer.stride, pad,
                                  bias=not layer.batch_norm)
    mods: list[nn.Module] = [conv]
    if layer.batch_norm:
        mods.append(nn.BatchNorm2d(layer.filters))
    if layer.activation == "relu":
        mods.append(nn.ReLU())
    elif layer.activation == "leaky_relu":
        mods.append(nn.LeakyReLU(layer.slope))
    elif layer.activation == "tanh":
        mods.append(nn.Tanh())
    if layer.dropout > 0:
        mods.append(nn.Dropout(layer.dropout))
    return nn.Sequential(*mods)


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """N(0, 0.02) convolutions, N(1, 0.02) batch-norm scales, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02, generator=generator)
            nn.init.zeros_(m.bias)


class Generator(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = nn.ModuleList()
        channels = spec.input_channels
        for layer in spec.encoder:
            self.encoder.append(_block(layer, channels))
            channels = layer.filters
        self.decoder = nn.ModuleList(
            _block(layer, cin) for layer, cin in zip(spec.decoder, spec.decoder_in_channels())
        )
        self._skips = spec.skip_connections

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = []
        h = x
        for block in self.encoder:
            h = block(h)
            features.append(h)
        h = self.decoder[0](features[-1])
        for j in range(1, len(self.decoder)):
            h = self.decoder[j](torch.cat([h, features[self._skips[j]]], dim=1))
        return h


class Discriminator(nn.Module):
    """Scores (condition, candidate) pairs with a map of per-patch logits."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        channels = spec.disc_input_channels
        for layer in spec.discriminator:
            blocks.append(_block(layer, channels))
            channels = layer.filters
        self.layers = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.layers(torch.cat([x, y[:, : self.spec.disc_candidate_channels]], dim=1))


def build_generator(spec: ModelSpec, seed: int | None = 0) -> Generator:
    net = Generator(spec)
    init_weights(net, torch.Generator().manual_seed(seed) if seed is not None else None)
    return net


def build_discriminator(spec: ModelSpec, seed: int | None = 0) -> Discriminator:
    net = Discriminator(spec)
    init_weights(net, torch.Generator().manual_seed(seed + 1) if seed is not None else None)
    return net


def layer_shapes(net: nn.Module, *inputs: torch.Tensor) -> list[tuple[str, tuple[int, ...]]]:
    """Output shape (N, C, H, W) of every top-level block, in execution order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    hooks = []
    for name, module in net.named_modules():
        if isinstance(module, nn.Sequential) and name.count(".") == 1:
            hooks.append(module.register_forward_hook(
                lambda m, i, o, name=name: shapes.append((name, tuple(o.shape)))))
    try:
        with torch.no_grad():
            net(*inputs)
    finally:
        for h in hooks:
            h.remove()
    return shapes


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
