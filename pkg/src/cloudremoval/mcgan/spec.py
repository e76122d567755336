"""Layer-by-layer network descriptions.

``ModelSpec.table1()`` is the published McGANs layout: an 8-level U-Net
generator (first layer stride 1, then seven stride-2 halvings) and a
4-level patch discriminator. ``ModelSpec.scaled()`` keeps the same pattern
with fewer levels/filters for small tiles and tests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

INPUT_MODES = {
    # mode: (condition bands, default output channels)
    "rgbn": (4, 4),
    "nir": (1, 3),
    "rgb": (3, 3),
}

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "none")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "deconv" (transposed)
    filters: int
    kernel: int
    stride: int
    batch_norm: bool = False
    activation: str = "none"
    dropout: float = 0.0
    slope: float = 0.2

    def __post_init__(self) -> None:
        if self.kind not in ("conv", "deconv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.filters, self.kernel, self.stride) < 1:
            raise ValueError("filters, kernel and stride must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def code(self) -> str:
        """Table-style code such as ``CBRD(512, 4, 2)``."""
        letters = "C" + ("B" if self.batch_norm else "")
        if self.activation in ("relu", "leaky_relu"):
            letters += "R"
        if self.dropout > 0:
            letters += "D"
        return f"{letters}({self.filters}, {self.kernel}, {self.stride})"


@dataclass(frozen=True)
class ModelSpec:
    input_channels: int
    output_channels: int
    encoder: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...]
    discriminator: tuple[LayerSpec, ...]
    disc_candidate_channels: int

    def __post_init__(self) -> None:
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.encoder)

    @property
    def tile_multiple(self) -> int:
        """Input sides must be multiples of this (128 for the 8-level layout)."""
        return 2 ** sum(1 for layer in self.encoder if layer.stride == 2)

    @property
    def disc_input_channels(self) -> int:
        return self.input_channels + self.disc_candidate_channels

    @property
    def skip_connections(self) -> dict[int, int]:
        """Decoder index -> encoder index whose output is concatenated into it."""
        n = self.levels
        return {j: n - 1 - j for j in range(1, n)}

    def decoder_in_channels(self) -> list[int]:
        enc = [layer.filters for layer in self.encoder]
        chans = [enc[-1]]
        for j in range(1, len(self.decoder)):
            chans.append(self.decoder[j - 1].filters + enc[self.skip_connections[j]])
        return chans

    def validate(self) -> None:
        n = len(self.encoder)
        if n < 2 or len(self.decoder) != n:
            raise ValueError("encoder and decoder must have the same number (>= 2) of layers")
        if self.encoder[0].stride != 1 or any(l.stride != 2 for l in self.encoder[1:]):
            raise ValueError("encoder must be one stride-1 layer followed by stride-2 layers")
        if any(l.kind != "conv" for l in self.encoder):
            raise ValueError("encoder layers must be convolutions")
        for j, layer in enumerate(self.decoder[:-1]):
            if layer.kind != "deconv" or layer.stride != 2:
                raise ValueError(f"decoder layer {j + 1} must be a stride-2 transposed convolution")
        head = self.decoder[-1]
        if head.kind != "conv" or head.stride != 1 or head.filters != self.output_channels:
            raise ValueError("decoder head must be a stride-1 convolution onto the output channels")
        if head.activation != "tanh":
            raise ValueError("decoder head must use tanh")
        disc_head = self.discriminator[-1]
        if disc_head.filters != 1 or disc_head.stride != 1:
            raise ValueError("discriminator head must be a stride-1 single-filter convolution")
        if self.disc_candidate_channels not in (self.output_channels, self.output_channels - 1):
            raise ValueError("discriminator candidate channels must be the output (optionally minus the mask)")

    @classmethod
    def scaled(
        cls,
        input_channels: int = 4,
        output_channels: int = 4,
        levels: int = 8,
        width: int = 64,
        max_filters: int = 512,
        dropout_layers: int = 3,
        dropout: float = 0.5,
        disc_layers: int = 4,
        slope: float = 0.2,
        disc_sees_mask: bool = True,
    ) -> "ModelSpec":
        enc_filters = [min(width * 2 ** i, max_filters) for i in range(levels)]
        encoder = [LayerSpec("conv", enc_filters[0], 3, 1, False, "leaky_relu", slope=slope)]
        encoder += [LayerSpec("conv", f, 4, 2, True, "leaky_relu", slope=slope) for f in enc_filters[1:]]
        decoder = [
            LayerSpec("deconv", enc_filters[levels - 2 - j], 4, 2, True, "relu",
                      dropout if j < dropout_layers else 0.0)
            for j in range(levels - 1)
        ]
        decoder.append(LayerSpec("conv", output_channels, 3, 1, False, "tanh"))
        disc = [LayerSpec("conv", min(width * 2 ** i, max_filters), 4, 2, True, "leaky_relu", slope=slope)
                for i in range(disc_layers)]
        disc.append(LayerSpec("conv", 1, 3, 1, False, "none"))
        # 4 outputs = RGB + mask; the discriminator may be shown RGB only
        candidate = output_channels - 1 if output_channels == 4 and not disc_sees_mask else output_channels
        return cls(input_channels, output_channels, tuple(encoder), tuple(decoder), tuple(disc), candidate)

    @classmethod
    def table1(cls, input_channels: int = 4, output_channels: int = 4, disc_sees_mask: bool = True) -> "ModelSpec":
        return cls.scaled(input_channels, output_channels, disc_sees_mask=disc_sees_mask)

    @classmethod
    def for_mode(cls, mode: str, with_mask: bool | None = None, **kwargs) -> "ModelSpec":
        if mode not in INPUT_MODES:
            raise ValueError(f"unknown input mode {mode!r}; expected one of {sorted(INPUT_MODES)}")
        cin, cout = INPUT_MODES[mode]
        if with_mask is not None:
            cout = 4 if with_mask else 3
        return cls.scaled(cin, cout, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = lambda key: tuple(LayerSpec(**l) for l in d[key])  # noqa: E731
        return cls(d["input_channels"], d["output_channels"], layers("encoder"),
                   layers("decoder"), layers("discriminator"), d["disc_candidate_channels"])

    def table(self) -> dict[str, list[str]]:
        return {
            "encoder": [l.code for l in self.encoder],
            "decoder": [l.code for l in self.decoder],
            "discriminator": [l.code for l in self.discriminator],
        }
