"""Content encoder, style encoder, style mapping + decoder, and the multi-task discriminator."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff.init import rng_for
from .exceptions import ConfigError, TopologyError
from .nn import MLP, BlockConfig, Linear, Module, SpiralBlock, SpiralResBlock


@dataclass
class ArchitectureConfig:
    """Layer plan for all four networks.

    The decoder mirrors the encoders: its content MLP produces a
    ``(V_coarsest, bottleneck_channels)`` grid, followed by two AdaIN
    SpiralResBlocks, up-sampling SpiralBlocks (the first one AdaIN-conditioned)
    and a final linear spiral convolution to xyz.
    """

    name: str = "synth"
    n_vertices: int = 642
    n_downsamplings: int = 3
    factor: int = 4
    spiral_length: int = 9
    dilation: int = 1
    content_dim: int = 8
    style_dim: int = 4
    n_styles: int = 10
    content_channels: tuple = (16, 32, 64)
    content_res_blocks: int = 2
    content_mlp: tuple = (64,)
    style_channels: tuple = (16, 32, 64)
    style_mlp: tuple = (64,)
    decoder_mlp: tuple = (64,)
    bottleneck_channels: int = 64
    decoder_res_blocks: int = 2
    decoder_channels: tuple = (32, 16, 16)
    mapping_hidden: tuple = (64, 64, 16)
    disc_channels: tuple = (16, 32, 64)

    def __post_init__(self):
        for key in ("content_channels", "content_mlp", "style_channels", "style_mlp",
                    "decoder_mlp", "decoder_channels", "mapping_hidden", "disc_channels"):
            setattr(self, key, tuple(int(v) for v in getattr(self, key)))
        if self.content_dim < 1 or self.style_dim < 1:
            raise ConfigError("content_dim and style_dim must be >= 1")
        if self.n_styles < 1:
            raise ConfigError("n_styles must be >= 1")
        n = self.n_downsamplings
        for key in ("content_channels", "style_channels", "disc_channels", "decoder_channels"):
            if len(getattr(self, key)) != n:
                raise ConfigError(f"{key} needs one entry per down-sampling level ({n})")

    @property
    def level_sizes(self) -> list[int]:
        sizes = [self.n_vertices]
        for _ in range(self.n_downsamplings):
            sizes.append(math.ceil(sizes[-1] / self.factor))
        return sizes

    @property
    def n_adain(self) -> int:
        return 4 * self.bottleneck_channels * self.decoder_res_blocks + 2 * self.decoder_channels[0]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "synth": ArchitectureConfig(),
    # 5023-vertex CoMA topology, 4 + 4 latent dimensions, 17 expression classes
    "coma": ArchitectureConfig(
        name="coma", n_vertices=5023, n_downsamplings=4, content_dim=4, style_dim=4,
        n_styles=17, content_channels=(32, 64, 64, 128), content_mlp=(128,),
        style_channels=(32, 64, 64, 128), style_mlp=(128,), decoder_mlp=(128,),
        bottleneck_channels=128, decoder_channels=(64, 64, 32, 32),
        mapping_hidden=(128, 128, 16), disc_channels=(32, 64, 64, 128)),
    # 26317-vertex FaceScape topology, 20 + 5 latent dimensions, 20 expressions
    "facescape": ArchitectureConfig(
        name="facescape", n_vertices=26317, n_downsamplings=5, content_dim=20, style_dim=5,
        n_styles=20, content_channels=(32, 64, 64, 128, 128), content_mlp=(256,),
        style_channels=(32, 64, 64, 128, 128), style_mlp=(256,), decoder_mlp=(256,),
        bottleneck_channels=128, decoder_channels=(128, 64, 64, 32, 32),
        mapping_hidden=(256, 256, 256, 256, 256, 256, 16),
        disc_channels=(32, 64, 64, 128, 128)),
}


def preset(name: str, **overrides) -> ArchitectureConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


def parameter_counts(cfg: ArchitectureConfig) -> dict[str, int]:
    """Closed-form parameter count of each network."""
    length = cfg.spiral_length
    sizes = cfg.level_sizes

    def conv(a, b):
        return length * a * b + b

    def lin(a, b):
        return a * b + b

    def mlp(dims):
        return sum(lin(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def down_stack(chans):
        total, prev = 0, 3
        for c in chans:
            total += conv(prev, c)
            prev = c
        return total

    last = cfg.content_channels[-1]
    content = down_stack(cfg.content_channels)
    content += cfg.content_res_blocks * 2 * conv(last, last)
    content += mlp((sizes[-1] * last,) + cfg.content_mlp + (cfg.content_dim,))

    style = down_stack(cfg.style_channels)
    style += mlp((cfg.style_channels[-1],) + cfg.style_mlp + (cfg.style_dim,))

    mapping = mlp((cfg.style_dim,) + cfg.mapping_hidden + (cfg.n_adain,))

    b = cfg.bottleneck_channels
    decoder = mlp((cfg.content_dim,) + cfg.decoder_mlp + (sizes[-1] * b,))
    decoder += cfg.decoder_res_blocks * 2 * conv(b, b)
    prev = b
    for c in cfg.decoder_channels:
        decoder += conv(prev, c)
        prev = c
    decoder += conv(prev, 3)

    disc = down_stack(cfg.disc_channels)
    disc += lin(sizes[-1] * cfg.disc_channels[-1], cfg.n_styles)
    return {"content_encoder": content, "style_encoder": style, "mapping": mapping,
            "decoder": decoder, "discriminator": disc}


def _check_topology(cfg: ArchitectureConfig, topology):
    if topology.level_sizes != cfg.level_sizes:
        raise TopologyError(f"topology levels {topology.level_sizes} do not match the "
                            f"architecture plan {cfg.level_sizes}")
    if topology.spiral_length != cfg.spiral_length:
        raise TopologyError("topology spiral length differs from the architecture")


def _down_blocks(channels, norm, topology, rng):
    blocks, prev = [], 3
    for level, c in enumerate(channels):
        blocks.append(SpiralBlock(BlockConfig(prev, c, level, norm=norm, resample="down"),
                                  topology, rng))
        prev = c
    return blocks


class ContentEncoder(Module):
    def __init__(self, cfg: ArchitectureConfig, topology, rng):
        self.blocks = _down_blocks(cfg.content_channels, "instance", topology, rng)
        last, bottom = cfg.content_channels[-1], cfg.n_downsamplings
        self.res_blocks = [SpiralResBlock(BlockConfig(last, last, bottom, norm="instance"),
                                          topology, rng)
                           for _ in range(cfg.content_res_blocks)]
        self.mlp = MLP((cfg.level_sizes[-1] * last,) + cfg.content_mlp + (cfg.content_dim,), rng)

    def forward(self, x):
        for blk in self.blocks + self.res_blocks:
            x = blk(x)
        return self.mlp(ad.flatten(x, start_axis=-2))


class StyleEncoder(Module):
    def __init__(self, cfg: ArchitectureConfig, topology, rng):
        self.blocks = _down_blocks(cfg.style_channels, "none", topology, rng)
        self.mlp = MLP((cfg.style_channels[-1],) + cfg.style_mlp + (cfg.style_dim,), rng)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.mlp(ad.mean(x, axis=-2))


class Decoder(Module):
    def __init__(self, cfg: ArchitectureConfig, topology, rng):
        self._cfg = cfg
        b, bottom = cfg.bottleneck_channels, cfg.n_downsamplings
        self.mlp = MLP((cfg.content_dim,) + cfg.decoder_mlp + (cfg.level_sizes[-1] * b,), rng)
        self.res_blocks = [SpiralResBlock(BlockConfig(b, b, bottom, norm="adain"), topology, rng)
                           for _ in range(cfg.decoder_res_blocks)]
        blocks, prev = [], b
        for i, c in enumerate(cfg.decoder_channels):
            level = bottom - 1 - i
            norm = "adain" if i == 0 else "none"
            blocks.append(SpiralBlock(BlockConfig(prev, c, level, norm=norm, resample="up"),
                                      topology, rng))
            prev = c
        self.blocks = blocks
        self.out = SpiralBlock(BlockConfig(prev, 3, 0, activation="none"), topology, rng)

    def split_style(self, params: Tensor):
        """Cut the mapping output into per-layer (mean, std) pairs; std = 1 + raw."""
        layers, k = [], 0

        def take(c):
            nonlocal k
            mu = params[..., k:k + c]
            sd = params[..., k + c:k + 2 * c] + 1.0
            k += 2 * c
            return mu, sd

        for blk in self.res_blocks:
            c = blk.config.n_out
            layers.append([take(c), take(c)])
        layers.append([take(self.blocks[0].config.n_out)])
        return layers

    def forward(self, content, adain_params):
        cfg = self._cfg
        h = self.mlp(content)
        h = ad.reshape(h, h.shape[:-1] + (cfg.level_sizes[-1], cfg.bottleneck_channels))
        styles = self.split_style(adain_params)
        for blk, st in zip(self.res_blocks, styles):
            h = blk(h, st)
        for i, blk in enumerate(self.blocks):
            h = blk(h, styles[-1] if i == 0 else None)
        return self.out(h)


class Generator(Module):
    """Encoders, mapping network and decoder.

    Inputs and outputs are vertex positions in millimetres, shape ``(B, V, 3)``.
    Internally positions are centred on ``offset`` and divided by ``scale``
    (both set from training data by :meth:`set_normalization`).
    """

    def __init__(self, cfg: ArchitectureConfig, topology, seed: int = 0):
        _check_topology(cfg, topology)
        self.config = cfg
        self._topology = topology
        rng = rng_for(seed, "init.generator")
        self.content_encoder = ContentEncoder(cfg, topology, rng)
        self.style_encoder = StyleEncoder(cfg, topology, rng)
        self.mapping = MLP((cfg.style_dim,) + cfg.mapping_hidden + (cfg.n_adain,), rng,
                           decay_bias=False)
        self.decoder = Decoder(cfg, topology, rng)
        self._offset = np.zeros((cfg.n_vertices, 3))
        self._scale = 1.0
        self.assign_names()

    @property
    def topology(self):
        return self._topology

    def set_normalization(self, offset, scale: float):
        self._offset = np.asarray(offset, dtype=np.float64).reshape(self.config.n_vertices, 3)
        self._scale = float(scale)

    @property
    def normalization(self):
        return self._offset, self._scale

    def _prep(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(self._topology.check_mesh_array(x), dtype=self.dtype)
        elif x.shape[-2:] != (self.config.n_vertices, 3):
            raise TopologyError(f"expected (..., {self.config.n_vertices}, 3), got {x.shape}")
        off = Tensor(self._offset, dtype=x.dtype)
        return (x - off) * (1.0 / self._scale)

    @property
    def dtype(self):
        return self.content_encoder.mlp.layers[0].weight.dtype

    def encode_content(self, x) -> Tensor:
        return self.content_encoder(self._prep(x))

    def encode_style(self, x) -> Tensor:
        return self.style_encoder(self._prep(x))

    def decode(self, content, style) -> Tensor:
        content, style = ad.as_tensor(content), ad.as_tensor(style)
        if content.shape[-1] != self.config.content_dim or style.shape[-1] != self.config.style_dim:
            raise ConfigError(f"latent sizes ({content.shape[-1]}, {style.shape[-1]}) do not match "
                              f"({self.config.content_dim}, {self.config.style_dim})")
        out = self.decoder(content, self.mapping(style))
        return out * self._scale + Tensor(self._offset, dtype=out.dtype)

    def reconstruct(self, x) -> Tensor:
        return self.decode(self.encode_content(x), self.encode_style(x))

    def translate(self, x, s) -> Tensor:
        return self.decode(self.encode_content(x), self.encode_style(s))


class Discriminator(Module):
    """Multi-task discriminator: one real-vs-translated logit per style class."""

    def __init__(self, cfg: ArchitectureConfig, topology, seed: int = 0):
        _check_topology(cfg, topology)
        self.config = cfg
        self._topology = topology
        rng = rng_for(seed, "init.discriminator")
        self.blocks = _down_blocks(cfg.disc_channels, "none", topology, rng)
        self.head = Linear(cfg.level_sizes[-1] * cfg.disc_channels[-1], cfg.n_styles, rng)
        self._offset = np.zeros((cfg.n_vertices, 3))
        self._scale = 1.0
        self.assign_names()

    def set_normalization(self, offset, scale: float):
        self._offset = np.asarray(offset, dtype=np.float64).reshape(self.config.n_vertices, 3)
        self._scale = float(scale)

    def normalize(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(self._topology.check_mesh_array(x), dtype=self.head.weight.dtype)
        return (x - Tensor(self._offset, dtype=x.dtype)) * (1.0 / self._scale)

    def features_normalized(self, h) -> Tensor:
        for blk in self.blocks:
            h = blk(h)
        return ad.flatten(h, start_axis=-2)

    def forward_normalized(self, h):
        feats = self.features_normalized(h)
        return self.head(feats), feats

    def forward(self, x):
        """Return ``(logits, features)`` for meshes in millimetres."""
        return self.forward_normalized(self.normalize(x))

    def features(self, x) -> Tensor:
        return self.features_normalized(self.normalize(x))


def discriminate(m, disc: Discriminator) -> np.ndarray:
    """Raw per-class logits for one mesh or a batch."""
    x = m.vertices if hasattr(m, "vertices") else np.asarray(m)
    with ad.no_grad():
        logits, _ = disc(x)
    return logits.data
