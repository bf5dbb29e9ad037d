"""Spiral convolutions, (adaptive) instance normalisation and the blocks built on them."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Parameter
from ..autodiff.init import kaiming_normal
from ..exceptions import ConfigError, ShapeError

EPS = 1e-5


class Module:
    """Container that discovers parameters and sub-modules from its attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = ""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            extra = sorted(set(state) ^ set(own))
            raise ShapeError(f"state dict keys do not match the model: {extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    @contextlib.contextmanager
    def frozen(self):
        """Treat every parameter as a constant inside the block."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, decay_bias: bool = True):
        self.weight = Parameter(kaiming_normal((n_in, n_out), n_in, rng))
        self.bias = Parameter(np.zeros(n_out), decay=decay_bias)

    def forward(self, x):
        x = ad.as_tensor(x)
        if x.ndim == 1:
            return ad.reshape(ad.matmul(ad.reshape(x, (1, -1)), self.weight), (-1,)) + self.bias
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Fully connected stack; ReLU between layers, final layer linear unless
    ``final_activation='relu'``."""

    def __init__(self, sizes, rng, final_activation: str | None = None, decay_bias: bool = True):
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.layers = [Linear(a, b, rng, decay_bias) for a, b in zip(sizes[:-1], sizes[1:])]
        self.final_activation = final_activation

    def forward(self, x):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"MLP expects {self.sizes[0]} inputs, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation == "relu":
                x = ad.relu(x)
        return x


def spiral_conv(x, weight, bias, spirals):
    """Gather each vertex's spiral, flatten to ``L * C_in`` and apply ``weight``/``bias``."""
    x = ad.as_tensor(x)
    v, length = spirals.shape
    if x.shape[-2] != v:
        raise ShapeError(f"spiral_conv: features have {x.shape[-2]} rows, spiral table {v}")
    if weight.shape[0] != length * x.shape[-1]:
        raise ShapeError(f"spiral_conv: weight rows {weight.shape[0]} != L*C_in "
                         f"= {length}*{x.shape[-1]}")
    g = ad.gather_rows(x, spirals)
    g = ad.reshape(g, x.shape[:-2] + (v, length * x.shape[-1]))
    return ad.matmul(g, weight) + bias


class SpiralConv(Module):
    def __init__(self, n_in: int, n_out: int, spirals: np.ndarray, rng):
        self._spirals = np.asarray(spirals, dtype=np.int64)
        length = self._spirals.shape[1]
        self.weight = Parameter(kaiming_normal((length * n_in, n_out), length * n_in, rng))
        self.bias = Parameter(np.zeros(n_out))

    @property
    def spirals(self):
        return self._spirals

    def forward(self, x):
        return spiral_conv(x, self.weight, self.bias, self._spirals)


def instance_norm(x, eps: float = EPS):
    """Per-channel standardisation over the vertex axis (population variance)."""
    x = ad.as_tensor(x)
    if x.shape[-2] < 2:
        raise ShapeError("instance_norm needs at least two vertices")
    mu = ad.mean(x, axis=-2, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=-2, keepdims=True)
    return xc / ad.sqrt(var + eps)


def adain(x, style_mean, style_std, eps: float = EPS):
    """``style_std * instance_norm(x) + style_mean``.

    ``style_mean``/``style_std`` have shape ``(..., C)`` matching the leading
    and channel dimensions of ``x`` of shape ``(..., V, C)``.
    """
    x = ad.as_tensor(x)
    style_mean, style_std = ad.as_tensor(style_mean), ad.as_tensor(style_std)
    c = x.shape[-1]
    if style_mean.shape[-1] != c or style_std.shape[-1] != c:
        raise ShapeError(f"adain: style parameters must have {c} channels")
    lead = style_mean.shape[:-1]
    mu = ad.reshape(style_mean, lead + (1, c))
    sd = ad.reshape(style_std, lead + (1, c))
    return instance_norm(x, eps) * sd + mu


@dataclass
class BlockConfig:
    """One SpiralBlock / SpiralResBlock.

    ``level`` is the resolution at which the convolution runs. ``resample='up'``
    takes input from ``level + 1``; ``'down'`` emits output at ``level + 1``.
    """

    n_in: int
    n_out: int
    level: int
    norm: str = "none"  # none | instance | adain
    activation: str = "elu"  # elu | none
    resample: str = "none"  # none | down | up

    def __post_init__(self):
        if self.norm not in ("none", "instance", "adain"):
            raise ConfigError(f"unknown normalisation {self.norm!r}")
        if self.activation not in ("elu", "none"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.resample not in ("none", "down", "up"):
            raise ConfigError(f"unknown resample mode {self.resample!r}")

    @property
    def input_level(self) -> int:
        return self.level + 1 if self.resample == "up" else self.level

    @property
    def output_level(self) -> int:
        return self.level + 1 if self.resample == "down" else self.level


def _normalize(x, norm, style):
    if norm == "instance":
        return instance_norm(x)
    if norm == "adain":
        if style is None:
            raise ConfigError("adain block called without style parameters")
        return adain(x, style[0], style[1])
    return x


class SpiralBlock(Module):
    """Optional up-sampling, spiral convolution, normalisation, ELU, optional down-sampling."""

    def __init__(self, config: BlockConfig, topology, rng):
        self.config = config
        if config.resample == "down" and config.level + 1 >= topology.n_levels:
            raise ConfigError(f"block at level {config.level} cannot down-sample further")
        if config.resample == "up" and config.level + 1 >= topology.n_levels:
            raise ConfigError(f"block at level {config.level} has no coarser input level")
        self._topology = topology
        self.conv = SpiralConv(config.n_in, config.n_out, topology.spirals[config.level], rng)

    @property
    def n_style_params(self) -> int:
        return 2 * self.config.n_out if self.config.norm == "adain" else 0

    def forward(self, x, style=None):
        cfg = self.config
        if cfg.resample == "up":
            x = ad.sparse_matmul(self._topology.up[cfg.level], x)
        x = self.conv(x)
        x = _normalize(x, cfg.norm, style[0] if style else None)
        if cfg.activation == "elu":
            x = ad.elu(x)
        if cfg.resample == "down":
            x = ad.sparse_matmul(self._topology.down[cfg.level], x)
        return x


class SpiralResBlock(Module):
    """Two (conv, norm, ELU) stages added to a skip path.

    The skip path is the identity, or a learned per-vertex linear projection
    when the channel count changes.
    """

    def __init__(self, config: BlockConfig, topology, rng):
        if config.resample != "none":
            raise ConfigError("SpiralResBlock does not resample")
        self.config = config
        sp = topology.spirals[config.level]
        self.conv1 = SpiralConv(config.n_in, config.n_out, sp, rng)
        self.conv2 = SpiralConv(config.n_out, config.n_out, sp, rng)
        self.project = Linear(config.n_in, config.n_out, rng) if config.n_in != config.n_out else None

    @property
    def n_style_params(self) -> int:
        return 4 * self.config.n_out if self.config.norm == "adain" else 0

    def forward(self, x, style=None):
        cfg = self.config
        style = style or (None, None)
        h = ad.elu(_normalize(self.conv1(x), cfg.norm, style[0]))
        h = ad.elu(_normalize(self.conv2(h), cfg.norm, style[1]))
        skip = x if self.project is None else self.project(x)
        return h + skip
