"""Text-conditioned image-to-image generator and conditional patch discriminator.

The generator is a compact ResNet-style translator: a downsampling stack of
four convolutions, a bottleneck of ResNet blocks with one transformer block
inserted among them, and a mirrored stack of four transpose convolutions.
The transformer block works on a feature map halved by a strided convolution
(restored by a transpose convolution afterwards) and attends jointly over the
image tokens and a single projected text token.

Weight shapes in :class:`LayerDescriptor` follow the ``[in, out, kh, kw]``
convention for both convolution kinds and ``[out, in]`` for linear layers.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

__all__ = [
    "TB_POSITIONS",
    "GeneratorConfig",
    "DiscriminatorConfig",
    "LayerDescriptor",
    "Generator",
    "Discriminator",
    "build_generator",
    "build_discriminator",
    "generator_forward",
    "describe_layers",
    "sample_noise",
    "micro_config",
    "toy_config",
    "DISC_LOGIT_SHRINK",
]

TB_POSITIONS = {"before_rb1": 0, "after_rb1": 1, "after_rb2": 2, "after_rb3": 3}
TB_SANDWICHES = ("conv_transpose", "pool_unpool")

# Patch discriminator grid side is resolution // 8 - DISC_LOGIT_SHRINK (final 4x4 conv, padding 1).
DISC_LOGIT_SHRINK = 1


def _fail(msg):
    raise ConfigurationError(msg)


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture hyperparameters of the generator.

    Defaults reproduce the full-size 256x256 model (3 ResNet blocks, one
    transformer block after the second one).
    """

    base_channels: int = 64
    num_resnet_blocks: int = 3
    num_transformer_blocks: int = 1
    tb_position: str = "after_rb2"
    tb_sandwich: str = "conv_transpose"
    attention_dim: int = 256
    ffn_inner: int = 1024
    num_heads: int = 4
    text_embed_dim: int = 512
    noise_dim: int = 64
    use_cross_attention: bool = True
    image_resolution: int = 256

    def __post_init__(self):
        self.validate()

    @property
    def bottleneck_channels(self) -> int:
        return 4 * self.base_channels

    @property
    def tb_index(self) -> int:
        return TB_POSITIONS[self.tb_position]

    def validate(self):
        if self.base_channels < 1:
            _fail("base_channels must be >= 1")
        if self.num_resnet_blocks < 1:
            _fail(f"num_resnet_blocks >= 1 violated (got {self.num_resnet_blocks})")
        if self.num_transformer_blocks not in (0, 1, 2):
            _fail(f"num_transformer_blocks in {{0, 1, 2}} violated (got {self.num_transformer_blocks})")
        if self.tb_position not in TB_POSITIONS:
            _fail(f"tb_position must be one of {sorted(TB_POSITIONS)} (got {self.tb_position!r})")
        if self.tb_index > self.num_resnet_blocks:
            _fail(
                f"tb_position index <= num_resnet_blocks violated "
                f"({self.tb_position} needs {self.tb_index} blocks, have {self.num_resnet_blocks})"
            )
        if self.tb_sandwich not in TB_SANDWICHES:
            _fail(f"tb_sandwich must be one of {TB_SANDWICHES} (got {self.tb_sandwich!r})")
        if self.attention_dim != self.bottleneck_channels:
            _fail(
                f"attention_dim must equal the bottleneck channel count "
                f"4*base_channels={self.bottleneck_channels} (got {self.attention_dim})"
            )
        if self.num_heads < 1 or self.attention_dim % self.num_heads:
            _fail(f"attention_dim {self.attention_dim} not divisible by num_heads {self.num_heads}")
        if self.ffn_inner < 1:
            _fail("ffn_inner must be >= 1")
        if self.text_embed_dim < 1:
            _fail("text_embed_dim must be >= 1")
        if self.noise_dim < 0:
            _fail("noise_dim must be >= 0")
        if self.image_resolution < 16 or self.image_resolution % 16:
            # three stride-2 convolutions plus the halving sandwich
            _fail(f"image_resolution must be a positive multiple of 16 (got {self.image_resolution})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            _fail(f"unknown generator config keys: {unknown}")
        return cls(**data)

    def replace(self, **changes) -> "GeneratorConfig":
        return dataclasses.replace(self, **changes)


def micro_config(**overrides) -> GeneratorConfig:
    """Tiny generator used for gradient checks and fast tests."""
    params = dict(
        base_channels=8,
        attention_dim=32,
        ffn_inner=32,
        num_heads=2,
        text_embed_dim=8,
        noise_dim=4,
        image_resolution=16,
    )
    params.update(overrides)
    return GeneratorConfig(**params)


def toy_config(**overrides) -> GeneratorConfig:
    """Desk-scale generator for CPU training runs on 32x32 synthetic tasks."""
    params = dict(
        base_channels=16,
        attention_dim=64,
        ffn_inner=128,
        num_heads=4,
        text_embed_dim=32,
        noise_dim=8,
        image_resolution=32,
    )
    params.update(overrides)
    return GeneratorConfig(**params)


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_resolution: int = 256
    base_channels: int = 64
    image_channels: int = 3

    def __post_init__(self):
        if self.image_resolution % 8 or self.image_resolution < 16:
            _fail(f"discriminator image_resolution must be a multiple of 8 and >= 16 (got {self.image_resolution})")
        if self.base_channels < 1:
            _fail("discriminator base_channels must be >= 1")

    @property
    def logit_side(self) -> int:
        return self.image_resolution // 8 - DISC_LOGIT_SHRINK

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DiscriminatorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            _fail(f"unknown discriminator config keys: {unknown}")
        return cls(**data)


@dataclass(frozen=True)
class LayerDescriptor:
    layer_id: str
    kind: str  # conv | transpose_conv | linear | norm | attention_proj
    in_channels: int
    out_channels: int
    kernel: Optional[tuple] = None
    stride: int = 1
    group: str = "other"  # SL | RB | TB | other
    bias: bool = False
    # linear layers applied once per sample rather than per spatial position
    spatial: bool = True
    # extra key/value tokens an attention projection sees besides the image tokens
    context_tokens: int = 0

    @property
    def weight_shape(self) -> tuple:
        if self.kind in ("conv", "transpose_conv"):
            return (self.in_channels, self.out_channels) + tuple(self.kernel)
        if self.kind in ("linear", "attention_proj"):
            return (self.out_channels, self.in_channels)
        return (self.in_channels,)


# --------------------------------------------------------------------------- blocks


def _inorm(x):
    return F.instance_norm(x, eps=1e-5)


class ResnetBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x):
        h = F.relu(_inorm(self.conv1(x)))
        return x + _inorm(self.conv2(h))


class Attention(nn.Module):
    """Joint self/cross attention: keys and values span image tokens plus the text token."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)

    def forward(self, x, context=None):
        b, n, d = x.shape
        kv = x if context is None else torch.cat([x, context], dim=1)
        h = self.heads

        def split(t):
            return t.reshape(b, t.shape[1], h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(kv)), split(self.v(kv))
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        return (att @ v).transpose(1, 2).reshape(b, n, d)


class GatedFeedForward(nn.Module):
    def __init__(self, dim, inner):
        super().__init__()
        self.proj_in = nn.Linear(dim, 2 * inner)
        self.proj_out = nn.Linear(inner, dim)

    def forward(self, x):
        value, gate = self.proj_in(x).chunk(2, dim=-1)
        return self.proj_out(value * F.gelu(gate))


class TransformerBlock(nn.Module):
    def __init__(self, channels, heads, ffn_inner, sandwich="conv_transpose"):
        super().__init__()
        self.sandwich = sandwich
        if sandwich == "conv_transpose":
            self.sample_down = nn.Conv2d(channels, channels, 3, 2, 1)
            self.sample_up = nn.ConvTranspose2d(channels, channels, 3, 2, 1, output_padding=1)
        else:
            self.pool = nn.MaxPool2d(2, return_indices=True)
            self.unpool = nn.MaxUnpool2d(2)
        self.norm1 = nn.LayerNorm(channels)
        self.attn = Attention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.ff = GatedFeedForward(channels, ffn_inner)

    def forward(self, x, context=None):
        if self.sandwich == "conv_transpose":
            h = self.sample_down(x)
        else:
            h, indices = self.pool(x)
        b, c, hh, ww = h.shape
        t = h.flatten(2).transpose(1, 2)
        t = t + self.attn(self.norm1(t), context)
        t = t + self.ff(self.norm2(t))
        h = t.transpose(1, 2).reshape(b, c, hh, ww)
        if self.sandwich == "conv_transpose":
            h = self.sample_up(h)
        else:
            h = self.unpool(h, indices, output_size=x.shape[-2:])
        return x + h


# --------------------------------------------------------------------------- models


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        self.down = nn.ModuleList(
            [
                nn.Conv2d(3, b, 7, 1, 3),
                nn.Conv2d(b, 2 * b, 3, 2, 1),
                nn.Conv2d(2 * b, 4 * b, 3, 2, 1),
                nn.Conv2d(4 * b, 4 * b, 3, 2, 1),
            ]
        )
        c = config.bottleneck_channels
        self.noise_proj = nn.Linear(config.noise_dim, c) if config.noise_dim > 0 else None
        has_tb = config.num_transformer_blocks > 0
        self.text_proj = (
            nn.Linear(config.text_embed_dim, config.attention_dim)
            if has_tb and config.use_cross_attention
            else None
        )
        blocks = []
        for i in range(config.num_resnet_blocks + 1):
            if i == config.tb_index:
                for _ in range(config.num_transformer_blocks):
                    blocks.append(
                        TransformerBlock(c, config.num_heads, config.ffn_inner, config.tb_sandwich)
                    )
            if i < config.num_resnet_blocks:
                blocks.append(ResnetBlock(c))
        self.blocks = nn.ModuleList(blocks)
        self.up = nn.ModuleList(
            [
                nn.ConvTranspose2d(4 * b, 4 * b, 3, 2, 1, output_padding=1),
                nn.ConvTranspose2d(4 * b, 2 * b, 3, 2, 1, output_padding=1),
                nn.ConvTranspose2d(2 * b, b, 3, 2, 1, output_padding=1),
                nn.ConvTranspose2d(b, 3, 7, 1, 3),
            ]
        )
        # ablation switch: drop the text token at run time without touching weights
        self.cross_attention_enabled = config.use_cross_attention

    def forward(self, x, z=None, c=None):
        cfg = self.config
        h = x
        for conv in self.down:
            h = F.relu(_inorm(conv(h)))
        if self.noise_proj is not None:
            if z is None:
                raise ShapeError("noise vector z is required when noise_dim > 0")
            h = h + self.noise_proj(z)[:, :, None, None]
        context = None
        if self.text_proj is not None and self.cross_attention_enabled:
            if c is None:
                raise ShapeError("text embedding c is required when cross attention is enabled")
            context = self.text_proj(c)[:, None, :]
        for block in self.blocks:
            h = block(h, context) if isinstance(block, TransformerBlock) else block(h)
        for i, conv in enumerate(self.up):
            h = conv(h)
            h = torch.tanh(h) if i == len(self.up) - 1 else F.relu(_inorm(h))
        return h

    def layer_plan(self) -> Iterator[tuple]:
        """Yield ``(layer_id, group, spatial, context_tokens)`` in forward order."""
        for i in range(len(self.down)):
            yield f"down.{i}", "SL", True, 0
        if self.noise_proj is not None:
            yield "noise_proj", "other", False, 0
        if self.text_proj is not None:
            yield "text_proj", "other", False, 0
        ctx = 1 if self.text_proj is not None else 0
        for bi, block in enumerate(self.blocks):
            p = f"blocks.{bi}"
            if isinstance(block, ResnetBlock):
                yield f"{p}.conv1", "RB", True, 0
                yield f"{p}.conv2", "RB", True, 0
                continue
            if block.sandwich == "conv_transpose":
                yield f"{p}.sample_down", "other", True, 0
            yield f"{p}.norm1", "TB", True, 0
            yield f"{p}.attn.q", "TB", True, 0
            yield f"{p}.attn.k", "TB", True, ctx
            yield f"{p}.attn.v", "TB", True, ctx
            yield f"{p}.norm2", "TB", True, 0
            yield f"{p}.ff.proj_in", "TB", True, 0
            yield f"{p}.ff.proj_out", "TB", True, 0
            if block.sandwich == "conv_transpose":
                yield f"{p}.sample_up", "other", True, 0
        for i in range(len(self.up)):
            yield f"up.{i}", "SL", True, 0


class Discriminator(nn.Module):
    """Conditional patch discriminator over the channel concatenation of (source, candidate)."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        n = config.base_channels
        cin = 2 * config.image_channels
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(cin, n, 4, 2, 1),
                nn.Conv2d(n, 2 * n, 4, 2, 1),
                nn.Conv2d(2 * n, 4 * n, 4, 2, 1),
                nn.Conv2d(4 * n, 1, 4, 1, 1),
            ]
        )

    def forward(self, source, candidate):
        h = torch.cat([source, candidate], dim=1)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i == len(self.convs) - 1:
                break
            if i > 0:
                h = _inorm(h)
            h = F.leaky_relu(h, 0.2)
        return h

    def layer_plan(self):
        for i in range(len(self.convs)):
            yield f"convs.{i}", "other", True, 0


# --------------------------------------------------------------------------- builders


def _seeded_build(factory, seed):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_generator(config: GeneratorConfig, seed: int = 0) -> Generator:
    config.validate()
    return _seeded_build(lambda: Generator(config), seed)


def build_discriminator(config, seed: int = 0) -> Discriminator:
    """Build a patch discriminator; ``config`` may be a GeneratorConfig or DiscriminatorConfig."""
    if isinstance(config, GeneratorConfig):
        config = DiscriminatorConfig(image_resolution=config.image_resolution)
    if config.image_resolution % 8:
        _fail(f"image_resolution must be divisible by 8 (got {config.image_resolution})")
    return _seeded_build(lambda: Discriminator(config), seed)


def sample_noise(batch: int, noise_dim: int, generator: Optional[torch.Generator] = None, dtype=torch.float32):
    return torch.randn(batch, noise_dim, generator=generator, dtype=dtype)


def generator_forward(gen: Generator, x, z=None, c=None):
    """Shape-checked generator call.

    ``c`` may be a single embedding of length ``text_embed_dim``; it is then
    broadcast over the batch.
    """
    cfg = gen.config
    x = torch.as_tensor(x)
    r = cfg.image_resolution
    expected = ("B", 3, r, r)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != r or x.shape[3] != r:
        raise ShapeError(f"image batch: expected {expected}, got {tuple(x.shape)}")
    b = x.shape[0]
    if cfg.noise_dim > 0:
        if z is None:
            raise ShapeError(f"noise: expected ({b}, {cfg.noise_dim}), got None")
        z = torch.as_tensor(z, dtype=x.dtype)
        if tuple(z.shape) != (b, cfg.noise_dim):
            raise ShapeError(f"noise: expected ({b}, {cfg.noise_dim}), got {tuple(z.shape)}")
    if c is not None:
        c = torch.as_tensor(c, dtype=x.dtype)
        if c.ndim == 1:
            c = c.expand(b, -1)
        if tuple(c.shape) != (b, cfg.text_embed_dim):
            raise ShapeError(f"text embedding: expected ({b}, {cfg.text_embed_dim}), got {tuple(c.shape)}")
    elif gen.text_proj is not None and gen.cross_attention_enabled:
        raise ShapeError(f"text embedding: expected ({b}, {cfg.text_embed_dim}), got None")
    return gen(x, z, c)


def _unwrap(module):
    # LoRA wrappers expose the frozen layer as ``.base``
    return getattr(module, "base", module)


def _descriptor(layer_id, module, group, spatial, ctx) -> LayerDescriptor:
    module = _unwrap(module)
    has_bias = getattr(module, "bias", None) is not None
    if isinstance(module, nn.ConvTranspose2d):
        return LayerDescriptor(
            layer_id, "transpose_conv", module.in_channels, module.out_channels,
            tuple(module.kernel_size), module.stride[0], group, has_bias,
        )
    if isinstance(module, nn.Conv2d):
        return LayerDescriptor(
            layer_id, "conv", module.in_channels, module.out_channels,
            tuple(module.kernel_size), module.stride[0], group, has_bias,
        )
    if isinstance(module, nn.LayerNorm):
        n = module.normalized_shape[0]
        return LayerDescriptor(layer_id, "norm", n, n, None, 1, group, False)
    if isinstance(module, nn.Linear):
        kind = "attention_proj" if ".attn." in layer_id else "linear"
        return LayerDescriptor(
            layer_id, kind, module.in_features, module.out_features, None, 1, group, has_bias,
            spatial, ctx,
        )
    raise TypeError(f"cannot describe {type(module).__name__} at {layer_id}")


def describe_layers(model) -> list:
    """Ordered descriptors of every parameterized layer of a generator or discriminator."""
    out = []
    for layer_id, group, spatial, ctx in model.layer_plan():
        out.append(_descriptor(layer_id, model.get_submodule(layer_id), group, spatial, ctx))
    return out
