"""Low-rank adapters on the crucial (sampling + transformer) layers.

A convolution with weight ``[h, w, kh, kw]`` (in, out, kernel) gets a delta
path made of a ``kh x kw`` convolution to ``r`` channels (factor ``A`` of shape
``[h, r, kh, kw]``) followed by a 1x1 convolution to ``w`` channels (factor
``B`` of shape ``[r, w, 1, 1]``). Transpose convolutions get the same pair with
the first step done as a transpose convolution. Linear layers ``[out, in]``
get ``A: [r, in]`` and ``B: [out, r]``. ``B`` starts at zero so an injected
model reproduces its base exactly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InjectionError
from .models import Generator, describe_layers

__all__ = [
    "RankSpec",
    "LoRAConv",
    "LoRALinear",
    "crucial_layers",
    "inject_lora",
    "merge_lora",
    "resize_lora",
    "lora_modules",
    "lora_state",
    "load_lora_state",
    "lora_param_count",
    "layer_lora_params",
    "trainable_parameters",
    "default_thresholds",
    "uniform_spec",
    "A_INIT_STD",
]

A_INIT_STD = 0.02

# thresholds for the four sampling depths (7x7 stem first); transformer layers get 1
SAMPLING_THRESHOLDS = (1, 4, 16, 32)


@dataclass
class RankSpec:
    ranks: dict
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.thresholds:
            self.thresholds = dict(self.ranks)
        self.ranks = {k: int(v) for k, v in self.ranks.items()}
        self.thresholds = {k: int(v) for k, v in self.thresholds.items()}
        if set(self.ranks) != set(self.thresholds):
            raise ConfigurationError(
                f"rank/threshold key mismatch: {sorted(set(self.ranks) ^ set(self.thresholds))}"
            )
        for k, r in self.ranks.items():
            t = self.thresholds[k]
            if t < 1 or not 1 <= r <= t:
                raise ConfigurationError(f"rank for {k} violates 1 <= r <= tau ({r}, {t})")

    def to_dict(self) -> dict:
        return {"ranks": dict(sorted(self.ranks.items())), "thresholds": dict(sorted(self.thresholds.items()))}

    @classmethod
    def from_dict(cls, data: dict) -> "RankSpec":
        extra = set(data) - {"ranks", "thresholds"}
        if extra:
            raise ConfigurationError(f"unknown rank spec keys: {sorted(extra)}")
        return cls(dict(data["ranks"]), dict(data.get("thresholds") or data["ranks"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RankSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --------------------------------------------------------------------------- modules


class LoRAConv(nn.Module):
    """Frozen Conv2d/ConvTranspose2d plus a trainable low-rank delta path."""

    def __init__(self, base: nn.Module, rank: int, generator=None):
        super().__init__()
        self.base = base
        self.transpose = isinstance(base, nn.ConvTranspose2d)
        h, w = base.in_channels, base.out_channels
        kh, kw = base.kernel_size
        dtype = base.weight.dtype
        self.A = nn.Parameter(torch.randn(h, rank, kh, kw, generator=generator, dtype=dtype) * A_INIT_STD)
        self.B = nn.Parameter(torch.zeros(rank, w, 1, 1, dtype=dtype))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def forward(self, x):
        b = self.base
        if self.transpose:
            # ConvTranspose2d weights are stored [in, out, kh, kw], the same layout as A
            h = F.conv_transpose2d(
                x, self.A, None, b.stride, b.padding, b.output_padding, b.groups, b.dilation
            )
        else:
            h = F.conv2d(x, self.A.transpose(0, 1), None, b.stride, b.padding, b.dilation, b.groups)
        return b(x) + F.conv2d(h, self.B.transpose(0, 1))

    def delta_weight(self) -> torch.Tensor:
        """Composed update in ``[in, out, kh, kw]`` layout."""
        return torch.einsum("jb,ajuv->abuv", self.B[:, :, 0, 0], self.A)

    def merged(self) -> nn.Module:
        layer = copy.deepcopy(self.base)
        with torch.no_grad():
            dw = self.delta_weight()
            layer.weight.add_(dw if self.transpose else dw.transpose(0, 1))
        return layer


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, generator=None):
        super().__init__()
        self.base = base
        dtype = base.weight.dtype
        self.A = nn.Parameter(
            torch.randn(rank, base.in_features, generator=generator, dtype=dtype) * A_INIT_STD
        )
        self.B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def forward(self, x):
        return self.base(x) + F.linear(F.linear(x, self.A), self.B)

    def delta_weight(self) -> torch.Tensor:
        return self.B @ self.A

    def merged(self) -> nn.Module:
        layer = copy.deepcopy(self.base)
        with torch.no_grad():
            layer.weight.add_(self.delta_weight())
        return layer


LORA_TYPES = (LoRAConv, LoRALinear)


# --------------------------------------------------------------------------- selection


def crucial_layers(gen: Generator, include_rb: bool = False) -> list:
    """Ids of the sampling-layer and transformer-block weights, in forward order.

    Normalization layers are never adapted. ``include_rb`` adds the ResNet
    block convolutions for ablations.
    """
    groups = {"SL", "TB"} | ({"RB"} if include_rb else set())
    return [d.layer_id for d in describe_layers(gen) if d.group in groups and d.kind != "norm"]


def default_thresholds(gen: Generator, sampling=SAMPLING_THRESHOLDS, transformer: int = 1) -> dict:
    """Per-layer rank caps: by depth for the sampling stacks (mirrored), fixed for TB layers."""
    out = {}
    n = len(gen.up)
    for lid in crucial_layers(gen):
        if lid.startswith("down."):
            out[lid] = sampling[int(lid.split(".")[1])]
        elif lid.startswith("up."):
            out[lid] = sampling[n - 1 - int(lid.split(".")[1])]
        else:
            out[lid] = transformer
    return out


def uniform_spec(gen: Generator, sampling_ranks, transformer_rank: int = 1, thresholds=None) -> RankSpec:
    """RankSpec with per-depth sampling ranks (mirrored on the up stack) and one TB rank."""
    thresholds = thresholds or default_thresholds(gen)
    n = len(gen.up)
    ranks = {}
    for lid in thresholds:
        if lid.startswith("down."):
            ranks[lid] = sampling_ranks[int(lid.split(".")[1])]
        elif lid.startswith("up."):
            ranks[lid] = sampling_ranks[n - 1 - int(lid.split(".")[1])]
        else:
            ranks[lid] = transformer_rank
    return RankSpec(ranks, dict(thresholds))


# --------------------------------------------------------------------------- injection


def _set_submodule(root: nn.Module, path: str, module: nn.Module):
    parent, _, name = path.rpartition(".")
    setattr(root.get_submodule(parent) if parent else root, name, module)


def lora_modules(model: nn.Module) -> dict:
    return {name: m for name, m in model.named_modules() if isinstance(m, LORA_TYPES)}


def inject_lora(gen: Generator, spec: RankSpec, seed: int = 0, include_rb: bool = False) -> Generator:
    """Return an adapted copy of ``gen``; the input generator is left untouched."""
    expected = set(crucial_layers(gen, include_rb=include_rb))
    given = set(spec.ranks)
    if given != expected:
        missing, extra = sorted(expected - given), sorted(given - expected)
        raise InjectionError(f"rank spec does not match crucial layers: missing={missing} extra={extra}")
    adapted = copy.deepcopy(gen)
    for p in adapted.parameters():
        p.requires_grad_(False)
    rng = torch.Generator().manual_seed(seed)
    for lid in crucial_layers(gen, include_rb=include_rb):
        base = adapted.get_submodule(lid)
        wrapper = LoRALinear if isinstance(base, nn.Linear) else LoRAConv
        _set_submodule(adapted, lid, wrapper(base, spec.ranks[lid], generator=rng))
    adapted.rank_spec = spec
    return adapted


def resize_lora(adapted: nn.Module, ranks: dict, seed: int = 0) -> None:
    """Grow adapter ranks in place, keeping existing factor slices.

    New rows of ``A`` are drawn fresh and new slices of ``B`` are zero, so the
    model function is unchanged by the resize.
    """
    rng = torch.Generator().manual_seed(seed)
    for lid, m in lora_modules(adapted).items():
        r_new = ranks[lid]
        r_old = m.rank
        if r_new < r_old:
            raise ConfigurationError(f"cannot shrink rank of {lid} from {r_old} to {r_new}")
        if r_new == r_old:
            continue
        extra = r_new - r_old
        with torch.no_grad():
            if isinstance(m, LoRAConv):
                h, _, kh, kw = m.A.shape
                a_new = torch.randn(h, extra, kh, kw, generator=rng, dtype=m.A.dtype) * A_INIT_STD
                b_new = torch.zeros(extra, m.B.shape[1], 1, 1, dtype=m.B.dtype)
                m.A = nn.Parameter(torch.cat([m.A, a_new], dim=1))
                m.B = nn.Parameter(torch.cat([m.B, b_new], dim=0))
            else:
                a_new = torch.randn(extra, m.A.shape[1], generator=rng, dtype=m.A.dtype) * A_INIT_STD
                b_new = torch.zeros(m.B.shape[0], extra, dtype=m.B.dtype)
                m.A = nn.Parameter(torch.cat([m.A, a_new], dim=0))
                m.B = nn.Parameter(torch.cat([m.B, b_new], dim=1))
    spec = getattr(adapted, "rank_spec", None)
    if spec is not None:
        adapted.rank_spec = RankSpec({k: ranks[k] for k in spec.ranks}, spec.thresholds)


def merge_lora(adapted: nn.Module) -> Generator:
    """Fold every adapter into its base weight and return a dense generator."""
    dense = copy.deepcopy(adapted)
    for lid, m in lora_modules(dense).items():
        _set_submodule(dense, lid, m.merged())
    if hasattr(dense, "rank_spec"):
        del dense.rank_spec
    for p in dense.parameters():
        p.requires_grad_(True)
    return dense


def lora_state(adapted: nn.Module) -> dict:
    """``{"<layer_id>.A": tensor, "<layer_id>.B": tensor}`` for every adapter."""
    out = {}
    for lid, m in lora_modules(adapted).items():
        out[f"{lid}.A"] = m.A.detach().clone()
        out[f"{lid}.B"] = m.B.detach().clone()
    return out


def load_lora_state(adapted: nn.Module, state: dict) -> None:
    mods = lora_modules(adapted)
    for lid, m in mods.items():
        for name in ("A", "B"):
            t = torch.as_tensor(state[f"{lid}.{name}"])
            cur = getattr(m, name)
            if tuple(t.shape) != tuple(cur.shape):
                raise InjectionError(f"{lid}.{name}: shape {tuple(t.shape)} != {tuple(cur.shape)}")
            with torch.no_grad():
                cur.copy_(t.to(cur.dtype))


def trainable_parameters(model: nn.Module) -> list:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


# --------------------------------------------------------------------------- accounting


def layer_lora_params(desc, rank: int) -> int:
    if desc.kind in ("conv", "transpose_conv"):
        kh, kw = desc.kernel
        return desc.in_channels * rank * kh * kw + rank * desc.out_channels
    if desc.kind in ("linear", "attention_proj"):
        return rank * desc.in_channels + desc.out_channels * rank
    raise ConfigurationError(f"no LoRA factorization for {desc.kind} layer {desc.layer_id}")


def lora_param_count(spec: RankSpec, layers) -> int:
    """Number of adapter parameters for ``spec`` over the given descriptors.

    Pure arithmetic; every descriptor passed in must have a rank in ``spec``.
    """
    total = 0
    for d in layers:
        if d.layer_id not in spec.ranks:
            raise ConfigurationError(f"rank spec does not cover layer {d.layer_id}")
        total += layer_lora_params(d, spec.ranks[d.layer_id])
    return total
