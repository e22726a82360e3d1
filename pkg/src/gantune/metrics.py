"""Fréchet distance and parameter / FLOP / training-cost accounting.

FLOP convention: one multiply-add counts as 2 FLOPs. Convolutions cost
``2 * H_out * W_out * in * out * kh * kw``; transpose convolutions are
charged on their *input* grid (each input pixel scatters a ``kh x kw x out``
patch). Normalization, bias and activation costs are ignored.

Desk-scale FID values computed with the toy embedder are not comparable to
published Clean-FID numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import MetricError

__all__ = [
    "GaussianSummary",
    "CostReport",
    "frechet_distance",
    "fid_score",
    "count_params",
    "count_flops",
    "layer_flops",
    "training_cost_report",
    "REFERENCE_COSTS",
    "BACKWARD_FACTOR",
    "RANKSPEC_BYTES_PER_LAYER",
]

# Published reference numbers printed beside computed ones by ``gantune account --compare``.
REFERENCE_COSTS = {
    "3RB+1TB": {"params": 7.1e6, "flops": 23.6e9},
    "3RB+2TB": {"params": 10.1e6, "flops": 26.6e9},
    "pix2pix-9RB": {"params": 11.4e6, "flops": 56.9e9},
    "Co-Mod-GAN": {"params": 79.2e6, "flops": 98.2e9},
    "lora_trainable_params": 0.092e6,
    "lora_trainable_fraction": 0.0129,
    "TB_params": 1.58e6,
    "RB_params": 3.54e6,
    "SL_plus_TB_params": 3.42e6,
}

# backward pass estimated as twice the forward cost
BACKWARD_FACTOR = 2
# rank + threshold stored as int32 per adapted layer
RANKSPEC_BYTES_PER_LAYER = 8


@dataclass
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise MetricError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        if self.sample_count < 2:
            raise MetricError(f"need at least 2 samples, got {self.sample_count}")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8, rtol=0):
            raise MetricError("covariance is not symmetric")

    @classmethod
    def fit(cls, features) -> "GaussianSummary":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise MetricError(f"features must be [N, d], got shape {feats.shape}")
        if feats.shape[0] < 2:
            raise MetricError(f"need at least 2 samples, got {feats.shape[0]}")
        cov = np.cov(feats, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        return cls(feats.mean(axis=0), (cov + cov.T) / 2, feats.shape[0])


def _sym_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product square root is taken from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which has the same spectrum
    as ``S_a S_b``. Eigenvalues below zero are round-off and clamped to 0.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    root_a = _sym_sqrt(a.covariance)
    inner = root_a @ b.covariance @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_sqrt)
    if not math.isfinite(value):
        raise MetricError(
            f"non-finite Fréchet distance; cond(S_a)={np.linalg.cond(a.covariance):.3g} "
            f"cond(S_b)={np.linalg.cond(b.covariance):.3g} min eig={eig.min():.3g}"
        )
    # exact zero is attainable only up to round-off
    return max(value, 0.0)


def _embed(images, extractor):
    feats = [np.asarray(extractor(np.asarray(img)[None] if np.ndim(img) == 3 else np.asarray(img)))
             for img in images]
    return np.concatenate([f.reshape(-1, f.shape[-1]) for f in feats], axis=0)


def fid_score(generated, reference, extractor) -> float:
    """Fréchet distance between Gaussian fits of two embedded image sets."""
    if len(generated) < 2 or len(reference) < 2:
        raise MetricError(f"need >= 2 images per set, got {len(generated)} and {len(reference)}")
    g = GaussianSummary.fit(_embed(generated, extractor))
    r = GaussianSummary.fit(_embed(reference, extractor))
    return frechet_distance(g, r)


# --------------------------------------------------------------------------- accounting


def _layer_params(d) -> int:
    if d.kind in ("conv", "transpose_conv"):
        kh, kw = d.kernel
        return d.in_channels * d.out_channels * kh * kw + (d.out_channels if d.bias else 0)
    if d.kind in ("linear", "attention_proj"):
        return d.in_channels * d.out_channels + (d.out_channels if d.bias else 0)
    if d.kind == "norm":
        return 2 * d.in_channels
    raise MetricError(f"unknown layer kind {d.kind!r}")


def count_params(layers) -> dict:
    """Parameter counts per group (SL, RB, TB, other) plus ``total``."""
    out = {"SL": 0, "RB": 0, "TB": 0, "other": 0}
    for d in layers:
        out[d.group] = out.get(d.group, 0) + _layer_params(d)
    out["total"] = sum(v for k, v in out.items())
    return out


def layer_flops(d, side: int, key_extra: int = 0) -> tuple:
    """FLOPs of one layer on a square ``side x side`` input; returns ``(flops, output side)``.

    ``key_extra`` is the number of non-image key tokens seen by a query
    projection; the attention score and value matmuls are charged to the
    query descriptor.
    """
    if d.kind == "conv":
        kh, kw = d.kernel
        out_side = -(-side // d.stride)
        return 2 * out_side * out_side * d.in_channels * d.out_channels * kh * kw, out_side
    if d.kind == "transpose_conv":
        kh, kw = d.kernel
        return 2 * side * side * d.in_channels * d.out_channels * kh * kw, side * d.stride
    if d.kind in ("linear", "attention_proj"):
        if not d.spatial:
            return 2 * d.in_channels * d.out_channels, side
        n = side * side
        flops = 2 * (n + d.context_tokens) * d.in_channels * d.out_channels
        if d.kind == "attention_proj" and d.layer_id.endswith(".q"):
            flops += 2 * 2 * n * (n + key_extra) * d.out_channels
        return flops, side
    return 0, side


def _block_of(layer_id):
    for marker in (".attn.", ".ff.", ".norm"):
        if marker in layer_id:
            return layer_id.split(marker)[0]
    return None


def count_flops(layers, resolution: int) -> int:
    """Forward FLOPs for one image, propagating the grid side through strides.

    With the conv sandwich the halving is carried by the block's stride-2
    ``sample_down`` and transpose ``sample_up`` descriptors. The pooling
    sandwich has no parameters, so the grid is halved before the block's
    first descriptor and restored after its last one.
    """
    layers = list(layers)
    ids = {d.layer_id for d in layers}
    key_extra = {}
    last_of_block = {}
    for d in layers:
        blk = _block_of(d.layer_id)
        if blk is not None:
            last_of_block[blk] = d.layer_id
            if d.layer_id.endswith(".attn.k"):
                key_extra[blk] = d.context_tokens
    side = resolution
    total = 0
    open_pool = None
    for d in layers:
        blk = _block_of(d.layer_id)
        pooled = blk is not None and f"{blk}.sample_down" not in ids
        if pooled and open_pool != blk:
            side //= 2
            open_pool = blk
        f, side = layer_flops(d, side, key_extra.get(blk, 0))
        total += f
        if pooled and last_of_block[blk] == d.layer_id:
            side *= 2
            open_pool = None
    return int(total)


@dataclass
class CostReport:
    total_params: int
    trainable_params: int
    flops_per_image: int
    stored_bytes_per_concept: int
    train_flops_total: int
    iteration_count: int
    mode: str = "full"

    def __post_init__(self):
        if self.trainable_params > self.total_params:
            raise MetricError("trainable_params exceeds total_params")
        for k, v in asdict(self).items():
            if isinstance(v, int) and v < 0:
                raise MetricError(f"{k} must be non-negative")

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_fraction"] = self.trainable_fraction
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def training_cost_report(train_cfg, gen_cfg, spec_or_full, dataset_size: int,
                         coreset_k: Optional[int] = None) -> CostReport:
    """Estimate the cost of one training run.

    ``spec_or_full`` is a RankSpec for LoRA fine-tuning or ``"full"`` for
    updating every generator weight. Iterations are
    ``epochs * ceil(n / batch_size)`` with ``n`` the coreset size when
    ``coreset_k`` is set; each iteration is charged
    ``batch_size * (1 + BACKWARD_FACTOR) * forward FLOPs`` (generator only).
    """
    from .lora import lora_param_count
    from .models import build_generator, describe_layers

    gen = build_generator(gen_cfg, seed=0)
    layers = describe_layers(gen)
    total = count_params(layers)["total"]
    flops = count_flops(layers, gen_cfg.image_resolution)
    n = dataset_size if coreset_k is None else min(coreset_k, dataset_size)
    iterations = train_cfg.epochs * math.ceil(n / train_cfg.batch_size)
    train_flops = iterations * train_cfg.batch_size * (1 + BACKWARD_FACTOR) * flops
    if isinstance(spec_or_full, str):
        if spec_or_full != "full":
            raise MetricError(f"expected a RankSpec or 'full', got {spec_or_full!r}")
        trainable, stored, mode = total, 4 * total, "full"
    else:
        spec = spec_or_full
        trainable = lora_param_count(spec, [d for d in layers if d.layer_id in spec.ranks])
        stored = 4 * trainable + RANKSPEC_BYTES_PER_LAYER * len(spec.ranks)
        mode = "finetune"
    return CostReport(total, trainable, flops, stored, train_flops, iterations, mode)
