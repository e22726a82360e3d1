"""Conditional GAN training with an L1 reconstruction term.

Generator objective per step: ``gan_loss_generator + lambda_l1 * l1_term``.
The discriminator sees ``(source, candidate)`` pairs and is updated first on
real pairs and detached fakes; the generator is then updated against the
freshly stepped discriminator using the same fake batch.

All losses use mean reductions. Noise ``z`` is resampled every step from a
generator seeded by ``TrainConfig.seed``; batch order comes from a second
seeded generator, so identical configs give identical loss traces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import (
    Checkpoint,
    ConceptRecord,
    PairSet,
    checkpoint_from_models,
    delta_checkpoint,
    models_from_checkpoint,
)
from .errors import ConfigurationError, DatasetError, TrainingError
from .lora import RankSpec, inject_lora, lora_param_count, trainable_parameters
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    describe_layers,
)

__all__ = [
    "LossConfig",
    "TrainConfig",
    "StepReport",
    "TrainResult",
    "l1_term",
    "gan_loss_discriminator",
    "gan_loss_generator",
    "composite_objective",
    "training_step",
    "train_base",
    "finetune_concept",
    "finetune_full",
    "train_adapters",
    "freeze_groups_ablation",
    "pretrain_autoencoder",
    "evaluate_l1",
    "generate",
    "model_checksums",
    "freeze_owner",
    "discriminator_for",
    "iteration_count",
    "MODES",
    "FREEZABLE_GROUPS",
]

MODES = ("base", "finetune", "autoencoder")
FREEZABLE_GROUPS = ("SL", "RB", "TB")
# offsets that decorrelate the seeded streams derived from TrainConfig.seed
_Z_STREAM = 7919
_D_SEED = 1


@dataclass(frozen=True)
class LossConfig:
    lambda_l1: float = 100.0
    gan_mode: str = "bce_logits"

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ConfigurationError(f"lambda_l1 must be >= 0 (got {self.lambda_l1})")
        if self.gan_mode != "bce_logits":
            raise ConfigurationError(f"unsupported gan_mode {self.gan_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    adam_betas: tuple = (0.5, 0.999)
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    mode: str = "base"
    freeze_groups: tuple = ()
    disable_cross_attention: bool = False
    # None: match the generator's base_channels
    disc_base_channels: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "freeze_groups", tuple(sorted(set(self.freeze_groups))))
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0 (got {self.lr})")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0 (got {self.epochs})")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES} (got {self.mode!r})")
        bad = set(self.freeze_groups) - set(FREEZABLE_GROUPS)
        if bad:
            raise ConfigurationError(f"unknown freeze groups {sorted(bad)}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["freeze_groups"] = list(self.freeze_groups)
        return d


@dataclass
class StepReport:
    loss_d: float
    loss_g_gan: float
    loss_l1: float
    loss_g: float
    grad_norm_g: float
    grad_norm_d: float
    param_delta: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    iterations: int
    trainable_params: int
    model: Optional[torch.nn.Module] = None
    trainable_by_group: dict = field(default_factory=dict)


# --------------------------------------------------------------------------- losses


def l1_term(generated, target) -> torch.Tensor:
    """Mean absolute difference over every element."""
    if generated.shape != target.shape:
        raise ConfigurationError(f"l1_term shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    return (generated - target).abs().mean()


def gan_loss_discriminator(real_logits, fake_logits) -> torch.Tensor:
    """``-mean log sigmoid(real) - mean log(1 - sigmoid(fake))``."""
    if real_logits.shape != fake_logits.shape:
        raise ConfigurationError("real and fake logit grids differ in shape")
    # log(1 - sigmoid(t)) = logsigmoid(-t)
    return -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean()


def gan_loss_generator(fake_logits) -> torch.Tensor:
    """Non-saturating generator loss ``-mean log sigmoid(fake)``."""
    return -F.logsigmoid(fake_logits).mean()


def composite_objective(G, D, x, y, z, c, lambda_l1: float) -> torch.Tensor:
    """Literal minimax value ``lambda * L1 + E log D(x, y) + E log(1 - D(x, G(x, z, c)))``.

    The generator minimizes and the discriminator maximizes this scalar; it is
    the quantity used for gradient checking.
    """
    fake = G(x, z, c)
    return (
        lambda_l1 * l1_term(fake, y)
        + F.logsigmoid(D(x, y)).mean()
        + F.logsigmoid(-D(x, fake)).mean()
    )


# --------------------------------------------------------------------------- step


def _grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    return float(torch.sqrt(torch.stack(sq).sum())) if sq else 0.0


def _check_finite(values: dict, context: dict):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"non-finite loss {bad} at {context}", snapshot={**values, **context})


def training_step(G, D, batch: dict, z_sampler, loss_cfg: LossConfig, optimizers: dict,
                  context: Optional[dict] = None) -> StepReport:
    """One discriminator update then one generator update.

    ``batch`` holds ``x`` (source), ``y`` (target) and ``c`` (per-sample text
    embeddings). ``optimizers`` maps ``"G"``/``"D"`` to optimizers or None;
    a missing optimizer means that side is not updated. With ``D=None`` the
    step is L1-only (autoencoder pretraining).
    """
    context = context or {}
    x, y, c = batch["x"], batch["y"], batch.get("c")
    opt_g, opt_d = optimizers.get("G"), optimizers.get("D")
    g_params = [p for g in (opt_g.param_groups if opt_g else []) for p in g["params"]]
    before = [p.detach().clone() for p in g_params]
    z = z_sampler(x.shape[0])
    fake = G(x, z, c)

    loss_d_val, gn_d = 0.0, 0.0
    if D is not None:
        d_params = list(D.parameters())
        for p in d_params:
            p.requires_grad_(opt_d is not None)
        loss_d = gan_loss_discriminator(D(x, y), D(x, fake.detach()))
        loss_d_val = float(loss_d.detach())
        _check_finite({"loss_d": loss_d_val}, context)
        if opt_d is not None:
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            gn_d = _grad_norm(d_params)
            opt_d.step()
        for p in d_params:
            p.requires_grad_(False)
        loss_gan = gan_loss_generator(D(x, fake))
    else:
        loss_gan = fake.new_zeros(())
    loss_l1 = l1_term(fake, y)
    loss_g = loss_gan + loss_cfg.lambda_l1 * loss_l1
    vals = {"loss_g_gan": float(loss_gan.detach()), "loss_l1": float(loss_l1.detach()), "loss_g": float(loss_g.detach())}
    _check_finite(vals, context)
    gn_g = 0.0
    if opt_g is not None and fake.requires_grad:
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        gn_g = _grad_norm(g_params)
        opt_g.step()
    delta = max((float((p.detach() - b).abs().max()) for p, b in zip(g_params, before)), default=0.0)
    return StepReport(loss_d_val, vals["loss_g_gan"], vals["loss_l1"], vals["loss_g"], gn_g, gn_d, delta)


# --------------------------------------------------------------------------- data


def _stack(records: Sequence[ConceptRecord], ids: Optional[Sequence[str]] = None, split: str = "train"):
    xs, ys, cs, names = [], [], [], []
    keep = set(ids) if ids is not None else None
    for rec in records:
        ps: PairSet = getattr(rec, split)
        for k, pid in enumerate(ps.ids):
            if keep is not None and pid not in keep:
                continue
            xs.append(ps.source[k])
            ys.append(ps.edited[k])
            cs.append(rec.embedding)
            names.append(pid)
    if keep is not None and len(names) != len(keep):
        missing = sorted(keep - set(names))[:5]
        raise DatasetError(f"coreset ids not found in the data: {missing}")
    if not xs:
        raise DatasetError(f"no training pairs in the {split} split")
    as_t = lambda a: torch.from_numpy(np.ascontiguousarray(np.stack(a), dtype=np.float32))
    return {"x": as_t(xs), "y": as_t(ys), "c": as_t(cs)}, names


def iteration_count(n: int, epochs: int, batch_size: int) -> int:
    return epochs * math.ceil(n / batch_size)


# --------------------------------------------------------------------------- loop


def model_checksums(module: torch.nn.Module) -> dict:
    """sha256 of every tensor in ``module.state_dict()``."""
    return {
        k: hashlib.sha256(v.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
        for k, v in module.state_dict().items()
    }


def freeze_owner(gen) -> dict:
    """Map every generator parameter name to the group that freezes it.

    SL, RB and TB layers own themselves. The auxiliary layers follow the block
    they feed: the TB halving convs and the text projection go with TB, the
    noise projection (added before the first ResNet block) goes with RB.
    """
    owner = {}
    for d in describe_layers(gen):
        group = d.group
        if group == "other":
            group = "RB" if d.layer_id == "noise_proj" else "TB"
        for pname, _ in gen.get_submodule(d.layer_id).named_parameters():
            owner[f"{d.layer_id}.{pname}"] = group
    return owner


def _freeze(gen, groups) -> dict:
    owner = freeze_owner(gen)
    counts = {g: 0 for g in FREEZABLE_GROUPS}
    for name, p in gen.named_parameters():
        frozen = owner[name] in groups
        p.requires_grad_(not frozen)
        if not frozen:
            counts[owner[name]] += p.numel()
    return counts


def discriminator_for(gen_cfg: GeneratorConfig, cfg: TrainConfig, seed: int):
    base = cfg.disc_base_channels or gen_cfg.base_channels
    return build_discriminator(DiscriminatorConfig(gen_cfg.image_resolution, base), seed=seed)


def _fit(G, D, data: dict, cfg: TrainConfig, loss_cfg: LossConfig, log_path=None,
         autoencoder: bool = False) -> tuple:
    params = [p for _, p in trainable_parameters(G)]
    opt_g = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.adam_betas) if params else None
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr, betas=cfg.adam_betas) if D is not None else None
    order_rng = torch.Generator().manual_seed(cfg.seed)
    z_rng = torch.Generator().manual_seed(cfg.seed + _Z_STREAM)
    noise_dim = G.config.noise_dim

    def z_sampler(b):
        return torch.randn(b, noise_dim, generator=z_rng) if noise_dim > 0 else None

    n = data["x"].shape[0]
    history, iterations = [], 0
    log_fh = timing_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w")
        # wall time is kept apart so the metrics log stays reproducible
        timing_fh = open(log_path.with_name(log_path.stem + "_timing.jsonl"), "w")
    G.train()
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            perm = torch.randperm(n, generator=order_rng)
            sums = {}
            steps = 0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                batch = {k: v[idx] for k, v in data.items()}
                if autoencoder:
                    batch["y"] = batch["x"]
                rep = training_step(G, D, batch, z_sampler, loss_cfg, {"G": opt_g, "D": opt_d},
                                    context={"epoch": epoch, "step": steps})
                for k, v in rep.to_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
                steps += 1
            iterations += steps
            row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}, "iterations": iterations}
            del row["param_delta"]
            if autoencoder:
                row = {k: v for k, v in row.items() if k in ("epoch", "loss_l1", "grad_norm_g", "iterations")}
            history.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
                log_fh.flush()
                timing_fh.write(json.dumps({"epoch": epoch, "wall_time_s": time.perf_counter() - t0}) + "\n")
    finally:
        if log_fh:
            log_fh.close()
            timing_fh.close()
    G.eval()
    return history, iterations


# --------------------------------------------------------------------------- entry points


def train_base(concepts: Sequence[ConceptRecord], gen_cfg: GeneratorConfig, train_cfg: TrainConfig,
               loss_cfg: LossConfig = LossConfig(), log_path=None, coreset_ids=None) -> TrainResult:
    """Train G and D from scratch on the shuffled union of the concepts' train splits."""
    if not concepts:
        raise DatasetError("train_base needs at least one concept")
    data, _ = _stack(concepts, coreset_ids)
    G = build_generator(gen_cfg, seed=train_cfg.seed)
    if train_cfg.disable_cross_attention:
        G.cross_attention_enabled = False
    counts = _freeze(G, train_cfg.freeze_groups)
    D = discriminator_for(gen_cfg, train_cfg, train_cfg.seed + _D_SEED)
    history, iters = _fit(G, D, data, train_cfg, loss_cfg, log_path)
    meta = {"train_config": train_cfg.to_dict(), "concepts": [c.name for c in concepts]}
    ckpt = checkpoint_from_models(G, D, meta)
    return TrainResult(ckpt, history, iters, sum(counts.values()), G, counts)


def _base_generator(base: Checkpoint, cfg: TrainConfig):
    G, _ = models_from_checkpoint(base)
    if cfg.disable_cross_attention:
        G.cross_attention_enabled = False
    return G


def finetune_concept(base: Checkpoint, concept: ConceptRecord, spec: RankSpec, train_cfg: TrainConfig,
                     loss_cfg: LossConfig = LossConfig(), log_path=None, coreset_ids=None,
                     include_rb: bool = False) -> TrainResult:
    """LoRA-only adaptation with a freshly initialized discriminator; returns a concept delta."""
    G0 = _base_generator(base, train_cfg)
    G = inject_lora(G0, spec, seed=train_cfg.seed, include_rb=include_rb)
    D = discriminator_for(G.config, train_cfg, train_cfg.seed + _D_SEED)
    data, _ = _stack([concept], coreset_ids)
    history, iters = _fit(G, D, data, train_cfg, loss_cfg, log_path)
    layers = [d for d in describe_layers(G) if d.layer_id in spec.ranks]
    n_train = lora_param_count(spec, layers)
    delta = delta_checkpoint(G, base, prompt=concept.prompt, concept_name=concept.name,
                             metadata={"train_config": train_cfg.to_dict()})
    return TrainResult(delta, history, iters, n_train, G)


def train_adapters(G, D, concept: ConceptRecord, train_cfg: TrainConfig, epochs: int,
                   loss_cfg: LossConfig = LossConfig(), seed: Optional[int] = None) -> tuple:
    """Continue training an already adapted generator (and its discriminator) for ``epochs``.

    Fresh optimizers are built on every call, since adapter shapes may have
    changed since the last one. Returns ``(history, iterations)``.
    """
    cfg = train_cfg.replace(epochs=epochs, seed=train_cfg.seed if seed is None else seed)
    data, _ = _stack([concept])
    return _fit(G, D, data, cfg, loss_cfg)


def finetune_full(base: Checkpoint, concept: ConceptRecord, train_cfg: TrainConfig,
                  loss_cfg: LossConfig = LossConfig(), log_path=None, coreset_ids=None) -> TrainResult:
    """Update every generator weight not in ``train_cfg.freeze_groups``, with a fresh discriminator."""
    G = _base_generator(base, train_cfg)
    counts = _freeze(G, train_cfg.freeze_groups)
    D = discriminator_for(G.config, train_cfg, train_cfg.seed + _D_SEED)
    data, _ = _stack([concept], coreset_ids)
    history, iters = _fit(G, D, data, train_cfg, loss_cfg, log_path)
    meta = {"train_config": train_cfg.to_dict(), "concepts": [concept.name]}
    ckpt = checkpoint_from_models(G, D, meta)
    return TrainResult(ckpt, history, iters, sum(counts.values()), G, counts)


def freeze_groups_ablation(base: Checkpoint, concept: ConceptRecord, group, train_cfg: TrainConfig,
                           loss_cfg: LossConfig = LossConfig(), log_path=None) -> TrainResult:
    """Fine-tune everything except ``group`` (one tag or a collection of tags)."""
    groups = (group,) if isinstance(group, str) else tuple(group)
    return finetune_full(base, concept, train_cfg.replace(freeze_groups=groups), loss_cfg, log_path)


def pretrain_autoencoder(images, gen_cfg: GeneratorConfig, train_cfg: TrainConfig, log_path=None) -> TrainResult:
    """Train G to reproduce its input with the L1 term only; no discriminator is built or saved."""
    if train_cfg.mode != "autoencoder":
        raise ConfigurationError("pretrain_autoencoder requires mode='autoencoder'")
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(images), dtype=np.float32))
    if x.ndim != 4 or x.shape[0] < 1:
        raise DatasetError(f"expected a non-empty [N, 3, H, W] image array, got {tuple(x.shape)}")
    data = {"x": x, "y": x, "c": torch.zeros(x.shape[0], gen_cfg.text_embed_dim)}
    G = build_generator(gen_cfg, seed=train_cfg.seed)
    counts = _freeze(G, train_cfg.freeze_groups)
    history, iters = _fit(G, None, data, train_cfg, LossConfig(lambda_l1=1.0), log_path, autoencoder=True)
    ckpt = checkpoint_from_models(G, None, {"train_config": train_cfg.to_dict(), "pretrain": "autoencoder"})
    return TrainResult(ckpt, history, iters, sum(counts.values()), G, counts)


# --------------------------------------------------------------------------- evaluation


@torch.no_grad()
def generate(G, source, embedding, seed: int = 0, batch_size: int = 16) -> np.ndarray:
    """Generator outputs for ``source`` images with noise drawn from ``seed``."""
    G.eval()
    x = torch.from_numpy(np.ascontiguousarray(source, dtype=np.float32))
    c = torch.as_tensor(np.asarray(embedding, dtype=np.float32))
    rng = torch.Generator().manual_seed(seed)
    outs = []
    for s in range(0, x.shape[0], batch_size):
        xb = x[s:s + batch_size]
        z = torch.randn(xb.shape[0], G.config.noise_dim, generator=rng) if G.config.noise_dim > 0 else None
        outs.append(G(xb, z, c.expand(xb.shape[0], -1)))
    return torch.cat(outs).numpy()


def evaluate_l1(G, pairs: PairSet, embedding, seed: int = 0, per_image: bool = False):
    """Mean L1 between generated and target images on a split (optionally per image)."""
    out = generate(G, pairs.source, embedding, seed)
    per = np.abs(out.astype(np.float64) - pairs.edited).mean(axis=(1, 2, 3))
    return per if per_image else float(per.mean())
