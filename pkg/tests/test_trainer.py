import json
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from _helpers import relative_errors
from gantune.dataio import apply_delta, models_from_checkpoint, synth_paired_task
from gantune.errors import ConfigurationError, DatasetError, TrainingError
from gantune.lora import lora_modules, uniform_spec
from gantune.models import build_generator, micro_config
from gantune.trainer import (
    LossConfig,
    TrainConfig,
    composite_objective,
    discriminator_for,
    evaluate_l1,
    finetune_concept,
    finetune_full,
    freeze_groups_ablation,
    freeze_owner,
    gan_loss_discriminator,
    gan_loss_generator,
    iteration_count,
    l1_term,
    model_checksums,
    pretrain_autoencoder,
    train_base,
    training_step,
)

# oracle run: micro config, 16 blur sources, lr 1e-3, batch 4 -> epoch 1 0.4739, epoch 50 0.1498
AE_EPOCH50_MAX = 0.2
AE_RATIO_MAX = 0.4


def _sigmoid(t):
    return 1.0 / (1.0 + math.exp(-t))


@pytest.fixture(scope="module")
def concept():
    return synth_paired_task("invert", 20, 16, seed=0, text_embed_dim=8)


@pytest.fixture(scope="module")
def base(concept):
    return train_base([concept], micro_config(), TrainConfig(epochs=1, seed=0)).checkpoint


def _batch(cfg, n=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    r = cfg.image_resolution
    return {
        "x": (torch.rand(n, 3, r, r, generator=g) * 2 - 1).to(dtype),
        "y": (torch.rand(n, 3, r, r, generator=g) * 2 - 1).to(dtype),
        "c": torch.randn(n, cfg.text_embed_dim, generator=g).to(dtype),
    }


def _zs(cfg, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return lambda b: torch.randn(b, cfg.noise_dim, generator=g).to(dtype)


# ----------------------------------------------------------------------------- losses


def test_l1_term_values():
    a = torch.zeros(2, 3, 4, 4)
    assert float(l1_term(a, a)) == 0.0
    assert float(l1_term(torch.ones_like(a), a)) == 1.0
    g = torch.Generator().manual_seed(0)
    x, y = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
    xs, ys = x.flatten().tolist(), y.flatten().tolist()
    oracle = sum(abs(p - q) for p, q in zip(xs, ys)) / len(xs)
    assert abs(float(l1_term(x, y)) - oracle) <= 1e-7
    with pytest.raises(ConfigurationError):
        l1_term(x, y[:1])


def test_discriminator_loss_values():
    z = torch.zeros(1, 1, 3, 3)
    assert abs(float(gan_loss_discriminator(z, z)) - 2 * math.log(2)) <= 1e-6
    big = torch.full((1, 1, 3, 3), 50.0)
    assert float(gan_loss_discriminator(big, -big)) < 1e-12
    g = torch.Generator().manual_seed(1)
    r, f = torch.randn(2, 1, 3, 3, generator=g), torch.randn(2, 1, 3, 3, generator=g)
    rs, fs = r.flatten().tolist(), f.flatten().tolist()
    oracle = -sum(math.log(_sigmoid(t)) for t in rs) / len(rs) - sum(math.log(1 - _sigmoid(t)) for t in fs) / len(fs)
    assert abs(float(gan_loss_discriminator(r, f)) - oracle) <= 1e-6


def test_generator_loss_values():
    assert abs(float(gan_loss_generator(torch.zeros(4))) - math.log(2)) <= 1e-6
    assert float(gan_loss_generator(torch.full((4,), 60.0))) < 1e-12
    f = torch.randn(10, generator=torch.Generator().manual_seed(2))
    oracle = -sum(math.log(_sigmoid(t)) for t in f.tolist()) / 10
    assert abs(float(gan_loss_generator(f)) - oracle) <= 1e-6


def test_loss_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(lambda_l1=-1)
    with pytest.raises(ConfigurationError):
        LossConfig(gan_mode="hinge")
    with pytest.raises(ConfigurationError):
        TrainConfig(mode="bogus")
    with pytest.raises(ConfigurationError):
        TrainConfig(freeze_groups=("XX",))
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)


# ----------------------------------------------------------------------------- step


def _models(cfg, seed=0):
    G = build_generator(cfg, seed=seed)
    D = discriminator_for(cfg, TrainConfig(), seed + 1)
    return G, D


def _opts(G, D, lr=1e-3):
    return {"G": torch.optim.Adam([p for p in G.parameters() if p.requires_grad], lr=lr),
            "D": torch.optim.Adam(D.parameters(), lr=lr)}


def test_step_loss_decomposition():
    cfg = micro_config()
    G, D = _models(cfg)
    rep = training_step(G, D, _batch(cfg), _zs(cfg), LossConfig(lambda_l1=7.0), _opts(G, D))
    recomputed = torch.tensor(rep.loss_g_gan) + 7.0 * torch.tensor(rep.loss_l1)
    assert abs(rep.loss_g - float(recomputed)) <= 1e-6 * rep.loss_g
    assert rep.grad_norm_g > 0 and rep.grad_norm_d > 0 and rep.param_delta > 0


def test_step_recomputes_losses_independently():
    cfg = micro_config()
    G, D = _models(cfg)
    batch = _batch(cfg)
    z = _zs(cfg)(2)
    with torch.no_grad():
        fake = G(batch["x"], z, batch["c"])
        expect_d = gan_loss_discriminator(D(batch["x"], batch["y"]), D(batch["x"], fake))
        expect_l1 = l1_term(fake, batch["y"])
    rep = training_step(G, D, batch, lambda b: z, LossConfig(), {"G": None, "D": None})
    assert abs(rep.loss_d - float(expect_d)) <= 1e-6
    assert abs(rep.loss_l1 - float(expect_l1)) <= 1e-7
    assert rep.param_delta == 0.0


def test_all_frozen_zero_delta():
    cfg = micro_config()
    G, D = _models(cfg)
    for p in G.parameters():
        p.requires_grad_(False)
    before = model_checksums(G)
    rep = training_step(G, D, _batch(cfg), _zs(cfg), LossConfig(), {"G": None, "D": torch.optim.Adam(D.parameters())})
    assert rep.param_delta == 0.0 and model_checksums(G) == before


def test_lambda_zero_gradient_ignores_target():
    cfg = micro_config()
    grads = []
    for target_seed in (1, 2):
        G, D = _models(cfg)
        batch = _batch(cfg)
        batch["y"] = _batch(cfg, seed=target_seed)["y"]
        opt_g = torch.optim.SGD(G.parameters(), lr=0.0)
        # D is not stepped, so D sees identical weights in both runs
        training_step(G, D, batch, _zs(cfg), LossConfig(lambda_l1=0.0), {"G": opt_g, "D": None})
        grads.append(torch.cat([p.grad.flatten() for p in G.parameters() if p.grad is not None]))
    assert torch.equal(grads[0], grads[1])


def test_only_trainable_change_and_d_frozen_during_g_update():
    cfg = micro_config()
    G, D = _models(cfg)
    owner = freeze_owner(G)
    for n, p in G.named_parameters():
        p.requires_grad_(owner[n] != "RB")
    before = model_checksums(G)
    training_step(G, D, _batch(cfg), _zs(cfg), LossConfig(), _opts(G, D))
    after = model_checksums(G)
    for n, p in G.named_parameters():
        if owner[n] == "RB":
            assert after[n] == before[n]
    assert any(after[n] != before[n] for n in after)


def test_non_finite_loss_aborts_with_snapshot():
    cfg = micro_config()
    G, D = _models(cfg)
    batch = _batch(cfg)
    batch["y"][0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingError) as info:
        training_step(G, D, batch, _zs(cfg), LossConfig(), _opts(G, D), context={"epoch": 3})
    assert info.value.snapshot["epoch"] == 3


def test_generator_loss_gradient_matches_fd_sampled():
    cfg = micro_config()
    G, D = _models(cfg)
    G, D = G.double(), D.double()
    b = _batch(cfg, n=1, dtype=torch.float64)
    z = _zs(cfg, dtype=torch.float64)(1)
    with torch.no_grad():
        b["y"] = G(b["x"], z, b["c"]) + 0.5 * torch.sign(torch.randn(1, 3, 16, 16, dtype=torch.float64,
                                                                     generator=torch.Generator().manual_seed(3)))

    def loss():
        fake = G(b["x"], z, b["c"])
        return gan_loss_generator(D(b["x"], fake)) + 100.0 * l1_term(fake, b["y"])

    loss().backward()
    rng = np.random.default_rng(0)
    params = dict(G.named_parameters())
    names = list(params)
    ana, num = [], []
    # h = 1e-5 lands across a ReLU kink for one sampled weight; 1e-6 keeps round-off below 1e-8
    h = 1e-6
    for _ in range(150):
        p = params[names[rng.integers(len(names))]]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss().item()
            p[idx] = orig - h
            down = loss().item()
            p[idx] = orig
        ana.append(p.grad[idx].item())
        num.append((up - down) / (2 * h))
    assert relative_errors(ana, num).max() <= 1e-4


def test_composite_objective_is_literal_minimax():
    cfg = micro_config()
    G, D = _models(cfg)
    b = _batch(cfg)
    z = _zs(cfg)(2)
    with torch.no_grad():
        val = composite_objective(G, D, b["x"], b["y"], z, b["c"], 10.0)
        fake = G(b["x"], z, b["c"])
        expect = (10.0 * l1_term(fake, b["y"]) + torch.log(torch.sigmoid(D(b["x"], b["y"]))).mean()
                  + torch.log(1 - torch.sigmoid(D(b["x"], fake))).mean())
    assert abs(float(val) - float(expect)) <= 1e-5


# ----------------------------------------------------------------------------- loops


def test_train_base_deterministic_and_logged(tmp_path, concept):
    cfg = TrainConfig(epochs=2, seed=4)
    a = train_base([concept], micro_config(), cfg, log_path=tmp_path / "a.jsonl")
    b = train_base([concept], micro_config(), cfg, log_path=tmp_path / "b.jsonl")
    assert a.checkpoint.checksums() == b.checkpoint.checksums()
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    rows = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2]
    assert {"loss_d", "loss_l1", "loss_g", "loss_g_gan"} <= set(rows[0])
    assert (tmp_path / "a_timing.jsonl").exists()
    assert any(k.startswith("discriminator/") for k in a.checkpoint.tensors)
    c = train_base([concept], micro_config(), cfg.replace(seed=5))
    assert c.checkpoint.checksums() != a.checkpoint.checksums()


def test_train_base_mixes_concepts_and_counts_iterations(concept):
    other = synth_paired_task("blur", 20, 16, seed=1, text_embed_dim=8)
    res = train_base([concept, other], micro_config(), TrainConfig(epochs=2, batch_size=4))
    n = len(concept.train) + len(other.train)
    assert res.iterations == iteration_count(n, 2, 4) == 2 * math.ceil(n / 4)
    assert res.history[-1]["iterations"] == res.iterations
    with pytest.raises(DatasetError):
        train_base([], micro_config(), TrainConfig(epochs=1))


def test_coreset_ids_shrink_iterations(concept):
    ids = concept.train.ids[:4]
    res = train_base([concept], micro_config(), TrainConfig(epochs=3, batch_size=2), coreset_ids=ids)
    assert res.iterations == 3 * 2
    with pytest.raises(DatasetError, match="not found"):
        train_base([concept], micro_config(), TrainConfig(epochs=1), coreset_ids=["nope"])


def test_finetune_zero_epochs_identity_delta(base, concept):
    G0, _ = models_from_checkpoint(base)
    spec = uniform_spec(G0, (1, 2, 2, 2))
    res = finetune_concept(base, concept, spec, TrainConfig(epochs=0, mode="finetune"))
    assert all(not np.any(v) for k, v in res.checkpoint.tensors.items() if k.endswith(".B"))
    adapted = apply_delta(base, res.checkpoint)
    assert evaluate_l1(adapted, concept.test, concept.embedding) == evaluate_l1(G0, concept.test, concept.embedding)


def test_finetune_trains_only_adapters(base, concept):
    before = base.checksums()
    G0, _ = models_from_checkpoint(base)
    spec = uniform_spec(G0, (1, 2, 2, 2))
    base_sums = model_checksums(G0)
    res = finetune_concept(base, concept, spec, TrainConfig(epochs=2, mode="finetune"))
    assert base.checksums() == before
    assert res.trainable_params == sum(m.A.numel() + m.B.numel() for m in lora_modules(res.model).values())
    adapted_base = {k.replace(".base.", "."): v for k, v in model_checksums(res.model).items()
                    if not (k.endswith(".A") or k.endswith(".B"))}
    assert adapted_base == base_sums
    assert any(np.any(v) for k, v in res.checkpoint.tensors.items() if k.endswith(".B"))
    assert res.checkpoint.metadata["prompt"] == concept.prompt


def test_full_finetune_changes_generator(base, concept):
    res = finetune_full(base, concept, TrainConfig(epochs=1, mode="finetune"))
    assert res.trainable_params == sum(p.numel() for p in res.model.parameters())
    changed = [k for k, v in res.checkpoint.checksums().items()
               if k.startswith("generator/") and v != base.checksums()[k]]
    assert changed


@pytest.mark.parametrize("group", ["SL", "RB", "TB"])
def test_freeze_group_leaves_group_untouched(base, concept, group):
    res = freeze_groups_ablation(base, concept, group, TrainConfig(epochs=1, mode="finetune"))
    owner = freeze_owner(res.model)
    old, new = base.checksums(), res.checkpoint.checksums()
    frozen = [n for n, g in owner.items() if g == group]
    assert all(old[f"generator/{n}"] == new[f"generator/{n}"] for n in frozen)
    assert res.trainable_by_group[group] == 0
    untouched = sum(p.numel() for n, p in res.model.named_parameters() if owner[n] == group)
    total = sum(p.numel() for p in res.model.parameters())
    assert res.trainable_params == total - untouched


def test_freeze_all_groups_no_generator_change(base, concept):
    res = freeze_groups_ablation(base, concept, ("SL", "RB", "TB"), TrainConfig(epochs=1, mode="finetune"))
    old, new = base.checksums(), res.checkpoint.checksums()
    assert all(old[k] == v for k, v in new.items() if k.startswith("generator/"))
    assert res.trainable_params == 0


def test_disable_cross_attention_flag(concept):
    res = train_base([concept], micro_config(), TrainConfig(epochs=1, disable_cross_attention=True))
    assert res.model.cross_attention_enabled is False


def test_autoencoder_pretraining():
    rec = synth_paired_task("blur", 32, 16, seed=0, text_embed_dim=8)
    imgs = np.concatenate([rec.train.source, rec.val.source, rec.test.source])[:16]
    res = pretrain_autoencoder(imgs, micro_config(), TrainConfig(mode="autoencoder", epochs=50, lr=1e-3))
    assert not any(k.startswith("discriminator/") for k in res.checkpoint.tensors)
    assert all(set(h) == {"epoch", "loss_l1", "grad_norm_g", "iterations"} for h in res.history)
    first, last = res.history[0]["loss_l1"], res.history[-1]["loss_l1"]
    assert last <= AE_EPOCH50_MAX and last <= AE_RATIO_MAX * first
    with pytest.raises(ConfigurationError):
        pretrain_autoencoder(imgs, micro_config(), TrainConfig(epochs=1))
    G, D = models_from_checkpoint(res.checkpoint)
    assert D is None


def test_evaluate_l1_per_image(concept):
    G = build_generator(micro_config())
    per = evaluate_l1(G, concept.test, concept.embedding, per_image=True)
    assert per.shape == (len(concept.test),)
    assert abs(per.mean() - evaluate_l1(G, concept.test, concept.embedding)) < 1e-12
