"""Toy walk-through: base model, coreset, rank search, LoRA fine-tune, delta round trip.

Runs in a few minutes on one CPU core:

    python demos/toy_end_to_end.py --out /tmp/gantune_demo
"""

import argparse
from pathlib import Path

import torch

from gantune.dataio import apply_delta, load_checkpoint, models_from_checkpoint, save_checkpoint, synth_paired_task
from gantune.lora import default_thresholds, lora_param_count
from gantune.models import describe_layers, micro_config
from gantune.rank_search import SearchConfig, search_global_rank
from gantune.selection import EmbeddingSet, ToyPixelEmbedder, select_coreset
from gantune.trainer import TrainConfig, evaluate_l1, finetune_concept, finetune_full, train_base


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()
    out = Path(args.out)
    torch.set_num_threads(1)

    cfg = micro_config(image_resolution=32)
    tc = TrainConfig(epochs=args.epochs)
    invert = synth_paired_task("invert", 64, 32, seed=0, text_embed_dim=cfg.text_embed_dim)
    hue = synth_paired_task("hue_shift", 64, 32, seed=1, text_embed_dim=cfg.text_embed_dim)

    # 1. base model on the first concept
    base = train_base([invert], cfg, tc, log_path=out / "base.jsonl")
    print(f"base: train L1 {base.history[0]['loss_l1']:.3f} -> {base.history[-1]['loss_l1']:.3f}")
    save_checkpoint(base.checkpoint, out / "base.ckpt")

    # 2. a coreset of half the target concept, picked by k-means on pixel statistics
    emb = EmbeddingSet(ToyPixelEmbedder()(hue.train.source), hue.train.ids)
    core = select_coreset(emb, len(emb) // 2)
    print(f"coreset: {len(core)} of {len(emb)} training pairs")

    # 3. rank search on the target concept
    G0 = models_from_checkpoint(base.checkpoint)[0]
    spec = search_global_rank(base.checkpoint, SearchConfig(
        epochs_per_round=5, thresholds=default_thresholds(G0, (1, 2, 2, 4)), probe_concepts=[hue],
        train_config=tc.replace(mode="finetune")))
    n = lora_param_count(spec, [d for d in describe_layers(G0) if d.layer_id in spec.ranks])
    total = sum(p.numel() for p in G0.parameters())
    print(f"searched ranks: {spec.ranks}")
    print(f"LoRA parameters: {n} ({n / total:.2%} of the generator)")

    # 4. LoRA fine-tune versus updating every weight
    ft = tc.replace(mode="finetune")
    lora = finetune_concept(base.checkpoint, hue, spec, ft, log_path=out / "lora.jsonl")
    full = finetune_full(base.checkpoint, hue, ft)
    lora_core = finetune_concept(base.checkpoint, hue, spec, ft, coreset_ids=core)
    for name, res in (("LoRA", lora), ("full", full), ("LoRA + coreset", lora_core)):
        print(f"{name:>15}: test L1 {evaluate_l1(res.model, hue.test, hue.embedding):.4f}, "
              f"{res.iterations} iterations")

    # 5. the delta is all that needs storing per concept
    path = save_checkpoint(lora.checkpoint, out / "hue_shift.delta")
    rebuilt = apply_delta(load_checkpoint(out / "base.ckpt"), load_checkpoint(path))
    same = evaluate_l1(rebuilt, hue.test, hue.embedding) == evaluate_l1(lora.model, hue.test, hue.embedding)
    print(f"delta file {path.stat().st_size:,} bytes, rebuilt model matches: {same}")


if __name__ == "__main__":
    main()
