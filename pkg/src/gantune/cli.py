"""``gantune`` command line.

Every subcommand reads an optional JSON run config (``--config``), writes its
fully resolved config to ``resolved_config.json`` beside its outputs and
exits 0 on success, 1 on user errors (bad config, missing files, invalid
inputs) and 2 on internal errors.

Run config schema (all sections optional; unknown keys are rejected)::

    {
      "seed": 0,
      "generator": {"preset": "default" | "micro" | "toy", <GeneratorConfig overrides>},
      "train": {<TrainConfig fields>},
      "loss": {"lambda_l1": 100.0, "gan_mode": "bce_logits"},
      "search": {"epochs_per_round": 10, "sampling_thresholds": [1, 4, 16, 32],
                 "transformer_threshold": 1, "scorer": "l1" | "fid",
                 "probe_concepts": [<concept>], "stub_scores": null | [float, ...]},
      "selection": {"k": 400, "embedder": "toy_pixels" | "external",
                    "embedder_command": null | [str, ...], "normalize": false,
                    "max_iters": 100},
      "data": {"concepts": [<concept>], "resolution": null},
      "account": {"dataset_size": 800, "coreset_k": null}
    }

A ``<concept>`` is a manifest path or ``synth:<task>:<n>[:<seed>]`` for a
procedurally generated task at the generator's resolution.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import sys
import traceback
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DatasetError, GantuneError

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    "generator": {"preset": "default"},
    "train": {},
    "loss": {},
    "search": {
        "epochs_per_round": 10,
        "sampling_thresholds": [1, 4, 16, 32],
        "transformer_threshold": 1,
        "scorer": "l1",
        "probe_concepts": [],
        "stub_scores": None,
    },
    "selection": {
        "k": 400,
        "embedder": "toy_pixels",
        "embedder_command": None,
        "normalize": False,
        "max_iters": 100,
    },
    "data": {"concepts": [], "resolution": None},
    "account": {"dataset_size": 800, "coreset_k": None},
}


# --------------------------------------------------------------------------- config


@dataclasses.dataclass
class RunConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def generator(self):
        from .models import GeneratorConfig, micro_config, toy_config

        g = dict(self.raw["generator"])
        preset = g.pop("preset", "default")
        makers = {"default": GeneratorConfig, "micro": micro_config, "toy": toy_config}
        if preset not in makers:
            raise ConfigurationError(f"unknown generator preset {preset!r}; choose from {sorted(makers)}")
        try:
            return makers[preset](**g)
        except TypeError as exc:
            raise ConfigurationError(f"generator config: {exc}") from exc

    def train(self, **overrides):
        from .trainer import TrainConfig

        fields = {"seed": self.seed, **self.raw["train"], **overrides}
        try:
            return TrainConfig(**fields)
        except TypeError as exc:
            raise ConfigurationError(f"train config: {exc}") from exc

    def loss(self):
        from .trainer import LossConfig

        try:
            return LossConfig(**self.raw["loss"])
        except TypeError as exc:
            raise ConfigurationError(f"loss config: {exc}") from exc

    def section(self, name) -> dict:
        return self.raw[name]

    def resolved(self) -> dict:
        out = copy.deepcopy(self.raw)
        out["generator"] = {"preset": self.raw["generator"].get("preset", "default"), **self.generator().to_dict()}
        out["train"] = self.train().to_dict()
        out["loss"] = dataclasses.asdict(self.loss())
        return out


def _merge_section(name, default, given):
    if not isinstance(given, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    if name in ("generator", "train", "loss"):
        # field names are validated by the typed configs
        return {**default, **given}
    unknown = sorted(set(given) - set(default))
    if unknown:
        raise ConfigurationError(f"unknown keys in config section {name!r}: {unknown}")
    return {**default, **given}


def load_run_config(path: Optional[str]) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config file {p} must hold a JSON object")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"unknown top-level config keys: {unknown}")
    merged = {}
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            merged[key] = _merge_section(key, copy.deepcopy(default), raw.get(key, {}))
        else:
            merged[key] = raw.get(key, default)
    cfg = RunConfig(merged)
    # validate eagerly so bad configs fail before any work
    cfg.generator(), cfg.train(), cfg.loss()
    return cfg


def _write_resolved(cfg: RunConfig, directory: Path, extra: Optional[dict] = None):
    directory.mkdir(parents=True, exist_ok=True)
    data = cfg.resolved()
    if extra:
        data["invocation"] = extra
    (directory / "resolved_config.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- helpers


def _load_concept(spec: str, cfg: RunConfig):
    from .dataio import load_concept_dataset, synth_paired_task

    gen = cfg.generator()
    if spec.startswith("synth:"):
        parts = spec.split(":")
        if len(parts) not in (3, 4):
            raise ConfigurationError(f"synthetic concept must be synth:<task>:<n>[:<seed>], got {spec!r}")
        try:
            n = int(parts[2])
            seed = int(parts[3]) if len(parts) == 4 else 0
        except ValueError as exc:
            raise ConfigurationError(f"bad synthetic concept {spec!r}") from exc
        return synth_paired_task(parts[1], n, gen.image_resolution, seed=seed, text_embed_dim=gen.text_embed_dim)
    res = cfg.section("data")["resolution"] or gen.image_resolution
    rec = load_concept_dataset(spec, resolution=res, text_embed_dim=gen.text_embed_dim)
    if rec.embedding.shape != (gen.text_embed_dim,):
        raise DatasetError(f"{spec}: text embedding has {rec.embedding.shape[0]} dims, generator expects {gen.text_embed_dim}")
    return rec


def _embedder(cfg: RunConfig):
    from .selection import builtin_embedder

    sel = cfg.section("selection")
    return builtin_embedder(sel["embedder"], command=sel["embedder_command"])


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_model(model_path, base_path):
    """A generator from a base checkpoint, or from a delta applied on ``base_path``."""
    from .dataio import apply_delta, load_checkpoint, models_from_checkpoint

    ckpt = load_checkpoint(model_path)
    if ckpt.kind == "base_full":
        return models_from_checkpoint(ckpt)[0], ckpt
    if base_path is None:
        raise ConfigurationError("evaluating a concept delta needs --base")
    return apply_delta(load_checkpoint(base_path), ckpt), ckpt


# --------------------------------------------------------------------------- commands


def cmd_build_base(args, cfg: RunConfig) -> int:
    from .dataio import save_checkpoint
    from .trainer import train_base

    specs = args.concepts or cfg.section("data")["concepts"]
    if not specs:
        raise ConfigurationError("build-base needs at least one concept (--concepts or data.concepts)")
    out = Path(args.out)
    concepts = [_load_concept(s, cfg) for s in specs]
    _write_resolved(cfg, out, {"command": "build-base", "concepts": specs})
    res = train_base(concepts, cfg.generator(), cfg.train(mode="base"), cfg.loss(), log_path=out / "metrics.jsonl")
    save_checkpoint(res.checkpoint, out / "base.ckpt")
    summary = {
        "checkpoint": str(out / "base.ckpt"),
        "checkpoint_sha256": res.checkpoint.digest(),
        "iterations": res.iterations,
        "final_epoch": res.history[-1] if res.history else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _print_json(summary)
    return EXIT_OK


def cmd_select_data(args, cfg: RunConfig) -> int:
    from .selection import EmbeddingSet, select_coreset, write_coreset_manifest

    sel = cfg.section("selection")
    k = args.k if args.k is not None else sel["k"]
    if args.embeddings:
        path = Path(args.embeddings)
        if not path.exists():
            raise DatasetError(f"embedding file not found: {path}")
        emb = EmbeddingSet.load(path)
        source = str(path)
    else:
        spec = args.concept or (cfg.section("data")["concepts"] or [None])[0]
        if spec is None:
            raise ConfigurationError("select-data needs --concept, --embeddings or data.concepts")
        rec = _load_concept(spec, cfg)
        emb = EmbeddingSet(_embedder(cfg)(rec.train.source), rec.train.ids)
        source = spec
    ids = select_coreset(emb, k, seed=cfg.seed, max_iters=sel["max_iters"], normalize=sel["normalize"])
    manifest = Path(args.out_manifest)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    write_coreset_manifest(manifest, ids, k, cfg.seed, source)
    _write_resolved(cfg, manifest.parent, {"command": "select-data", "k": k, "source": source})
    _print_json({"manifest": str(manifest), "k": k, "n_items": len(emb), "ids": ids})
    return EXIT_OK


def cmd_search_rank(args, cfg: RunConfig) -> int:
    from .dataio import load_checkpoint, models_from_checkpoint
    from .lora import default_thresholds
    from .rank_search import SearchConfig, max_rounds, scripted_scorer, search_global_rank

    s = cfg.section("search")
    out = Path(args.out)
    base = load_checkpoint(args.base)
    G0 = models_from_checkpoint(base)[0]
    thresholds = default_thresholds(G0, tuple(s["sampling_thresholds"]), s["transformer_threshold"])
    specs = args.concepts or s["probe_concepts"] or cfg.section("data")["concepts"]
    stub = s["stub_scores"]
    if stub is not None:
        scorer, trainer = scripted_scorer(stub), (lambda *a: None)
        # the stub ignores data, so a tiny placeholder concept stands in when none is given
        specs = specs or ["synth:invert:10:0"]
    else:
        scorer, trainer = s["scorer"], None
        if not specs:
            raise ConfigurationError("search-rank needs probe concepts (--concepts or search.probe_concepts)")
    concepts = [_load_concept(c, cfg) for c in specs]
    _write_resolved(cfg, out, {"command": "search-rank", "base": str(args.base), "concepts": specs})
    trace_path = out / "trace.jsonl"
    if trace_path.exists():
        trace_path.unlink()
    search = SearchConfig(
        epochs_per_round=s["epochs_per_round"], thresholds=thresholds, probe_concepts=concepts,
        scorer=scorer, train_config=cfg.train(mode="finetune"), loss_config=cfg.loss(),
        round_trainer=trainer, seed=cfg.seed, trace_path=trace_path,
    )
    spec = search_global_rank(base, search)
    spec.save(out / "rank_spec.json")
    _print_json({"rank_spec": str(out / "rank_spec.json"), "ranks": spec.ranks,
                 "max_rounds": max_rounds(thresholds)})
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    from .dataio import load_checkpoint, save_checkpoint
    from .lora import RankSpec
    from .trainer import finetune_concept, model_checksums

    out = Path(args.out)
    base = load_checkpoint(args.base)
    spec = RankSpec.load(args.rank_spec)
    concept = _load_concept(args.concept, cfg)
    _write_resolved(cfg, out, {"command": "finetune", "base": str(args.base),
                               "rank_spec": str(args.rank_spec), "concept": args.concept})
    res = finetune_concept(base, concept, spec, cfg.train(mode="finetune"), cfg.loss(),
                           log_path=out / "metrics.jsonl")
    save_checkpoint(res.checkpoint, out / "delta.ckpt")
    total = sum(int(np.prod(v.shape)) for k, v in base.tensors.items() if k.startswith("generator/"))
    summary = {
        "delta": str(out / "delta.ckpt"),
        "delta_sha256": res.checkpoint.digest(),
        "trainable_params": res.trainable_params,
        "generator_params": total,
        "trainable_fraction": res.trainable_params / total,
        "iterations": res.iterations,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trainable fraction: {100 * summary['trainable_fraction']:.3f}% "
          f"({res.trainable_params} of {total} generator parameters)")
    _print_json(summary)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .metrics import fid_score
    from .trainer import generate

    out = Path(args.out)
    concept = _load_concept(args.concept, cfg)
    test = concept.test
    if args.model == "reference":
        generated, kind = test.edited.astype(np.float32), "reference"
    else:
        G, ckpt = _load_model(args.model, args.base)
        generated, kind = generate(G, test.source, concept.embedding, seed=cfg.seed), ckpt.kind
    _write_resolved(cfg, out, {"command": "eval", "model": str(args.model), "concept": args.concept})
    per = np.abs(generated.astype(np.float64) - test.edited).mean(axis=(1, 2, 3))
    report = {
        "concept": concept.name,
        "model": str(args.model),
        "model_kind": kind,
        "n_test": len(test),
        "l1_test": float(per.mean()),
        "fid_desk": None,
        "fid_note": "desk-scale Fréchet distance on the configured embedder; not comparable to Clean-FID",
    }
    if len(test) >= 2:
        report["fid_desk"] = float(fid_score(list(generated), list(test.edited), _embedder(cfg)))
    else:
        report["fid_note"] = "skipped: the Fréchet distance needs at least 2 test images"
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(out / "per_image_l1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "l1"])
        for pid, v in zip(test.ids, per):
            w.writerow([pid, f"{v:.8f}"])
    _plot_per_image(test.ids, per, out / "per_image_l1.png")
    _print_json(report)
    return EXIT_OK


def _plot_per_image(ids, values, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(ids)), 3))
    ax.bar(range(len(ids)), values)
    ax.set_xticks(range(len(ids)))
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.set_ylabel("L1")
    ax.set_title("per-image test L1")
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def cmd_account(args, cfg: RunConfig) -> int:
    from .lora import RankSpec
    from .metrics import REFERENCE_COSTS, count_params, training_cost_report
    from .models import build_generator, describe_layers

    gen_cfg = cfg.generator()
    acc = cfg.section("account")
    spec = RankSpec.load(args.rank_spec) if args.rank_spec else "full"
    report = training_cost_report(cfg.train(), gen_cfg, spec, acc["dataset_size"], acc["coreset_k"])
    payload = {"report": report.to_dict(),
               "groups": count_params(describe_layers(build_generator(gen_cfg)))}
    if args.compare:
        payload["reference"] = REFERENCE_COSTS
        ref = REFERENCE_COSTS["3RB+1TB"]
        payload["relative_to_reference"] = {
            "params": report.total_params / ref["params"] - 1.0,
            "flops": report.flops_per_image / ref["flops"] - 1.0,
        }
    if args.out:
        out = Path(args.out)
        _write_resolved(cfg, out, {"command": "account", "rank_spec": args.rank_spec})
        (out / "cost_report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _print_json(payload)
    return EXIT_OK


# --------------------------------------------------------------------------- entry


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gantune", description="Efficient adaptation of text-conditioned image-to-image GANs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run config")
        sp.set_defaults(func=fn)
        return sp

    sp = add("build-base", cmd_build_base, "train a base model on mixed concepts")
    sp.add_argument("--concepts", nargs="+", help="manifest paths or synth:<task>:<n>[:<seed>]")
    sp.add_argument("--out", required=True)

    sp = add("select-data", cmd_select_data, "k-means coreset of a concept's training split")
    sp.add_argument("--concept")
    sp.add_argument("--embeddings", help="npz with 'vectors' and 'ids' instead of a concept")
    sp.add_argument("--k", type=int)
    sp.add_argument("--out-manifest", required=True)

    sp = add("search-rank", cmd_search_rank, "LoRA rank search over probe concepts")
    sp.add_argument("--base", required=True)
    sp.add_argument("--concepts", nargs="+")
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "LoRA fine-tune one concept on a frozen base")
    sp.add_argument("--base", required=True)
    sp.add_argument("--rank-spec", required=True)
    sp.add_argument("--concept", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "test-split L1 and desk-scale Fréchet distance")
    sp.add_argument("--model", required=True, help="base or delta checkpoint, or 'reference'")
    sp.add_argument("--base", help="base checkpoint when --model is a delta")
    sp.add_argument("--concept", required=True)
    sp.add_argument("--out", required=True)

    sp = add("account", cmd_account, "parameter, FLOP and training-cost report")
    sp.add_argument("--rank-spec")
    sp.add_argument("--compare", action="store_true", help="print published reference costs alongside")
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        import torch

        torch.set_num_threads(1)
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except (GantuneError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
