import json

import numpy as np
import pytest
import torch

from gantune.dataio import (
    MAGIC,
    Checkpoint,
    ConceptRecord,
    apply_delta,
    checkpoint_from_models,
    delta_checkpoint,
    encode_prompt,
    load_checkpoint,
    load_concept_dataset,
    luminance,
    models_from_checkpoint,
    save_checkpoint,
    split_indices,
    synth_paired_task,
    write_concept_dataset,
)
from gantune.errors import CheckpointError, CompatibilityError, DatasetError, IntegrityError
from gantune.lora import inject_lora, lora_modules, uniform_spec
from gantune.models import build_discriminator, build_generator, micro_config, DiscriminatorConfig


def _all(rec: ConceptRecord):
    return rec.train.ids + rec.val.ids + rec.test.ids


def test_split_sizes_and_disjoint():
    tr, va, te = split_indices(64, seed=0)
    assert (len(tr), len(va), len(te)) == (52, 6, 6)
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(64))
    tr2, _, _ = split_indices(64, seed=0)
    assert np.array_equal(tr, tr2)
    assert not np.array_equal(split_indices(64, seed=1)[0], tr)


def test_synth_tasks_deterministic_and_in_range():
    for task in ("invert", "hue_shift", "blur", "posterize"):
        a = synth_paired_task(task, 10, 16, seed=2)
        b = synth_paired_task(task, 10, 16, seed=2)
        assert np.array_equal(a.train.source, b.train.source) and np.array_equal(a.train.edited, b.train.edited)
        for arr in (a.train.source, a.train.edited):
            assert arr.dtype == np.float32 and arr.shape[1:] == (3, 16, 16)
            assert arr.min() >= -1 and arr.max() <= 1
        assert len(set(_all(a))) == 10


def test_invert_and_hue_shift_semantics():
    inv = synth_paired_task("invert", 8, 16)
    assert np.array_equal(inv.train.edited, -inv.train.source)
    hue = synth_paired_task("hue_shift", 8, 16)
    assert np.allclose(luminance(hue.train.edited), luminance(hue.train.source), atol=1e-5)
    assert np.abs(hue.train.edited - hue.train.source).mean() > 0.05


def test_posterize_levels():
    rec = synth_paired_task("posterize", 6, 16)
    levels = np.array([-1.0, -1 / 3, 1 / 3, 1.0])
    vals = np.unique(rec.train.edited)
    assert np.all(np.abs(vals[:, None] - levels[None]).min(1) < 1e-6)


def test_unknown_task_and_tiny_n():
    with pytest.raises(DatasetError, match="unknown"):
        synth_paired_task("sepia", 8, 16)
    with pytest.raises(DatasetError):
        synth_paired_task("invert", 1, 16)


def test_encode_prompt_deterministic():
    assert np.array_equal(encode_prompt("a", 8), encode_prompt("a", 8))
    assert not np.array_equal(encode_prompt("a", 8), encode_prompt("b", 8))


def test_manifest_round_trip(tmp_path):
    rec = synth_paired_task("blur", 12, 16, seed=3)
    path = write_concept_dataset(rec, tmp_path / "blur")
    back = load_concept_dataset(path)
    assert back.name == "blur" and back.prompt == rec.prompt
    assert np.allclose(back.embedding, rec.embedding)
    assert len(back.train) == len(rec.train) and len(back.test) == len(rec.test)
    # 8-bit quantization round trip
    assert np.abs(back.train.source.mean() - rec.train.source.mean()) < 0.01


def test_manifest_errors(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_concept_dataset(tmp_path / "none.json")
    rec = synth_paired_task("blur", 4, 16)
    path = write_concept_dataset(rec, tmp_path / "d")
    data = json.loads(path.read_text())
    bad = dict(data, extra_key=1)
    (tmp_path / "d" / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(DatasetError, match="extra_key"):
        load_concept_dataset(tmp_path / "d" / "bad.json")
    (tmp_path / "d" / "source" / "00001.png").unlink()
    with pytest.raises(DatasetError, match="00001.png"):
        load_concept_dataset(path)
    (tmp_path / "d" / "source" / "00001.png").write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="decode"):
        load_concept_dataset(path)
    (tmp_path / "d" / "garbage.json").write_text("{")
    with pytest.raises(DatasetError, match="malformed"):
        load_concept_dataset(tmp_path / "d" / "garbage.json")


def test_manifest_resize(tmp_path):
    path = write_concept_dataset(synth_paired_task("invert", 4, 32), tmp_path / "d")
    assert load_concept_dataset(path, resolution=16).resolution == 16


@pytest.fixture(scope="module")
def base_ckpt():
    cfg = micro_config()
    return checkpoint_from_models(build_generator(cfg, seed=1),
                                  build_discriminator(DiscriminatorConfig(16, 8), seed=2), {"note": "t"})


def test_checkpoint_round_trip_byte_identical(tmp_path, base_ckpt):
    p1 = save_checkpoint(base_ckpt, tmp_path / "a.ckpt")
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.checksums() == base_ckpt.checksums()
    assert loaded.metadata == base_ckpt.metadata
    assert p1.read_bytes()[:len(MAGIC)] == MAGIC


def test_models_rebuild_exactly(base_ckpt):
    G, D = models_from_checkpoint(base_ckpt)
    ref = build_generator(micro_config(), seed=1).state_dict()
    assert all(torch.equal(ref[k], v) for k, v in G.state_dict().items())
    assert D is not None


def test_corruption_detected(tmp_path, base_ckpt):
    p = save_checkpoint(base_ckpt, tmp_path / "a.ckpt")
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        load_checkpoint(p)
    p.write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_version_mismatch_mentions_upgrade(base_ckpt):
    raw = Checkpoint(base_ckpt.kind, base_ckpt.tensors, base_ckpt.metadata, format_version=99).to_bytes()
    with pytest.raises(CheckpointError, match="upgrade"):
        Checkpoint.from_bytes(raw)


def test_no_temp_files_left(tmp_path, base_ckpt):
    save_checkpoint(base_ckpt, tmp_path / "x.ckpt")
    assert [f.name for f in tmp_path.iterdir()] == ["x.ckpt"]


def _adapted(base_ckpt, seed=0, randomize=True):
    G, _ = models_from_checkpoint(base_ckpt)
    A = inject_lora(G, uniform_spec(G, (1, 2, 2, 2)), seed=seed)
    if randomize:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in lora_modules(A).values():
                m.B.copy_(torch.randn(m.B.shape, generator=g) * 0.02)
    return A


def test_delta_only_lora_tensors_and_apply(tmp_path, base_ckpt):
    A = _adapted(base_ckpt)
    delta = delta_checkpoint(A, base_ckpt, prompt="p", concept_name="c")
    assert all(k.startswith("lora/") for k in delta.tensors)
    back = load_checkpoint(save_checkpoint(delta, tmp_path / "d.ckpt"))
    rebuilt = apply_delta(base_ckpt, back)
    cfg = micro_config()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    z, c = torch.randn(2, cfg.noise_dim, generator=g), torch.randn(2, cfg.text_embed_dim, generator=g)
    assert torch.equal(rebuilt(x, z, c), A(x, z, c))
    assert back.metadata["prompt"] == "p"


def test_delta_rejects_non_lora_tensors():
    with pytest.raises(CheckpointError):
        Checkpoint("concept_delta", {"generator/x": np.zeros(2)})


def test_two_deltas_independent(base_ckpt):
    before = base_ckpt.checksums()
    a = apply_delta(base_ckpt, delta_checkpoint(_adapted(base_ckpt, 1), base_ckpt))
    b = apply_delta(base_ckpt, delta_checkpoint(_adapted(base_ckpt, 2), base_ckpt))
    assert not torch.equal(a.get_submodule("down.3").B, b.get_submodule("down.3").B)
    assert base_ckpt.checksums() == before


def test_zero_delta_is_identity(base_ckpt):
    G, _ = models_from_checkpoint(base_ckpt)
    rebuilt = apply_delta(base_ckpt, delta_checkpoint(_adapted(base_ckpt, randomize=False), base_ckpt))
    x = torch.zeros(1, 3, 16, 16)
    z, c = torch.ones(1, micro_config().noise_dim), torch.ones(1, micro_config().text_embed_dim)
    assert torch.equal(rebuilt(x, z, c), G(x, z, c))


def test_mismatched_base_rejected(base_ckpt):
    delta = delta_checkpoint(_adapted(base_ckpt), base_ckpt)
    other = checkpoint_from_models(build_generator(micro_config(base_channels=16, attention_dim=64)))
    with pytest.raises(CompatibilityError):
        apply_delta(other, delta)
    with pytest.raises(CheckpointError):
        apply_delta(base_ckpt, base_ckpt)


def test_delta_size_close_to_four_bytes_per_param(tmp_path, base_ckpt):
    A = _adapted(base_ckpt)
    n = sum(m.A.numel() + m.B.numel() for m in lora_modules(A).values())
    size = save_checkpoint(delta_checkpoint(A, base_ckpt, prompt="p"), tmp_path / "d.ckpt").stat().st_size
    assert 0 <= size - 4 * n < 10_000
