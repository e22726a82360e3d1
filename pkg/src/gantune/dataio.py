"""Datasets, manifests, synthetic paired tasks and checkpoint persistence.

Checkpoint container (single file, little-endian)::

    magic       8 bytes   b"GANTUNE\\0"
    version     uint32    FORMAT_VERSION
    header_len  uint64
    header      JSON (utf-8, sorted keys): kind, metadata, tensors[]
                each tensor: name, dtype, shape, offset, nbytes, sha256
    blobs       raw tensor bytes, name-sorted, offsets relative to blob start
    digest      32 bytes  sha256 of every preceding byte

Concept manifest (JSON, paths relative to the manifest)::

    {"format_version": 1, "concept_name": str, "prompt_text": str,
     "split_seed": int, "pairs": [{"source": path, "edited": path}, ...],
     "text_embedding": [float, ...]   # optional
    }
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import CheckpointError, CompatibilityError, DatasetError, IntegrityError

__all__ = [
    "FORMAT_VERSION",
    "PairSet",
    "ConceptRecord",
    "Checkpoint",
    "encode_prompt",
    "split_indices",
    "synth_paired_task",
    "SYNTH_TASKS",
    "luminance",
    "load_concept_dataset",
    "write_concept_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_from_models",
    "models_from_checkpoint",
    "delta_checkpoint",
    "apply_delta",
    "tensor_checksum",
]

MAGIC = b"GANTUNE\0"
FORMAT_VERSION = 1
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
SYNTH_TASKS = ("invert", "hue_shift", "blur", "posterize")
HUE_SHIFT_DEGREES = 90.0
POSTERIZE_LEVELS = 4


# --------------------------------------------------------------------------- records


@dataclass
class PairSet:
    source: np.ndarray
    edited: np.ndarray
    ids: list

    def __len__(self):
        return len(self.ids)

    def subset(self, ids) -> "PairSet":
        pos = {i: k for k, i in enumerate(self.ids)}
        idx = [pos[i] for i in ids]
        return PairSet(self.source[idx], self.edited[idx], [self.ids[k] for k in idx])


@dataclass
class ConceptRecord:
    name: str
    prompt: str
    embedding: np.ndarray
    train: PairSet
    val: PairSet
    test: PairSet
    split_seed: int = 0

    @property
    def resolution(self) -> int:
        return int(self.train.source.shape[-1])

    def with_train(self, train: PairSet) -> "ConceptRecord":
        return ConceptRecord(self.name, self.prompt, self.embedding, train, self.val, self.test, self.split_seed)


def encode_prompt(text: str, dim: int) -> np.ndarray:
    """Deterministic stand-in text encoder: a standard-normal vector seeded by the prompt hash."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim).astype(np.float32)


def split_indices(n: int, seed: int) -> tuple:
    """80/10/10 split by seeded shuffle; val and test are floored, train takes the rest."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n))
    n_test = int(math.floor(SPLIT_FRACTIONS[2] * n))
    n_train = n - n_val - n_test
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train:n_train + n_val]),
        np.sort(perm[n_train + n_val:]),
    )


def _make_record(name, prompt, embedding, source, edited, ids, split_seed):
    tr, va, te = split_indices(len(ids), split_seed)

    def part(idx):
        return PairSet(source[idx], edited[idx], [ids[i] for i in idx])

    return ConceptRecord(name, prompt, embedding, part(tr), part(va), part(te), split_seed)


# --------------------------------------------------------------------------- synthetic tasks

_GRAY = np.ones(3) / math.sqrt(3.0)
_U1 = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
_U2 = np.cross(_GRAY, _U1)


def luminance(images) -> np.ndarray:
    """Per-image luminance: the mean over pixels of the channel average ``(R + G + B) / 3``."""
    x = np.asarray(images, dtype=np.float64)
    return x.mean(axis=(-3, -2, -1))


def _hue_matrix(degrees):
    # Rodrigues rotation about the gray axis
    t = math.radians(degrees)
    k = np.array([[0, -_GRAY[2], _GRAY[1]], [_GRAY[2], 0, -_GRAY[0]], [-_GRAY[1], _GRAY[0], 0]])
    return np.eye(3) + math.sin(t) * k + (1 - math.cos(t)) * (k @ k)


def _synth_source(rng, res):
    yy, xx = np.meshgrid(np.linspace(-1, 1, res), np.linspace(-1, 1, res), indexing="ij")
    angle = rng.uniform(0, 2 * np.pi)
    gray = 0.5 * (np.cos(angle) * xx + np.sin(angle) * yy) * rng.uniform(0.3, 1.0)
    chroma = np.zeros((2, res, res))
    chroma += rng.normal(0, 0.4, size=(2, 1, 1))
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(-0.8, 0.8, size=2)
        size = rng.uniform(0.15, 0.5)
        if rng.random() < 0.5:
            mask = (np.abs(xx - cx) < size) & (np.abs(yy - cy) < size * rng.uniform(0.5, 1.5))
        else:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < size ** 2
        gray = np.where(mask, rng.uniform(-0.7, 0.7), gray)
        chroma = np.where(mask[None], rng.normal(0, 0.6, size=(2, 1, 1)), chroma)
    # zero spatial mean per channel: instance-normalized generators cannot see it
    gray = gray - gray.mean()
    chroma = chroma - chroma.mean(axis=(1, 2), keepdims=True)
    # keep every hue rotation of each pixel inside the [-1, 1] cube
    gray = np.clip(gray, -0.95, 0.95)
    limit = (1.0 - np.abs(gray)) * math.sqrt(1.5) * 0.999
    norm = np.sqrt((chroma ** 2).sum(0))
    chroma = chroma * np.minimum(1.0, limit / np.maximum(norm, 1e-12))
    rgb = gray[None] * math.sqrt(3.0) * _GRAY[:, None, None] + chroma[0] * _U1[:, None, None] + chroma[1] * _U2[:, None, None]
    return rgb


def _blur(img):
    k = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    p = np.pad(img, ((0, 0), (2, 2), (2, 2)), mode="edge")
    h, w = img.shape[1:]
    rows = sum(k[i] * p[:, i:i + h, :] for i in range(5))
    return sum(k[j] * rows[:, :, j:j + w] for j in range(5))


def _edit(task, img):
    if task == "invert":
        return -img
    if task == "hue_shift":
        return np.einsum("ij,jhw->ihw", _hue_matrix(HUE_SHIFT_DEGREES), img)
    if task == "blur":
        return _blur(img)
    if task == "posterize":
        q = POSTERIZE_LEVELS - 1
        return np.round((img + 1.0) / 2.0 * q) / q * 2.0 - 1.0
    raise DatasetError(f"unknown synthetic task {task!r}; choose from {SYNTH_TASKS}")


def synth_paired_task(task: str, n: int, resolution: int, seed: int = 0,
                      text_embed_dim: int = 32, split_seed: Optional[int] = None) -> ConceptRecord:
    """Procedural paired dataset: seeded shapes on gradients and their edited versions."""
    if task not in SYNTH_TASKS:
        raise DatasetError(f"unknown synthetic task {task!r}; choose from {SYNTH_TASKS}")
    if n < 2:
        raise DatasetError(f"synthetic task needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    src = np.stack([_synth_source(rng, resolution) for _ in range(n)])
    edt = np.stack([_edit(task, s) for s in src])
    src = np.clip(src, -1.0, 1.0).astype(np.float32)
    edt = np.clip(edt, -1.0, 1.0).astype(np.float32)
    if task == "invert":
        edt = -src
    ids = [f"{task}/{i:05d}" for i in range(n)]
    return _make_record(task, task, encode_prompt(task, text_embed_dim), src, edt, ids,
                        seed if split_seed is None else split_seed)


# --------------------------------------------------------------------------- manifests

_MANIFEST_KEYS = {"format_version", "concept_name", "prompt_text", "split_seed", "pairs", "text_embedding"}


def _read_image(path: Path, resolution: Optional[int]):
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def load_concept_dataset(manifest_path, resolution: Optional[int] = None,
                         text_embed_dim: int = 32) -> ConceptRecord:
    """Load a manifest, decode and normalize its images to [-1, 1], and split deterministically."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        data = json.loads(manifest_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc
    if not isinstance(data, dict):
        raise DatasetError(f"malformed manifest {manifest_path}: top level must be an object")
    unknown = set(data) - _MANIFEST_KEYS
    missing = {"concept_name", "prompt_text", "pairs"} - set(data)
    if unknown or missing:
        raise DatasetError(
            f"malformed manifest {manifest_path}: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}"
        )
    pairs = data["pairs"]
    if len(pairs) < 1:
        raise DatasetError(f"manifest {manifest_path} lists no pairs")
    root = manifest_path.parent
    src, edt, ids = [], [], []
    for i, pair in enumerate(pairs):
        try:
            sp, ep = root / pair["source"], root / pair["edited"]
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed pair #{i} in {manifest_path}") from exc
        for p in (sp, ep):
            if not p.exists():
                raise DatasetError(f"missing image file: {p}")
        src.append(_read_image(sp, resolution))
        edt.append(_read_image(ep, resolution))
        ids.append(pair.get("id", pair["source"]))
    shapes = {a.shape for a in src + edt}
    if len(shapes) != 1:
        raise DatasetError(f"images in {manifest_path} have mixed sizes {sorted(shapes)}; pass a resolution")
    name = data["concept_name"]
    prompt = data["prompt_text"]
    emb = data.get("text_embedding")
    emb = np.asarray(emb, dtype=np.float32) if emb is not None else encode_prompt(prompt, text_embed_dim)
    return _make_record(name, prompt, emb, np.stack(src), np.stack(edt), ids, int(data.get("split_seed", 0)))


def _to_png(arr, path):
    from PIL import Image

    img = np.clip(np.round((np.asarray(arr).transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def write_concept_dataset(record: ConceptRecord, directory) -> Path:
    """Write a record's pairs as PNGs plus a manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "source").mkdir(parents=True, exist_ok=True)
    (directory / "edited").mkdir(parents=True, exist_ok=True)
    parts = [record.train, record.val, record.test]
    rows = sorted(
        (pid, ps.source[k], ps.edited[k]) for ps in parts for k, pid in enumerate(ps.ids)
    )
    pairs = []
    for i, (pid, s, e) in enumerate(rows):
        fname = f"{i:05d}.png"
        _to_png(s, directory / "source" / fname)
        _to_png(e, directory / "edited" / fname)
        pairs.append({"source": f"source/{fname}", "edited": f"edited/{fname}"})
    manifest = {
        "format_version": 1,
        "concept_name": record.name,
        "prompt_text": record.prompt,
        "split_seed": int(record.split_seed),
        "pairs": pairs,
        "text_embedding": [float(v) for v in record.embedding],
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


# --------------------------------------------------------------------------- checkpoints


def tensor_checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(_le_bytes(arr)).hexdigest()


def _le(arr):
    arr = np.asarray(arr)
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))


def _le_bytes(arr):
    return _le(arr).tobytes()


@dataclass
class Checkpoint:
    kind: str  # base_full | concept_delta
    tensors: dict
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in ("base_full", "concept_delta"):
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")
        self.tensors = {k: np.asarray(v) for k, v in self.tensors.items()}
        if self.kind == "concept_delta":
            bad = [k for k in self.tensors if not (k.startswith("lora/") and k[-2:] in (".A", ".B"))]
            if bad:
                raise CheckpointError(f"delta checkpoint may hold only LoRA factors, found {bad}")

    def checksums(self) -> dict:
        return {k: tensor_checksum(v) for k, v in sorted(self.tensors.items())}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, c in self.checksums().items():
            h.update(name.encode())
            h.update(c.encode())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = _le(self.tensors[name])
            raw = arr.tobytes()
            entries.append({
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            })
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"kind": self.kind, "metadata": self.metadata, "tensors": entries},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        body = MAGIC + struct.pack("<IQ", self.format_version, len(header)) + header + b"".join(blobs)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        if len(data) < len(MAGIC) + 12 + 32 or data[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", data[len(MAGIC): len(MAGIC) + 12])
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{source}: checkpoint format version {version} is not supported (expected "
                f"{FORMAT_VERSION}); re-save it with a matching gantune release to upgrade"
            )
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise IntegrityError(f"{source}: checksum mismatch, file is corrupt")
        start = len(MAGIC) + 12
        header = json.loads(body[start: start + hlen].decode("utf-8"))
        blob = body[start + hlen:]
        tensors = {}
        for e in header["tensors"]:
            raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
            if hashlib.sha256(raw).hexdigest() != e["sha256"]:
                raise IntegrityError(f"{source}: tensor {e['name']} failed its checksum")
            tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        return cls(header["kind"], tensors, header["metadata"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename) so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(ckpt.to_bytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes(), source=str(path))


def _state_arrays(module, prefix):
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def checkpoint_from_models(gen, disc=None, metadata: Optional[dict] = None) -> Checkpoint:
    """Full base checkpoint with generator (and optional discriminator) weights."""
    tensors = _state_arrays(gen, "generator")
    meta = {"generator_config": gen.config.to_dict()}
    if disc is not None:
        tensors.update(_state_arrays(disc, "discriminator"))
        meta["discriminator_config"] = disc.config.to_dict()
    meta.update(metadata or {})
    return Checkpoint("base_full", tensors, meta)


def _load_state(module, ckpt, prefix):
    state = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()
             if k.startswith(prefix + "/")}
    module.load_state_dict(state, strict=True)


def models_from_checkpoint(ckpt: Checkpoint):
    """Rebuild ``(generator, discriminator_or_None)`` from a base checkpoint."""
    from .models import DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator

    if ckpt.kind != "base_full":
        raise CheckpointError(f"expected a base_full checkpoint, got {ckpt.kind}")
    gen = build_generator(GeneratorConfig.from_dict(ckpt.metadata["generator_config"]))
    _load_state(gen, ckpt, "generator")
    disc = None
    if "discriminator_config" in ckpt.metadata:
        disc = build_discriminator(DiscriminatorConfig.from_dict(ckpt.metadata["discriminator_config"]))
        _load_state(disc, ckpt, "discriminator")
    return gen, disc


def _generator_digest(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name, c in ckpt.checksums().items():
        if name.startswith("generator/"):
            h.update(name.encode())
            h.update(c.encode())
    return h.hexdigest()


def delta_checkpoint(adapted, base: Optional[Checkpoint] = None, prompt: str = "",
                     concept_name: str = "", metadata: Optional[dict] = None) -> Checkpoint:
    """Concept delta: LoRA factors, the rank spec, the prompt and the base layer shapes."""
    from .lora import lora_modules, lora_state

    spec = adapted.rank_spec
    tensors = {f"lora/{k}": v.cpu().numpy() for k, v in lora_state(adapted).items()}
    shapes = {lid: list(m.base.weight.shape) for lid, m in lora_modules(adapted).items()}
    meta = {
        "rank_spec": spec.to_dict(),
        "prompt": prompt,
        "concept_name": concept_name,
        "generator_config": adapted.config.to_dict(),
        "base_layer_shapes": shapes,
    }
    if base is not None:
        meta["base_generator_sha256"] = _generator_digest(base)
    meta.update(metadata or {})
    return Checkpoint("concept_delta", tensors, meta)


def apply_delta(base: Checkpoint, delta: Checkpoint):
    """Rebuild the adapted generator encoded by ``delta`` on top of ``base``."""
    from .lora import RankSpec, inject_lora, load_lora_state

    if delta.kind != "concept_delta":
        raise CheckpointError(f"expected a concept_delta checkpoint, got {delta.kind}")
    gen, _ = models_from_checkpoint(base)
    if delta.metadata.get("generator_config") != base.metadata.get("generator_config"):
        raise CompatibilityError("delta was trained on a base with a different generator config")
    for lid, shape in delta.metadata.get("base_layer_shapes", {}).items():
        try:
            actual = list(gen.get_submodule(lid).weight.shape)
        except AttributeError as exc:
            raise CompatibilityError(f"base has no layer {lid}") from exc
        if actual != list(shape):
            raise CompatibilityError(f"layer {lid}: base shape {actual} != delta shape {shape}")
    spec = RankSpec.from_dict(delta.metadata["rank_spec"])
    include_rb = any(".conv" in k for k in spec.ranks)
    adapted = inject_lora(gen, spec, include_rb=include_rb)
    state = {k[len("lora/"):]: v for k, v in delta.tensors.items()}
    load_lora_state(adapted, state)
    return adapted
