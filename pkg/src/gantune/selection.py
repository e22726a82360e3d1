"""K-means based data reduction and representative-concept selection.

Both selections follow one rule: cluster the embeddings, then keep the single
member nearest (Euclidean) to each centroid.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmbedderError, SelectionError

__all__ = [
    "EmbeddingSet",
    "ClusterModel",
    "kmeans",
    "select_coreset",
    "concept_embedding",
    "select_base_concepts",
    "ToyPixelEmbedder",
    "ExternalEmbedder",
    "builtin_embedder",
    "write_coreset_manifest",
    "read_coreset_manifest",
    "DEFAULT_CORESET_K",
]

DEFAULT_CORESET_K = 400


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    ids: list

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise SelectionError(f"embeddings must be a non-empty [N, d] array, got {self.vectors.shape}")
        self.ids = list(self.ids)
        if len(self.ids) != self.vectors.shape[0]:
            raise SelectionError(f"{len(self.ids)} ids for {self.vectors.shape[0]} vectors")
        if len(set(self.ids)) != len(self.ids):
            raise SelectionError("duplicate ids in embedding set")
        if not np.all(np.isfinite(self.vectors)):
            raise SelectionError("embedding vectors must be finite")

    def __len__(self):
        return len(self.ids)

    def normalized(self) -> "EmbeddingSet":
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        return EmbeddingSet(self.vectors / np.where(norms > 0, norms, 1.0), self.ids)

    def save(self, path):
        np.savez(path, vectors=self.vectors, ids=np.asarray(self.ids, dtype=str))

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        with np.load(path) as data:
            return cls(data["vectors"], [str(i) for i in data["ids"]])


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list = field(default_factory=list)
    iterations: int = 0


def _sq_dists(x, c):
    # exact enough for selection; clipped against tiny negative round-off
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _inertia(x, c, labels):
    diff = x - c[labels]
    return float((diff * diff).sum())


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centers
            remaining = np.setdiff1d(np.arange(n), centers)
            nxt = int(remaining[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[centers].copy()


def _update(x, labels, centroids):
    k = centroids.shape[0]
    new = centroids.copy()
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, x)
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if empty.size:
        # farthest-point reseeding, one distinct point per empty cluster
        d = _sq_dists(x, new)[np.arange(x.shape[0]), labels]
        order = np.argsort(-d, kind="stable")
        for slot, idx in zip(empty, order):
            new[slot] = x[idx]
    return new


def kmeans(emb, k: int, seed: int = 0, max_iters: int = 100) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeding.

    Stops at the first assignment fixpoint or after ``max_iters`` assignment
    steps. Empty clusters are reseeded to the points farthest from their
    current centroid. Distance ties go to the lowest cluster index.
    """
    x = emb.vectors if isinstance(emb, EmbeddingSet) else np.asarray(emb, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise SelectionError(f"need 1 <= K <= N, got K={k}, N={n}")
    if max_iters < 1:
        raise SelectionError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(axis=1)
        history.append(_inertia(x, centroids, new_labels))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = _update(x, labels, centroids)
    else:
        # max_iters reached: relabel against the last update
        d = _sq_dists(x, centroids)
        labels = d.argmin(axis=1)
        history.append(_inertia(x, centroids, labels))
    inertia = _inertia(x, centroids, labels)
    return ClusterModel(centroids, labels.astype(np.int64), inertia, history, it)


def _nearest_members(x, model):
    k = model.centroids.shape[0]
    d = np.sqrt(_sq_dists(x, model.centroids))
    picks = []
    taken = set()
    for j in range(k):
        members = np.flatnonzero(model.assignments == j)
        if members.size:
            # argmin returns the first minimum, i.e. lowest item index on ties
            idx = int(members[np.argmin(d[members, j])])
        else:
            free = [i for i in np.argsort(d[:, j], kind="stable") if int(i) not in taken]
            idx = int(free[0])
        picks.append(idx)
        taken.add(idx)
    return picks


def select_coreset(emb: EmbeddingSet, k: int, seed: int = 0, max_iters: int = 100,
                   normalize: bool = False) -> list:
    """Ids of the member nearest each of ``k`` K-means centroids (one per cluster)."""
    if normalize:
        emb = emb.normalized()
    model = kmeans(emb, k, seed=seed, max_iters=max_iters)
    return [emb.ids[i] for i in _nearest_members(emb.vectors, model)]


def concept_embedding(images, extractor, ids=None) -> np.ndarray:
    """Mean embedding over a non-empty list of images."""
    images = list(images)
    if not images:
        raise SelectionError("concept_embedding needs at least one image")
    ids = list(ids) if ids is not None else list(range(len(images)))
    vecs = []
    for img_id, img in zip(ids, images):
        arr = np.asarray(img, dtype=np.float32)
        try:
            v = np.asarray(extractor(arr[None] if arr.ndim == 3 else arr), dtype=np.float64)
        except EmbedderError as exc:
            raise EmbedderError(f"embedding failed for image {img_id}: {exc}") from exc
        except Exception as exc:
            raise EmbedderError(f"embedding failed for image {img_id}: {exc!r}") from exc
        vecs.append(v.reshape(-1, v.shape[-1]))
    return np.concatenate(vecs).mean(axis=0)


def select_base_concepts(concepts, k: int, extractor, seed: int = 0,
                         samples_per_concept: Optional[int] = None) -> list:
    """Names of ``k`` representative concepts, chosen by clustering mean concept embeddings.

    ``samples_per_concept`` takes that many evenly spaced source images from
    each concept's training split; by default all are used.
    """
    vecs, names = [], []
    for rec in concepts:
        src = rec.train.source
        if samples_per_concept is not None and samples_per_concept < len(src):
            idx = np.linspace(0, len(src) - 1, samples_per_concept).round().astype(int)
            src = src[idx]
        vecs.append(concept_embedding(src, extractor))
        names.append(rec.name)
    return select_coreset(EmbeddingSet(np.stack(vecs), names), k, seed=seed)


# --------------------------------------------------------------------------- embedders


class ToyPixelEmbedder:
    """51-dim pixel statistics: 3 channel means plus channel means on a 4x4 grid."""

    dim = 3 + 3 * 16

    def __call__(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        n, c, h, w = x.shape
        if c != 3 or h % 4 or w % 4:
            raise EmbedderError(f"toy embedder expects [N, 3, H, W] with H, W divisible by 4, got {x.shape}")
        global_means = x.mean(axis=(2, 3))
        cells = x.reshape(n, c, 4, h // 4, 4, w // 4).mean(axis=(3, 5)).reshape(n, c * 16)
        return np.concatenate([global_means, cells], axis=1)


def _content_hash(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    h = hashlib.sha256()
    h.update(json.dumps(list(arr.shape)).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class ExternalEmbedder:
    """Delegates to a user command ``<cmd...> <input.npy> <output.npy>`` with an on-disk cache.

    The command receives one image as a float32 ``[3, H, W]`` array and must
    write a 1-D float vector. Results are cached under ``cache_dir`` as
    ``<sha256 of image>.npy``; the cache defaults to ``$E2GAN_CACHE_DIR``.
    """

    def __init__(self, command: Sequence[str], cache_dir=None, timeout: float = 300.0):
        if not command:
            raise EmbedderError("external embedder needs a command")
        self.command = list(command)
        cache_dir = cache_dir or os.environ.get("E2GAN_CACHE_DIR") or Path.home() / ".cache" / "gantune"
        self.cache_dir = Path(cache_dir)
        self.timeout = timeout

    def _embed_one(self, img):
        key = _content_hash(img)
        cached = self.cache_dir / f"{key}.npy"
        if cached.exists():
            return np.load(cached)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp) / "image.npy", Path(tmp) / "embedding.npy"
            np.save(src, np.asarray(img, dtype=np.float32))
            try:
                proc = subprocess.run(
                    self.command + [str(src), str(dst)],
                    capture_output=True, text=True, timeout=self.timeout,
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise EmbedderError(f"external embedder unreachable: {exc}") from exc
            if proc.returncode != 0:
                raise EmbedderError(
                    f"external embedder exited with {proc.returncode}: {proc.stderr.strip()[:500]}"
                )
            if not dst.exists():
                raise EmbedderError("external embedder produced no output file")
            vec = np.asarray(np.load(dst), dtype=np.float64).reshape(-1)
        tmp_path = cached.with_suffix(".tmp.npy")
        np.save(tmp_path, vec)
        os.replace(tmp_path, cached)
        return vec

    def __call__(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        return np.stack([self._embed_one(img) for img in x])


def builtin_embedder(kind: str = "toy_pixels", command=None, cache_dir=None):
    if kind == "toy_pixels":
        return ToyPixelEmbedder()
    if kind == "external":
        return ExternalEmbedder(command or [], cache_dir=cache_dir)
    raise SelectionError(f"unknown embedder kind {kind!r}")


def write_coreset_manifest(path, ids, k: int, seed: int, source: str = ""):
    data = {"format_version": 1, "k": int(k), "seed": int(seed), "source": source, "ids": [str(i) for i in ids]}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def read_coreset_manifest(path) -> list:
    return json.loads(Path(path).read_text())["ids"]
