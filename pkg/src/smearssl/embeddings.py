"""Embedding extraction and the EMB1 on-disk format.

EMB1 layout: ASCII magic ``EMB1``, u32-LE row count, u32-LE dim, then the
row-major float32 matrix. Row metadata travels in a sidecar CSV
(``<path>.csv``) with columns row,id,source_id,label.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

from .data import ManifestRecord, load_images
from .errors import DimensionError, InputError
from .trainer import load_encoder

MAGIC = b"EMB1"


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # float32 [n, d]
    ids: list[str]
    sources: list[str]
    labels: list[str | None]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise DimensionError(f"embedding matrix must be 2-d, got {v.ndim}-d")
        n = v.shape[0]
        if not (len(self.ids) == len(self.sources) == len(self.labels) == n):
            raise DimensionError("metadata length does not match row count")
        if n and not np.isfinite(v).all():
            raise InputError("embedding matrix contains non-finite values")
        self.vectors = v

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def subset(self, indices) -> "EmbeddingSet":
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingSet(
            vectors=self.vectors[idx].copy(),
            ids=[self.ids[i] for i in idx],
            sources=[self.sources[i] for i in idx],
            labels=[self.labels[i] for i in idx],
        )

    def source_set(self) -> list[str]:
        return sorted(set(self.sources))


def sidecar_path(path: str) -> str:
    return path + ".csv"


def write_embeddings(path: str, emb: EmbeddingSet) -> None:
    n, d = emb.vectors.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes())
    with open(sidecar_path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "id", "source_id", "label"])
        for i in range(n):
            writer.writerow([i, emb.ids[i], emb.sources[i], emb.labels[i] or ""])


def read_embeddings(path: str) -> EmbeddingSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise InputError(f"{path}: not an embedding file (magic {raw[:4]!r})")
    n, d = struct.unpack_from("<II", raw, 4)
    need = 12 + 4 * n * d
    if len(raw) != need:
        raise InputError(f"{path}: expected {need} bytes for {n}x{d}, got {len(raw)}")
    vectors = np.frombuffer(raw, dtype="<f4", count=n * d, offset=12).reshape(n, d).copy()
    side = sidecar_path(path)
    if not os.path.exists(side):
        raise InputError(f"missing embedding sidecar: {side}")
    ids, sources, labels = [], [], []
    with open(side, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ids.append(row["id"])
            sources.append(row["source_id"])
            labels.append(row["label"] or None)
    if len(ids) != n:
        raise InputError(f"{side}: {len(ids)} metadata rows for {n} vectors")
    return EmbeddingSet(vectors=vectors, ids=ids, sources=sources, labels=labels)


def embed(checkpoint_path: str, records: list[ManifestRecord],
          batch_size: int = 64) -> EmbeddingSet:
    """One teacher-encoder CLS row per manifest record, in manifest order."""
    encoder = load_encoder(checkpoint_path)
    d = encoder.cfg.embed_dim
    if not records:
        return EmbeddingSet(np.zeros((0, d), dtype=np.float32), [], [], [])
    images = load_images(records)
    rows = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        batch = np.stack(chunk).astype(np.float32) / 255.0
        rows.append(encoder.forward(batch).data.astype(np.float32))
    vectors = np.concatenate(rows, axis=0)
    return EmbeddingSet(
        vectors=vectors,
        ids=[os.path.basename(r.path) for r in records],
        sources=[r.source_id for r in records],
        labels=[r.label for r in records],
    )
