"""Binary feature container, JSONL result files, and JSON model files.

Feature file layout (little-endian):
  magic "TAFS" | version u32=1 | n u32 | d u32 | K u32 | flags u32
  features f32[n*d] row-major
  labels  i32[n]          if flags bit0 (-1 = unknown)
  head    W f32[K*d], b f32[K]   if flags bit1
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    FeatureFileError,
    NonFiniteValue,
    TruncatedFile,
    ZeroNormVector,
)
from .mathcore import NORM_FLOOR
from .supportset import LinearHead
from .tastbn import ToyBNExtractor

MAGIC = b"TAFS"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")

FLAG_LABELS = 1
FLAG_HEAD = 2

# must not exceed the support set's unit-norm tolerance: rows that skip
# renormalization here feed the engine's unit-key check directly
NORMALIZED_TOL = 1e-6


@dataclass
class FeaturePayload:
    features: np.ndarray           # (n, d) float64, unit rows
    labels: np.ndarray | None      # (n,) int, -1 = unknown
    head: LinearHead | None
    normalized_on_load: bool = False


def write_features(path, features, labels=None, head: LinearHead | None = None) -> None:
    features = np.ascontiguousarray(np.asarray(features, dtype=np.float32))
    if features.ndim != 2:
        raise DimensionMismatch(f"features must be (n, d), got {features.shape}")
    n, d = features.shape
    bad = ~np.isfinite(features)
    if bad.any():
        idx = int(np.argmax(bad.ravel()))
        raise NonFiniteValue("non-finite feature", offset=HEADER.size + 4 * idx)
    flags = 0
    chunks = [features.tobytes()]
    if labels is not None:
        labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int32))
        if labels.shape != (n,):
            raise DimensionMismatch(f"labels {labels.shape} vs n={n}")
        flags |= FLAG_LABELS
        chunks.append(labels.tobytes())
    k = 0
    if head is not None:
        if head.dim != d:
            raise DimensionMismatch(f"head dim {head.dim} vs features dim {d}")
        k = head.n_classes
        flags |= FLAG_HEAD
        chunks.append(np.ascontiguousarray(head.W.astype(np.float32)).tobytes())
        chunks.append(np.ascontiguousarray(head.b.astype(np.float32)).tobytes())
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, d, k, flags))
        for c in chunks:
            fh.write(c)


def read_features(path) -> FeaturePayload:
    """Parse and validate a feature file; rows are L2-normalized on load when
    they are not already (recorded in ``normalized_on_load``)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise TruncatedFile("header incomplete", offset=len(blob))
    magic, version, n, d, k, flags = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r} != {MAGIC!r}", offset=0)
    if version != VERSION:
        raise BadMagic(f"unsupported version {version}", offset=4)
    expected = HEADER.size + 4 * n * d
    if flags & FLAG_LABELS:
        expected += 4 * n
    if flags & FLAG_HEAD:
        expected += 4 * (k * d + k)
    if len(blob) < expected:
        raise TruncatedFile(f"expected {expected} bytes, found {len(blob)}", offset=len(blob))
    if len(blob) > expected:
        raise FeatureFileError(f"{len(blob) - expected} trailing bytes", offset=expected)

    off = HEADER.size
    raw = np.frombuffer(blob, dtype="<f4", count=n * d, offset=off)
    bad = ~np.isfinite(raw)
    if bad.any():
        idx = int(np.argmax(bad))
        raise NonFiniteValue("non-finite feature", offset=off + 4 * idx)
    features = raw.reshape(n, d).astype(np.float64)
    off += 4 * n * d

    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(blob, dtype="<i4", count=n, offset=off).astype(int)
        off += 4 * n
    head = None
    if flags & FLAG_HEAD:
        W = np.frombuffer(blob, dtype="<f4", count=k * d, offset=off).reshape(k, d)
        off += 4 * k * d
        b = np.frombuffer(blob, dtype="<f4", count=k, offset=off)
        head = LinearHead(W.astype(np.float64), b.astype(np.float64))

    normalized = False
    if n:
        norms = np.linalg.norm(features, axis=1)
        if np.any(np.abs(norms - 1.0) > NORMALIZED_TOL):
            if np.any(norms < NORM_FLOOR):
                bad_row = int(np.argmax(norms < NORM_FLOOR))
                raise ZeroNormVector(f"feature row {bad_row} has near-zero norm")
            features = features / norms[:, None]
            normalized = True
    return FeaturePayload(features=features, labels=labels, head=head,
                          normalized_on_load=normalized)


def write_result_rows(path, rows, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_result_rows(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def save_model(path, model) -> None:
    """Heads and toy-BN models as JSON; float64 repr round-trips exactly."""
    if isinstance(model, LinearHead):
        doc = {"kind": "head", "w": model.W.tolist(), "b": model.b.tolist()}
    else:
        ext, head = model
        doc = {
            "kind": "bn",
            "w1": ext.W1.tolist(), "b1": ext.b1.tolist(),
            "gamma": ext.gamma.tolist(), "beta": ext.beta.tolist(),
            "w2": ext.W2.tolist(), "b2": ext.b2.tolist(),
            "head_w": head.W.tolist(), "head_b": head.b.tolist(),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path):
    """Returns ("head", LinearHead) or ("bn", (ToyBNExtractor, LinearHead))."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("kind")
    if kind == "head":
        return "head", LinearHead(np.array(doc["w"]), np.array(doc["b"]))
    if kind == "bn":
        ext = ToyBNExtractor(
            W1=np.array(doc["w1"]), b1=np.array(doc["b1"]),
            gamma=np.array(doc["gamma"]), beta=np.array(doc["beta"]),
            W2=np.array(doc["w2"]), b2=np.array(doc["b2"]),
        )
        head = LinearHead(np.array(doc["head_w"]), np.array(doc["head_b"]))
        return "bn", (ext, head)
    raise FeatureFileError(f"unknown model kind {kind!r}")
