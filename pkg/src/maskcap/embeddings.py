"""Fixed word/entity embedding tables and the cosine primitives behind
ground-truth mask construction.

File format: plain UTF-8 text, one entry per line, `token v1 v2 ... vD`
with decimal floats and no header, so published vector files drop in
unchanged. Stores are immutable after load and safe to share across threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParseError


def normalize_label(label, lowercase=True, space_to_underscore=True):
    """Canonical lookup key for an entity label like "White Dog"."""
    key = label.lower() if lowercase else label
    if space_to_underscore:
        key = key.replace(" ", "_")
    return key


@dataclass
class EmbeddingStore:
    """Token -> fixed real vector, all sharing one dimensionality."""

    dim: int
    table: dict = field(default_factory=dict)

    def __contains__(self, token):
        return token in self.table

    def __len__(self):
        return len(self.table)

    def get(self, token):
        """Vector for ``token``, or None when absent (caller decides)."""
        return self.table.get(token)

    def put(self, token, vector):
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DomainError(f"vector for {token!r} has shape {vec.shape}, store dim is {self.dim}")
        self.table[token] = vec


def load_embeddings(path):
    """Parse a text vector file into an EmbeddingStore.

    Dimensionality is inferred from the first line; later lines must agree.
    Duplicate tokens keep the last occurrence and emit a warning.
    """
    store = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) < 2:
                raise ParseError(f"expected `token v1 ... vD`, got {line!r}", line=lineno)
            token = parts[0]
            if not token:
                raise ParseError("empty token", line=lineno)
            try:
                vec = np.array([float(p) for p in parts[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"bad float in vector: {exc}", line=lineno) from None
            if store is None:
                store = EmbeddingStore(dim=len(vec))
            elif len(vec) != store.dim:
                raise ParseError(
                    f"vector length {len(vec)} does not match store dim {store.dim}", line=lineno)
            if token in store.table:
                warnings.warn(f"duplicate token {token!r} at line {lineno}; last occurrence wins")
            store.table[token] = vec
    if store is None:
        raise ParseError(f"embedding file {path} is empty")
    return store


def save_embeddings(path, store):
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in store.table.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def cosine_distance(u, v):
    """1 - cos(u, v), in [0, 2]. Zero-norm vectors are a domain error."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DomainError(f"cosine_distance dims disagree: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine_distance undefined for a zero-norm vector")
    return 1.0 - float(np.dot(u, v) / (nu * nv))


def nearest_entity(query, entities):
    """(label, index, distance) of the closest entity by cosine distance.

    Ties break toward the lowest index so mask construction is deterministic.
    """
    if not entities:
        raise DomainError("nearest_entity needs a non-empty entity list")
    best = None
    for idx, (label, vec) in enumerate(entities):
        d = cosine_distance(query, vec)
        if best is None or d < best[2]:
            best = (label, idx, d)
    return best
