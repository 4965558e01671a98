"""Frozen text-embedding tables, prompt strings and object-verb relatedness.

Embeddings are ingested from FHEB files rather than computed; the prompt
helpers only record which sentence each vector stands for.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Tensor
from .taxonomy import Taxonomy, TaxonomyError

FHEB_MAGIC = b"FHEB"
FHEB_VERSION = 1

_VOWELS = frozenset("aeiouAEIOU")


class TableFormatError(ValueError):
    """Bad magic, unsupported version or truncated payload."""


class DuplicateNameError(TableFormatError):
    pass


class ZeroVectorError(TableFormatError):
    pass


def prompt_object(name: str) -> str:
    if not name:
        raise ValueError("object name must be non-empty")
    article = "an" if name[0] in _VOWELS else "a"
    return f"A photo of {article} {name}"


def prompt_action(name: str) -> str:
    # stem used verbatim: "ride" -> "ride-ing"
    if not name:
        raise ValueError("action name must be non-empty")
    return f"A photo of a person {name}-ing"


@dataclass(eq=False)
class EmbeddingTable:
    """Named vectors stored at float32 precision.

    ``raw`` holds the float32 values exactly as they would be written to
    disk; ``vectors`` are those values normalised in float64, so saving and
    reloading reproduces the table bit for bit.
    """

    names: list[str]
    raw: np.ndarray

    def __post_init__(self) -> None:
        self.names = list(self.names)
        raw = np.asarray(self.raw, dtype=np.float32)
        if raw.ndim != 2 or raw.shape[0] != len(self.names):
            raise ValueError(f"expected {len(self.names)} x d array, got {raw.shape}")
        if raw.shape[1] < 2 or raw.shape[1] % 2:
            raise ValueError(f"embedding dim must be a positive even integer, got {raw.shape[1]}")
        if len(set(self.names)) != len(self.names):
            dup = next(n for n in self.names if self.names.count(n) > 1)
            raise DuplicateNameError(f"duplicate name {dup!r}")
        if not np.isfinite(raw).all():
            raise ValueError("embedding contains non-finite values")
        norms = np.linalg.norm(raw.astype(np.float64), axis=1)
        if np.any(norms == 0):
            raise ZeroVectorError(f"zero vector for {self.names[int(np.argmin(norms))]!r}")
        self.raw = raw
        self.vectors = raw.astype(np.float64) / norms[:, None]
        self.vectors.setflags(write=False)
        self.raw.setflags(write=False)

    @classmethod
    def from_vectors(cls, names, vectors) -> "EmbeddingTable":
        return cls(names, np.asarray(vectors, dtype=np.float64).astype(np.float32))

    @property
    def dim(self) -> int:
        return self.raw.shape[1]

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return self.names == other.names and np.array_equal(
            self.raw.view(np.uint32), other.raw.view(np.uint32))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def prompts(self, kind: str) -> list[str]:
        fn = {"object": prompt_object, "action": prompt_action}[kind]
        return [fn(n) for n in self.names]

    def save(self, path) -> None:
        save_table(self, path)


def save_table(table: EmbeddingTable, path) -> None:
    buf = bytearray(FHEB_MAGIC)
    buf += struct.pack("<III", FHEB_VERSION, len(table), table.dim)
    for name, vec in zip(table.names, table.raw):
        enc = name.encode("utf-8")
        buf += struct.pack("<H", len(enc)) + enc
        buf += vec.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_table(path) -> EmbeddingTable:
    blob = Path(path).read_bytes()
    if blob[:4] != FHEB_MAGIC:
        raise TableFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise TableFormatError(f"{path}: truncated header")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != FHEB_VERSION:
        raise TableFormatError(f"{path}: unsupported version {version}")
    pos = 16
    names, rows = [], []
    for i in range(count):
        if pos + 2 > len(blob):
            raise TableFormatError(f"{path}: truncated at entry {i}")
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        end = pos + n + 4 * dim
        if end > len(blob):
            raise TableFormatError(f"{path}: truncated at entry {i}")
        names.append(blob[pos:pos + n].decode("utf-8"))
        rows.append(np.frombuffer(blob, dtype="<f4", count=dim, offset=pos + n))
        pos = end
    if pos != len(blob):
        raise TableFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    raw = np.stack(rows) if rows else np.zeros((0, dim), np.float32)
    return EmbeddingTable(names, raw.astype(np.float32))


def over_matrix(objects: EmbeddingTable, actions: EmbeddingTable) -> np.ndarray:
    """Object-verb relatedness: cosine between every object and action vector."""
    if objects.dim != actions.dim:
        raise ValueError(f"dim mismatch: objects {objects.dim}, actions {actions.dim}")
    return objects.vectors @ actions.vectors.T


def hoi_class_embedding(taxonomy: Taxonomy, objects: EmbeddingTable,
                        actions: EmbeddingTable, classes=None) -> Tensor:
    """Classifier rows ``normalize(l_action + l_object)``, one per HOI class.

    ``classes`` restricts (and orders) the rows, e.g. to the seen set.
    """
    if objects.dim != actions.dim:
        raise ValueError(f"dim mismatch: objects {objects.dim}, actions {actions.dim}")
    idx = range(taxonomy.n_classes) if classes is None else classes
    rows = []
    for c in idx:
        a, o = taxonomy.hoi_classes[c]
        if a >= len(actions) or o >= len(objects):
            raise TaxonomyError(f"class {c} references a missing table entry")
        v = actions.vectors[a] + objects.vectors[o]
        n = np.linalg.norm(v)
        if n == 0:
            raise ZeroVectorError(f"class {c}: action and object vectors cancel")
        rows.append(v / n)
    return Tensor(np.array(rows))
