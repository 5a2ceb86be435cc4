"""Fusion graph data model, coordinate-triplet matrix I/O and normalizations.

A fusion graph has one node per object type, one edge per relation matrix
and one loop per constraint matrix.  Graphs are loaded from a JSON manifest
that points at label files and matrix files::

    {
      "types": [{"id": "G", "labels_file": "genes.txt"}, ...],
      "relations": [{"edge_id": "G-T", "source": "G", "target": "T",
                     "matrix_file": "g_t.mtx"}, ...],
      "constraints": [{"constraint_id": "ppi", "type": "G",
                       "matrix_file": "ppi.mtx"}]
    }

Paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from ._io import atomic_write_text

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Raised when a fusion graph or one of its files fails validation."""


@dataclass(frozen=True)
class ObjectType:
    id: str
    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels:
            raise GraphError(f"object type {self.id!r} has no entities")
        if len(set(self.labels)) != len(self.labels):
            raise GraphError(f"object type {self.id!r} has duplicate entity labels")

    @property
    def cardinality(self) -> int:
        return len(self.labels)

    def index_of(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise GraphError(f"unknown {self.id!r} entity {label!r}") from None

    @property
    def _index(self) -> dict[str, int]:
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {lab: i for i, lab in enumerate(self.labels)}
            object.__setattr__(self, "_index_cache", cache)
        return cache


@dataclass(frozen=True)
class RelationMatrix:
    edge_id: str
    source: str
    target: str
    values: sp.csr_matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ConstraintMatrix:
    constraint_id: str
    type: str
    values: sp.csr_matrix


@dataclass(frozen=True)
class FusionGraph:
    """Relational map of object types, relation matrices and constraints.

    Construction validates every invariant: declared types, shapes, finite
    values, unique identifiers and connectivity of the relation multigraph.
    """

    types: Mapping[str, ObjectType]
    relations: Mapping[str, RelationMatrix]
    constraints: Mapping[str, ConstraintMatrix] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "types", dict(sorted(self.types.items())))
        object.__setattr__(self, "relations", dict(sorted(self.relations.items())))
        object.__setattr__(self, "constraints", dict(sorted(self.constraints.items())))
        self._validate()

    @classmethod
    def build(
        cls,
        types: Iterable[ObjectType],
        relations: Iterable[RelationMatrix],
        constraints: Iterable[ConstraintMatrix] = (),
    ) -> "FusionGraph":
        tmap: dict[str, ObjectType] = {}
        for t in types:
            if t.id in tmap:
                raise GraphError(f"duplicate object type id {t.id!r}")
            tmap[t.id] = t
        rmap: dict[str, RelationMatrix] = {}
        for r in relations:
            if r.edge_id in rmap:
                raise GraphError(f"duplicate edge_id {r.edge_id!r}")
            rmap[r.edge_id] = r
        cmap: dict[str, ConstraintMatrix] = {}
        for c in constraints:
            if c.constraint_id in cmap:
                raise GraphError(f"duplicate constraint_id {c.constraint_id!r}")
            cmap[c.constraint_id] = c
        return cls(tmap, rmap, cmap)

    def _validate(self):
        for r in self.relations.values():
            for end in (r.source, r.target):
                if end not in self.types:
                    raise GraphError(f"relation {r.edge_id!r} references undeclared type {end!r}")
            if r.source == r.target:
                raise GraphError(f"relation {r.edge_id!r} relates type {r.source!r} to itself")
            want = (self.types[r.source].cardinality, self.types[r.target].cardinality)
            if r.values.shape != want:
                raise GraphError(
                    f"shape mismatch for relation {r.edge_id!r}: "
                    f"got {r.values.shape}, expected {want}"
                )
            if not np.all(np.isfinite(r.values.data)):
                raise GraphError(f"non-finite entry in relation {r.edge_id!r}")
        for c in self.constraints.values():
            if c.type not in self.types:
                raise GraphError(f"constraint {c.constraint_id!r} references undeclared type {c.type!r}")
            n = self.types[c.type].cardinality
            if c.values.shape != (n, n):
                raise GraphError(
                    f"shape mismatch for constraint {c.constraint_id!r}: "
                    f"got {c.values.shape}, expected {(n, n)}"
                )
            if not np.all(np.isfinite(c.values.data)):
                raise GraphError(f"non-finite entry in constraint {c.constraint_id!r}")
        components = self.components()
        if len(components) > 1:
            names = "; ".join("{" + ", ".join(sorted(c)) + "}" for c in components)
            raise GraphError(
                f"fusion graph is disconnected: no relation bridges components {names}"
            )

    def components(self) -> list[set[str]]:
        adj: dict[str, set[str]] = {t: set() for t in self.types}
        for r in self.relations.values():
            adj[r.source].add(r.target)
            adj[r.target].add(r.source)
        seen: set[str] = set()
        out = []
        for start in self.types:
            if start in seen:
                continue
            comp = {start}
            queue = deque([start])
            while queue:
                for nxt in adj[queue.popleft()]:
                    if nxt not in comp:
                        comp.add(nxt)
                        queue.append(nxt)
            seen |= comp
            out.append(comp)
        return out

    def cardinality(self, type_id: str) -> int:
        return self.type(type_id).cardinality

    def type(self, type_id: str) -> ObjectType:
        try:
            return self.types[type_id]
        except KeyError:
            raise GraphError(f"unknown object type {type_id!r}") from None

    def relation(self, edge_id: str) -> RelationMatrix:
        try:
            return self.relations[edge_id]
        except KeyError:
            raise GraphError(f"unknown relation {edge_id!r}") from None

    def incident(self, type_id: str) -> list[RelationMatrix]:
        return [r for r in self.relations.values() if type_id in (r.source, r.target)]

    def constraints_of(self, type_id: str) -> list[ConstraintMatrix]:
        return [c for c in self.constraints.values() if c.type == type_id]

    def map_relations(self, fn) -> "FusionGraph":
        """Return a copy with ``fn`` applied to every relation's values."""
        rels = {
            k: RelationMatrix(r.edge_id, r.source, r.target, sp.csr_matrix(fn(r.values)))
            for k, r in self.relations.items()
        }
        return FusionGraph(self.types, rels, self.constraints)

    def equals(self, other: "FusionGraph") -> bool:
        if self.types != other.types:
            return False
        if self.relations.keys() != other.relations.keys():
            return False
        if self.constraints.keys() != other.constraints.keys():
            return False
        for k, r in self.relations.items():
            o = other.relations[k]
            if (r.source, r.target) != (o.source, o.target):
                return False
            if not _same_values(r.values, o.values):
                return False
        for k, c in self.constraints.items():
            o = other.constraints[k]
            if c.type != o.type or not _same_values(c.values, o.values):
                return False
        return True


def _same_values(a: sp.spmatrix, b: sp.spmatrix) -> bool:
    if a.shape != b.shape:
        return False
    return np.array_equal(a.toarray(), b.toarray())


# ---------------------------------------------------------------------------
# Matrix files


def read_matrix(path: str | os.PathLike, name: str | None = None) -> sp.csr_matrix:
    """Read a coordinate-triplet text matrix.

    The first line holds ``n_rows n_cols nnz``; each following line holds
    ``row col value`` with 0-based indices.  ``name`` identifies the matrix
    in error messages.
    """
    name = name or str(path)
    path = Path(path)
    if not path.is_file():
        raise GraphError(f"missing matrix file for {name!r}: {path}")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        try:
            n_rows, n_cols, nnz = (int(x) for x in header)
        except ValueError:
            raise GraphError(f"malformed header in matrix file for {name!r}: {path}") from None
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        count = 0
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if count >= nnz:
                raise GraphError(f"matrix file for {name!r} has more than {nnz} entries")
            try:
                r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
            except (ValueError, IndexError):
                raise GraphError(f"malformed line {lineno} in matrix file for {name!r}") from None
            if not (0 <= r < n_rows and 0 <= c < n_cols):
                raise GraphError(
                    f"shape mismatch for {name!r}: entry ({r}, {c}) outside "
                    f"{n_rows}x{n_cols} at line {lineno}"
                )
            if not math.isfinite(v):
                raise GraphError(f"non-finite entry in {name!r} at line {lineno}")
            rows[count], cols[count], vals[count] = r, c, v
            count += 1
    if count != nnz:
        raise GraphError(f"matrix file for {name!r} declares {nnz} entries but has {count}")
    return sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)))


def format_matrix(m) -> str:
    """Serialize a dense or sparse matrix in the triplet format.

    Values use ``repr`` so that reading back is bit-exact.
    """
    coo = sp.coo_matrix(m)
    order = np.lexsort((coo.col, coo.row))
    rows, cols, vals = coo.row[order], coo.col[order], coo.data[order]
    keep = vals != 0
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    lines = [f"{coo.shape[0]} {coo.shape[1]} {len(vals)}"]
    lines.extend(f"{r} {c} {float(v)!r}" for r, c, v in zip(rows, cols, vals))
    return "\n".join(lines) + "\n"


def write_matrix(path: str | os.PathLike, m) -> None:
    atomic_write_text(path, format_matrix(m))


def read_labels(path: str | os.PathLike, type_id: str) -> tuple[str, ...]:
    path = Path(path)
    if not path.is_file():
        raise GraphError(f"missing labels file for type {type_id!r}: {path}")
    with open(path, encoding="utf-8") as fh:
        labels = tuple(line.rstrip("\n") for line in fh if line.strip())
    return labels


# ---------------------------------------------------------------------------
# Manifest load / save


def load_fusion_graph(manifest_path: str | os.PathLike) -> FusionGraph:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise GraphError(f"missing manifest file: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphError(f"manifest {manifest_path} is not valid JSON: {exc}") from None
    base = manifest_path.parent

    types = []
    for entry in doc.get("types", []):
        tid = entry["id"]
        types.append(ObjectType(tid, read_labels(base / entry["labels_file"], tid)))
    relations = [
        RelationMatrix(
            e["edge_id"], e["source"], e["target"],
            read_matrix(base / e["matrix_file"], e["edge_id"]),
        )
        for e in doc.get("relations", [])
    ]
    constraints = [
        ConstraintMatrix(
            c["constraint_id"], c["type"],
            read_matrix(base / c["matrix_file"], c["constraint_id"]),
        )
        for c in doc.get("constraints", [])
    ]
    graph = FusionGraph.build(types, relations, constraints)
    logger.debug("loaded fusion graph with %d types, %d relations", len(graph.types), len(graph.relations))
    return graph


def save_fusion_graph(graph: FusionGraph, directory: str | os.PathLike) -> Path:
    """Write ``graph`` as manifest + label/matrix files; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc: dict = {"types": [], "relations": [], "constraints": []}
    for tid, t in graph.types.items():
        fname = f"type_{tid}.txt"
        atomic_write_text(directory / fname, "".join(f"{lab}\n" for lab in t.labels))
        doc["types"].append({"id": tid, "labels_file": fname})
    for eid, r in graph.relations.items():
        fname = f"relation_{eid}.mtx"
        write_matrix(directory / fname, r.values)
        doc["relations"].append(
            {"edge_id": eid, "source": r.source, "target": r.target, "matrix_file": fname}
        )
    for cid, c in graph.constraints.items():
        fname = f"constraint_{cid}.mtx"
        write_matrix(directory / fname, c.values)
        doc["constraints"].append({"constraint_id": cid, "type": c.type, "matrix_file": fname})
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# Normalizations


def normalize_matrix(m):
    """Column-then-row Euclidean normalization.

    Each column is divided by its 2-norm, then each row of the result by its
    2-norm.  All-zero columns and rows are left untouched.  Sparse input
    yields sparse output.
    """
    if sp.issparse(m):
        m = sp.csr_matrix(m, dtype=np.float64)
        if m.nnz and not np.all(np.isfinite(m.data)):
            raise ValueError("normalize_matrix: non-finite input")
        col = np.sqrt(np.asarray(m.multiply(m).sum(axis=0)).ravel())
        m = sp.csr_matrix(m @ sp.diags(_safe_inverse(col)))
        row = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
        return sp.csr_matrix(sp.diags(_safe_inverse(row)) @ m)
    m = np.array(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("normalize_matrix: non-finite input")
    m = m * _safe_inverse(np.linalg.norm(m, axis=0))[None, :]
    return m * _safe_inverse(np.linalg.norm(m, axis=1))[:, None]


def _safe_inverse(norms: np.ndarray) -> np.ndarray:
    out = np.ones_like(norms)
    nz = norms > 0
    out[nz] = 1.0 / norms[nz]
    return out


def row_stochastic(m) -> np.ndarray:
    """Clamp negatives to zero and scale rows to sum to one.

    An all-zero row becomes the uniform distribution.
    """
    m = np.array(m.toarray() if sp.issparse(m) else m, dtype=np.float64)
    m = np.maximum(m, 0.0)
    sums = m.sum(axis=1)
    out = np.empty_like(m)
    zero = sums <= 0
    out[~zero] = m[~zero] / sums[~zero, None]
    out[zero] = 1.0 / m.shape[1]
    return out
