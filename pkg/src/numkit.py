"""Dense/sparse numerical kernel shared by the encoders, losses and trainer.

Everything runs in 64-bit floats. Embedding tables carry their own Adam moments
so that the optimiser can update only the rows a batch touched.
"""
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np
import scipy.sparse as sp

from src.errors import BadParam, DimMismatch, IdOutOfRange, NonFinite, NonFiniteGradient, ZeroNormError

NORM_FLOOR = 1e-12


def seeded_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of randomness under a base seed."""
    if seed < 0:
        raise BadParam(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def check_finite(values, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFinite(f"non-finite values in {what}")


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise BadParam(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise BadParam(f"{name} must lie in (0, 1), got {value}")
        if not self.eps > 0:
            raise BadParam(f"eps must be positive, got {self.eps}")


@dataclass(eq=False)
class EmbeddingTable:
    values: np.ndarray
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimMismatch(f"embedding table must be 2-D, got shape {self.values.shape}")
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.values)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.values)
        if self.adam_m.shape != self.values.shape or self.adam_v.shape != self.values.shape:
            raise DimMismatch("Adam moments must match the table shape")

    @classmethod
    def initialize(cls, rows: int, dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        """Uniform in [-0.5/sqrt(d), 0.5/sqrt(d)]; every row ends up with a usable norm."""
        if rows < 1 or dim < 1:
            raise BadParam(f"table needs positive shape, got ({rows}, {dim})")
        bound = 0.5 / np.sqrt(dim)
        values = rng.uniform(-bound, bound, size=(rows, dim))
        norms = np.linalg.norm(values, axis=1)
        while np.any(norms <= NORM_FLOOR):
            bad = np.flatnonzero(norms <= NORM_FLOOR)
            values[bad] = rng.uniform(-bound, bound, size=(len(bad), dim))
            norms = np.linalg.norm(values, axis=1)
        return cls(values)

    @classmethod
    def zeros(cls, rows: int, dim: int) -> "EmbeddingTable":
        return cls(np.zeros((rows, dim)))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.values.copy(), self.adam_m.copy(), self.adam_v.copy(), self.step_count)


@dataclass(frozen=True)
class RowGrads:
    """Sparse row-gradient map: unique ascending row ids and one gradient row each."""

    indices: np.ndarray
    values: np.ndarray
    dim: int = field(default=None)

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if self.dim is None:
            object.__setattr__(self, "dim", values.shape[1])
        if indices.ndim != 1 or values.shape != (len(indices), self.dim):
            raise DimMismatch(f"{indices.shape} row ids do not fit gradient rows of shape {values.shape}")
        if np.any(np.diff(indices) <= 0):
            raise BadParam("row ids must be unique and ascending; use RowGrads.accumulate to sum duplicates")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)

    @classmethod
    def empty(cls, dim: int) -> "RowGrads":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, dim)), dim)

    @classmethod
    def accumulate(cls, indices, grads) -> "RowGrads":
        """Sum gradient rows that share a row id. ``grads`` has shape ``indices.shape + (d,)``."""
        indices = np.asarray(indices, dtype=np.int64)
        grads = np.asarray(grads, dtype=np.float64)
        dim = grads.shape[-1]
        if grads.shape[:-1] != indices.shape:
            raise DimMismatch(f"gradient shape {grads.shape} does not match index shape {indices.shape}")
        flat_idx = indices.ravel()
        if flat_idx.size == 0:
            return cls.empty(dim)
        unique, inverse = np.unique(flat_idx, return_inverse=True)
        out = np.zeros((len(unique), dim))
        np.add.at(out, inverse, grads.reshape(-1, dim))
        return cls(unique, out, dim)

    @classmethod
    def from_dense(cls, dense) -> "RowGrads":
        """Keep the rows of a dense gradient that have any non-zero entry."""
        dense = np.asarray(dense, dtype=np.float64)
        touched = np.flatnonzero(np.any(dense != 0.0, axis=1))
        return cls(touched.astype(np.int64), dense[touched], dense.shape[1])

    @classmethod
    def dense(cls, values) -> "RowGrads":
        """Every row present, zero rows included (weight matrices)."""
        values = np.asarray(values, dtype=np.float64)
        return cls(np.arange(values.shape[0], dtype=np.int64), values, values.shape[1])

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, np.ndarray], dim: int) -> "RowGrads":
        if not mapping:
            return cls.empty(dim)
        keys = sorted(int(k) for k in mapping)
        values = np.stack([np.asarray(mapping[k], dtype=np.float64) for k in keys])
        if values.ndim != 2 or values.shape[1] != dim:
            raise DimMismatch(f"gradient rows must have length {dim}")
        return cls(np.asarray(keys, dtype=np.int64), values, dim)

    def __len__(self) -> int:
        return len(self.indices)

    def merge(self, other: "RowGrads") -> "RowGrads":
        if self.dim != other.dim:
            raise DimMismatch(f"cannot merge gradients of width {self.dim} and {other.dim}")
        return RowGrads.accumulate(
            np.concatenate([self.indices, other.indices]), np.concatenate([self.values, other.values])
        )

    def scaled(self, factor: float) -> "RowGrads":
        return RowGrads(self.indices, self.values * factor, self.dim)

    def as_dict(self) -> dict:
        return {int(i): row for i, row in zip(self.indices, self.values)}


RowGradsLike = Union[RowGrads, Mapping[int, np.ndarray]]


def adam_step(table: EmbeddingTable, row_grads: RowGradsLike, hyper: AdamHyper) -> EmbeddingTable:
    """Lazy Adam: only rows present in ``row_grads`` move, and only their moments decay.

    Bias correction uses the table's step counter, which advances once per call.
    The table is updated in place and returned.
    """
    grads = row_grads if isinstance(row_grads, RowGrads) else RowGrads.from_mapping(row_grads, table.dim)
    if len(grads) and grads.values.shape[1] != table.dim:
        raise DimMismatch(f"gradient rows have length {grads.values.shape[1]}, table dim is {table.dim}")
    if not np.all(np.isfinite(grads.values)):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    if len(grads) and (grads.indices.min() < 0 or grads.indices.max() >= table.rows):
        raise IdOutOfRange(f"gradient row outside [0, {table.rows})")

    table.step_count += 1
    if not len(grads):
        return table

    t = table.step_count
    idx = grads.indices
    g = grads.values
    m = hyper.beta1 * table.adam_m[idx] + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * table.adam_v[idx] + (1.0 - hyper.beta2) * (g * g)
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    table.adam_m[idx] = m
    table.adam_v[idx] = v
    table.values[idx] -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return table


def _checked_norms(x: np.ndarray) -> np.ndarray:
    norms = np.asarray(np.linalg.norm(x, axis=-1))
    if np.any(norms <= NORM_FLOOR):
        raise ZeroNormError("vector norm at or below 1e-12")
    return norms


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.expand_dims(_checked_norms(x), -1)


def _check_pair(users, items, tau):
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    if users.shape[-1] != items.shape[-1]:
        raise DimMismatch(f"vector lengths differ: {users.shape[-1]} vs {items.shape[-1]}")
    if not tau > 0:
        raise BadParam(f"tau must be positive, got {tau}")
    return users, items


def batch_cosine(users, items, tau: float) -> np.ndarray:
    """Temperature-scaled cosine over the last axis of broadcastable arrays."""
    users, items = _check_pair(users, items, tau)
    cos = np.sum(users * items, axis=-1) / (_checked_norms(users) * _checked_norms(items))
    return np.clip(cos, -1.0, 1.0) / tau


def batch_cosine_grad(users, items, tau: float, upstream=None):
    """Gradients of ``upstream * batch_cosine`` w.r.t. both arguments, in the broadcast shape.

    grad_items = (1/tau) * (u_hat - cos * i_hat) / |i|, and symmetrically for users.
    """
    users, items = _check_pair(users, items, tau)
    user_norms = _checked_norms(users)
    item_norms = _checked_norms(items)
    u_hat = users / np.expand_dims(user_norms, -1)
    i_hat = items / np.expand_dims(item_norms, -1)
    cos = np.expand_dims(np.sum(u_hat * i_hat, axis=-1), -1)
    scale = 1.0 / tau if upstream is None else np.asarray(upstream, dtype=np.float64) / tau
    grad_items = np.expand_dims(scale / item_norms, -1) * (u_hat - cos * i_hat)
    grad_users = np.expand_dims(scale / user_norms, -1) * (i_hat - cos * u_hat)
    return grad_users, grad_items


def _check_vectors(u_vec, i_vec):
    u_vec = np.asarray(u_vec, dtype=np.float64)
    i_vec = np.asarray(i_vec, dtype=np.float64)
    if u_vec.ndim != 1 or i_vec.ndim != 1 or u_vec.shape != i_vec.shape:
        raise DimMismatch(f"expected two vectors of equal length, got {u_vec.shape} and {i_vec.shape}")
    return u_vec, i_vec


def cosine_score(u_vec, i_vec, tau: float) -> float:
    u_vec, i_vec = _check_vectors(u_vec, i_vec)
    return float(batch_cosine(u_vec, i_vec, tau))


def cosine_score_grad(u_vec, i_vec, tau: float):
    u_vec, i_vec = _check_vectors(u_vec, i_vec)
    return batch_cosine_grad(u_vec, i_vec, tau)


@dataclass(frozen=True)
class NormAdjacency:
    """Symmetric-normalised adjacency D^-1/2 A D^-1/2 without self loops."""

    node_count: int
    matrix: sp.csr_matrix

    @classmethod
    def from_edges(cls, node_count: int, pairs) -> "NormAdjacency":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) and (pairs.min() < 0 or pairs.max() >= node_count):
            raise IdOutOfRange(f"edge endpoint outside [0, {node_count})")
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(node_count, node_count)).tocsr()
        adj.sum_duplicates()
        adj.data[:] = 1.0
        degree = np.asarray(adj.sum(axis=1)).ravel()
        inv_sqrt = np.zeros(node_count)
        connected = degree > 0
        inv_sqrt[connected] = 1.0 / np.sqrt(degree[connected])
        scaling = sp.diags(inv_sqrt)
        norm = (scaling @ adj @ scaling).tocsr()
        norm.eliminate_zeros()
        norm.sort_indices()
        return cls(node_count, norm)

    @classmethod
    def bipartite(cls, n_users: int, n_items: int, pairs) -> "NormAdjacency":
        """Users occupy nodes [0, n_users), items follow."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        edges = np.column_stack([pairs[:, 0], pairs[:, 1] + n_users])
        return cls.from_edges(n_users + n_items, edges)

    @property
    def edges(self) -> list:
        coo = self.matrix.tocoo()
        return [(int(r), int(c), float(w)) for r, c, w in zip(coo.row, coo.col, coo.data)]


def propagate(layer0, adj: NormAdjacency, layers: int) -> np.ndarray:
    """Mean of A^l @ layer0 over l = 0..layers."""
    layer0 = np.asarray(layer0, dtype=np.float64)
    if layer0.ndim != 2 or layer0.shape[0] != adj.node_count:
        raise DimMismatch(f"expected {adj.node_count} rows, got shape {layer0.shape}")
    if layers < 0:
        raise BadParam(f"layers must be non-negative, got {layers}")
    if layers == 0:
        return layer0.copy()
    total = layer0.copy()
    current = layer0
    for _ in range(layers):
        current = adj.matrix @ current
        total += current
    return total / (layers + 1)


def propagate_backward(grad_out, adj: NormAdjacency, layers: int) -> np.ndarray:
    # A is symmetric, so the propagation operator is self-adjoint.
    return propagate(grad_out, adj, layers)
