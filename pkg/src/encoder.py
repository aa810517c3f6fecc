"""CF backbones: MF (direct lookup) and LightGCN (mean of propagated layers).

Bipartite node layout: users are nodes [0, n_users), items follow.
Scores are temperature-scaled cosines of the final representations.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from src.dataio import InteractionSet
from src.errors import BadParam, DimMismatch, IdOutOfRange
from src.numkit import (
    EmbeddingTable,
    NormAdjacency,
    RowGrads,
    batch_cosine,
    batch_cosine_grad,
    propagate,
    propagate_backward,
)

Representations = Tuple[np.ndarray, np.ndarray]


class EncoderKind(str, Enum):
    MF = "mf"
    LIGHTGCN = "lightgcn"


@dataclass(frozen=True)
class EncoderGrads:
    user: RowGrads
    item: RowGrads


@dataclass(eq=False)
class Encoder:
    kind: EncoderKind
    user_table: EmbeddingTable
    item_table: EmbeddingTable
    tau: float
    layers: int = 0
    adj: Optional[NormAdjacency] = None

    def __post_init__(self):
        self.kind = EncoderKind(self.kind)
        if not self.tau > 0:
            raise BadParam(f"tau must be positive, got {self.tau}")
        if self.user_table.dim != self.item_table.dim:
            raise DimMismatch("user and item tables must share the embedding dimension")
        if self.kind is EncoderKind.LIGHTGCN:
            if self.adj is None or self.adj.node_count != self.n_users + self.n_items:
                raise DimMismatch("LightGCN needs an adjacency over n_users + n_items nodes")
            if self.layers < 0:
                raise BadParam(f"layers must be non-negative, got {self.layers}")

    @classmethod
    def build(
        cls,
        kind,
        dataset: InteractionSet,
        dim: int,
        tau: float,
        layers: int,
        rng: np.random.Generator,
    ) -> "Encoder":
        kind = EncoderKind(kind)
        user_table = EmbeddingTable.initialize(dataset.n_users, dim, rng)
        item_table = EmbeddingTable.initialize(dataset.n_items, dim, rng)
        if kind is EncoderKind.MF:
            return cls(kind, user_table, item_table, tau)
        # train pairs only, so evaluation splits never leak into the graph
        adj = NormAdjacency.bipartite(dataset.n_users, dataset.n_items, dataset.train)
        return cls(kind, user_table, item_table, tau, layers, adj)

    @property
    def n_users(self) -> int:
        return self.user_table.rows

    @property
    def n_items(self) -> int:
        return self.item_table.rows

    @property
    def dim(self) -> int:
        return self.user_table.dim

    def copy(self) -> "Encoder":
        return Encoder(self.kind, self.user_table.copy(), self.item_table.copy(), self.tau, self.layers, self.adj)

    def param_bytes(self) -> bytes:
        return self.user_table.values.tobytes() + self.item_table.values.tobytes()

    def representations(self) -> Representations:
        if self.kind is EncoderKind.MF:
            return self.user_table.values, self.item_table.values
        stacked = np.vstack([self.user_table.values, self.item_table.values])
        out = propagate(stacked, self.adj, self.layers)
        return out[: self.n_users], out[self.n_users:]

    def _check_ids(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise IdOutOfRange(f"user id outside [0, {self.n_users})")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise IdOutOfRange(f"item id outside [0, {self.n_items})")
        return users, items

    def score_batch(self, users, items, reps: Optional[Representations] = None) -> np.ndarray:
        """Scores of shape (B, M) for users (B,) against items (B, M)."""
        users, items = self._check_ids(users, items)
        user_reps, item_reps = reps if reps is not None else self.representations()
        return batch_cosine(user_reps[users][:, None, :], item_reps[items], self.tau)

    def backward_batch(self, users, items, upstream, reps: Optional[Representations] = None) -> EncoderGrads:
        """Row gradients of sum(upstream * score_batch(users, items)) w.r.t. both tables."""
        users, items = self._check_ids(users, items)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != items.shape:
            raise DimMismatch(f"upstream {upstream.shape} does not match items {items.shape}")
        user_reps, item_reps = reps if reps is not None else self.representations()
        grad_users, grad_items = batch_cosine_grad(user_reps[users][:, None, :], item_reps[items], self.tau, upstream)

        dense_users = np.zeros((self.n_users, self.dim))
        dense_items = np.zeros((self.n_items, self.dim))
        np.add.at(dense_users, users, grad_users.sum(axis=1))
        np.add.at(dense_items, items.ravel(), grad_items.reshape(-1, self.dim))
        if self.kind is EncoderKind.LIGHTGCN:
            layer0 = propagate_backward(np.vstack([dense_users, dense_items]), self.adj, self.layers)
            dense_users, dense_items = layer0[: self.n_users], layer0[self.n_users:]
        return EncoderGrads(RowGrads.from_dense(dense_users), RowGrads.from_dense(dense_items))

    def score(self, user: int, items) -> np.ndarray:
        return self.score_batch(np.asarray([user]), np.asarray(items)[None, :])[0]

    def score_backward(self, user: int, items, upstream) -> EncoderGrads:
        return self.backward_batch(np.asarray([user]), np.asarray(items)[None, :], np.asarray(upstream)[None, :])
