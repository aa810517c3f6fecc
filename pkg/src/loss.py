"""BPR, InfoNCE and AdvInfoNCE with analytic gradients, plus the hardness models.

Every loss is vectorised over leading batch axes: ``s_pos`` has shape ``B`` and
``s_negs``/``deltas`` have shape ``B + (N,)``. Passing a scalar positive and a
1-D negative vector gives plain floats back.

AdvInfoNCE for one observed pair::

    L = -log( e^{s+} / (e^{s+} + K * sum_j e^{delta_j} e^{s_j}) )

All log-sum-exp and softmax evaluations subtract the running maximum
(``scipy.special.logsumexp``).
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, rel_entr

from src.errors import BadDistribution, BadParam, DimMismatch, IdOutOfRange
from src.numkit import EmbeddingTable, RowGrads, check_finite

MLP_LATENT_DIM = 4
MLP_PARAMS = ("user_weight", "user_bias", "item_weight", "item_bias")
DISTRIBUTION_TOLERANCE = 1e-8


def _out(value):
    return float(value) if np.ndim(value) == 0 else value


def _check_scores(s_pos, s_negs, deltas=None):
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_negs = np.asarray(s_negs, dtype=np.float64)
    if s_negs.ndim == 0 or s_negs.shape[:-1] != s_pos.shape:
        raise DimMismatch(f"negative scores {s_negs.shape} do not match positive scores {s_pos.shape}")
    check_finite(s_pos, "positive scores")
    check_finite(s_negs, "negative scores")
    if deltas is None:
        return s_pos, s_negs, None
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != s_negs.shape:
        raise DimMismatch(f"hardness {deltas.shape} does not match negative scores {s_negs.shape}")
    check_finite(deltas, "hardness")
    return s_pos, s_negs, deltas


def _check_k(k_weight):
    if not k_weight >= 1:
        raise BadParam(f"k_weight must be at least 1, got {k_weight}")


def _logits(s_pos, s_negs, deltas, k_weight):
    # column 0 is the positive; the rest are the K-weighted, hardness-tilted negatives
    negatives = np.log(k_weight) + deltas + s_negs
    return np.concatenate([s_pos[..., None], negatives], axis=-1)


@dataclass(frozen=True)
class LossGrad:
    loss_value: object
    d_pos: object
    d_negs: np.ndarray
    d_deltas: np.ndarray


def advinfonce_forward(s_pos, s_negs, deltas, k_weight: float = 1.0):
    s_pos, s_negs, deltas = _check_scores(s_pos, s_negs, deltas)
    _check_k(k_weight)
    return _out(logsumexp(_logits(s_pos, s_negs, deltas, k_weight), axis=-1) - s_pos)


def advinfonce_backward(s_pos, s_negs, deltas, k_weight: float = 1.0) -> LossGrad:
    """dL/ds_j = dL/ddelta_j = K e^{delta_j} e^{s_j} / Z and dL/ds+ = -sum_j dL/ds_j."""
    s_pos, s_negs, deltas = _check_scores(s_pos, s_negs, deltas)
    _check_k(k_weight)
    logits = _logits(s_pos, s_negs, deltas, k_weight)
    lse = logsumexp(logits, axis=-1, keepdims=True)
    d_negs = np.exp(logits[..., 1:] - lse)
    d_pos = -np.sum(d_negs, axis=-1)
    return LossGrad(_out(lse[..., 0] - s_pos), _out(d_pos), d_negs, d_negs.copy())


def infonce_forward(s_pos, s_negs, k_weight: float = 1.0):
    return advinfonce_forward(s_pos, s_negs, np.zeros(np.shape(s_negs)), k_weight)


def infonce_backward(s_pos, s_negs, k_weight: float = 1.0) -> LossGrad:
    return advinfonce_backward(s_pos, s_negs, np.zeros(np.shape(s_negs)), k_weight)


def dro_form_loss(s_pos, s_negs, probs, n: int, k_weight: float = 1.0):
    """AdvInfoNCE written over a negative-sampling distribution p: weight K * n * p_j per negative."""
    s_pos, s_negs, _ = _check_scores(s_pos, s_negs)
    _check_k(k_weight)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != s_negs.shape:
        raise DimMismatch(f"distribution {probs.shape} does not match negative scores {s_negs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > DISTRIBUTION_TOLERANCE):
        raise BadDistribution("sampling probabilities must be non-negative and sum to 1")
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    negatives = np.log(k_weight) + np.log(n) + log_probs + s_negs
    logits = np.concatenate([s_pos[..., None], negatives], axis=-1)
    return _out(logsumexp(logits, axis=-1) - s_pos)


@dataclass(frozen=True)
class BprGrad:
    loss_value: object
    d_pos: object
    d_neg: object


def bpr_forward(s_pos, s_neg):
    margin = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    check_finite(margin, "BPR scores")
    return _out(np.logaddexp(0.0, -margin))


def bpr_backward(s_pos, s_neg) -> BprGrad:
    margin = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    check_finite(margin, "BPR scores")
    weight = expit(-margin)
    return BprGrad(_out(np.logaddexp(0.0, -margin)), _out(-weight), _out(weight))


def ranking_max_bound(s_pos, s_negs, deltas):
    """(max{0, max_j s_j - s+ + delta_j}, AdvInfoNCE with K=1); log-sum-exp dominates the max."""
    s_pos, s_negs, deltas = _check_scores(s_pos, s_negs, deltas)
    margins = s_negs - s_pos[..., None] + deltas
    lhs = np.maximum(0.0, margins.max(axis=-1))
    return _out(lhs), advinfonce_forward(s_pos, s_negs, deltas, 1.0)


class HardnessKind(str, Enum):
    EMBED = "embed"
    MLP = "mlp"


@dataclass(eq=False)
class HardnessModel:
    """Adversary producing raw hardness scores g(u, j).

    embed: g = <user[u], item[j]> over its own tables.
    mlp:   g = <x_u W_u + b_u, x_j W_v + b_v> over the encoder's representations.
    """

    kind: HardnessKind
    params: Dict[str, EmbeddingTable]

    def __post_init__(self):
        self.kind = HardnessKind(self.kind)
        expected = {"user", "item"} if self.kind is HardnessKind.EMBED else MLP_PARAMS
        if set(self.params) != set(expected):
            raise DimMismatch(f"{self.kind.value} hardness needs parameters {sorted(expected)}")

    @classmethod
    def embed(cls, n_users: int, n_items: int, dim: int, rng: np.random.Generator) -> "HardnessModel":
        # zero user side keeps g constant (delta = 0) until the first adversarial update
        return cls(HardnessKind.EMBED, {
            "user": EmbeddingTable.zeros(n_users, dim),
            "item": EmbeddingTable.initialize(n_items, dim, rng),
        })

    @classmethod
    def mlp(cls, input_dim: int, rng: np.random.Generator, latent_dim: int = MLP_LATENT_DIM) -> "HardnessModel":
        return cls(HardnessKind.MLP, {
            "user_weight": EmbeddingTable.initialize(input_dim, latent_dim, rng),
            "user_bias": EmbeddingTable.zeros(1, latent_dim),
            "item_weight": EmbeddingTable.initialize(input_dim, latent_dim, rng),
            "item_bias": EmbeddingTable.zeros(1, latent_dim),
        })

    def copy(self) -> "HardnessModel":
        return HardnessModel(self.kind, {name: table.copy() for name, table in self.params.items()})

    def param_bytes(self) -> bytes:
        return b"".join(self.params[name].values.tobytes() for name in sorted(self.params))


@dataclass(frozen=True)
class HardnessBatch:
    raw_scores: np.ndarray
    probs: np.ndarray
    deltas: np.ndarray


def _as_batch(users, negatives):
    users = np.asarray(users, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    single = users.ndim == 0
    users = np.atleast_1d(users)
    if single:
        negatives = negatives[None, :]
    if negatives.ndim != 2 or negatives.shape[0] != users.shape[0] or negatives.shape[1] < 1:
        raise DimMismatch(f"negatives {negatives.shape} do not match {users.shape[0]} users")
    return users, negatives, single


def _mlp_inputs(model, users, negatives, encoder, reps):
    if reps is None:
        if encoder is None:
            raise BadParam("mlp hardness needs the encoder's representations")
        reps = encoder.representations()
    user_reps, item_reps = reps
    if user_reps.shape[1] != model.params["user_weight"].rows:
        raise DimMismatch(f"mlp expects inputs of width {model.params['user_weight'].rows}")
    return user_reps[users], item_reps[negatives]


def _latents(model, users, negatives, encoder, reps):
    p = model.params
    if model.kind is HardnessKind.EMBED:
        if users.max() >= p["user"].rows or negatives.max() >= p["item"].rows:
            raise IdOutOfRange("id outside the hardness tables")
        return p["user"].values[users], p["item"].values[negatives], None
    x_user, x_item = _mlp_inputs(model, users, negatives, encoder, reps)
    h_user = x_user @ p["user_weight"].values + p["user_bias"].values[0]
    h_item = x_item @ p["item_weight"].values + p["item_bias"].values[0]
    return h_user, h_item, (x_user, x_item)


def hardness_forward(model: HardnessModel, users, items, negatives, encoder=None, reps=None) -> HardnessBatch:
    """Softmax of g over each row's N negatives; delta_j = log N + log p_j.

    ``items`` (the observed positives) are accepted for symmetry with the loss but
    g depends only on (u, j). Encoder representations enter the mlp as constants.
    """
    users, negatives, single = _as_batch(users, negatives)
    h_user, h_item, _ = _latents(model, users, negatives, encoder, reps)
    raw = np.einsum("bk,bnk->bn", h_user, h_item)
    log_probs = log_softmax(raw, axis=-1)
    deltas = np.log(negatives.shape[1]) + log_probs
    batch = HardnessBatch(raw, np.exp(log_probs), deltas)
    if single:
        return HardnessBatch(raw[0], batch.probs[0], deltas[0])
    return batch


def hardness_score_grad(probs, d_deltas) -> np.ndarray:
    """Chain dL/ddelta through the log-softmax: dL/dg_k = dL/ddelta_k - p_k * sum_j dL/ddelta_j."""
    probs = np.asarray(probs, dtype=np.float64)
    d_deltas = np.asarray(d_deltas, dtype=np.float64)
    if probs.shape != d_deltas.shape:
        raise DimMismatch(f"gradient {d_deltas.shape} does not match probabilities {probs.shape}")
    return d_deltas - probs * d_deltas.sum(axis=-1, keepdims=True)


def hardness_backward(
    model: HardnessModel, batch: HardnessBatch, d_deltas, users, items, negatives, encoder=None, reps=None
) -> Dict[str, RowGrads]:
    """Gradient of the loss w.r.t. every hardness parameter, one RowGrads per table."""
    users, negatives, single = _as_batch(users, negatives)
    probs = batch.probs[None, :] if single else batch.probs
    d_deltas = np.asarray(d_deltas, dtype=np.float64)
    d_raw = hardness_score_grad(probs, d_deltas[None, :] if single else d_deltas)
    h_user, h_item, inputs = _latents(model, users, negatives, encoder, reps)

    d_user = np.einsum("bn,bnk->bk", d_raw, h_item)
    d_item = d_raw[..., None] * h_user[:, None, :]
    if model.kind is HardnessKind.EMBED:
        return {"user": RowGrads.accumulate(users, d_user), "item": RowGrads.accumulate(negatives, d_item)}

    x_user, x_item = inputs
    flat_x_item = x_item.reshape(-1, x_item.shape[-1])
    flat_d_item = d_item.reshape(-1, d_item.shape[-1])
    return {
        "user_weight": RowGrads.dense(x_user.T @ d_user),
        "user_bias": RowGrads.dense(d_user.sum(axis=0, keepdims=True)),
        "item_weight": RowGrads.dense(flat_x_item.T @ flat_d_item),
        "item_bias": RowGrads.dense(flat_d_item.sum(axis=0, keepdims=True)),
    }


def kl_from_uniform(probs) -> np.ndarray:
    """KL(P0 || P) per row, P0 uniform over the row's N entries."""
    probs = np.asarray(probs, dtype=np.float64)
    uniform = np.full_like(probs, 1.0 / probs.shape[-1])
    return rel_entr(uniform, probs).sum(axis=-1)


@dataclass(frozen=True)
class AmbiguityDiagnostics:
    eps_proxy: float
    kl_mean: float


def ambiguity_diagnostics(probs) -> AmbiguityDiagnostics:
    """Batch means of max_j |p_j - 1/N| and KL(P0 || P)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    deviation = np.abs(probs - 1.0 / probs.shape[-1]).max(axis=-1)
    return AmbiguityDiagnostics(float(deviation.mean()), float(kl_from_uniform(probs).mean()))
