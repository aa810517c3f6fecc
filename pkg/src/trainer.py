"""Alternating min-max training: encoder descent epochs, periodic adversarial hardness epochs."""
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, Iterator, List, Optional

import numpy as np

from src.checkpoint import save_checkpoint
from src.dataio import InteractionSet, sample_negative_batch
from src.encoder import Encoder, EncoderKind
from src.errors import ConfigError, EmptySplitError, SkippedAdvStep
from src.evaluation import evaluate, fn_identification_rate
from src.loss import (
    AmbiguityDiagnostics,
    HardnessKind,
    HardnessModel,
    advinfonce_backward,
    ambiguity_diagnostics,
    bpr_backward,
    bpr_forward,
    hardness_backward,
    hardness_forward,
)
from src.numkit import AdamHyper, adam_step, check_finite, seeded_stream

logger = logging.getLogger(__name__)

RAND_HARDNESS_BOUND = 0.5
STREAMS = ("init", "hardness_init", "shuffle", "negatives", "rand_hardness", "eval")


class HardnessStrategy(str, Enum):
    ADV = "adv"
    REVERSE = "reverse"
    RAND = "rand"
    NONE = "none"


class LossKind(str, Enum):
    ADVINFONCE = "advinfonce"
    INFONCE = "infonce"
    BPR = "bpr"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_adv: float = 5e-5
    batch_size: int = 2048
    n_negatives: int = 128
    k_weight: int = 64
    tau: float = 0.09
    e_adv_max: int = 7
    t_adv_interval: int = 5
    max_epochs: int = 200
    eval_every: int = 1
    patience: int = 20
    hardness_strategy: HardnessStrategy = HardnessStrategy.ADV
    seed: int = 2023
    loss: LossKind = LossKind.ADVINFONCE
    encoder: EncoderKind = EncoderKind.LIGHTGCN
    dim: int = 64
    layers: int = 2
    hardness_kind: HardnessKind = HardnessKind.EMBED
    d_adv: int = 0
    k_eval: int = 20
    workers: int = 1

    def __post_init__(self):
        try:
            self.hardness_strategy = HardnessStrategy(self.hardness_strategy)
            self.loss = LossKind(self.loss)
            self.encoder = EncoderKind(self.encoder)
            self.hardness_kind = HardnessKind(self.hardness_kind)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        for name in ("lr", "lr_adv", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        positive = ("batch_size", "n_negatives", "k_weight", "t_adv_interval", "max_epochs",
                    "eval_every", "patience", "dim", "k_eval", "workers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("e_adv_max", "layers", "d_adv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")

    @property
    def adv_dim(self) -> int:
        """Embed hardness width; 0 means the encoder's width."""
        return self.d_adv or self.dim

    @property
    def learns_hardness(self) -> bool:
        return self.loss is LossKind.ADVINFONCE and self.hardness_strategy in (
            HardnessStrategy.ADV,
            HardnessStrategy.REVERSE,
        )

    def as_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self)}


def _plain(value):
    return value.value if isinstance(value, Enum) else value


@dataclass(frozen=True)
class Batch:
    users: np.ndarray
    items: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


@dataclass(eq=False)
class TrainState:
    encoder: Encoder
    hardness: Optional[HardnessModel]
    encoder_hyper: AdamHyper
    hardness_hyper: AdamHyper
    streams: Dict[str, np.random.Generator]
    epoch: int = 0
    e_adv: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    since_improvement: int = 0
    history: List[dict] = field(default_factory=list)


def init_state(dataset: InteractionSet, cfg: TrainConfig) -> TrainState:
    streams = {name: seeded_stream(cfg.seed, name) for name in STREAMS}
    encoder = Encoder.build(cfg.encoder, dataset, cfg.dim, cfg.tau, cfg.layers, streams["init"])
    hardness = None
    if cfg.learns_hardness:
        if cfg.hardness_kind is HardnessKind.EMBED:
            hardness = HardnessModel.embed(dataset.n_users, dataset.n_items, cfg.adv_dim, streams["hardness_init"])
        else:
            hardness = HardnessModel.mlp(cfg.dim, streams["hardness_init"])
    return TrainState(
        encoder=encoder,
        hardness=hardness,
        encoder_hyper=AdamHyper(cfg.lr),
        hardness_hyper=AdamHyper(cfg.lr_adv),
        streams=streams,
    )


def make_batches(
    dataset: InteractionSet,
    cfg: TrainConfig,
    shuffle_rng: np.random.Generator,
    neg_rng: np.random.Generator,
) -> Iterator[Batch]:
    """One epoch over the shuffled train pairs; negatives are drawn as each batch is produced."""
    order = shuffle_rng.permutation(len(dataset.train))
    for start in range(0, len(order), cfg.batch_size):
        pairs = dataset.train[order[start:start + cfg.batch_size]]
        negatives = sample_negative_batch(dataset, pairs[:, 0], cfg.n_negatives, neg_rng)
        yield Batch(pairs[:, 0], pairs[:, 1], negatives)


def should_run_adversarial(epoch: int, e_adv: int, cfg: TrainConfig) -> bool:
    return cfg.learns_hardness and epoch % cfg.t_adv_interval == 0 and e_adv < cfg.e_adv_max


def adversarial_schedule(cfg: TrainConfig) -> List[int]:
    """Epochs after which an adversarial epoch fires, assuming no early stop."""
    fired = []
    for epoch in range(1, cfg.max_epochs + 1):
        if should_run_adversarial(epoch, len(fired), cfg):
            fired.append(epoch)
    return fired


@dataclass(frozen=True)
class _Objective:
    loss: float
    d_scores: np.ndarray
    d_deltas: Optional[np.ndarray]


def _deltas(state: TrainState, batch: Batch, cfg: TrainConfig, reps):
    """Per-negative hardness for the descent phase, plus the hardness batch when one was computed."""
    if cfg.loss is not LossKind.ADVINFONCE or cfg.hardness_strategy is HardnessStrategy.NONE:
        return np.zeros(batch.negatives.shape), None
    if cfg.hardness_strategy is HardnessStrategy.RAND:
        bound = RAND_HARDNESS_BOUND
        return state.streams["rand_hardness"].uniform(-bound, bound, size=batch.negatives.shape), None
    hardness_batch = hardness_forward(
        state.hardness, batch.users, batch.items, batch.negatives, encoder=state.encoder, reps=reps
    )
    return hardness_batch.deltas, hardness_batch


def _objective(state: TrainState, batch: Batch, cfg: TrainConfig, reps, deltas) -> _Objective:
    """Batch-mean loss and its gradients w.r.t. the (B, 1 + N) score matrix and the deltas."""
    all_items = np.column_stack([batch.items, batch.negatives])
    scores = state.encoder.score_batch(batch.users, all_items, reps)
    s_pos, s_negs = scores[:, 0], scores[:, 1:]
    size = len(batch)
    if cfg.loss is LossKind.BPR:
        n = s_negs.shape[1]
        loss = float(np.mean(bpr_forward(s_pos[:, None], s_negs)))
        grad = bpr_backward(s_pos[:, None], s_negs)
        d_scores = np.column_stack([grad.d_pos.sum(axis=1), grad.d_neg]) / (n * size)
        return _Objective(loss, d_scores, None)
    grad = advinfonce_backward(s_pos, s_negs, deltas, cfg.k_weight)
    loss = float(np.mean(grad.loss_value))
    d_scores = np.column_stack([grad.d_pos, grad.d_negs]) / size
    return _Objective(loss, d_scores, grad.d_deltas / size)


def batch_loss(state: TrainState, batch: Batch, cfg: TrainConfig) -> float:
    """Current objective on a fixed batch, without updating anything."""
    reps = state.encoder.representations()
    deltas, _ = _deltas(state, batch, cfg, reps)
    return _objective(state, batch, cfg, reps, deltas).loss


@dataclass(frozen=True)
class StepReport:
    loss: float
    diagnostics: Optional[AmbiguityDiagnostics] = None


def min_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> StepReport:
    """One Adam descent step on the encoder tables; hardness parameters are read, never written."""
    reps = state.encoder.representations()
    deltas, hardness_batch = _deltas(state, batch, cfg, reps)
    objective = _objective(state, batch, cfg, reps, deltas)
    check_finite(objective.loss, "batch loss")
    all_items = np.column_stack([batch.items, batch.negatives])
    grads = state.encoder.backward_batch(batch.users, all_items, objective.d_scores, reps)
    adam_step(state.encoder.user_table, grads.user, state.encoder_hyper)
    adam_step(state.encoder.item_table, grads.item, state.encoder_hyper)
    diagnostics = ambiguity_diagnostics(hardness_batch.probs) if hardness_batch is not None else None
    return StepReport(objective.loss, diagnostics)


def adv_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> StepReport:
    """One Adam step on the hardness model: ascent for Adv, descent for Reverse. The encoder is frozen."""
    if state.hardness is None or state.e_adv >= cfg.e_adv_max:
        raise SkippedAdvStep(f"adversarial budget {cfg.e_adv_max} spent")
    reps = state.encoder.representations()
    hardness_batch = hardness_forward(
        state.hardness, batch.users, batch.items, batch.negatives, encoder=state.encoder, reps=reps
    )
    objective = _objective(state, batch, cfg, reps, hardness_batch.deltas)
    check_finite(objective.loss, "batch loss")
    grads = hardness_backward(
        state.hardness,
        hardness_batch,
        objective.d_deltas,
        batch.users,
        batch.items,
        batch.negatives,
        encoder=state.encoder,
        reps=reps,
    )
    sign = -1.0 if cfg.hardness_strategy is HardnessStrategy.ADV else 1.0
    for name in sorted(grads):
        adam_step(state.hardness.params[name], grads[name].scaled(sign), state.hardness_hyper)
    return StepReport(objective.loss, ambiguity_diagnostics(hardness_batch.probs))


@dataclass(frozen=True)
class EpochReport:
    loss: float
    kl_mean: Optional[float]
    eps_proxy: Optional[float]


def _reduce(reports: List[StepReport], sizes: List[int]) -> EpochReport:
    total = sum(sizes)
    loss = math.fsum(r.loss * n for r, n in zip(reports, sizes)) / total
    with_diag = [(r.diagnostics, n) for r, n in zip(reports, sizes) if r.diagnostics is not None]
    if not with_diag:
        return EpochReport(loss, None, None)
    weight = sum(n for _, n in with_diag)
    kl_mean = math.fsum(d.kl_mean * n for d, n in with_diag) / weight
    eps_proxy = math.fsum(d.eps_proxy * n for d, n in with_diag) / weight
    return EpochReport(loss, kl_mean, eps_proxy)


def run_min_epoch(state: TrainState, dataset: InteractionSet, cfg: TrainConfig) -> EpochReport:
    reports, sizes = [], []
    for batch in make_batches(dataset, cfg, state.streams["shuffle"], state.streams["negatives"]):
        reports.append(min_step(state, batch, cfg))
        sizes.append(len(batch))
    return _reduce(reports, sizes)


def run_adversarial_epoch(state: TrainState, batches, cfg: TrainConfig) -> EpochReport:
    """One full pass of adv_step over ``batches``; counts as one adversarial epoch."""
    reports, sizes = [], []
    for batch in batches:
        reports.append(adv_step(state, batch, cfg))
        sizes.append(len(batch))
    state.e_adv += 1
    return _reduce(reports, sizes)


@dataclass(eq=False)
class TrainResult:
    encoder: Encoder
    hardness: Optional[HardnessModel]
    final_encoder: Encoder
    final_hardness: Optional[HardnessModel]
    history: List[dict]
    adversarial_epochs: List[int]
    best_epoch: int
    stopped_epoch: int


def _snapshot(state: TrainState):
    return state.encoder.copy(), state.hardness.copy() if state.hardness is not None else None


def run_training(
    dataset: InteractionSet,
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    planted_fn: Optional[np.ndarray] = None,
) -> TrainResult:
    """Algorithm loop: every epoch descends on the encoder; every ``t_adv_interval`` epochs,
    while the budget lasts, one adversarial epoch follows. Early stop on validation recall."""
    if len(dataset.valid) == 0:
        raise EmptySplitError("valid split is empty; training needs it for early stopping")
    state = init_state(dataset, cfg)
    best_encoder, best_hardness = _snapshot(state)
    adversarial_epochs = []
    last_diag = EpochReport(math.nan, None, None)
    metrics_handle = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8") if out_dir else None
    logger.info(
        "Training %s/%s (strategy %s) on %d train pairs, seed %d",
        cfg.encoder.value, cfg.loss.value, cfg.hardness_strategy.value, len(dataset.train), cfg.seed,
    )
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            state.epoch = epoch
            report = run_min_epoch(state, dataset, cfg)
            if report.kl_mean is not None:
                last_diag = report

            if should_run_adversarial(epoch, state.e_adv, cfg):
                batches = make_batches(dataset, cfg, state.streams["shuffle"], state.streams["negatives"])
                adv_report = run_adversarial_epoch(state, batches, cfg)
                adversarial_epochs.append(epoch)
                last_diag = adv_report
                logger.info(
                    "Adversarial epoch %d/%d after epoch %d: kl_mean=%.6f eps_proxy=%.6f",
                    state.e_adv, cfg.e_adv_max, epoch, adv_report.kl_mean, adv_report.eps_proxy,
                )

            if epoch % cfg.eval_every != 0:
                continue
            metrics = evaluate(state.encoder, dataset, "valid", cfg.k_eval, cfg.workers)
            record = {"epoch": epoch, "split": "valid", **metrics.as_record(), "loss": report.loss,
                      "kl_mean": last_diag.kl_mean, "eps_proxy": last_diag.eps_proxy, "e_adv": state.e_adv}
            if planted_fn is not None and state.hardness is not None and len(planted_fn):
                record["fn_rate"] = fn_identification_rate(
                    state.hardness, planted_fn, state.encoder, dataset, cfg.n_negatives, state.streams["eval"]
                )
            state.history.append(record)
            if metrics_handle is not None:
                metrics_handle.write(json.dumps(record, sort_keys=True) + "\n")
            logger.info("Epoch %d: loss=%.6f recall@%d=%.5f", epoch, report.loss, cfg.k_eval, metrics.recall)

            if metrics.recall > state.best_metric:
                state.best_metric = metrics.recall
                state.best_epoch = epoch
                state.since_improvement = 0
                best_encoder, best_hardness = _snapshot(state)
            else:
                state.since_improvement += 1
                if state.since_improvement >= cfg.patience:
                    logger.info("Early stop at epoch %d, best epoch %d", epoch, state.best_epoch)
                    break
    finally:
        if metrics_handle is not None:
            metrics_handle.close()

    if out_dir:
        save_checkpoint(os.path.join(out_dir, "best.ckpt"), best_encoder, best_hardness, dataset,
                        extra={"epoch": state.best_epoch, "seed": cfg.seed})
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), state.encoder, state.hardness, dataset,
                        extra={"epoch": state.epoch, "seed": cfg.seed})
    return TrainResult(
        encoder=best_encoder,
        hardness=best_hardness,
        final_encoder=state.encoder,
        final_hardness=state.hardness,
        history=state.history,
        adversarial_epochs=adversarial_epochs,
        best_epoch=state.best_epoch,
        stopped_epoch=state.epoch,
    )
