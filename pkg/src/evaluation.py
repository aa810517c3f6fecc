"""All-ranking Top-K evaluation and the representation / hardness diagnostics."""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from src.dataio import InteractionSet, sample_negative_batch
from src.encoder import Encoder, Representations
from src.errors import BadParam, EmptyEval, EmptyFnList, EmptySample, NoCandidates
from src.loss import HardnessModel, advinfonce_forward, hardness_forward
from src.numkit import normalize_rows

logger = logging.getLogger(__name__)

DEFAULT_K_EVAL = 20
USER_CHUNK = 256
PROFILE_COLUMNS = ["bin", "mean_p", "count", "uniform_p", "popularity_min", "popularity_max"]


@dataclass(frozen=True)
class RankResult:
    user: int
    ranking: np.ndarray
    positions: np.ndarray


@dataclass(frozen=True)
class MetricReport:
    hr: float
    recall: float
    ndcg: float
    k: int
    n_users: int
    per_user: List[dict] = field(default_factory=list, repr=False)

    def as_record(self) -> dict:
        return {f"hr@{self.k}": self.hr, f"recall@{self.k}": self.recall, f"ndcg@{self.k}": self.ndcg}


def score_matrix(encoder: Encoder, users, reps: Optional[Representations] = None) -> np.ndarray:
    """cos(f(u), f(j)) / tau for every requested user against every item, shape (U, n_items)."""
    user_reps, item_reps = reps if reps is not None else encoder.representations()
    users = np.asarray(users, dtype=np.int64)
    cosines = normalize_rows(user_reps[users]) @ normalize_rows(item_reps).T
    return np.clip(cosines, -1.0, 1.0) / encoder.tau


def rank_scores(scores, excluded) -> np.ndarray:
    """Items not excluded, by descending score; equal scores by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.flatnonzero(~np.asarray(excluded, dtype=bool))
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order]


def positions_of(ranking, items) -> np.ndarray:
    """Sorted 1-based positions of ``items`` in ``ranking``; items absent from it are dropped."""
    ranking = np.asarray(ranking, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(ranking) == 0 or len(items) == 0:
        return np.empty(0, dtype=np.int64)
    lookup = np.zeros(max(int(ranking.max()), int(items.max())) + 1, dtype=np.int64)
    lookup[ranking] = np.arange(1, len(ranking) + 1)
    found = lookup[items]
    return np.sort(found[found > 0])


def _excluded_mask(dataset: InteractionSet, user: int, candidate_mask: Optional[np.ndarray]) -> np.ndarray:
    excluded = np.zeros(dataset.n_items, dtype=bool)
    excluded[dataset.train_positives(user)] = True
    if candidate_mask is not None:
        excluded |= ~candidate_mask
    return excluded


def _candidate_mask(dataset: InteractionSet, candidates) -> Optional[np.ndarray]:
    if candidates is None:
        return None
    mask = np.zeros(dataset.n_items, dtype=bool)
    mask[np.asarray(candidates, dtype=np.int64)] = True
    return mask


def _rank_chunk(encoder, dataset, users, positives, reps, candidate_mask) -> List[RankResult]:
    scores = score_matrix(encoder, users, reps)
    results = []
    for row, user in zip(scores, users):
        ranking = rank_scores(row, _excluded_mask(dataset, int(user), candidate_mask))
        results.append(RankResult(int(user), ranking, positions_of(ranking, positives.get(int(user), ()))))
    return results


def rank_all(encoder: Encoder, user: int, dataset: InteractionSet, split: str = "test", candidates=None) -> RankResult:
    positives = dataset.positives(split)
    result = _rank_chunk(encoder, dataset, [user], positives, None, _candidate_mask(dataset, candidates))[0]
    if len(result.ranking) == 0:
        raise NoCandidates(f"user {user} has no candidate items")
    return result


def _idcg(n_relevant: int, k: int) -> float:
    return math.fsum(1.0 / math.log2(1 + rank) for rank in range(1, min(k, n_relevant) + 1))


def topk_metrics(results: Sequence[RankResult], positives: Dict[int, np.ndarray], k_eval: int = DEFAULT_K_EVAL) -> MetricReport:
    if k_eval < 1:
        raise BadParam(f"k_eval must be at least 1, got {k_eval}")
    per_user = []
    for result in results:
        relevant = positives.get(result.user)
        if relevant is None or len(relevant) == 0:
            continue
        hits = positions_of(result.ranking, relevant)
        hits = hits[hits <= k_eval]
        dcg = math.fsum(1.0 / math.log2(1 + int(p)) for p in hits)
        per_user.append({
            "user": result.user,
            "hr": 1.0 if len(hits) else 0.0,
            "recall": len(hits) / len(relevant),
            "ndcg": dcg / _idcg(len(relevant), k_eval),
        })
    if not per_user:
        raise EmptyEval("no user has positives in the evaluated split")

    def macro(name):
        return math.fsum(row[name] for row in per_user) / len(per_user)

    return MetricReport(macro("hr"), macro("recall"), macro("ndcg"), k_eval, len(per_user), per_user)


def evaluate(
    encoder: Encoder,
    dataset: InteractionSet,
    split: str = "valid",
    k_eval: int = DEFAULT_K_EVAL,
    workers: int = 1,
    candidates=None,
) -> MetricReport:
    """All-ranking metrics over every user with positives in ``split``.

    Users are ranked in chunks, optionally on a thread pool; parameters are read-only
    for the duration and the per-user rows are reduced in user order.
    """
    positives = dataset.positives(split)
    if not positives:
        raise EmptyEval(f"split {split!r} has no positives")
    users = np.asarray(sorted(positives), dtype=np.int64)
    reps = encoder.representations()
    candidate_mask = _candidate_mask(dataset, candidates)
    chunks = [users[start:start + USER_CHUNK] for start in range(0, len(users), USER_CHUNK)]

    def work(chunk):
        return _rank_chunk(encoder, dataset, chunk, positives, reps, candidate_mask)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ranked = list(pool.map(work, chunks))
    else:
        ranked = [work(chunk) for chunk in chunks]
    report = topk_metrics([r for chunk in ranked for r in chunk], positives, k_eval)
    logger.debug("Evaluated %d users on %s: recall@%d=%.5f", report.n_users, split, k_eval, report.recall)
    return report


@dataclass(frozen=True)
class DcgBound:
    neg_log_dcg: float
    loss: float
    holds: bool


def dcg_bound_check(s_pos, s_negs, deltas) -> DcgBound:
    """-log DCG of the single positive under the hardness-adjusted rank, against the K=1 loss."""
    s_negs = np.asarray(s_negs, dtype=np.float64)
    margins = s_negs - float(s_pos) + np.asarray(deltas, dtype=np.float64)
    rank = 1 + int(np.count_nonzero(margins > 0))
    neg_log_dcg = math.log(math.log2(1 + rank))
    loss = float(advinfonce_forward(s_pos, s_negs, deltas, 1.0))
    return DcgBound(neg_log_dcg, loss, neg_log_dcg <= loss + 1e-12)


def alignment_uniformity_vectors(left, right, entities):
    """Alignment of paired rows and uniformity of ``entities``, all L2-normalised first."""
    left = np.atleast_2d(np.asarray(left, dtype=np.float64))
    right = np.atleast_2d(np.asarray(right, dtype=np.float64))
    entities = np.atleast_2d(np.asarray(entities, dtype=np.float64))
    if left.shape[0] == 0 or left.shape != right.shape:
        raise EmptySample("alignment needs a non-empty sample of positive pairs")
    if entities.shape[0] < 2:
        raise EmptySample("uniformity needs at least two entities")
    diff = normalize_rows(left) - normalize_rows(right)
    align = float(np.mean(np.sum(diff * diff, axis=1)))
    sq_dists = pdist(normalize_rows(entities), "sqeuclidean")
    uniform = float(logsumexp(-2.0 * sq_dists) - math.log(len(sq_dists)))
    return align, uniform


def alignment_uniformity(encoder: Encoder, pairs, users=None, items=None):
    """Alignment over ``pairs`` and uniformity over the users and items given (default: those in ``pairs``)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptySample("no positive pairs to measure")
    user_reps, item_reps = encoder.representations()
    users = np.unique(pairs[:, 0]) if users is None else np.asarray(users, dtype=np.int64)
    items = np.unique(pairs[:, 1]) if items is None else np.asarray(items, dtype=np.int64)
    entities = np.vstack([user_reps[users], item_reps[items]])
    return alignment_uniformity_vectors(user_reps[pairs[:, 0]], item_reps[pairs[:, 1]], entities)


def fn_identification_rate(
    model: Optional[HardnessModel],
    planted_fn,
    encoder: Encoder,
    dataset: InteractionSet,
    n_negatives: int,
    rng: np.random.Generator,
    resamples: int = 1,
) -> float:
    """Share of planted false negatives given delta < 0 when mixed into a sampled negative set."""
    planted_fn = np.asarray(planted_fn, dtype=np.int64).reshape(-1, 2)
    if model is None:
        raise BadParam("the run has no learned hardness model")
    keep = dataset.train_counts[planted_fn[:, 0]] > 0 if len(planted_fn) else np.zeros(0, dtype=bool)
    planted_fn = planted_fn[keep]
    if len(planted_fn) == 0:
        raise EmptyFnList("no planted false negatives to score")
    if resamples < 1:
        raise BadParam(f"resamples must be at least 1, got {resamples}")

    users, fn_items = planted_fn[:, 0], planted_fn[:, 1]
    reps = encoder.representations()
    rates = []
    for _ in range(resamples):
        items = np.asarray([rng.choice(dataset.train_positives(u)) for u in users], dtype=np.int64)
        if n_negatives > 1:
            others = sample_negative_batch(dataset, users, n_negatives - 1, rng)
        else:
            others = np.empty((len(users), 0), dtype=np.int64)
        negatives = np.column_stack([fn_items, others])
        batch = hardness_forward(model, users, items, negatives, encoder=encoder, reps=reps)
        rates.append(float(np.mean(batch.deltas[:, 0] < 0)))
    return math.fsum(rates) / len(rates)


@dataclass(frozen=True)
class ProfileRow:
    bin: int
    mean_p: float
    count: int
    uniform_p: float
    popularity_min: int
    popularity_max: int


def hardness_popularity_profile(
    model: HardnessModel,
    dataset: InteractionSet,
    bins: int,
    n_negatives: int,
    n_samples: int,
    rng: np.random.Generator,
    encoder: Optional[Encoder] = None,
) -> List[ProfileRow]:
    """Mean sampling probability p_j per item-popularity bin (bin 0 least popular)."""
    if bins < 2:
        raise BadParam(f"bins must be at least 2, got {bins}")
    if n_samples < 1 or len(dataset.train) == 0:
        raise BadParam("profile needs at least one sampled train pair")
    popularity = dataset.item_popularity
    order = np.lexsort((np.arange(dataset.n_items), popularity))
    bin_of_item = np.empty(dataset.n_items, dtype=np.int64)
    for index, members in enumerate(np.array_split(order, bins)):
        bin_of_item[members] = index

    picked = dataset.train[rng.integers(0, len(dataset.train), size=n_samples)]
    negatives = sample_negative_batch(dataset, picked[:, 0], n_negatives, rng)
    batch = hardness_forward(model, picked[:, 0], picked[:, 1], negatives, encoder=encoder)
    negative_bins = bin_of_item[negatives].ravel()
    sums = np.bincount(negative_bins, weights=batch.probs.ravel(), minlength=bins)
    counts = np.bincount(negative_bins, minlength=bins)

    rows = []
    for index in range(bins):
        members = popularity[bin_of_item == index]
        rows.append(ProfileRow(
            bin=index,
            mean_p=float(sums[index] / counts[index]) if counts[index] else 0.0,
            count=int(counts[index]),
            uniform_p=1.0 / n_negatives,
            popularity_min=int(members.min()) if len(members) else 0,
            popularity_max=int(members.max()) if len(members) else 0,
        ))
    return rows


def write_rows_csv(path, rows: Sequence[dict], fieldnames: Optional[Sequence[str]] = None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_per_user_csv(path, report: MetricReport) -> None:
    write_rows_csv(path, report.per_user, ["user", "hr", "recall", "ndcg"])


def write_profile_csv(path, rows: Sequence[ProfileRow], labels: Optional[Sequence[dict]] = None) -> None:
    """Profile rows; ``labels``, one dict per row, become leading columns (e.g. checkpoint, epoch)."""
    labels = list(labels) if labels is not None else [{} for _ in rows]
    if len(labels) != len(rows):
        raise BadParam(f"{len(labels)} labels for {len(rows)} profile rows")
    label_columns = list(labels[0]) if labels else []
    write_rows_csv(
        path,
        [{**label, **asdict(row)} for label, row in zip(labels, rows)],
        [*label_columns, *PROFILE_COLUMNS],
    )


def seed_summary(values) -> tuple:
    """Mean and standard error of a per-seed metric."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise EmptySample("no seeds to summarise")
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / math.sqrt(len(values)))
