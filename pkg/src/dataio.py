"""Interaction ingestion, id remapping, negative sampling and dataset construction.

Files are UTF-8 TSV, one ``user<TAB>item`` pair per line, ``#`` comments ignored.
Raw ids are remapped to dense 0-based ranges in first-seen order over
train, valid and test (in that order).
"""
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from src.errors import BadParam, DegenerateSpec, EmptySplitError, IdOutOfRange, NoNegativesError, ParseError
from src.numkit import seeded_stream

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
TRAIN_VALID_RATIO = (6, 1)


def _as_pairs(pairs) -> np.ndarray:
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class InteractionSet:
    n_users: int
    n_items: int
    train: np.ndarray
    valid: np.ndarray = None
    test: np.ndarray = None
    user_ids: np.ndarray = None
    item_ids: np.ndarray = None
    item_popularity: np.ndarray = field(init=False, repr=False)
    _train_keys: np.ndarray = field(init=False, repr=False)
    _train_indptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        for name in SPLITS:
            value = getattr(self, name)
            set_(self, name, _as_pairs(value if value is not None else np.zeros((0, 2))))
        set_(self, "user_ids", np.arange(self.n_users) if self.user_ids is None else np.asarray(self.user_ids))
        set_(self, "item_ids", np.arange(self.n_items) if self.item_ids is None else np.asarray(self.item_ids))

        for name in SPLITS:
            pairs = getattr(self, name)
            if len(pairs) == 0:
                continue
            if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= self.n_users:
                raise IdOutOfRange(f"{name}: user id outside [0, {self.n_users})")
            if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= self.n_items:
                raise IdOutOfRange(f"{name}: item id outside [0, {self.n_items})")
            keys = pairs[:, 0] * self.n_items + pairs[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise BadParam(f"{name}: duplicate (user, item) pair")

        keys = np.sort(self.train[:, 0] * self.n_items + self.train[:, 1])
        set_(self, "_train_keys", keys)
        set_(self, "_train_indptr", np.searchsorted(keys // self.n_items, np.arange(self.n_users + 1)))
        set_(self, "item_popularity", np.bincount(self.train[:, 1], minlength=self.n_items))

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise BadParam(f"unknown split {name!r}")
        return getattr(self, name)

    def train_positives(self, user: int) -> np.ndarray:
        """Sorted train items of one user."""
        lo, hi = self._train_indptr[user], self._train_indptr[user + 1]
        return self._train_keys[lo:hi] % self.n_items

    @property
    def train_counts(self) -> np.ndarray:
        return np.diff(self._train_indptr)

    def positives(self, split: str = "train") -> dict:
        """user -> sorted item array, for users with at least one pair in ``split``."""
        pairs = self.split(split)
        if len(pairs) == 0:
            return {}
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        ordered = pairs[order]
        users, starts = np.unique(ordered[:, 0], return_index=True)
        return {int(u): items for u, items in zip(users, np.split(ordered[:, 1], starts[1:]))}

    def is_train_positive(self, users, items) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if len(self._train_keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self._train_keys, keys), len(self._train_keys) - 1)
        return self._train_keys[pos] == keys

    def remap_pairs(self, raw_pairs, what: str = "pairs") -> np.ndarray:
        """Translate raw-id pairs into this set's dense ids."""
        user_index = {int(raw): dense for dense, raw in enumerate(self.user_ids)}
        item_index = {int(raw): dense for dense, raw in enumerate(self.item_ids)}
        out = []
        for raw_u, raw_i in _as_pairs(raw_pairs):
            if int(raw_u) not in user_index or int(raw_i) not in item_index:
                raise IdOutOfRange(f"{what}: ({raw_u}, {raw_i}) not present in the dataset")
            out.append((user_index[int(raw_u)], item_index[int(raw_i)]))
        return _as_pairs(out)

    def remap_items(self, raw_items) -> np.ndarray:
        item_index = {int(raw): dense for dense, raw in enumerate(self.item_ids)}
        missing = [int(i) for i in raw_items if int(i) not in item_index]
        if missing:
            raise IdOutOfRange(f"items not present in the dataset: {missing[:5]}")
        return np.asarray([item_index[int(i)] for i in raw_items], dtype=np.int64)

    def summary(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            **{f"{name}_pairs": int(len(self.split(name))) for name in SPLITS},
        }


@dataclass(frozen=True)
class NegativeSample:
    user: int
    item: Optional[int]
    negatives: np.ndarray


def read_pairs(path) -> list:
    """Raw (user, item) pairs of one TSV file; duplicates are a parse error."""
    pairs = []
    seen = set()
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            text = line.rstrip("\r\n")
            if not text.strip() or text.lstrip().startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) != 2:
                raise ParseError(path, line_no, "expected 'user<TAB>item'")
            try:
                user, item = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, line_no, "ids must be integers")
            if user < 0 or item < 0:
                raise ParseError(path, line_no, "ids must be non-negative")
            if (user, item) in seen:
                raise ParseError(path, line_no, f"duplicate pair ({user}, {item})")
            seen.add((user, item))
            pairs.append((user, item))
    return pairs


def write_pairs(path, pairs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for user, item in _as_pairs(pairs):
            handle.write(f"{user}\t{item}\n")


def load_interactions(train_path, valid_path=None, test_path=None) -> InteractionSet:
    raw = {"train": read_pairs(train_path)}
    raw["valid"] = read_pairs(valid_path) if valid_path else []
    raw["test"] = read_pairs(test_path) if test_path else []
    if not raw["train"]:
        raise EmptySplitError(f"train split is empty: {train_path}")

    user_index, item_index = {}, {}
    dense = {}
    for name in SPLITS:
        rows = []
        for user, item in raw[name]:
            u = user_index.setdefault(user, len(user_index))
            i = item_index.setdefault(item, len(item_index))
            rows.append((u, i))
        dense[name] = _as_pairs(rows)

    dataset = InteractionSet(
        n_users=len(user_index),
        n_items=len(item_index),
        train=dense["train"],
        valid=dense["valid"],
        test=dense["test"],
        user_ids=np.fromiter(user_index, dtype=np.int64, count=len(user_index)),
        item_ids=np.fromiter(item_index, dtype=np.int64, count=len(item_index)),
    )
    logger.info("Loaded interactions: %s", dataset.summary())
    return dataset


def write_interactions(dataset: InteractionSet, directory) -> dict:
    """Write the three splits in raw ids; returns name -> path."""
    os.makedirs(directory, exist_ok=True)
    paths = {}
    for name in SPLITS:
        pairs = dataset.split(name)
        raw = np.column_stack([dataset.user_ids[pairs[:, 0]], dataset.item_ids[pairs[:, 1]]])
        paths[name] = os.path.join(directory, f"{name}.tsv")
        write_pairs(paths[name], raw)
    return paths


def load_planted_fn(path, dataset: InteractionSet) -> np.ndarray:
    return dataset.remap_pairs(read_pairs(path), what=str(path))


def read_item_ids(path) -> list:
    """One raw item id per line, e.g. a restricted candidate set."""
    items = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            try:
                items.append(int(text))
            except ValueError:
                raise ParseError(path, line_no, "item id must be an integer")
    return items


def sample_negative_batch(dataset: InteractionSet, users, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniform draws with replacement from each user's non-train items, shape (len(users), n)."""
    if n < 1:
        raise BadParam(f"negative count must be positive, got {n}")
    users = np.asarray(users, dtype=np.int64)
    if len(users) and (users.min() < 0 or users.max() >= dataset.n_users):
        raise IdOutOfRange(f"user id outside [0, {dataset.n_users})")
    full = dataset.train_counts[users] >= dataset.n_items
    if np.any(full):
        raise NoNegativesError(f"user {int(users[full][0])} has interacted with every item")

    draws = rng.integers(0, dataset.n_items, size=(len(users), n))
    owners = np.broadcast_to(users[:, None], draws.shape)
    rejected = dataset.is_train_positive(owners, draws)
    while rejected.any():
        draws[rejected] = rng.integers(0, dataset.n_items, size=int(rejected.sum()))
        rejected[rejected] = dataset.is_train_positive(owners[rejected], draws[rejected])
    return draws


def sample_negatives(
    dataset: InteractionSet, user: int, n: int, rng: np.random.Generator, item: Optional[int] = None
) -> NegativeSample:
    negatives = sample_negative_batch(dataset, [user], n, rng)[0]
    return NegativeSample(user=int(user), item=item, negatives=negatives)


def gamma_quotas(gamma: float, groups: int = 50, n0: int = 100) -> np.ndarray:
    """round(n0 * gamma^(-(i-1)/(groups-1))) for groups i = 1..groups, rounding half up."""
    if not gamma > 0:
        raise BadParam(f"gamma must be positive, got {gamma}")
    if groups < 2:
        raise BadParam(f"need at least two popularity groups, got {groups}")
    if n0 < 1:
        raise BadParam(f"n0 must be at least 1, got {n0}")
    exponents = -np.arange(groups) / (groups - 1)
    return np.floor(n0 * gamma ** exponents + 0.5).astype(np.int64)


def popularity_groups(popularity, groups: int) -> list:
    """Items by descending popularity (ties by ascending id), cut into ``groups`` near-equal groups."""
    popularity = np.asarray(popularity)
    order = np.lexsort((np.arange(len(popularity)), -popularity))
    return np.array_split(order, groups)


def _train_valid_split(pairs: np.ndarray, rng: np.random.Generator):
    shuffled = rng.permutation(len(pairs))
    train_share, valid_share = TRAIN_VALID_RATIO
    total = train_share + valid_share
    n_train = (2 * train_share * len(pairs) + total) // (2 * total)
    train_idx = np.sort(shuffled[:n_train])
    valid_idx = np.sort(shuffled[n_train:])
    return pairs[train_idx], pairs[valid_idx]


@dataclass(frozen=True)
class GammaSplitReport:
    gamma: float
    n0: int
    groups: int
    quotas: list
    drawn: list
    sizes: dict

    def as_dict(self) -> dict:
        return asdict(self)


def gamma_split(
    pairs, n_users: int, n_items: int, gamma: float, n0: int, rng: np.random.Generator, groups: int = 50
):
    """Long-tail test split: popularity group i receives min(quota_i, available) test pairs.

    The remainder is shuffled and divided 6:1 into train and valid.
    Returns the new InteractionSet and a GammaSplitReport.
    """
    quotas = gamma_quotas(gamma, groups, n0)
    pairs = _as_pairs(pairs)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    popularity = np.bincount(pairs[:, 1], minlength=n_items)
    group_of_item = np.empty(n_items, dtype=np.int64)
    for index, items in enumerate(popularity_groups(popularity, groups)):
        group_of_item[items] = index

    pair_groups = group_of_item[pairs[:, 1]]
    in_test = np.zeros(len(pairs), dtype=bool)
    drawn = []
    for index in range(groups):
        members = np.flatnonzero(pair_groups == index)
        take = int(min(quotas[index], len(members)))
        if take:
            in_test[rng.choice(members, size=take, replace=False)] = True
        drawn.append(take)

    train, valid = _train_valid_split(pairs[~in_test], rng)
    if len(train) == 0:
        raise EmptySplitError("gamma split left no train pairs")
    dataset = InteractionSet(n_users, n_items, train=train, valid=valid, test=pairs[in_test])
    report = GammaSplitReport(
        gamma=float(gamma),
        n0=int(n0),
        groups=int(groups),
        quotas=[int(q) for q in quotas],
        drawn=drawn,
        sizes={name: int(len(dataset.split(name))) for name in SPLITS},
    )
    logger.info("Gamma split (gamma=%s, n0=%s): %s", gamma, n0, report.sizes)
    return dataset, report


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 100
    latent_dim: int = 8
    exposure_bias_strength: float = 1.0
    train_fraction: float = 0.5
    fn_plant_rate: float = 0.2
    seed: int = 0
    relevance_rate: float = 0.05
    test_fraction: float = 0.1
    zipf_exponent: float = 1.0

    def __post_init__(self):
        for name in ("n_users", "n_items", "latent_dim"):
            if getattr(self, name) < 1:
                raise BadParam(f"{name} must be positive")
        for name in ("train_fraction", "relevance_rate", "test_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise BadParam(f"{name} must lie in (0, 1)")
        if not 0.0 <= self.fn_plant_rate < 1.0:
            raise BadParam("fn_plant_rate must lie in [0, 1)")
        if self.exposure_bias_strength < 0 or self.zipf_exponent < 0:
            raise BadParam("exposure_bias_strength and zipf_exponent must be non-negative")
        if self.seed < 0:
            raise BadParam("seed must be non-negative")


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    interactions: InteractionSet
    planted_fn: np.ndarray
    item_weights: np.ndarray
    spec: SyntheticSpec


def exposure_probabilities(spec: SyntheticSpec, item_weights) -> np.ndarray:
    """Per-item exposure probability, proportional to weight^bias with mean train_fraction (capped at 1)."""
    tilted = np.asarray(item_weights, dtype=np.float64) ** spec.exposure_bias_strength
    return np.minimum(1.0, spec.train_fraction * tilted / tilted.mean())


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Latent-factor relevance observed through popularity-biased exposure.

    Relevant pairs are each user's top ``relevance_rate`` items by latent affinity.
    A ``test_fraction`` hold-out of them, drawn independently of exposure, forms the
    unbiased test split. The rest are exposed per item popularity; exposed pairs go
    6:1 to train/valid, and a ``fn_plant_rate`` share of the unexposed ones is
    recorded as planted false negatives and added to test.
    """
    rng = seeded_stream(spec.seed, "synthetic")
    user_factors = rng.normal(size=(spec.n_users, spec.latent_dim))
    item_factors = rng.normal(size=(spec.n_items, spec.latent_dim))
    affinity = user_factors @ item_factors.T

    per_user = max(1, math.ceil(spec.relevance_rate * spec.n_items))
    top = np.argsort(-affinity, axis=1, kind="stable")[:, :per_user]
    relevant = np.column_stack([np.repeat(np.arange(spec.n_users), per_user), top.ravel()])
    relevant = relevant[np.lexsort((relevant[:, 1], relevant[:, 0]))]

    ranks = rng.permutation(spec.n_items) + 1
    item_weights = ranks.astype(np.float64) ** -spec.zipf_exponent
    exposure = exposure_probabilities(spec, item_weights)

    held_out = rng.random(len(relevant)) < spec.test_fraction
    exposed = rng.random(len(relevant)) < exposure[relevant[:, 1]]
    observed = relevant[~held_out & exposed]
    unexposed = relevant[~held_out & ~exposed]
    planted = unexposed[rng.random(len(unexposed)) < spec.fn_plant_rate]

    train, valid = _train_valid_split(observed, rng)
    test = np.concatenate([relevant[held_out], planted])
    test = test[np.lexsort((test[:, 1], test[:, 0]))]
    if len(train) == 0 or len(test) == 0:
        raise DegenerateSpec(f"no train or test pairs for spec {spec}")

    interactions = InteractionSet(spec.n_users, spec.n_items, train=train, valid=valid, test=test)
    logger.info("Generated synthetic dataset: %s, planted_fn=%d", interactions.summary(), len(planted))
    return SyntheticDataset(interactions, planted, item_weights, spec)


def write_synthetic(dataset: SyntheticDataset, directory) -> dict:
    paths = write_interactions(dataset.interactions, directory)
    paths["planted_fn"] = os.path.join(directory, "planted_fn.tsv")
    write_pairs(paths["planted_fn"], dataset.planted_fn)
    return paths
