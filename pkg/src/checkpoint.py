"""Checkpoint files.

Layout::

    ADVNCE-CKPT 1\\n
    <one JSON line: metadata, sorted keys>\\n
    <each array listed in metadata["arrays"], in .npy serialisation>

The file carries no timestamps, so identical parameters give identical bytes.
LightGCN adjacency is not stored; it is rebuilt from the dataset's train split.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.dataio import InteractionSet
from src.encoder import Encoder, EncoderKind
from src.errors import IncompatibleCheckpoint
from src.loss import HardnessModel
from src.numkit import EmbeddingTable, NormAdjacency

logger = logging.getLogger(__name__)

MAGIC = b"ADVNCE-CKPT 1\n"
FORMAT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    encoder: Encoder
    hardness: Optional[HardnessModel]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, encoder: Encoder, hardness: Optional[HardnessModel], dataset: InteractionSet, extra=None):
    arrays = {"encoder.user": encoder.user_table.values, "encoder.item": encoder.item_table.values}
    if hardness is not None:
        for name in sorted(hardness.params):
            arrays[f"hardness.{name}"] = hardness.params[name].values
    meta = {
        "version": FORMAT_VERSION,
        "kind": encoder.kind.value,
        "n_users": encoder.n_users,
        "n_items": encoder.n_items,
        "dim": encoder.dim,
        "tau": encoder.tau,
        "layers": encoder.layers,
        "train_pairs": int(len(dataset.train)),
        "hardness_kind": hardness.kind.value if hardness is not None else None,
        "arrays": list(arrays),
        "extra": extra or {},
    }
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
        for name in meta["arrays"]:
            np.lib.format.write_array(handle, np.ascontiguousarray(arrays[name]), allow_pickle=False)
    logger.debug("Saved checkpoint %s", path)


def load_checkpoint(path, dataset: InteractionSet) -> Checkpoint:
    with open(path, "rb") as handle:
        if handle.readline() != MAGIC:
            raise IncompatibleCheckpoint(f"{path} is not a checkpoint file")
        meta = json.loads(handle.readline().decode("utf-8"))
        arrays = {name: np.lib.format.read_array(handle, allow_pickle=False) for name in meta["arrays"]}

    if meta.get("version") != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {meta.get('version')}")
    expected = {"n_users": dataset.n_users, "n_items": dataset.n_items, "train_pairs": int(len(dataset.train))}
    for key, value in expected.items():
        if meta[key] != value:
            raise IncompatibleCheckpoint(f"checkpoint {key}={meta[key]} but dataset has {value}")

    kind = EncoderKind(meta["kind"])
    adj = NormAdjacency.bipartite(dataset.n_users, dataset.n_items, dataset.train) if kind is EncoderKind.LIGHTGCN else None
    encoder = Encoder(
        kind,
        EmbeddingTable(arrays["encoder.user"]),
        EmbeddingTable(arrays["encoder.item"]),
        meta["tau"],
        meta["layers"],
        adj,
    )
    hardness = None
    if meta["hardness_kind"] is not None:
        prefix = "hardness."
        params = {name[len(prefix):]: EmbeddingTable(value) for name, value in arrays.items() if name.startswith(prefix)}
        hardness = HardnessModel(meta["hardness_kind"], params)
    return Checkpoint(encoder, hardness, meta)
