"""Command-line entry point.

    python -m src.cli train --data DIR --out RUN_DIR [--config FILE] [--<key> VALUE ...]
    python -m src.cli evaluate --checkpoint RUN_DIR/best.ckpt --data DIR [--split test]
    python -m src.cli generate --out DIR [--gamma 10 --n0 100]
    python -m src.cli diagnose profile|fnrate|alignuniform --checkpoint CKPT --data DIR --out FILE.csv

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from environment import Environment, load_env_file
from src.checkpoint import load_checkpoint
from src.dataio import (
    InteractionSet,
    SyntheticSpec,
    gamma_split,
    generate_synthetic,
    load_interactions,
    load_planted_fn,
    read_item_ids,
    write_interactions,
    write_pairs,
    write_synthetic,
)
from src.errors import USAGE_EXIT_CODE, ConfigError, EmptyFnList, EngineError
from src.evaluation import (
    alignment_uniformity,
    evaluate,
    fn_identification_rate,
    hardness_popularity_profile,
    write_per_user_csv,
    write_profile_csv,
    write_rows_csv,
)
from src.numkit import seeded_stream
from src.trainer import TrainConfig, run_training

logger = logging.getLogger(__name__)

TRAIN_DEFAULTS = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
SYNTHETIC_DEFAULTS = {f.name: f.default for f in fields(SyntheticSpec) if f.name != "seed"}
RUN_DEFAULTS = {"log_level": "INFO", "out_dir": "runs/latest", "split": "valid"}
GAMMA_DEFAULTS = {"gamma": 0.0, "n0": 100, "groups": 50}
DIAGNOSE_DEFAULTS = {"bins": 10, "samples": 2048, "resamples": 1}
INPUT_DEFAULTS = {"train": "", "valid": "", "test": "", "planted_fn": ""}
ALL_DEFAULTS = {
    **TRAIN_DEFAULTS, **SYNTHETIC_DEFAULTS, **RUN_DEFAULTS, **GAMMA_DEFAULTS, **DIAGNOSE_DEFAULTS, **INPUT_DEFAULTS,
}

SPLIT_FILES = {"train": "train.tsv", "valid": "valid.tsv", "test": "test.tsv"}
PLANTED_FN_FILE = "planted_fn.tsv"
DIAGNOSTICS = ("profile", "fnrate", "alignuniform")


def _add_key_flags(parser, keys):
    """One long flag per configuration key, under both dashed and underscored spellings."""
    for key in keys:
        names = sorted({f"--{key}", f"--{key.replace('_', '-')}"})
        parser.add_argument(*names, dest=key, default=None, metavar="VALUE")


def _add_data_flags(parser):
    parser.add_argument("--data", help="directory holding train.tsv, valid.tsv, test.tsv")
    parser.add_argument("--train", help="train split file (overrides --data)")
    parser.add_argument("--valid", help="validation split file (overrides --data)")
    parser.add_argument("--test", help="test split file (overrides --data)")


def build_parser():
    parser = argparse.ArgumentParser(prog="advnce", description="Adversarial contrastive collaborative filtering.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--log-level", "--log_level", dest="log_level", default=None)

    train = sub.add_parser("train", parents=[common], help="train an encoder")
    _add_data_flags(train)
    train.add_argument("--out", dest="out_dir", default=None, help="run directory")
    train.add_argument("--planted-fn", dest="planted_fn", help="planted false negatives (default: DATA/planted_fn.tsv)")
    _add_key_flags(train, TRAIN_DEFAULTS)
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = sub.add_parser("evaluate", parents=[common], help="score a checkpoint")
    _add_data_flags(evaluate_cmd)
    evaluate_cmd.add_argument("--checkpoint", required=True)
    evaluate_cmd.add_argument("--candidates", help="file of raw item ids to restrict ranking to")
    evaluate_cmd.add_argument("--per-user", dest="per_user", help="optional per-user metrics CSV")
    _add_key_flags(evaluate_cmd, ("split", "k_eval", "workers"))
    evaluate_cmd.set_defaults(handler=cmd_evaluate)

    generate = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    generate.add_argument("--out", dest="out_dir", default=None, help="dataset directory")
    generate.add_argument("--source", help="re-split this interaction file instead of the synthetic observations")
    _add_key_flags(generate, (*SYNTHETIC_DEFAULTS, "seed", *GAMMA_DEFAULTS))
    generate.set_defaults(handler=cmd_generate)

    diagnose = sub.add_parser("diagnose", parents=[common], help="hardness and representation diagnostics")
    diagnose.add_argument("which", choices=DIAGNOSTICS)
    _add_data_flags(diagnose)
    diagnose.add_argument("--checkpoint", action="append", required=True, help="repeat for a trajectory")
    diagnose.add_argument("--planted-fn", dest="planted_fn")
    diagnose.add_argument("--out", dest="out_csv", required=True, help="CSV file to write")
    _add_key_flags(diagnose, ("seed", "n_negatives", "split", *DIAGNOSE_DEFAULTS))
    diagnose.set_defaults(handler=cmd_diagnose)
    return parser


def _resolve(args):
    overrides = {key: getattr(args, key) for key in ALL_DEFAULTS if hasattr(args, key)}
    env = Environment(ALL_DEFAULTS, config_path=args.config, overrides=overrides)
    _configure_logging(env.get("log_level"))
    return env


def _configure_logging(level):
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level: {level}")
    logging.basicConfig(
        level=numeric,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _split_paths(args, env):
    paths = {}
    for name, filename in SPLIT_FILES.items():
        explicit = env.get(name)
        if explicit:
            paths[name] = explicit
        elif args.data and os.path.isfile(os.path.join(args.data, filename)):
            paths[name] = os.path.join(args.data, filename)
    if "train" not in paths:
        where = os.path.join(args.data, SPLIT_FILES["train"]) if args.data else "--train"
        raise ConfigError(f"train file not found: {where}")
    for path in paths.values():
        if not os.path.isfile(path):
            raise ConfigError(f"input file not found: {path}")
    return paths


def _load_dataset(args, env) -> InteractionSet:
    paths = _split_paths(args, env)
    return load_interactions(paths["train"], paths.get("valid"), paths.get("test"))


def _planted_fn_path(args, env):
    explicit = env.get("planted_fn")
    if explicit:
        if not os.path.isfile(explicit):
            raise ConfigError(f"planted false-negative file not found: {explicit}")
        return explicit
    if args.data and os.path.isfile(os.path.join(args.data, PLANTED_FN_FILE)):
        return os.path.join(args.data, PLANTED_FN_FILE)
    return None


def cmd_train(args) -> int:
    env = _resolve(args)
    cfg = TrainConfig(**env.subset(TRAIN_DEFAULTS))
    paths = _split_paths(args, env)
    dataset = load_interactions(paths["train"], paths.get("valid"), paths.get("test"))
    planted_path = _planted_fn_path(args, env)
    planted = load_planted_fn(planted_path, dataset) if planted_path else None

    out_dir = env.get("out_dir")
    os.makedirs(out_dir, exist_ok=True)
    inputs = {name: os.path.abspath(paths[name]) if name in paths else "" for name in SPLIT_FILES}
    inputs["planted_fn"] = os.path.abspath(planted_path) if planted_path else ""
    env.write_snapshot(
        os.path.join(out_dir, "config.resolved"),
        (*TRAIN_DEFAULTS, "log_level", "out_dir", *INPUT_DEFAULTS),
        resolved=inputs,
    )
    result = run_training(dataset, cfg, out_dir, planted)
    logger.info(
        "Finished at epoch %d; best epoch %d; artifacts in %s", result.stopped_epoch, result.best_epoch, out_dir
    )
    return 0


def cmd_evaluate(args) -> int:
    env = _resolve(args)
    dataset = _load_dataset(args, env)
    checkpoint = load_checkpoint(args.checkpoint, dataset)
    candidates = dataset.remap_items(read_item_ids(args.candidates)) if args.candidates else None
    split = env.get("split")
    report = evaluate(checkpoint.encoder, dataset, split, env.get("k_eval"), env.get("workers"), candidates)
    if args.per_user:
        write_per_user_csv(args.per_user, report)
    record = {"split": split, "epoch": checkpoint.meta.get("extra", {}).get("epoch"),
              "n_users": report.n_users, **report.as_record()}
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    env = _resolve(args)
    spec = SyntheticSpec(seed=env.get("seed"), **env.subset(SYNTHETIC_DEFAULTS))
    out_dir = env.get("out_dir")
    synthetic = generate_synthetic(spec)
    manifest = {"spec": asdict(spec), "planted_fn": int(len(synthetic.planted_fn))}

    gamma = env.get("gamma")
    if gamma > 0:
        if args.source:
            source = load_interactions(args.source)
            pairs, n_users, n_items = source.train, source.n_users, source.n_items
            planted = np.zeros((0, 2), dtype=np.int64)
        else:
            source = synthetic.interactions
            pairs = _concat_pairs(source.train, source.valid)
            n_users, n_items = source.n_users, source.n_items
            planted = synthetic.planted_fn
        rng = seeded_stream(spec.seed, "gamma_split")
        dataset, report = gamma_split(pairs, n_users, n_items, gamma, env.get("n0"), rng, env.get("groups"))
        # planted pairs lie outside the pool; test always holds them
        test = _concat_pairs(dataset.test, planted)
        test = test[np.lexsort((test[:, 1], test[:, 0]))]
        dataset = InteractionSet(
            dataset.n_users, dataset.n_items, dataset.train, dataset.valid, test,
            user_ids=source.user_ids, item_ids=source.item_ids,
        )
        write_interactions(dataset, out_dir)
        write_pairs(os.path.join(out_dir, PLANTED_FN_FILE), planted)
        manifest["planted_fn"] = int(len(planted))
        manifest["gamma_split"] = report.as_dict()
        manifest["summary"] = dataset.summary()
    else:
        write_synthetic(synthetic, out_dir)
        manifest["summary"] = synthetic.interactions.summary()

    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    env.write_snapshot(os.path.join(out_dir, "config.resolved"), (*SYNTHETIC_DEFAULTS, "seed", *GAMMA_DEFAULTS))
    logger.info("Wrote dataset to %s: %s", out_dir, manifest["summary"])
    return 0


def _concat_pairs(*parts):
    return np.concatenate([np.asarray(p).reshape(-1, 2) for p in parts])


def cmd_diagnose(args) -> int:
    env = _resolve(args)
    dataset = _load_dataset(args, env)
    seed, n_negatives = env.get("seed"), env.get("n_negatives")
    planted = None
    if args.which == "fnrate":
        planted_path = _planted_fn_path(args, env)
        planted = load_planted_fn(planted_path, dataset) if planted_path else None
        if planted is None or len(planted) == 0:
            raise EmptyFnList("fnrate needs planted false negatives; this dataset has none (use a synthetic dataset)")

    rows, profile_rows = [], []
    for path in args.checkpoint:
        checkpoint = load_checkpoint(path, dataset)
        rng = seeded_stream(seed, "diagnose")
        base = {"checkpoint": path, "epoch": checkpoint.meta.get("extra", {}).get("epoch")}
        if args.which == "profile":
            if checkpoint.hardness is None:
                raise ConfigError(f"{path} has no hardness model to profile")
            profile = hardness_popularity_profile(
                checkpoint.hardness, dataset, env.get("bins"), n_negatives, env.get("samples"), rng,
                encoder=checkpoint.encoder,
            )
            profile_rows.extend(profile)
            rows.extend(base for _ in profile)
        elif args.which == "fnrate":
            rate = fn_identification_rate(
                checkpoint.hardness, planted, checkpoint.encoder, dataset, n_negatives, rng, env.get("resamples")
            )
            rows.append({**base, "fn_rate": rate})
        else:
            pairs = dataset.split(env.get("split"))
            if len(pairs) > env.get("samples"):
                pairs = pairs[rng.choice(len(pairs), size=env.get("samples"), replace=False)]
            align, uniform = alignment_uniformity(checkpoint.encoder, pairs)
            rows.append({**base, "align": align, "uniform": uniform})

    if args.which == "profile":
        write_profile_csv(args.out_csv, profile_rows, labels=rows)
    else:
        write_rows_csv(args.out_csv, rows)
    logger.info("Wrote %d %s rows to %s", len(rows), args.which, args.out_csv)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    load_env_file()
    try:
        return args.handler(args)
    except EngineError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
