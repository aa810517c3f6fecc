import json
import os
from dataclasses import replace

import allure
import numpy as np
import pytest
from src.dataio import InteractionSet
from src.encoder import EncoderKind
from src.errors import ConfigError, EmptySplitError, SkippedAdvStep
from src.evaluation import MetricReport
from src.numkit import seeded_stream
from src import trainer
from src.trainer import (
    Batch,
    HardnessStrategy,
    LossKind,
    TrainConfig,
    adv_step,
    adversarial_schedule,
    batch_loss,
    init_state,
    make_batches,
    min_step,
    run_adversarial_epoch,
    run_training,
    should_run_adversarial,
)
from test_helpers.helpers import run_and_log


def _one_batch(dataset, cfg, name="batch"):
    return next(iter(make_batches(dataset, cfg, seeded_stream(cfg.seed, f"{name}_shuffle"),
                                  seeded_stream(cfg.seed, f"{name}_negatives"))))


# Adversarial epochs follow the trigger arithmetic
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("T_adv=5, E_adv=3, max_epochs=30 fires adversarial epochs after epochs 5, 10 and 15 only.")
@allure.story('Schedule')
def test_adversarial_schedule():
    """T_adv=5, E_adv=3, max_epochs=30 fires adversarial epochs after epochs 5, 10 and 15 only."""
    cfg = TrainConfig(t_adv_interval=5, e_adv_max=3, max_epochs=30)
    schedule = run_and_log(adversarial_schedule, cfg, description="Compute the adversarial schedule")
    assert schedule == [5, 10, 15]
    assert not should_run_adversarial(20, 3, cfg)
    assert adversarial_schedule(replace(cfg, e_adv_max=0)) == []
    assert adversarial_schedule(replace(cfg, hardness_strategy=HardnessStrategy.RAND)) == []


# Configuration validation
@allure.severity(allure.severity_level.NORMAL)
@allure.description("Non-positive rates, zero patience and unknown strategies raise ConfigError.")
@allure.story('Configuration')
@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"patience": 0}, {"hardness_strategy": "sideways"},
                                    {"batch_size": 0}, {"e_adv_max": -1}, {"encoder": "transformer"}])
def test_train_config_validation(kwargs):
    """Non-positive rates, zero patience and unknown strategies raise ConfigError."""
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


# Batches cover every train pair once per epoch with fresh negatives
@allure.severity(allure.severity_level.NORMAL)
@allure.description("make_batches partitions the train pairs and draws N non-positive negatives per pair.")
@allure.story('Batches')
def test_make_batches_cover_train(toy_dataset, toy_config):
    """make_batches partitions the train pairs and draws N non-positive negatives per pair."""
    batches = list(make_batches(toy_dataset, toy_config, seeded_stream(1, "s"), seeded_stream(1, "n")))
    pairs = np.concatenate([np.column_stack([b.users, b.items]) for b in batches])
    assert len(pairs) == len(toy_dataset.train)
    assert {tuple(p) for p in pairs.tolist()} == {tuple(p) for p in toy_dataset.train.tolist()}
    assert all(b.negatives.shape == (len(b), toy_config.n_negatives) for b in batches)
    for b in batches:
        owners = np.broadcast_to(b.users[:, None], b.negatives.shape)
        assert not toy_dataset.is_train_positive(owners, b.negatives).any()


# The descent step never touches the hardness model
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("min_step changes the encoder and leaves every hardness byte unchanged.")
@allure.story('Phases')
def test_min_step_freezes_hardness(toy_dataset, toy_config):
    """min_step changes the encoder and leaves every hardness byte unchanged."""
    state = init_state(toy_dataset, toy_config)
    batch = _one_batch(toy_dataset, toy_config)
    hardness_before = state.hardness.param_bytes()
    encoder_before = state.encoder.param_bytes()
    report = min_step(state, batch, toy_config)
    with allure.step(f"Check phase exclusivity, batch loss: {report.loss:.6f}"):
        assert state.hardness.param_bytes() == hardness_before
        assert state.encoder.param_bytes() != encoder_before


# The adversarial step never touches the encoder
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("adv_step changes the hardness model and leaves every encoder byte unchanged.")
@allure.story('Phases')
def test_adv_step_freezes_encoder(toy_dataset, toy_config):
    """adv_step changes the hardness model and leaves every encoder byte unchanged."""
    state = init_state(toy_dataset, toy_config)
    batch = _one_batch(toy_dataset, toy_config)
    encoder_before = state.encoder.param_bytes()
    hardness_before = state.hardness.param_bytes()
    adv_step(state, batch, toy_config)
    assert state.encoder.param_bytes() == encoder_before
    assert state.hardness.param_bytes() != hardness_before


# A spent budget is a signal, not an error
@allure.severity(allure.severity_level.NORMAL)
@allure.description("adv_step raises SkippedAdvStep once e_adv reaches E_adv, and for strategies without a learned model.")
@allure.story('Phases')
def test_adv_step_budget(toy_dataset, toy_config):
    """adv_step raises SkippedAdvStep once e_adv reaches E_adv, and for strategies without a learned model."""
    state = init_state(toy_dataset, toy_config)
    batch = _one_batch(toy_dataset, toy_config)
    state.e_adv = toy_config.e_adv_max
    with pytest.raises(SkippedAdvStep):
        adv_step(state, batch, toy_config)
    rand_cfg = replace(toy_config, hardness_strategy=HardnessStrategy.RAND)
    with pytest.raises(SkippedAdvStep):
        adv_step(init_state(toy_dataset, rand_cfg), batch, rand_cfg)


# Small descent steps lower the batch loss
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("With lr=1e-4 one min_step does not increase the loss on the same batch in at least 95 of 100 seeds.")
@allure.story('Phases')
@pytest.mark.parametrize("loss", [LossKind.ADVINFONCE, LossKind.BPR])
def test_min_step_descends(toy_dataset, toy_config, loss):
    """With lr=1e-4 one min_step does not increase the loss on the same batch in at least 95 of 100 seeds."""
    descended = 0
    for seed in range(100):
        cfg = replace(toy_config, lr=1e-4, seed=seed, loss=loss, encoder=EncoderKind.MF)
        state = init_state(toy_dataset, cfg)
        batch = _one_batch(toy_dataset, cfg)
        before = batch_loss(state, batch, cfg)
        min_step(state, batch, cfg)
        descended += batch_loss(state, batch, cfg) <= before
    with allure.step(f"Check the share of descending trials, actual: {descended}/100"):
        assert descended >= 95


# Small adversarial steps raise the batch loss
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("With lr_adv=1e-5 one adv_step does not lower the loss on the same batch in at least 95 of 100 seeds.")
@allure.story('Phases')
def test_adv_step_ascends(toy_dataset, toy_config):
    """With lr_adv=1e-5 one adv_step does not lower the loss on the same batch in at least 95 of 100 seeds."""
    ascended = 0
    for seed in range(100):
        cfg = replace(toy_config, lr_adv=1e-5, seed=seed)
        state = init_state(toy_dataset, cfg)
        batch = _one_batch(toy_dataset, cfg)
        before = batch_loss(state, batch, cfg)
        adv_step(state, batch, cfg)
        ascended += batch_loss(state, batch, cfg) >= before
    with allure.step(f"Check the share of ascending trials, actual: {ascended}/100"):
        assert ascended >= 95


# Reverse descends exactly where Adv ascends on the first step
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("With the same seed the Reverse strategy's first hardness update is the negation of Adv's.")
@allure.story('Phases')
@pytest.mark.parametrize("hardness_kind", ["embed", "mlp"])
def test_reverse_negates_first_update(toy_dataset, toy_config, hardness_kind):
    """With the same seed the Reverse strategy's first hardness update is the negation of Adv's."""
    deltas = {}
    for strategy in (HardnessStrategy.ADV, HardnessStrategy.REVERSE):
        cfg = replace(toy_config, hardness_strategy=strategy, hardness_kind=hardness_kind)
        state = init_state(toy_dataset, cfg)
        batch = _one_batch(toy_dataset, cfg)
        before = {name: table.values.copy() for name, table in state.hardness.params.items()}
        adv_step(state, batch, cfg)
        deltas[strategy] = {name: state.hardness.params[name].values - before[name] for name in before}
    for name, adv_delta in deltas[HardnessStrategy.ADV].items():
        np.testing.assert_allclose(deltas[HardnessStrategy.REVERSE][name], -adv_delta, rtol=0, atol=1e-15)
    assert any(np.any(d != 0) for d in deltas[HardnessStrategy.ADV].values())


# A full adversarial epoch on a frozen encoder does not lower the loss
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("On a frozen encoder one adversarial epoch with lr_adv=1e-5 lowers mean batch loss by at most 1e-6, 5 seeds.")
@allure.story('Phases')
@pytest.mark.parametrize("seed", range(5))
def test_adversarial_epoch_ascent(toy_dataset, toy_config, seed):
    """On a frozen encoder one adversarial epoch with lr_adv=1e-5 lowers mean batch loss by at most 1e-6, 5 seeds."""
    cfg = replace(toy_config, lr_adv=1e-5, seed=seed, batch_size=len(toy_dataset.train))
    state = init_state(toy_dataset, cfg)
    for step in range(3):
        min_step(state, _one_batch(toy_dataset, cfg, f"warm{step}"), cfg)
    batches = list(make_batches(toy_dataset, cfg, seeded_stream(seed, "adv_s"), seeded_stream(seed, "adv_n")))
    before = np.mean([batch_loss(state, b, cfg) for b in batches])
    kl_before = run_adversarial_epoch(state, batches, cfg).kl_mean
    after = np.mean([batch_loss(state, b, cfg) for b in batches])
    kl_after = run_adversarial_epoch(state, batches, cfg).kl_mean
    with allure.step(f"Check loss before {before:.8f} and after {after:.8f}"):
        assert after >= before - 1e-6
    assert kl_after >= kl_before - 1e-6
    assert state.e_adv == 2


# The Rand strategy draws bounded hardness from its own stream
@allure.severity(allure.severity_level.NORMAL)
@allure.description("Rand hardness lies in [-0.5, 0.5] and two identically seeded states take identical steps.")
@allure.story('Strategies')
def test_rand_strategy_is_seeded(toy_dataset, toy_config, monkeypatch):
    """Rand hardness lies in [-0.5, 0.5] and two identically seeded states take identical steps."""
    cfg = replace(toy_config, hardness_strategy=HardnessStrategy.RAND)
    seen = []
    original = trainer._deltas

    def recording(state, batch, cfg_, reps):
        deltas, hardness_batch = original(state, batch, cfg_, reps)
        seen.append(deltas)
        return deltas, hardness_batch

    monkeypatch.setattr(trainer, "_deltas", recording)
    first, second = init_state(toy_dataset, cfg), init_state(toy_dataset, cfg)
    assert first.hardness is None
    batch = _one_batch(toy_dataset, cfg)
    min_step(first, batch, cfg)
    min_step(second, batch, cfg)
    assert first.encoder.param_bytes() == second.encoder.param_bytes()
    assert np.all(np.abs(seen[0]) <= 0.5) and np.any(seen[0] != 0)


# With no adversarial budget the run is plain InfoNCE
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("E_adv=0 with the Adv strategy reproduces an InfoNCE run with the same seed, parameter for parameter.")
@allure.story('Training loop')
def test_zero_budget_matches_infonce(toy_dataset, toy_config):
    """E_adv=0 with the Adv strategy reproduces an InfoNCE run with the same seed, parameter for parameter."""
    adv = run_training(toy_dataset, replace(toy_config, e_adv_max=0, max_epochs=3))
    plain = run_training(toy_dataset, replace(toy_config, e_adv_max=0, max_epochs=3, loss=LossKind.INFONCE))
    assert adv.adversarial_epochs == []
    assert adv.final_encoder.param_bytes() == plain.final_encoder.param_bytes()
    assert [r["recall@20"] for r in adv.history] == [r["recall@20"] for r in plain.history]
    assert [r["loss"] for r in adv.history] == [r["loss"] for r in plain.history]


# Constant validation metric stops at best epoch + patience
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("With eval_every=1 and a constant validation metric, training stops at the best epoch plus patience.")
@allure.story('Training loop')
def test_early_stop_on_constant_metric(toy_dataset, toy_config, monkeypatch):
    """With eval_every=1 and a constant validation metric, training stops at the best epoch plus patience."""
    constant = MetricReport(hr=0.5, recall=0.25, ndcg=0.3, k=20, n_users=1)
    monkeypatch.setattr(trainer, "evaluate", lambda *args, **kwargs: constant)
    cfg = replace(toy_config, patience=3, max_epochs=50, e_adv_max=1)
    result = run_training(toy_dataset, cfg)
    assert result.best_epoch == 1
    assert result.stopped_epoch == 1 + 3
    assert len(result.history) == 4
    recalls = [r["recall@20"] for r in result.history]
    assert recalls == sorted(recalls)


# A full run writes its artifacts and respects the adversarial budget
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("run_training writes metrics.jsonl, best.ckpt and final.ckpt with one record per evaluation.")
@allure.story('Training loop')
def test_run_training_artifacts(tmp_path, toy_synthetic, toy_config):
    """run_training writes metrics.jsonl, best.ckpt and final.ckpt with one record per evaluation."""
    cfg = replace(toy_config, max_epochs=6, eval_every=2)
    result = run_training(toy_synthetic.interactions, cfg, str(tmp_path), toy_synthetic.planted_fn)
    assert sorted(os.listdir(tmp_path)) == ["best.ckpt", "final.ckpt", "metrics.jsonl"]
    with open(tmp_path / "metrics.jsonl", encoding="utf-8") as handle:
        records = [json.loads(line) for line in handle]
    run_and_log(lambda: records, description="Metrics log")
    assert [r["epoch"] for r in records] == [2, 4, 6]
    assert result.adversarial_epochs == [2, 4]
    assert records[-1]["e_adv"] == 2
    expected_keys = {"epoch", "split", "hr@20", "recall@20", "ndcg@20", "loss", "kl_mean", "eps_proxy", "e_adv",
                     "fn_rate"}
    assert all(set(r) == expected_keys for r in records)
    assert all(0.0 <= r["fn_rate"] <= 1.0 for r in records)


# No validation split, no training
@allure.severity(allure.severity_level.NORMAL)
@allure.description("run_training on a dataset without validation pairs raises EmptySplitError before any epoch or artifact.")
@allure.story('Training loop')
def test_run_training_requires_valid(tmp_path, toy_dataset, toy_config):
    """run_training on a dataset without validation pairs raises EmptySplitError before any epoch or artifact."""
    no_valid = InteractionSet(toy_dataset.n_users, toy_dataset.n_items, train=toy_dataset.train, test=toy_dataset.test)
    with pytest.raises(EmptySplitError, match="valid"):
        run_training(no_valid, toy_config, str(tmp_path))
    assert os.listdir(tmp_path) == []


# Same seed, same bytes
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("Two runs with identical seed and configuration write byte-identical metrics and checkpoints.")
@allure.story('Training loop')
def test_training_is_deterministic(tmp_path, toy_dataset, toy_config):
    """Two runs with identical seed and configuration write byte-identical metrics and checkpoints."""
    cfg = replace(toy_config, max_epochs=4)
    for name in ("first", "second"):
        os.makedirs(tmp_path / name)
        run_training(toy_dataset, cfg, str(tmp_path / name))
    for artifact in ("metrics.jsonl", "best.ckpt", "final.ckpt"):
        with allure.step(f"Compare {artifact}"):
            assert (tmp_path / "first" / artifact).read_bytes() == (tmp_path / "second" / artifact).read_bytes()


# A batch is a plain value
@allure.severity(allure.severity_level.MINOR)
@allure.description("Batch length is the number of (user, item) pairs.")
@allure.story('Batches')
def test_batch_length():
    """Batch length is the number of (user, item) pairs."""
    batch = Batch(np.array([0, 1]), np.array([2, 3]), np.zeros((2, 4), dtype=int))
    assert len(batch) == 2
