import allure
import numpy as np
import pytest
from src.checkpoint import load_checkpoint, save_checkpoint
from src.dataio import InteractionSet
from src.encoder import Encoder, EncoderKind
from src.errors import DimMismatch, IdOutOfRange, IncompatibleCheckpoint
from src.loss import HardnessModel
from src.numkit import EmbeddingTable, NormAdjacency, cosine_score, propagate, seeded_stream
from test_helpers.helpers import assert_gradient_close, central_difference, run_and_log

SMALL = InteractionSet(3, 4, train=[(0, 0), (0, 1), (1, 1), (1, 2), (2, 3)], valid=[(2, 0)], test=[(0, 3)])


def _rebuilt(encoder, user_values, item_values):
    return Encoder(encoder.kind, EmbeddingTable(user_values), EmbeddingTable(item_values),
                   encoder.tau, encoder.layers, encoder.adj)


# MF scores are cosines of the raw table rows
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("MF representations are the tables themselves and scores are cosine / tau of their rows.")
@allure.story('Encoder')
def test_mf_scores_are_table_cosines():
    """MF representations are the tables themselves and scores are cosine / tau of their rows."""
    encoder = Encoder.build(EncoderKind.MF, SMALL, 5, 0.2, 0, seeded_stream(1, "init"))
    scores = run_and_log(encoder.score, 1, [0, 2, 3], description="Score user 1 against three items")
    for item, score in zip([0, 2, 3], scores):
        expected = cosine_score(encoder.user_table.values[1], encoder.item_table.values[item], 0.2)
        assert score == pytest.approx(expected, abs=1e-12)


# LightGCN propagates over the train graph only
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("LightGCN representations are the layer mean over an adjacency built from train pairs only.")
@allure.story('Encoder')
def test_lightgcn_uses_train_graph():
    """LightGCN representations are the layer mean over an adjacency built from train pairs only."""
    encoder = Encoder.build(EncoderKind.LIGHTGCN, SMALL, 3, 0.5, 2, seeded_stream(2, "init"))
    edges = {(r, c) for r, c, _ in encoder.adj.edges}
    with allure.step("Valid pair (2, 0) is not an edge; train pair (2, 3) is"):
        assert (2, 3 + 0) not in edges
        assert (2, 3 + 3) in edges
    stacked = np.vstack([encoder.user_table.values, encoder.item_table.values])
    expected = propagate(stacked, NormAdjacency.bipartite(3, 4, SMALL.train), 2)
    users, items = encoder.representations()
    np.testing.assert_allclose(users, expected[:3])
    np.testing.assert_allclose(items, expected[3:])


# Zero propagation layers reduce LightGCN to MF
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("On identical tables, MF and LightGCN with layers=0 give bit-identical scores and row gradients.")
@allure.story('Encoder')
def test_lightgcn_zero_layers_equals_mf():
    """On identical tables, MF and LightGCN with layers=0 give bit-identical scores and row gradients."""
    rng = seeded_stream(5, "zero_layers")
    graph = Encoder.build(EncoderKind.LIGHTGCN, SMALL, 4, 0.3, 0, rng)
    mf = Encoder(EncoderKind.MF, graph.user_table.copy(), graph.item_table.copy(), 0.3)
    users = np.array([0, 1, 2, 1])
    items = rng.integers(0, 4, size=(4, 3))
    upstream = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(graph.score_batch(users, items), mf.score_batch(users, items))
    graph_grads = graph.backward_batch(users, items, upstream)
    mf_grads = mf.backward_batch(users, items, upstream)
    for side in ("user", "item"):
        with allure.step(f"Compare {side} gradients"):
            np.testing.assert_array_equal(getattr(graph_grads, side).indices, getattr(mf_grads, side).indices)
            np.testing.assert_array_equal(getattr(graph_grads, side).values, getattr(mf_grads, side).values)


# Scores depend on directions only
@allure.severity(allure.severity_level.NORMAL)
@allure.description("Rescaling MF table rows or LightGCN representation rows by positive factors changes no score beyond 1e-10.")
@allure.story('Encoder')
def test_scores_invariant_to_row_rescaling():
    """Rescaling MF table rows or LightGCN representation rows by positive factors changes no score beyond 1e-10."""
    rng = seeded_stream(6, "row_rescaling")
    users = np.array([0, 1, 2])
    items = np.array([[0, 1, 2, 3]] * 3)
    mf = Encoder.build(EncoderKind.MF, SMALL, 5, 0.2, 0, rng)
    user_scale = rng.uniform(0.01, 100.0, size=(3, 1))
    item_scale = rng.uniform(0.01, 100.0, size=(4, 1))
    rescaled = _rebuilt(mf, mf.user_table.values * user_scale, mf.item_table.values * item_scale)
    np.testing.assert_allclose(rescaled.score_batch(users, items), mf.score_batch(users, items), rtol=0, atol=1e-10)

    graph = Encoder.build(EncoderKind.LIGHTGCN, SMALL, 5, 0.2, 2, rng)
    user_reps, item_reps = graph.representations()
    scaled_reps = (user_reps * user_scale, item_reps * item_scale)
    np.testing.assert_allclose(graph.score_batch(users, items, reps=scaled_reps), graph.score_batch(users, items),
                               rtol=0, atol=1e-10)


# Full LightGCN chain (propagation then cosine) against finite differences
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("backward_batch matches central finite differences through propagation and cosine, 1000 instances.")
@allure.story('Encoder')
@pytest.mark.parametrize("kind", [EncoderKind.LIGHTGCN, EncoderKind.MF])
def test_backward_batch_matches_finite_differences(kind):
    """backward_batch matches central finite differences through propagation and cosine, 1000 instances."""
    rng = seeded_stream(3, f"encoder_fd_{kind.value}")
    for _ in range(1000):
        encoder = Encoder.build(kind, SMALL, 3, float(rng.uniform(0.1, 1.0)), int(rng.integers(0, 3)), rng)
        users = rng.integers(0, 3, size=2)
        items = rng.integers(0, 4, size=(2, 3))
        upstream = rng.normal(size=(2, 3))
        grads = encoder.backward_batch(users, items, upstream)
        user_values = encoder.user_table.values
        item_values = encoder.item_table.values

        def objective_users(x):
            return float(np.sum(upstream * _rebuilt(encoder, x, item_values).score_batch(users, items)))

        def objective_items(x):
            return float(np.sum(upstream * _rebuilt(encoder, user_values, x).score_batch(users, items)))

        dense_users = np.zeros_like(user_values)
        dense_users[grads.user.indices] = grads.user.values
        dense_items = np.zeros_like(item_values)
        dense_items[grads.item.indices] = grads.item.values
        assert_gradient_close(dense_users, central_difference(objective_users, user_values))
        assert_gradient_close(dense_items, central_difference(objective_items, item_values))


# Bad ids and shapes
@allure.severity(allure.severity_level.NORMAL)
@allure.description("Out-of-range ids raise IdOutOfRange; an upstream of the wrong shape raises DimMismatch.")
@allure.story('Encoder')
def test_encoder_errors():
    """Out-of-range ids raise IdOutOfRange; an upstream of the wrong shape raises DimMismatch."""
    encoder = Encoder.build(EncoderKind.MF, SMALL, 3, 0.5, 0, seeded_stream(4, "init"))
    with pytest.raises(IdOutOfRange):
        encoder.score(3, [0])
    with pytest.raises(IdOutOfRange):
        encoder.score(0, [4])
    with pytest.raises(DimMismatch):
        encoder.backward_batch([0], [[0, 1]], [[1.0]])
    with pytest.raises(DimMismatch):
        Encoder(EncoderKind.LIGHTGCN, encoder.user_table, encoder.item_table, 0.5, 1, None)


# Checkpoints reload bit-exactly and re-save to identical bytes
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("A saved checkpoint reloads every table bit-exactly and re-saving produces identical bytes.")
@allure.story('Checkpoint')
@pytest.mark.parametrize("kind", [EncoderKind.LIGHTGCN, EncoderKind.MF])
def test_checkpoint_round_trip(tmp_path, kind):
    """A saved checkpoint reloads every table bit-exactly and re-saving produces identical bytes."""
    rng = seeded_stream(5, "checkpoint")
    encoder = Encoder.build(kind, SMALL, 4, 0.3, 2, rng)
    hardness = HardnessModel.embed(3, 4, 4, rng)
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(str(first), encoder, hardness, SMALL, extra={"epoch": 7})
    loaded = load_checkpoint(str(first), SMALL)
    run_and_log(lambda: loaded.meta, description="Checkpoint metadata")
    assert loaded.encoder.param_bytes() == encoder.param_bytes()
    assert loaded.hardness.param_bytes() == hardness.param_bytes()
    assert loaded.meta["extra"] == {"epoch": 7}
    np.testing.assert_array_equal(loaded.encoder.score(0, [0, 1, 2, 3]), encoder.score(0, [0, 1, 2, 3]))
    save_checkpoint(str(second), loaded.encoder, loaded.hardness, SMALL, extra={"epoch": 7})
    assert first.read_bytes() == second.read_bytes()


# Checkpoints refuse datasets of a different shape
@allure.severity(allure.severity_level.CRITICAL)
@allure.description("Loading against a dataset with different n_items, or a file without the magic line, fails.")
@allure.story('Checkpoint')
def test_checkpoint_incompatible(tmp_path):
    """Loading against a dataset with different n_items, or a file without the magic line, fails."""
    encoder = Encoder.build(EncoderKind.MF, SMALL, 4, 0.3, 0, seeded_stream(6, "init"))
    path = tmp_path / "mf.ckpt"
    save_checkpoint(str(path), encoder, None, SMALL)
    other = InteractionSet(3, 5, train=SMALL.train)
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(str(path), other)
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"not a checkpoint\n")
    with pytest.raises(IncompatibleCheckpoint):
        load_checkpoint(str(bogus), SMALL)
    assert load_checkpoint(str(path), SMALL).hardness is None
