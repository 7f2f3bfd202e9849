import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from app.modules.errors import CheckpointError, ContractError, UntrainableSheetError, ValidationError
from app.modules.features import build_sheet_features
from app.modules.ingest import MapSheet, TextRegion
from app.modules.synth import generate_corpus
from app.modules.textual_linker import (
    EPS,
    LinkerConfig,
    LinkerModel,
    PairBatch,
    TripletBatch,
    bce_loss,
    forward_pair,
    load_model,
    loss_and_gradients,
    pair_probabilities,
    retrieve_candidates,
    sample_batches,
    save_model,
    train,
    triplet_loss,
)

SMALL = LinkerConfig(hidden_dim=16, embed_dim=8, learning_rate=0.5, epochs=200, batch_size=4, seed=11)


def box(region_id, text, x, y, w=60, h=20):
    return TextRegion.from_polygon(region_id, text, ((x, y), (x + w, y), (x + w, y + h), (x, y + h)))


@pytest.fixture
def two_group_sheet():
    regions = (
        box("a", "Black", 40, 40), box("b", "Crater", 120, 40),
        box("c", "Fall", 700, 500), box("d", "River", 780, 500),
    )
    return MapSheet("two-groups", 1000, 600, regions, (("a", "b"), ("c", "d")))


@pytest.fixture
def model_55():
    return LinkerModel.initialize(55, LinkerConfig(seed=3))


def test_forward_pair_is_a_probability(model_55):
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = forward_pair(model_55, rng.normal(size=55), rng.normal(size=55))
        assert 0.0 < p < 1.0


def test_forward_pair_is_deterministic(model_55):
    r = np.linspace(-1, 1, 55)
    assert forward_pair(model_55, r, r) == forward_pair(model_55, r, r)


def test_forward_pair_dimension_mismatch(model_55):
    with pytest.raises(ContractError):
        forward_pair(model_55, np.zeros(55), np.zeros(54))
    with pytest.raises(ContractError):
        forward_pair(model_55, np.zeros(50), np.zeros(50))


def test_bce_loss_values():
    assert bce_loss([1 - EPS], [1]) == pytest.approx(0.0, abs=1e-6)
    assert bce_loss([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2), abs=1e-4)
    assert bce_loss([0.9], [0]) == pytest.approx(-math.log(0.1), abs=1e-4)


def test_bce_loss_rejects_empty_or_ragged_input():
    with pytest.raises(ContractError):
        bce_loss([], [])
    with pytest.raises(ContractError):
        bce_loss([0.5, 0.5], [1])


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
def test_bce_loss_is_non_negative(rows):
    preds, labels = zip(*rows)
    assert bce_loss(preds, labels) >= 0.0


def test_triplet_loss_values():
    same = np.ones((3, 4))
    assert triplet_loss(same, same, same, 0.2) == pytest.approx(3 * 0.2)
    assert triplet_loss([[0.0, 0.0]], [[0.0, 0.0]], [[math.sqrt(0.2), 0.0]], 0.2) == pytest.approx(0.0, abs=1e-12)
    assert triplet_loss([[0.0, 0.0]], [[1.0, 0.0]], [[3.0, 0.0]], 0.2) == 0.0


def test_triplet_loss_count_mismatch():
    with pytest.raises(ContractError):
        triplet_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((1, 3)), 0.2)


@given(st.integers(1, 6), st.floats(0, 2), st.integers(0, 2 ** 16))
def test_triplet_loss_is_zero_when_negatives_are_far(count, alpha, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(count, 3))
    p = a + rng.normal(scale=0.1, size=(count, 3))
    n = a + 10.0 + alpha
    assert triplet_loss(a, p, n, alpha) == 0.0
    assert triplet_loss(a, p, a, alpha) >= 0.0


def test_sample_batches_only_possible_draws(tiny_table):
    sheet = MapSheet("abc", 500, 200, (box("A", "Fall", 10, 10), box("B", "River", 90, 10),
                                      box("C", "Burgettville", 300, 100)), (("A", "B"), ("C",)))
    features = build_sheet_features(sheet, tiny_table)
    pairs, triplets = sample_batches(sheet, features, np.random.default_rng(0), negatives=1)
    assert sorted(zip(pairs.ids, pairs.labels.tolist())) == [
        (("A", "B"), 1.0), (("A", "C"), 0.0), (("B", "A"), 1.0), (("B", "C"), 0.0),
    ]
    assert sorted(triplets.ids) == [("A", "B", "C"), ("B", "A", "C")]
    np.testing.assert_array_equal(pairs.left[0], features.vector(pairs.ids[0][0]))


def test_sample_batches_is_seed_deterministic(two_group_sheet, tiny_table):
    features = build_sheet_features(two_group_sheet, tiny_table)
    first = sample_batches(two_group_sheet, features, np.random.default_rng(42))
    second = sample_batches(two_group_sheet, features, np.random.default_rng(42))
    assert first[0].ids == second[0].ids
    assert first[1].ids == second[1].ids


def test_sample_batches_ratio_over_generated_sheets():
    corpus = generate_corpus(n_sheets=10, seed=5)
    rng = np.random.default_rng(0)
    positives = negatives = 0
    for sheet in corpus.sheets:
        pairs, triplets = sample_batches(sheet, build_sheet_features(sheet, corpus.embeddings), rng, negatives=3)
        positives += int(pairs.labels.sum())
        negatives += int((pairs.labels == 0).sum())
        assert len(triplets) == int(pairs.labels.sum())
        groups = {rid: k for k, g in enumerate(sheet.groups) for rid in g}
        for (i, j), y in zip(pairs.ids, pairs.labels):
            assert (groups[i] == groups[j]) == (y == 1.0)
    assert negatives == 3 * positives


def test_sample_batches_needs_a_multi_word_group(fall_river, tiny_table):
    features = build_sheet_features(fall_river, tiny_table)
    with pytest.raises(UntrainableSheetError):
        sample_batches(fall_river, features, np.random.default_rng(0), groups=[("f",), ("r",), ("b",)])


def test_train_with_zero_learning_rate_keeps_parameters(two_group_sheet, tiny_table):
    config = LinkerConfig(hidden_dim=8, embed_dim=4, learning_rate=0.0, epochs=5, batch_size=4)
    model = LinkerModel.initialize(55, config)
    features = build_sheet_features(two_group_sheet, tiny_table)
    trained, history = train(model, [(two_group_sheet, features)])
    np.testing.assert_array_equal(trained.flat(), model.flat())
    assert len(history) == 5
    assert len(set(history)) == 1


def test_train_separates_two_groups(two_group_sheet, tiny_table):
    features = build_sheet_features(two_group_sheet, tiny_table)
    trained, history = train(LinkerModel.initialize(55, SMALL), [(two_group_sheet, features)])
    pairs, _ = sample_batches(two_group_sheet, features, np.random.default_rng(1))
    assert bce_loss(pair_probabilities(trained, pairs.left, pairs.right), pairs.labels) < 0.1
    assert history[-1] < history[0]


def test_train_is_seed_deterministic(two_group_sheet, tiny_table):
    features = build_sheet_features(two_group_sheet, tiny_table)
    config = LinkerConfig(hidden_dim=8, embed_dim=4, epochs=10, batch_size=4, seed=9)
    _, first = train(LinkerModel.initialize(55, config), [(two_group_sheet, features)])
    _, second = train(LinkerModel.initialize(55, config), [(two_group_sheet, features)])
    assert first == second


def test_train_without_trainable_sheets(fall_river, tiny_table):
    lonely = MapSheet("lonely", 100, 100, fall_river.regions, (("f",), ("r",)))
    with pytest.raises(UntrainableSheetError):
        train(LinkerModel.initialize(55, SMALL), [(lonely, build_sheet_features(lonely, tiny_table))])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    config = LinkerConfig(hidden_dim=5, embed_dim=3, margin=0.7, loss_weight=0.8, seed=seed)
    model = LinkerModel.initialize(6, config)
    model = model.with_flat(rng.normal(scale=0.5, size=model.flat().size))
    pairs = PairBatch(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)), rng.integers(0, 2, 4).astype(float))
    triplets = TripletBatch(rng.normal(size=(3, 6)), rng.normal(size=(3, 6)), rng.normal(size=(3, 6)))

    _, grads = loss_and_gradients(model, pairs, triplets)
    analytic = np.concatenate([grads[k].ravel() for k in ("w1", "b1", "w2", "b2", "w3", "b3")])
    flat = model.flat()
    numeric = np.zeros_like(flat)
    step = 1e-6
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += step
        down[i] -= step
        numeric[i] = (loss_and_gradients(model.with_flat(up), pairs, triplets)[0]
                      - loss_and_gradients(model.with_flat(down), pairs, triplets)[0]) / (2 * step)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


def test_retrieve_candidates_with_saturated_model(fall_river, tiny_table):
    model = LinkerModel.initialize(55, LinkerConfig(seed=1))
    params = dict(model.params)
    params["w3"] = np.zeros_like(params["w3"])
    params["b3"] = np.array([60.0])
    saturated = model.with_params(params)
    features = build_sheet_features(fall_river, tiny_table)
    found = retrieve_candidates(saturated, fall_river, features, "f")
    assert [c.region_id for c in found] == ["r", "b"]
    assert retrieve_candidates(saturated, fall_river, features, "f", threshold=1.0) == []


def test_retrieve_candidates_unknown_query(fall_river, tiny_table, model_55):
    with pytest.raises(ValidationError):
        retrieve_candidates(model_55, fall_river, build_sheet_features(fall_river, tiny_table), "zz")


def test_trained_model_links_fall_to_river(fall_river, tiny_table):
    features = build_sheet_features(fall_river, tiny_table)
    config = LinkerConfig(hidden_dim=16, embed_dim=8, learning_rate=0.5, epochs=200, batch_size=8, seed=4)
    trained, _ = train(LinkerModel.initialize(55, config), [(fall_river, features)])
    found = {c.region_id for c in retrieve_candidates(trained, fall_river, features, "f")}
    assert "r" in found
    assert "b" not in found


def test_checkpoint_round_trip(tmp_path):
    config = LinkerConfig(hidden_dim=7, embed_dim=5, margin=0.3, epochs=12, seed=8, threshold=0.4)
    model = LinkerModel.initialize(55, config)
    loaded = load_model(save_model(model, tmp_path / "linker.bin"))
    assert loaded.config == config
    assert loaded.input_dim == 55
    np.testing.assert_array_equal(loaded.flat(), model.flat())


def test_checkpoint_rejects_foreign_and_truncated_files(tmp_path):
    foreign = tmp_path / "foreign.bin"
    foreign.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointError, match="not a linker checkpoint"):
        load_model(foreign)

    good = save_model(LinkerModel.initialize(55, LinkerConfig(hidden_dim=4, embed_dim=2)), tmp_path / "m.bin")
    cut = tmp_path / "cut.bin"
    cut.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_model(cut)
    tiny = tmp_path / "tiny.bin"
    tiny.write_bytes(b"MM")
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(tiny)
