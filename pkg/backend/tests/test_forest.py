import json
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from runtime import derive_seed
from scoring.errors import ModelFormatError, ValidationError
from scoring.forest import (DecisionTree, Forest, ForestParams, LabeledInstance, VoteTally, confidence,
                            label_from_tally, load_model, predict_label, predict_votes, resolve_mtry, save_model,
                            train_forest)


def _instances(X, y):
    return [LabeledInstance(features=np.asarray(x, dtype=float), label=int(label)) for x, label in zip(X, y)]


def _root_split_tree() -> DecisionTree:
    # f0 <= 0.5 -> 1, else 3
    return DecisionTree(
        feature=np.array([0, -1, -1]),
        threshold=np.array([0.5, 0.0, 0.0]),
        left=np.array([1, -1, -1]),
        right=np.array([2, -1, -1]),
        value=np.array([0, 1, 3]),
    )


# ---------------------------------------------------------------------------
# exhaustive CART reference, exact arithmetic
# ---------------------------------------------------------------------------

def cart_oracle(X, y, min_node_size=1):
    p = X.shape[1]

    def build(rows):
        counts = Counter(int(y[r]) for r in rows)
        top = max(counts.values())
        majority = min(c for c, n in counts.items() if n == top)
        if len(rows) <= min_node_size or len(counts) == 1:
            return ("leaf", majority)
        parent = Fraction(sum(n * n for n in counts.values()), len(rows))
        best = None
        for f in range(p):
            values = sorted(set(float(X[r, f]) for r in rows))
            for low, high in zip(values, values[1:]):
                threshold = (low + high) / 2.0
                left = [r for r in rows if X[r, f] <= threshold]
                right = [r for r in rows if X[r, f] > threshold]
                lc, rc = Counter(int(y[r]) for r in left), Counter(int(y[r]) for r in right)
                score = (Fraction(sum(n * n for n in lc.values()), len(left))
                         + Fraction(sum(n * n for n in rc.values()), len(right)))
                if best is None or score > best[0]:
                    best = (score, f, threshold, left, right)
        if best is None or best[0] <= parent:
            return ("leaf", majority)
        _, f, threshold, left, right = best
        return ("split", f, threshold, build(left), build(right))

    return build(list(range(len(y))))


def oracle_predict(node, x):
    while node[0] == "split":
        _, f, threshold, left, right = node
        node = left if x[f] <= threshold else right
    return node[1]


def test_forest_matches_exhaustive_cart_oracle() -> None:
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(2, 13))
        p = int(rng.integers(1, 4))
        X = rng.integers(0, 5, (n, p)).astype(float)
        y = rng.integers(0, 4, n)
        params = ForestParams(trees=1, mtry=p, seed=int(rng.integers(1 << 30)), bootstrap=False)
        forest = train_forest(_instances(X, y), params)
        reference = cart_oracle(X, y)

        queries = np.vstack([X, rng.integers(-1, 11, (20, p)) / 2.0])
        predicted = forest.predict(queries)
        expected = [oracle_predict(reference, q) for q in queries]
        assert predicted.tolist() == expected


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_separable_one_dimensional_data_is_learned() -> None:
    data = _instances([[0], [1], [10], [11]], [0, 0, 1, 1])
    forest = train_forest(data, ForestParams(trees=25, mtry=1, seed=7))
    assert [predict_label(forest, inst.features) for inst in data] == [0, 0, 1, 1]


def test_single_instance_gives_single_leaf_trees() -> None:
    data = [LabeledInstance(features=np.array([0.3, 0.1, 0.9]), label=2)]
    forest = train_forest(data, ForestParams(trees=5, mtry=1, seed=0))
    assert forest.degenerate
    assert forest.n_trees == 5
    assert all(tree.n_nodes == 1 for tree in forest.trees)
    assert predict_votes(forest, np.array([5.0, 5.0, 5.0])).votes == {0: 0, 1: 0, 2: 5, 3: 0}


def test_same_seed_same_forest(make_clusters) -> None:
    data = make_clusters(seed=1, n_per_class=10, p=5)
    params = ForestParams(trees=10, mtry=2, seed=42)
    assert save_model(train_forest(data, params)) == save_model(train_forest(data, params))
    other = train_forest(data, params.model_copy(update={"seed": 43}))
    assert save_model(other) != save_model(train_forest(data, params))


def test_threads_do_not_change_the_forest(make_clusters) -> None:
    data = make_clusters(seed=2, n_per_class=8, p=6)
    params = ForestParams(trees=12, mtry=2, seed=5)
    assert save_model(train_forest(data, params, threads=1)) == save_model(train_forest(data, params, threads=4))


def test_every_tree_fits_distinct_training_points(make_clusters) -> None:
    data = make_clusters(seed=3, n_per_class=6, p=4, spread=3.0)
    X = np.vstack([inst.features for inst in data])
    y = np.array([inst.label for inst in data])
    forest = train_forest(data, ForestParams(trees=8, mtry=1, seed=9, bootstrap=False))
    for tree in forest.trees:
        assert np.array_equal(tree.predict(X), y)
        assert tree.depth() <= len(data)


def test_every_tree_fits_its_bootstrap_sample(make_clusters) -> None:
    data = make_clusters(seed=3, n_per_class=6, p=4, spread=3.0)
    X = np.vstack([inst.features for inst in data])
    y = np.array([inst.label for inst in data])
    forest = train_forest(data, ForestParams(trees=8, mtry=1, seed=9, bootstrap=True))
    for t, tree in enumerate(forest.trees):
        rows = np.random.default_rng(derive_seed(9, "tree", t)).integers(0, len(data), size=len(data))
        assert np.array_equal(tree.predict(X[rows]), y[rows])


def test_internal_nodes_have_two_children(make_clusters) -> None:
    forest = train_forest(make_clusters(seed=4), ForestParams(trees=5, mtry=2, seed=1))
    for tree in forest.trees:
        internal = tree.feature >= 0
        assert np.all(tree.left[internal] > 0)
        assert np.all(tree.right[internal] > 0)
        assert np.all(tree.left[~internal] == -1)


def test_training_errors() -> None:
    with pytest.raises(ValidationError):
        train_forest([], ForestParams(trees=1, mtry=1))
    mixed = [LabeledInstance(np.zeros(2), 0), LabeledInstance(np.zeros(3), 1)]
    with pytest.raises(ValidationError):
        train_forest(mixed, ForestParams(trees=1, mtry=1))
    with pytest.raises(ValidationError):
        train_forest([LabeledInstance(np.zeros(2), 0)], ForestParams(trees=1, mtry=3))
    with pytest.raises(ValidationError):
        train_forest([LabeledInstance(np.zeros(2), 7)], ForestParams(trees=1, mtry=1))


@pytest.mark.parametrize("spec, p, expected", [
    ("sqrt", 2601, 51),
    ("2sqrt", 2601, 102),
    ("sqrt", 10, 3),
    ("2sqrt", 10, 6),
    ("7", 10, 7),
    (4, 10, 4),
    ("sqrt", 1, 1),
])
def test_resolve_mtry(spec, p, expected) -> None:
    assert resolve_mtry(spec, p) == expected


@pytest.mark.parametrize("spec", ["0", 11, "third", ""])
def test_resolve_mtry_rejects(spec) -> None:
    with pytest.raises(ValidationError):
        resolve_mtry(spec, 10)


# ---------------------------------------------------------------------------
# prediction and confidence
# ---------------------------------------------------------------------------

def test_hand_traced_routing() -> None:
    forest = Forest((_root_split_tree(),), (1, 3), 2, ForestParams(trees=1, mtry=1))
    assert predict_votes(forest, np.array([0.2, 9.0])).votes == {0: 0, 1: 1, 2: 0, 3: 0}
    assert predict_label(forest, np.array([0.5, 0.0])) == 1
    assert predict_label(forest, np.array([0.6, 0.0])) == 3


def test_dimension_mismatch_in_prediction() -> None:
    forest = Forest((_root_split_tree(),), (1, 3), 2, ForestParams(trees=1, mtry=1))
    with pytest.raises(ValidationError):
        predict_votes(forest, np.array([0.1, 0.2, 0.3]))


def test_votes_sum_to_tree_count(make_clusters) -> None:
    data = make_clusters(seed=6, n_per_class=5)
    forest = train_forest(data, ForestParams(trees=17, mtry=2, seed=0))
    queries = np.random.default_rng(0).normal(0.0, 5.0, (30, 4))
    assert np.all(forest.vote_matrix(queries).sum(axis=1) == 17)
    for tally in forest.tallies(queries):
        assert tally.total == 17
        assert 0.0 <= confidence(tally, 17) <= 1.0


@pytest.mark.parametrize("votes, expected", [
    ({0: 40, 1: 60}, 1),
    ({0: 50, 1: 50}, 0),
    ({2: 100}, 2),
])
def test_label_from_tally(votes, expected) -> None:
    assert label_from_tally(VoteTally.from_mapping(votes)) == expected


@pytest.mark.parametrize("votes, expected", [
    ({0: 60, 1: 30, 2: 10, 3: 0}, 0.30),
    ({0: 25, 1: 25, 2: 25, 3: 25}, 0.0),
    ({0: 0, 1: 0, 2: 100, 3: 0}, 1.0),
])
def test_confidence_examples(votes, expected) -> None:
    assert confidence(VoteTally.from_mapping(votes), 100) == pytest.approx(expected, abs=1e-12)


def test_confidence_rejects_mismatched_tally() -> None:
    with pytest.raises(ValidationError):
        confidence(VoteTally.from_mapping({0: 60, 1: 30}), 100)
    with pytest.raises(ValidationError):
        confidence(VoteTally.from_mapping({0: 0}), 0)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def test_model_round_trip_predicts_identically(make_clusters) -> None:
    data = make_clusters(seed=8, n_per_class=6)
    forest = train_forest(data, ForestParams(trees=9, mtry=2, seed=3))
    restored = load_model(save_model(forest))
    queries = np.random.default_rng(1).normal(0.0, 4.0, (50, 4))
    assert np.array_equal(restored.vote_matrix(queries), forest.vote_matrix(queries))
    assert restored.classes == forest.classes
    assert restored.params == forest.params


def test_model_version_mismatch(make_clusters) -> None:
    forest = train_forest(make_clusters(seed=9), ForestParams(trees=2, mtry=1))
    document = json.loads(save_model(forest))
    document["version"] = 99
    with pytest.raises(ModelFormatError, match="version"):
        load_model(json.dumps(document).encode())


@pytest.mark.parametrize("blob", [b"", b"{", b'{"format": "something-else"}', b"\xff\xfe", b"[1, 2]"])
def test_corrupt_model_files(blob) -> None:
    with pytest.raises(ModelFormatError):
        load_model(blob)


def test_model_with_broken_child_links(make_clusters) -> None:
    forest = train_forest(make_clusters(seed=10), ForestParams(trees=1, mtry=2))
    document = json.loads(save_model(forest))
    document["trees"][0]["left"][0] = 10_000
    with pytest.raises(ModelFormatError):
        load_model(json.dumps(document).encode())


@pytest.mark.slow
def test_forest_beats_single_tree_under_label_noise() -> None:
    forest_scores, tree_scores = [], []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=5)
        X_train, X_test = rng.normal(size=(200, 5)), rng.normal(size=(200, 5))
        y_train, y_test = (X_train @ w > 0).astype(int), (X_test @ w > 0).astype(int)
        flipped = rng.random(200) < 0.05
        y_train[flipped] = 1 - y_train[flipped]
        data = _instances(X_train, y_train)
        forest = train_forest(data, ForestParams(trees=100, mtry=2, seed=seed))
        tree = train_forest(data, ForestParams(trees=1, mtry=2, seed=seed))
        forest_scores.append(np.mean(forest.predict(X_test) == y_test))
        tree_scores.append(np.mean(tree.predict(X_test) == y_test))
    assert np.mean(forest_scores) > np.mean(tree_scores)
