"""
Random Forest classifier, built from scratch on numpy

Each tree grows on a bootstrap sample. At every node the trainer walks a
seeded permutation of the features, keeps the first `mtry` that are not
constant inside the node, and picks the (feature, threshold) with the lowest
weighted Gini impurity. Thresholds are midpoints between consecutive distinct
values. Growth stops at pure nodes, at nodes of <= min_node_size points, or
when no candidate split lowers the impurity.

Prediction routes an instance down every tree (left iff value <= threshold)
and tallies the leaf labels.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from runtime import derive_seed, parallel_map
from scoring.errors import ModelFormatError, ValidationError
from scoring.imaging import SCORE_LABELS

logger = logging.getLogger(__name__)

MODEL_FORMAT = "tma-forest"
MODEL_VERSION = 1

# relative slack when comparing split scores, so ties resolve by index order
SCORE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class LabeledInstance:
    features: np.ndarray
    label: int
    source: str = "primary"
    path: Optional[str] = None


def stack_instances(data: Sequence[LabeledInstance]) -> Tuple[np.ndarray, np.ndarray]:
    """(n, p) feature matrix and label vector of a non-empty instance list"""
    if not data:
        raise ValidationError("no instances")
    p = len(data[0].features)
    for i, inst in enumerate(data):
        if len(inst.features) != p:
            raise ValidationError(f"instance {i} has {len(inst.features)} features, expected {p}")
        if inst.label not in SCORE_LABELS:
            raise ValidationError(f"instance {i} has label {inst.label}, outside the 0-3 score scale")
    X = np.vstack([np.asarray(inst.features, dtype=np.float64) for inst in data])
    y = np.array([inst.label for inst in data], dtype=np.int64)
    return X, y


def resolve_mtry(mtry: Union[str, int], p: int) -> int:
    """
    Number of features tried per split

    "sqrt" -> floor(sqrt(p)), "2sqrt" -> floor(2 sqrt(p)), an integer as given.
    """
    if p < 1:
        raise ValidationError("feature dimension must be positive")
    key = str(mtry).strip().lower()
    if key == "sqrt":
        return max(1, math.isqrt(p))
    if key == "2sqrt":
        return min(p, max(1, math.isqrt(4 * p)))
    try:
        value = int(key)
    except ValueError:
        raise ValidationError(f"mtry must be sqrt, 2sqrt or an integer, got {mtry!r}") from None
    if not 1 <= value <= p:
        raise ValidationError(f"mtry must lie in 1..{p}, got {value}")
    return value


class ForestParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    trees: int = Field(100, ge=1)
    mtry: int = Field(..., ge=1)
    seed: int = 0
    min_node_size: int = Field(1, ge=1)
    # off only for the exhaustive-CART comparison
    bootstrap: bool = True


@dataclass(frozen=True)
class VoteTally:
    """Per-class vote counts for one instance; classes ascending"""

    classes: Tuple[int, ...]
    counts: Tuple[int, ...]

    @classmethod
    def from_mapping(cls, votes: Mapping[int, int]) -> "VoteTally":
        classes = tuple(sorted(int(c) for c in votes))
        return cls(classes, tuple(int(votes[c]) for c in classes))

    @property
    def votes(self) -> Dict[int, int]:
        return dict(zip(self.classes, self.counts))

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class DecisionTree:
    """
    Array-backed binary tree

    Node 0 is the root. Internal nodes have feature >= 0 and two children;
    leaves have feature == -1 and hold a class label in `value`.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.nonzero(self.feature[node] >= 0)[0]
        while active.size:
            current = node[active]
            go_left = X[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[node[active]] >= 0]
        return self.value[node]


@dataclass(frozen=True)
class Forest:
    trees: Tuple[DecisionTree, ...]
    classes: Tuple[int, ...]
    n_features: int
    params: ForestParams
    # trained on a single label; every tree is one leaf
    degenerate: bool = False

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def vote_matrix(self, X: np.ndarray) -> np.ndarray:
        """(n, 4) vote counts, one column per score in SCORE_LABELS"""
        X = self._check(X)
        votes = np.zeros((len(X), len(SCORE_LABELS)), dtype=np.int64)
        rows = np.arange(len(X))
        for tree in self.trees:
            np.add.at(votes, (rows, tree.predict(X)), 1)
        return votes

    def tallies(self, X: np.ndarray) -> List[VoteTally]:
        return [VoteTally(SCORE_LABELS, tuple(int(v) for v in row)) for row in self.vote_matrix(X)]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Majority labels; ties go to the smallest class"""
        return np.argmax(self.vote_matrix(X), axis=1).astype(np.int64)


class _TreeGrower:
    """Grows one tree on a fixed row sample"""

    def __init__(self, X: np.ndarray, y: np.ndarray, classes: Tuple[int, ...], mtry: int,
                 min_node_size: int, rng: np.random.Generator):
        self.X = X
        self.y = y
        self.classes = np.asarray(classes, dtype=np.int64)
        self.n_classes = len(classes)
        self.onehot = np.eye(self.n_classes, dtype=np.int64)
        self.mtry = mtry
        self.min_node_size = min_node_size
        self.rng = rng

    def grow(self, rows: np.ndarray) -> DecisionTree:
        feature: List[int] = []
        threshold: List[float] = []
        left: List[int] = []
        right: List[int] = []
        value: List[int] = []

        def new_node() -> int:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0)
            return len(feature) - 1

        stack = [(new_node(), rows)]
        while stack:
            node, node_rows = stack.pop()
            counts = np.bincount(self.y[node_rows], minlength=self.n_classes)
            value[node] = int(self.classes[np.argmax(counts)])
            if len(node_rows) <= self.min_node_size or counts.max() == len(node_rows):
                continue

            split = self._best_split(node_rows, counts)
            if split is None:
                continue
            best_feature, best_threshold, goes_left = split
            feature[node] = best_feature
            threshold[node] = best_threshold
            left_node, right_node = new_node(), new_node()
            left[node], right[node] = left_node, right_node
            stack.append((right_node, node_rows[~goes_left]))
            stack.append((left_node, node_rows[goes_left]))

        return DecisionTree(
            feature=np.array(feature, dtype=np.int64),
            threshold=np.array(threshold, dtype=np.float64),
            left=np.array(left, dtype=np.int64),
            right=np.array(right, dtype=np.int64),
            value=np.array(value, dtype=np.int64),
        )

    def _candidate_features(self, Xn: np.ndarray) -> np.ndarray:
        p = Xn.shape[1]
        order = self.rng.permutation(p)
        varying = Xn.max(axis=0) > Xn.min(axis=0)
        return np.sort(order[varying[order]][:self.mtry])

    def _best_split(self, rows: np.ndarray, counts: np.ndarray):
        Xn = self.X[rows]
        m = len(rows)
        candidates = self._candidate_features(Xn)
        if candidates.size == 0:
            return None

        values = Xn[:, candidates]
        order = np.argsort(values, axis=0, kind="stable")
        sorted_values = np.take_along_axis(values, order, axis=0)
        # left[i, j, c]: class-c count left of the cut after sorted position i of feature j
        left_counts = np.cumsum(self.onehot[self.y[rows]][order], axis=0)[:-1]
        right_counts = counts[None, None, :] - left_counts
        n_left = np.arange(1, m, dtype=np.float64)[:, None]
        n_right = m - n_left

        # minimizing weighted Gini == maximizing sum(l^2)/nL + sum(r^2)/nR
        score = (left_counts ** 2).sum(axis=2) / n_left + (right_counts ** 2).sum(axis=2) / n_right
        score = np.where(sorted_values[1:] > sorted_values[:-1], score, -np.inf)

        best = score.max()
        parent = float((counts ** 2).sum()) / m
        if not np.isfinite(best) or best <= parent + SCORE_TOLERANCE * parent:
            return None

        near_best = score >= best - SCORE_TOLERANCE * best
        columns, positions = np.nonzero(near_best.T)
        j, i = columns[0], positions[0]
        low, high = sorted_values[i, j], sorted_values[i + 1, j]
        cut = (low + high) / 2.0
        if not low <= cut < high:
            cut = low
        return int(candidates[j]), float(cut), values[:, j] <= cut


class RandomForestTrainer:
    """
    Trains forests with fixed ForestParams

    Tree t draws all of its randomness from derive_seed(seed, "tree", t), so
    serial and threaded training produce the same forest.
    """

    def __init__(self, params: ForestParams, threads: Optional[int] = 1):
        self.params = params
        self.threads = threads

    def fit(self, data: Sequence[LabeledInstance]) -> Forest:
        X, y = stack_instances(data)
        n, p = X.shape
        if self.params.mtry > p:
            raise ValidationError(f"mtry {self.params.mtry} exceeds feature dimension {p}")

        classes = tuple(int(c) for c in np.unique(y))
        y_index = np.searchsorted(np.asarray(classes), y)
        degenerate = len(classes) < 2
        if degenerate:
            logger.warning(f"[Forest] single label {classes[0]} in training data; every tree is one leaf")

        def grow_tree(t: int) -> DecisionTree:
            rng = np.random.default_rng(derive_seed(self.params.seed, "tree", t))
            rows = rng.integers(0, n, size=n) if self.params.bootstrap else np.arange(n)
            grower = _TreeGrower(X, y_index, classes, self.params.mtry, self.params.min_node_size, rng)
            return grower.grow(rows)

        trees = parallel_map(grow_tree, range(self.params.trees), self.threads)
        logger.debug(f"[Forest] trained {len(trees)} trees on {n} instances (p={p}, mtry={self.params.mtry})")
        return Forest(tuple(trees), classes, p, self.params, degenerate)


def train_forest(data: Sequence[LabeledInstance], params: ForestParams, threads: Optional[int] = 1) -> Forest:
    """Train a forest; see RandomForestTrainer"""
    return RandomForestTrainer(params, threads).fit(data)


def predict_votes(forest: Forest, x: np.ndarray) -> VoteTally:
    """Vote tally of one instance; counts sum to the number of trees"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("predict_votes takes a single feature vector")
    return forest.tallies(x[None, :])[0]


def label_from_tally(tally: VoteTally) -> int:
    """Class with the most votes, smallest class on ties"""
    return tally.classes[int(np.argmax(tally.counts))]


def predict_label(forest: Forest, x: np.ndarray) -> int:
    return label_from_tally(predict_votes(forest, x))


def confidence(tally: VoteTally, T: int) -> float:
    """
    Vote-margin confidence (n1 - n2) / T

    n1 and n2 are the largest and second-largest per-class counts; a tally
    with one class has n2 = 0.
    """
    if T < 1:
        raise ValidationError(f"tree count must be >= 1, got {T}")
    if any(c < 0 for c in tally.counts):
        raise ValidationError("vote counts must be non-negative")
    if tally.total != T:
        raise ValidationError(f"tally sums to {tally.total}, expected {T}")
    top = sorted(tally.counts, reverse=True) + [0]
    return (top[0] - top[1]) / T


def margins(votes: np.ndarray, T: int) -> np.ndarray:
    """Row-wise vote-margin confidence of a vote matrix"""
    if votes.shape[1] == 1:
        return votes[:, 0] / T
    top_two = -np.sort(-votes, axis=1)[:, :2]
    return (top_two[:, 0] - top_two[:, 1]) / T


def save_model(forest: Forest) -> bytes:
    """Serialize a forest as versioned JSON (see docs/MODEL_FORMAT.md)"""
    document = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "params": forest.params.model_dump(),
        "classes": list(forest.classes),
        "n_features": forest.n_features,
        "degenerate": forest.degenerate,
        "trees": [
            {
                "feature": tree.feature.tolist(),
                "threshold": tree.threshold.tolist(),
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "value": tree.value.tolist(),
            }
            for tree in forest.trees
        ],
    }
    return json.dumps(document, separators=(",", ":")).encode("utf-8")


def _load_tree(raw: dict, n_features: int, classes: Tuple[int, ...]) -> DecisionTree:
    tree = DecisionTree(
        feature=np.asarray(raw["feature"], dtype=np.int64),
        threshold=np.asarray(raw["threshold"], dtype=np.float64),
        left=np.asarray(raw["left"], dtype=np.int64),
        right=np.asarray(raw["right"], dtype=np.int64),
        value=np.asarray(raw["value"], dtype=np.int64),
    )
    n = tree.n_nodes
    if n == 0 or any(len(a) != n for a in (tree.threshold, tree.left, tree.right, tree.value)):
        raise ModelFormatError("tree arrays have inconsistent lengths")
    internal = tree.feature >= 0
    if np.any(tree.feature >= n_features):
        raise ModelFormatError("split feature out of range")
    children = np.concatenate([tree.left[internal], tree.right[internal]])
    if np.any(children <= 0) or np.any(children >= n) or len(np.unique(children)) != len(children):
        raise ModelFormatError("malformed child links")
    if not set(tree.value[~internal].tolist()) <= set(classes):
        raise ModelFormatError("leaf label not in class list")
    return tree


def load_model(blob: bytes) -> Forest:
    """
    Inverse of save_model

    Raises:
        ModelFormatError: not a forest document, wrong version, or corrupt trees
    """
    try:
        document = json.loads(blob.decode("utf-8") if isinstance(blob, (bytes, bytearray)) else blob)
        if document.get("format") != MODEL_FORMAT:
            raise ModelFormatError("not a forest model file")
        if document.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"model version {document.get('version')} is not supported "
                                   f"(expected {MODEL_VERSION})")
        params = ForestParams.model_validate(document["params"])
        classes = tuple(int(c) for c in document["classes"])
        n_features = int(document["n_features"])
        trees = tuple(_load_tree(raw, n_features, classes) for raw in document["trees"])
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError, UnicodeDecodeError) as e:
        raise ModelFormatError(f"corrupt model file: {e}") from e

    if len(trees) != params.trees:
        raise ModelFormatError(f"model holds {len(trees)} trees, params say {params.trees}")
    return Forest(trees, classes, n_features, params, bool(document.get("degenerate", False)))
