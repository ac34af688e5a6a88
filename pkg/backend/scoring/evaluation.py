"""
Evaluation - accuracy, class separation ratio and 2-D PCA projections

The separation ratio sums, over unordered class pairs i < j, the within-class
pairwise distances of i and j divided by the pairwise distances between them.
Smaller values mean better separated classes.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import cdist, pdist

from scoring.errors import ValidationError
from scoring.forest import Forest, LabeledInstance, stack_instances

logger = logging.getLogger(__name__)


def accuracy(predicted: Sequence[int], given: Sequence[int]) -> float:
    """Fraction of positions where predicted equals given"""
    predicted = np.asarray(predicted)
    given = np.asarray(given)
    if predicted.shape != given.shape:
        raise ValidationError(f"label vectors differ in length ({len(predicted)} vs {len(given)})")
    if predicted.size == 0:
        raise ValidationError("accuracy of an empty label vector")
    return float(np.count_nonzero(predicted == given)) / predicted.size


class SeparationBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    ssw: Dict[str, float]
    ssb: Dict[str, float]
    rho: float
    rho_finite: float
    infinite_pairs: List[str]
    pair_convention: str = "unordered"
    representation: str = "normalized"


def pair_key(i: int, j: int) -> str:
    return f"{i}-{j}"


def separation_ratio(data: Sequence[LabeledInstance], representation: str = "normalized") -> SeparationBreakdown:
    """
    Within/between class distance ratio of a labeled point set

    Args:
        data: labeled feature vectors, at least two classes
        representation: recorded in the breakdown ("normalized" or "raw")

    Returns:
        SeparationBreakdown; a class pair whose between-class sum is 0 makes
        rho infinite and is listed in infinite_pairs
    """
    X, y = stack_instances(data)
    classes = [int(c) for c in np.unique(y)]
    if len(classes) < 2:
        raise ValidationError(f"separation ratio needs at least two classes, got {classes}")

    members = {c: X[y == c] for c in classes}
    # fsum keeps the totals independent of summation order
    ssw = {c: math.fsum(pdist(members[c])) if len(members[c]) > 1 else 0.0 for c in classes}

    ssb: Dict[str, float] = {}
    terms: List[float] = []
    infinite: List[str] = []
    for a, i in enumerate(classes):
        for j in classes[a + 1:]:
            between = math.fsum(cdist(members[i], members[j]).ravel())
            ssb[pair_key(i, j)] = between
            if between > 0:
                terms.append((ssw[i] + ssw[j]) / between)
            else:
                infinite.append(pair_key(i, j))

    rho_finite = math.fsum(terms)
    if infinite:
        logger.warning(f"[Evaluation] coincident classes {', '.join(infinite)}; separation ratio is infinite")
    return SeparationBreakdown(
        ssw={str(c): v for c, v in ssw.items()},
        ssb=ssb,
        rho=math.inf if infinite else rho_finite,
        rho_finite=rho_finite,
        infinite_pairs=infinite,
        representation=representation,
    )


@dataclass(frozen=True)
class Projection2D:
    scores: np.ndarray
    components: np.ndarray
    explained_variance_ratio: Tuple[float, float]
    rank_deficient: bool
    labels: np.ndarray
    sources: List[str]
    paths: List[str]

    @property
    def pc1(self) -> np.ndarray:
        return self.scores[:, 0]

    @property
    def pc2(self) -> np.ndarray:
        return self.scores[:, 1]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "path": self.paths,
            "label": self.labels,
            "source": self.sources,
            "pc1": self.pc1,
            "pc2": self.pc2,
        })

    def summary(self) -> dict:
        return {
            "explained_variance_ratio": list(self.explained_variance_ratio),
            "rank_deficient": self.rank_deficient,
            "n": int(len(self.scores)),
            "p": int(self.components.shape[1]),
        }


def principal_axes(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """
    Top two principal directions of a data matrix

    Returns:
        (centered X, (2, p) unit components or zero rows, per-component
        variance, numerical rank of the centered data)
    """
    n, p = X.shape
    centered = X - X.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    tolerance = singular[0] * max(n, p) * np.finfo(np.float64).eps if singular.size else 0.0
    rank = int(np.count_nonzero(singular > tolerance))

    components = vt[:2].copy()
    variance = singular[:2] ** 2 / (n - 1)
    for k in range(2):
        if k >= rank:
            components[k] = 0.0
            variance[k] = 0.0
            continue
        # largest-magnitude entry positive
        if components[k, np.argmax(np.abs(components[k]))] < 0:
            components[k] = -components[k]
    total = float((singular ** 2).sum()) / (n - 1)
    return centered, components, variance / total if total > 0 else np.zeros(2), rank


def pca_project(data: Sequence[LabeledInstance]) -> Projection2D:
    """
    Project labeled feature vectors onto their first two principal directions

    Covariance of the mean-centered data, no variance scaling. If the centered
    data has rank < 2 the second component is zero and rank_deficient is set.
    """
    X, y = stack_instances(data)
    n, p = X.shape
    if n < 3 or p < 2:
        raise ValidationError(f"PCA needs at least 3 instances and 2 features, got n={n}, p={p}")

    centered, components, ratio, rank = principal_axes(X)
    if rank < 2:
        logger.warning(f"[Evaluation] centered data has rank {rank}; second component set to zero")
    return Projection2D(
        scores=centered @ components.T,
        components=components,
        explained_variance_ratio=(float(ratio[0]), float(ratio[1])),
        rank_deficient=rank < 2,
        labels=y,
        sources=[inst.source for inst in data],
        paths=[inst.path or "" for inst in data],
    )


def evaluate_model(forest: Forest, data: Sequence[LabeledInstance]) -> float:
    """Accuracy of a trained forest on labeled instances"""
    X, y = stack_instances(data)
    return accuracy(forest.predict(X), y)
