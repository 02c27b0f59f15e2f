"""Training-set maintenance and nearest-mean classification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np


class DimensionMismatch(ValueError):
    """Feature vector length differs from the existing clusters'."""


class EmptyTrainingSet(ValueError):
    """Classification asked against a training set with no clusters."""


@dataclass(frozen=True)
class Cluster:
    mean: np.ndarray
    count: int

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.count < 1:
            raise ValueError("cluster count must be >= 1")


@dataclass(frozen=True)
class TrainingSet:
    """Per-subject mean feature vectors with their observation counts."""

    clusters: Dict[int, Cluster] = field(default_factory=dict)

    def dimensions(self):
        for cluster in self.clusters.values():
            return int(cluster.mean.shape[0])
        return None


@dataclass(frozen=True)
class ResultSet:
    """Subjects ranked by ascending distance, ties broken by subject id."""

    ranked: Tuple[Tuple[int, float], ...]

    def best(self) -> int:
        return self.ranked[0][0]


def train(ts: TrainingSet, subject_id: int, features: np.ndarray) -> TrainingSet:
    """Incremental mean update: mean' = (mean*count + features) / (count+1)."""
    features = np.asarray(features, dtype=np.float64)
    dims = ts.dimensions()
    if dims is not None and features.shape[0] != dims:
        raise DimensionMismatch(
            "expected %d-dimensional features, got %d" % (dims, features.shape[0]))
    clusters = dict(ts.clusters)
    existing = clusters.get(subject_id)
    if existing is None:
        clusters[subject_id] = Cluster(mean=features.copy(), count=1)
    else:
        merged = (existing.mean * existing.count + features) / (existing.count + 1)
        clusters[subject_id] = Cluster(mean=merged, count=existing.count + 1)
    return TrainingSet(clusters=clusters)


def classify(ts: TrainingSet, features: np.ndarray) -> ResultSet:
    """Euclidean distance to every cluster mean, ascending."""
    if not ts.clusters:
        raise EmptyTrainingSet("no training data to classify against")
    features = np.asarray(features, dtype=np.float64)
    dims = ts.dimensions()
    if features.shape[0] != dims:
        raise DimensionMismatch(
            "expected %d-dimensional features, got %d" % (dims, features.shape[0]))
    ranked: List[Tuple[float, int]] = []
    for subject_id, cluster in ts.clusters.items():
        distance = float(np.linalg.norm(features - cluster.mean))
        ranked.append((distance, subject_id))
    ranked.sort()
    return ResultSet(ranked=tuple((sid, dist) for dist, sid in ranked))


def interpret_as_binary(outputs) -> int:
    """Read a float vector as binary digits: doubling accumulator, +1 when > 0.5."""
    result = 0
    for value in outputs:
        result *= 2
        if value > 0.5:
            result += 1
    return result
