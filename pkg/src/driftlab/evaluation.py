"""Nearest-class-mean classification, accuracy metrics and drift-distance analysis."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError, InvariantViolation, NumericError, StateError

_CHUNK = 4096


def _l2_normalize(a):
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(norms == 0, 1.0, norms)


def nearest_prototype(features, class_ids, prototypes):
    """Class id of the closest prototype (Euclidean) for every feature row.

    Rows of ``prototypes`` must follow ascending ``class_ids`` so that
    ``argmin`` breaks ties toward the smaller id.
    """
    out = np.empty(len(features), dtype=np.int64)
    for start in range(0, len(features), _CHUNK):
        block = features[start : start + _CHUNK]
        d2 = ((block[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=2)
        out[start : start + _CHUNK] = class_ids[np.argmin(d2, axis=1)]
    return out


def ncm_classify(extractor, pool, x, normalize=False):
    """Predict the class whose prototype is nearest to ``extractor(x)``.

    Returns an int for a single sample, an array for a batch.
    """
    if len(pool) == 0:
        raise StateError("cannot classify with an empty prototype pool")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    feats = np.asarray(extractor(x[None] if single else x), dtype=np.float64)
    ids, protos = pool.matrix()
    if feats.shape[1] != protos.shape[1]:
        raise StateError(f"feature dim {feats.shape[1]} differs from pool dim {protos.shape[1]}")
    if normalize:
        feats, protos = _l2_normalize(feats), _l2_normalize(protos)
    pred = nearest_prototype(feats, ids, protos)
    return int(pred[0]) if single else pred


def accuracy_over_seen(extractor, pool, x, y, normalize=False):
    """Fraction of samples whose NCM prediction equals their label."""
    y = np.asarray(y)
    if len(y) == 0:
        raise DataError("evaluation set is empty")
    unseen = sorted(set(np.unique(y).tolist()) - set(pool.classes))
    if unseen:
        raise DataError(f"evaluation samples from classes without prototypes: {unseen}")
    pred = ncm_classify(extractor, pool, x, normalize=normalize)
    return float(np.count_nonzero(pred == y) / len(y))


def confusion_matrix(y_true, y_pred, classes):
    index = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        m[index[int(t)], index[int(p)]] += 1
    return m


def incremental_accuracy(a_last):
    """Running mean of per-task accuracies: ``A_inc`` after each task."""
    a = np.asarray(a_last, dtype=np.float64)
    return (np.cumsum(a) / np.arange(1, len(a) + 1)).tolist()


@dataclass
class DriftDistances:
    classes: list
    distances: np.ndarray
    mean: float
    std: float
    counts: np.ndarray
    edges: np.ndarray

    def as_dict(self):
        return {
            "classes": self.classes,
            "distances": self.distances.tolist(),
            "mean": self.mean,
            "std": self.std,
        }


def cosine_distances(corrected, oracle):
    """Per-class ``1 - cos`` between two pools over the same classes."""
    if set(corrected.classes) != set(oracle.classes):
        raise StateError("pools must hold the same classes")
    ids = corrected.classes
    a, b = corrected.matrix(ids)[1], oracle.matrix(ids)[1]
    for name, m in (("corrected", a), ("oracle", b)):
        zero = np.linalg.norm(m, axis=1) == 0
        if zero.any():
            raise NumericError(f"{name} prototype of class {ids[int(np.argmax(zero))]} has zero norm")
    cos = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return ids, np.clip(1.0 - cos, 0.0, 2.0)


def cosine_drift_distribution(corrected, oracle, bins=20, value_range=None):
    """Distribution of cosine distances between corrected and oracle prototypes.

    ``bins`` is a count or an explicit array of edges; by default the
    histogram spans ``[0, max distance]``.
    """
    ids, dist = cosine_distances(corrected, oracle)
    if value_range is None and np.isscalar(bins):
        value_range = (0.0, max(float(dist.max()) if len(dist) else 0.0, 1e-12))
    counts, edges = np.histogram(dist, bins=bins, range=value_range)
    return DriftDistances(
        classes=list(ids),
        distances=dist,
        mean=float(dist.mean()) if len(dist) else 0.0,
        std=float(dist.std()) if len(dist) else 0.0,
        counts=counts,
        edges=edges,
    )


def write_histogram_csv(counts, edges, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(n)])


@dataclass
class TaskRecord:
    """Metrics of one prototype strategy after one task."""

    task: int
    method: str
    a_last: float
    a_inc: float
    seed: int
    config_hash: str = ""
    cosine: dict = field(default_factory=dict)
    fallback_classes: list = field(default_factory=list)
    wall_clock: float = 0.0

    def __post_init__(self):
        for name in ("a_last", "a_inc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantViolation(f"{name}={v} outside [0, 1]")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def write_jsonl(records, path, append=False):
    with open(path, "a" if append else "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write((rec.to_json() if isinstance(rec, TaskRecord) else json.dumps(rec)) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
