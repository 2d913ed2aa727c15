"""Class prototypes and optional per-class memories of samples or features."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, ParameterError


@dataclass
class PrototypeEntry:
    vector: np.ndarray
    origin_task: int
    updated_task: int


class PrototypePool:
    """One stored mean feature vector per seen class."""

    def __init__(self, dim):
        self.dim = int(dim)
        self.entries: dict[int, PrototypeEntry] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, c):
        return int(c) in self.entries

    def __getitem__(self, c):
        return self.entries[int(c)].vector

    @property
    def classes(self):
        return sorted(self.entries)

    def add(self, c, vector, task):
        vector = np.array(vector, dtype=np.float64).reshape(-1)
        if vector.shape != (self.dim,):
            raise DimensionError(f"prototype for class {c} has dim {vector.size}, pool dim {self.dim}")
        self.entries[int(c)] = PrototypeEntry(vector, int(task), int(task))
        return self

    def add_many(self, prototypes, task):
        for c, v in prototypes.items():
            self.add(c, v, task)
        return self

    def matrix(self, classes=None):
        """``(class_ids, prototypes)`` with rows in ascending class id order."""
        ids = self.classes if classes is None else [int(c) for c in classes]
        if not ids:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.dim))
        return np.array(ids, dtype=np.int64), np.stack([self.entries[c].vector for c in ids])

    def subset(self, classes):
        out = PrototypePool(self.dim)
        for c in classes:
            out.entries[int(c)] = copy.deepcopy(self.entries[int(c)])
        return out

    def copy(self):
        return copy.deepcopy(self)

    def describe(self):
        return {
            "dim": self.dim,
            "classes": self.classes,
            "origin": [self.entries[c].origin_task for c in self.classes],
            "updated": [self.entries[c].updated_task for c in self.classes],
        }

    @classmethod
    def from_description(cls, desc, vectors):
        pool = cls(desc["dim"])
        for c, o, u, v in zip(desc["classes"], desc["origin"], desc["updated"], vectors):
            pool.entries[int(c)] = PrototypeEntry(np.array(v, dtype=np.float64), int(o), int(u))
        return pool

    def __eq__(self, other):
        if not isinstance(other, PrototypePool):
            return NotImplemented
        return self.describe() == other.describe() and all(
            np.array_equal(self[c], other[c]) for c in self.classes
        )

    __hash__ = None


def compute_prototypes(extractor, task, labeled_only=True):
    """Mean feature of each class in ``task``, keyed by class id.

    ``extractor`` is any callable mapping a batch of inputs to features.
    """
    out = {}
    for c in task.classes:
        mask = task.class_mask(c, labeled_only)
        if not mask.any():
            kind = "labeled " if labeled_only else ""
            raise DataError(f"class {c} has no {kind}samples to compute a prototype from")
        out[c] = np.asarray(extractor(task.x[mask]), dtype=np.float64).mean(axis=0)
    return out


def update_pool(pool, updates, task):
    """Replace the prototypes named in ``updates`` and stamp them with ``task``."""
    unknown = [c for c in updates if int(c) not in pool.entries]
    if unknown:
        raise KeyError(f"classes {sorted(unknown)} are not in the pool")
    for c, v in updates.items():
        entry = pool.entries[int(c)]
        if task < entry.updated_task:
            raise ParameterError(f"class {c} already updated at task {entry.updated_task}")
        v = np.array(v, dtype=np.float64).reshape(-1)
        if v.shape != (pool.dim,):
            raise DimensionError(f"update for class {c} has dim {v.size}, pool dim {pool.dim}")
        entry.vector = v
        entry.updated_task = int(task)
    return pool


class FeatureBank:
    """A bounded per-class memory.

    In ``"samples"`` mode items are raw inputs (exemplars for nearest mean of
    exemplars); in ``"features"`` mode they are feature vectors that get pushed
    through each drift projector. When a class has more candidates than
    ``capacity`` a uniform random subset is kept.
    """

    MODES = ("samples", "features")

    def __init__(self, capacity, mode="samples", seed=0):
        if mode not in self.MODES:
            raise ParameterError(f"mode must be one of {self.MODES}, got {mode!r}")
        if capacity < 1:
            raise ParameterError("capacity must be ≥ 1")
        self.capacity = int(capacity)
        self.mode = mode
        self.seed = seed
        self.items: dict[int, np.ndarray] = {}

    def classes(self):
        return sorted(self.items)

    def insert(self, c, items):
        items = np.asarray(items, dtype=np.float64)
        if len(items) == 0:
            raise DataError(f"no items to store for class {c}")
        if len(items) > self.capacity:
            rng = np.random.default_rng([self.seed, int(c)])
            items = items[np.sort(rng.choice(len(items), self.capacity, replace=False))]
        self.items[int(c)] = items.copy()
        return self

    def insert_task(self, task, extractor=None, labeled_only=True):
        """Store every class of ``task``; features mode needs the ``extractor``."""
        if self.mode == "features" and extractor is None:
            raise ParameterError("features mode needs an extractor to embed the task")
        for c in task.classes:
            x = task.x[task.class_mask(c, labeled_only)]
            self.insert(c, x if self.mode == "samples" else extractor(x))
        return self

    def _require(self, c):
        if len(self.items.get(int(c), ())) == 0:
            raise DataError(f"feature bank holds nothing for class {c}")
        return self.items[int(c)]

    def recompute_means(self, extractor=None, classes=None):
        """Class means of the stored items.

        Samples mode embeds the exemplars with ``extractor`` first; features
        mode averages the stored (already projected) features.
        """
        classes = self.classes() if classes is None else classes
        out = {}
        for c in classes:
            items = self._require(c)
            if self.mode == "samples":
                if extractor is None:
                    raise ParameterError("samples mode needs an extractor")
                items = extractor(items)
            out[int(c)] = np.asarray(items).mean(axis=0)
        return out

    def project(self, projector, classes=None):
        """Replace stored features by their image under ``projector``."""
        if self.mode != "features":
            raise ParameterError("only feature banks can be projected")
        for c in self.classes() if classes is None else classes:
            self.items[int(c)] = np.asarray(projector(self._require(c)))
        return self
