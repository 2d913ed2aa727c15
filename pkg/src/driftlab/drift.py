"""Prototype drift compensation between consecutive feature extractors.

Four ways of moving stored prototypes into a new feature space:

* naive: leave them where they are;
* learned (LDC): fit a projector from old to new features on current data by
  minimising the mean squared error, then push every prototype through it;
* SDC: shift each prototype by a Gaussian-kernel weighted mean of the
  per-sample drift vectors observed on current data;
* oracle: recompute the class means from the original old-task data
  (analysis only, it needs the old samples).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .errors import DataError, ParameterError, StateError
from .evaluation import accuracy_over_seen

VARIANTS = ("linear", "linear_bias", "linear_relu", "mlp")


class Projector:
    """Trainable map between two ``dim``-dimensional feature spaces.

    Every variant starts as the identity map, except ``linear_relu`` which
    starts as ``ReLU(x)``. The ``mlp`` variant is ``x + W2 relu(W1 x + b1) + b2``
    with the output layer zero-initialised.
    """

    def __init__(self, dim, variant="linear", hidden=None, rng=None):
        if variant not in VARIANTS:
            raise ParameterError(f"unknown projector variant {variant!r}; choose from {VARIANTS}")
        self.dim = int(dim)
        self.variant = variant
        self.hidden = int(hidden or dim)
        self.losses: list[float] = []
        self.final_loss = None
        if variant == "linear":
            self.net = nn.Sequential(nn.Linear(dim, dim, bias=False, init="identity"))
        elif variant == "linear_bias":
            self.net = nn.Sequential(nn.Linear(dim, dim, bias=True, init="identity"))
        elif variant == "linear_relu":
            self.net = nn.Sequential(nn.Linear(dim, dim, bias=False, init="identity"), nn.ReLU())
        else:
            rng = np.random.default_rng(rng)
            inner = nn.Sequential(
                nn.Linear(dim, self.hidden, rng=rng),
                nn.ReLU(),
                nn.Linear(self.hidden, dim, init="zeros"),
            )
            self.net = nn.Sequential(nn.Residual(inner))

    def __call__(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.dim:
            raise StateError(f"projector expects dim {self.dim}, got {features.shape[-1]}")
        return self.net.apply(features)

    @classmethod
    def identity(cls, dim):
        return cls(dim, "linear")

    @classmethod
    def from_matrix(cls, weight, bias=None):
        """Linear projector with the given weights (and optional bias)."""
        weight = np.asarray(weight, dtype=np.float64)
        proj = cls(weight.shape[0], "linear" if bias is None else "linear_bias")
        layer = proj.net.layers[0]
        layer.weight[...] = weight
        if bias is not None:
            layer.bias[...] = bias
        return proj

    @property
    def weight(self):
        """Weight of the first linear layer."""
        first = self.net.layers[0]
        return first.weight if isinstance(first, nn.Linear) else first.inner.layers[0].weight

    @property
    def bias(self):
        first = self.net.layers[0]
        return first.bias if isinstance(first, nn.Linear) else None

    def describe(self):
        return {"dim": self.dim, "variant": self.variant, "hidden": self.hidden}

    @classmethod
    def from_description(cls, desc):
        return cls(desc["dim"], desc["variant"], desc.get("hidden"), rng=0)


@dataclass
class ProjectorConfig:
    """Training settings for a drift projector (Adam on minibatch MSE)."""

    variant: str = "linear"
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 128
    hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown projector variant {self.variant!r}")
        if self.epochs < 1:
            raise ParameterError("projector epochs must be ≥ 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ParameterError("projector lr and batch_size must be positive")

    @classmethod
    def supervised(cls, **kw):
        return cls(**{"epochs": 20, "lr": 1e-3, **kw})

    @classmethod
    def semi_supervised(cls, **kw):
        return cls(**{"epochs": 100, "lr": 5e-3, **kw})

    def to_dict(self):
        return asdict(self)


def fit_projector(old_features, new_features, cfg: ProjectorConfig):
    """Fit a projector so that ``projector(old) ≈ new`` in mean squared error."""
    old = nn.as_matrix(old_features, "old_features")
    new = nn.as_matrix(new_features, "new_features")
    if old.shape != new.shape:
        raise StateError(f"feature shapes differ between extractors: {old.shape} vs {new.shape}")
    rng = np.random.default_rng(cfg.seed)
    proj = Projector(old.shape[1], cfg.variant, cfg.hidden, rng=rng)
    opt = nn.Adam(proj.net.params, lr=cfg.lr)
    n = len(old)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = nn.mse_loss(proj.net.forward(old[idx]), new[idx])
            proj.net.backward(grad)
            opt.step(proj.net.grads)
            total += loss * len(idx)
        proj.losses.append(total / n)
    proj.final_loss = nn.mse_loss(proj.net.apply(old), new)[0]
    return proj


def _require_frozen(extractor, name):
    if getattr(extractor, "frozen", True) is False:
        raise StateError(f"{name} extractor must be a frozen snapshot")


def _paired_features(prev, curr, x):
    if hasattr(x, "y"):
        raise TypeError("pass the unlabeled inputs (task.x), not the task itself")
    _require_frozen(prev, "previous")
    _require_frozen(curr, "current")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ParameterError("drift estimation needs a non-empty batch of samples")
    old, new = np.asarray(prev(x)), np.asarray(curr(x))
    if old.shape[1] != new.shape[1]:
        raise StateError(f"extractor dims differ: {old.shape[1]} vs {new.shape[1]}")
    return old, new


def train_projector(prev, curr, x, cfg: ProjectorConfig):
    """Learn the old-to-new feature map on the unlabeled current-task inputs ``x``."""
    return fit_projector(*_paired_features(prev, curr, x), cfg)


def ldc_correct(pool, projector, task=None, classes=None):
    """Copy of ``pool`` with the chosen (default: all) prototypes projected.

    ``task`` stamps the moved entries as updated at that task.
    """
    if projector.dim != pool.dim:
        raise StateError(f"projector dim {projector.dim} differs from pool dim {pool.dim}")
    out = pool.copy()
    ids, protos = pool.matrix(classes)
    if len(ids):
        moved = projector(protos)
        for c, v in zip(ids.tolist(), moved):
            entry = out.entries[c]
            entry.vector = v
            if task is not None:
                entry.updated_task = max(int(task), entry.updated_task)
    return out


def sdc_shift(old_features, new_features, prototypes, sigma):
    """Move each prototype by the kernel-weighted mean drift of nearby samples.

    Returns ``(shifted, fallback)``; ``fallback[k]`` is True where every weight
    underflowed to zero and the plain mean drift was used instead.
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    old = np.asarray(old_features, dtype=np.float64)
    drift = np.asarray(new_features, dtype=np.float64) - old
    protos = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if len(old) == 0:
        raise ParameterError("SDC needs at least one sample")
    sq = ((old[None, :, :] - protos[:, None, :]) ** 2).sum(axis=2)
    w = np.exp(-sq / (2.0 * sigma**2))
    totals = w.sum(axis=1)
    fallback = totals == 0.0
    w[fallback] = 1.0
    totals[fallback] = len(old)
    return protos + (w @ drift) / totals[:, None], fallback


def sdc_correct(pool, prev, curr, x, sigma, task):
    """Copy of ``pool`` shifted by SDC; also returns the classes that fell back."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    old, new = _paired_features(prev, curr, x)
    out = pool.copy()
    ids, protos = pool.matrix()
    if not len(ids):
        return out, []
    if old.shape[1] != pool.dim:
        raise StateError(f"feature dim {old.shape[1]} differs from pool dim {pool.dim}")
    shifted, fallback = sdc_shift(old, new, protos, sigma)
    for c, v in zip(ids.tolist(), shifted):
        out.entries[c].vector = v
        out.entries[c].updated_task = max(int(task), out.entries[c].updated_task)
    return out, ids[fallback].tolist()


def oracle_correct(pool, curr, old_tasks, task):
    """Recompute every pooled prototype from all original samples of its class."""
    out = pool.copy()
    for c in pool.classes:
        xs = [t.x[t.y == c] for t in old_tasks if c in t.classes]
        if not xs or sum(len(a) for a in xs) == 0:
            raise DataError(f"no old data available for class {c}")
        entry = out.entries[c]
        entry.vector = np.asarray(curr(np.concatenate(xs))).mean(axis=0)
        entry.updated_task = max(int(task), entry.updated_task)
    return out


def chain_report(extractors, pools, test_stream, prefix=None, normalize=False):
    """NCM accuracy of each prototype strategy after every task.

    ``extractors`` and ``pools`` map a strategy name to one entry per task
    (the extractor used for classification and the pool it classifies with).
    With ``prefix=k`` only classes of the first ``k`` tasks are scored, and
    rows start at task ``k``.
    """
    names = list(pools)
    if set(names) != set(extractors):
        raise StateError("strategy sets of extractors and pools differ")
    lengths = {len(pools[s]) for s in names} | {len(extractors[s]) for s in names}
    if len(lengths) != 1:
        raise StateError(f"strategies cover different numbers of tasks: {sorted(lengths)}")
    num_tasks = lengths.pop()
    if num_tasks > len(test_stream):
        raise StateError("more task snapshots than tasks in the test stream")
    rows = []
    first = 1 if prefix is None else prefix
    for t in range(first, num_tasks + 1):
        k = t if prefix is None else prefix
        classes = test_stream.classes_up_to(k)
        x = np.concatenate([task.x for task in test_stream.tasks[:k]])
        y = np.concatenate([task.y for task in test_stream.tasks[:k]])
        for s in names:
            pool = pools[s][t - 1].subset(classes)
            acc = accuracy_over_seen(extractors[s][t - 1], pool, x, y, normalize=normalize)
            rows.append({"task": t, "strategy": s, "prefix": k, "accuracy": acc})
    return rows

