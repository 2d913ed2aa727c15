"""Continual training of the feature extractor and its classifier head."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import nn
from .data import Task
from .errors import FormatError, ParameterError, StateError

CHECKPOINT_VERSION = 1


class FeatureExtractor:
    """An MLP mapping inputs to a ``feature_dim``-dimensional feature space.

    Call it on a batch to get features. ``snapshot()`` returns a frozen deep
    copy whose parameter arrays are read-only.
    """

    def __init__(self, net: nn.Module, feature_dim: int, frozen: bool = False):
        self.net = net
        self.feature_dim = int(feature_dim)
        self.frozen = frozen

    @classmethod
    def mlp(cls, input_dim, hidden=(64, 64), feature_dim=16, rng=None):
        rng = np.random.default_rng(rng)
        return cls(nn.mlp([input_dim, *hidden, feature_dim], rng), feature_dim)

    @property
    def input_dim(self):
        first = self.net.layers[0] if isinstance(self.net, nn.Sequential) else self.net
        return first.in_dim

    def __call__(self, x):
        return self.net.apply(nn.as_matrix(x))

    def describe(self):
        return {"feature_dim": self.feature_dim, "net": self.net.describe()}

    def snapshot(self):
        return snapshot(self)

    def copy(self):
        """Trainable deep copy."""
        twin = copy.deepcopy(self)
        twin.frozen = False
        for p in twin.net.params:
            p.flags.writeable = True
        return twin


def snapshot(extractor):
    """Frozen deep copy of ``extractor``; later training cannot touch it."""
    twin = copy.deepcopy(extractor)
    twin.frozen = True
    for p in twin.net.params:
        p.flags.writeable = False
    return twin


class ClassifierHead:
    """Linear classifier over global class ids, grown one task at a time.

    Column ``j`` of the logits scores ``classes[j]``.
    """

    def __init__(self, feature_dim):
        self.feature_dim = int(feature_dim)
        self.classes: list[int] = []
        self.layer: nn.Linear | None = None

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def weight(self):
        return self.layer.weight if self.layer else np.zeros((0, self.feature_dim))

    @property
    def bias(self):
        return self.layer.bias if self.layer else np.zeros(0)

    def set_parameters(self, weight, bias):
        self.layer = nn.Linear(self.feature_dim, len(weight), init="zeros")
        self.layer.weight[...] = weight
        self.layer.bias[...] = bias

    def grow(self, new_classes, rng):
        """Append rows for ``new_classes`` with the usual fan-in uniform init.

        Existing rows are copied unchanged, so old logits are preserved.
        """
        new = [int(c) for c in new_classes if int(c) not in self.classes]
        if not new:
            return self
        bound = 1.0 / np.sqrt(self.feature_dim)
        w = rng.uniform(-bound, bound, size=(len(new), self.feature_dim))
        b = rng.uniform(-bound, bound, size=len(new))
        self.set_parameters(np.vstack([self.weight, w]), np.concatenate([self.bias, b]))
        self.classes.extend(new)
        return self

    def column_of(self, labels):
        lookup = {c: j for j, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise IndexError(f"label {exc.args[0]} has no head row") from None

    def __call__(self, features):
        """Logits, one column per class.

        Each column is reduced on its own so that growing the head leaves the
        existing columns bit-identical (a matmul may reorder its sums with the
        output width).
        """
        features = np.asarray(features, dtype=np.float64)
        if self.layer is None:
            return np.zeros((len(features), 0))
        return np.einsum("nd,cd->nc", features, self.weight, optimize=False) + self.bias

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class TrainConfig:
    """Optimisation settings for one continual run.

    Epoch counts and learning-rate milestones are multiplied by
    ``epoch_scale`` (rounded, at least one epoch).
    """

    epochs_first: int = 200
    epochs_incremental: int = 100
    epoch_scale: float = 1.0
    lr_first: float = 0.05
    lr_incremental: float = 0.01
    milestones_first: tuple = (60, 120, 160)
    milestones_incremental: tuple = (45, 90)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lwf_lambda: float = 10.0
    temperature: float = 2.0
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        self.milestones_first = tuple(self.milestones_first)
        self.milestones_incremental = tuple(self.milestones_incremental)
        if self.epochs_first < 1 or self.epochs_incremental < 1 or self.epoch_scale <= 0:
            raise ParameterError("epochs must be ≥ 1")
        if self.lwf_lambda < 0:
            raise ParameterError("lwf_lambda must be ≥ 0")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.batch_size < 1 or min(self.lr_first, self.lr_incremental) <= 0:
            raise ParameterError("batch_size and learning rates must be positive")

    def schedule(self, first):
        epochs = self.epochs_first if first else self.epochs_incremental
        lr = self.lr_first if first else self.lr_incremental
        stones = self.milestones_first if first else self.milestones_incremental
        scaled = max(1, round(epochs * self.epoch_scale))
        return scaled, lr, tuple(round(m * self.epoch_scale) for m in stones)

    def to_dict(self):
        d = asdict(self)
        d["milestones_first"] = list(self.milestones_first)
        d["milestones_incremental"] = list(self.milestones_incremental)
        return d


def _session_rng(cfg, x, salt):
    # one generator per (seed, session) so runs replay exactly
    return np.random.default_rng([cfg.seed, salt, len(x)])


def _train_session(extractor, head, x, y, cfg, first, salt, teacher=None):
    """Optimise ``extractor`` and ``head`` in place on (x, y).

    ``teacher`` is an optional ``(prev_extractor, prev_head)`` pair whose
    softened outputs on the current batch are distilled into the leading
    columns of ``head``.
    """
    if extractor.frozen:
        raise StateError("cannot train a frozen extractor")
    epochs, lr, milestones = cfg.schedule(first)
    rng = _session_rng(cfg, x, salt)
    head_layer = head.layer
    params = extractor.net.params + head_layer.params
    opt = nn.SGD(params, lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    cols = head.column_of(y)
    n = len(x)
    use_kd = teacher is not None and cfg.lwf_lambda > 0
    if use_kd:
        prev_extractor, prev_head = teacher
        n_old = prev_head.num_classes
        teacher_logits = prev_head(prev_extractor(x))
    for epoch in range(epochs):
        opt.lr = lr * cfg.lr_decay ** sum(epoch >= m for m in milestones)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            feats = extractor.net.forward(x[idx])
            logits = head_layer.forward(feats)
            _, grad = nn.cross_entropy(logits, cols[idx])
            if use_kd:
                _, kd_grad = nn.distill_ce(teacher_logits[idx], logits[:, :n_old], cfg.temperature)
                grad[:, :n_old] += cfg.lwf_lambda * kd_grad
            extractor.net.backward(head_layer.backward(grad))
            opt.step(extractor.net.grads + head_layer.grads)
    return extractor, head


def _check_task(task):
    if task is None or len(task) == 0:
        raise ParameterError("cannot train on an empty task")


def train_finetune(extractor, head, task: Task, cfg: TrainConfig):
    """Plain cross-entropy training on the current task only.

    Returns a trained copy of ``(extractor, head)``; the inputs are untouched.
    """
    _check_task(task)
    extractor, head = extractor.copy(), head.copy()
    head.grow(task.classes, np.random.default_rng([cfg.seed, task.index, 7]))
    return _train_session(extractor, head, task.x, task.y, cfg, task.index == 1, task.index)


def train_lwf(extractor, prev_extractor, head, prev_head, task: Task, cfg: TrainConfig):
    """Cross-entropy plus ``lwf_lambda`` times distillation from the previous model.

    On the first task (no previous head) this reduces to fine-tuning.
    """
    _check_task(task)
    has_prev = prev_head is not None and prev_head.num_classes > 0
    if task.index > 1 and (prev_extractor is None or not has_prev):
        raise StateError(f"task {task.index} needs the previous extractor and head snapshots")
    extractor, head = extractor.copy(), head.copy()
    head.grow(task.classes, np.random.default_rng([cfg.seed, task.index, 7]))
    teacher = (prev_extractor, prev_head) if has_prev else None
    return _train_session(
        extractor, head, task.x, task.y, cfg, task.index == 1, task.index, teacher=teacher
    )


def train_joint(extractor, head, tasks_so_far: Sequence[Task], cfg: TrainConfig):
    """Continue training on the union of every task seen so far."""
    tasks = list(tasks_so_far)
    if not tasks or sum(len(t) for t in tasks) == 0:
        raise ParameterError("joint training needs at least one non-empty task")
    extractor, head = extractor.copy(), head.copy()
    for t in tasks:
        head.grow(t.classes, np.random.default_rng([cfg.seed, t.index, 7]))
    x = np.concatenate([t.x for t in tasks])
    y = np.concatenate([t.y for t in tasks])
    return _train_session(extractor, head, x, y, cfg, len(tasks) == 1, tasks[-1].index)


class ContinualTrainer(Protocol):
    """Anything that turns a task into a new frozen extractor.

    ``session`` receives the current task and all tasks seen before it; a
    strictly exemplar-free trainer must ignore the latter.
    """

    def session(self, task: Task, previous: Sequence[Task]) -> FeatureExtractor: ...


@dataclass
class _SequentialTrainer:
    extractor: FeatureExtractor
    cfg: TrainConfig
    head: ClassifierHead = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.head is None:
            self.head = ClassifierHead(self.extractor.feature_dim)
        self.extractor = self.extractor.copy()

    def _store(self, extractor, head):
        self.extractor, self.head = extractor, head
        frozen = snapshot(extractor)
        self.history.append((frozen, head.copy()))
        return frozen


class FinetuneTrainer(_SequentialTrainer):
    def session(self, task, previous=()):
        return self._store(*train_finetune(self.extractor, self.head, task, self.cfg))


class LwFTrainer(_SequentialTrainer):
    def session(self, task, previous=()):
        prev_ext, prev_head = self.history[-1] if self.history else (None, None)
        return self._store(
            *train_lwf(self.extractor, prev_ext, self.head, prev_head, task, self.cfg)
        )


class JointTrainer(_SequentialTrainer):
    """Upper-bound trainer; uses all past data, so it is not exemplar-free."""

    def session(self, task, previous=()):
        return self._store(*train_joint(self.extractor, self.head, [*previous, task], self.cfg))


TRAINERS = {"finetune": FinetuneTrainer, "lwf": LwFTrainer, "joint": JointTrainer}


# -- checkpoints -------------------------------------------------------------


def _module_arrays(prefix, module):
    return {f"{prefix}/{i}": np.asarray(p) for i, p in enumerate(module.params)}


def _load_params(module, arrays, prefix):
    for i, p in enumerate(module.params):
        key = f"{prefix}/{i}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise FormatError(f"checkpoint entry {key} missing or mis-shaped")
        p[...] = arrays[key]


def save_checkpoint(path, extractor=None, head=None, projector=None, pool=None):
    """Store any subset of model parts in one ``.npz`` with a JSON manifest."""
    manifest = {"format": "driftlab-checkpoint", "version": CHECKPOINT_VERSION}
    arrays = {}
    if extractor is not None:
        manifest["extractor"] = extractor.describe()
        arrays.update(_module_arrays("extractor", extractor.net))
    if head is not None:
        manifest["head"] = {"feature_dim": head.feature_dim, "classes": list(head.classes)}
        arrays["head/weight"], arrays["head/bias"] = head.weight, head.bias
    if projector is not None:
        manifest["projector"] = projector.describe()
        arrays.update(_module_arrays("projector", projector.net))
    if pool is not None:
        manifest["pool"] = pool.describe()
        arrays["pool/prototypes"] = pool.matrix()[1]
    arrays["manifest"] = np.frombuffer(json.dumps(manifest).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns a dict of the stored parts."""
    from .drift import Projector
    from .prototypes import PrototypePool

    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    if "manifest" not in arrays:
        raise FormatError("checkpoint has no manifest")
    manifest = json.loads(arrays["manifest"].tobytes().decode("utf-8"))
    if manifest.get("format") != "driftlab-checkpoint":
        raise FormatError("not a driftlab checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {manifest.get('version')}")
    out = {}
    if "extractor" in manifest:
        desc = manifest["extractor"]
        ext = FeatureExtractor(nn.build_module(desc["net"]), desc["feature_dim"])
        _load_params(ext.net, arrays, "extractor")
        out["extractor"] = ext
    if "head" in manifest:
        head = ClassifierHead(manifest["head"]["feature_dim"])
        head.classes = list(manifest["head"]["classes"])
        if head.classes:
            head.set_parameters(arrays["head/weight"], arrays["head/bias"])
        out["head"] = head
    if "projector" in manifest:
        proj = Projector.from_description(manifest["projector"])
        _load_params(proj.net, arrays, "projector")
        out["projector"] = proj
    if "pool" in manifest:
        out["pool"] = PrototypePool.from_description(manifest["pool"], arrays["pool/prototypes"])
    return out
