"""Class-incremental task streams: generation, label masking, splitting and file I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError

MAGIC = "DRIFTLAB-FEATURES"
FORMAT_VERSION = "v1"


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Task:
    """One training session: samples of a disjoint set of classes.

    ``index`` counts from 1. ``labeled`` marks which samples expose their label
    to prototype computation.
    """

    index: int
    classes: tuple
    x: np.ndarray
    y: np.ndarray
    labeled: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        object.__setattr__(self, "x", _frozen(self.x, np.float64))
        object.__setattr__(self, "y", _frozen(self.y, np.int64))
        object.__setattr__(self, "labeled", _frozen(self.labeled, bool))
        n = len(self.y)
        if self.x.ndim != 2 or self.x.shape[0] != n or self.labeled.shape != (n,):
            raise DataError(f"task {self.index}: inconsistent sample arrays")
        extra = set(np.unique(self.y).tolist()) - set(self.classes)
        if extra:
            raise DataError(f"task {self.index}: labels {sorted(extra)} not in its class set")

    def __len__(self):
        return len(self.y)

    def class_mask(self, c, labeled_only=False):
        mask = self.y == c
        return mask & self.labeled if labeled_only else mask

    def __eq__(self, other):
        if not isinstance(other, Task):
            return NotImplemented
        return (
            self.index == other.index
            and self.classes == other.classes
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.labeled, other.labeled)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TaskStream:
    tasks: tuple
    input_dim: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise DataError("stream must contain ≥ 1 task")
        seen = set()
        for i, task in enumerate(self.tasks, start=1):
            if task.index != i:
                raise DataError(f"task indices must run 1..T, found {task.index} at position {i}")
            if task.x.shape[1] != self.input_dim:
                raise DataError(f"task {i} has dim {task.x.shape[1]}, stream dim {self.input_dim}")
            overlap = seen.intersection(task.classes)
            if overlap:
                raise DataError(f"task {i} repeats classes {sorted(overlap)}")
            seen.update(task.classes)

    @property
    def num_classes(self):
        return sum(len(t.classes) for t in self.tasks)

    @property
    def classes(self):
        return [c for t in self.tasks for c in t.classes]

    def classes_up_to(self, t):
        return [c for task in self.tasks[:t] for c in task.classes]

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __eq__(self, other):
        if not isinstance(other, TaskStream):
            return NotImplemented
        return self.input_dim == other.input_dim and self.tasks == other.tasks

    __hash__ = None


def split_classes(num_classes, num_tasks):
    """Partition class ids ``0..num_classes-1`` into contiguous, near-equal groups."""
    if num_tasks < 1 or num_classes < num_tasks:
        raise ParameterError(f"cannot split {num_classes} classes into {num_tasks} tasks")
    return [a.tolist() for a in np.array_split(np.arange(num_classes), num_tasks)]


def generate_blob_stream(
    num_tasks,
    classes_per_task,
    input_dim,
    samples_per_class,
    class_separation,
    seed,
    noise_std=1.0,
):
    """Isotropic Gaussian classes with means on a sphere of radius ``class_separation``."""
    if input_dim < 2:
        raise ParameterError("input_dim must be at least 2")
    if min(num_tasks, classes_per_task, samples_per_class) < 1:
        raise ParameterError("task, class and sample counts must be ≥ 1")
    if class_separation <= 0 or noise_std <= 0:
        raise ParameterError("class_separation and noise_std must be positive")
    rng = np.random.default_rng(seed)
    num_classes = num_tasks * classes_per_task
    directions = rng.standard_normal((num_classes, input_dim))
    means = class_separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    tasks = []
    for t, group in enumerate(split_classes(num_classes, num_tasks), start=1):
        xs, ys = [], []
        for c in group:
            xs.append(means[c] + noise_std * rng.standard_normal((samples_per_class, input_dim)))
            ys.append(np.full(samples_per_class, c))
        y = np.concatenate(ys)
        tasks.append(Task(t, group, np.concatenate(xs), y, np.ones(len(y), dtype=bool)))
    meta = {
        "generator": "blobs",
        "seed": seed,
        "class_separation": class_separation,
        "noise_std": noise_std,
        "samples_per_class": samples_per_class,
    }
    return TaskStream(tuple(tasks), input_dim, meta)


def labeled_count(fraction, n):
    """Stratified labeled count: round half up, never below one."""
    return max(1, min(n, math.floor(fraction * n + 0.5)))


def apply_label_fraction(stream, fraction, seed):
    """Return a copy of ``stream`` where only a stratified subset keeps its labels."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"label fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    tasks = []
    for task in stream:
        mask = np.zeros(len(task), dtype=bool)
        for c in task.classes:
            idx = np.flatnonzero(task.y == c)
            if len(idx) == 0:
                raise DataError(f"class {c} has no samples")
            keep = rng.permutation(idx)[: labeled_count(fraction, len(idx))]
            mask[keep] = True
        tasks.append(Task(task.index, task.classes, task.x, task.y, mask))
    return TaskStream(tuple(tasks), stream.input_dim, {**stream.metadata, "label_fraction": fraction})


def train_test_split(stream, test_fraction, seed):
    """Stratified per-class split of every task into train and test streams."""
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for task in stream:
        tr_idx, te_idx = [], []
        for c in task.classes:
            idx = rng.permutation(np.flatnonzero(task.y == c))
            n_test = max(1, int(round(test_fraction * len(idx))))
            if n_test >= len(idx):
                raise DataError(f"class {c} has too few samples to split")
            te_idx.append(np.sort(idx[:n_test]))
            tr_idx.append(np.sort(idx[n_test:]))
        for out, parts in ((train, tr_idx), (test, te_idx)):
            sel = np.concatenate(parts)
            out.append(Task(task.index, task.classes, task.x[sel], task.y[sel], task.labeled[sel]))
    return (
        TaskStream(tuple(train), stream.input_dim, dict(stream.metadata)),
        TaskStream(tuple(test), stream.input_dim, dict(stream.metadata)),
    )


# -- 2D drift scenarios -------------------------------------------------------


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def drift_transform(points, theta, scale, translation):
    """Apply ``x -> scale * R(theta) x + translation`` row-wise."""
    points = np.asarray(points, dtype=np.float64)
    return scale * points @ rotation(theta).T + np.asarray(translation, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DriftScenario2D:
    """Labeled 2D samples before (``x_before``) and after (``x_after``) a similarity drift.

    ``x_source`` holds the pre-drift points that were mapped to ``x_after``;
    it is ``x_before`` itself for paired scenarios. ``true_means`` are the drifted means of the observed samples, i.e. the
    transform of each class's empirical mean before drift; ``population_means``
    are the transformed distribution means.
    """

    means: np.ndarray
    covs: np.ndarray
    theta: float
    scale: float
    translation: np.ndarray
    x_before: np.ndarray
    y_before: np.ndarray
    x_after: np.ndarray
    y_after: np.ndarray
    x_source: np.ndarray
    true_means: np.ndarray
    population_means: np.ndarray
    paired: bool

    @property
    def num_classes(self):
        return len(self.means)

    def transform(self, points):
        return drift_transform(points, self.theta, self.scale, self.translation)


def _check_psd(cov, k):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
        raise ParameterError(f"covariance {k} must be a symmetric 2x2 matrix")
    if np.linalg.eigvalsh(cov).min() < -1e-12:
        raise ParameterError(f"covariance {k} is not positive semi-definite")
    return cov


def generate_drift_scenario(
    seed, theta, scale, translation, class_means, class_covs, n, paired=True
):
    """Sample 2D classes and drift them by a rotation, scaling and translation.

    With ``paired`` (the default) the after-drift samples are exactly the
    before-drift points pushed through the transform. Otherwise fresh samples
    are drawn from each class before transforming.
    """
    if scale == 0:
        raise ParameterError("scale must be non-zero")
    means = np.asarray(class_means, dtype=np.float64)
    if means.ndim != 2 or means.shape[1] != 2:
        raise ParameterError("class_means must have shape (K, 2)")
    covs = np.stack([_check_psd(c, k) for k, c in enumerate(class_covs)])
    if len(covs) != len(means):
        raise ParameterError("need one covariance per class mean")
    counts = [n] * len(means) if np.isscalar(n) else list(n)
    if len(counts) != len(means) or min(counts) < 1:
        raise ParameterError("need a positive sample count per class")
    rng = np.random.default_rng(seed)
    translation = np.asarray(translation, dtype=np.float64).reshape(2)

    def draw():
        xs = [rng.multivariate_normal(m, c, size=k) for m, c, k in zip(means, covs, counts)]
        return np.concatenate(xs)

    labels = np.repeat(np.arange(len(means)), counts)
    x_before = draw()
    source = x_before if paired else draw()
    x_after = drift_transform(source, theta, scale, translation)
    emp = np.stack([x_before[labels == k].mean(axis=0) for k in range(len(means))])
    return DriftScenario2D(
        means=means,
        covs=covs,
        theta=float(theta),
        scale=float(scale),
        translation=translation,
        x_before=x_before,
        y_before=labels,
        x_after=x_after,
        y_after=labels.copy(),
        x_source=source,
        true_means=drift_transform(emp, theta, scale, translation),
        population_means=drift_transform(means, theta, scale, translation),
        paired=paired,
    )


def default_drift_scenario(seed=0, theta=0.0, scale=1.0, translation=(0.0, 0.0), n=200, radius=5.0):
    """Three unit-covariance Gaussians with means evenly spaced on a circle."""
    angles = 2 * np.pi * np.arange(3) / 3
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return generate_drift_scenario(seed, theta, scale, translation, means, [np.eye(2)] * 3, n)


# -- on-disk feature datasets -----------------------------------------------


def save_feature_dataset(stream, path):
    """Write ``stream`` in the versioned ``DRIFTLAB-FEATURES`` text format."""
    if len(stream.tasks) == 0:
        raise DataError("stream must contain ≥ 1 task")
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"dim={stream.input_dim} classes={stream.num_classes} tasks={len(stream.tasks)}",
    ]
    for task in stream:
        for xi, yi, li in zip(task.x, task.y, task.labeled):
            values = ",".join(repr(float(v)) for v in xi)
            lines.append(f"{task.index},{int(yi)},{int(li)},{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _parse_header(line, offset):
    fields = {}
    for part in line.split():
        key, sep, value = part.partition("=")
        if not sep or key in fields:
            raise FormatError(f"line 2 (byte {offset}): malformed header field {part!r}")
        fields[key] = value
    if set(fields) != {"dim", "classes", "tasks"}:
        raise FormatError(f"line 2 (byte {offset}): header must define dim, classes and tasks")
    try:
        dim, classes, tasks = (int(fields[k]) for k in ("dim", "classes", "tasks"))
    except ValueError as exc:
        raise FormatError(f"line 2 (byte {offset}): non-integer header value") from exc
    if dim < 1 or classes < 1:
        raise FormatError(f"line 2 (byte {offset}): dim and classes must be positive")
    if tasks < 1:
        raise FormatError(f"line 2 (byte {offset}): stream must contain ≥ 1 task")
    return dim, classes, tasks


def load_feature_dataset(path):
    """Read a ``DRIFTLAB-FEATURES`` file back into a :class:`TaskStream`.

    Errors name the offending line and its byte offset.
    """
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"byte {exc.start}: file is not valid UTF-8") from exc
    if not text:
        raise FormatError("byte 0: empty file")
    if not text.endswith("\n"):
        cut = len(raw) - len(raw.rsplit(b"\n", 1)[-1])
        raise FormatError(f"byte {cut}: file is truncated (last line has no terminating newline)")
    lines = text[:-1].split("\n")
    offsets = np.cumsum([0] + [len(s.encode("utf-8")) + 1 for s in lines]).tolist()

    magic, _, version = lines[0].partition(" ")
    if magic != MAGIC:
        raise FormatError(f"line 1 (byte 0): expected magic {MAGIC!r}, got {lines[0]!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"line 1 (byte 0): unknown version {version!r}")
    if len(lines) < 2:
        raise FormatError(f"line 2 (byte {offsets[1]}): missing header line")
    dim, num_classes, num_tasks = _parse_header(lines[1], offsets[1])

    rows = {}
    for lineno in range(3, len(lines) + 1):
        line, off = lines[lineno - 1], offsets[lineno - 1]
        parts = line.split(",")
        if len(parts) != dim + 3:
            raise FormatError(
                f"line {lineno} (byte {off}): expected {dim + 3} fields, got {len(parts)}"
            )
        try:
            t, c, flag = int(parts[0]), int(parts[1]), int(parts[2])
            values = [float(v) for v in parts[3:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno} (byte {off}): {exc}") from exc
        if flag not in (0, 1):
            raise FormatError(f"line {lineno} (byte {off}): labeled flag must be 0 or 1")
        if not 1 <= t <= num_tasks:
            raise FormatError(f"line {lineno} (byte {off}): task id {t} outside 1..{num_tasks}")
        if not all(math.isfinite(v) for v in values):
            raise FormatError(f"line {lineno} (byte {off}): non-finite feature value")
        rows.setdefault(t, []).append((c, flag, values))

    tasks = []
    for t in range(1, num_tasks + 1):
        if t not in rows:
            raise FormatError(f"task {t} declared in header but has no rows")
        ys = np.array([r[0] for r in rows[t]])
        classes = sorted(dict.fromkeys(ys.tolist()))
        tasks.append(
            Task(
                t,
                classes,
                np.array([r[2] for r in rows[t]], dtype=np.float64).reshape(-1, dim),
                ys,
                np.array([r[1] for r in rows[t]], dtype=bool),
            )
        )
    try:
        stream = TaskStream(tuple(tasks), dim, {"source": str(path)})
    except DataError as exc:
        raise FormatError(str(exc)) from exc
    if stream.num_classes != num_classes:
        raise FormatError(f"header declares {num_classes} classes, rows contain {stream.num_classes}")
    return stream
