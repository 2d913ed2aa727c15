"""Continual prototype experiments: configuration, the per-task loop and reports.

After each training session the loop

1. trains the extractor on the new task (any :class:`ContinualTrainer`),
2. moves the stored prototypes of earlier classes with every requested
   compensation method (naive, SDC, learned projector, oracle, exemplar means,
   projected feature banks),
3. adds prototypes of the new classes and scores every method with an NCM
   classifier on the test samples of all classes seen so far.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .drift import VARIANTS, ProjectorConfig, ldc_correct, oracle_correct, sdc_correct, train_projector
from .errors import ConfigError, DriftlabError, InvariantViolation
from .evaluation import (
    TaskRecord,
    accuracy_over_seen,
    cosine_distances,
    incremental_accuracy,
    write_jsonl,
)
from .prototypes import FeatureBank, PrototypePool, compute_prototypes, update_pool
from .training import TRAINERS, FeatureExtractor, TrainConfig, save_checkpoint

BASE_METHODS = ("naive", "sdc", "ldc", "oracle", "nme", "feature-bank", "joint")
_METHOD_RE = re.compile(r"^(?P<base>[a-z-]+)(?:\[(?P<arg>[^\]]+)\])?$")


@dataclass
class StreamSpec:
    kind: str = "blobs"
    num_tasks: int = 5
    classes_per_task: int = 4
    input_dim: int = 16
    samples_per_class: int = 300
    class_separation: float = 4.0
    noise_std: float = 1.0
    test_fraction: float = 0.3
    path: str | None = None
    test_path: str | None = None


@dataclass
class ExtractorSpec:
    hidden: list = field(default_factory=lambda: [64, 64])
    feature_dim: int = 16


@dataclass
class ExperimentConfig:
    stream: StreamSpec = field(default_factory=StreamSpec)
    trainer: str = "lwf"
    methods: list = field(default_factory=lambda: ["naive", "sdc", "ldc", "oracle"])
    label_fraction: float = 1.0
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "driftlab-out"
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig.supervised)
    sdc_sigma: float = 0.3
    memory_size: int = 20
    feature_bank_size: int = 50
    normalize_features: bool = False
    save_checkpoints: bool = False

    def to_dict(self):
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


# -- config parsing ----------------------------------------------------------


def _line_of(text, key):
    if text is None:
        return None
    pattern = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for i, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return i
    return None


def _build(cls, raw, text, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object", _line_of(text, where))
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where or 'config'}", _line_of(text, unknown[0]))
    kwargs = {}
    for name, value in raw.items():
        if name in _NESTED.get(cls, {}):
            value = _build(_NESTED[cls][name], value, text, name)
        elif isinstance(value, list) and name.startswith("milestones"):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}", _line_of(text, where)) from exc


_NESTED = {
    ExperimentConfig: {
        "stream": StreamSpec,
        "extractor": ExtractorSpec,
        "train": TrainConfig,
        "projector": ProjectorConfig,
    }
}


def parse_method(name):
    """Split ``"nme[20]"`` into ``("nme", "20")``; validates the base name."""
    m = _METHOD_RE.match(str(name))
    if not m or m["base"] not in BASE_METHODS:
        raise ConfigError(f"unknown method {name!r}")
    base, arg = m["base"], m["arg"]
    if base == "ldc" and arg is not None and arg not in VARIANTS:
        raise ConfigError(f"unknown projector variant in {name!r}")
    if base in ("nme", "feature-bank") and arg is not None and not arg.isdigit():
        raise ConfigError(f"memory size in {name!r} must be a positive integer")
    if base in ("naive", "sdc", "oracle", "joint") and arg is not None:
        raise ConfigError(f"method {base!r} takes no argument")
    return base, arg


def validate(cfg, text=None):
    def fail(msg, key):
        raise ConfigError(msg, _line_of(text, key))

    if not cfg.methods:
        fail("at least one method is required", "methods")
    if len(set(cfg.methods)) != len(cfg.methods):
        fail("methods must be unique", "methods")
    for m in cfg.methods:
        try:
            parse_method(m)
        except ConfigError as exc:
            fail(str(exc), "methods")
    if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        fail("seeds must be a non-empty list of non-negative integers", "seeds")
    if cfg.trainer not in TRAINERS:
        fail(f"trainer must be one of {sorted(TRAINERS)}", "trainer")
    if not 0 < cfg.label_fraction <= 1:
        fail("label_fraction must lie in (0, 1]", "label_fraction")
    if cfg.sdc_sigma <= 0:
        fail("sdc_sigma must be positive", "sdc_sigma")
    if cfg.memory_size < 1 or cfg.feature_bank_size < 1:
        fail("memory sizes must be ≥ 1", "memory_size")
    if cfg.stream.kind not in ("blobs", "file"):
        fail("stream kind must be 'blobs' or 'file'", "kind")
    if cfg.stream.kind == "file" and not cfg.stream.path:
        fail("file streams need a path", "path")
    if not 0 < cfg.stream.test_fraction < 1:
        fail("test_fraction must lie in (0, 1)", "test_fraction")
    if cfg.extractor.feature_dim < 1 or not all(h >= 1 for h in cfg.extractor.hidden):
        fail("extractor sizes must be positive", "extractor")
    return cfg


def parse_config(text):
    """Parse and validate a JSON experiment config; unknown keys are errors."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno) from exc
    return validate(_build(ExperimentConfig, raw, text, ""), text)


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(text)


# -- running -----------------------------------------------------------------


def _seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def build_streams(cfg, seed):
    """``(train, test)`` streams for one seed, with the label fraction applied."""
    s = cfg.stream
    data_seed, split_seed, label_seed = _seeds(seed, 3)
    if s.kind == "blobs":
        full = data_mod.generate_blob_stream(
            s.num_tasks, s.classes_per_task, s.input_dim, s.samples_per_class,
            s.class_separation, data_seed, noise_std=s.noise_std,
        )
        train, test = data_mod.train_test_split(full, s.test_fraction, split_seed)
    else:
        full = data_mod.load_feature_dataset(s.path)
        if s.test_path:
            train, test = full, data_mod.load_feature_dataset(s.test_path)
        else:
            train, test = data_mod.train_test_split(full, s.test_fraction, split_seed)
    if cfg.label_fraction < 1:
        train = data_mod.apply_label_fraction(train, cfg.label_fraction, label_seed)
    return train, test


def _check(cond, msg):
    if not cond:
        raise InvariantViolation(msg)


@dataclass
class SeedResult:
    seed: int
    records: list
    fallbacks: dict = field(default_factory=dict)

    def final(self, method):
        return [r for r in self.records if r.method == method][-1]


def run_seed(cfg: ExperimentConfig, seed: int, checkpoint_dir=None) -> SeedResult:
    """Run every configured method over the whole stream for one seed."""
    train, test = build_streams(cfg, seed)
    init_seed, train_seed, proj_seed, bank_seed = _seeds(seed, 4)
    extractor = FeatureExtractor.mlp(
        train.input_dim, cfg.extractor.hidden, cfg.extractor.feature_dim, rng=init_seed
    )
    tcfg = TrainConfig(**{**cfg.train.to_dict(), "seed": train_seed})
    trainer = TRAINERS[cfg.trainer](extractor, tcfg)
    methods = {m: parse_method(m) for m in cfg.methods}
    comp = [m for m, (base, _) in methods.items() if base != "joint"]
    joint_trainer = None
    if any(base == "joint" for base, _ in methods.values()):
        joint_trainer = trainer if cfg.trainer == "joint" else TRAINERS["joint"](extractor, tcfg)

    dim = cfg.extractor.feature_dim
    pools = {m: PrototypePool(dim) for m in comp}
    oracle_ref = PrototypePool(dim)
    banks = {}
    for m in comp:
        base, arg = methods[m]
        if base == "nme":
            banks[m] = FeatureBank(int(arg or cfg.memory_size), "samples", seed=bank_seed)
        elif base == "feature-bank":
            banks[m] = FeatureBank(int(arg or cfg.feature_bank_size), "features", seed=bank_seed)

    config_hash = cfg.config_hash()
    a_last = {m: [] for m in methods}
    records, fallbacks = [], {}
    prev = None
    for t, task in enumerate(train, start=1):
        t0 = time.perf_counter()
        curr = trainer.session(task, train.tasks[: t - 1])
        old_tasks = train.tasks[: t - 1]
        if prev is not None:
            projectors = {}

            def projector(variant):
                if variant not in projectors:
                    pc = ProjectorConfig(**{**cfg.projector.to_dict(), "variant": variant, "seed": proj_seed + t})
                    projectors[variant] = train_projector(prev, curr, task.x, pc)
                return projectors[variant]

            for m in comp:
                base, arg = methods[m]
                if base == "ldc":
                    pools[m] = ldc_correct(pools[m], projector(arg or cfg.projector.variant), t)
                elif base == "sdc":
                    pools[m], fb = sdc_correct(pools[m], prev, curr, task.x, cfg.sdc_sigma, t)
                    fallbacks.setdefault(m, {})[t] = fb
                elif base == "oracle":
                    pools[m] = oracle_correct(pools[m], curr, old_tasks, t)
                elif base == "nme":
                    update_pool(pools[m], banks[m].recompute_means(curr), t)
                elif base == "feature-bank":
                    banks[m].project(projector(cfg.projector.variant))
                    update_pool(pools[m], banks[m].recompute_means(), t)
            oracle_ref = oracle_correct(oracle_ref, curr, old_tasks, t)

        new = compute_prototypes(curr, task, labeled_only=True)
        for m in comp:
            pools[m].add_many(new, t)
            if m in banks:
                banks[m].insert_task(task, curr, labeled_only=True)
        oracle_ref.add_many(new, t)

        seen = train.classes_up_to(t)
        old = train.classes_up_to(t - 1)
        x_test = np.concatenate([tk.x for tk in test.tasks[:t]])
        y_test = np.concatenate([tk.y for tk in test.tasks[:t]])
        for m, (base, _) in methods.items():
            if base == "joint":
                ext = curr if joint_trainer is trainer else joint_trainer.session(task, old_tasks)
                pool = PrototypePool(dim)
                for tk in train.tasks[:t]:
                    pool.add_many(compute_prototypes(ext, tk, labeled_only=True), t)
            else:
                ext, pool = curr, pools[m]
            _check(pool.classes == sorted(seen), f"{m}: pool classes differ from seen classes at task {t}")
            protos = pool.matrix()[1]
            _check(np.isfinite(protos).all(), f"{m}: non-finite prototype at task {t}")
            acc = accuracy_over_seen(ext, pool, x_test, y_test, normalize=cfg.normalize_features)
            a_last[m].append(acc)
            cos = {}
            if old and base != "joint":
                ids, dist = cosine_distances(pool.subset(old), oracle_ref.subset(old))
                cos = {str(c): float(d) for c, d in zip(ids, dist)}
            rec = TaskRecord(
                task=t,
                method=m,
                a_last=acc,
                a_inc=incremental_accuracy(a_last[m])[-1],
                seed=seed,
                config_hash=config_hash,
                cosine=cos,
                fallback_classes=fallbacks.get(m, {}).get(t, []),
                wall_clock=time.perf_counter() - t0,
            )
            records.append(rec)
        prev = curr

    if checkpoint_dir is not None:
        for m in comp:
            save_checkpoint(Path(checkpoint_dir) / f"seed{seed}-{m}.npz", extractor=curr, head=trainer.head, pool=pools[m])
    return SeedResult(seed, records, fallbacks)


SUMMARY_FIELDS = ["method", "seed", "tasks", "a_last", "a_inc", "cosine_mean", "config_hash"]
AGGREGATE_FIELDS = ["method", "n_seeds", "a_last_mean", "a_last_std", "a_inc_mean", "a_inc_std", "cosine_mean"]


def _fmt(v):
    return repr(round(float(v), 12))


def summarize(results, methods):
    """Per-seed final-task rows and across-seed mean/std rows per method."""
    rows, agg = [], []
    for m in methods:
        finals = [r.final(m) for r in results]
        for res, rec in zip(results, finals):
            cos = list(rec.cosine.values())
            rows.append({
                "method": m,
                "seed": res.seed,
                "tasks": rec.task,
                "a_last": rec.a_last,
                "a_inc": rec.a_inc,
                "cosine_mean": float(np.mean(cos)) if cos else float("nan"),
                "config_hash": rec.config_hash,
            })
        last = np.array([r.a_last for r in finals])
        inc = np.array([r.a_inc for r in finals])
        cos = [np.mean(list(r.cosine.values())) for r in finals if r.cosine]
        agg.append({
            "method": m,
            "n_seeds": len(finals),
            "a_last_mean": last.mean(),
            "a_last_std": last.std(),
            "a_inc_mean": inc.mean(),
            "a_inc_std": inc.std(),
            "cosine_mean": float(np.mean(cos)) if cos else float("nan"),
        })
    return rows, agg


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(v) if isinstance(v, (float, np.floating)) else v for k, v in row.items()})
    return buf.getvalue()


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list
    summary: list
    aggregate: list
    output_dir: Path | None = None

    def mean(self, method, key="a_last_mean"):
        return next(r[key] for r in self.aggregate if r["method"] == method)


def resolve_output_dir(cfg, override=None):
    return Path(override or os.environ.get("DRIFTLAB_OUT") or cfg.output_dir)


def run_experiment(cfg: ExperimentConfig, output_dir=None, write=True) -> ExperimentResult:
    """Run all seeds; optionally write ``report.jsonl``, ``summary.csv``, ``aggregate.csv``."""
    out = resolve_output_dir(cfg, output_dir) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text("")
    ckpt = out / "checkpoints" if (out is not None and cfg.save_checkpoints) else None
    if ckpt is not None:
        ckpt.mkdir(exist_ok=True)
    results = []
    for seed in cfg.seeds:
        res = run_seed(cfg, seed, checkpoint_dir=ckpt)
        results.append(res)
        if out is not None:
            write_jsonl(res.records, out / "report.jsonl", append=True)
    summary, aggregate = summarize(results, cfg.methods)
    if out is not None:
        (out / "summary.csv").write_text(rows_to_csv(summary, SUMMARY_FIELDS))
        (out / "aggregate.csv").write_text(rows_to_csv(aggregate, AGGREGATE_FIELDS))
        (out / "config.json").write_text(cfg.to_json())
    return ExperimentResult(cfg, results, summary, aggregate, out)


# -- sweeps ------------------------------------------------------------------

ABLATIONS = ("projector-arch", "nme-memory", "feature-bank", "label-fraction")
DEFAULT_SWEEPS = {
    "projector-arch": list(VARIANTS),
    "nme-memory": [5, 10, 20],
    "feature-bank": [5, 20, 50],
    "label-fraction": [0.008, 0.05, 0.25],
}
SWEEP_FIELDS = ["kind", "point", "method", "seed", "a_last", "a_inc", "cosine_mean"]
SWEEP_AGG_FIELDS = ["kind", "point", "method", "n_seeds", "a_last_mean", "a_last_std", "a_inc_mean", "a_inc_std"]


def run_ablation(kind, cfg: ExperimentConfig, points=None, output_dir=None, write=True):
    """Run one sweep axis; returns ``(rows, aggregate_rows)``.

    Architecture and memory sweeps share one training run per seed (all
    variants are evaluated side by side); the label-fraction sweep needs a run
    per fraction.
    """
    if kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation kind {kind!r}; choose from {ABLATIONS}")
    points = list(points or DEFAULT_SWEEPS[kind])
    runs = []
    if kind == "label-fraction":
        for p in points:
            sub = ExperimentConfig(**{**vars(cfg), "label_fraction": float(p)})
            validate(sub)
            runs.append((p, run_experiment(sub, write=False)))
    else:
        if kind == "projector-arch":
            names = {p: f"ldc[{p}]" for p in points}
        elif kind == "nme-memory":
            names = {p: f"nme[{int(p)}]" for p in points}
        else:
            names = {p: f"feature-bank[{int(p)}]" for p in points}
        sub = ExperimentConfig(**{**vars(cfg), "methods": list(names.values())})
        validate(sub)
        res = run_experiment(sub, write=False)
        runs = [(p, res, names[p]) for p in points]

    rows, agg = [], []
    for item in runs:
        p, res = item[0], item[1]
        method_names = [item[2]] if len(item) == 3 else res.config.methods
        for s in res.summary:
            if s["method"] in method_names:
                rows.append({"kind": kind, "point": p, **{k: s[k] for k in ("method", "seed", "a_last", "a_inc", "cosine_mean")}})
        for a in res.aggregate:
            if a["method"] in method_names:
                agg.append({"kind": kind, "point": p, **{k: a[k] for k in SWEEP_AGG_FIELDS[2:]}})
    if write:
        out = resolve_output_dir(cfg, output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation-{kind}.csv").write_text(rows_to_csv(rows, SWEEP_FIELDS))
        (out / f"ablation-{kind}-aggregate.csv").write_text(rows_to_csv(agg, SWEEP_AGG_FIELDS))
    return rows, agg


__all__ = [
    "ExperimentConfig",
    "StreamSpec",
    "ExtractorSpec",
    "parse_config",
    "load_config",
    "run_seed",
    "run_experiment",
    "run_ablation",
    "DriftlabError",
]
