import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftlab import data
from driftlab.errors import DataError, FormatError, ParameterError
from driftlab.evaluation import accuracy_over_seen
from driftlab.prototypes import PrototypePool, compute_prototypes
from driftlab.training import FeatureExtractor, JointTrainer, TrainConfig


def small_stream(seed=0, **kw):
    args = dict(num_tasks=3, classes_per_task=2, input_dim=4, samples_per_class=10, class_separation=4.0)
    args.update(kw)
    return data.generate_blob_stream(seed=seed, **args)


def test_blob_stream_structure():
    s = data.generate_blob_stream(5, 4, 16, 50, 4.0, seed=7)
    assert len(s) == 5 and s.num_classes == 20
    assert [t.index for t in s] == [1, 2, 3, 4, 5]
    sets = [set(t.classes) for t in s]
    assert set().union(*sets) == set(range(20))
    for i, a in enumerate(sets):
        assert len(a) == 4
        for b in sets[i + 1 :]:
            assert not a & b
    for t in s:
        for c in t.classes:
            assert np.count_nonzero(t.y == c) == 50


def test_blob_stream_is_deterministic():
    a = data.generate_blob_stream(5, 4, 16, 50, 4.0, seed=7)
    b = data.generate_blob_stream(5, 4, 16, 50, 4.0, seed=7)
    assert all(x.x.tobytes() == y.x.tobytes() and x.y.tobytes() == y.y.tobytes() for x, y in zip(a, b))
    c = data.generate_blob_stream(5, 4, 16, 50, 4.0, seed=8)
    assert a != c


def test_blob_means_on_sphere():
    s = data.generate_blob_stream(2, 3, 6, 2000, 4.0, seed=1)
    for t in s:
        for c in t.classes:
            assert np.linalg.norm(t.x[t.y == c].mean(axis=0)) == pytest.approx(4.0, abs=0.15)


def test_blob_validation():
    with pytest.raises(ParameterError):
        data.generate_blob_stream(2, 2, 1, 10, 4.0, seed=0)
    with pytest.raises(ParameterError):
        data.generate_blob_stream(2, 2, 4, 10, 0.0, seed=0)
    with pytest.raises(ParameterError):
        data.generate_blob_stream(0, 2, 4, 10, 4.0, seed=0)


def test_well_separated_blobs_are_jointly_learnable():
    s = data.generate_blob_stream(2, 4, 16, 100, 10.0, seed=3)
    train, test = data.train_test_split(s, 0.3, seed=0)
    cfg = TrainConfig(epoch_scale=0.1, seed=0)
    trainer = JointTrainer(FeatureExtractor.mlp(16, (64, 64), 16, rng=0), cfg)
    trainer.session(train.tasks[0], [])
    trainer.session(train.tasks[1], train.tasks[:1])
    x = np.concatenate([t.x for t in test])
    y = np.concatenate([t.y for t in test])
    logits = trainer.head(trainer.extractor(x))
    acc = np.mean(np.array(trainer.head.classes)[logits.argmax(axis=1)] == y)
    assert acc > 0.95


def test_uneven_class_split():
    parts = data.split_classes(10, 3)
    assert sorted(len(p) for p in parts) == [3, 3, 4]
    assert sum(parts, []) == list(range(10))


def test_empty_stream_rejected():
    with pytest.raises(DataError, match="stream must contain ≥ 1 task"):
        data.TaskStream((), 4)


def test_overlapping_classes_rejected():
    x = np.zeros((2, 2))
    t1 = data.Task(1, (0,), x, np.array([0, 0]), np.ones(2, bool))
    t2 = data.Task(2, (0,), x, np.array([0, 0]), np.ones(2, bool))
    with pytest.raises(DataError):
        data.TaskStream((t1, t2), 2)


def test_task_arrays_are_read_only():
    t = small_stream().tasks[0]
    with pytest.raises(ValueError):
        t.x[0, 0] = 1.0


# -- label fractions ------------------------------------------------------------


def test_full_fraction_labels_everything():
    s = data.apply_label_fraction(small_stream(), 1.0, seed=0)
    assert all(t.labeled.all() for t in s)


def test_five_percent_of_hundred():
    s = data.apply_label_fraction(small_stream(samples_per_class=100), 0.05, seed=0)
    for t in s:
        for c in t.classes:
            assert np.count_nonzero(t.labeled & (t.y == c)) == 5


def test_tiny_fraction_keeps_one_label():
    s = data.apply_label_fraction(small_stream(samples_per_class=20), 0.008, seed=0)
    for t in s:
        for c in t.classes:
            assert np.count_nonzero(t.labeled & (t.y == c)) == 1


@pytest.mark.parametrize("f", [0.0, -0.1, 1.5])
def test_bad_fraction(f):
    with pytest.raises(ParameterError):
        data.apply_label_fraction(small_stream(), f, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.001, 1.0), st.integers(1, 60), st.integers(0, 1000))
def test_stratification_rule(fraction, n, seed):
    s = data.apply_label_fraction(small_stream(samples_per_class=n, num_tasks=2), fraction, seed)
    expected = max(1, min(n, math.floor(fraction * n + 0.5)))
    for t in s:
        for c in t.classes:
            assert np.count_nonzero(t.labeled & (t.y == c)) == expected


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
def test_generated_classes_disjoint(num_tasks, per_task, seed):
    s = data.generate_blob_stream(num_tasks, per_task, 3, 2, 2.0, seed=seed)
    seen = set()
    for t in s:
        assert not seen & set(t.classes)
        seen |= set(t.classes)
    assert seen == set(range(num_tasks * per_task))


def test_train_test_split_is_stratified_and_disjoint():
    s = small_stream(samples_per_class=20)
    tr, te = data.train_test_split(s, 0.25, seed=1)
    for a, b, full in zip(tr, te, s):
        assert len(a) + len(b) == len(full)
        for c in full.classes:
            assert np.count_nonzero(b.y == c) == 5
        rows = {r.tobytes() for r in a.x} & {r.tobytes() for r in b.x}
        assert not rows


# -- drift scenarios -------------------------------------------------------------


def _single(theta, scale, u, mu):
    return data.generate_drift_scenario(0, theta, scale, u, [mu], [np.eye(2)], 50)


def test_pure_translation_mean():
    sc = _single(0.0, 1.0, (3, -2), (1.0, 1.0))
    np.testing.assert_allclose(sc.population_means[0], [4.0, -1.0])


def test_half_rotation_mean():
    sc = _single(math.pi, 1.0, (0, 0), (1.0, 0.0))
    np.testing.assert_allclose(sc.population_means[0], [-1.0, 0.0], atol=1e-15)


def test_rotation_scale_mean():
    sc = _single(math.pi / 4, 1.5, (0, 0), (2.0, 0.0))
    expected = 1.5 * np.array([2 * math.cos(math.pi / 4), 2 * math.sin(math.pi / 4)])
    np.testing.assert_allclose(sc.population_means[0], expected, rtol=1e-14)
    np.testing.assert_allclose(sc.population_means[0], [2.1213, 2.1213], atol=1e-4)


def test_zero_scale_rejected():
    with pytest.raises(ParameterError):
        _single(0.0, 0.0, (0, 0), (0.0, 0.0))


def test_non_psd_covariance_rejected():
    with pytest.raises(ParameterError):
        data.generate_drift_scenario(0, 0, 1, (0, 0), [(0, 0)], [np.diag([1.0, -1.0])], 10)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-math.pi, math.pi),
    st.floats(0.2, 3.0),
    st.tuples(st.floats(-5, 5), st.floats(-5, 5)),
    st.integers(0, 1000),
)
def test_paired_true_mean_is_exact(theta, scale, u, seed):
    sc = data.default_drift_scenario(seed=seed, theta=theta, scale=scale, translation=u, n=30)
    for k in range(3):
        emp = sc.x_after[sc.y_after == k].mean(axis=0)
        np.testing.assert_allclose(sc.true_means[k], emp, atol=1e-10)


def test_unpaired_true_mean_within_sampling_error():
    means = [(0.0, 0.0), (5.0, 0.0)]
    sc = data.generate_drift_scenario(4, 0.3, 1.2, (1, 1), means, [np.eye(2)] * 2, 4000, paired=False)
    assert not sc.paired
    for k in range(2):
        emp = sc.x_after[sc.y_after == k].mean(axis=0)
        assert np.linalg.norm(emp - sc.population_means[k]) < 0.1


def test_default_scenario_layout():
    sc = data.default_drift_scenario()
    assert sc.num_classes == 3 and len(sc.x_before) == 600
    np.testing.assert_allclose(np.linalg.norm(sc.means, axis=1), 5.0)


# -- feature files ----------------------------------------------------------------


def test_feature_file_round_trip(tmp_path):
    s = data.apply_label_fraction(small_stream(seed=5), 0.3, seed=2)
    p = tmp_path / "s.txt"
    data.save_feature_dataset(s, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "DRIFTLAB-FEATURES v1"
    assert lines[1] == "dim=4 classes=6 tasks=3"
    assert data.load_feature_dataset(p) == s


def test_truncated_file_reports_byte_offset(tmp_path):
    p = tmp_path / "s.txt"
    data.save_feature_dataset(small_stream(), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-7])
    cut = raw[:-7].rfind(b"\n") + 1
    with pytest.raises(FormatError, match=f"byte {cut}"):
        data.load_feature_dataset(p)


def _write(tmp_path, text):
    p = tmp_path / "f.txt"
    p.write_text(text)
    return p


def test_bad_magic(tmp_path):
    with pytest.raises(FormatError, match="line 1"):
        data.load_feature_dataset(_write(tmp_path, "FEATURES v1\ndim=2 classes=1 tasks=1\n1,0,1,0,0\n"))


def test_unknown_version(tmp_path):
    with pytest.raises(FormatError, match="version"):
        data.load_feature_dataset(_write(tmp_path, "DRIFTLAB-FEATURES v9\ndim=2 classes=1 tasks=1\n1,0,1,0,0\n"))


def test_malformed_header(tmp_path):
    with pytest.raises(FormatError, match="line 2"):
        data.load_feature_dataset(_write(tmp_path, "DRIFTLAB-FEATURES v1\ndim=2 tasks=1\n1,0,1,0,0\n"))


def test_row_dimension_mismatch(tmp_path):
    text = "DRIFTLAB-FEATURES v1\ndim=2 classes=1 tasks=1\n1,0,1,0,0\n1,0,1,0\n"
    off = len(text.encode()) - len("1,0,1,0\n")
    with pytest.raises(FormatError, match=rf"line 4 \(byte {off}\)"):
        data.load_feature_dataset(_write(tmp_path, text))


def test_empty_task_count_in_file(tmp_path):
    with pytest.raises(FormatError, match="stream must contain ≥ 1 task"):
        data.load_feature_dataset(_write(tmp_path, "DRIFTLAB-FEATURES v1\ndim=2 classes=1 tasks=0\n"))


def test_loaded_stream_drives_prototypes(tmp_path):
    s = small_stream()
    p = tmp_path / "s.txt"
    data.save_feature_dataset(s, p)
    loaded = data.load_feature_dataset(p)
    ident = lambda x: np.asarray(x)
    pool = PrototypePool(4)
    for t in loaded:
        pool.add_many(compute_prototypes(ident, t), t.index)
    x = np.concatenate([t.x for t in loaded])
    y = np.concatenate([t.y for t in loaded])
    assert accuracy_over_seen(ident, pool, x, y) > 0.8
