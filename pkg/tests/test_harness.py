import json

import numpy as np
import pytest

from weldmon import harness as H
from weldmon.errors import EmptyClass, InsufficientSamples, LeakageError
from weldmon.ingest import WeldSegment
from weldmon.synthgen import CONDITIONS

FAST = {"max_epochs": 3, "fc_hidden": (8,), "lr": 1e-2}


def fake_segments(per_class=30, n=2048, seed=0, conditions=None):
    """Cheap labelled segments whose accelerometer level encodes the tool."""
    rng = np.random.default_rng(seed)
    conditions = conditions or CONDITIONS
    out = []
    k = 0
    for tool, surface in conditions:
        for _ in range(per_class):
            data = 0.01 * rng.standard_normal((n, 5)).astype(np.float32)
            if tool == "Worn":
                data[:, 2] *= 3
            out.append(
                WeldSegment(
                    data=data,
                    marks={"t_hm_s": 0.5, "t_sw_s": 1.0, "t_ew_s": 1.0 + n / 48000},
                    labels={"tool": tool, "surface": surface},
                    source_id=f"cycle_{k:03d}",
                    sample_rate_hz=48000,
                    channels=[{"id": s, "name": str(s)} for s in (0, 2, 4, 6, 8)],
                )
            )
            k += 1
    return out


@pytest.fixture(scope="module")
def bank120():
    return H.SegmentBank(fake_segments(), (0, 2, 4, 6, 8), need_images=False)


def test_lcb_arithmetic():
    assert H.lcb(0.941, 0.057) == pytest.approx(0.82928, abs=1e-12)


def test_task_specs():
    t1, t2, t3 = (H.task_spec(i) for i in (1, 2, 3))
    assert len(t1.class_names) == 4 and len(t2.class_names) == 2 == len(t3.class_names)
    assert t3.train_surfaces == ("Clean",)
    assert t2.label_of({"tool": "Worn", "surface": "Contaminated"}) == 1
    with pytest.raises(ValueError):
        H.task_spec(4)


def test_cv_config_validation():
    with pytest.raises(ValueError):
        H.CvConfig(folds=1)
    with pytest.raises(ValueError):
        H.CvConfig(holdout_ratio=1.0)


def test_holdout_sizes_task1(bank120):
    train, test = H.build_task_dataset(bank120, H.task_spec(1), (4,))
    assert (len(train), len(test)) == (96, 24)
    assert np.bincount(train.y).tolist() == [24, 24, 24, 24]


def test_task2_merges_to_two_classes(bank120):
    train, test = H.build_task_dataset(bank120, H.task_spec(2), (4,))
    y_all = np.concatenate([train.y, test.y])
    assert np.bincount(y_all).tolist() == [60, 60]


def test_task3_routes_contaminated_to_test(bank120):
    train, test = H.build_task_dataset(bank120, H.task_spec(3), (4,))
    surfaces = [bank120.labels[i]["surface"] for i in train.index]
    assert set(surfaces) == {"Clean"}
    assert len(train) == 48
    test_surfaces = [bank120.labels[i]["surface"] for i in test.index]
    assert test_surfaces.count("Contaminated") == 60


def test_split_is_stable_across_settings(bank120):
    a, _ = H.build_task_dataset(bank120, H.task_spec(1), (4,))
    b, _ = H.build_task_dataset(bank120, H.task_spec(2), (0, 6, 8))
    assert np.array_equal(a.index, b.index)
    assert a.ids == b.ids


def test_split_seed_changes_membership(bank120):
    a, _ = H.build_task_dataset(bank120, H.task_spec(1), (4,), H.CvConfig(split_seed=0))
    b, _ = H.build_task_dataset(bank120, H.task_spec(1), (4,), H.CvConfig(split_seed=1))
    assert not np.array_equal(a.index, b.index)


def test_missing_class_is_reported():
    bank = H.SegmentBank(fake_segments(4, conditions=[("New", "Clean"), ("New", "Contaminated")]), (4,), need_images=False)
    with pytest.raises(EmptyClass):
        H.build_task_dataset(bank, H.task_spec(2), (4,))


def test_unknown_sensor(bank120):
    small = H.SegmentBank(fake_segments(3), (4, 6), need_images=False)
    with pytest.raises(ValueError):
        H.build_task_dataset(small, H.task_spec(2), (8,))


def test_fold_stratification():
    y = np.repeat([0, 1, 2, 3], 24)
    splits = H.cv_splits(y)
    assert len(splits) == 18
    for tr, va in splits:
        assert not set(tr) & set(va)
        for c in range(4):
            expected = len(va) * np.mean(y == c)
            assert abs(np.sum(y[va] == c) - expected) <= 1


def test_cross_validate_shapes_and_determinism(bank120):
    train, _ = H.build_task_dataset(bank120, H.task_spec(2), (4,))
    cv = H.CvConfig(folds=3, repetitions=2)
    a = H.cross_validate(train, "dwt", 1, cv, seed=0, train_params=FAST)
    b = H.cross_validate(train, "dwt", 1, cv, seed=0, train_params=FAST)
    assert len(a.per_fold) == 6
    assert a.per_fold == b.per_fold
    assert a.mean == pytest.approx(np.mean(a.per_fold))
    assert a.std == pytest.approx(np.std(a.per_fold))
    assert a.audit.leaked_samples == 0 and a.audit.fits == 6 and a.audit.augment_calls == 6


def test_insufficient_samples():
    bank = H.SegmentBank(fake_segments(3), (4,), need_images=False)
    train, _ = H.build_task_dataset(bank, H.task_spec(1), (4,))
    with pytest.raises(InsufficientSamples):
        H.cross_validate(train, "dwt", 0, H.CvConfig(folds=6), train_params=FAST)


def test_leakage_is_caught(bank120):
    train, test = H.build_task_dataset(bank120, H.task_spec(2), (4,))
    rows = np.arange(len(train))
    with pytest.raises(LeakageError):
        H.fit_method(train, rows, "dwt", 0, 0, eval_ids=train.ids[:1], audit=H.LeakageAudit(), train_params=FAST)
    with pytest.raises(LeakageError):
        H.fit_method(test, np.arange(len(test)), "dwt", 1, 0, train_params=FAST)


def test_evaluate_row(bank120):
    cv = H.CvConfig(folds=3, repetitions=1)
    row = H.evaluate(bank120, 2, "dwt", (4, 6), 1, cv, 0, FAST)
    assert row["lcb"] == row["cv_mean"] - 1.96 * row["cv_std"]
    assert 0 <= row["cv_mean"] <= 1
    assert len(row["per_fold"]) == 3
    assert np.array(row["confusion_matrix"]).sum() == row["n_test"] == 24
    assert row["audit"]["leaked_samples"] == 0 and row["audit"]["fits"] == 4
    json.dumps(row)


def test_sensor_subsets():
    assert len(H.sensor_subsets((0, 2, 4, 6, 8))) == 31
    assert H.sensor_subsets((4,)) == [(4,)]


def test_rank_single_sensor():
    bank = H.SegmentBank(fake_segments(8), (4,), need_images=False)
    res = H.rank_sensor_combinations(bank, (2,), ("dwt",), H.CvConfig(folds=3, repetitions=1), train_params=FAST)
    rows = res["ranking"]["dwt"]
    assert len(rows) == 1 and rows[0]["sensors"] == [4] and rows[0]["rank"] == 1
    assert res["stable_top"] == [[4]]


def test_rank_orders_by_lcb():
    bank = H.SegmentBank(fake_segments(8), (0, 4), need_images=False)
    res = H.rank_sensor_combinations(bank, (2,), ("dwt",), H.CvConfig(folds=3, repetitions=1), top_m=2, train_params=FAST)
    lcbs = [r["lcb"] for r in res["ranking"]["dwt"]]
    assert len(lcbs) == 3 and lcbs == sorted(lcbs, reverse=True)


def test_sweep_rows(bank120):
    rows = H.augmentation_sweep(bank120, 3, "dwt", (4,), [0, 5], H.CvConfig(folds=3, repetitions=1), 0, FAST)
    assert [r["aug_factor"] for r in rows] == [0, 5]
    assert [r["operating_point"] for r in rows] == [False, True]
    with pytest.raises(ValueError):
        H.augmentation_sweep(bank120, 3, "dwt", (4,), [-1], H.CvConfig(folds=3, repetitions=1), 0, FAST)


def test_bench_latency_single_run(small_segments):
    bank = H.SegmentBank(small_segments, (4, 6), need_images=False)
    train, test = H.build_task_dataset(bank, H.task_spec(2), (4, 6), H.CvConfig(folds=2))
    clf = H.fit_method(train, np.arange(len(train)), "dwt", 0, 0, train_params=FAST)
    res = H.bench_latency(clf, small_segments, (4, 6), "dwt", n_runs=1)
    assert res["n_runs"] == 1 and res["mean_ms"] == res["max_ms"]
    assert "cpus" in res["machine"]
    with pytest.raises(ValueError):
        H.bench_latency(clf, small_segments, (4, 6), "dwt", n_runs=0)


def test_hybrid_fold_on_real_segments(small_segments):
    bank = H.SegmentBank(small_segments, (4, 6))
    train, _ = H.build_task_dataset(bank, H.task_spec(2), (4, 6), H.CvConfig(folds=2))
    images, feats, y = H.training_arrays(train, np.arange(len(train)), "hybrid", 2, 0, np.zeros(len(train), bool))
    assert images.shape == (3 * len(train), 2, 64, 64)
    assert feats.shape == (3 * len(train), 26)
    assert np.array_equal(images[: len(train)], train.images())
    assert np.bincount(y).tolist() == [3 * n for n in np.bincount(train.y)]
