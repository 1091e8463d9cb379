import json
import struct

import numpy as np
import pytest

from capsevade import attack as atk
from capsevade import encoder as enc
from capsevade import harness


def write_idx_pair(tmp_path, images_u8, labels_u8, label_count=None):
    n, rows, cols = images_u8.shape
    img_path = tmp_path / "imgs"
    lab_path = tmp_path / "labs"
    img_path.write_bytes(
        struct.pack(">4I", harness.IMAGE_MAGIC, n, rows, cols) + images_u8.tobytes()
    )
    lab_path.write_bytes(
        struct.pack(">2I", harness.LABEL_MAGIC, label_count if label_count is not None else len(labels_u8))
        + labels_u8.tobytes()
    )
    return img_path, lab_path


def test_load_idx_parses_images_and_scaling(tmp_path):
    images = np.zeros((2, 3, 4), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[1, 2, 3] = 128
    labels = np.array([1, 7], dtype=np.uint8)
    dataset = harness.load_idx(*write_idx_pair(tmp_path, images, labels))
    assert dataset.images.shape == (2, 3, 4)
    assert dataset.images[0, 0, 0] == 1.0
    assert dataset.images[0, 0, 1] == 0.0
    assert dataset.images[1, 2, 3] == pytest.approx(128 / 255)
    assert list(dataset.labels) == [1, 7]


def test_load_idx_bad_magic(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    labels = np.zeros(1, dtype=np.uint8)
    img_path, lab_path = write_idx_pair(tmp_path, images, labels)
    img_path.write_bytes(b"\x00\x00\x09\x99" + img_path.read_bytes()[4:])
    with pytest.raises(harness.BadMagicError):
        harness.load_idx(img_path, lab_path)


def test_load_idx_label_bad_magic(tmp_path):
    images = np.zeros((1, 2, 2), dtype=np.uint8)
    labels = np.zeros(1, dtype=np.uint8)
    img_path, lab_path = write_idx_pair(tmp_path, images, labels)
    lab_path.write_bytes(b"\xff\xff\xff\xff" + lab_path.read_bytes()[4:])
    with pytest.raises(harness.BadMagicError):
        harness.load_idx(img_path, lab_path)


def test_load_idx_truncated(tmp_path):
    images = np.zeros((2, 4, 4), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    img_path, lab_path = write_idx_pair(tmp_path, images, labels)
    img_path.write_bytes(img_path.read_bytes()[:-5])
    with pytest.raises(harness.TruncatedPayloadError):
        harness.load_idx(img_path, lab_path)


def test_load_idx_count_mismatch(tmp_path):
    images = np.zeros((10, 2, 2), dtype=np.uint8)
    labels = np.zeros(9, dtype=np.uint8)
    img_path, lab_path = write_idx_pair(tmp_path, images, labels, label_count=9)
    with pytest.raises(harness.CountMismatchError):
        harness.load_idx(img_path, lab_path)


def test_idx_roundtrip(tmp_path):
    train_set, _ = harness.toy_dataset(n_train=12, n_test=4, seed=1)
    img_path = tmp_path / "imgs"
    lab_path = tmp_path / "labs"
    harness.save_idx(train_set, img_path, lab_path)
    loaded = harness.load_idx(img_path, lab_path)
    assert loaded.images.shape == train_set.images.shape
    assert np.array_equal(loaded.labels, train_set.labels)
    assert np.max(np.abs(loaded.images - train_set.images)) <= 1.0 / 255.0 + 1e-12


def test_minmax_normalize_examples():
    assert np.allclose(harness.minmax_normalize(np.array([2.0, 4.0, 6.0])), [0.0, 0.5, 1.0])
    spanning = np.array([0.0, 0.3, 1.0])
    assert np.array_equal(harness.minmax_normalize(spanning), spanning)
    assert np.array_equal(harness.minmax_normalize(np.array([0.7, 0.7])), [0.0, 0.0])
    with pytest.raises(ValueError):
        harness.minmax_normalize(np.array([]))


def test_toy_dataset_properties():
    train_set, test_set = harness.toy_dataset(n_train=40, n_test=20, seed=3)
    assert train_set.images.shape == (40, 20, 20)
    assert test_set.images.shape == (20, 20, 20)
    assert set(train_set.labels) <= set(range(10))
    assert train_set.images.min() >= 0.0 and train_set.images.max() <= 1.0
    # black background present and glyphs non-empty
    assert (train_set.images == 0.0).mean() > 0.3
    assert (train_set.images > 0.0).any(axis=(1, 2)).all()
    again, _ = harness.toy_dataset(n_train=40, n_test=20, seed=3)
    assert np.array_equal(train_set.images, again.images)
    assert np.array_equal(train_set.labels, again.labels)


def test_select_correct_filters_and_is_deterministic(small_pipeline):
    params, models, _, test_set = small_pipeline
    model = models[enc.PRIOR]
    selection = harness.select_correct(test_set, params, model, 20, seed=5)
    again = harness.select_correct(test_set, params, model, 20, seed=5)
    assert np.array_equal(selection.indices, again.indices)
    assert selection.shortfall == 0
    for idx in selection.indices:
        presence = enc.presence_for(params, test_set.images[idx], model.mode)
        from capsevade import classifier as clf

        assert clf.classify(model, presence) == test_set.labels[idx]


def test_select_correct_reports_shortfall(small_pipeline):
    params, models, _, test_set = small_pipeline
    selection = harness.select_correct(
        test_set, params, models[enc.PRIOR], len(test_set) + 50, seed=5
    )
    assert selection.shortfall > 0


def test_select_correct_raises_when_nothing_qualifies(small_pipeline):
    params, models, _, test_set = small_pipeline
    hopeless = harness.Dataset(
        images=test_set.images, labels=(test_set.labels + 1) % 4 + 10, split="test"
    )
    with pytest.raises(ValueError):
        harness.select_correct(hopeless, params, models[enc.PRIOR], 5, seed=0)


@pytest.fixture(scope="module")
def gdu_report(small_pipeline):
    params, models, _, test_set = small_pipeline
    config = atk.AttackConfig(algorithm="gdu", seed=0)
    return harness.run_experiment(
        test_set, params, models[enc.PRIOR], config, n=8, seed=13, clock=lambda: 0.0
    )


def test_report_statistics_recomputable(gdu_report):
    rate, mean_l2, std_l2 = harness.recompute_statistics(gdu_report.per_sample)
    assert rate == pytest.approx(gdu_report.success_rate, abs=1e-12)
    assert mean_l2 == pytest.approx(gdu_report.mean_l2, abs=1e-12)
    assert std_l2 == pytest.approx(gdu_report.std_l2, abs=1e-12)
    successes = [r for r in gdu_report.per_sample if r["success"]]
    assert gdu_report.success_rate == len(successes) / len(gdu_report.per_sample)
    for record, result in zip(gdu_report.per_sample, gdu_report.results):
        assert record["l2"] == pytest.approx(
            float(np.linalg.norm(result.perturbation)), abs=1e-12
        )


def test_report_success_rate_arithmetic():
    per_sample = [
        {"success": True, "l2": 1.0},
        {"success": True, "l2": 2.0},
        {"success": True, "l2": 3.0},
        {"success": False, "l2": 0.0},
    ]
    rate, mean_l2, std_l2 = harness.recompute_statistics(per_sample)
    assert rate == 0.75
    assert mean_l2 == pytest.approx(2.0)
    assert std_l2 == pytest.approx(np.std([1.0, 2.0, 3.0]))


def test_report_all_failures_flagged():
    rate, mean_l2, std_l2 = harness.recompute_statistics(
        [{"success": False, "l2": 0.0}] * 3
    )
    assert rate == 0.0 and mean_l2 is None and std_l2 is None


def test_parallel_and_serial_reports_agree(small_pipeline):
    params, models, _, test_set = small_pipeline
    config = atk.AttackConfig(algorithm="gdu", seed=0)
    serial = harness.run_experiment(
        test_set, params, models[enc.PRIOR], config, n=6, seed=21, clock=lambda: 0.0
    )
    parallel = harness.run_experiment(
        test_set, params, models[enc.PRIOR], config, n=6, seed=21,
        n_jobs=3, clock=lambda: 0.0,
    )
    assert serial.to_json() == parallel.to_json()


def test_rerun_report_is_byte_identical(small_pipeline):
    params, models, _, test_set = small_pipeline
    config = atk.AttackConfig(algorithm="psc", seed=4)
    kwargs = dict(n=5, seed=8, clock=lambda: 0.0)
    first = harness.run_experiment(test_set, params, models[enc.PRIOR], config, **kwargs)
    second = harness.run_experiment(test_set, params, models[enc.PRIOR], config, **kwargs)
    assert first.to_json() == second.to_json()


def test_report_json_schema(gdu_report):
    doc = json.loads(gdu_report.to_json())
    assert set(doc) == {
        "config", "per_sample", "success_rate", "mean_l2", "std_l2",
        "l2_basis", "runtime_seconds", "shortfall",
    }
    assert doc["l2_basis"] == "successes"
    assert doc["config"]["algorithm"] == "gdu"
    assert doc["config"]["alpha"] == 0.05
    assert len(doc["per_sample"]) == 8
    assert {"sample_index", "label", "success", "l2", "iterations", "best_iteration"} <= set(
        doc["per_sample"][0]
    )


def test_config_dict_roundtrip():
    config = atk.AttackConfig(algorithm="opt", seed=3)
    doc = harness.config_to_dict(config)
    assert doc["alpha_ub"] == "inf"
    back = harness.config_from_dict(doc)
    assert back == config


def test_per_sample_seeds_differ():
    assert harness._sample_seed(1, 2) != harness._sample_seed(1, 3)
    assert harness._sample_seed(1, 2) == harness._sample_seed(1, 2)


def test_export_image_bytes(tmp_path):
    x = np.array([[1.0, 0.5], [0.0, 0.25]])
    path = tmp_path / "img.pgm"
    harness.export_image(x, path)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")
    payload = blob.split(b"\n", 3)[3]
    assert list(payload) == [255, 128, 0, 64]


def test_export_image_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(6, 5))
    path = tmp_path / "img.pgm"
    harness.export_image(x, path)
    blob = path.read_bytes()
    header, rest = blob.split(b"\n", 1)
    dims, rest = rest.split(b"\n", 1)
    maxval, payload = rest.split(b"\n", 1)
    cols, rows = (int(v) for v in dims.split())
    parsed = np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols) / 255.0
    assert np.max(np.abs(parsed - x)) <= 1.0 / 255.0 + 1e-12


def test_export_image_validates_range(tmp_path):
    with pytest.raises(ValueError):
        harness.export_image(np.array([[1.5]]), tmp_path / "bad.pgm")
