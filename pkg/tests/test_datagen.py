import json

import numpy as np
import pytest
from scipy import stats

from sptlab.datagen import (
    ANCHORS, DatasetFormatError, clean_trajectory, flip_indices, generate_dataset, generate_sequence,
    generate_split, load_jsonl_dataset, load_split_dir, n_flips, warped_time, write_dataset,
)
from sptlab.numeric import SeededRng

SMALL = {"train": 20, "val": 10, "test": 10, "unlabeled": 6}


def test_anchor_values():
    np.testing.assert_array_equal(ANCHORS[0][0], [0.66, 0.55])
    np.testing.assert_array_equal(ANCHORS[0][1], [-0.495, -0.605])
    np.testing.assert_array_equal(ANCHORS[1][0], [0.605, -0.55])
    np.testing.assert_array_equal(ANCHORS[1][1], [-0.55, 0.605])


def test_hand_evaluated_first_point():
    x = clean_trajectory(0, s=0.2, phi=0.0, alpha=1.0)
    np.testing.assert_allclose(x[0], [0.0825, 0.2725], atol=1e-15)


def test_warped_time_endpoints_fixed():
    t = warped_time(100, 0.25)
    assert t[0] == 0.0
    assert t[-1] == pytest.approx(1.0, abs=1e-12)


def test_sequence_shape_and_label():
    seq = generate_sequence(1, SeededRng(0, "t"))
    assert seq.x.shape == (100, 2)
    assert seq.pad_len == 100 and seq.label == 1
    with pytest.raises(ValueError):
        generate_sequence(2, SeededRng(0))


def test_draw_order_documented():
    rng = SeededRng(42, "order")
    seq = generate_sequence(0, SeededRng(42, "order"))
    u = rng.uniform(2)
    alpha = 1 + 0.1 * rng.normal()
    eps = rng.normal(200).reshape(100, 2)
    n_sp = rng.integers(4)
    where = rng.choice(100, n_sp)
    delta = rng.normal(2 * n_sp).reshape(n_sp, 2)
    x = clean_trajectory(0, 0.12 + 0.16 * u[0], 2 * np.pi * u[1], alpha) + 0.55 * eps
    x[where] += delta
    np.testing.assert_array_equal(seq.x, x)


def test_disabling_noise_keeps_trajectory():
    a = generate_sequence(0, SeededRng(3, "k"), noise_std=0.0, outliers=False)
    b = generate_sequence(0, SeededRng(3, "k"))
    assert np.abs(a.x - b.x).max() > 0
    rng = SeededRng(3, "k")
    u = rng.uniform(2)
    alpha = 1 + 0.1 * rng.normal()
    np.testing.assert_array_equal(a.x, clean_trajectory(0, 0.12 + 0.16 * u[0], 2 * np.pi * u[1], alpha))


def test_noise_free_amplitude_bound():
    tr = generate_split(5, "test", 10_000, noise_std=0.0, outliers=False)
    assert np.abs(tr.x).max() <= 1.6


def test_default_dataset_sizes_and_flips():
    ds = generate_dataset(0, sizes={"unlabeled": 4})
    assert len(ds.train) == 100 and len(ds.val) == 200 and len(ds.test) == 400
    assert len(ds.flipped) == 15
    clean = np.arange(100) % 2
    assert int(np.sum(ds.train.labels != clean)) == 15
    np.testing.assert_array_equal(ds.val.labels, np.arange(200) % 2)
    assert np.all(ds.unlabeled.labels == -1)


def test_no_flips_means_balanced():
    ds = generate_dataset(1, sizes=SMALL, flip_fraction=0.0)
    assert ds.train.labels.sum() == len(ds.train) // 2


def test_dataset_determinism_and_order_independence():
    a = generate_dataset(9, sizes=SMALL)
    b = generate_dataset(9, sizes=SMALL)
    for name in ("train", "val", "test", "unlabeled"):
        assert a.split(name).x.tobytes() == b.split(name).x.tobytes()
    bigger = generate_dataset(9, sizes={**SMALL, "test": 20})
    np.testing.assert_array_equal(bigger.test.x[:10], a.test.x)


@pytest.mark.parametrize("bad", [{"train": 7}, {"val": 0}, {"test": -2}])
def test_odd_or_empty_labeled_split_rejected(bad):
    with pytest.raises(ValueError):
        generate_dataset(0, sizes={**SMALL, **bad})


def test_flip_count_rounding():
    assert n_flips(0.15, 100) == 15
    assert n_flips(0.29, 100) == 29
    assert n_flips(0.15, 10) == 1


def test_flip_indices_uniform():
    counts = np.zeros(100)
    for seed in range(2000):
        idx = flip_indices(seed, 100, 0.15)
        assert len(set(idx.tolist())) == 15
        counts[idx] += 1
    assert stats.chisquare(counts).pvalue > 1e-3


def test_jsonl_examples(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert len(load_jsonl_dataset(empty)) == 0

    one = tmp_path / "one.jsonl"
    one.write_text(json.dumps({"label": 1, "x": [[0, 0], [1, 1]]}) + "\n")
    s = load_jsonl_dataset(one)
    assert len(s) == 1 and s.length == 2 and s.pad_len[0] == 2 and s.labels[0] == 1

    two = tmp_path / "two.jsonl"
    two.write_text("\n".join(json.dumps({"label": 0, "x": [[0.5]] * n}) for n in (3, 5)) + "\n")
    s = load_jsonl_dataset(two)
    assert s.length == 5 and s.pad_len.tolist() == [3, 5]
    assert np.all(s.x[0, 3:] == 0)


def test_jsonl_token_schema(tmp_path):
    p = tmp_path / "tok.jsonl"
    p.write_text(json.dumps({"label": None, "tokens": [3, 1, 4]}) + "\n")
    s = load_jsonl_dataset(p, "token")
    assert s.kind == "token" and s.x.dtype == np.int64 and s.labels[0] == -1


@pytest.mark.parametrize("lines,msg", [
    (['{"label": 0, "x": [[1, 2]]}', "not json"], "line 2"),
    (['{"label": 0, "x": [[1, 2], [3]]}'], "line 1: inconsistent inner dimension"),
    (['{"label": 0, "x": [[1, 2]]}', '{"label": 1, "x": [[1, 2, 3]]}'], "inconsistent inner dimension"),
    (['{"label": 0, "y": [[1]]}'], "line 1"),
    (['{"label": "a", "x": [[1]]}'], "line 1"),
])
def test_jsonl_errors(tmp_path, lines, msg):
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match=msg):
        load_jsonl_dataset(p)


def test_write_and_reload_dataset(tmp_path):
    ds = generate_dataset(4, sizes=SMALL)
    write_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["master_seed"] == 4 and manifest["sizes"] == ds.sizes
    splits = load_split_dir(tmp_path)
    np.testing.assert_array_equal(splits["train"].labels, ds.train.labels)
    np.testing.assert_allclose(splits["test"].x, ds.test.x, rtol=0, atol=0)
