import json

import numpy as np
import pytest

from dtd import data


def write(path, text):
    path.write_text(text)
    return path


def test_small_csv(tmp_path):
    ds = data.load_csv(write(tmp_path / "a.csv", "x,y\n1,2\n3,4\n5,7\n"))
    assert ds.values.shape == (3, 2)
    assert ds.labels is None
    assert ds.channels == ["x", "y"]


def test_label_column(tmp_path):
    ds = data.load_csv(write(tmp_path / "a.csv", "x,label\n1,0\n2,0\n4,0\n"))
    assert ds.labels.tolist() == [0, 0, 0]
    assert ds.values.shape == (3, 1)


def test_non_numeric_row(tmp_path):
    rows = "".join(f"{i},{i}\n" for i in range(1, 7)) + "7,oops\n8,8\n"
    with pytest.raises(data.DataFormatError, match="row 7"):
        data.load_csv(write(tmp_path / "a.csv", "x,y\n" + rows))


def test_ragged_row(tmp_path):
    with pytest.raises(data.DataFormatError, match="row 2"):
        data.load_csv(write(tmp_path / "a.csv", "x,y\n1,2\n3\n"))


def test_bad_label(tmp_path):
    with pytest.raises(data.DataFormatError, match="row 3"):
        data.load_csv(write(tmp_path / "a.csv", "x,label\n1,0\n2,1\n3,2\n"))


def test_normalisation_from_training_rows_only(tmp_path):
    vals = np.arange(100.0)
    vals[80:] += 1000.0  # test rows far away must not leak into the statistics
    path = write(tmp_path / "a.csv", "x\n" + "".join(f"{v}\n" for v in vals))
    ds = data.load_csv(path)
    train = vals[:70]
    assert ds.mean[0] == pytest.approx(train.mean())
    assert ds.std[0] == pytest.approx(train.std())
    assert np.allclose(ds.normalized()[:, 0], (vals - train.mean()) / train.std())


def test_normalisation_skips_anomalous_training_rows():
    vals = np.ones((10, 1))
    vals[1] = 50.0
    labels = np.zeros(10, dtype=int)
    labels[1] = 1
    ds = data.TimeSeriesDataset(vals + np.arange(10)[:, None], ["x"], labels=labels)
    ds.fit_normalization(slice(0, 7))
    normal = (vals + np.arange(10)[:, None])[[0, 2, 3, 4, 5, 6], 0]
    assert ds.mean[0] == pytest.approx(normal.mean())


def test_csv_roundtrip(tmp_path):
    ds = data.synth_generate(data.SyntheticSpec(channels=3, length=50, seed=1))
    data.write_csv(tmp_path / "s.csv", ds)
    back = data.load_csv(tmp_path / "s.csv", normalize=False)
    assert np.array_equal(back.values, ds.values)
    assert np.array_equal(back.labels, ds.labels)


# ---------------------------------------------------------------- windows

def test_window_count_formula():
    assert len(data.make_windows(np.zeros((100, 2)), 16, 1)) == 84
    assert data.window_count(100, 16, 1) == 84
    for L, H, s in [(100, 16, 3), (57, 5, 7), (20, 4, 19)]:
        assert len(data.make_windows(np.zeros((L, 1)), H, s)) == (L - H - 1) // s + 1


def test_single_window_boundary():
    assert len(data.make_windows(np.zeros((17, 1)), 16, 1)) == 1
    assert len(data.make_windows(np.zeros((30, 1)), 4, 30)) == 1


def test_too_short():
    with pytest.raises(ValueError):
        data.make_windows(np.zeros((16, 1)), 16, 1)
    with pytest.raises(ValueError):
        data.make_windows(np.zeros((16, 1)), 0, 1)


def test_window_reconstruction():
    X = np.random.default_rng(0).normal(size=(60, 3))
    ws = data.make_windows(X, 8, 3)
    for i in range(len(ws)):
        pair = ws[i]
        t = pair.index
        assert np.array_equal(np.concatenate([pair.x_hist, pair.x0[None]]), X[t - 8:t + 1])


def test_normal_windows_filter():
    X = np.zeros((40, 1))
    labels = np.zeros(40, dtype=int)
    labels[20] = 1
    ws = data.normal_windows(X, labels, 4)
    assert not np.any((ws.index >= 20) & (ws.index <= 24))
    assert len(ws) == len(data.make_windows(X, 4)) - 5


# ---------------------------------------------------------------- grouping

def test_grouping_partition(tmp_path):
    g = {"a": ["x", "y"], "b": ["z", "w"]}
    path = write(tmp_path / "g.json", json.dumps(g))
    ds = data.TimeSeriesDataset(np.arange(12.0).reshape(3, 4), ["w", "x", "y", "z"],
                                grouping=data.load_grouping(path))
    ds.fit_normalization(slice(0, 3))
    order, N, d = ds.node_layout()
    assert (N, d) == (2, 2)
    assert order.tolist() == [1, 2, 3, 0]
    with pytest.raises(data.DataFormatError):
        data.TimeSeriesDataset(np.zeros((2, 3)), ["x", "y", "z"], grouping={"a": ["x", "y"]})
    with pytest.raises(data.DataFormatError):
        data.TimeSeriesDataset(np.zeros((2, 2)), ["x", "y"], grouping={"a": ["x", "y"], "b": ["y"]})


# ---------------------------------------------------------------- synthetic

def test_no_faults_all_normal():
    ds = data.synth_generate(data.SyntheticSpec(channels=2, length=300, seed=0))
    assert not ds.labels.any()


def test_fault_labels_exact():
    spec = data.SyntheticSpec(channels=3, length=1000,
                              faults=[{"onset": 500, "duration": 100, "type": "mean-shift"}])
    ds = data.synth_generate(spec)
    assert np.flatnonzero(ds.labels).tolist() == list(range(500, 600))


def test_synth_deterministic():
    spec = dict(channels=4, length=500, seed=7,
                faults=[{"onset": 100, "duration": 50, "type": t} for t in data.FAULT_TYPES][:1])
    a = data.synth_generate(data.SyntheticSpec(**spec))
    b = data.synth_generate(data.SyntheticSpec(**spec))
    assert np.array_equal(a.values, b.values)


@pytest.mark.parametrize("ftype", data.FAULT_TYPES)
def test_fault_types_change_only_interval(ftype):
    base = data.SyntheticSpec(channels=3, length=400, seed=2)
    clean = data.synth_generate(base)
    faulty = data.synth_generate(data.SyntheticSpec(
        channels=3, length=400, seed=2, faults=[{"onset": 100, "duration": 50, "type": ftype}]))
    diff = np.any(clean.values != faulty.values, axis=1)
    assert diff[100:150].all() and not diff[:100].any() and not diff[150:].any()


def test_mean_shift_magnitude():
    spec = data.SyntheticSpec(channels=2, length=20000, ar=0.5, mixing=[[1.0, 0.0], [0.0, 1.0]], seed=3,
                              faults=[{"onset": 10000, "duration": 10000, "type": "mean-shift",
                                       "magnitude": 4.0}])
    x = data.synth_generate(spec).values
    sigma = 1.0 / np.sqrt(1 - 0.25)
    shift = x[10000:].mean(axis=0) - x[:10000].mean(axis=0)
    assert np.allclose(shift, 4.0 * sigma, atol=0.15)


@pytest.mark.parametrize("bad", [
    {"ar": 1.0}, {"ar": [0.1, 0.2]}, {"faults": [{"onset": 90, "duration": 20}]},
    {"faults": [{"onset": 1, "duration": 2, "type": "spike"}]}, {"mixing": [[1.0]]},
])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        data.SyntheticSpec(channels=3, length=100, **bad)


def test_spec_json_unknown_key(tmp_path):
    path = write(tmp_path / "s.json", json.dumps({"channels": 2, "lenght": 10}))
    with pytest.raises(ValueError, match="lenght"):
        data.load_synthetic_spec(path)
    path = write(tmp_path / "t.json", json.dumps({"faults": [{"onset": 1, "duraton": 3}]}))
    with pytest.raises(ValueError, match="duraton"):
        data.load_synthetic_spec(path)
