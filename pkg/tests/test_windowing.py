import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paresis.synthgen import SynthSpec, generate
from paresis.windowing import (Recording, RecordingFormatError, RecordingTooShort,
                               RecordingValidationError, SlidingWindowTransformer, SplitSpec, SubjectMeta,
                               Window, build_dataset, ingest_recording, load_directory, normalize_window,
                               slide_windows, split_recordings, window_count, write_recording)

from _oracles import scan_window_count

META = SubjectMeta(60, "F", "Mild", 100.0, 55)


def make_rec(L=100, F=3, rid="r0", side="Left", action="drinking", seed=0):
    x = np.random.default_rng(seed).normal(size=(L, F))
    return Recording(rid, [f"c{i}" for i in range(F)], x, 100.0, side, action, META)


SIDECAR = {"id": "r1", "paretic_side": "Right", "action": "shelf", "age": 70, "sex": "M",
           "impairment": "Severe", "time_since_stroke_days": 400, "ue_fma": 12}


def write_pair(tmp_path, body, name="r1.csv", sidecar=SIDECAR):
    (tmp_path / name).write_text(body)
    (tmp_path / name).with_suffix(".json").write_text(json.dumps(sidecar))
    return tmp_path / name


@pytest.mark.parametrize("L,T,skip,offsets", [
    (100, 64, 32, [0, 32]), (64, 64, 32, [0]), (10, 4, 2, [0, 2, 4, 6]),
])
def test_slide_windows_examples(L, T, skip, offsets):
    wins = slide_windows(make_rec(L), T, skip)
    assert [w.offset for w in wins] == offsets
    assert all(w.data.shape == (T, 3) for w in wins)
    assert wins[0].labels == {"paretic": "Left", "action": "drinking"}


def test_default_skip_is_half_window():
    assert [w.offset for w in slide_windows(make_rec(100), 32)] == [0, 16, 32, 48, 64]
    assert [w.offset for w in slide_windows(make_rec(20), 5)] == list(range(0, 16, 2))


def test_too_short_is_distinct():
    with pytest.raises(RecordingTooShort):
        slide_windows(make_rec(30), 32)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 400), st.integers(1, 128), st.integers(1, 64))
def test_window_count_matches_scan(L, T, skip):
    assert window_count(L, T, skip) == scan_window_count(L, T, skip)
    if T <= L:
        assert len(slide_windows(make_rec(L, F=1), T, skip)) == scan_window_count(L, T, skip)


@pytest.mark.parametrize("T", [32, 64])
def test_half_overlap_shares_rows(T):
    wins = slide_windows(make_rec(300), T)
    for a, b in zip(wins, wins[1:]):
        np.testing.assert_array_equal(a.data[T // 2:], b.data[:T // 2])


def test_normalize_examples():
    w = Window(np.array([[3.0], [5.0], [4.0]]), "x", 0)
    np.testing.assert_array_equal(normalize_window(w).data, [[0], [2], [1]])
    c = Window(np.full((3, 2), 7.5), "x", 0)
    np.testing.assert_array_equal(normalize_window(c).data, np.zeros((3, 2)))
    n = normalize_window(Window(np.random.default_rng(0).normal(size=(8, 4)), "x", 0))
    assert np.all(n.data[0] == 0) and n.normalized
    np.testing.assert_array_equal(normalize_window(n).data, n.data)


def test_csv_ingest(tmp_path):
    rec = ingest_recording(write_pair(tmp_path, "time,a,b\n0,1,2\n0.01,3,4\n0.02,5,6\n"))
    assert rec.samples.shape == (3, 2)
    assert rec.channels == ["a", "b"]
    assert (rec.id, rec.paretic_side, rec.meta.ue_fma) == ("r1", "Right", 12)
    assert rec.sample_rate_hz == pytest.approx(100.0)


def test_csv_wrong_arity_names_line(tmp_path):
    with pytest.raises(RecordingFormatError, match=r"r1.csv:3"):
        ingest_recording(write_pair(tmp_path, "time,a,b\n0,1,2\n0.01,3\n"))


def test_nan_is_validation_error(tmp_path):
    with pytest.raises(RecordingValidationError):
        ingest_recording(write_pair(tmp_path, "time,a\n0,1\n0.01,NaN\n"))


def test_unknown_action_is_validation_error(tmp_path):
    with pytest.raises(RecordingValidationError, match="action"):
        ingest_recording(write_pair(tmp_path, "time,a\n0,1\n", sidecar={**SIDECAR, "action": "juggling"}))


def test_missing_sidecar_field(tmp_path):
    bad = {k: v for k, v in SIDECAR.items() if k != "ue_fma"}
    with pytest.raises(RecordingFormatError, match="ue_fma"):
        ingest_recording(write_pair(tmp_path, "time,a\n0,1\n", sidecar=bad))


def test_bad_header(tmp_path):
    with pytest.raises(RecordingFormatError):
        ingest_recording(write_pair(tmp_path, "t,a\n0,1\n"))


def test_jsonl_ingest(tmp_path):
    body = '{"time": 0, "a": 1, "b": 2}\n{"time": 0.5, "a": 3, "b": 4}\n'
    rec = ingest_recording(write_pair(tmp_path, body, "r1.jsonl"))
    np.testing.assert_array_equal(rec.samples, [[1, 2], [3, 4]])
    with pytest.raises(RecordingFormatError, match="r1.jsonl:3"):
        ingest_recording(write_pair(tmp_path, body + '{"time": 1, "a": 3}\n', "r1.jsonl"))


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_generator_round_trip(tmp_path, fmt):
    recs, _ = generate(SynthSpec(n_subjects=2, recordings_per_subject=2, length=50, channels=6))
    for r in recs:
        write_recording(r, tmp_path, fmt)
    back = load_directory(tmp_path)
    assert [b.id for b in back] == sorted(r.id for r in recs)
    for r in recs:
        b = next(x for x in back if x.id == r.id)
        np.testing.assert_array_equal(b.samples, r.samples)
        assert (b.channels, b.meta, b.action) == (r.channels, r.meta, r.action)


def test_build_dataset_partition():
    recs = [make_rec(100, rid=f"r{i}", side=["Left", "Right"][i % 2]) for i in range(10)]
    tr, va, te = build_dataset(recs, "paretic", 32, split=SplitSpec(0.8, 0.1, 0.1, seed=1))
    ids = [set(s.source_ids) for s in (tr, va, te)]
    assert [len(s) for s in ids] == [8, 1, 1]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == {r.id for r in recs}
    assert len(tr) == 8 * 5
    assert np.all(tr.X[:, 0] == 0)
    again = build_dataset(recs, "paretic", 32, split=SplitSpec(0.8, 0.1, 0.1, seed=1))
    np.testing.assert_array_equal(again[0].X, tr.X)


def test_split_seeds_differ():
    ids = [f"r{i}" for i in range(10)]
    base = split_recordings(ids, SplitSpec(seed=0))
    assert sum(split_recordings(ids, SplitSpec(seed=s)) != base for s in range(1, 21)) >= 1


@pytest.mark.parametrize("fr", [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1), (0.7, 0.1, 0.1)])
def test_bad_split(fr):
    with pytest.raises(ValueError):
        SplitSpec(*fr)


def test_action_labels():
    recs = [make_rec(64, rid=f"r{i}", action=a) for i, a in enumerate(["shelf", "RTT", "brushing"])]
    ws = build_dataset(recs, "action", 64, split=SplitSpec(1.0, 0.0, 0.0))[0]
    assert sorted(ws.y.tolist()) == [0, 7, 8]


def test_transformer():
    X = np.random.default_rng(0).normal(size=(2, 100, 3))
    t = SlidingWindowTransformer(window_len=64)
    out = t.fit_transform(X)
    assert out.shape == (4, 64, 3)
    assert np.all(out[:, 0] == 0)
    np.testing.assert_array_equal(out[1], X[0, 32:96] - X[0, 32])
    assert t.get_params() == {"window_len": 64, "skip": None, "normalize": True}
    assert SlidingWindowTransformer(10, 5, normalize=False).transform(X[0]).shape == (19, 10, 3)
