import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from accent_forge.dataio import (AIM1_MAGIC, FM01_MAGIC, FeatureSequence, FormatError, ManifestError,
                                 ModelFile, UtteranceRecord, load_manifest, load_model,
                                 normalize_features, read_ivectors, read_matrix, save_model,
                                 stratified_split, write_ivectors, write_manifest, write_matrix)


def _write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def _rec(uid, lang="BP", kind="native", **kw):
    return UtteranceRecord(uid, f"{lang}-spk", kind, lang, feature_path=f"{uid}.fm01", **kw)


# --- manifest ---------------------------------------------------------------

def test_manifest_three_records(tmp_path):
    lines = [json.dumps({"utt_id": f"u{i}", "speaker_id": "s", "kind": "native",
                         "language": "BP", "feature_path": f"u{i}.fm01"}) for i in range(3)]
    recs = load_manifest(_write_lines(tmp_path / "m.jsonl", lines))
    assert [r.utt_id for r in recs] == ["u0", "u1", "u2"]
    assert all(r.split == "train" and r.strength is None for r in recs)


def test_manifest_duplicate_names_the_id(tmp_path):
    line = json.dumps({"utt_id": "u1", "speaker_id": "s", "kind": "native", "language": "BP"})
    with pytest.raises(ManifestError, match="u1"):
        load_manifest(_write_lines(tmp_path / "m.jsonl", [line, line]))


def test_manifest_empty(tmp_path):
    assert load_manifest(_write_lines(tmp_path / "m.jsonl", [])) == []


@pytest.mark.parametrize("raw, msg", [
    ({"utt_id": "u", "speaker_id": "s", "kind": "robot", "language": "BP"}, "kind"),
    ({"utt_id": "u", "speaker_id": "s", "kind": "native", "language": "BP", "strength": 2}, "native"),
    ({"utt_id": "u", "speaker_id": "s", "kind": "accented", "language": "BP", "strength": 5}, "strength"),
    ({"utt_id": "u", "speaker_id": "s", "kind": "native", "language": "BP", "split": "eval"}, "split"),
    ({"utt_id": "u", "speaker_id": "s", "kind": "native", "language": "BP", "colour": 1}, "unknown"),
])
def test_manifest_rejects_invalid(tmp_path, raw, msg):
    with pytest.raises(ManifestError, match=msg):
        load_manifest(_write_lines(tmp_path / "m.jsonl", [json.dumps(raw)]))


def test_manifest_malformed_json_reports_line(tmp_path):
    good = json.dumps({"utt_id": "u", "speaker_id": "s", "kind": "native", "language": "BP"})
    with pytest.raises(ManifestError, match=":2:"):
        load_manifest(_write_lines(tmp_path / "m.jsonl", [good, "{not json"]))


def test_manifest_round_trip(tmp_path):
    recs = [_rec("a", kind="accented", strength=3, split="dev"), _rec("b", posterior_path="b.post")]
    write_manifest(tmp_path / "m.jsonl", recs)
    assert load_manifest(tmp_path / "m.jsonl") == recs


# --- normalization ----------------------------------------------------------

def test_normalize_two_points():
    out = normalize_features(FeatureSequence(np.array([[1.0], [3.0]])))
    np.testing.assert_allclose(out.frames, [[-1.0], [1.0]])


def test_normalize_constant_column():
    out = normalize_features(FeatureSequence(np.array([[5.0], [5.0]])))
    np.testing.assert_array_equal(out.frames, [[0.0], [0.0]])


def test_normalize_random_means_vanish():
    x = np.random.default_rng(0).normal(3.0, 2.0, (100, 39))
    out = normalize_features(FeatureSequence(x, "u"))
    assert np.abs(out.frames.mean(axis=0)).max() < 1e-9
    assert out.utt_id == "u"


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_normalize_is_idempotent(x):
    var = x.var(axis=0)
    # below the variance floor the first pass does not reach unit variance
    assume(np.all((var == 0) | (var > 1e-6)))
    once = normalize_features(FeatureSequence(x))
    twice = normalize_features(once)
    np.testing.assert_allclose(twice.frames, once.frames, atol=1e-6)


# --- splitting --------------------------------------------------------------

def test_split_single_language_counts():
    recs = [_rec(f"u{i:03d}") for i in range(100)]
    counts = Counter(r.split for r in stratified_split(recs, (0.6, 0.2, 0.2), seed=7))
    assert counts == {"train": 60, "dev": 20, "test": 20}


def test_split_deterministic():
    recs = [_rec(f"u{i:03d}") for i in range(100)]
    a = stratified_split(recs, seed=7)
    b = stratified_split(recs, seed=7)
    assert [r.split for r in a] == [r.split for r in b]


def test_split_per_language_counts():
    recs = [_rec(f"{l}{i:02d}", lang=l) for l in "ABCDEFGHIJ" for i in range(50)]
    out = stratified_split(recs, seed=1)
    for lang in "ABCDEFGHIJ":
        c = Counter(r.split for r in out if r.language == lang)
        assert c == {"train": 30, "dev": 10, "test": 10}


def test_split_input_order_irrelevant():
    recs = [_rec(f"{l}{i:02d}", lang=l) for l in "ABC" for i in range(20)]
    shuffled = [recs[i] for i in np.random.default_rng(3).permutation(len(recs))]
    a = {r.utt_id: r.split for r in stratified_split(recs, seed=5)}
    b = {r.utt_id: r.split for r in stratified_split(shuffled, seed=5)}
    assert a == b


def test_split_does_not_mutate_input():
    recs = [_rec(f"u{i}") for i in range(10)]
    stratified_split(recs, seed=0)
    assert all(r.split == "train" for r in recs)


def test_split_tiny_stratum_goes_to_train():
    recs = [_rec("a"), _rec("b")]
    assert {r.split for r in stratified_split(recs)} == {"train"}


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.6, 0.2, 0.3), (1.0, 0.0, 0.0)])
def test_split_rejects_bad_ratios(ratios):
    with pytest.raises(ValueError):
        stratified_split([_rec("a")], ratios)


# --- FM01 -------------------------------------------------------------------

def test_fm01_layout(tmp_path):
    write_matrix(tmp_path / "m.fm01", np.arange(6.0).reshape(2, 3))
    raw = (tmp_path / "m.fm01").read_bytes()
    assert raw[:4] == FM01_MAGIC
    assert len(raw) == 4 + 8 + 6 * 4


def test_fm01_rejects_truncated(tmp_path):
    write_matrix(tmp_path / "m.fm01", np.ones((4, 4)))
    data = (tmp_path / "m.fm01").read_bytes()
    (tmp_path / "m.fm01").write_bytes(data[:-3])
    with pytest.raises(FormatError):
        read_matrix(tmp_path / "m.fm01")


def test_fm01_rejects_bad_magic(tmp_path):
    (tmp_path / "m.fm01").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(FormatError):
        read_matrix(tmp_path / "m.fm01")


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 12), st.integers(0, 7)),
              elements=st.floats(width=32, allow_nan=False)))
def test_fm01_round_trip_float32_exact(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("fm") / "x.fm01"
    write_matrix(path, x)
    back = read_matrix(path)
    assert back.shape == x.shape
    np.testing.assert_array_equal(back.astype(np.float32), x)


def test_ivectors_round_trip(tmp_path):
    vecs = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    write_ivectors(tmp_path / "iv.fm01", ["a", "b", "c"], vecs)
    ids, back = read_ivectors(tmp_path / "iv.fm01")
    assert ids == ["a", "b", "c"]
    np.testing.assert_array_equal(back.astype(np.float32), vecs)


def test_ivectors_mismatched_ids(tmp_path):
    with pytest.raises(FormatError):
        write_ivectors(tmp_path / "iv.fm01", ["a"], np.zeros((2, 3)))


# --- AIM1 -------------------------------------------------------------------

def test_aim1_round_trip(tmp_path):
    mf = ModelFile()
    mf["ABCD"] = np.random.default_rng(0).standard_normal((3, 2, 2))
    mf["EFGH"] = np.array(7.5)
    mf.meta["x.y"] = "hello = world"
    save_model(tmp_path / "m.aim", mf)
    back = load_model(tmp_path / "m.aim")
    assert back.meta["x.y"] == "hello = world"
    np.testing.assert_array_equal(back["ABCD"], mf["ABCD"])
    assert back["EFGH"].shape == ()
    assert (tmp_path / "m.aim").read_bytes()[:4] == AIM1_MAGIC


def test_aim1_skips_unknown_chunk(tmp_path):
    import struct
    mf = ModelFile()
    mf["ABCD"] = np.ones(2)
    save_model(tmp_path / "m.aim", mf)
    extra = b"ZZZZ" + struct.pack("<Q", 3) + b"abc"
    with open(tmp_path / "m.aim", "ab") as fh:
        fh.write(extra)
    back = load_model(tmp_path / "m.aim")
    assert set(back.arrays) == {"ABCD"}


@pytest.mark.parametrize("tag", ["ABC", "ABCDE", "META"])
def test_aim1_rejects_bad_tags(tag):
    with pytest.raises(FormatError):
        ModelFile()[tag] = np.zeros(1)


def test_aim1_rejects_truncated(tmp_path):
    mf = ModelFile()
    mf["ABCD"] = np.ones(10)
    save_model(tmp_path / "m.aim", mf)
    raw = (tmp_path / "m.aim").read_bytes()
    (tmp_path / "m.aim").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_model(tmp_path / "m.aim")
