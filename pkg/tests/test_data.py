"""Manifest and embedding-store format contracts."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agescreen.data import (
    EmbeddingStore,
    Manifest,
    ManifestError,
    Sample,
    load_embeddings,
    load_manifest,
    parse_sample,
    split_view,
    validate_against_store,
    write_embeddings,
    write_manifest,
)


def sample_obj(i, split="train", **over):
    obj = {
        "id": f"s{i:04d}",
        "age": 20 + (i % 60),
        "source": "unit",
        "split": split,
        "embedding_index": i,
    }
    obj.update(over)
    return obj


def make_manifest_file(path, objs):
    with path.open("w", encoding="utf-8") as fh:
        for o in objs:
            fh.write(json.dumps(o, sort_keys=True, separators=(",", ":")) + "\n")


def test_three_line_round_trip_is_byte_identical(tmp_path):
    path = tmp_path / "m.jsonl"
    make_manifest_file(path, [sample_obj(i) for i in range(3)])
    original = path.read_bytes()
    manifest = load_manifest(path)
    assert len(manifest) == 3
    out = tmp_path / "copy.jsonl"
    write_manifest(out, manifest)
    assert out.read_bytes() == original


def test_unknown_fields_survive_round_trip(tmp_path):
    obj = sample_obj(0, notes="keep me", meta={"yaw": 3.5, "custom_tag": [1, 2]})
    path = tmp_path / "m.jsonl"
    make_manifest_file(path, [obj])
    manifest = load_manifest(path)
    out = tmp_path / "copy.jsonl"
    write_manifest(out, manifest)
    assert out.read_bytes() == path.read_bytes()
    s = manifest.samples[0]
    assert s.extra["notes"] == "keep me"
    assert s.meta.extra["custom_tag"] == [1, 2]


def test_integer_metadata_keeps_its_type(tmp_path):
    path = tmp_path / "m.jsonl"
    make_manifest_file(path, [sample_obj(0, meta={"brightness": 128})])
    out = tmp_path / "copy.jsonl"
    write_manifest(out, load_manifest(path))
    assert b'"brightness":128' in out.read_bytes()


def test_age_out_of_range_names_the_sample(tmp_path):
    path = tmp_path / "m.jsonl"
    make_manifest_file(path, [sample_obj(0), sample_obj(1, age=150)])
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    msg = str(err.value)
    assert "s0001" in msg and "150" in msg and ":2" in msg


@pytest.mark.parametrize("age", [-1, 102, 25.0, 25.5, True, "25", None])
def test_bad_ages_rejected(age):
    with pytest.raises(ManifestError):
        parse_sample(sample_obj(0, age=age))


def test_duplicate_id_rejected():
    a = parse_sample(sample_obj(0))
    b = parse_sample(sample_obj(1, id="s0000"))
    with pytest.raises(ManifestError, match="s0000"):
        Manifest(samples=(a, b))


def test_duplicate_embedding_row_within_split_rejected():
    a = parse_sample(sample_obj(0))
    b = parse_sample(sample_obj(1, embedding_index=0))
    with pytest.raises(ManifestError, match="embedding_index 0"):
        Manifest(samples=(a, b))
    # the same row may back different splits
    c = parse_sample(sample_obj(1, split="val", embedding_index=0))
    Manifest(samples=(a, c))


@pytest.mark.parametrize(
    "meta",
    [
        {"brightness": 300},
        {"brightness": -1},
        {"saturation": 1.5},
        {"arousal": -2.0},
        {"contrast": -0.1},
        {"sharpness": -5},
        {"valence": float("nan")},
    ],
)
def test_metadata_range_violations_rejected(meta):
    with pytest.raises(ManifestError):
        parse_sample(sample_obj(0, meta=meta))


def test_blank_line_rejected(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(sample_obj(0)) + "\n\n" + json.dumps(sample_obj(1)) + "\n")
    with pytest.raises(ManifestError, match=":2"):
        load_manifest(path)


def test_invalid_json_line_reports_line_number(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(sample_obj(0)) + "\n{not json\n")
    with pytest.raises(ManifestError, match=":2"):
        load_manifest(path)


@pytest.mark.parametrize("split", ["training", "", None, 3])
def test_bad_split_rejected(split):
    with pytest.raises(ManifestError):
        parse_sample(sample_obj(0, split=split))


@given(
    splits=st.lists(st.sampled_from(["train", "val", "test"]), min_size=0, max_size=40)
)
@settings(max_examples=50, deadline=None)
def test_split_view_partitions_the_manifest(splits):
    samples = tuple(
        parse_sample(sample_obj(i, split=sp)) for i, sp in enumerate(splits)
    )
    manifest = Manifest(samples=samples)
    views = {sp: split_view(manifest, sp) for sp in ("train", "val", "test")}
    # disjoint and exhaustive, original order preserved within each view
    all_ids = [s.id for v in views.values() for s in v]
    assert sorted(all_ids) == sorted(s.id for s in samples)
    for sp, view in views.items():
        assert all(s.split == sp for s in view)
        ids = [s.id for s in view]
        assert ids == [s.id for s in samples if s.split == sp]


def test_split_view_rejects_unknown_split():
    with pytest.raises(ManifestError):
        split_view(Manifest(samples=()), "holdout")


def test_embedding_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    data = rng.normal(size=(5, 16)).astype(np.float32)
    path = tmp_path / "e.bin"
    write_embeddings(path, data)
    store = load_embeddings(path, expected_dim=16)
    assert store.count == 5 and store.dim == 16
    assert np.array_equal(store.data, data)
    # header is exactly 16 bytes
    assert path.stat().st_size == 16 + 4 * 5 * 16


def test_embedding_bad_magic(tmp_path):
    path = tmp_path / "e.bin"
    write_embeddings(path, np.zeros((1, 4), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(ManifestError, match="magic"):
        load_embeddings(path)


def test_embedding_bad_version(tmp_path):
    path = tmp_path / "e.bin"
    write_embeddings(path, np.zeros((1, 4), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(ManifestError, match="version"):
        load_embeddings(path)


def test_embedding_truncated_payload(tmp_path):
    # header promises 4 rows of 512 but the payload holds 2047 floats
    path = tmp_path / "e.bin"
    write_embeddings(path, np.zeros((4, 512), dtype=np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ManifestError, match="truncated"):
        load_embeddings(path)


def test_embedding_trailing_bytes(tmp_path):
    path = tmp_path / "e.bin"
    write_embeddings(path, np.zeros((2, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(ManifestError, match="trailing"):
        load_embeddings(path)


def test_embedding_dim_mismatch(tmp_path):
    path = tmp_path / "e.bin"
    write_embeddings(path, np.zeros((2, 4), dtype=np.float32))
    with pytest.raises(ManifestError, match="dimension"):
        load_embeddings(path, expected_dim=8)


def test_non_finite_embeddings_rejected(tmp_path):
    data = np.zeros((2, 4), dtype=np.float32)
    data[1, 2] = np.nan
    with pytest.raises(ManifestError, match="finite"):
        write_embeddings(tmp_path / "e.bin", data)


def test_validate_against_store_names_the_sample():
    manifest = Manifest(samples=(parse_sample(sample_obj(0, embedding_index=9)),))
    store = EmbeddingStore(data=np.zeros((3, 4), dtype=np.float32))
    with pytest.raises(ManifestError, match="s0000"):
        validate_against_store(manifest, store)


def test_store_row_and_matrix_accessors():
    store = EmbeddingStore(data=np.arange(12, dtype=np.float32).reshape(3, 4))
    row = store.row(1)
    assert row.dtype == np.float64
    assert np.allclose(row, [4, 5, 6, 7])
    mat = store.matrix([2, 0])
    assert mat.shape == (2, 4) and mat[0, 0] == 8.0
    with pytest.raises(ManifestError):
        store.row(3)
