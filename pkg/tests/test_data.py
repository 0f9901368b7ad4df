"""Dataset ingestion: IDX fixtures, raw CHW sidecar, synthetic generator."""

import json

import numpy as np
import pytest

from cgnet.data import (DataFormatError, Dataset, load_dataset,
                        load_idx_dataset, load_idx_file, load_raw_chw,
                        synthetic_dataset, train_val_split, write_idx_file,
                        write_raw_chw)


class TestIdx:
    def test_hand_built_roundtrip(self, tmp_path, rng):
        # 4-image hand-built idx file round-trips exactly
        images = rng.integers(0, 256, (4, 6, 6)).astype(np.uint8)
        labels = np.array([0, 1, 2, 1], dtype=np.uint8)
        ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
        write_idx_file(ip, images)
        write_idx_file(lp, labels)
        ds = load_idx_dataset(ip, lp)
        assert ds.images.shape == (4, 1, 6, 6)
        np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255), images)
        np.testing.assert_array_equal(ds.labels, labels)
        assert ds.num_classes == 3

    def test_header_fields_are_big_endian(self, tmp_path):
        write_idx_file(tmp_path / "x.idx", np.zeros((2, 3), dtype=np.uint8))
        blob = (tmp_path / "x.idx").read_bytes()
        assert blob[:4] == bytes([0, 0, 0x08, 2])
        assert blob[4:12] == (2).to_bytes(4, "big") + (3).to_bytes(4, "big")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.idx").write_bytes(b"\x01\x00\x08\x01" + b"\x00" * 8)
        with pytest.raises(DataFormatError, match="magic"):
            load_idx_file(tmp_path / "bad.idx")

    def test_unsupported_dtype_named(self, tmp_path):
        (tmp_path / "f.idx").write_bytes(bytes([0, 0, 0x0D, 1]) + b"\x00" * 8)
        with pytest.raises(DataFormatError, match="0x0d"):
            load_idx_file(tmp_path / "f.idx")

    def test_truncated_payload(self, tmp_path):
        write_idx_file(tmp_path / "t.idx", np.zeros((4, 4), dtype=np.uint8))
        blob = (tmp_path / "t.idx").read_bytes()
        (tmp_path / "t.idx").write_bytes(blob[:-3])
        with pytest.raises(DataFormatError, match="payload"):
            load_idx_file(tmp_path / "t.idx")


class TestRawChw:
    def test_roundtrip(self, tmp_path, rng):
        ds = Dataset(rng.random((5, 2, 4, 4)), rng.integers(0, 3, 5), 3)
        sidecar = tmp_path / "set.json"
        write_raw_chw(sidecar, ds, dtype="float64")
        back = load_raw_chw(sidecar)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_uint8_normalized(self, tmp_path, rng):
        ds = Dataset(rng.random((3, 1, 4, 4)), rng.integers(0, 2, 3), 2)
        sidecar = tmp_path / "u8.json"
        write_raw_chw(sidecar, ds, dtype="uint8")
        back = load_raw_chw(sidecar)
        assert back.images.min() >= 0.0 and back.images.max() <= 1.0

    def test_missing_field_named(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"count": 1}))
        with pytest.raises(DataFormatError, match="channels"):
            load_raw_chw(tmp_path / "s.json")

    def test_size_mismatch(self, tmp_path, rng):
        ds = Dataset(rng.random((3, 1, 4, 4)), rng.integers(0, 2, 3), 2)
        sidecar = tmp_path / "s.json"
        write_raw_chw(sidecar, ds)
        meta = json.loads(sidecar.read_text())
        meta["count"] = 4
        sidecar.write_text(json.dumps(meta))
        with pytest.raises(DataFormatError, match="bytes"):
            load_raw_chw(sidecar)


class TestSynthetic:
    def test_reproducible(self):
        a = synthetic_dataset(50, seed=42)
        b = synthetic_dataset(50, seed=42)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = synthetic_dataset(50, seed=1)
        b = synthetic_dataset(50, seed=2)
        assert not np.array_equal(a.images, b.images)

    def test_shapes_and_range(self):
        ds = synthetic_dataset(20, num_classes=4, image_size=12, channels=1)
        assert ds.images.shape == (20, 1, 12, 12)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert set(np.unique(ds.labels)) <= set(range(4))

    def test_split(self, rng):
        ds = synthetic_dataset(100, seed=5)
        train, val = train_val_split(ds, 0.2, rng)
        assert len(train) == 80 and len(val) == 20

    def test_dispatch(self):
        ds = load_dataset({"kind": "synthetic", "num_samples": 10,
                           "num_classes": 3, "image_size": 8, "seed": 1})
        assert len(ds) == 10
        with pytest.raises(DataFormatError, match="kind"):
            load_dataset({"kind": "parquet"})
