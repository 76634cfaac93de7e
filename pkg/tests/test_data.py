"""
Tests for dataset ingestion and CSV export
"""

import struct

import numpy as np
import pandas as pd
import pytest

from dcbox.clustering import kmeans
from dcbox.data import (
    Dataset,
    export_assignments,
    export_embeddings,
    export_pca,
    load_csv,
    load_idx,
    read_idx,
    read_labels,
    select_classes,
    split_holdout,
    synth_blobs,
    write_idx,
)
from dcbox.exceptions import (
    BadMagicError,
    CountMismatchError,
    CsvFormatError,
    DataFormatError,
    TruncatedPayloadError,
)
from dcbox.metrics import nmi


@pytest.fixture
def idx_files(tmp_path):
    """Five random 28x28 images with labels"""
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    write_idx(tmp_path / "images.idx", images)
    write_idx(tmp_path / "labels.idx", labels)
    return tmp_path / "images.idx", tmp_path / "labels.idx", images, labels


def test_load_idx(idx_files):
    """Images become (n, 1, 28, 28) in [0, 1]"""
    images_path, labels_path, images, labels = idx_files
    dataset = load_idx(images_path, labels_path)
    assert dataset.samples.shape == (5, 1, 28, 28)
    assert dataset.samples.min() >= 0.0 and dataset.samples.max() <= 1.0
    assert np.allclose(dataset.samples[:, 0] * 255.0, images)
    assert dataset.labels.tolist() == labels.tolist()


def test_idx_round_trip_is_byte_exact(idx_files, tmp_path):
    """Loading then re-serializing reproduces the original bytes"""
    images_path, _, _, _ = idx_files
    dataset = load_idx(images_path)
    restored = np.round(dataset.samples[:, 0] * 255.0).astype(np.uint8)
    write_idx(tmp_path / "again.idx", restored)
    assert (tmp_path / "again.idx").read_bytes() == images_path.read_bytes()


def test_idx_header_layout(tmp_path):
    """Big-endian magic and dimension sizes"""
    write_idx(tmp_path / "x.idx", np.zeros((2, 3, 4), dtype=np.uint8))
    data = (tmp_path / "x.idx").read_bytes()
    assert struct.unpack(">4I", data[:16]) == (0x00000803, 2, 3, 4)
    assert len(data) == 16 + 24


def test_idx_gzip(tmp_path):
    """Files ending in .gz are compressed transparently"""
    images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    write_idx(tmp_path / "images.idx.gz", images)
    assert np.array_equal(read_idx(tmp_path / "images.idx.gz"), images)


def test_all_zero_images(tmp_path):
    """Zero bytes become zero samples"""
    write_idx(tmp_path / "zeros.idx", np.zeros((3, 4, 4), dtype=np.uint8))
    assert not load_idx(tmp_path / "zeros.idx").samples.any()


def test_idx_bad_magic(tmp_path):
    """An image loader rejects a magic of 0x00000802"""
    (tmp_path / "bad.idx").write_bytes(struct.pack(">IIi", 0x00000802, 1, 1) + b"\x00")
    with pytest.raises(BadMagicError, match="bad magic"):
        load_idx(tmp_path / "bad.idx")


def test_idx_truncated(idx_files, tmp_path):
    """Missing payload bytes are reported"""
    images_path, _, _, _ = idx_files
    (tmp_path / "short.idx").write_bytes(images_path.read_bytes()[:-10])
    with pytest.raises(TruncatedPayloadError):
        load_idx(tmp_path / "short.idx")
    (tmp_path / "tiny.idx").write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedPayloadError):
        read_idx(tmp_path / "tiny.idx")


def test_idx_count_mismatch(idx_files, tmp_path):
    """Image and label counts must agree"""
    images_path, _, _, _ = idx_files
    write_idx(tmp_path / "few.idx", np.zeros(4, dtype=np.uint8))
    with pytest.raises(CountMismatchError):
        load_idx(images_path, tmp_path / "few.idx")


def test_write_idx_needs_bytes(tmp_path):
    """Only unsigned bytes are written"""
    with pytest.raises(DataFormatError):
        write_idx(tmp_path / "f.idx", np.zeros(3, dtype=np.float64))


def test_synth_blobs_deterministic():
    """Same seed, same dataset"""
    a = synth_blobs(20, 3, 4, 5.0, "tanh_mix", seed=1)
    b = synth_blobs(20, 3, 4, 5.0, "tanh_mix", seed=1)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.labels, b.labels)
    assert a.samples.shape == (60, 4)
    assert np.bincount(a.labels).tolist() == [20, 20, 20]
    assert np.all(np.abs(a.samples) < 1.0)


def test_synth_blobs_separated_are_easy():
    """Well separated blobs are recovered by raw k-means"""
    for seed in range(5):
        dataset = synth_blobs(100, 3, 10, 10.0, "none", seed=seed)
        model = kmeans(dataset.samples, 3, seed=seed, n_init=5)
        assert nmi(model.assignments, dataset.labels) >= 0.99


def test_synth_blobs_zero_separation():
    """Coinciding clusters carry almost no information"""
    dataset = synth_blobs(200, 3, 5, 0.0, "none", seed=0)
    model = kmeans(dataset.samples, 3, seed=0)
    assert nmi(model.assignments, dataset.labels) < 0.1


def test_synth_blobs_arguments():
    """dim below 2 is rejected"""
    with pytest.raises(DataFormatError):
        synth_blobs(10, 2, 1, 1.0)


def test_load_csv(tmp_path):
    """Rows become samples; a label column is split out"""
    path = tmp_path / "data.csv"
    path.write_text("1,2,3\n4,5,6\n7,8,9\n10,11,12\n")
    assert load_csv(path).samples.shape == (4, 3)

    dataset = load_csv(path, label_column=0, scale=2.0)
    assert dataset.samples.shape == (4, 2)
    assert dataset.labels.tolist() == [1, 4, 7, 10]
    assert dataset.samples[0].tolist() == [1.0, 1.5]


def test_load_csv_image_shape(tmp_path):
    """Rows can be reshaped to images"""
    path = tmp_path / "images.csv"
    path.write_text("0,1,2,3\n4,5,6,7\n")
    assert load_csv(path, image_shape=[1, 2, 2]).samples.shape == (2, 1, 2, 2)
    with pytest.raises(DataFormatError):
        load_csv(path, image_shape=[1, 3, 3])


def test_load_csv_non_numeric(tmp_path):
    """Non-numeric cells name their row"""
    path = tmp_path / "bad.csv"
    path.write_text("1,2,3\n4,x,6\n")
    with pytest.raises(CsvFormatError, match="row 2") as info:
        load_csv(path)
    assert info.value.row == 2


def test_load_csv_ragged(tmp_path):
    """Rows of different length name their row"""
    longer = tmp_path / "longer.csv"
    longer.write_text("1,2,3\n4,5,6,7\n")
    with pytest.raises(CsvFormatError, match="row 2"):
        load_csv(longer)

    shorter = tmp_path / "shorter.csv"
    shorter.write_text("1,2,3\n4,5,6\n7,8\n")
    with pytest.raises(CsvFormatError, match="row 3"):
        load_csv(shorter)


def test_load_csv_empty(tmp_path):
    """An empty file is an error"""
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(CsvFormatError, match="empty"):
        load_csv(path)


def test_dataset_label_count():
    """Labels must match the sample count"""
    with pytest.raises(CountMismatchError):
        Dataset(np.zeros((3, 2)), labels=[0, 1])


def test_select_classes():
    """Class filter, then a seeded cap"""
    dataset = Dataset(np.arange(20.0).reshape(10, 2), labels=[0, 1, 2, 3, 4, 0, 1, 2, 3, 4])
    subset = select_classes(dataset, classes=[0, 1])
    assert sorted(subset.labels.tolist()) == [0, 0, 1, 1]
    capped = select_classes(dataset, classes=[0, 1, 2], limit=4, seed=3)
    assert len(capped) == 4
    assert set(capped.labels.tolist()) <= {0, 1, 2}
    assert np.array_equal(capped.samples, select_classes(dataset, [0, 1, 2], 4, seed=3).samples)
    with pytest.raises(DataFormatError):
        select_classes(dataset, classes=[9])


def test_split_holdout():
    """Disjoint, covering, and the training part is never empty"""
    train, holdout = split_holdout(10, 0.3, np.random.default_rng(0))
    assert len(holdout) == 3
    assert sorted(np.concatenate([train, holdout]).tolist()) == list(range(10))
    train, holdout = split_holdout(2, 0.99, np.random.default_rng(0))
    assert len(train) == 1
    train, holdout = split_holdout(5, 0.0, np.random.default_rng(0))
    assert len(holdout) == 0


def test_export_embeddings(tmp_path):
    """sample_id, assigned_cluster, z_0 .. z_{d-1}; one row per sample"""
    z = np.random.default_rng(0).normal(size=(6, 3))
    export_embeddings(tmp_path / "embeddings.csv", z, [0, 1, 0, 1, 2, 2])
    frame = pd.read_csv(tmp_path / "embeddings.csv")
    assert list(frame.columns) == ["sample_id", "assigned_cluster", "z_0", "z_1", "z_2"]
    assert len(frame) == 6
    assert np.allclose(frame[["z_0", "z_1", "z_2"]].to_numpy(), z)


def test_export_pca(tmp_path):
    """Two projection columns plus the id, even for 1-D embeddings"""
    frame = export_pca(tmp_path / "pca.csv", np.random.default_rng(0).normal(size=(5, 4)))
    assert list(frame.columns) == ["sample_id", "pc_0", "pc_1"]
    flat = export_pca(tmp_path / "flat.csv", np.arange(4.0)[:, None])
    assert np.all(flat["pc_1"] == 0.0)
    assert len(pd.read_csv(tmp_path / "flat.csv")) == 4


def test_read_labels(tmp_path):
    """Header detection and preferred columns"""
    export_assignments(tmp_path / "assignments.csv", [1, 1, 0], [2, 0, 0])
    assert read_labels(tmp_path / "assignments.csv").tolist() == [2, 0, 0]
    assert read_labels(tmp_path / "assignments.csv", "in_training_cluster").tolist() == [1, 1, 0]

    (tmp_path / "plain.csv").write_text("3\n1\n2\n")
    assert read_labels(tmp_path / "plain.csv").tolist() == [3, 1, 2]

    (tmp_path / "bad.csv").write_text("label\n1\n1.5\n")
    with pytest.raises(CsvFormatError, match="row 3"):
        read_labels(tmp_path / "bad.csv")
    with pytest.raises(CsvFormatError, match="no column"):
        read_labels(tmp_path / "assignments.csv", "missing")
