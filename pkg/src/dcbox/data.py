"""
Dataset ingestion (IDX, CSV, synthetic blobs) and CSV export of results
"""

import gzip
import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import ortho_group
from sklearn.decomposition import PCA

from .exceptions import (
    BadMagicError,
    CountMismatchError,
    CsvFormatError,
    DataFormatError,
    TruncatedPayloadError,
)
from .models import Nonlinearity


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
LABEL_COLUMNS = ("assigned_cluster", "final_cluster", "label")


@dataclass
class Dataset:
    """Samples with optional ground-truth labels, kept for evaluation only"""

    samples: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "dataset"
    normalization: str = "none"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim < 2 or self.samples.shape[0] == 0:
            raise DataFormatError(f"dataset needs a non-empty (n, ...) sample array, got {self.samples.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.samples.shape[0]:
                raise CountMismatchError(f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = self.labels[indices] if self.labels is not None else None
        return Dataset(self.samples[indices], labels, self.name, self.normalization)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_idx(path: PathLike, expected_magic: Optional[int] = None) -> np.ndarray:
    """Raw unsigned-byte IDX array with its header dimensions"""
    data = _read_bytes(path)
    if len(data) < 4:
        raise TruncatedPayloadError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if expected_magic is not None and magic != expected_magic:
        raise BadMagicError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise BadMagicError(f"{path}: bad magic 0x{magic:08x}, expected unsigned-byte IDX data")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayloadError(f"{path}: header promises {ndim} dimensions but the file ends early")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims)) if dims else 1
    payload = data[header:]
    if len(payload) < count:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header promises {count}")
    if len(payload) > count:
        raise DataFormatError(f"{path}: {len(payload) - count} trailing bytes after the payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path: PathLike, values: np.ndarray):
    """Write an unsigned-byte array in IDX layout (gzip when the name ends in .gz)"""
    values = np.asarray(values)
    if values.dtype != np.uint8:
        raise DataFormatError(f"IDX export expects uint8 data, got {values.dtype}")
    header = struct.pack(">I", 0x00000800 | values.ndim) + struct.pack(f">{values.ndim}I", *values.shape)
    payload = header + values.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as f:
            f.write(payload)
    else:
        path.write_bytes(payload)


def load_idx(images_path: PathLike, labels_path: Optional[PathLike] = None) -> Dataset:
    """IDX images scaled to [0, 1] as (n, 1, rows, cols), with optional labels"""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    samples = images.astype(np.float64)[:, None, :, :] / 255.0
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABELS_MAGIC)
        if labels.shape[0] != images.shape[0]:
            raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    logger.info(f"Loaded {images.shape[0]} IDX images of size {images.shape[1]}x{images.shape[2]}")
    return Dataset(samples, labels, name=Path(images_path).name, normalization="scale_1/255")


def synth_blobs(
    n_per_cluster: int,
    k: int,
    dim: int,
    separation: float,
    nonlinearity: Union[Nonlinearity, str] = Nonlinearity.NONE,
    seed: int = 0,
) -> Dataset:
    """
    Unit-variance Gaussian clusters centred at separation * e_j

    Cluster j >= dim reuses axis j mod dim at a larger multiple of the separation.
    tanh_mix sends every sample through tanh(Q x) for a random orthogonal Q.
    """
    if k < 1 or dim < 2 or n_per_cluster < 1:
        raise DataFormatError(f"need k >= 1, dim >= 2 and n_per_cluster >= 1, got {k}, {dim}, {n_per_cluster}")
    rng = np.random.default_rng(seed)
    centers = np.zeros((k, dim))
    for j in range(k):
        centers[j, j % dim] = separation * (1 + j // dim)
    labels = np.repeat(np.arange(k), n_per_cluster)
    samples = centers[labels] + rng.normal(size=(labels.size, dim))
    if Nonlinearity(nonlinearity) == Nonlinearity.TANH_MIX:
        mix = ortho_group.rvs(dim, random_state=rng)
        samples = np.tanh(samples @ mix.T)
    order = rng.permutation(labels.size)
    return Dataset(samples[order], labels[order], name="synthetic", normalization="none")


def load_csv(
    path: PathLike,
    label_column: Optional[int] = None,
    scale: Optional[float] = None,
    image_shape: Optional[Sequence[int]] = None,
) -> Dataset:
    """Rectangular numeric CSV without header; rows become samples"""
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError as e:
        raise CsvFormatError(f"{path}: file is empty") from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        row = int(match.group(1)) if match else None
        raise CsvFormatError(f"{path}: ragged row {row}", row=row) from e

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna()
    if bad.to_numpy().any():
        row_index, col_index = map(int, np.argwhere(bad.to_numpy())[0])
        cell = frame.iat[row_index, col_index]
        row = row_index + 1
        if pd.isna(cell) or cell.strip() == "":
            raise CsvFormatError(f"{path}: missing value in row {row} (ragged row?)", row=row)
        raise CsvFormatError(f"{path}: non-numeric cell '{cell}' in row {row}, column {col_index + 1}", row=row)

    values = numeric.to_numpy(dtype=np.float64)
    labels = None
    if label_column is not None:
        if not 0 <= label_column < values.shape[1]:
            raise DataFormatError(f"{path}: label column {label_column} out of range for {values.shape[1]} columns")
        labels = values[:, label_column]
        if np.any(labels != np.round(labels)):
            raise CsvFormatError(f"{path}: label column {label_column} holds non-integer values")
        values = np.delete(values, label_column, axis=1)
    if values.shape[1] == 0:
        raise DataFormatError(f"{path}: no feature columns left")
    normalization = "none"
    if scale is not None:
        values = values / scale
        normalization = f"scale_1/{scale:g}"
    if image_shape is not None:
        shape = tuple(int(d) for d in image_shape)
        if int(np.prod(shape)) != values.shape[1]:
            raise DataFormatError(f"{path}: {values.shape[1]} features cannot be reshaped to {shape}")
        values = values.reshape((values.shape[0],) + shape)
    logger.info(f"Loaded {values.shape[0]} CSV rows from {path}")
    return Dataset(values, labels, name=Path(path).name, normalization=normalization)


def select_classes(
    dataset: Dataset,
    classes: Optional[Sequence[int]] = None,
    limit: Optional[int] = None,
    seed: int = 0,
) -> Dataset:
    """Keep samples of the listed classes, then at most `limit` of them chosen by seed"""
    indices = np.arange(len(dataset))
    if classes is not None:
        if dataset.labels is None:
            raise DataFormatError("class selection needs a labelled dataset")
        indices = indices[np.isin(dataset.labels, list(classes))]
    if limit is not None and limit < indices.size:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(indices, size=limit, replace=False))
    if indices.size == 0:
        raise DataFormatError(f"no samples left after selecting classes {list(classes or [])}")
    return dataset.subset(indices)


def split_holdout(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle into (train, holdout) index arrays; train is never empty"""
    order = rng.permutation(n)
    n_holdout = min(int(round(n * fraction)), n - 1)
    return np.sort(order[n_holdout:]), np.sort(order[:n_holdout])


def export_embeddings(path: PathLike, embeddings: np.ndarray, assignments: Sequence[int]) -> pd.DataFrame:
    """sample_id, assigned_cluster, z_0 .. z_{d-1}"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    frame = pd.DataFrame(embeddings, columns=[f"z_{i}" for i in range(embeddings.shape[1])])
    frame.insert(0, "assigned_cluster", np.asarray(assignments, dtype=np.int64))
    frame.insert(0, "sample_id", np.arange(len(frame)))
    frame.to_csv(path, index=False, sep=",", decimal=".")
    return frame


def export_pca(path: PathLike, embeddings: np.ndarray) -> pd.DataFrame:
    """sample_id, pc_0, pc_1: a deterministic 2-D projection for plotting"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    projection = np.zeros((embeddings.shape[0], 2))
    components = min(2, embeddings.shape[0], embeddings.shape[1])
    if components > 0:
        projection[:, :components] = PCA(n_components=components, svd_solver="full").fit_transform(embeddings)
    frame = pd.DataFrame({"sample_id": np.arange(embeddings.shape[0]), "pc_0": projection[:, 0], "pc_1": projection[:, 1]})
    frame.to_csv(path, index=False, sep=",", decimal=".")
    return frame


def export_assignments(path: PathLike, in_training: Sequence[int], final: Sequence[int]) -> pd.DataFrame:
    """sample_id, in_training_cluster, final_cluster"""
    frame = pd.DataFrame(
        {
            "sample_id": np.arange(len(final)),
            "in_training_cluster": np.asarray(in_training, dtype=np.int64),
            "final_cluster": np.asarray(final, dtype=np.int64),
        }
    )
    frame.to_csv(path, index=False)
    return frame


def read_labels(path: PathLike, column: Optional[str] = None) -> np.ndarray:
    """
    Integer labels from a CSV

    Headerless files use their last column. Files with a header use `column`, or
    the first of assigned_cluster / final_cluster / label present, or the last column.
    """
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise CsvFormatError(f"{path}: file is empty") from e
    except pd.errors.ParserError as e:
        raise CsvFormatError(f"{path}: {e}") from e

    first = pd.to_numeric(frame.iloc[0], errors="coerce")
    if first.isna().any():
        header = [str(h).strip() for h in frame.iloc[0]]
        frame = frame.iloc[1:].reset_index(drop=True)
        frame.columns = header
        if column is not None:
            if column not in header:
                raise CsvFormatError(f"{path}: no column named '{column}'")
            name = column
        else:
            name = next((c for c in LABEL_COLUMNS if c in header), header[-1])
        values = frame[name]
        offset = 2
    else:
        values = frame.iloc[:, -1]
        offset = 1

    numeric = pd.to_numeric(values, errors="coerce")
    bad = np.flatnonzero(numeric.isna().to_numpy() | (numeric.to_numpy() != np.round(numeric.to_numpy())))
    if bad.size:
        row = int(bad[0]) + offset
        raise CsvFormatError(f"{path}: label '{values.iloc[bad[0]]}' in row {row} is not an integer", row=row)
    return numeric.to_numpy().astype(np.int64)
