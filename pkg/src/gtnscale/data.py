"""Dataset ingestion: IDX image files, CSV tables and logistic-map trajectories."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CACHE_MAGIC = b"GTNDS"
CACHE_VERSION = 1


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature vectors in [0, 1] with integer labels.

    ``samples`` has shape ``(N, M)``; images are stored flattened row-major
    with their shape in ``image_shape``.
    """

    samples: np.ndarray
    labels: np.ndarray
    name: str = ""
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ParameterError(f"samples must be (N, M), got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ParameterError(f"{x.shape[0]} samples but {y.size} labels")
        if x.size and (not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1):
            raise ParameterError("feature values must lie in [0, 1]")
        if y.size and y.min() < 0:
            raise ParameterError("labels must be non-negative")
        if self.image_shape is not None:
            h, w = self.image_shape
            if h * w != x.shape[1]:
                raise ParameterError(f"image_shape {self.image_shape} does not match M={x.shape[1]}")
            object.__setattr__(self, "image_shape", (int(h), int(w)))
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def M(self) -> int:
        return self.samples.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def images(self) -> np.ndarray:
        if self.image_shape is None:
            raise ParameterError(f"dataset {self.name!r} has no image shape")
        return self.samples.reshape(len(self), *self.image_shape)

    def take(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.name, self.image_shape)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, magic: int, what: str, ndim: int) -> tuple[int, ...]:
    if len(raw) < 4:
        raise FormatError(f"{what} file too short for an IDX magic number", offset=0)
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise FormatError(f"{what} file has magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{what} file truncated inside the dimension header", offset=len(raw))
    return struct.unpack_from(f">{ndim}I", raw, 4)


def load_idx(images_path, labels_path, name: str | None = None) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled by 1/255."""
    img_raw = _read_bytes(images_path)
    lab_raw = _read_bytes(labels_path)
    n_img, rows, cols = _idx_header(img_raw, IDX_IMAGES_MAGIC, "image", 3)
    (n_lab,) = _idx_header(lab_raw, IDX_LABELS_MAGIC, "label", 1)
    img_need = 16 + n_img * rows * cols
    if len(img_raw) < img_need:
        raise FormatError(
            f"image payload truncated: need {img_need} bytes, have {len(img_raw)}",
            offset=len(img_raw),
        )
    if len(lab_raw) < 8 + n_lab:
        raise FormatError(
            f"label payload truncated: need {8 + n_lab} bytes, have {len(lab_raw)}",
            offset=len(lab_raw),
        )
    if n_img != n_lab:
        raise FormatError(f"count mismatch: {n_img} images vs {n_lab} labels", offset=4)
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=n_img * rows * cols, offset=16)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=n_lab, offset=8)
    return LabeledDataset(
        pixels.reshape(n_img, rows * cols) / 255.0,
        labels.astype(np.int64),
        name or Path(images_path).name,
        (rows, cols),
    )


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, H, W)`` and labels in IDX format; ``.gz`` suffixes compress."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        if str(path).endswith(".gz"):
            blob = gzip.compress(blob, mtime=0)
        Path(path).write_bytes(blob)


def load_csv(
    path,
    feature_columns: list[str] | None = None,
    label_column: str = "label",
    normalization: str = "minmax",
) -> LabeledDataset:
    """Read a headed CSV. Labels become dense ids in order of first appearance.

    With ``normalization="minmax"`` each feature column is mapped onto [0, 1]
    (a constant column maps to 0). With ``"none"`` values must already lie
    in [0, 1].
    """
    if normalization not in ("minmax", "none"):
        raise ParameterError(f"normalization must be 'minmax' or 'none', got {normalization!r}")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file", offset=0) from None
        if label_column not in header:
            raise FormatError(f"no label column {label_column!r} in header", offset=1)
        if feature_columns is None:
            feature_columns = [c for c in header if c != label_column]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise FormatError(f"columns {missing} not in header", offset=1)
        cols = [header.index(c) for c in feature_columns]
        lab_col = header.index(label_column)
        rows, raw_labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise FormatError(f"row {lineno} has {len(rec)} fields, expected {len(header)}", offset=lineno)
            values = []
            for c, name in zip(cols, feature_columns):
                try:
                    values.append(float(rec[c]))
                except ValueError:
                    raise FormatError(
                        f"non-numeric cell {rec[c]!r} at row {lineno}, column {name!r}", offset=lineno
                    ) from None
            rows.append(values)
            raw_labels.append(rec[lab_col])
    x = np.array(rows, dtype=np.float64).reshape(len(rows), len(cols))
    if normalization == "minmax" and len(rows):
        lo, hi = x.min(axis=0), x.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        x = np.where(hi > lo, (x - lo) / span, 0.0)
    ids: dict[str, int] = {}
    labels = [ids.setdefault(v, len(ids)) for v in raw_labels]
    return LabeledDataset(x, np.array(labels, dtype=np.int64), Path(path).name)


def logistic_trajectories(
    r: float = 3.9,
    n_samples: int = 1,
    M: int = 8,
    burn_in: int = 100,
    seed: int = 0,
    *,
    x0=None,
    label: int = 0,
) -> LabeledDataset:
    """Trajectories of ``x <- r x (1 - x)``: ``M`` iterates after ``burn_in`` steps.

    Initial conditions are uniform on (0, 1) from ``seed`` unless ``x0`` is
    given (scalar or one per sample).
    """
    if not 0 < r <= 4:
        raise ParameterError(f"r must lie in (0, 4], got {r}")
    if n_samples < 1 or M < 1 or burn_in < 0:
        raise ParameterError("need n_samples >= 1, M >= 1, burn_in >= 0")
    if x0 is None:
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 1.0, n_samples)
        x[x == 0.0] = 0.5
    else:
        x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (n_samples,)).copy()
        if np.any((x < 0) | (x > 1)):
            raise ParameterError("initial conditions must lie in [0, 1]")
    for _ in range(burn_in):
        x = r * x * (1.0 - x)
    out = np.empty((n_samples, M))
    for t in range(M):
        x = r * x * (1.0 - x)
        out[:, t] = x
    return LabeledDataset(out, np.full(n_samples, label), f"logistic(r={r})")


def logistic_dataset(
    r_values, n_per_class: int, M: int, burn_in: int = 100, seed: int = 0
) -> LabeledDataset:
    """One class per map parameter; class ``g`` is generated with ``r_values[g]``."""
    parts = [
        logistic_trajectories(r, n_per_class, M, burn_in, seed + 7919 * g, label=g)
        for g, r in enumerate(r_values)
    ]
    return LabeledDataset(
        np.concatenate([p.samples for p in parts]),
        np.concatenate([p.labels for p in parts]),
        "logistic(" + ",".join(str(r) for r in r_values) + ")",
    )


def filter_by_label(ds: LabeledDataset, g: int) -> LabeledDataset:
    mask = ds.labels == g
    if not mask.any():
        raise ParameterError(f"label {g} does not occur in {ds.name!r}")
    return ds.take(np.flatnonzero(mask))


def subsample(ds: LabeledDataset, N: int, seed: int) -> LabeledDataset:
    """``N`` samples without replacement, chosen by a seeded shuffle."""
    if not 0 < N <= len(ds):
        raise ParameterError(f"cannot draw {N} samples from {len(ds)}")
    idx = np.random.default_rng(seed).permutation(len(ds))[:N]
    return ds.take(idx)


def split_per_class(
    ds: LabeledDataset, classes, n_train: int, n_test: int, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint per-class train/test draws, concatenated in class order."""
    train, test = [], []
    for g in classes:
        part = filter_by_label(ds, g)
        if n_train + n_test > len(part):
            raise ParameterError(
                f"class {g} has {len(part)} samples, need {n_train} + {n_test}"
            )
        idx = np.random.default_rng(seed + 104729 * g).permutation(len(part))
        train.append(part.take(idx[:n_train]))
        test.append(part.take(idx[n_train : n_train + n_test]))

    def cat(parts):
        return LabeledDataset(
            np.concatenate([p.samples for p in parts]),
            np.concatenate([p.labels for p in parts]),
            ds.name,
            ds.image_shape,
        )

    return cat(train), cat(test)


def dataset_to_bytes(ds: LabeledDataset) -> bytes:
    """Versioned binary cache.

    Layout (little-endian): magic ``GTNDS``, u32 version, u64 N, u64 M,
    u32 H, u32 W (0, 0 when not an image), u32 name length, UTF-8 name,
    N*M float64 samples row-major, N int64 labels.
    """
    h, w = ds.image_shape or (0, 0)
    name = ds.name.encode()
    head = CACHE_MAGIC + struct.pack("<IQQIII", CACHE_VERSION, len(ds), ds.M, h, w, len(name))
    return (
        head
        + name
        + np.ascontiguousarray(ds.samples, dtype="<f8").tobytes()
        + np.ascontiguousarray(ds.labels, dtype="<i8").tobytes()
    )


def dataset_from_bytes(data: bytes) -> LabeledDataset:
    if data[:5] != CACHE_MAGIC:
        raise FormatError("not a dataset cache (bad magic)", offset=0)
    fixed = struct.calcsize("<IQQIII")
    if len(data) < 5 + fixed:
        raise FormatError("truncated cache header", offset=5)
    version, n, m, h, w, name_len = struct.unpack_from("<IQQIII", data, 5)
    if version != CACHE_VERSION:
        raise FormatError(f"cache version {version}, this reader handles {CACHE_VERSION}", offset=5)
    off = 5 + fixed
    need = off + name_len + 8 * n * m + 8 * n
    if len(data) != need:
        raise FormatError(f"cache size {len(data)} bytes, expected {need}", offset=min(len(data), need))
    name = data[off : off + name_len].decode()
    off += name_len
    x = np.frombuffer(data, dtype="<f8", count=n * m, offset=off).reshape(n, m)
    off += 8 * n * m
    y = np.frombuffer(data, dtype="<i8", count=n, offset=off)
    return LabeledDataset(x, y, name, (h, w) if h else None)


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())
