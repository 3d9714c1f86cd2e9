"""MNIST and KDD Cup 99 ingestion, preprocessing and experiment splits."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from .checkpoint import from_json_entry, json_entry, read_container, write_container
from .errors import DataError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

KDD_COLUMNS = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in",
    "num_compromised", "root_shell", "su_attempted", "num_root",
    "num_file_creations", "num_shells", "num_access_files", "num_outbound_cmds",
    "is_host_login", "is_guest_login", "count", "srv_count", "serror_rate",
    "srv_serror_rate", "rerror_rate", "srv_rerror_rate", "same_srv_rate",
    "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate", "dst_host_srv_serror_rate", "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
)
# The three symbolic fields plus the four binary flags; with the 10-percent
# file's vocabularies these one-hot encode to 87 columns (121 in total).
KDD_CATEGORICAL = ("protocol_type", "service", "flag", "land", "logged_in",
                   "is_host_login", "is_guest_login")
KDD_CONTINUOUS = tuple(c for c in KDD_COLUMNS if c not in KDD_CATEGORICAL)
KDD_NORMAL_LABEL = "normal."
KDD_FEATURES = 121


@dataclass
class RawMnist:
    images: np.ndarray  # [n, 28, 28] uint8
    labels: np.ndarray  # [n] uint8


@dataclass
class RawKdd:
    continuous: np.ndarray   # [n, 34] float64
    categorical: np.ndarray  # [n, 7] str
    labels: np.ndarray       # [n] str, verbatim


@dataclass
class LabeledDataset:
    features: np.ndarray
    anomaly: np.ndarray
    ids: np.ndarray
    prep: dict[str, np.ndarray] = field(default_factory=dict)
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.features) == len(self.anomaly) == len(self.ids)):
            raise DataError("features, anomaly flags and ids differ in length")
        self.anomaly = np.asarray(self.anomaly, dtype=bool)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def prevalence(self) -> float:
        return float(self.anomaly.mean()) if len(self) else 0.0

    def take(self, index: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[index], self.anomaly[index], self.ids[index],
                              self.prep, self.split, dict(self.provenance))

    def subsample(self, size: int | float, seed: int) -> "LabeledDataset":
        """Seeded random subset; ``size`` is a row count or a fraction in (0, 1)."""
        n = len(self)
        k = int(round(size * n)) if isinstance(size, float) and size < 1 else int(size)
        if k >= n:
            return self
        rng = np.random.default_rng([seed, 0x5B])
        out = self.take(np.sort(rng.choice(n, size=k, replace=False)))
        out.provenance["subsample"] = {"size": k, "seed": seed}
        return out


# --------------------------------------------------------------------- MNIST

def _open_maybe_gz(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(blob: bytes, expected_magic: int, name: str = "idx") -> np.ndarray:
    if len(blob) < 8:
        raise FormatError(f"{name}: truncated header ({len(blob)} bytes)")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise FormatError(f"{name}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{name}: truncated header ({len(blob)} bytes)")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims))
    if len(blob) - header < size:
        raise FormatError(f"{name}: payload has {len(blob) - header} bytes, header promises {size}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims).copy()


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(root: Path, stem: str) -> Path:
    for cand in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            p = root / (cand + suffix)
            if p.exists():
                return p
    raise DataError(f"no MNIST file {stem}[.gz] under {root}")


def load_mnist(path, parts=("train", "test")) -> RawMnist:
    """Read the IDX files under ``path`` and pool the requested partitions."""
    root = Path(path)
    images, labels = [], []
    for part in parts:
        img_name, lab_name = _MNIST_FILES[part]
        img = parse_idx(_open_maybe_gz(_find(root, img_name)), IMAGE_MAGIC, img_name)
        lab = parse_idx(_open_maybe_gz(_find(root, lab_name)), LABEL_MAGIC, lab_name)
        if len(img) != len(lab):
            raise FormatError(f"{part}: {len(img)} images but {len(lab)} labels")
        images.append(img)
        labels.append(lab)
    return RawMnist(np.concatenate(images), np.concatenate(labels))


def scale_pixels(raw) -> np.ndarray:
    """Map bytes 0..255 linearly onto [-1, 1]."""
    return np.asarray(raw, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def make_mnist_split(raw: RawMnist, anomaly_digit: int, seed: int,
                     train_frac: float = 0.8) -> tuple[LabeledDataset, LabeledDataset]:
    """One digit is the anomaly class; 80% of the rest trains, everything else tests."""
    if not 0 <= anomaly_digit <= 9:
        raise ValueError(f"anomaly digit must be 0..9, got {anomaly_digit}")
    anomaly = raw.labels == anomaly_digit
    normal_idx = np.flatnonzero(~anomaly)
    rng = np.random.default_rng([seed, anomaly_digit])
    normal_idx = rng.permutation(normal_idx)
    n_train = int(round(train_frac * len(normal_idx)))
    train_idx = np.sort(normal_idx[:n_train])
    test_idx = np.sort(np.concatenate([normal_idx[n_train:], np.flatnonzero(anomaly)]))
    x = scale_pixels(raw.images)[..., None]
    prep = {"pixel_scale": np.asarray([127.5, -1.0])}
    prov = {"dataset": "mnist", "seed": seed, "anomaly_digit": anomaly_digit,
            "pooled": True, "train_frac": train_frac}
    train = LabeledDataset(x[train_idx], anomaly[train_idx], train_idx, prep, "train", dict(prov))
    test = LabeledDataset(x[test_idx], anomaly[test_idx], test_idx, prep, "test", dict(prov))
    return train, test


# ---------------------------------------------------------------------- KDD

def load_kdd(path) -> RawKdd:
    """Parse the comma-separated KDD Cup 99 file (optionally gzipped)."""
    width = len(KDD_COLUMNS) + 1
    with open(path, "rb") as fh:
        gz = fh.read(2) == b"\x1f\x8b"
    try:
        df = pd.read_csv(path, header=None, names=range(width), dtype=str,
                         compression="gzip" if gz else None, skip_blank_lines=True)
    except pd.errors.ParserError as exc:
        raise FormatError(f"{path}: {exc}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: no records") from None
    short = df.isna().any(axis=1).to_numpy()
    if short.any():
        r = int(np.flatnonzero(short)[0]) + 1
        got = int(df.iloc[r - 1].notna().sum())
        raise FormatError(f"row {r}: {got} fields, expected {width}")
    cont = df[[KDD_COLUMNS.index(c) for c in KDD_CONTINUOUS]]
    try:
        continuous = cont.to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"non-numeric value in a continuous column: {exc}") from None
    categorical = df[[KDD_COLUMNS.index(c) for c in KDD_CATEGORICAL]].to_numpy(dtype=str)
    return RawKdd(continuous, categorical, df[width - 1].to_numpy(dtype=str))


def encode_kdd(raw: RawKdd, fit_rows: np.ndarray | None = None,
               expected_dims: int | None = KDD_FEATURES) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """One-hot the categorical fields and min-max the continuous ones.

    Vocabularies always come from every row so the width is fixed; the
    min/max statistics come from ``fit_rows`` (default: all rows). Columns
    follow the original field order, each categorical field expanding in
    place into its sorted vocabulary. Returns ``(features, prep)``.
    """
    n = len(raw.labels)
    vocab = {name: sorted(set(raw.categorical[:, j].tolist()))
             for j, name in enumerate(KDD_CATEGORICAL)}
    fit = slice(None) if fit_rows is None else fit_rows
    lo = raw.continuous[fit].min(axis=0)
    hi = raw.continuous[fit].max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (raw.continuous - lo) / np.where(span > 0, span, 1.0), 0.0)
    if fit_rows is not None:
        scaled = np.clip(scaled, 0.0, 1.0)

    blocks, layout = [], []
    for name in KDD_COLUMNS:
        if name in KDD_CATEGORICAL:
            j = KDD_CATEGORICAL.index(name)
            words = vocab[name]
            codes = np.searchsorted(words, raw.categorical[:, j])
            onehot = np.zeros((n, len(words)), dtype=np.float32)
            onehot[np.arange(n), codes] = 1.0
            blocks.append(onehot)
            layout.append([name, len(words)])
        else:
            blocks.append(scaled[:, [KDD_CONTINUOUS.index(name)]].astype(np.float32))
            layout.append([name, 1])
    features = np.concatenate(blocks, axis=1)
    if expected_dims is not None and features.shape[1] != expected_dims:
        raise DataError(f"encoding produced {features.shape[1]} features, expected {expected_dims}; "
                        f"categorical vocab sizes {[len(v) for v in vocab.values()]}")
    prep = {
        "min": lo,
        "max": hi,
        "vocab": json_entry(vocab),
        "layout": json_entry(layout),
    }
    return features, prep


def kdd_blocks(prep: dict[str, np.ndarray]) -> dict[str, slice]:
    """Column slice of each field inside the encoded matrix."""
    out, start = {}, 0
    for name, width in from_json_entry(prep["layout"]):
        out[name] = slice(start, start + width)
        start += width
    return out


def make_kdd_split(features: np.ndarray, labels: np.ndarray, seed: int,
                   prep: dict | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Random half trains (attacks only), the other half tests untouched.

    Rows labelled ``normal.`` are the anomaly class in this protocol.
    """
    n = len(labels)
    anomaly = np.asarray(labels) == KDD_NORMAL_LABEL
    rng = np.random.default_rng([seed, 99])
    order = rng.permutation(n)
    half = n // 2
    cand = np.sort(order[:half])
    train_idx = cand[~anomaly[cand]]
    test_idx = np.sort(order[half:])
    prov = {"dataset": "kdd", "seed": seed, "anomaly_rule": f"label == {KDD_NORMAL_LABEL!r}",
            "categorical_fields": list(KDD_CATEGORICAL),
            "removed_from_train": int(anomaly[cand].sum())}
    prep = prep or {}
    train = LabeledDataset(features[train_idx], anomaly[train_idx], train_idx, prep, "train", dict(prov))
    test = LabeledDataset(features[test_idx], anomaly[test_idx], test_idx, prep, "test", dict(prov))
    return train, test


# ------------------------------------------------------------------ batching

def batches(dataset, batch_size: int, seed: int | None = None,
            drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(ids, features)`` batches.

    ``seed=None`` keeps input order (scoring); otherwise rows are shuffled
    with that seed (training). ``drop_last`` discards a trailing short batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise DataError("cannot batch an empty dataset")
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.ids[idx], dataset.features[idx]


def n_batches(n: int, batch_size: int, drop_last: bool = False) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


# --------------------------------------------------------------------- cache

def save_dataset_cache(path, train: LabeledDataset, test: LabeledDataset) -> bytes:
    dataset = train.provenance.get("dataset", "unknown")
    entries: dict[str, np.ndarray] = {}
    for ds in (train, test):
        feats = ds.features
        if dataset == "mnist":
            # store bytes; rescaled on load
            feats = np.rint((feats + 1.0) * 127.5).astype(np.uint8)
        entries[f"{ds.split}/features"] = feats
        entries[f"{ds.split}/anomaly"] = ds.anomaly
        entries[f"{ds.split}/ids"] = ds.ids
    for k, v in train.prep.items():
        entries[f"prep/{k}"] = v
    entries["meta/provenance"] = json_entry(train.provenance)
    return write_container(path, f"dataset:{dataset}", entries)


def load_dataset_cache(path) -> tuple[LabeledDataset, LabeledDataset]:
    kind, entries = read_container(path)
    if not kind.startswith("dataset:"):
        raise FormatError(f"{path} holds {kind!r}, not a prepared dataset")
    dataset = kind.split(":", 1)[1]
    prep = {k[5:]: v for k, v in entries.items() if k.startswith("prep/")}
    prov = from_json_entry(entries["meta/provenance"])
    out = []
    for split in ("train", "test"):
        feats = entries[f"{split}/features"]
        if dataset == "mnist":
            feats = scale_pixels(feats)
        out.append(LabeledDataset(feats, entries[f"{split}/anomaly"], entries[f"{split}/ids"],
                                  prep, split, dict(prov)))
    return out[0], out[1]
