"""Small KDD-format and IDX files for tests that cannot rely on the real corpora."""

import struct

import numpy as np

from egad.data import KDD_CATEGORICAL, KDD_COLUMNS

PROTOCOLS = ("icmp", "tcp", "udp")
SERVICES = tuple(f"svc{i:02d}" for i in range(66))
FLAGS = ("OTH", "REJ", "RSTO", "RSTOS0", "RSTR", "S0", "S1", "S2", "S3", "SF", "SH")
VOCAB = {
    "protocol_type": PROTOCOLS,
    "service": SERVICES,
    "flag": FLAGS,
    "land": ("0", "1"),
    "logged_in": ("0", "1"),
    "is_host_login": ("0",),
    "is_guest_login": ("0", "1"),
}


def kdd_rows(n=300, normal_frac=0.2, seed=0):
    """Rows shaped like the 10-percent file; every vocabulary entry appears.

    Normal rows draw their continuous fields from a shifted distribution so a
    trained detector has something to find.
    """
    rng = np.random.default_rng(seed)
    normal = rng.random(n) < normal_frac
    rows = []
    for i in range(n):
        fields = []
        for name in KDD_COLUMNS:
            if name in KDD_CATEGORICAL:
                words = VOCAB[name]
                fields.append(words[(i * 7 + len(name)) % len(words)] if i >= len(words) else words[i])
            else:
                loc = 3.0 if normal[i] else 0.0
                fields.append(f"{abs(rng.normal(loc, 1.0)):.4f}")
        fields.append("normal." if normal[i] else ("smurf." if i % 2 else "neptune."))
        rows.append(",".join(fields))
    return rows


def write_kdd(path, n=300, normal_frac=0.2, seed=0):
    path.write_text("\n".join(kdd_rows(n, normal_frac, seed)) + "\n")
    return path


def idx_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = 0x0800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def write_mnist(root, n_train=120, n_test=40, seed=0):
    """Tiny IDX set: each digit's images carry a distinct bright stripe."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for stem, n in (("train", n_train), ("t10k", n_test)):
        labels = np.arange(n) % 10
        images = rng.integers(0, 40, size=(n, 28, 28))
        for k, d in enumerate(labels):
            images[k, 2 + 2 * d:4 + 2 * d, :] = 255
        (root / f"{stem}-images-idx3-ubyte").write_bytes(idx_bytes(images))
        (root / f"{stem}-labels-idx1-ubyte").write_bytes(idx_bytes(labels))
    return root
