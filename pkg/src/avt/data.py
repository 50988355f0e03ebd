"""Dataset ingestion: IDX and CIFAR-10 binary files, synthetic blobs, batching."""

import gzip
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

IDX_UBYTE = 0x08
IDX_FLOAT64 = 0x0E
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    pass


class DataConsistencyError(ValueError):
    pass


@dataclass
class Dataset:
    """Inputs ``x`` of shape [N, *sample_shape] in [0, 1] and int labels ``y``."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        self.x = np.array(self.x, dtype=np.float64)
        self.y = np.array(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise DataConsistencyError(
                f"{self.x.shape[0]} inputs but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise DataConsistencyError(f"labels outside 0..{self.n_classes - 1}")
        self.x.flags.writeable = False
        self.y.flags.writeable = False

    def __len__(self):
        return self.y.shape[0]

    def __iter__(self):
        return iter(zip(self.x, self.y))

    @property
    def sample_shape(self):
        return self.x.shape[1:]

    def subset(self, idx, name=None):
        return Dataset(self.x[idx], self.y[idx], self.n_classes, name or self.name)


@dataclass
class BlobSpec:
    centers: list
    noise_stddev: float
    samples_per_class: int
    seed: int = 0
    n_classes: int = field(default=None)
    input_dim: int = field(default=None)

    def __post_init__(self):
        self.centers = [list(map(float, c)) for c in self.centers]
        if self.n_classes is None:
            self.n_classes = len(self.centers)
        if self.input_dim is None:
            self.input_dim = len(self.centers[0]) if self.centers else 0
        if len(self.centers) != self.n_classes or self.n_classes < 1:
            raise ValueError("need exactly one center per class")
        if any(len(c) != self.input_dim for c in self.centers):
            raise ValueError(f"every center must have {self.input_dim} coordinates")
        if len({tuple(c) for c in self.centers}) != len(self.centers):
            raise ValueError("class centers must be distinct")
        if not self.noise_stddev > 0:
            raise ValueError("noise_stddev must be positive")
        if self.samples_per_class < 0:
            raise ValueError("samples_per_class must be >= 0")

    @classmethod
    def from_json(cls, doc):
        if isinstance(doc, (str, os.PathLike)):
            with open(doc) as fh:
                doc = json.load(fh)
        return cls(centers=doc["class_centers"], noise_stddev=doc["noise_stddev"],
                   samples_per_class=doc["samples_per_class"], seed=doc.get("seed", 0),
                   n_classes=doc.get("n_classes"), input_dim=doc.get("input_dim"))

    def to_json(self):
        return {"n_classes": self.n_classes, "input_dim": self.input_dim,
                "class_centers": self.centers, "noise_stddev": self.noise_stddev,
                "samples_per_class": self.samples_per_class, "seed": self.seed}


def synth_blobs(spec, name="blobs"):
    rng = np.random.default_rng(spec.seed)
    centers = np.asarray(spec.centers, dtype=np.float64).reshape(spec.n_classes, spec.input_dim)
    n = spec.samples_per_class
    noise = rng.normal(0.0, spec.noise_stddev, size=(spec.n_classes, n, spec.input_dim))
    x = np.clip(centers[:, None, :] + noise, 0.0, 1.0).reshape(-1, spec.input_dim)
    y = np.repeat(np.arange(spec.n_classes), n)
    return Dataset(x, y, spec.n_classes, name)


# -- IDX ------------------------------------------------------------------

def _read_idx(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise OSError(f"{path}: truncated IDX header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype not in (IDX_UBYTE, IDX_FLOAT64) or ndim < 1:
        raise DataFormatError(f"{path}: bad IDX magic 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    itemsize = 1 if dtype == IDX_UBYTE else 8
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header + count * itemsize:
        raise OSError(f"{path}: truncated IDX payload ({len(raw) - header} of "
                      f"{count * itemsize} bytes)")
    np_type = np.uint8 if dtype == IDX_UBYTE else ">f8"
    arr = np.frombuffer(raw, dtype=np_type, count=count, offset=header).reshape(dims)
    return dtype, arr


def load_idx(images_path, labels_path, n_classes=None, name=None):
    """Read an IDX image/label pair.

    Unsigned-byte images are scaled by 1/255.  Float64 images (type 0x0E,
    as written by :func:`save_idx`) are taken as-is and must lie in [0, 1].
    Images with two dims are flat vectors; three dims become [1, H, W].
    """
    idtype, images = _read_idx(images_path)
    ldtype, labels = _read_idx(labels_path)
    if images.ndim < 2:
        raise DataFormatError(f"{images_path}: expected an image file, found a "
                              f"{images.ndim}-dimensional IDX array")
    if ldtype != IDX_UBYTE or labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: labels must be a 1-D unsigned byte IDX array")
    if images.shape[0] != labels.shape[0]:
        raise DataConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    if idtype == IDX_UBYTE:
        x = images.astype(np.float64) / 255.0
    else:
        x = images.astype(np.float64)
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataFormatError(f"{images_path}: float pixels outside [0, 1]")
    if x.ndim == 3:
        x = x[:, None, :, :]
    y = labels.astype(np.int64)
    if n_classes is None:
        n_classes = max(int(y.max()) + 1, 2) if y.size else 2
    return Dataset(x, y, n_classes, name or os.path.basename(str(images_path)))


def save_idx(dataset, images_path, labels_path, dtype="float64"):
    """Write ``dataset`` as an IDX pair (float64 pixels unless dtype='ubyte')."""
    x = dataset.x
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if dtype == "ubyte":
        code, payload = IDX_UBYTE, np.rint(x * 255.0).astype(np.uint8).tobytes()
    else:
        code, payload = IDX_FLOAT64, x.astype(">f8").tobytes()
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, x.ndim))
        fh.write(struct.pack(f">{x.ndim}I", *x.shape))
        fh.write(payload)
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">HBBI", 0, IDX_UBYTE, 1, len(dataset)))
        fh.write(dataset.y.astype(np.uint8).tobytes())


# -- CIFAR-10 -------------------------------------------------------------

CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = ("test_batch.bin",)


def _cifar_records(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{path}: label byte {labels.max()} > 9")
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return x, labels


def load_cifar10(directory, split="train", files=None):
    """Load CIFAR-10 binary batches from ``directory``.

    ``files`` overrides the standard batch names; otherwise every standard
    file of the split that exists is read, falling back to all ``*.bin``.
    """
    if files is None:
        names = CIFAR10_TRAIN if split == "train" else CIFAR10_TEST
        files = [n for n in names if os.path.exists(os.path.join(directory, n))]
        if not files:
            files = sorted(n for n in os.listdir(directory) if n.endswith(".bin"))
    xs, ys = [np.zeros((0, 3, 32, 32))], [np.zeros(0, dtype=np.int64)]
    for n in files:
        x, y = _cifar_records(os.path.join(directory, n))
        xs.append(x)
        ys.append(y)
    return Dataset(np.concatenate(xs), np.concatenate(ys), 10, f"cifar10-{split}")


def load_fashion_mnist(directory, split="train"):
    prefix = "train" if split == "train" else "t10k"
    for suffix in ("", ".gz"):
        img = os.path.join(directory, f"{prefix}-images-idx3-ubyte{suffix}")
        lab = os.path.join(directory, f"{prefix}-labels-idx1-ubyte{suffix}")
        if os.path.exists(img) and os.path.exists(lab):
            break
    else:
        raise FileNotFoundError(f"no Fashion-MNIST {split} files in {directory}")
    if img.endswith(".gz"):
        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for src in (img, lab):
                dst = os.path.join(tmp, os.path.basename(src)[:-3])
                with gzip.open(src, "rb") as fi, open(dst, "wb") as fo:
                    fo.write(fi.read())
                paths.append(dst)
            return load_idx(*paths, n_classes=10, name=f"fashion-mnist-{split}")
    return load_idx(img, lab, n_classes=10, name=f"fashion-mnist-{split}")


# -- batching -------------------------------------------------------------

def epoch_permutation(n, seed, epoch_index):
    return np.random.default_rng([seed, epoch_index]).permutation(n)


def batches(dataset, batch_size, seed, epoch_index):
    """Shuffled (x, y) mini-batches for one epoch; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(dataset), seed, epoch_index)
    return [(dataset.x[idx], dataset.y[idx])
            for idx in (order[i:i + batch_size] for i in range(0, len(order), batch_size))]
