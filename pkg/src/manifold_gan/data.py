"""Datasets: IDX files, synthetic 2-d manifolds, splits and batch iterators."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from sklearn.datasets import make_moons

from .errors import ContractViolation, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


# -- IDX -------------------------------------------------------------------------

def idx_load(path) -> np.ndarray:
    """Read an unsigned-byte IDX file.

    Rank-3 image files (magic 0x00000803) come back as float64 in [-1, 1]
    via ``v / 127.5 - 1``; rank-1 label files (0x00000801) as int64.
    """
    raw = Path(path).read_bytes()
    return idx_parse(raw, source=str(path))


def idx_parse(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{source}: {len(raw)} bytes is too short for an IDX magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"{source}: bad IDX magic 0x{magic:08X}, expected "
                          f"0x{IDX_IMAGES:08X} (images) or 0x{IDX_LABELS:08X} (labels)")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise FormatError(f"{source}: header needs {header} bytes, found {len(raw)}")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{source}: payload size mismatch, expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    if magic == IDX_LABELS:
        return data.astype(np.int64)
    return data.astype(np.float64) / 127.5 - 1.0


def idx_write(path, array, kind: str | None = None) -> None:
    """Write u8 data as IDX.  ``array`` must already hold raw byte values."""
    Path(path).write_bytes(idx_dump(array, kind))


def idx_dump(array, kind: str | None = None) -> bytes:
    arr = np.asarray(array)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ContractViolation("IDX payload values must fit in an unsigned byte")
    if kind is None:
        kind = "labels" if arr.ndim == 1 else "images"
    magic = {"labels": IDX_LABELS, "images": IDX_IMAGES}[kind]
    if arr.ndim != (magic & 0xFF):
        raise ContractViolation(f"{kind} IDX files are rank {magic & 0xFF}, got rank {arr.ndim}")
    head = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(np.uint8).tobytes()


def pixels_to_bytes(images) -> np.ndarray:
    """Inverse of the IDX pixel map, rounding to the nearest byte."""
    return np.clip(np.round((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# -- synthetic manifolds -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticManifoldSpec:
    kind: str = "two-moons"
    n_samples: int = 1000
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in ("circle", "two-moons", "swiss-roll-2d"):
            raise ContractViolation(f"unknown synthetic manifold {self.kind!r}")
        if self.noise < 0:
            raise ContractViolation("noise must be non-negative")


def _rescale(x: np.ndarray) -> np.ndarray:
    top = np.abs(x).max(initial=0.0)
    return x / top if top > 1.0 else x


def synth_sample(spec: SyntheticManifoldSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Points on a noisy 2-d manifold with binary labels, scaled into [-1, 1]."""
    rng = np.random.default_rng(seed)
    n = spec.n_samples
    n1 = n // 2
    labels = np.r_[np.zeros(n - n1, dtype=np.int64), np.ones(n1, dtype=np.int64)]
    if spec.kind == "circle":
        # class 1 on the half with cos(theta) >= 0
        theta = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
        theta = np.where(labels == 1, theta, theta + np.pi)
        x = np.c_[np.cos(theta), np.sin(theta)]
    elif spec.kind == "swiss-roll-2d":
        t = np.where(labels == 0, rng.uniform(1.5 * np.pi, 3.0 * np.pi, size=n),
                     rng.uniform(3.0 * np.pi, 4.5 * np.pi, size=n))
        x = np.c_[t * np.cos(t), t * np.sin(t)] / (4.5 * np.pi)
    else:
        x, labels = make_moons(n_samples=n, noise=None, shuffle=False, random_state=seed)
        x = (x - np.array([0.5, 0.25])) / 1.5
        labels = labels.astype(np.int64)
    if spec.noise > 0:
        x = x + rng.normal(0.0, spec.noise, size=x.shape)
    order = rng.permutation(n)
    return _rescale(x[order]), labels[order]


# -- splits ---------------------------------------------------------------------------

@dataclass
class SplitDataset:
    """Labeled / unlabeled / validation / test parts of one dataset.

    ``*_idx`` arrays index the training array handed to :func:`make_split`.
    The unlabeled pool is every training example outside the validation
    part, so it contains the labeled examples too.
    """

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    x_validation: np.ndarray
    y_validation: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int = 0
    source: str = ""
    labeled_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unlabeled_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    validation_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return int(max(self.y_labeled.max(initial=0), self.y_test.max(initial=0),
                       self.y_validation.max(initial=0))) + 1

    def merged(self) -> "SplitDataset":
        """Validation folded back into the unlabeled pool, for the final retraining."""
        empty_x = self.x_validation[:0]
        return SplitDataset(
            self.x_labeled, self.y_labeled,
            np.concatenate([self.x_unlabeled, self.x_validation]),
            empty_x, self.y_validation[:0], self.x_test, self.y_test, self.seed, self.source,
            self.labeled_idx, np.sort(np.r_[self.unlabeled_idx, self.validation_idx]),
            self.validation_idx[:0])


def canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Permutation sorting examples by (label, values) so splits ignore input order."""
    flat = np.asarray(x).reshape(len(x), -1)
    keys = [flat[:, j] for j in reversed(range(flat.shape[1]))] + [np.asarray(y)]
    return np.lexsort(keys)


def make_split(x, y, n_labeled: int, n_validation: int, seed: int,
               x_test=None, y_test=None, num_classes: int | None = None,
               source: str = "") -> SplitDataset:
    """Deterministic balanced labeled subset plus a uniformly drawn validation part."""
    x, y = np.asarray(x), np.asarray(y, dtype=np.int64)
    k = num_classes or int(y.max()) + 1
    if n_labeled % k:
        raise ContractViolation(f"n_labeled={n_labeled} is not divisible by {k} classes")
    if n_validation < 0 or n_validation >= len(x):
        raise ContractViolation(f"cannot hold out {n_validation} of {len(x)} examples")
    rng = np.random.default_rng(seed)
    canon = canonical_order(x, y)
    shuffled = canon[rng.permutation(len(canon))]
    val_idx = np.sort(shuffled[:n_validation])
    pool = shuffled[n_validation:]
    per_class = n_labeled // k
    lab = []
    for c in range(k):
        members = pool[y[pool] == c]
        if len(members) < per_class:
            raise ContractViolation(f"class {c} has {len(members)} training examples, "
                                    f"{per_class} labeled ones requested")
        lab.append(members[:per_class])
    lab_idx = np.sort(np.concatenate(lab)) if lab else np.zeros(0, dtype=np.int64)
    unl_idx = np.sort(pool)
    if x_test is None:
        x_test, y_test = x[:0], y[:0]
    return SplitDataset(x[lab_idx], y[lab_idx], x[unl_idx], x[val_idx], y[val_idx],
                        np.asarray(x_test), np.asarray(y_test, dtype=np.int64), seed, source,
                        lab_idx, unl_idx, val_idx)


# -- batching ----------------------------------------------------------------------------

def batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Index batches for one epoch: a seeded permutation, short tail dropped."""
    if batch_size < 1:
        raise ContractViolation("batch size must be >= 1")
    if n < 1:
        raise ContractViolation("cannot batch an empty dataset part")
    order = np.random.default_rng([seed, epoch, 0]).permutation(n)
    for i in range(n // batch_size):
        yield order[i * batch_size:(i + 1) * batch_size]


def labeled_batches(n: int, batch_size: int, n_batches: int, seed: int,
                    epoch: int) -> list[np.ndarray]:
    """Labeled index batches matching ``n_batches`` unlabeled ones.

    When the labeled set cannot cover one epoch's demand without repeats,
    indices are drawn with replacement.
    """
    if n < 1:
        raise ContractViolation("cannot batch an empty dataset part")
    rng = np.random.default_rng([seed, epoch, 1])
    demand = n_batches * batch_size
    if n < demand:
        flat = rng.integers(0, n, size=demand)
    else:
        flat = rng.permutation(n)[:demand]
    return [flat[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]


def load_dataset(cfg) -> SplitDataset:
    """Build the split described by a :class:`~manifold_gan.config.RunConfig`."""
    from .errors import ConfigError

    d = cfg.dataset
    if d.kind == "idx":
        paths = {"dataset.train_images": d.train_images, "dataset.train_labels": d.train_labels,
                 "dataset.test_images": d.test_images, "dataset.test_labels": d.test_labels}
        for key, value in paths.items():
            if not value or not Path(value).exists():
                raise ConfigError(f"{key}: file {value!r} not found", field=key)
        x, y = idx_load(d.train_images), idx_load(d.train_labels)
        xt, yt = idx_load(d.test_images), idx_load(d.test_labels)
        x, xt = x[:, None], xt[:, None]
        source = f"idx:{Path(d.train_images).name}"
    else:
        seeds = np.random.SeedSequence(d.split_seed).generate_state(2)
        x, y = synth_sample(SyntheticManifoldSpec(d.kind, d.n_samples, d.noise), int(seeds[0]))
        xt, yt = synth_sample(SyntheticManifoldSpec(d.kind, max(d.n_test, 2), d.noise), int(seeds[1]))
        source = d.kind
    if cfg.model.profile == "mlp":
        x, xt = x.reshape(len(x), -1), xt.reshape(len(xt), -1)
    try:
        return make_split(x, y, d.n_labeled, d.n_validation, d.split_seed, xt, yt, source=source)
    except ContractViolation as exc:
        raise ConfigError(f"dataset.n_labeled: {exc}", field="dataset.n_labeled") from exc
