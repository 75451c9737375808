"""Episodic task sampling: synthetic task families and the FSDT file format.

Families are immutable once built; episode sampling is a pure function of
(family, seed, index) thanks to a counter-based Philox generator, so it can
be parallelized and replayed in any order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DatasetFormatError",
    "Example",
    "Episode",
    "TaskFamily",
    "philox",
    "generate_family",
    "sample_episode",
    "materialize",
    "save_dataset",
    "load_dataset",
]

FSDT_MAGIC = b"FSDT"
FSDT_VERSION = 1

# Stream tags keep family construction, embedding init and episode draws
# on disjoint Philox keys.
_FAMILY_STREAM = 0x66616D69  # "fami"
_MATERIALIZE_STREAM = 0x6D617431


class DatasetFormatError(ValueError):
    """Raised for malformed, truncated or corrupt FSDT payloads."""


def philox(key: int, counter: int = 0) -> np.random.Generator:
    """Counter-based RNG: identical (key, counter) pairs give identical streams."""
    return np.random.Generator(np.random.Philox(key=np.array([key & (2**64 - 1), counter & (2**64 - 1)], dtype=np.uint64)))


@dataclass(frozen=True)
class Example:
    """One raw input vector with its dataset-global class label."""

    x: np.ndarray
    label: int


@dataclass(frozen=True)
class Episode:
    """One N-way n-shot task with episode-local labels in [0, ways)."""

    ways: int
    shots: int
    support_x: np.ndarray  # [ways*shots, dim], class-major order
    support_y: np.ndarray  # [ways*shots] episode-local labels
    query_x: np.ndarray  # [n_query, dim]
    query_y: np.ndarray  # [n_query] episode-local labels (scoring only)
    classes: tuple  # episode-local -> family class id
    seed: tuple  # (seed, index) that produced this episode

    @property
    def n_support(self) -> int:
        return self.support_x.shape[0]

    @property
    def n_query(self) -> int:
        return self.query_x.shape[0]


@dataclass(frozen=True)
class TaskFamily:
    """A distribution of classification tasks with disjoint class splits.

    ``gaussian`` and ``ring`` families are generative (infinite samples per
    class); ``file`` families carry a finite example table loaded from or
    destined for an FSDT file.
    """

    kind: str  # gaussian | ring | file
    dim: int
    num_classes: int
    split: tuple  # (n_train, n_val, n_test) class counts
    seed: int
    dispersion: float = 1.0
    mean_scale: float = 1.0
    cells: int = 1  # input splits into this many equal blocks
    signal_dims: int | None = None  # per-cell directions carrying class means
    noise_scale: float = 1.0  # noise multiplier off the signal directions
    cell_jitter: float = 0.0  # per-cell deviation of the shared class code
    means: np.ndarray | None = None  # [num_classes, dim] for generative kinds
    noise_transform: np.ndarray | None = None  # [dim, dim] sample noise map
    data: np.ndarray | None = None  # [n_examples, dim] float32 for kind=file
    labels: np.ndarray | None = None  # [n_examples] uint32 for kind=file
    extra: dict = field(default_factory=dict)

    def classes_for(self, split: str) -> np.ndarray:
        n_train, n_val, n_test = self.split
        if split == "train":
            return np.arange(0, n_train)
        if split == "val":
            return np.arange(n_train, n_train + n_val)
        if split == "test":
            return np.arange(n_train + n_val, n_train + n_val + n_test)
        raise ValueError(f"unknown split {split!r}")

    def class_examples(self, c: int) -> np.ndarray:
        """Indices of stored examples with label c (file-backed only)."""
        if self.labels is None:
            raise ValueError("generative families have no stored examples")
        return np.flatnonzero(self.labels == c)


def generate_family(
    kind: str,
    classes: int,
    dim: int,
    split: tuple,
    seed: int,
    dispersion: float = 1.0,
    mean_scale: float = 1.0,
    cells: int = 1,
    signal_dims: int | None = None,
    noise_scale: float = 1.0,
    cell_jitter: float = 0.0,
) -> TaskFamily:
    """Build a synthetic task family with a deterministic class structure.

    gaussian: the input splits into ``cells`` equal blocks sharing one seeded
    orthonormal basis. Each class has one code of scale ``mean_scale`` in the
    first ``signal_dims`` directions of that basis; every block carries the
    shared code plus a per-block deviation of relative size ``cell_jitter``
    (blocks are noisy views of the same content, not independent codes).
    Within-class noise has scale ``dispersion`` along the signal directions
    and ``dispersion * noise_scale`` along the rest — with a large
    multiplier the class structure is buried under directions an embedding
    must learn to suppress. The defaults (one cell, full signal, unit
    multiplier) give a plain isotropic mixture.
    ring: class means equally spaced on a circle of radius ``mean_scale``
    inside a seeded random 2-plane; isotropic within-class noise.
    """
    n_train, n_val, n_test = (int(s) for s in split)
    if n_train + n_val + n_test != classes:
        raise ValueError(f"split {split} does not partition {classes} classes")
    if classes < 1 or dim < 1:
        raise ValueError("need at least one class and one input dimension")
    rng = philox(seed, _FAMILY_STREAM)
    noise_transform = None
    if kind == "gaussian":
        cells = int(cells)
        if cells < 1 or dim % cells != 0:
            raise ValueError(f"dim {dim} not divisible into {cells} cells")
        block_dim = dim // cells
        sdim = block_dim if signal_dims is None else int(signal_dims)
        if not 1 <= sdim <= block_dim:
            raise ValueError(f"signal_dims must be in [1, {block_dim}], got {sdim}")
        if cells == 1 and sdim == block_dim and noise_scale == 1.0:
            means = mean_scale * rng.standard_normal((classes, dim))
        else:
            basis, _ = np.linalg.qr(rng.standard_normal((block_dim, block_dim)))
            signal, rest = basis[:, :sdim], basis[:, sdim:]
            code = rng.standard_normal((classes, 1, sdim))
            jitter = rng.standard_normal((classes, cells, sdim))
            coeff = mean_scale * (code + cell_jitter * jitter)
            means = np.einsum("kcs,ds->kcd", coeff, signal).reshape(classes, dim)
            block = dispersion * (signal @ signal.T + noise_scale * (rest @ rest.T))
            noise_transform = np.kron(np.eye(cells), block)
    elif kind == "ring":
        basis, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
        angles = 2.0 * np.pi * (np.arange(classes) / classes + rng.uniform())
        circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        means = mean_scale * circle @ basis.T
    else:
        raise ValueError(f"unknown generative family kind {kind!r}")
    return TaskFamily(
        kind=kind,
        dim=dim,
        num_classes=classes,
        split=(n_train, n_val, n_test),
        seed=seed,
        dispersion=float(dispersion),
        mean_scale=float(mean_scale),
        cells=cells if kind == "gaussian" else 1,
        signal_dims=signal_dims,
        noise_scale=float(noise_scale),
        cell_jitter=float(cell_jitter),
        means=means,
        noise_transform=noise_transform,
    )


def _draw_class_samples(family: TaskFamily, c: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if family.kind == "file":
        idx = family.class_examples(c)
        if idx.size < count:
            raise ValueError(f"class {c} has {idx.size} examples, episode needs {count}")
        chosen = rng.choice(idx, size=count, replace=False)
        return family.data[chosen].astype(np.float64)
    noise = rng.standard_normal((count, family.dim))
    if family.noise_transform is not None:
        return family.means[c] + noise @ family.noise_transform.T
    return family.means[c] + family.dispersion * noise


def sample_episode(
    family: TaskFamily,
    ways: int,
    shots: int,
    queries_per_class: int,
    seed: int,
    split: str = "train",
    index: int = 0,
) -> Episode:
    """Sample one episode; pure in (family, seed, index)."""
    pool = family.classes_for(split)
    if pool.size < ways:
        raise ValueError(f"split {split!r} has {pool.size} classes, episode needs {ways}")
    rng = philox(seed, index)
    chosen = rng.choice(pool, size=ways, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for local, c in enumerate(chosen):
        samples = _draw_class_samples(family, int(c), shots + queries_per_class, rng)
        sup_x.append(samples[:shots])
        sup_y.append(np.full(shots, local, dtype=np.int64))
        qry_x.append(samples[shots:])
        qry_y.append(np.full(queries_per_class, local, dtype=np.int64))
    return Episode(
        ways=ways,
        shots=shots,
        support_x=np.concatenate(sup_x, axis=0),
        support_y=np.concatenate(sup_y, axis=0),
        query_x=np.concatenate(qry_x, axis=0) if queries_per_class else np.zeros((0, family.dim)),
        query_y=np.concatenate(qry_y, axis=0) if queries_per_class else np.zeros(0, dtype=np.int64),
        classes=tuple(int(c) for c in chosen),
        seed=(seed, index),
    )


def materialize(family: TaskFamily, per_class: int, seed: int) -> TaskFamily:
    """Freeze a generative family into a finite file-backed one.

    Data is stored as float32, matching the FSDT on-disk precision, so a
    save/load round trip is bit-exact.
    """
    if family.kind == "file":
        return family
    rng = philox(seed, _MATERIALIZE_STREAM)
    rows, labels = [], []
    for c in range(family.num_classes):
        rows.append(_draw_class_samples(family, c, per_class, rng))
        labels.append(np.full(per_class, c, dtype=np.uint32))
    return TaskFamily(
        kind="file",
        dim=family.dim,
        num_classes=family.num_classes,
        split=family.split,
        seed=seed,
        data=np.concatenate(rows, axis=0).astype(np.float32),
        labels=np.concatenate(labels, axis=0),
    )


def _u32(x: int) -> bytes:
    return int(x).to_bytes(4, "little")


def save_dataset(family: TaskFamily, path) -> None:
    """Write a file-backed family in the FSDT format (see README)."""
    if family.kind != "file" or family.data is None:
        raise ValueError("only file-backed (materialized) families can be saved")
    n, dim = family.data.shape
    header = FSDT_MAGIC + bytes([FSDT_VERSION])
    header += _u32(n) + _u32(dim) + _u32(family.num_classes)
    header += b"".join(_u32(s) for s in family.split)
    body = family.data.astype("<f4").tobytes() + family.labels.astype("<u4").tobytes()
    payload = header + body
    with open(path, "wb") as f:
        f.write(payload + _u32(zlib.crc32(payload)))


def load_dataset(path) -> TaskFamily:
    """Read an FSDT file back into a file-backed TaskFamily."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != FSDT_MAGIC:
        raise DatasetFormatError("bad magic: not an FSDT file")
    if len(blob) < 5:
        raise DatasetFormatError("truncated header")
    version = blob[4]
    if version != FSDT_VERSION:
        raise DatasetFormatError(f"unsupported FSDT version {version}")
    if len(blob) < 5 + 6 * 4 + 4:
        raise DatasetFormatError("truncated header")
    fields = np.frombuffer(blob[5 : 5 + 24], dtype="<u4")
    n, dim, classes, n_train, n_val, n_test = (int(x) for x in fields)
    if n_train + n_val + n_test != classes:
        raise DatasetFormatError("split counts do not partition the class set")
    body_off = 5 + 24
    body_len = n * dim * 4 + n * 4
    if len(blob) != body_off + body_len + 4:
        raise DatasetFormatError("truncated or oversized payload")
    stored_crc = int.from_bytes(blob[-4:], "little")
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise DatasetFormatError("checksum mismatch")
    data = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=body_off).reshape(n, dim).copy()
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=body_off + n * dim * 4).copy()
    if labels.size and labels.max() >= classes:
        raise DatasetFormatError("label out of range")
    return TaskFamily(
        kind="file",
        dim=dim,
        num_classes=classes,
        split=(n_train, n_val, n_test),
        seed=0,
        data=data,
        labels=labels,
    )
