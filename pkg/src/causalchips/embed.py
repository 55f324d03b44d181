"""Randomised-convolution embeddings of images and image sequences.

Each image is standardised per band, correlated (valid padding, stride 1)
with ``D`` fixed Gaussian kernels, rectified and mean-pooled, giving one
non-negative feature per kernel.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ChannelMismatch,
    EmptyInput,
    HeterogeneousDims,
    ImageTooSmall,
    KeyNotFound,
    SequenceTooShort,
)
from .recordstore import RecordReader

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbeddingConfig:
    n_embed_dim: int = 100
    kernel_size: int = 3
    temporal_kernel_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_embed_dim < 1:
            raise ValueError("n_embed_dim must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.temporal_kernel_size < 1:
            raise ValueError("temporal_kernel_size must be >= 1")


@dataclass(frozen=True)
class KernelBank:
    """``kernels`` has shape (D, k, k, C) or (D, t, k, k, C); biases are zero."""

    kernels: np.ndarray
    biases: np.ndarray

    @property
    def n_kernels(self):
        return self.kernels.shape[0]

    @property
    def channels(self):
        return self.kernels.shape[-1]

    @property
    def kernel_size(self):
        return self.kernels.shape[-2]

    @property
    def temporal(self):
        return self.kernels.ndim == 5

    def collapse_time(self):
        """Spatial bank obtained by summing each kernel over its time axis."""
        if not self.temporal:
            raise ValueError("bank has no time axis")
        return KernelBank(self.kernels.sum(axis=1), self.biases)


def make_kernels(config: EmbeddingConfig, channels: int, temporal: bool = False) -> KernelBank:
    """Draw the kernel bank from ``config.seed``.

    Draw order is kernel-major, then the kernel's own axes in row-major
    order, so (config, channels, temporal) fixes every entry.
    """
    if channels < 1:
        raise ValueError("channels must be >= 1")
    k = config.kernel_size
    shape = (config.temporal_kernel_size, k, k, channels) if temporal else (k, k, channels)
    rng = np.random.default_rng(config.seed)
    kernels = rng.standard_normal((config.n_embed_dim,) + shape)
    kernels.setflags(write=False)
    biases = np.zeros(config.n_embed_dim)
    biases.setflags(write=False)
    return KernelBank(kernels, biases)


def standardize_bands(x):
    """Per-band z-scoring over every non-channel axis; flat bands are only centred."""
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(range(x.ndim - 1))
    x = x - x.mean(axis=axes)
    sd = x.std(axis=axes)
    sd[sd == 0] = 1.0
    return x / sd


def _features(patches, bank):
    # patches: (positions, taps) in the kernel's own axis order
    w = bank.kernels.reshape(bank.n_kernels, -1)
    resp = patches @ w.T + bank.biases
    np.maximum(resp, 0.0, out=resp)
    return resp.mean(axis=0)


def embed_image(img, bank: KernelBank, standardize: bool = True) -> np.ndarray:
    """Embed an (H, W, C) image into ``bank.n_kernels`` features."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {img.shape}")
    if bank.temporal:
        raise ValueError("temporal bank given for a single image")
    h, w, c = img.shape
    k = bank.kernel_size
    if c != bank.channels:
        raise ChannelMismatch(f"image has {c} channels, kernels expect {bank.channels}")
    if h < k or w < k:
        raise ImageTooSmall(f"{h}x{w} image is smaller than the {k}x{k} kernel")
    x = standardize_bands(img) if standardize else np.asarray(img, dtype=np.float64)
    win = sliding_window_view(x, (k, k), axis=(0, 1))  # (H', W', C, k, k)
    patches = win.transpose(0, 1, 3, 4, 2).reshape(-1, k * k * c)
    return _features(patches, bank)


def embed_sequence(seq, bank: KernelBank, standardize: bool = True) -> np.ndarray:
    """Embed a (T, H, W, C) sequence with a spatio-temporal bank."""
    seq = np.asarray(seq)
    if seq.ndim != 4:
        raise ValueError(f"sequence must be (T, H, W, C), got shape {seq.shape}")
    if not bank.temporal:
        raise ValueError("spatial bank given for an image sequence")
    t_len, h, w, c = seq.shape
    _, t, k, _, _ = bank.kernels.shape
    if c != bank.channels:
        raise ChannelMismatch(f"sequence has {c} channels, kernels expect {bank.channels}")
    if t_len < t:
        raise SequenceTooShort(f"{t_len} frames, temporal kernel needs {t}")
    if h < k or w < k:
        raise ImageTooSmall(f"{h}x{w} frames are smaller than the {k}x{k} kernel")
    x = standardize_bands(seq) if standardize else np.asarray(seq, dtype=np.float64)
    win = sliding_window_view(x, (t, k, k), axis=(0, 1, 2))  # (T', H', W', C, t, k, k)
    patches = win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(-1, t * k * k * c)
    return _features(patches, bank)


def embed_one(tensor, bank: KernelBank, standardize: bool = True) -> np.ndarray:
    if bank.temporal:
        return embed_sequence(tensor, bank, standardize)
    return embed_image(tensor, bank, standardize)


# -- image sources -----------------------------------------------------------

class MemorySource:
    """In-memory ImageSource: ``source(keys)`` -> one tensor per key."""

    def __init__(self, keys: Sequence[str], images):
        self._pos = {}
        for i, k in enumerate(keys):
            self._pos.setdefault(k, i)
        self._images = list(images)
        if len(keys) != len(self._images):
            raise ValueError("keys and images differ in length")

    def __contains__(self, key):
        return key in self._pos

    def __call__(self, keys):
        missing = [k for k in keys if k not in self._pos]
        if missing:
            raise KeyNotFound(missing[0])
        return [self._images[self._pos[k]] for k in keys]


ImageSource = Union[Callable[[List[str]], Sequence[np.ndarray]], MemorySource, RecordReader]


def open_source(source):
    """Accept a record-file path or any callable source."""
    if isinstance(source, (str, os.PathLike)):
        return RecordReader(source)
    return source


@dataclass
class EmbeddingMatrix:
    keys: List[str]
    values: np.ndarray
    bank: KernelBank = None

    def __post_init__(self):
        if len(self.keys) != self.values.shape[0]:
            raise ValueError("one row per key required")

    def rows(self, keys):
        pos = {k: i for i, k in enumerate(self.keys)}
        try:
            return self.values[[pos[k] for k in keys]]
        except KeyError as exc:
            raise KeyNotFound(exc.args[0]) from None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key"] + [f"f{j + 1}" for j in range(self.values.shape[1])])
            for key, row in zip(self.keys, self.values):
                writer.writerow([key] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        keys = [r[0] for r in rows[1:]]
        values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
        return cls(keys, values.reshape(len(keys), len(rows[0]) - 1))


def embed_corpus(
    source,
    keys: Sequence[str],
    config: EmbeddingConfig,
    batch_size: int = 32,
    threads: int = None,
    bank: KernelBank = None,
):
    """Embed every key once and return rows in request order.

    Output is bit-identical for any ``batch_size`` and ``threads``: each
    image goes through the same fixed-shape computation on its own.
    The kernel bank used is attached as ``.bank``.
    """
    keys = list(keys)
    if not keys:
        raise EmptyInput("no keys to embed")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    source = open_source(source)
    unique = list(dict.fromkeys(keys))
    batches = [unique[i:i + batch_size] for i in range(0, len(unique), batch_size)]

    first = np.asarray(source(batches[0][:1])[0])
    dims = first.shape
    if len(dims) not in (3, 4):
        raise ValueError(f"images must be (H, W, C) or (T, H, W, C), got {dims}")
    if bank is None:
        bank = make_kernels(config, dims[-1], temporal=len(dims) == 4)
    out = np.empty((len(unique), bank.n_kernels), dtype=np.float64)

    def work(b):
        start = b * batch_size
        for j, tensor in enumerate(source(batches[b])):
            tensor = np.asarray(tensor)
            if tensor.shape != dims:
                raise HeterogeneousDims(f"expected dims {dims}, got {tensor.shape}")
            out[start + j] = embed_one(tensor, bank)

    workers = threads or os.cpu_count() or 1
    if workers == 1:
        for b in range(len(batches)):
            work(b)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(work, range(len(batches))))
    pos = {k: i for i, k in enumerate(unique)}
    values = out[[pos[k] for k in keys]]
    log.debug("embedded %d unique images into %d features", len(unique), bank.n_kernels)
    return EmbeddingMatrix(keys, values, bank)
