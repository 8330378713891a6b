"""Aerial vocabulary (k-means) and VLAD aggregation."""

from __future__ import annotations

import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import LocalFeatureSet

log = logging.getLogger(__name__)

VOCAB_MAGIC = b"FLVB"
DEFAULT_N_C = 32
DEFAULT_MAX_ITERS = 100


class DegenerateDescriptorWarning(UserWarning):
    """A zero descriptor took part in a similarity computation."""


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def fingerprint(centroids: np.ndarray) -> int:
    """64-bit digest of the centroid table as stored on disk."""
    c = np.ascontiguousarray(centroids, dtype="<f4")
    h = hashlib.blake2b(struct.pack("<II", *c.shape) + c.tobytes(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """k-means centroids; values are kept float32-representable so files round-trip."""

    centroids: np.ndarray
    build_seed: int = 0
    inertia_history: tuple[float, ...] = ()
    cluster_sizes: tuple[int, ...] = ()
    fingerprint: int = field(init=False)

    def __post_init__(self):
        c = _f32(self.centroids)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("vocabulary needs at least 2 centroids")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("centroids must be pairwise distinct")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "fingerprint", fingerprint(c))

    @property
    def n_c(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # Fewer distinct points than k; pick an unused point.
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.array(centers)


def kmeans(
    x: np.ndarray, k: int, seed: int = 0, max_iters: int = DEFAULT_MAX_ITERS
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd iterations from a k-means++ start.

    Returns (centroids, labels, inertia per iteration). Empty clusters are
    re-seeded at the points farthest from their current centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    d2 = _sq_dists(x, c)
    labels = np.argmin(d2, axis=1)
    history = [float(d2[np.arange(len(x)), labels].sum())]
    for _ in range(max_iters):
        own = d2[np.arange(len(x)), labels]
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        new_c = c.copy()
        filled = counts > 0
        new_c[filled] = sums[filled] / counts[filled, None]
        empty = np.nonzero(~filled)[0]
        if len(empty):
            far = np.argsort(-own, kind="stable")
            for e, idx in zip(empty, far):
                new_c[e] = x[idx]
        c = new_c
        d2 = _sq_dists(x, c)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if np.array_equal(new_labels, labels) and not len(empty):
            labels = new_labels
            break
        labels = new_labels
    return c, labels, history


def build_vocabulary(
    feature_sets: Sequence[LocalFeatureSet],
    n_c: int = DEFAULT_N_C,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> Vocabulary:
    """Pool all feature sets uniformly and cluster them into ``n_c`` centroids."""
    if not feature_sets:
        raise ValueError("no feature sets given")
    dims = {fs.dim for fs in feature_sets}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions: {sorted(dims)}")
    x = np.concatenate([np.asarray(fs.features, dtype=np.float64) for fs in feature_sets])
    if n_c < 2:
        raise ValueError("n_c must be at least 2")
    if len(x) < n_c:
        raise ValueError(f"insufficient features: {len(x)} < n_c={n_c}")
    if len(np.unique(x, axis=0)) < n_c:
        raise ValueError(f"insufficient distinct features for n_c={n_c}")
    c, labels, history = kmeans(x, n_c, seed, max_iters)
    log.info("k-means finished after %d iterations, inertia %.6g", len(history) - 1, history[-1])
    sizes = tuple(int(s) for s in np.bincount(labels, minlength=n_c))
    return Vocabulary(c, seed, tuple(history), sizes)


@dataclass(frozen=True, eq=False)
class VladDescriptor:
    values: np.ndarray
    n_c: int
    d: int
    vocab_fingerprint: int | None = None
    degenerate: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.n_c * self.d:
            raise ValueError("descriptor length does not match n_c * d")
        if not np.all(np.isfinite(v)):
            raise ValueError("descriptor entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __neg__(self) -> VladDescriptor:
        return VladDescriptor(-self.values, self.n_c, self.d, self.vocab_fingerprint, self.degenerate)


def assign(x: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Nearest centroid per row (lowest index on exact ties)."""
    return np.argmin(_sq_dists(x, vocab.centroids), axis=1)


def encode(features: LocalFeatureSet, vocab: Vocabulary) -> VladDescriptor:
    """Hard-assignment VLAD with intra- then global L2 normalisation."""
    x = np.asarray(features.features, dtype=np.float64)
    if x.shape[1] != vocab.d:
        raise ValueError(f"feature dimension {x.shape[1]} does not match vocabulary d={vocab.d}")
    # Canonical row order makes the floating-point sums independent of input order.
    x = x[np.lexsort(x.T[::-1])]
    labels = assign(x, vocab)
    v = np.zeros((vocab.n_c, vocab.d))
    np.add.at(v, labels, x - vocab.centroids[labels])
    norms = np.linalg.norm(v, axis=1)
    nz = norms > 0
    v[nz] /= norms[nz, None]
    flat = v.reshape(-1)
    total = np.linalg.norm(flat)
    if total == 0:
        return VladDescriptor(flat, vocab.n_c, vocab.d, vocab.fingerprint, degenerate=True)
    return VladDescriptor(flat / total, vocab.n_c, vocab.d, vocab.fingerprint)


def similarity(a: VladDescriptor, b: VladDescriptor) -> float:
    """Cosine similarity of unit descriptors; 0 (with a warning) if either is degenerate."""
    if (a.n_c, a.d) != (b.n_c, b.d):
        raise ValueError(f"descriptor shapes differ: {(a.n_c, a.d)} vs {(b.n_c, b.d)}")
    if a.degenerate or b.degenerate:
        warnings.warn("similarity with a degenerate descriptor", DegenerateDescriptorWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a.values @ b.values, -1.0, 1.0))


def save_vocabulary(path, vocab: Vocabulary) -> None:
    c = np.ascontiguousarray(vocab.centroids, dtype="<f4")
    with Path(path).open("wb") as fh:
        fh.write(VOCAB_MAGIC + struct.pack("<IIQ", vocab.n_c, vocab.d, vocab.build_seed & (2**64 - 1)))
        fh.write(c.tobytes())


def load_vocabulary(path) -> Vocabulary:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:4] != VOCAB_MAGIC:
        raise ValueError(f"{path}: not a vocabulary file (expected FLVB magic)")
    n_c, d, seed = struct.unpack_from("<IIQ", raw, 4)
    body = raw[20:]
    if len(body) != 4 * n_c * d:
        raise ValueError(f"{path}: payload size does not match n_c={n_c}, d={d}")
    c = np.frombuffer(body, dtype="<f4").reshape(n_c, d)
    return Vocabulary(c, seed)
