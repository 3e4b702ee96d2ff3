"""Codebooks and k-means training.

A codebook holds J entries of width K.  Entries are rounded to float32 on
construction so that the in-memory and on-disk forms (and their hashes) are
identical.  When ``l2_normalized_lookup`` is set, nearest-entry search
compares unit-normalized copies while dequantization returns the raw entry.
An optional ``projection`` (out_dim x K, orthonormal columns) makes the
codebook a low-dimensional lookup layer: queries are projected down by its
transpose before the search and entries are projected up on output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    IncompatibleCodebookError,
    InfeasibleError,
    InvalidInputError,
    ParseError,
    TruncatedError,
    VersionError,
)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

CODEBOOK_MAGIC = b"CBK1"
CODEBOOK_VERSION = 1

# rows per distance block; bounds memory at CHUNK x J floats
CHUNK = 4096


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def _as_f32(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    # C order keeps matrix products bit-identical between fitted and loaded copies
    return np.ascontiguousarray(arr.astype(np.float32).astype(np.float64))


@dataclass(frozen=True, eq=False)
class Codebook:
    entries: np.ndarray
    l2_normalized_lookup: bool = False
    id: str = ""
    projection: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        entries = _as_f32(self.entries)
        if entries.ndim != 2 or entries.shape[0] < 1 or entries.shape[1] < 1:
            raise InvalidInputError(f"codebook entries must be a non-empty J x K matrix, got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise InvalidInputError("codebook entries must be finite")
        if len(self.id.encode("utf-8")) > 255:
            raise InvalidInputError("codebook id longer than 255 bytes")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        if self.projection is not None:
            proj = _as_f32(self.projection)
            if proj.ndim != 2 or proj.shape[1] != entries.shape[1]:
                raise DimensionMismatchError(
                    f"projection shape {proj.shape} does not match entry width {entries.shape[1]}")
            proj.setflags(write=False)
            object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "_hash", fnv1a64(entries.astype("<f4").tobytes()))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        """Width of the lookup space."""
        return self.entries.shape[1]

    @property
    def input_dim(self) -> int:
        return self.dim if self.projection is None else self.projection.shape[0]

    @property
    def hash(self) -> int:
        return self._hash

    @property
    def bits(self) -> int:
        return symbol_width(self.size)

    def lookup_space(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise DimensionMismatchError(f"input has {x.shape[-1]} dims, codebook expects {self.input_dim}")
        return x if self.projection is None else x @ self.projection

    def output(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.size):
            raise InvalidInputError(f"index out of range for codebook of size {self.size}")
        out = self.entries[idx]
        return out if self.projection is None else out @ self.projection.T

    def with_projection(self, projection) -> Codebook:
        return Codebook(self.entries, self.l2_normalized_lookup, self.id, projection)


def symbol_width(n: int) -> int:
    """Bits of a fixed-width symbol for an alphabet of ``n``: ceil(log2 n)."""
    return max(int(n) - 1, 0).bit_length()


def unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, np.finfo(np.float64).tiny)


def nearest(x: np.ndarray, entries: np.ndarray, l2_normalized: bool = False):
    """Index of the nearest entry for each row of ``x``, ties to lowest index.

    Returns ``(indices, squared_distances)`` where the distances are measured
    in the search space (unit vectors when ``l2_normalized``).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != entries.shape[1]:
        raise DimensionMismatchError(f"input has {x.shape[1]} dims, entries have {entries.shape[1]}")
    zero_rows = None
    if l2_normalized:
        # a zero query has no direction; it goes to the entry nearest zero
        zero_rows = np.flatnonzero(~np.any(x, axis=1))
        raw_sq = np.einsum("ij,ij->i", entries, entries)
        x = unit_rows(x)
        entries = unit_rows(entries)
    sq = np.einsum("ij,ij->i", entries, entries)
    idx = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0], dtype=np.float64)
    for start in range(0, x.shape[0], CHUNK):
        blk = x[start:start + CHUNK]
        d = sq[None, :] - 2.0 * (blk @ entries.T)
        j = np.argmin(d, axis=1)
        idx[start:start + CHUNK] = j
        best = d[np.arange(blk.shape[0]), j] + np.einsum("ij,ij->i", blk, blk)
        dist[start:start + CHUNK] = np.maximum(best, 0.0)
    if zero_rows is not None and zero_rows.size:
        idx[zero_rows] = int(np.argmin(raw_sq))
        dist[zero_rows] = 1.0
    return idx, dist


def codebook_to_bytes(cb: Codebook) -> bytes:
    ident = cb.id.encode("utf-8")
    head = struct.pack("<4sBBII", CODEBOOK_MAGIC, CODEBOOK_VERSION,
                       1 if cb.l2_normalized_lookup else 0, cb.size, cb.dim)
    return (head + struct.pack("<B", len(ident)) + ident
            + cb.entries.astype("<f4").tobytes() + struct.pack("<Q", cb.hash))


def codebook_from_bytes(buf: bytes) -> Codebook:
    if buf[:4] != CODEBOOK_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {CODEBOOK_MAGIC!r}")
    if len(buf) < 15:
        raise TruncatedError("codebook header truncated")
    _, version, flags, n, k = struct.unpack_from("<4sBBII", buf)
    if version != CODEBOOK_VERSION:
        raise VersionError(f"unsupported codebook version {version}")
    if flags & ~1:
        raise ParseError(f"unknown codebook flags {flags:#x}")
    if n == 0 or k == 0:
        raise ParseError(f"codebook declares empty shape {n}x{k}")
    id_len = buf[14]
    pos = 15 + id_len
    need = pos + 4 * n * k + 8
    if len(buf) < need:
        raise TruncatedError(f"codebook needs {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise ParseError(f"{len(buf) - need} trailing bytes after codebook")
    try:
        ident = bytes(buf[15:pos]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"codebook id is not UTF-8: {exc}") from None
    entries = np.frombuffer(buf, dtype="<f4", count=n * k, offset=pos).reshape(n, k)
    if not np.all(np.isfinite(entries)):
        raise ParseError("codebook entries contain non-finite values")
    (stored,) = struct.unpack_from("<Q", buf, pos + 4 * n * k)
    cb = Codebook(entries, bool(flags & 1), ident)
    if cb.hash != stored:
        raise IncompatibleCodebookError(
            f"codebook {ident!r} hash {cb.hash:016x} does not match stored {stored:016x}")
    return cb


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class KMeansConfig:
    n_centroids: int
    max_iters: int = 50
    batch_size: int = 0
    seed: int = 0
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.n_centroids < 1:
            raise InvalidInputError("n_centroids must be >= 1")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be >= 1")
        if self.batch_size < 0:
            raise InvalidInputError("batch_size must be >= 0")
        if not self.tolerance >= 0:
            raise InvalidInputError("tolerance must be >= 0")


def _kmeans_pp(X, space, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    d2 = np.sum((space - space[first]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct directions left than centroids; caller checked feasibility
            pick = int(np.argmax(d2))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[i] = X[pick]
        d2 = np.minimum(d2, np.sum((space - space[pick]) ** 2, axis=1))
    return centers


def _sse(X, centers, labels):
    diff = X - centers[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _reseed_empty(X, centers, labels, counts):
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return centers
    diff = X - centers[labels]
    far = np.argsort(-np.einsum("ij,ij->i", diff, diff), kind="stable")
    for j, i in zip(empty, far):
        centers[j] = X[i]
    return centers


def fit_kmeans(frames, cfg: KMeansConfig, l2_normalized: bool = False, id: str = ""):
    """Fit a J-entry codebook with k-means++ seeding.

    Full-batch Lloyd when ``cfg.batch_size == 0``, otherwise mini-batch
    epochs with per-centroid 1/count learning rates.  Returns the codebook
    and the inertia (sum of squared raw-space errors of the lookup
    assignment) after seeding and after every iteration.
    """
    X = np.asarray(frames.data if hasattr(frames, "data") else frames, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInputError(f"frames must be an N x K matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("frames contain non-finite values")
    k = cfg.n_centroids
    space = unit_rows(X) if l2_normalized else X
    n_distinct = np.unique(space, axis=0).shape[0]
    if n_distinct < k:
        raise InfeasibleError(f"{n_distinct} distinct frames cannot support {k} centroids")

    rng = np.random.default_rng(cfg.seed)
    centers = _kmeans_pp(X, space, k, rng)
    labels, _ = nearest(X, centers, l2_normalized)
    history = [_sse(X, centers, labels)]

    counts = np.zeros(k)
    for _ in range(cfg.max_iters):
        if cfg.batch_size == 0:
            sums = np.zeros_like(centers)
            np.add.at(sums, labels, X)
            n_j = np.bincount(labels, minlength=k).astype(np.float64)
            filled = n_j > 0
            centers[filled] = sums[filled] / n_j[filled, None]
            centers = _reseed_empty(X, centers, labels, n_j)
        else:
            order = rng.permutation(X.shape[0])
            for start in range(0, X.shape[0], cfg.batch_size):
                batch = X[order[start:start + cfg.batch_size]]
                b_labels, _ = nearest(batch, centers, l2_normalized)
                sums = np.zeros_like(centers)
                np.add.at(sums, b_labels, batch)
                n_j = np.bincount(b_labels, minlength=k).astype(np.float64)
                hit = n_j > 0
                counts[hit] += n_j[hit]
                centers[hit] += (sums[hit] - n_j[hit, None] * centers[hit]) / counts[hit, None]
            centers = _reseed_empty(X, centers, labels, counts)
        labels, _ = nearest(X, centers, l2_normalized)
        history.append(_sse(X, centers, labels))
        prev, cur = history[-2], history[-1]
        if cur == 0 or (prev - cur) <= cfg.tolerance * prev and cur <= prev:
            break
    return Codebook(centers, l2_normalized, id), history


def fit_residual_stack(frames, n_layers: int, per_layer_cfg, l2_normalized: bool = False,
                       projections=None, lookup_dim: int | None = None, id_prefix: str = "rvq"):
    """Fit ``n_layers`` residual codebooks, each on the previous residuals.

    ``per_layer_cfg`` is a single :class:`KMeansConfig` (layer ``i`` then
    uses seed ``cfg.seed + i``) or a list with one config per layer.  With
    ``projections`` each layer searches in its own given projected space;
    with ``lookup_dim`` instead, each layer's projection is fitted as the
    top principal axes of the residuals it receives.
    """
    if n_layers < 1:
        raise InvalidInputError("n_layers must be >= 1")
    if isinstance(per_layer_cfg, KMeansConfig):
        cfgs = [KMeansConfig(per_layer_cfg.n_centroids, per_layer_cfg.max_iters,
                             per_layer_cfg.batch_size, per_layer_cfg.seed + i,
                             per_layer_cfg.tolerance) for i in range(n_layers)]
    else:
        cfgs = list(per_layer_cfg)
        if len(cfgs) != n_layers:
            raise InvalidInputError(f"expected {n_layers} layer configs, got {len(cfgs)}")
    if projections is not None and len(projections) != n_layers:
        raise InvalidInputError(f"expected {n_layers} projections, got {len(projections)}")

    residual = np.array(frames.data if hasattr(frames, "data") else frames, dtype=np.float64)
    stack = []
    for i, cfg in enumerate(cfgs):
        if projections is not None:
            proj = _as_f32(projections[i])
        elif lookup_dim is not None:
            proj = _as_f32(principal_axes(residual, lookup_dim).T)
        else:
            proj = None
        target = residual if proj is None else residual @ proj
        cb, _ = fit_kmeans(target, cfg, l2_normalized, id=f"{id_prefix}{i}")
        if proj is not None:
            cb = cb.with_projection(proj)
        idx, _ = nearest(cb.lookup_space(residual), cb.entries, l2_normalized)
        residual = residual - cb.output(idx)
        stack.append(cb)
    return stack


def random_orthonormal(rows: int, cols: int, seed) -> np.ndarray:
    """A seeded ``rows x cols`` matrix with orthonormal columns."""
    if cols > rows:
        raise InvalidInputError(f"cannot fit {cols} orthonormal columns in {rows} dims")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def principal_axes(X, k: int) -> np.ndarray:
    """Top ``k`` eigenvectors (rows) of the uncentered scatter ``X^T X``.

    Signs are fixed so each axis has a positive largest-magnitude loading.
    """
    X = np.asarray(X, dtype=np.float64)
    if k > X.shape[1]:
        raise InvalidInputError(f"cannot take {k} axes of {X.shape[1]}-dim data")
    evals, evecs = np.linalg.eigh(X.T @ X)
    order = np.argsort(evals, kind="stable")[::-1][:k]
    axes = evecs[:, order].T
    pivot = np.argmax(np.abs(axes), axis=1)
    axes *= np.sign(axes[np.arange(k), pivot])[:, None]
    return axes
