"""Versioned key-value datastore of decoder representations and their target tokens."""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np
import torch
from scipy.cluster.vq import kmeans2

from .model import teacher_forced_states
from .validation import DatastoreStateError, FormatError, InputError, check_vector

MAGIC = b"INKD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")

EXACT, IVF = "exact", "ivf"


@dataclass(frozen=True)
class NeighborSet:
    ids: np.ndarray
    keys: np.ndarray
    tokens: np.ndarray
    distances: np.ndarray
    query_position: tuple = None

    def __len__(self):
        return len(self.ids)


class Datastore:
    """Immutable snapshot of (key, value, origin) entries plus a search index.

    ``mode`` selects exact flat search (default) or an inverted-file index
    with ``n_list`` k-means cells of which ``n_probe`` are scanned per query.
    """

    def __init__(self, keys, values, origins, version=1, mode=EXACT, n_list=64, n_probe=8, seed=0):
        keys = np.ascontiguousarray(keys, dtype=np.float32)
        values = np.ascontiguousarray(values, dtype=np.int64)
        origins = np.ascontiguousarray(origins, dtype=np.int64).reshape(-1, 2)
        if keys.ndim != 2 or len(keys) != len(values) or len(values) != len(origins):
            raise InputError("keys, values and origins must describe the same number of entries")
        if not np.all(np.isfinite(keys)):
            raise InputError("datastore keys must be finite")
        if mode not in (EXACT, IVF):
            raise InputError(f"unknown search mode {mode!r}")
        for arr in (keys, values, origins):
            arr.setflags(write=False)
        self.keys, self.values, self.origins = keys, values, origins
        self.version = int(version)
        self.mode, self.n_list, self.n_probe, self.seed = mode, n_list, n_probe, seed
        self._keys64 = keys.astype(np.float64)
        self._sqnorm = np.einsum("ij,ij->i", self._keys64, self._keys64)
        self._sqnorm32 = self._sqnorm.astype(np.float32)
        self._origin_index = None
        self._ivf = None
        self._lock = threading.Lock()

    @property
    def dim(self):
        return self.keys.shape[1]

    def __len__(self):
        return len(self.values)

    def same_entries(self, other):
        return (
            self.dim == other.dim
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.origins, other.origins)
        )

    def gather(self, ids):
        """Float64 keys and values for an array of entry indices."""
        return self._keys64[ids], self.values[ids]

    def entry_of(self, origin):
        """Entry index for a (sentence, step) origin, or -1."""
        if self._origin_index is None:
            self._origin_index = {(int(s), int(t)): i for i, (s, t) in enumerate(self.origins)}
        return self._origin_index.get((int(origin[0]), int(origin[1])), -1)

    # --- search -------------------------------------------------------------

    def query(self, h, k, exclude=None, approximate=None):
        h = check_vector(h, name="query")
        if h.shape[0] != self.dim:
            raise InputError(f"query width {h.shape[0]} != datastore width {self.dim}")
        exclude_ids = None if exclude is None else np.array([self.entry_of(exclude)])
        ids, dist = self.search(h[None], k, exclude_ids, approximate)
        ids, dist = ids[0], dist[0]
        keep = ids >= 0
        ids, dist = ids[keep], dist[keep]
        return NeighborSet(ids, self.keys[ids], self.values[ids], dist, exclude)

    def search(self, H, k, exclude_ids=None, approximate=None, chunk=512):
        """Batched k-NN. Returns (ids, distances), both (n, k); -1 pads missing slots.

        ``exclude_ids`` holds one entry index per query (-1 for none).
        """
        if len(self) == 0:
            raise DatastoreStateError("datastore is empty")
        if k < 1:
            raise InputError("k must be >= 1")
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[1] != self.dim:
            raise InputError(f"queries must have shape (n, {self.dim})")
        if exclude_ids is not None:
            exclude_ids = np.asarray(exclude_ids, dtype=np.int64)
        approximate = self.mode == IVF if approximate is None else approximate
        if approximate:
            return self._search_ivf(H, k, exclude_ids)
        out_ids = np.full((len(H), k), -1, dtype=np.int64)
        out_d = np.full((len(H), k), np.inf)
        for lo in range(0, len(H), chunk):
            hi = min(lo + chunk, len(H))
            ex = None if exclude_ids is None else exclude_ids[lo:hi]
            out_ids[lo:hi], out_d[lo:hi] = self._search_exact(H[lo:hi], k, ex)
        return out_ids, out_d

    def _search_exact(self, Q, k, exclude_ids):
        n, N = len(Q), len(self)
        # float32 expanded distances pick a candidate pool; float64 direct distances rank it
        Q32 = Q.astype(np.float32)
        approx = self._sqnorm32[None, :] - 2.0 * (Q32 @ self.keys.T)
        if exclude_ids is not None:
            rows = np.flatnonzero(exclude_ids >= 0)
            approx[rows, exclude_ids[rows]] = np.inf
        n_avail = N - (0 if exclude_ids is None else (exclude_ids >= 0).astype(int))
        kk = min(k, N)
        c = min(N, kk + 16)
        if c < N:
            cand = np.argpartition(approx, c - 1, axis=1)[:, :c]
        else:
            cand = np.broadcast_to(np.arange(N), (n, N)).copy()
        pool_approx = np.take_along_axis(approx, cand, axis=1)
        exact = np.sqrt(((self._keys64[cand] - Q[:, None, :]) ** 2).sum(-1))
        exact[np.isinf(pool_approx)] = np.inf
        order = np.lexsort((cand, exact), axis=1)
        ids = np.take_along_axis(cand, order, axis=1)[:, :kk]
        dist = np.take_along_axis(exact, order, axis=1)[:, :kk]
        if c < N:
            # an entry outside the pool can only belong to the top k if the pool edge
            # lies within float32 rounding of the k-th distance; redo those rows in full
            qn = np.einsum("ij,ij->i", Q, Q)
            tol = 1e-5 * (qn + self._sqnorm.max()) + 1e-12
            edge = np.where(np.isinf(pool_approx), -np.inf, pool_approx).max(axis=1) + qn
            for r in np.flatnonzero(edge <= dist[:, -1] ** 2 + tol):
                ids[r], dist[r] = self._full_row(Q[r], kk, None if exclude_ids is None else exclude_ids[r])
        if kk < k:
            ids = np.pad(ids, ((0, 0), (0, k - kk)), constant_values=-1)
            dist = np.pad(dist, ((0, 0), (0, k - kk)), constant_values=np.inf)
        short = np.arange(k)[None, :] >= np.broadcast_to(n_avail, (n,))[:, None]
        ids[short] = -1
        dist[short] = np.inf
        return ids, dist

    def _full_row(self, q, k, exclude_id):
        d = np.sqrt(((self._keys64 - q) ** 2).sum(-1))
        if exclude_id is not None and exclude_id >= 0:
            d[exclude_id] = np.inf
        order = np.lexsort((np.arange(len(d)), d))[:k]
        return order, d[order]

    def _build_ivf(self):
        with self._lock:
            if self._ivf is None:
                n_list = max(1, min(self.n_list, len(self)))
                centroids, labels = kmeans2(self._keys64, n_list, seed=self.seed, minit="++", iter=20)
                lists = [np.flatnonzero(labels == c) for c in range(n_list)]
                self._ivf = (centroids, lists)
        return self._ivf

    def _search_ivf(self, H, k, exclude_ids):
        centroids, lists = self._build_ivf()
        n_probe = min(self.n_probe, len(centroids))
        cdist = ((H[:, None, :] - centroids[None]) ** 2).sum(-1)
        probes = np.argsort(cdist, axis=1, kind="stable")[:, :n_probe]
        out_ids = np.full((len(H), k), -1, dtype=np.int64)
        out_d = np.full((len(H), k), np.inf)
        for i, q in enumerate(H):
            cand = np.sort(np.concatenate([lists[c] for c in probes[i]]))
            if exclude_ids is not None and exclude_ids[i] >= 0:
                cand = cand[cand != exclude_ids[i]]
            d = np.sqrt(((self._keys64[cand] - q) ** 2).sum(-1))
            order = np.lexsort((cand, d))[:k]
            out_ids[i, : len(order)] = cand[order]
            out_d[i, : len(order)] = d[order]
        return out_ids, out_d

    # --- persistence ------------------------------------------------------------

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, self.dim, len(self), self.version))
            fh.write(self.keys.astype("<f4").tobytes())
            fh.write(self.values.astype("<u4").tobytes())
            fh.write(self.origins.astype("<u4").tobytes())

    @classmethod
    def load(cls, path, **index_options):
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, fmt, dim, count, version = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if fmt != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {fmt}")
        expected = _HEADER.size + count * (4 * dim + 4 + 8)
        if len(blob) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
        off = _HEADER.size
        keys = np.frombuffer(blob, "<f4", count * dim, off).reshape(count, dim)
        off += 4 * count * dim
        values = np.frombuffer(blob, "<u4", count, off)
        off += 4 * count
        origins = np.frombuffer(blob, "<u4", 2 * count, off).reshape(count, 2)
        return cls(keys, values, origins, version, **index_options)


def _states_for(model, corpus, batch_size):
    keys, values, origins = [], [], []
    with torch.no_grad():
        for lo in range(0, len(corpus), batch_size):
            batch = [corpus[i] for i in range(lo, min(lo + batch_size, len(corpus)))]
            h, gold = teacher_forced_states(model, batch)
            keys.append(h.float().numpy())
            values.append(gold.numpy())
            for j, (_, tgt) in enumerate(batch):
                origins.extend((lo + j, t) for t in range(len(tgt) + 1))
    return np.concatenate(keys), np.concatenate(values), np.asarray(origins)


def build(model, corpus, previous=None, batch_size=64, **index_options):
    """One entry per target position (eos included), in corpus then step order."""
    if len(corpus) == 0:
        raise InputError("cannot build a datastore from an empty corpus")
    keys, values, origins = _states_for(model, corpus, batch_size)
    version = 1 if previous is None else previous.version + 1
    return Datastore(keys, values, origins, version, **index_options)


def refresh(old, model, corpus, batch_size=64):
    """Recompute keys under the current parameters; values and origins carry over."""
    if corpus.n_target_positions() != len(old):
        raise DatastoreStateError(f"corpus has {corpus.n_target_positions()} target positions but datastore has {len(old)} entries")
    keys, values, origins = _states_for(model, corpus, batch_size)
    if not (np.array_equal(values, old.values) and np.array_equal(origins, old.origins)):
        raise DatastoreStateError("corpus does not match the datastore's values/origins")
    return Datastore(keys, old.values, old.origins, old.version + 1, old.mode, old.n_list, old.n_probe, old.seed)


class ActiveDatastore:
    """Handle to the datastore version readers should use; publication is an atomic swap."""

    def __init__(self, initial):
        self._lock = threading.Lock()
        self._current = initial

    @property
    def current(self):
        with self._lock:
            return self._current

    def publish(self, new):
        with self._lock:
            if new.version <= self._current.version:
                raise DatastoreStateError(f"version {new.version} is not newer than {self._current.version}")
            self._current = new
