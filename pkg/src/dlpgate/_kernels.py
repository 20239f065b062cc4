"""Hot byte-level kernels: FNV-1a k-gram hashing, winnowing, byte histograms.

Every kernel has two implementations with identical results:

* a numba ``@njit`` version (default), and
* a vectorised pure-numpy version.

Set ``DLPGATE_NO_NUMBA=1`` in the environment to force the numpy path (useful
where numba is unavailable or JIT warm-up is unwanted). Both namespaces stay
importable as :data:`numba_impl` and :data:`numpy_impl` so tests and the
benchmark can compare them directly.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


# ---------------------------------------------------------------- numpy path


def _np_kgram_hashes(buf: np.ndarray, offsets: np.ndarray, k: int) -> np.ndarray:
    n = offsets.shape[0] - 1 - k + 1
    if n <= 0:
        return np.empty(0, dtype=np.uint64)
    starts = offsets[:n]
    lengths = offsets[k : k + n] - starts
    h = np.full(n, FNV_OFFSET, dtype=np.uint64)
    maxlen = int(lengths.max())
    with np.errstate(over="ignore"):
        for j in range(maxlen):
            live = lengths > j
            idx = np.where(live, starts + j, 0)
            mixed = (h ^ buf[idx].astype(np.uint64)) * FNV_PRIME
            h = np.where(live, mixed, h)
    return h


def _np_winnow(hashes: np.ndarray, w: int) -> np.ndarray:
    n = hashes.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    if n <= w:
        rev = hashes[::-1]
        return np.array([n - 1 - int(np.argmin(rev))], dtype=np.int64)
    windows = np.lib.stride_tricks.sliding_window_view(hashes, w)
    # argmin returns the first minimum; on the reversed window that is the rightmost
    picks = np.arange(windows.shape[0]) + (w - 1 - np.argmin(windows[:, ::-1], axis=1))
    keep = np.ones(picks.shape[0], dtype=bool)
    keep[1:] = picks[1:] != picks[:-1]
    return picks[keep].astype(np.int64)


def _np_byte_histogram(data: np.ndarray) -> np.ndarray:
    return np.bincount(data, minlength=256).astype(np.int64)


numpy_impl = SimpleNamespace(
    kgram_hashes=_np_kgram_hashes,
    winnow=_np_winnow,
    byte_histogram=_np_byte_histogram,
    name="numpy",
)


# ---------------------------------------------------------------- numba path


def _build_numba():
    from numba import njit

    offset = FNV_OFFSET
    prime = FNV_PRIME

    @njit(cache=True, nogil=True)
    def kgram_hashes(buf, offsets, k):
        n = offsets.shape[0] - k
        if n <= 0:
            return np.empty(0, dtype=np.uint64)
        out = np.empty(n, dtype=np.uint64)
        for i in range(n):
            h = offset
            for j in range(offsets[i], offsets[i + k]):
                h = (h ^ np.uint64(buf[j])) * prime
            out[i] = h
        return out

    @njit(cache=True, nogil=True)
    def winnow(hashes, w):
        n = hashes.shape[0]
        if n == 0:
            return np.empty(0, dtype=np.int64)
        nwin = n - w + 1 if n > w else 1
        span = w if n > w else n
        out = np.empty(nwin, dtype=np.int64)
        count = 0
        last = -1
        for s in range(nwin):
            best = s + span - 1
            for j in range(s + span - 2, s - 1, -1):
                if hashes[j] < hashes[best]:
                    best = j
            if best != last:
                out[count] = best
                count += 1
                last = best
        return out[:count]

    @njit(cache=True, nogil=True)
    def byte_histogram(data):
        counts = np.zeros(256, dtype=np.int64)
        for i in range(data.shape[0]):
            counts[data[i]] += 1
        return counts

    return SimpleNamespace(
        kgram_hashes=kgram_hashes,
        winnow=winnow,
        byte_histogram=byte_histogram,
        name="numba",
    )


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None

USE_NUMBA = numba_impl is not None and os.environ.get("DLPGATE_NO_NUMBA", "") not in ("1", "true", "yes")
active = numba_impl if USE_NUMBA else numpy_impl


def encode_with_offsets(text: str) -> tuple[np.ndarray, np.ndarray]:
    """UTF-8 encode ``text`` and return (bytes, per-character byte offsets).

    ``offsets`` has ``len(text) + 1`` entries so that character ``i`` spans
    ``buf[offsets[i]:offsets[i + 1]]``.
    """
    raw = text.encode("utf-8", "surrogatepass")
    buf = np.frombuffer(raw, dtype=np.uint8)
    if len(raw) == len(text):
        return buf, np.arange(len(text) + 1, dtype=np.int64)
    widths = np.fromiter(
        (len(c.encode("utf-8", "surrogatepass")) for c in text), dtype=np.int64, count=len(text)
    )
    offsets = np.zeros(len(text) + 1, dtype=np.int64)
    np.cumsum(widths, out=offsets[1:])
    return buf, offsets


def kgram_hashes(text: str, k: int) -> np.ndarray:
    """FNV-1a 64-bit hash of every length-``k`` character gram of ``text``."""
    buf, offsets = encode_with_offsets(text)
    return active.kgram_hashes(buf, offsets, k)


def winnow(hashes: np.ndarray, w: int) -> np.ndarray:
    """Positions selected by winnowing (rightmost minimum per window)."""
    return active.winnow(np.ascontiguousarray(hashes, dtype=np.uint64), w)


def byte_histogram(data: bytes) -> np.ndarray:
    return active.byte_histogram(np.frombuffer(data, dtype=np.uint8))
