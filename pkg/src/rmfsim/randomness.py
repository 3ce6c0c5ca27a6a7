"""Deterministic keyed random streams and lazy unit-rate Poisson embeddings.

Every random draw in the package comes from a Philox generator whose 128-bit
key is a hash of (master seed, labels...).  Realized content is therefore a
pure function of the key material, independent of thread scheduling and of
the order in which regions are queried.  This is what makes the pathwise
coupling of replica systems (all M on one probability space, sharing their
embeddings and routing marks with the limit process) exact in software.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import MTooSmall, RegionOutOfBounds

__all__ = [
    "StreamTag",
    "StreamKey",
    "derive_stream",
    "derive_path_seed",
    "keyed_generator",
    "LazyPoissonField",
    "RoutingMarks",
]


class StreamTag(Enum):
    EMBEDDING = 0
    ROUTING = 1
    INITIAL = 2
    AUXILIARY = 3


@dataclass(frozen=True)
class StreamKey:
    """Identifies one independent stream: (replica, neuron, purpose)."""

    replica: int
    neuron: int
    tag: StreamTag = StreamTag.AUXILIARY


def _philox_key(*fields) -> np.ndarray:
    """128-bit Philox key from arbitrary label fields (order-sensitive)."""
    h = hashlib.sha256()
    for f in fields:
        if isinstance(f, str):
            h.update(b"s")
            h.update(f.encode())
        elif isinstance(f, StreamTag):
            h.update(b"t")
            h.update(struct.pack("<q", f.value))
        else:
            h.update(b"i")
            h.update(struct.pack("<Q", int(f) & 0xFFFFFFFFFFFFFFFF))
        h.update(b"\x1f")
    return np.frombuffer(h.digest()[:16], dtype=np.uint64).copy()


def keyed_generator(master_seed: int, *labels) -> np.random.Generator:
    """Independent, reproducible generator for the given label tuple."""
    return np.random.Generator(np.random.Philox(key=_philox_key(master_seed, *labels)))


def derive_stream(master_seed: int, key: StreamKey) -> np.random.Generator:
    """Stream for a StreamKey; distinct keys give independent streams."""
    return keyed_generator(master_seed, "stream", key.replica, key.neuron, key.tag)


def derive_path_seed(master_seed: int, path: int) -> int:
    """64-bit sub-seed for one Monte Carlo path."""
    return int(_philox_key(master_seed, "path", path)[0])


# Band chunks realized together; content of a chunk is a pure function of
# (master_seed, key, chunk index), so query order cannot matter.
_BANDS_PER_CHUNK = 8


class LazyPoissonField:
    """Unit-rate planar Poisson process on [0, t_max) x [0, h_max), realized lazily.

    Points are materialized in horizontal slabs of _BANDS_PER_CHUNK unit-height
    bands covering the full time extent.  Each slab is drawn from its own keyed
    generator on first touch (thread-safe), sorted by time, and cached.  Point
    ids (chunk, index) are stable across queries and shared by every consumer
    of the same (master_seed, key), which is what couples simulations run with
    different replica counts.
    """

    def __init__(
        self,
        master_seed: int,
        key: StreamKey,
        t_max: float,
        h_max: float = 1000.0,
        band_height: float = 1.0,
    ):
        if t_max <= 0:
            raise RegionOutOfBounds("field needs a positive time extent")
        self.master_seed = master_seed
        self.key = key
        self.t_max = float(t_max)
        self.h_max = float(h_max)
        self.band_height = float(band_height)
        self._chunk_height = band_height * _BANDS_PER_CHUNK
        self._chunks: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._lock = threading.Lock()

    def _chunk(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        got = self._chunks.get(c)
        if got is not None:
            return got
        with self._lock:
            got = self._chunks.get(c)
            if got is not None:
                return got
            g = keyed_generator(
                self.master_seed, "field",
                self.key.replica, self.key.neuron, self.key.tag, c,
            )
            h_lo = c * self._chunk_height
            h_hi = min((c + 1) * self._chunk_height, self.h_max)
            area = self.t_max * (h_hi - h_lo)
            n = int(g.poisson(area)) if area > 0 else 0
            times = np.sort(g.random(n)) * self.t_max
            heights = h_lo + g.random(n) * (h_hi - h_lo)
            self._chunks[c] = (times, heights)
            return times, heights

    def points(self, t_lo: float, t_hi: float, h_lo: float, h_hi: float):
        """All realized points in [t_lo,t_hi) x [h_lo,h_hi), sorted by time.

        Returns (times, heights, ids) where ids are (chunk, index) pairs.
        """
        if not (0 <= t_lo <= self.t_max and 0 <= h_lo <= self.h_max):
            raise RegionOutOfBounds(f"rectangle corner ({t_lo},{h_lo}) out of bounds")
        if t_hi > self.t_max + 1e-12 or h_hi > self.h_max + 1e-12:
            raise RegionOutOfBounds(
                f"rectangle exceeds bounds [0,{self.t_max}]x[0,{self.h_max}]"
            )
        if t_hi <= t_lo or h_hi <= h_lo:
            return np.empty(0), np.empty(0), []
        c_lo = int(h_lo / self._chunk_height)
        c_hi = int(np.ceil(h_hi / self._chunk_height))
        ts, hs, ids = [], [], []
        for c in range(c_lo, c_hi):
            times, heights = self._chunk(c)
            sel = np.nonzero(
                (times >= t_lo) & (times < t_hi) & (heights >= h_lo) & (heights < h_hi)
            )[0]
            ts.append(times[sel])
            hs.append(heights[sel])
            ids.extend((c, int(j)) for j in sel)
        t = np.concatenate(ts) if ts else np.empty(0)
        h = np.concatenate(hs) if hs else np.empty(0)
        order = np.argsort(t, kind="stable")
        return t[order], h[order], [ids[int(o)] for o in order]

    def first_below(self, t_from: float, level: float):
        """Earliest point strictly after t_from with height <= level.

        Returns (time, height, (chunk, index)) or None if no such point exists
        before t_max.  This is the thinning primitive: with a constant
        intensity `level` on (t_from, t_next], accepted embedding points are
        exactly the spikes of the stream.
        """
        if level > self.h_max:
            raise RegionOutOfBounds(f"level {level} exceeds h_max {self.h_max}")
        best = None
        n_chunks = int(np.ceil(min(level, self.h_max) / self._chunk_height)) if level > 0 else 0
        for c in range(max(n_chunks, 1) if level > 0 else 0):
            times, heights = self._chunk(c)
            sel = np.nonzero((times > t_from) & (heights <= level))[0]
            if sel.size:
                j = int(sel[0])
                if best is None or times[j] < best[0]:
                    best = (float(times[j]), float(heights[j]), (c, j))
        return best


class RoutingMarks:
    """Per-point replica routing choices for one spiking stream.

    For a point of stream (m, j) identified by ``point_id`` and a target
    neuron, the mark is the replica in {1..M}\\{m} that receives the spike's
    effect for that target.  Marks are mutually independent across targets and
    across M (each (point, target, M) triple has its own keyed draw) and are
    lazily extended in M.
    """

    def __init__(self, master_seed: int, key: StreamKey):
        self.master_seed = master_seed
        self.key = key

    def choice(self, point_id, target_neuron: int, m_count: int, origin: int) -> int:
        if m_count < 2:
            raise MTooSmall(f"routing needs at least 2 replicas, got {m_count}")
        if not 1 <= origin <= m_count:
            raise MTooSmall(f"origin replica {origin} outside 1..{m_count}")
        chunk, idx = point_id
        g = keyed_generator(
            self.master_seed, "mark",
            self.key.replica, self.key.neuron, self.key.tag,
            chunk, idx, target_neuron, m_count,
        )
        v = int(g.integers(1, m_count))  # uniform on {1..M-1}
        return v + 1 if v >= origin else v


def routing_mark(
    marks: RoutingMarks, point_id, target_neuron: int, m_count: int, origin: int
) -> int:
    """Functional form of RoutingMarks.choice."""
    return marks.choice(point_id, target_neuron, m_count, origin)
