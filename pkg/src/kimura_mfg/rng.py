"""Counter-based random streams.

Every path owns an independent Philox stream keyed by ``(seed, stream, path_id)``.
Draws inside a stream are consumed step after step, so splitting a run into
time chunks, or simulating paths in a different order, yields identical numbers.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# stream tags keep unrelated consumers of one seed apart
STREAM_COMMON = 0
STREAM_CONDITIONING = 1
STREAM_IDIOSYNCRATIC = 2
STREAM_INITIAL = 3
STREAM_AUX = 4


def path_generator(seed: int, path_id: int, stream: int = STREAM_COMMON) -> np.random.Generator:
    """Generator for one path; the key is a hash of ``(seed, stream, path_id)``."""
    if seed < 0 or path_id < 0 or stream < 0:
        raise ValueError("seed, stream and path_id must be non-negative")
    ss = np.random.SeedSequence([int(seed) & _MASK64, int(stream), int(path_id)])
    return np.random.Generator(np.random.Philox(ss))


class PathStreams:
    """A bank of per-path generators that hands out normal blocks chunk by chunk."""

    def __init__(self, seed: int, path_ids, stream: int = STREAM_COMMON):
        self.seed = int(seed)
        self.stream = int(stream)
        self.path_ids = np.asarray(path_ids, dtype=np.int64)
        self._gens = [path_generator(self.seed, int(pid), self.stream) for pid in self.path_ids]

    def __len__(self) -> int:
        return len(self._gens)

    def normals(self, n_steps: int, width: int) -> np.ndarray:
        """Standard normals of shape ``(n_paths, n_steps, width)``."""
        out = np.empty((len(self._gens), n_steps, width))
        for k, g in enumerate(self._gens):
            out[k] = g.standard_normal((n_steps, width))
        return out

    def uniforms(self, n_steps: int, width: int) -> np.ndarray:
        out = np.empty((len(self._gens), n_steps, width))
        for k, g in enumerate(self._gens):
            out[k] = g.random((n_steps, width))
        return out


def chunk_sizes(n_steps: int, n_paths: int, width: int, budget: int = 2_000_000) -> list[int]:
    """Split ``n_steps`` into chunks holding about ``budget`` numbers each."""
    per_step = max(1, n_paths * max(width, 1))
    size = max(1, budget // per_step)
    sizes = [size] * (n_steps // size)
    if n_steps % size:
        sizes.append(n_steps % size)
    return sizes
