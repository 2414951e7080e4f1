"""Reproducible Gaussian draws keyed by ``(seed, path_index)``.

Paths are grouped in fixed chunks of :data:`CHUNK` consecutive indices.
Chunk ``c`` of stream ``s`` owns a Philox generator seeded from
``SeedSequence(seed, spawn_key=(c, s))`` and always draws full
``(CHUNK, n)`` blocks per time step, so the numbers seen by path ``p``
depend only on ``(seed, stream, p // CHUNK, p % CHUNK)`` and never on how
many paths are simulated or how the chunks are scheduled.

Streams in use: 0 main Brownian increments, 1 second particle group,
2 interaction times.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHUNK = 4096
STREAM_MAIN = 0
STREAM_PARTICLE = 1
STREAM_TAU = 2


def chunk_generator(seed, chunk, stream):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(chunk), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


def chunk_layout(n_paths):
    """List of ``(chunk_index, size)`` covering ``n_paths`` base paths."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    full, rest = divmod(int(n_paths), CHUNK)
    out = [(c, CHUNK) for c in range(full)]
    if rest:
        out.append((full, rest))
    return out


@dataclass
class ChunkNoise:
    """Per-step Brownian increments for one chunk.

    With ``antithetic`` the returned block is ``[g; -g]`` so lane ``j`` and
    lane ``j + size`` form a pair.
    """

    seed: int
    chunk: int
    size: int
    n: int
    stream: int = STREAM_MAIN
    antithetic: bool = False

    def __post_init__(self):
        self.gen = chunk_generator(self.seed, self.chunk, self.stream)

    @property
    def lanes(self):
        return 2 * self.size if self.antithetic else self.size

    def draw(self, sqdt):
        g = self.gen.standard_normal((CHUNK, self.n))[: self.size] * sqdt
        return np.concatenate([g, -g]) if self.antithetic else g


def uniforms(seed, chunk, size, stream=STREAM_TAU, antithetic=False):
    """One uniform per lane; antithetic partners share the draw."""
    u = chunk_generator(seed, chunk, stream).random(CHUNK)[:size]
    return np.concatenate([u, u]) if antithetic else u
