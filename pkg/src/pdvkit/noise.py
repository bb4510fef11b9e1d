"""Per-path Brownian increment streams.

Every path owns a counter-based Philox stream keyed by ``(seed, path_index)``,
so a path's increments never depend on how paths are grouped into blocks or
spread over workers.  Coarse-grid increments are sums of fine-grid normals,
which keeps runs at different step sizes on one Brownian path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _generator(seed: int, index: int) -> np.random.Generator:
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class NoiseStream:
    """Increment stream of one path.

    With ``antithetic=True`` odd paths replay the stream of the preceding even
    path with flipped sign.
    """

    seed: int = 0
    path_index: int = 0
    driver: str = "gaussian"
    antithetic: bool = False

    def normals(self, count: int) -> np.ndarray:
        if self.driver == "zero":
            return np.zeros(count)
        index, sign = self.path_index, 1.0
        if self.antithetic and index % 2 == 1:
            index, sign = index - 1, -1.0
        z = _generator(self.seed, index).standard_normal(count)
        return -z if sign < 0 else z

    def increments(self, n_steps: int, dt: float, substeps: int = 1) -> np.ndarray:
        """Brownian increments over ``n_steps`` steps of size ``dt``.

        Each increment sums ``substeps`` normals of variance ``dt / substeps``.
        """
        z = self.normals(n_steps * substeps)
        return z.reshape(n_steps, substeps).sum(axis=1) * math.sqrt(dt / substeps)


def block_increments(
    seed: int,
    indices,
    n_steps: int,
    dt: float,
    substeps: int = 1,
    driver: str = "gaussian",
    antithetic: bool = False,
) -> np.ndarray:
    """Increments for a block of paths, shaped ``(n_steps, len(indices))``."""
    out = np.empty((n_steps, len(indices)))
    for col, i in enumerate(indices):
        stream = NoiseStream(seed, int(i), driver, antithetic)
        out[:, col] = stream.increments(n_steps, dt, substeps)
    return out
