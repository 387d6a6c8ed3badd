"""Counter-based Gaussian increments, reproducible under any path blocking.

Each path owns a fixed range of Philox counter blocks derived from its index
alone, so splitting the path set across workers (or changing the block size)
cannot change a single draw. Normals come from the inverse CDF applied to
Philox uniforms; inverse CDF consumes a fixed number of counter values per
draw, unlike ziggurat sampling, which is what makes absolute counter
arithmetic possible.

numpy's Philox.advance(k) moves k whole 256-bit counter increments, i.e.
4 k single 64-bit draws, so every path is padded to a whole number of 4-draw
blocks (at most 3 draws per path are discarded).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.random import Generator, Philox
from scipy.special import ndtri

from .errors import InvalidParameters

_DRAWS_PER_ADVANCE = 4
_DEFAULT_BLOCK = 32768
_MIN_UNIFORM = 2.0 ** -54  # ndtri(0) is -inf; clip the (prob 2^-53) zero draw


def _blocks_per_path(n_steps: int, d: int) -> int:
    return -(-(n_steps * d) // _DRAWS_PER_ADVANCE)


def _fill_block(out, seed, p0, p1, n_steps, d):
    bpp = _blocks_per_path(n_steps, d)
    bg = Philox(key=seed)
    bg.advance(p0 * bpp)
    u = Generator(bg).random((p1 - p0) * bpp * _DRAWS_PER_ADVANCE)
    u = u.reshape(p1 - p0, bpp * _DRAWS_PER_ADVANCE)[:, : n_steps * d]
    np.maximum(u, _MIN_UNIFORM, out=u)
    out[p0:p1] = ndtri(u).reshape(p1 - p0, n_steps, d)


def normal_increments(seed: int, n_paths: int, n_steps: int, d: int,
                      workers: int = 1, block_size: int = _DEFAULT_BLOCK) -> np.ndarray:
    """Standard normal array of shape (n_paths, n_steps, d).

    The value at [p, i, j] depends only on (seed, p, i, j); workers and
    block_size affect scheduling, never output.
    """
    if n_paths < 1 or n_steps < 1 or d < 1:
        raise InvalidParameters(
            f"need positive sizes, got paths={n_paths}, steps={n_steps}, d={d}")
    if not (0 <= int(seed) < 2 ** 64):
        raise InvalidParameters(f"seed must fit in an unsigned 64-bit int, got {seed}")
    if workers < 1 or block_size < 1:
        raise InvalidParameters("workers and block_size must be positive")

    out = np.empty((n_paths, n_steps, d))
    edges = list(range(0, n_paths, block_size)) + [n_paths]
    spans = [(a, b) for a, b in zip(edges[:-1], edges[1:])]
    if workers == 1 or len(spans) == 1:
        for a, b in spans:
            _fill_block(out, int(seed), a, b, n_steps, d)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_fill_block, out, int(seed), a, b, n_steps, d)
                       for a, b in spans]
            for fut in futures:
                fut.result()
    return out
