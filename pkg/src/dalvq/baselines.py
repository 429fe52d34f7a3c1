"""Single-machine references: sequential online quantization and batch Lloyd.

The sequential baseline mirrors the distributed engine exactly: same init
stream, same per-draw counters, same arithmetic on the winning row. With one
processor, a trivial merge and the shared clock, the engine must reproduce it
bit for bit; the tests pin that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .geometry import (QuantizerVec, SampleBatch, _cell_sq_dists, empirical_distortion,
                       nearest_cell)
from .measures import (DistributionSpec, StreamHandle, draw_index, init_quantizer,
                       make_batch, sample)

__all__ = ["clvq_step", "run_clvq", "lloyd_step", "run_lloyd", "BaselineRun"]


@dataclass(frozen=True)
class BaselineRun:
    quantizer: QuantizerVec
    distortion: float        # on the reference batch
    iterations: int
    converged: bool = True


def clvq_step(w: np.ndarray, z: np.ndarray, eps: float) -> np.ndarray:
    """One online tick: pull the winning component toward the sample."""
    comp = nearest_cell(z, w)
    new = np.array(w, dtype=float)
    new[comp] = w[comp] + -eps * (w[comp] - z)
    return new


def run_clvq(dist: DistributionSpec, kappa: int, horizon: int, seed: int, c: float,
             replay_from_batch: bool = False, n_ref: int = 2000) -> BaselineRun:
    """Sequential run with steps c / (t or 1), t = 0 .. horizon-1."""
    if not (0.0 < c < 1.0):
        raise ConfigError(f"step constant must lie in (0, 1), got {c}")
    if horizon < 0:
        raise ConfigError("horizon must be >= 0")
    batch = make_batch(dist, seed, n_ref)
    w = np.array(init_quantizer(dist, kappa, seed).components)
    handle = StreamHandle(seed, 0)
    for t in range(horizon):
        if replay_from_batch:
            idx, handle = draw_index(batch.n, handle)
            z = batch.points[idx]
        else:
            z, handle = sample(dist, handle)
        eps = c / max(t, 1)
        comp = nearest_cell(z, w)
        w[comp] = w[comp] + -eps * (w[comp] - z)
    q = QuantizerVec(w)
    return BaselineRun(quantizer=q, distortion=empirical_distortion(q, batch),
                       iterations=horizon)


def lloyd_step(w, batch: SampleBatch) -> np.ndarray:
    """One batch update: move each component to its cell's centroid.

    A component whose cell is empty stays where it is.
    """
    comps = w.components if isinstance(w, QuantizerVec) else np.asarray(w, dtype=float)
    kappa, dim = comps.shape
    sq = _cell_sq_dists(batch, comps)
    assign = np.argmin(sq, axis=1)
    counts = np.bincount(assign, minlength=kappa).astype(float)
    new = np.array(comps)
    sums = np.empty((kappa, dim))
    for k in range(dim):
        sums[:, k] = np.bincount(assign, weights=batch.points[:, k], minlength=kappa)
    occupied = counts > 0
    new[occupied] = sums[occupied] / counts[occupied, None]
    return new


def run_lloyd(dist: DistributionSpec, kappa: int, seed: int, n_ref: int = 2000,
              rel_tol: float = 1e-10, max_iters: int = 500) -> BaselineRun:
    """Iterate batch updates on the reference batch until the quantizer moves
    by less than rel_tol of its own scale."""
    batch = make_batch(dist, seed, n_ref)
    w = np.array(init_quantizer(dist, kappa, seed).components)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        new = lloyd_step(w, batch)
        scale = max(float(np.linalg.norm(w)), 1e-300)
        moved = float(np.linalg.norm(new - w)) / scale
        w = new
        if moved < rel_tol:
            converged = True
            break
    q = QuantizerVec(w)
    return BaselineRun(quantizer=q, distortion=empirical_distortion(q, batch),
                       iterations=it, converged=converged)
