"""Quantizer geometry: nearest-cell assignment, distortion, and gradient surrogates.

A quantizer is a tuple of kappa components (prototype vectors) in R^d. The cell
of a component is the set of points closer to it than to any other component,
with ties and duplicate components resolving to the smallest index, so the cells
always partition the data even for degenerate quantizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuantizerVec",
    "SampleBatch",
    "nearest_cell",
    "gradient_observation",
    "empirical_distortion",
    "empirical_gradient",
    "min_component_separation",
]


def _as_components(w) -> np.ndarray:
    """Coerce a QuantizerVec or array-like to a (kappa, dim) float array."""
    if isinstance(w, QuantizerVec):
        return w.components
    arr = np.asarray(w, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"quantizer must be 2-d (kappa, dim), got shape {arr.shape}")
    return arr


def _check_point(z, dim: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (dim,):
        raise ValueError(f"point has shape {z.shape}, expected ({dim},)")
    return z


@dataclass(frozen=True)
class QuantizerVec:
    """Immutable stack of kappa prototype vectors, shape (kappa, dim).

    Components are finite floats; the array is copied on construction and
    frozen so instances behave as values.
    """

    components: np.ndarray

    def __post_init__(self):
        arr = np.array(self.components, dtype=float)  # defensive copy
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"components must have shape (kappa>=1, dim>=1), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("components must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "components", arr)

    @property
    def kappa(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def is_parted(self, delta: float) -> bool:
        """True if all pairwise component distances are >= delta."""
        if delta < 0:
            raise ValueError("delta must be >= 0")
        return min_component_separation(self) >= delta


@dataclass(frozen=True)
class SampleBatch:
    """A fixed batch of samples plus the declared support geometry.

    The bounding box and diameter describe the distribution's support, not the
    empirical point cloud: diagnostics that scale by the support diameter must
    not drift with the draw.
    """

    points: np.ndarray
    bbox_low: np.ndarray
    bbox_high: np.ndarray
    diameter: float
    # squared point norms, cached for repeated distance evaluations
    _sq_norms: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError(f"points must have shape (n>=1, dim), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        lo = np.array(self.bbox_low, dtype=float)
        hi = np.array(self.bbox_high, dtype=float)
        if lo.shape != (pts.shape[1],) or hi.shape != (pts.shape[1],):
            raise ValueError("bounding box does not match point dimension")
        slack = 1e-9 * max(1.0, float(np.max(hi - lo)))
        if np.any(pts < lo - slack) or np.any(pts > hi + slack):
            raise ValueError("points fall outside the declared bounding box")
        if not (np.isfinite(self.diameter) and self.diameter > 0):
            raise ValueError("diameter must be positive and finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "bbox_low", lo)
        object.__setattr__(self, "bbox_high", hi)
        sq = np.einsum("nd,nd->n", pts, pts)
        sq.flags.writeable = False
        object.__setattr__(self, "_sq_norms", sq)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def nearest_cell(z, w) -> int:
    """Index of the component closest to z, smallest index on ties.

    Duplicate components produce bit-identical distances, so the collapse to
    the first duplicate falls out of first-occurrence argmin.
    """
    comps = _as_components(w)
    z = _check_point(z, comps.shape[1])
    diff = comps - z
    sq = np.einsum("kd,kd->k", diff, diff)
    return int(np.argmin(sq))


def gradient_observation(z, w) -> np.ndarray:
    """Single-sample winner-takes-all gradient surrogate.

    Returns a (kappa, dim) array that is zero except in the winning row,
    which holds w_winner - z. Its only nonzero row has norm <= the distance
    from z to the quantizer, hence <= the support diameter whenever both live
    in the support hull.
    """
    comps = _as_components(w)
    z = _check_point(z, comps.shape[1])
    out = np.zeros_like(comps)
    win = nearest_cell(z, comps)
    out[win] = comps[win] - z
    return out


def _cell_sq_dists(batch: SampleBatch, comps: np.ndarray) -> np.ndarray:
    """Squared distances (n, kappa) via the expanded form, clamped at zero.

    The expanded form |z|^2 - 2 z.w + |w|^2 can go epsilon-negative when z
    coincides with a component; the clamp guards the distortion sign.
    """
    if comps.shape[1] != batch.dim:
        raise ValueError(f"quantizer dim {comps.shape[1]} does not match batch dim {batch.dim}")
    w_sq = np.einsum("kd,kd->k", comps, comps)
    d = batch._sq_norms[:, None] - 2.0 * (batch.points @ comps.T) + w_sq[None, :]
    return np.maximum(d, 0.0)


def empirical_distortion(w, batch: SampleBatch) -> float:
    """Half the mean squared distance from each sample to its nearest component."""
    comps = _as_components(w)
    d = _cell_sq_dists(batch, comps)
    return 0.5 * float(np.mean(np.min(d, axis=1)))


def empirical_gradient(w, batch: SampleBatch) -> np.ndarray:
    """Mean winner-takes-all observation over the batch, shape (kappa, dim).

    Row l equals (count_l * w_l - sum of samples in cell l) / n. At a parted
    quantizer whose cell boundaries carry no samples this is the exact
    gradient of empirical_distortion.
    """
    comps = _as_components(w)
    d = _cell_sq_dists(batch, comps)
    idx = np.argmin(d, axis=1)
    kappa = comps.shape[0]
    counts = np.bincount(idx, minlength=kappa).astype(float)
    sums = np.empty_like(comps)
    for k in range(comps.shape[1]):
        sums[:, k] = np.bincount(idx, weights=batch.points[:, k], minlength=kappa)
    return (counts[:, None] * comps - sums) / batch.n


def min_component_separation(w) -> float:
    """Smallest pairwise distance between components; +inf when kappa == 1."""
    comps = _as_components(w)
    kappa = comps.shape[0]
    if kappa == 1:
        return math.inf
    diff = comps[:, None, :] - comps[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diff, diff)
    iu = np.triu_indices(kappa, k=1)
    return float(np.sqrt(np.min(sq[iu])))
