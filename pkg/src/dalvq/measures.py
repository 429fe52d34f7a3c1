"""Sample distributions and replayable random streams.

Every random draw in a run is addressed by (master seed, stream id, counter):
the triple keys a counter-based bit generator, so any single sample can be
regenerated bit-exactly without replaying the stream prefix, and distinct
streams are independent by construction. Stream ids 0..M-1 belong to the
processors' data streams; the high reserved ids below keep utility draws out
of their keyspace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import QuantizerVec, SampleBatch, min_component_separation

__all__ = [
    "DistributionSpec",
    "StreamHandle",
    "sample",
    "draw_index",
    "make_batch",
    "init_quantizer",
    "STREAM_REF_BATCH",
    "STREAM_INIT_BASE",
    "STREAM_SCHEDULE",
]

STREAM_REF_BATCH = 2**48
STREAM_INIT_BASE = 2**48 + 2**16
STREAM_SCHEDULE = 2**49

# Attempt caps: exceeding either means the configuration is degenerate, not bad luck.
_MAX_REJECTION_ATTEMPTS = 10_000
_MAX_INIT_ROUNDS = 1000

_UNIFORM_BOX = "uniform-box"
_GAUSS_MIX = "truncated-gaussian-mixture"
_DISK_UNION = "uniform-disk-union"


@dataclass(frozen=True)
class StreamHandle:
    """Address of the next draw in a replayable stream."""

    seed: int
    stream: int
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream", "counter"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ConfigError(f"stream handle field {name} must be a nonnegative integer")
        if self.seed >= 2**64 or self.stream >= 2**64:
            raise ConfigError("seed and stream id must fit in 64 bits")

    def advanced(self, n: int = 1) -> "StreamHandle":
        return StreamHandle(self.seed, self.stream, self.counter + n)

    def generator(self) -> np.random.Generator:
        """Generator owning this counter's private block of the keyed Philox space."""
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        ctr = np.array([0, self.counter, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))


@dataclass(frozen=True)
class DistributionSpec:
    """A sampling distribution with bounded support of known diameter.

    Three kinds: a uniform box (convex), a Gaussian mixture truncated to a box
    (convex support, bounded density), and a union of planar disks (possibly
    non-convex, for stressing support-shape assumptions; overlapping disks are
    oversampled in proportion to the overlap).
    """

    kind: str
    low: np.ndarray = None
    high: np.ndarray = None
    weights: np.ndarray = None
    means: np.ndarray = None
    covs: np.ndarray = None
    centers: np.ndarray = None
    radii: np.ndarray = None
    _chols: np.ndarray = field(repr=False, compare=False, default=None)

    # ---- constructors ----

    @staticmethod
    def uniform_box(low, high) -> "DistributionSpec":
        return DistributionSpec(kind=_UNIFORM_BOX, low=low, high=high)

    @staticmethod
    def gaussian_mixture(weights, means, covs, low, high) -> "DistributionSpec":
        return DistributionSpec(kind=_GAUSS_MIX, weights=weights, means=means, covs=covs,
                                low=low, high=high)

    @staticmethod
    def disk_union(centers, radii) -> "DistributionSpec":
        return DistributionSpec(kind=_DISK_UNION, centers=centers, radii=radii)

    def __post_init__(self):
        def freeze(name, value, dtype=float):
            arr = np.array(value, dtype=dtype)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
            return arr

        if self.kind in (_UNIFORM_BOX, _GAUSS_MIX):
            if self.low is None or self.high is None:
                raise ConfigError(f"{self.kind} needs low/high bounds")
            lo = freeze("low", self.low)
            hi = freeze("high", self.high)
            if lo.ndim != 1 or lo.shape != hi.shape:
                raise ConfigError("low/high must be 1-d arrays of equal length")
            if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
                raise ConfigError("box bounds must be finite")
            if not np.all(lo < hi):
                raise ConfigError("box must satisfy low < high in every coordinate")
        if self.kind == _UNIFORM_BOX:
            pass
        elif self.kind == _GAUSS_MIX:
            if self.weights is None or self.means is None or self.covs is None:
                raise ConfigError("mixture needs weights, means, covs")
            w = freeze("weights", self.weights)
            mu = freeze("means", self.means)
            cv = freeze("covs", self.covs)
            d = self.low.shape[0]
            m = w.shape[0]
            if w.ndim != 1 or m < 1 or np.any(w < 0):
                raise ConfigError("weights must be a nonnegative 1-d array")
            if abs(float(np.sum(w)) - 1.0) > 1e-12:
                raise ConfigError("mixture weights must sum to 1 within 1e-12")
            if mu.shape != (m, d):
                raise ConfigError(f"means must have shape ({m}, {d})")
            if cv.shape != (m, d, d):
                raise ConfigError(f"covs must have shape ({m}, {d}, {d})")
            try:
                chols = np.linalg.cholesky(cv)
            except np.linalg.LinAlgError as exc:
                raise ConfigError("each covariance must be symmetric positive definite") from exc
            chols.flags.writeable = False
            object.__setattr__(self, "_chols", chols)
        elif self.kind == _DISK_UNION:
            if self.centers is None or self.radii is None:
                raise ConfigError("disk union needs centers and radii")
            c = freeze("centers", self.centers)
            r = freeze("radii", self.radii)
            if c.ndim != 2 or c.shape[1] != 2:
                raise ConfigError("disk centers must have shape (m, 2)")
            if r.shape != (c.shape[0],) or np.any(r <= 0):
                raise ConfigError("radii must be positive, one per center")
        else:
            raise ConfigError(f"unknown distribution kind: {self.kind!r}")

    # ---- support geometry ----

    @property
    def dim(self) -> int:
        if self.kind == _DISK_UNION:
            return 2
        return self.low.shape[0]

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == _DISK_UNION:
            return (np.min(self.centers - self.radii[:, None], axis=0),
                    np.max(self.centers + self.radii[:, None], axis=0))
        return self.low, self.high

    @property
    def diameter(self) -> float:
        """Exact diameter of the declared support."""
        if self.kind == _DISK_UNION:
            dc = self.centers[:, None, :] - self.centers[None, :, :]
            gaps = np.sqrt(np.einsum("ijd,ijd->ij", dc, dc))
            return float(np.max(gaps + self.radii[:, None] + self.radii[None, :]))
        return float(np.linalg.norm(self.high - self.low))

    @property
    def convex_support(self) -> bool:
        # a lone disk is convex; a union of several generally is not
        return self.kind != _DISK_UNION or len(self.radii) == 1

    def contains(self, z, slack: float = 0.0) -> bool:
        z = np.asarray(z, dtype=float)
        if self.kind == _DISK_UNION:
            dist = np.linalg.norm(self.centers - z[None, :], axis=1)
            return bool(np.any(dist <= self.radii + slack))
        return bool(np.all(z >= self.low - slack) and np.all(z <= self.high + slack))

    def _strictly_interior(self, z) -> bool:
        z = np.asarray(z, dtype=float)
        if self.kind == _DISK_UNION:
            dist = np.linalg.norm(self.centers - z[None, :], axis=1)
            return bool(np.any(dist < self.radii))
        return bool(np.all(z > self.low) and np.all(z < self.high))

    # array fields break the generated comparison; value semantics via dicts
    def __eq__(self, other):
        if not isinstance(other, DistributionSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    # ---- serialization (JSON-safe dicts) ----

    def to_dict(self) -> dict:
        if self.kind == _UNIFORM_BOX:
            return {"kind": self.kind, "low": self.low.tolist(), "high": self.high.tolist()}
        if self.kind == _GAUSS_MIX:
            return {"kind": self.kind, "weights": self.weights.tolist(),
                    "means": self.means.tolist(), "covs": self.covs.tolist(),
                    "low": self.low.tolist(), "high": self.high.tolist()}
        return {"kind": self.kind, "centers": self.centers.tolist(), "radii": self.radii.tolist()}

    @staticmethod
    def from_dict(data: dict) -> "DistributionSpec":
        if not isinstance(data, dict) or "kind" not in data:
            raise ConfigError("distribution must be an object with a 'kind' field")
        kind = data["kind"]
        allowed = {
            _UNIFORM_BOX: {"kind", "low", "high"},
            _GAUSS_MIX: {"kind", "weights", "means", "covs", "low", "high"},
            _DISK_UNION: {"kind", "centers", "radii"},
        }
        if kind not in allowed:
            raise ConfigError(f"unknown distribution kind: {kind!r}")
        unknown = set(data) - allowed[kind]
        if unknown:
            raise ConfigError(f"unknown distribution field(s): {sorted(unknown)}")
        missing = allowed[kind] - set(data)
        if missing:
            raise ConfigError(f"distribution missing field(s): {sorted(missing)}")
        body = {k: v for k, v in data.items() if k != "kind"}
        return DistributionSpec(kind=kind, **body)


def sample(spec: DistributionSpec, stream: StreamHandle) -> tuple[np.ndarray, StreamHandle]:
    """Draw one point from the distribution; returns (point, advanced stream).

    The point depends only on (spec, seed, stream, counter), never on earlier
    draws, so replaying any counter reproduces its sample bit-exactly.
    """
    g = stream.generator()
    if spec.kind == _UNIFORM_BOX:
        u = g.random(spec.dim)
        z = spec.low + u * (spec.high - spec.low)
    elif spec.kind == _GAUSS_MIX:
        cum = np.cumsum(spec.weights)
        cum[-1] = 1.0
        comp = int(np.searchsorted(cum, g.random(), side="right"))
        mean = spec.means[comp]
        chol = spec._chols[comp]
        for _ in range(_MAX_REJECTION_ATTEMPTS):
            z = mean + chol @ g.standard_normal(spec.dim)
            if np.all(z >= spec.low) and np.all(z <= spec.high):
                break
        else:
            raise ConfigError(
                "truncation box rejects virtually all mass of component "
                f"{comp}; loosen the box or move the component")
    else:  # disk union, area-weighted disk choice
        areas = spec.radii**2
        cum = np.cumsum(areas / np.sum(areas))
        cum[-1] = 1.0
        disk = int(np.searchsorted(cum, g.random(), side="right"))
        r = spec.radii[disk] * np.sqrt(g.random())
        ang = 2.0 * np.pi * g.random()
        z = spec.centers[disk] + r * np.array([np.cos(ang), np.sin(ang)])
    return z, stream.advanced()


def draw_index(n: int, stream: StreamHandle) -> tuple[int, StreamHandle]:
    """Uniform index in [0, n), replayable like sample(); used by batch replay."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = stream.generator().random()
    return int(u * n), stream.advanced()


def make_batch(spec: DistributionSpec, seed: int, n: int) -> SampleBatch:
    """n deterministic draws packaged with the declared support geometry."""
    if n < 1:
        raise ConfigError("batch size must be >= 1")
    stream = StreamHandle(seed, STREAM_REF_BATCH)
    pts = np.empty((n, spec.dim))
    for k in range(n):
        pts[k], stream = sample(spec, stream)
    lo, hi = spec.bbox
    return SampleBatch(points=pts, bbox_low=lo, bbox_high=hi, diameter=spec.diameter)


def init_quantizer(spec: DistributionSpec, kappa: int, seed: int,
                   stream: int = STREAM_INIT_BASE) -> QuantizerVec:
    """kappa points drawn from the distribution, resampled as a group until
    they are pairwise separated by at least 1e-6 of the support diameter and
    strictly interior to the support."""
    if kappa < 1:
        raise ConfigError("kappa must be >= 1")
    handle = StreamHandle(seed, stream)
    min_sep = 1e-6 * spec.diameter
    for _ in range(_MAX_INIT_ROUNDS):
        pts = np.empty((kappa, spec.dim))
        for k in range(kappa):
            pts[k], handle = sample(spec, handle)
        if not all(spec._strictly_interior(p) for p in pts):
            continue
        if kappa == 1 or min_component_separation(pts) >= min_sep:
            return QuantizerVec(pts)
    raise RuntimeError(
        f"could not draw {kappa} separated interior points in {_MAX_INIT_ROUNDS} rounds; "
        "the distribution is too degenerate for this kappa")
