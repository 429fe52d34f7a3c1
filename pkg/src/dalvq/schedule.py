"""Communication schedules: who merges from whom, with what weights and delays.

A schedule fixes, for every tick t, a row-stochastic merge matrix, an integer
delay per (receiver, sender) entry, and the set of processors taking a descent
step. The directed communication edge (j -> i) exists at t exactly when the
merge coefficient of receiver i on sender j is positive. Generated families are
periodic (random draws fill one base window and repeat), which the agreement
analysis exploits; traces read from disk stay dense.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError
from .measures import STREAM_SCHEDULE

__all__ = [
    "CommSchedule",
    "ScheduleSpec",
    "CheckResult",
    "ValidationReport",
    "generate",
    "validate",
    "communication_graph",
    "write_trace",
    "read_trace",
]

_TOPOLOGIES = ("complete", "ring", "random-symmetric-gossip", "custom-trace")
_DELAY_LAWS = ("zero", "fixed", "uniform")
_ACTIVITIES = ("all-active", "round-robin", "random-subset", "none")

_ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class ScheduleSpec:
    """Recipe for a schedule family.

    merge_period p: merges happen on ticks with t % p == p - 1.
    delay_law: "zero", "fixed" (value = the delay), or "uniform" (value = the
    exclusive upper bound, so delays are drawn from 0..value-1).
    activity: which processors take descent steps; "none" yields the pure
    agreement iteration (no descent anywhere, flagged by validation).
    base_window: length of the window random draws fill before repeating.
    """

    topology: str
    merge_period: int = 1
    delay_law: str = "zero"
    delay_value: int = 0
    activity: str = "all-active"
    base_window: int = 64
    trace_path: Optional[str] = None

    def __post_init__(self):
        if self.topology not in _TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}, expected one of {_TOPOLOGIES}")
        if self.delay_law not in _DELAY_LAWS:
            raise ConfigError(f"unknown delay law {self.delay_law!r}, expected one of {_DELAY_LAWS}")
        if self.activity not in _ACTIVITIES:
            raise ConfigError(f"unknown activity law {self.activity!r}, expected one of {_ACTIVITIES}")
        if self.merge_period < 1:
            raise ConfigError("merge_period must be >= 1")
        if self.base_window < 1:
            raise ConfigError("base_window must be >= 1")
        if self.delay_law == "zero" and self.delay_value != 0:
            raise ConfigError("zero delay law takes no delay_value")
        if self.delay_law == "fixed" and self.delay_value < 0:
            raise ConfigError("fixed delay must be >= 0")
        if self.delay_law == "uniform" and self.delay_value < 1:
            raise ConfigError("uniform delay law needs delay_value >= 1 (exclusive bound)")
        if self.topology == "custom-trace" and not self.trace_path:
            raise ConfigError("custom-trace topology needs trace_path")

    def to_dict(self) -> dict:
        out = {"topology": self.topology, "merge_period": self.merge_period,
               "delay_law": self.delay_law, "delay_value": self.delay_value,
               "activity": self.activity, "base_window": self.base_window}
        if self.trace_path is not None:
            out["trace_path"] = self.trace_path
        return out

    @staticmethod
    def from_dict(data: dict) -> "ScheduleSpec":
        if not isinstance(data, dict):
            raise ConfigError("schedule must be an object")
        allowed = {"topology", "merge_period", "delay_law", "delay_value",
                   "activity", "base_window", "trace_path"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown schedule field(s): {sorted(unknown)}")
        if "topology" not in data:
            raise ConfigError("schedule missing field 'topology'")
        return ScheduleSpec(**data)


@dataclass(frozen=True)
class CommSchedule:
    """Realized schedule over a horizon, periodic or dense.

    Stored delays may exceed t near the start; the accessors clamp them to t so
    a requested version time is never negative. The clamped value is the
    schedule.
    """

    M: int
    horizon: int
    alpha: float
    B1: int
    B2: int
    B3: int
    coeff_table: np.ndarray      # (P, M, M) float
    delay_table: np.ndarray      # (P, M, M) int
    active_table: np.ndarray     # (P, M) bool
    period: Optional[int] = None  # None: tables are dense over the horizon

    def __post_init__(self):
        if self.M < 1 or self.horizon < 0:
            raise ConfigError("schedule needs M >= 1 and horizon >= 0")
        for name in ("B1", "B2", "B3"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError("alpha must lie in (0, 1]")
        c = np.ascontiguousarray(self.coeff_table, dtype=float)
        d = np.ascontiguousarray(self.delay_table, dtype=np.int64)
        a = np.ascontiguousarray(self.active_table, dtype=bool)
        P = self.period if self.period is not None else max(self.horizon, 1)
        if c.shape != (P, self.M, self.M) or d.shape != c.shape or a.shape != (P, self.M):
            raise ConfigError("schedule tables have inconsistent shapes")
        if np.any(c < 0.0) or np.any(d < 0):
            raise ConfigError("coefficients and delays must be nonnegative")
        for arr in (c, d, a):
            arr.flags.writeable = False
        object.__setattr__(self, "coeff_table", c)
        object.__setattr__(self, "delay_table", d)
        object.__setattr__(self, "active_table", a)

    # ---- per-tick accessors ----

    def _idx(self, t: int) -> int:
        if not (0 <= t < self.horizon):
            raise ValueError(f"tick {t} outside horizon [0, {self.horizon})")
        return t % self.period if self.period is not None else t

    def coeff(self, t: int) -> np.ndarray:
        return self.coeff_table[self._idx(t)]

    def delay(self, t: int) -> np.ndarray:
        return np.minimum(self.delay_table[self._idx(t)], t)

    def active_mask(self, t: int) -> np.ndarray:
        return self.active_table[self._idx(t)]

    def active(self, t: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.active_table[self._idx(t)]))

    def materialize(self, t0: int = 0, t1: Optional[int] = None):
        """Dense (coeff, delay, active) arrays for ticks t0..t1-1, delays clamped."""
        t1 = self.horizon if t1 is None else t1
        if not (0 <= t0 <= t1 <= self.horizon):
            raise ValueError(f"bad tick range [{t0}, {t1}) for horizon {self.horizon}")
        ts = np.arange(t0, t1)
        idx = ts % self.period if self.period is not None else ts
        coeff = self.coeff_table[idx]
        delay = np.minimum(self.delay_table[idx], ts[:, None, None])
        active = self.active_table[idx]
        return coeff, delay, active


# ---------------------------------------------------------------------------
# generation


def _merge_row(M: int, i: int, neighbors: list[int]) -> np.ndarray:
    """Uniform convex row over {i} + in-neighbors."""
    row = np.zeros(M)
    members = [i] + [j for j in neighbors if j != i]
    for j in members:
        row[j] = 1.0 / len(members)
    return row


def generate(spec: ScheduleSpec, M: int, horizon: int, seed: int) -> CommSchedule:
    """Build a schedule for the family; deterministic in (spec, M, horizon, seed).

    The declared constants are measured from the realized schedule: alpha is
    the smallest positive coefficient, B1 one more than the largest stored
    delay, B2 the smallest window width that simultaneously makes every
    window's edge union strongly connected and covers every recurring pair's
    occurrence gaps, and B3 the tightest symmetry slack (1 when the family is
    not symmetric at all, in which case the symmetry check simply fails).
    """
    if M < 1:
        raise ConfigError("M must be >= 1")
    if horizon < 0:
        raise ConfigError("horizon must be >= 0")
    if spec.topology == "custom-trace":
        return read_trace(spec.trace_path)
    if spec.topology == "random-symmetric-gossip":
        separated = spec.activity in ("round-robin", "random-subset")
        if M < 2 + (1 if separated else 0):
            raise ConfigError("gossip needs at least 2 mergeable processors per merge tick")

    p = spec.merge_period
    periods = [p]
    if spec.activity == "round-robin":
        periods.append(M)
    if spec.activity == "random-subset" or spec.delay_law == "uniform" \
            or spec.topology == "random-symmetric-gossip":
        periods.append(spec.base_window)
    P = math.lcm(*periods)

    g = np.random.Generator(np.random.Philox(key=np.array([seed, STREAM_SCHEDULE],
                                                          dtype=np.uint64)))
    coeff = np.zeros((P, M, M))
    delay = np.zeros((P, M, M), dtype=np.int64)
    active = np.zeros((P, M), dtype=bool)
    eye = np.eye(M)

    for t in range(P):
        if spec.activity == "all-active":
            act = np.ones(M, dtype=bool)
        elif spec.activity == "round-robin":
            act = np.zeros(M, dtype=bool)
            act[t % M] = True
        elif spec.activity == "random-subset":
            act = g.random(M) < 0.5
            if not act.any():
                act[t % M] = True
        else:  # none
            act = np.zeros(M, dtype=bool)
        active[t] = act

        coeff[t] = eye
        if t % p != p - 1:
            continue  # not a merge tick: identity rows everywhere

        # A processor never merges on a tick where it also descends, except in
        # the all-active family, which deliberately runs the combined iteration.
        separated = spec.activity in ("round-robin", "random-subset", "none")
        if spec.topology == "complete":
            mergers = [i for i in range(M) if not (separated and act[i])]
            for i in mergers:
                coeff[t, i] = _merge_row(M, i, list(range(M)))
        elif spec.topology == "ring":
            mergers = [i for i in range(M) if not (separated and act[i])]
            for i in mergers:
                coeff[t, i] = _merge_row(M, i, [(i - 1) % M])
        else:  # random-symmetric-gossip
            cands = [i for i in range(M) if not (separated and act[i])]
            if len(cands) >= 2:
                pair = g.choice(len(cands), size=2, replace=False)
                a_, b_ = cands[int(pair[0])], cands[int(pair[1])]
                coeff[t, a_] = _merge_row(M, a_, [b_])
                coeff[t, b_] = _merge_row(M, b_, [a_])

        # delays attach to positive off-diagonal entries only
        for i in range(M):
            for j in range(M):
                if i != j and coeff[t, i, j] > 0.0:
                    if spec.delay_law == "fixed":
                        delay[t, i, j] = spec.delay_value
                    elif spec.delay_law == "uniform":
                        delay[t, i, j] = int(g.integers(0, spec.delay_value))

    alpha = float(np.min(coeff[coeff > 0.0])) if np.any(coeff > 0.0) else 1.0
    B1 = int(np.max(delay)) + 1

    edges = _edge_masks_from_tables(coeff, M, horizon, P)
    B2 = _derive_b2(edges, M, horizon)
    B3 = _derive_b3(edges, M, horizon)

    return CommSchedule(M=M, horizon=horizon, alpha=alpha, B1=B1, B2=B2, B3=B3,
                        coeff_table=coeff, delay_table=delay, active_table=active,
                        period=P)


# ---------------------------------------------------------------------------
# edge-set machinery (bitmask per tick, bit i*M+j set when (j -> i) in E(t))


def _edge_masks_from_tables(coeff: np.ndarray, M: int, horizon: int,
                            period: Optional[int]) -> np.ndarray:
    if M * M > 64:
        raise ConfigError("edge analysis supports at most M*M = 64 directed pairs")
    P = coeff.shape[0]
    base = np.zeros(P, dtype=np.uint64)
    for t in range(P):
        bits = 0
        ci = coeff[t]
        for i in range(M):
            for j in range(M):
                if i != j and ci[i, j] > 0.0:
                    bits |= 1 << (i * M + j)
        base[t] = bits
    if period is None:
        return base[:horizon]
    reps = -(-horizon // P) if horizon else 0
    return np.tile(base, max(reps, 1))[:horizon]


def _edge_masks(schedule: CommSchedule) -> np.ndarray:
    return _edge_masks_from_tables(schedule.coeff_table, schedule.M,
                                   schedule.horizon, schedule.period)


def _strongly_connected(mask: int, M: int) -> bool:
    if M == 1:
        return True
    adj = np.zeros((M, M), dtype=np.int8)
    for i in range(M):
        for j in range(M):
            if mask & (1 << (i * M + j)):
                adj[j, i] = 1  # edge j -> i
    n, _ = connected_components(sp.csr_matrix(adj), directed=True, connection="strong")
    return n == 1


def _window_or(masks: np.ndarray, width: int) -> np.ndarray:
    """OR of every width-length window; output index = window start."""
    T = len(masks)
    if width >= T:
        return np.array([np.bitwise_or.reduce(masks)], dtype=np.uint64) if T else masks
    level = masks
    size = 1
    while size * 2 <= width:
        level = level[:-size] | level[size:]
        size *= 2
    return level[: T - width + 1] | level[width - size: T - size + 1]


def _all_windows_connected(masks: np.ndarray, width: int, M: int,
                           cache: dict[int, bool]) -> tuple[bool, Optional[int]]:
    ors = _window_or(masks, width)
    uniq = np.unique(ors)
    for mask in uniq:
        m = int(mask)
        if m not in cache:
            cache[m] = _strongly_connected(m, M)
    bad = np.array([m for m in uniq if not cache[int(m)]], dtype=np.uint64)
    if len(bad) == 0:
        return True, None
    return False, int(np.flatnonzero(np.isin(ors, bad))[0])


def _derive_b2(edges: np.ndarray, M: int, horizon: int) -> int:
    """Smallest width covering both window connectivity and recurring-pair gaps."""
    if horizon == 0 or M == 1:
        return 1
    cache: dict[int, bool] = {}
    ok_full, _ = _all_windows_connected(edges, horizon, M, cache)
    if not ok_full:
        return max(horizon, 1)  # union never connects; validation will fail A5
    lo, hi = 1, horizon
    while lo < hi:  # window connectivity is monotone in the width
        mid = (lo + hi) // 2
        ok, _ = _all_windows_connected(edges, mid, M, cache)
        if ok:
            hi = mid
        else:
            lo = mid + 1
    w_conn = lo
    w_pairs = 1
    for i in range(M):
        for j in range(M):
            if i == j:
                continue
            occ = np.flatnonzero(edges & np.uint64(1 << (i * M + j)))
            if len(occ) >= 2:
                need = max(int(occ[0]) + 1, int(np.max(np.diff(occ))),
                           horizon - int(occ[-1]))
                w_pairs = max(w_pairs, need)
    return max(w_conn, w_pairs)


def _derive_b3(edges: np.ndarray, M: int, horizon: int) -> int:
    """Tightest b with every edge mirrored within |t - tau| < b, else 1."""
    worst = 0
    for i in range(M):
        for j in range(i + 1, M):
            occ_ij = np.flatnonzero(edges & np.uint64(1 << (i * M + j)))
            occ_ji = np.flatnonzero(edges & np.uint64(1 << (j * M + i)))
            for a, b in ((occ_ij, occ_ji), (occ_ji, occ_ij)):
                if len(a) == 0:
                    continue
                if len(b) == 0:
                    return 1  # no reverse at all: symmetry cannot hold
                pos = np.searchsorted(b, a)
                left = np.where(pos > 0, np.abs(a - b[np.maximum(pos - 1, 0)]), np.iinfo(np.int64).max)
                right = np.where(pos < len(b), np.abs(b[np.minimum(pos, len(b) - 1)] - a),
                                 np.iinfo(np.int64).max)
                worst = max(worst, int(np.max(np.minimum(left, right))))
    return worst + 1


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    detail: str
    witness: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {"passed": self.passed, "detail": self.detail}
        if self.witness is not None:
            out["witness"] = self.witness
        return out


@dataclass(frozen=True)
class ValidationReport:
    checks: dict[str, CheckResult]
    asy1: bool
    asy2: bool
    passed: bool
    constants: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"checks": {k: v.to_dict() for k, v in self.checks.items()},
                "asy1": self.asy1, "asy2": self.asy2, "passed": self.passed,
                "constants": self.constants}


def validate(schedule: CommSchedule) -> ValidationReport:
    """Check every structural assumption against the declared constants.

    Produces one pass/fail per check with a witness tick on failure, declares
    which of the two assumption bundles holds (delays+combination+connectivity
    plus either bounded communication intervals or symmetric exchanges), and an
    overall verdict that additionally requires a nonempty active set per tick.
    """
    M, T = schedule.M, schedule.horizon
    coeff, delay, active = schedule.materialize()
    checks: dict[str, CheckResult] = {}

    # delays: in range, zero on the diagonal and wherever the coefficient is zero
    ok, detail, witness = True, "delays in [0, B1), diagonal and silent entries zero", None
    if T > 0:
        too_big = np.argwhere(delay >= schedule.B1)
        diag_bad = np.argwhere(delay[:, np.arange(M), np.arange(M)] != 0)
        silent_bad = np.argwhere((coeff == 0.0) & (delay != 0))
        if len(too_big):
            t, i, j = map(int, too_big[0])
            ok, detail, witness = False, "delay at or above B1", {"t": t, "i": i, "j": j,
                                                                 "delay": int(delay[t, i, j])}
        elif len(diag_bad):
            t, i = map(int, diag_bad[0])
            ok, detail, witness = False, "nonzero self-delay", {"t": t, "i": i}
        elif len(silent_bad):
            t, i, j = map(int, silent_bad[0])
            ok, detail, witness = False, "delay on a zero coefficient", {"t": t, "i": i, "j": j}
    checks["delay_bounds"] = CheckResult(ok, detail, witness)

    # convex combinations: rows sum to 1, entries either 0 or in [alpha, 1], self weight >= alpha
    ok, detail, witness = True, "rows are convex combinations with threshold alpha", None
    if T > 0:
        sums = np.sum(coeff, axis=2)
        bad_sum = np.argwhere(np.abs(sums - 1.0) > _ROW_SUM_TOL)
        pos = coeff > 0.0
        bad_small = np.argwhere(pos & (coeff < schedule.alpha - 1e-15))
        bad_big = np.argwhere(coeff > 1.0 + 1e-15)
        diag = coeff[:, np.arange(M), np.arange(M)]
        bad_diag = np.argwhere(diag < schedule.alpha - 1e-15)
        if len(bad_sum):
            t, i = map(int, bad_sum[0])
            ok, detail, witness = False, "row does not sum to 1", {"t": t, "i": i,
                                                                  "sum": float(sums[t, i])}
        elif len(bad_big):
            t, i, j = map(int, bad_big[0])
            ok, detail, witness = False, "coefficient above 1", {"t": t, "i": i, "j": j}
        elif len(bad_small):
            t, i, j = map(int, bad_small[0])
            ok, detail, witness = False, "positive coefficient below alpha", \
                {"t": t, "i": i, "j": j, "coeff": float(coeff[t, i, j])}
        elif len(bad_diag):
            t, i = map(int, bad_diag[0])
            ok, detail, witness = False, "self weight below alpha", {"t": t, "i": i,
                                                                    "coeff": float(diag[t, i])}
    checks["convex_combination"] = CheckResult(ok, detail, witness)

    edges = _edge_masks(schedule)

    # connectivity: every B2-length window's edge union is strongly connected
    ok, detail, witness = True, "every B2-window union is strongly connected", None
    if T > 0 and M > 1:
        width = min(schedule.B2, T)
        cache: dict[int, bool] = {}
        all_ok, bad_start = _all_windows_connected(edges, width, M, cache)
        if not all_ok:
            ok, detail = False, "window union not strongly connected"
            witness = {"window_start": int(bad_start), "window": width}
    checks["connectivity"] = CheckResult(ok, detail, witness)

    # bounded communication intervals: recurring pairs occur in every B2-window
    ok, detail, witness = True, "recurring pairs reappear within every B2-window", None
    single_pairs = []
    if T > 0 and M > 1:
        for i in range(M):
            for j in range(M):
                if i == j or not ok:
                    continue
                occ = np.flatnonzero(edges & np.uint64(1 << (i * M + j)))
                if len(occ) == 1:
                    single_pairs.append((j, i))
                if len(occ) < 2:
                    continue
                need = max(int(occ[0]) + 1, int(np.max(np.diff(occ))), T - int(occ[-1]))
                if need > schedule.B2:
                    ok, detail = False, "recurring pair exceeds the B2 interval"
                    witness = {"sender": j, "receiver": i, "needed_window": need}
        if ok and single_pairs:
            detail += f"; {len(single_pairs)} pair(s) occur once and are unconstrained"
    checks["bounded_intervals"] = CheckResult(ok, detail, witness)

    # symmetry: each edge is mirrored within strict distance B3
    ok, detail, witness = True, "every edge has its reverse within |t - tau| < B3", None
    if T > 0 and M > 1:
        for i in range(M):
            for j in range(i + 1, M):
                if not ok:
                    break
                occ_ij = np.flatnonzero(edges & np.uint64(1 << (i * M + j)))
                occ_ji = np.flatnonzero(edges & np.uint64(1 << (j * M + i)))
                for a, b, sender, receiver in ((occ_ij, occ_ji, j, i), (occ_ji, occ_ij, i, j)):
                    if len(a) == 0:
                        continue
                    if len(b) == 0:
                        ok, detail = False, "edge never mirrored"
                        witness = {"sender": sender, "receiver": receiver, "t": int(a[0])}
                        break
                    pos = np.searchsorted(b, a)
                    big = np.iinfo(np.int64).max
                    left = np.where(pos > 0, np.abs(a - b[np.maximum(pos - 1, 0)]), big)
                    right = np.where(pos < len(b), np.abs(b[np.minimum(pos, len(b) - 1)] - a), big)
                    nearest = np.minimum(left, right)
                    worst = int(np.argmax(nearest))
                    if nearest[worst] >= schedule.B3:
                        ok, detail = False, "mirror edge outside the B3 slack"
                        witness = {"sender": sender, "receiver": receiver, "t": int(a[worst]),
                                   "nearest_reverse_gap": int(nearest[worst])}
                        break
    checks["symmetry"] = CheckResult(ok, detail, witness)

    # at least one descent step per tick
    ok, detail, witness = True, "some processor descends at every tick", None
    if T > 0:
        idle = np.flatnonzero(~np.any(active, axis=1))
        if len(idle):
            ok, detail, witness = False, "tick with no active processor", {"t": int(idle[0])}
    checks["activity"] = CheckResult(ok, detail, witness)

    base = all(checks[k].passed for k in ("delay_bounds", "convex_combination", "connectivity"))
    asy1 = base and checks["bounded_intervals"].passed
    asy2 = base and checks["symmetry"].passed
    passed = (asy1 or asy2) and checks["activity"].passed
    constants = {"M": M, "horizon": T, "alpha": schedule.alpha,
                 "B1": schedule.B1, "B2": schedule.B2, "B3": schedule.B3,
                 "period": schedule.period}
    return ValidationReport(checks=checks, asy1=asy1, asy2=asy2, passed=passed,
                            constants=constants)


def communication_graph(schedule: CommSchedule, t: int) -> list[tuple[int, int]]:
    """Directed edges (sender, receiver) present at tick t, sorted."""
    c = schedule.coeff(t)
    M = schedule.M
    return sorted((j, i) for i in range(M) for j in range(M)
                  if i != j and c[i, j] > 0.0)


# ---------------------------------------------------------------------------
# trace round-trip (JSONL, one record per tick, plus a leading meta record)


def write_trace(schedule: CommSchedule, path: str) -> None:
    meta = {"meta": {"M": schedule.M, "horizon": schedule.horizon,
                     "alpha": schedule.alpha, "B1": schedule.B1,
                     "B2": schedule.B2, "B3": schedule.B3}}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta) + "\n")
        for t in range(schedule.horizon):
            rec = {"t": t,
                   "coeff": [[float(v) for v in row] for row in schedule.coeff(t)],
                   "delay": [[int(v) for v in row] for row in schedule.delay(t)],
                   "active": [int(i) for i in schedule.active(t)]}
            fh.write(json.dumps(rec) + "\n")


def read_trace(path: str) -> CommSchedule:
    """Read a dense schedule from JSONL; constants come from the meta record
    when present and are measured from the trace otherwise."""
    records = []
    meta = None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}:{line_no}: invalid JSON") from exc
                if "meta" in obj:
                    meta = obj["meta"]
                else:
                    records.append((line_no, obj))
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc}") from exc
    if not records:
        raise ConfigError(f"{path}: trace has no tick records")

    first = records[0][1]
    if "coeff" not in first or "t" not in first:
        raise ConfigError(f"{path}: tick records need fields t, coeff, delay, active")
    M = len(first["coeff"])
    T = len(records)
    coeff = np.zeros((T, M, M))
    delay = np.zeros((T, M, M), dtype=np.int64)
    active = np.zeros((T, M), dtype=bool)
    for k, (line_no, rec) in enumerate(records):
        missing = {"t", "coeff", "delay", "active"} - set(rec)
        if missing:
            raise ConfigError(f"{path}:{line_no}: record missing field(s) {sorted(missing)}")
        if rec["t"] != k:
            raise ConfigError(f"{path}:{line_no}: expected t={k}, got t={rec['t']}")
        c = np.asarray(rec["coeff"], dtype=float)
        d = np.asarray(rec["delay"], dtype=np.int64)
        if c.shape != (M, M) or d.shape != (M, M):
            raise ConfigError(f"{path}:{line_no}: coeff/delay must be {M}x{M}")
        coeff[k], delay[k] = c, d
        for i in rec["active"]:
            if not (0 <= int(i) < M):
                raise ConfigError(f"{path}:{line_no}: active index {i} out of range")
            active[k, int(i)] = True

    if meta is not None:
        alpha, B1 = float(meta["alpha"]), int(meta["B1"])
        B2, B3 = int(meta["B2"]), int(meta["B3"])
    else:
        alpha = float(np.min(coeff[coeff > 0.0])) if np.any(coeff > 0.0) else 1.0
        B1 = int(np.max(delay)) + 1
        edges = _edge_masks_from_tables(coeff, M, T, None)
        B2 = _derive_b2(edges, M, T)
        B3 = _derive_b3(edges, M, T)
    return CommSchedule(M=M, horizon=T, alpha=alpha, B1=B1, B2=B2, B3=B3,
                        coeff_table=coeff, delay_table=delay, active_table=active,
                        period=None)
