"""Delayed averaging: the agreement iteration, its impulse weights, and limits.

The merge half of the distributed iteration is linear: every version at time t
is a convex-ish combination of the initial versions and the descent terms
injected so far. The weights are obtained constructively by driving the same
iteration with unit impulses. Under the connectivity and threshold assumptions
the weight of an impulse converges, as the evaluation time grows, to a value
independent of the receiving processor; those limits define the agreement
vector, the sequence a virtual single processor would follow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .schedule import CommSchedule

__all__ = [
    "AgreementState",
    "agreement_step",
    "merged_versions",
    "PhiTable",
    "PhiLimits",
    "compute_phi",
    "phi_response_series",
    "estimate_phi_limits",
    "phi_limit_series",
    "agreement_vector",
]


def merged_versions(coeff: np.ndarray, delay: np.ndarray, ring: np.ndarray,
                    t: int) -> np.ndarray:
    """One merge: out[i] = sum_j coeff[i,j] * version of j at time t - delay[i,j].

    ring holds the last B versions, slot u % B for time u; delays must already
    be clamped to t (schedule accessors do this), so every read lands on a
    written slot.
    """
    B = ring.shape[0]
    slots = (t - delay) % B
    senders = np.arange(ring.shape[1])[None, :]
    gathered = ring[slots, senders]            # (M, M, D): [i, j] = delayed version of j
    return np.einsum("ij,ijd->id", coeff, gathered)


@dataclass(frozen=True)
class AgreementState:
    """Versions of all processors with their recent history ring.

    ring has shape (depth, M, D) with depth >= the schedule's delay bound;
    slot u % depth holds the versions computed at time u.
    """

    ring: np.ndarray
    t: int

    @staticmethod
    def initial(x0: np.ndarray, depth: int) -> "AgreementState":
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim != 2:
            raise ValueError("initial versions must have shape (M, D)")
        if depth < 1:
            raise ValueError("ring depth must be >= 1")
        ring = np.zeros((depth, x0.shape[0], x0.shape[1]))
        ring[0] = x0
        return AgreementState(ring=ring, t=0)

    @property
    def depth(self) -> int:
        return self.ring.shape[0]

    def current(self) -> np.ndarray:
        return self.ring[self.t % self.depth]


def agreement_step(state: AgreementState, schedule: CommSchedule) -> AgreementState:
    """Advance the pure merge iteration by one tick (no descent terms)."""
    if state.depth < schedule.B1:
        raise ValueError(f"ring depth {state.depth} below delay bound {schedule.B1}")
    t = state.t
    new = merged_versions(schedule.coeff(t), schedule.delay(t), state.ring, t)
    ring = state.ring.copy()
    ring[(t + 1) % state.depth] = new
    return AgreementState(ring=ring, t=t + 1)


# ---------------------------------------------------------------------------
# impulse responses


class _Extended:
    """Schedule accessor that continues past the horizon by periodic extension.

    Impulse limits depend on the schedule's future; a finite trace is extended
    by cycling (its declared period, or the whole trace when dense).
    """

    def __init__(self, schedule: CommSchedule):
        self.P = schedule.period if schedule.period is not None else max(schedule.horizon, 1)
        self._coeff = schedule.coeff_table
        self._delay = schedule.delay_table

    def coeff(self, u: int) -> np.ndarray:
        return self._coeff[u % self.P]

    def delay(self, u: int) -> np.ndarray:
        return np.minimum(self._delay[u % self.P], u)


def _impulse_ring(M: int, depth: int, tau: int) -> np.ndarray:
    ring = np.zeros((depth, M, M))
    ring[(tau + 1) % depth] = np.eye(M)
    return ring


def phi_response_series(schedule: CommSchedule, tau: int, t_end: int) -> np.ndarray:
    """Impulse weights phi(u, tau) for u = tau+1 .. t_end, shape (t_end-tau, M, M).

    Entry [k, i, j] is the weight processor i's version at time tau+1+k puts on
    the unit injected at processor j at tick tau (tau = -1 probes the initial
    versions). Uses only in-horizon ticks.
    """
    if not (-1 <= tau < t_end <= schedule.horizon):
        raise ValueError(f"need -1 <= tau < t_end <= horizon, got tau={tau}, t_end={t_end}")
    M = schedule.M
    depth = max(schedule.B1, 1)
    ring = _impulse_ring(M, depth, tau)
    out = np.empty((t_end - tau, M, M))
    out[0] = ring[(tau + 1) % depth]
    for u in range(tau + 1, t_end):
        new = merged_versions(schedule.coeff(u), schedule.delay(u), ring, u)
        ring[(u + 1) % depth] = new
        out[u - tau] = new
    return out


@dataclass(frozen=True)
class PhiTable:
    """All impulse weights evaluated at one time t.

    phi[k, i, j] = weight of the impulse at tick tau = k - 1 (k = 0 is the
    initial-version probe) in processor i's version at time t.
    """

    t: int
    phi: np.ndarray  # (t + 1, M, M)

    @property
    def M(self) -> int:
        return self.phi.shape[1]

    def at(self, tau: int) -> np.ndarray:
        if not (-1 <= tau < self.t):
            raise ValueError(f"tau must lie in [-1, {self.t}), got {tau}")
        return self.phi[tau + 1]

    def to_records(self) -> list[dict]:
        M = self.M
        return [{"t": self.t, "tau": k - 1, "i": i, "j": j,
                 "value": float(self.phi[k, i, j])}
                for k in range(self.phi.shape[0]) for i in range(M) for j in range(M)]


def compute_phi(schedule: CommSchedule, t: int) -> PhiTable:
    """Impulse weights at time t for every injection tick tau in [-1, t)."""
    if not (0 <= t <= schedule.horizon):
        raise ValueError(f"t must lie in [0, horizon], got {t}")
    M = schedule.M
    depth = max(schedule.B1, 1)
    phi = np.empty((t + 1, M, M))
    for tau in range(-1, t):
        ring = _impulse_ring(M, depth, tau)
        if t == tau + 1:
            phi[tau + 1] = ring[(tau + 1) % depth]
            continue
        for u in range(tau + 1, t):
            ring[(u + 1) % depth] = merged_versions(schedule.coeff(u), schedule.delay(u),
                                                    ring, u)
        phi[tau + 1] = ring[t % depth]
    return PhiTable(t=t, phi=phi)


def phi_family(schedule: CommSchedule, t_end: int) -> np.ndarray:
    """Impulse weights phi(t, tau) for every 0 <= t <= t_end, -1 <= tau < t.

    Returns F of shape (t_end + 1, t_end + 1, M, M): F[t, k, i, j] is the
    weight processor i's version at time t puts on the unit injected at
    processor j at tick tau = k - 1 (k = 0 probes the initial versions).
    Entries with tau >= t are zero.

    All injections ride along as extra columns of one joint linear iteration,
    so the whole family costs a single pass over the schedule; the arithmetic
    per block matches the one-injection runs exactly.
    """
    if not (0 <= t_end <= schedule.horizon):
        raise ValueError(f"t_end must lie in [0, horizon], got {t_end}")
    M = schedule.M
    n_tau = t_end + 1
    if n_tau * n_tau * M * M > 2**24:
        raise ValueError("phi family would exceed the in-memory budget; "
                         "query single times with compute_phi instead")
    depth = max(schedule.B1, 1)
    eye = np.eye(M)
    ring = np.zeros((depth, M, n_tau * M))
    ring[0, :, :M] = eye
    out = np.empty((t_end + 1, M, n_tau * M))
    out[0] = ring[0]
    for u in range(t_end):
        new = merged_versions(schedule.coeff(u), schedule.delay(u), ring, u)
        b0 = (u + 1) * M
        new[:, b0:b0 + M] = eye           # tau = u is injected at time u + 1
        ring[(u + 1) % depth] = new
        out[u + 1] = new
    return out.reshape(t_end + 1, M, n_tau, M).transpose(0, 2, 1, 3).copy()


# ---------------------------------------------------------------------------
# limits


@dataclass(frozen=True)
class PhiLimits:
    """Limit weights with the geometric-approach fit.

    phi_star[k, j] is the limit weight of sender j's impulse at tau = k - 1
    (row 0 is the initial-version probe). The residual model
    |phi(t, tau)[i, j] - phi_star[tau, j]| <= A_hat * rho_hat**(t - tau)
    uses a least-squares slope and an envelope intercept, so it holds on all
    residuals it was fitted to. resolved is False when the spread across
    receivers never fell below the tolerance (limits unresolved); a slope fit
    that does not contract reports rho_hat >= 1 rather than raising.
    """

    phi_star: np.ndarray          # (n_taus, M)
    taus: np.ndarray              # (n_taus,) injection ticks, starting at -1
    A_hat: float
    rho_hat: float
    eta_hat: float
    resolved: bool
    unresolved_taus: tuple = ()

    def star(self, tau: int) -> np.ndarray:
        k = int(tau) - int(self.taus[0])
        if not (0 <= k < len(self.taus)):
            raise ValueError(f"no limit stored for tau={tau}")
        return self.phi_star[k]


def _fit_geometric(gaps: np.ndarray, resids: np.ndarray,
                   floor: float = 1e-14) -> tuple[float, float]:
    """(A_hat, rho_hat) with LS slope on log-residuals and envelope intercept."""
    keep = resids > floor
    if not np.any(keep):
        return 0.0, 0.0
    g = gaps[keep].astype(float)
    r = np.log(resids[keep])
    if len(np.unique(g)) < 2:
        rho = 1.0
    else:
        slope = np.polyfit(g, r, 1)[0]
        rho = float(np.exp(slope))
    if rho >= 1.0 or rho <= 0.0:
        # no contraction measurable: envelope with a flat rate
        return float(np.max(resids[keep])), max(rho, 1.0)
    a = float(np.max(resids[keep] / rho ** g))
    return a, rho


def estimate_phi_limits(tables: Sequence[PhiTable], spread_tol: float = 1e-9,
                        resid_floor: float = 1e-14) -> PhiLimits:
    """Limits from impulse tables at several evaluation times.

    Needs at least three distinct t values. The limit for each (tau, sender)
    is the receiver average at the largest t, accepted when the spread across
    receivers is below spread_tol; otherwise that tau is flagged unresolved.
    """
    if len(tables) < 3:
        raise ValueError("need tables at >= 3 distinct t values")
    ts = [tb.t for tb in tables]
    if len(set(ts)) != len(ts):
        raise ValueError("tables must have distinct t values")
    tables = sorted(tables, key=lambda tb: tb.t)
    last = tables[-1]
    M = last.M
    n_common = min(tb.phi.shape[0] for tb in tables)  # taus shared by all tables
    taus = np.arange(-1, n_common - 1)

    phi_star = np.mean(last.phi[:n_common], axis=1)           # (n_common, M)
    spread = np.max(last.phi[:n_common], axis=1) - np.min(last.phi[:n_common], axis=1)
    unresolved = np.flatnonzero(np.max(spread, axis=1) >= spread_tol)
    resolved_mask = np.ones(n_common, dtype=bool)
    resolved_mask[unresolved] = False

    gaps, resids = [], []
    for tb in tables:
        k = np.flatnonzero(resolved_mask)
        if len(k) == 0:
            break
        diff = np.abs(tb.phi[k] - phi_star[k][:, None, :])    # (n_res, M, M)
        gap = tb.t - (k - 1)                                   # t - tau per row
        gaps.append(np.repeat(gap, M * M))
        resids.append(diff.reshape(-1))
    if gaps:
        a_hat, rho_hat = _fit_geometric(np.concatenate(gaps), np.concatenate(resids),
                                        floor=resid_floor)
    else:
        a_hat, rho_hat = 0.0, 1.0
    eta = float(np.min(phi_star[resolved_mask])) if resolved_mask.any() else math.nan
    return PhiLimits(phi_star=phi_star, taus=taus, A_hat=a_hat, rho_hat=rho_hat,
                     eta_hat=eta, resolved=len(unresolved) == 0,
                     unresolved_taus=tuple(int(taus[u]) for u in unresolved))


@dataclass(frozen=True)
class PhiLimitSeries:
    """Limit weights for every injection tick of a run, plus the fitted rate.

    phi_init[j] weights the initial versions; phi[tau, j] weights the descent
    term of processor j at tick tau. Periodic schedules are computed on a base
    block and tiled; dense schedules are computed per tick.
    """

    phi_init: np.ndarray      # (M,)
    phi: np.ndarray           # (T, M)
    A_hat: float
    rho_hat: float
    eta_hat: float
    resolved: bool
    max_spread: float

    def weights_at(self, tau: int) -> np.ndarray:
        return self.phi_init if tau == -1 else self.phi[tau]


def _impulse_limit(ext: _Extended, M: int, depth: int, tau: int, spread_tol: float,
                   max_run: int) -> tuple[np.ndarray, float, np.ndarray, bool]:
    """Run one impulse to consensus; returns (limit, spread, trajectory, ok)."""
    ring = _impulse_ring(M, depth, tau)
    traj = [ring[(tau + 1) % depth].copy()]
    spread = math.inf
    u = tau + 1
    while u - tau <= max_run:
        x = merged_versions(ext.coeff(u), ext.delay(u), ring, u)
        ring[(u + 1) % depth] = x
        traj.append(x)
        spread = float(np.max(np.max(x, axis=0) - np.min(x, axis=0)))
        u += 1
        if spread < spread_tol:
            break
    x_final = ring[u % depth]
    limit = np.mean(x_final, axis=0)
    return limit, spread, np.array(traj), spread < spread_tol


def phi_limit_series(schedule: CommSchedule, horizon: Optional[int] = None,
                     spread_tol: float = 1e-12, max_run: int = 20000) -> PhiLimitSeries:
    """Limit weights for all injection ticks tau in [-1, horizon).

    For a periodic schedule the limits for tau and tau + period coincide once
    tau clears the startup delay clamp, so only one base block is run and the
    rest is tiled. The geometric fit pools every recorded residual of the base
    runs: least-squares slope, envelope intercept.
    """
    T = schedule.horizon if horizon is None else horizon
    M = schedule.M
    depth = max(schedule.B1, 1)
    ext = _Extended(schedule)

    if schedule.period is not None and T > 0:
        P = schedule.period
        tau0 = P * math.ceil(max(schedule.B1, 1) / P)
        direct_hi = min(tau0 + P, T)
    else:
        direct_hi = T

    phi_init = np.zeros(M)
    phi = np.zeros((T, M))
    gaps, resids = [], []
    worst_spread = 0.0
    all_ok = True

    for tau in range(-1, direct_hi):
        limit, spread, traj, ok = _impulse_limit(ext, M, depth, tau, spread_tol, max_run)
        worst_spread = max(worst_spread, spread)
        all_ok = all_ok and ok
        if tau == -1:
            phi_init = limit
        else:
            phi[tau] = limit
        resid = np.abs(traj - limit[None, None, :])
        gap = np.arange(1, traj.shape[0] + 1)
        gaps.append(np.repeat(gap, M * M))
        resids.append(resid.reshape(-1))

    if T > direct_hi:  # tile the periodic block
        P = schedule.period
        for tau in range(direct_hi, T):
            phi[tau] = phi[tau0 + (tau - tau0) % P]

    a_hat, rho_hat = _fit_geometric(np.concatenate(gaps), np.concatenate(resids)) \
        if gaps else (0.0, 0.0)
    used = np.concatenate([phi_init[None, :], phi[:direct_hi]]) if direct_hi > 0 \
        else phi_init[None, :]
    eta = float(np.min(used))
    return PhiLimitSeries(phi_init=phi_init, phi=phi, A_hat=a_hat, rho_hat=rho_hat,
                          eta_hat=eta, resolved=all_ok, max_spread=worst_spread)


# ---------------------------------------------------------------------------
# agreement vector


def agreement_vector(limits: PhiLimitSeries, initial: np.ndarray,
                     descent: Optional[np.ndarray], t: int) -> np.ndarray:
    """The virtual consensus trajectory at time t.

    initial has shape (M, ...); descent, when given, has shape (T, M, ...)
    holding each processor's descent term per tick (zeros when idle). Satisfies
    the recursion w*(t+1) = w*(t) + sum_j phi[t, j] * descent[t, j] by
    construction of the incremental sum.
    """
    initial = np.asarray(initial, dtype=float)
    M = initial.shape[0]
    shape = initial.shape[1:]
    flat0 = initial.reshape(M, -1)
    out = limits.phi_init @ flat0
    if t > 0:
        if descent is None:
            raise ValueError("descent history required for t > 0")
        descent = np.asarray(descent, dtype=float)
        if descent.shape[0] < t or descent.shape[1] != M:
            raise ValueError("descent history must cover (t, M, ...)")
        flat_s = descent[:t].reshape(t, M, -1)
        for tau in range(t):
            out = out + limits.phi[tau] @ flat_s[tau]
    return out.reshape(shape)
