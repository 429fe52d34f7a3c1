"""Run diagnostics: the agreement trajectory, perturbation sums, and bounds.

Everything here is a pure post-pass over run artifacts. The expensive parts
(distortion and gradient evaluations against the reference batch) are batched
in chunks of a few hundred quantizers so a two-hundred-thousand-tick run stays
inside a coffee break; the per-tick bookkeeping (agreement recursion,
perturbation partial sums) is a single chronological sweep over the event log.

Cumulative columns follow one convention: the value reported at tick t sums
contributions of ticks tau < t, matching the agreement recursion whose value
at t is built from descents strictly before t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .agreement import AgreementState, PhiLimitSeries, agreement_step
from .baselines import BaselineRun
from .engine import RunArtifacts, _total_active
from .geometry import SampleBatch, min_component_separation
from .schedule import CommSchedule

__all__ = [
    "theta",
    "theta_series",
    "batched_cell_stats",
    "dense_descent",
    "RunMetrics",
    "compute_metrics",
    "consensus_decay",
    "estimate_lipschitz",
    "ConvergenceReport",
    "summarize",
    "CSV_COLUMNS",
]


# ---------------------------------------------------------------------------
# the step-weight tail sum


def theta(t: int, rho: float) -> float:
    """Direct evaluation of sum_{tau=-1}^{t-1} rho**(t - tau) / (tau or 1)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if rho < 0.0:
        raise ValueError("rho must be >= 0")
    if t == 0:
        return rho
    tau = np.arange(-1, t)
    terms = rho ** (t - tau).astype(float) / np.maximum(tau, 1)
    return float(np.sum(terms))


def theta_series(n: int, rho: float) -> np.ndarray:
    """theta for t = 0 .. n-1 through the recurrence
    theta_{t+1} = rho * theta_t + rho / (t or 1), theta_0 = rho."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if rho < 0.0:
        raise ValueError("rho must be >= 0")
    if n == 0:
        return np.zeros(0)
    x = np.empty(n)
    x[0] = rho
    if n > 1:
        x[1:] = rho / np.maximum(np.arange(n - 1), 1)
    return lfilter([1.0], [1.0, -rho], x)


# ---------------------------------------------------------------------------
# batched distortion / gradient evaluation


_POINT_BLOCK = 320


def batched_cell_stats(W: np.ndarray, batch: SampleBatch) -> tuple[np.ndarray, np.ndarray]:
    """Empirical distortion and gradient for a stack of quantizers at once.

    W has shape (C, kappa, dim); returns (distortion (C,), gradient
    (C, kappa, dim)) against the batch, identical up to float noise to the
    per-quantizer evaluators, at a fraction of their cost.

    Assignments minimize |w|^2 - 2 z.w; the per-point |z|^2 shifts every
    column equally, so it is added back only in the distortion. Points are
    processed in cache-sized blocks: the (block, C * kappa) score matrix is
    the bandwidth hot spot, and keeping it small roughly halves the wall
    time of a long metrics sweep.
    """
    C, kappa, dim = W.shape
    comps = W.reshape(C * kappa, dim)
    w_sq = np.einsum("kd,kd->k", comps, comps)
    neg2 = -2.0 * batch.points
    n = batch.n
    col = kappa * np.arange(C)[None, :]
    counts = np.zeros(C * kappa)
    sums = np.zeros((C * kappa, dim))
    tot = np.zeros(C)
    for p0 in range(0, n, _POINT_BLOCK):
        p1 = min(p0 + _POINT_BLOCK, n)
        score = neg2[p0:p1] @ comps.T
        score += w_sq[None, :]
        s3 = score.reshape(p1 - p0, C, kappa)
        assign = np.argmin(s3, axis=2)                          # (block, C)
        rmin = np.take_along_axis(s3, assign[:, :, None], axis=2)[:, :, 0]
        tot += np.maximum(batch._sq_norms[p0:p1, None] + rmin, 0.0).sum(axis=0)
        flat = (assign + col).ravel(order="F")
        counts += np.bincount(flat, minlength=C * kappa)
        for k in range(dim):
            sums[:, k] += np.bincount(flat, weights=np.tile(batch.points[p0:p1, k], C),
                                      minlength=C * kappa)
    dist = 0.5 * tot / n
    grad = (counts[:, None] * comps - sums) / n
    return dist, grad.reshape(C, kappa, dim)


def _stats_chunked(W: np.ndarray, batch: SampleBatch,
                   chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """batched_cell_stats over an arbitrarily long stack, bounded memory."""
    dists, grads = [], []
    for b in range(0, len(W), chunk):
        d, g = batched_cell_stats(W[b:b + chunk], batch)
        dists.append(d)
        grads.append(g)
    if not dists:
        kappa, dim = W.shape[1:]
        return np.zeros(0), np.zeros((0, kappa, dim))
    return np.concatenate(dists), np.concatenate(grads)


def dense_descent(art: RunArtifacts, max_entries: int = 2**22) -> np.ndarray:
    """Descent history as a dense (horizon, M, width) array; small runs only."""
    cfg = art.config
    total = cfg.horizon * cfg.M * cfg.width
    if total > max_entries:
        raise ValueError(f"dense descent history would hold {total} floats; "
                         "use the event log directly for long runs")
    out = np.zeros((cfg.horizon, cfg.M, cfg.width))
    ev = art.events
    wb = ev.w_before.reshape(ev.n, cfg.kappa, cfg.dim)
    for k in range(ev.n):
        comp = int(ev.comp[k])
        lo = comp * cfg.dim
        s = -ev.eps[k] * (wb[k, comp] - ev.z[k])
        out[ev.t[k], ev.proc[k], lo:lo + cfg.dim] = s
    return out


# ---------------------------------------------------------------------------
# the metrics sweep


CSV_COLUMNS = ("t", "consensus_gap", "agreement_gap", "bound_normmaj",
               "distortion_star", "grad_norm_star", "eps_star", "min_sep_star",
               "sum_eps_grad2", "sum_dm1", "dm2_partial_norm")

_BOUND_SAFETY = 1.1


@dataclass(frozen=True)
class RunMetrics:
    """Per-recorded-tick series plus whole-run scalars from one sweep."""

    times: np.ndarray
    consensus_gap: np.ndarray
    agreement_gap: np.ndarray
    bound_normmaj: np.ndarray
    distortion_star: np.ndarray
    grad_norm_star: np.ndarray
    eps_star: np.ndarray
    min_sep_star: np.ndarray
    sum_eps_grad2: np.ndarray
    sum_dm1: np.ndarray
    dm2_partial_norm: np.ndarray
    dm2_envelope: np.ndarray
    w_star_rec: np.ndarray            # (n_rec, width)
    eps_ratio_min: float              # min over active ticks of eps_star * (t or 1)
    eps_ratio_min_t: int
    eps_ratio_max: float
    eps_ratio_max_t: int
    eps_star_total: float
    mart_mean_norm: float             # unscaled increment sample mean
    mart_sigma: float
    mart_n: int

    def to_csv(self, path: str) -> None:
        """Shortest round-trip decimal floats; byte-stable across runs."""
        cols = [getattr(self, c) for c in CSV_COLUMNS[1:]]
        with open(path, "w") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for k, t in enumerate(self.times):
                row = [str(int(t))] + [repr(float(c[k])) for c in cols]
                fh.write(",".join(row) + "\n")


def compute_metrics(art: RunArtifacts, limits: PhiLimitSeries, chunk: int = 256,
                    mart_samples: int = 10000) -> RunMetrics:
    """One chronological sweep computing every diagnostic series.

    Needs the run's event log; the agreement trajectory is rebuilt tick by
    tick from the limit weights and each descent event, and all distortion or
    gradient evaluations go through the batched kernel.
    """
    cfg = art.config
    T, M, kappa, dim, D = cfg.horizon, cfg.M, cfg.kappa, cfg.dim, cfg.width
    ev = art.events
    if ev.n != _total_active(art.schedule, T):
        raise ValueError("metrics require a run recorded with events")
    batch = art.batch
    diam = batch.diameter

    # per-event quantities
    wb = ev.w_before.reshape(ev.n, kappa, dim)
    wb_comp = wb[np.arange(ev.n), ev.comp]                     # (n_ev, dim)
    s_evt = -ev.eps[:, None] * (wb_comp - ev.z)                # descent rows
    phi_evt = limits.phi[ev.t, ev.proc] if ev.n else np.zeros(0)
    coef_evt = phi_evt * ev.eps

    eps_star_all = np.zeros(max(T, 1))
    n_active = np.zeros(max(T, 1))
    if ev.n:
        np.add.at(eps_star_all, ev.t, coef_evt)
        np.add.at(n_active, ev.t, 1.0)
    starts = np.searchsorted(ev.t, np.arange(T + 1))

    # martingale increment sampling: evenly spaced over the event log
    n_s = min(mart_samples, ev.n)
    smask = np.zeros(ev.n, dtype=bool)
    if n_s:
        smask[np.unique(np.linspace(0, ev.n - 1, n_s).astype(int))] = True
    n_s = int(smask.sum())
    mart_rows = np.empty((n_s, D))
    mart_cursor = 0

    times = art.snap_times
    n_rec = len(times)
    rec_of = {int(t): k for k, t in enumerate(times)}
    out = {name: np.zeros(n_rec) for name in CSV_COLUMNS[1:]}
    w_star_rec = np.empty((n_rec, D))

    theta_all = theta_series(T + 1, limits.rho_hat)
    bound_coef = math.sqrt(kappa) * M * diam * (_BOUND_SAFETY * limits.A_hat) * art.K2

    tick_w = np.maximum(np.arange(max(T, 1)), 1).astype(float)
    env_cum = np.cumsum(n_active / tick_w**2)
    env_coef = 4.0 * kappa * diam**2 * art.K2**2

    w_star = limits.phi_init @ art.x0
    run_dm1 = np.zeros(D)
    run_dm2 = np.zeros(D)
    run_seg = 0.0

    for b0 in range(0, T, chunk):
        b1 = min(b0 + chunk, T)
        L = b1 - b0
        W = np.empty((L, D))
        for t in range(b0, b1):
            W[t - b0] = w_star
            for e in range(starts[t], starts[t + 1]):
                lo = int(ev.comp[e]) * dim
                w_star[lo:lo + dim] += phi_evt[e] * s_evt[e]

        dist_b, grad_b = batched_cell_stats(W.reshape(L, kappa, dim), batch)
        gn2_b = np.einsum("ckd,ckd->c", grad_b, grad_b)
        seg_b = np.cumsum(eps_star_all[b0:b1] * gn2_b)

        e0, e1 = int(starts[b0]), int(starts[b1])
        E = e1 - e0
        if E:
            _, h_evt = batched_cell_stats(wb[e0:e1], batch)
            h_star_evt = grad_b[ev.t[e0:e1] - b0]
            inc = h_evt.copy()                                  # h - H per event
            inc[np.arange(E), ev.comp[e0:e1]] -= wb_comp[e0:e1] - ev.z[e0:e1]
            sel = np.flatnonzero(smask[e0:e1])
            if len(sel):
                mart_rows[mart_cursor:mart_cursor + len(sel)] = \
                    inc[sel].reshape(len(sel), D)
                mart_cursor += len(sel)
            cview = coef_evt[e0:e1][:, None, None]
            dm1_flat = (cview * (h_star_evt - h_evt)).reshape(E, D)
            dm2_flat = (cview * inc).reshape(E, D)
            cs1 = np.cumsum(dm1_flat, axis=0)
            cs2 = np.cumsum(dm2_flat, axis=0)

        for t in range(b0, b1):
            k = rec_of.get(t)
            if k is None:
                continue
            w_star_rec[k] = W[t - b0]
            out["distortion_star"][k] = dist_b[t - b0]
            out["grad_norm_star"][k] = math.sqrt(gn2_b[t - b0])
            out["eps_star"][k] = eps_star_all[t]
            out["sum_eps_grad2"][k] = run_seg + (seg_b[t - b0 - 1] if t > b0 else 0.0)
            p = int(starts[t]) - e0
            v1 = run_dm1 + (cs1[p - 1] if (E and p > 0) else 0.0)
            v2 = run_dm2 + (cs2[p - 1] if (E and p > 0) else 0.0)
            out["sum_dm1"][k] = float(np.linalg.norm(v1))
            out["dm2_partial_norm"][k] = float(np.linalg.norm(v2))

        run_seg += float(seg_b[-1]) if L else 0.0
        if E:
            run_dm1 += cs1[-1]
            run_dm2 += cs2[-1]

    # final recorded tick (the horizon itself)
    k = rec_of[T]
    w_star_rec[k] = w_star
    dist_f, grad_f = batched_cell_stats(w_star.reshape(1, kappa, dim), batch)
    out["distortion_star"][k] = dist_f[0]
    out["grad_norm_star"][k] = float(np.linalg.norm(grad_f))
    out["eps_star"][k] = 0.0
    out["sum_eps_grad2"][k] = run_seg
    out["sum_dm1"][k] = float(np.linalg.norm(run_dm1))
    out["dm2_partial_norm"][k] = float(np.linalg.norm(run_dm2))

    # series that need no sweep
    snaps = art.snapshots
    diffs = snaps[:, :, None, :] - snaps[:, None, :, :]
    out["consensus_gap"][:] = np.sqrt(np.einsum("kijd,kijd->kij", diffs, diffs)) \
        .max(axis=(1, 2))
    dev = snaps - w_star_rec[:, None, :]
    out["agreement_gap"][:] = np.sqrt(np.einsum("kid,kid->ki", dev, dev)).max(axis=1)
    out["bound_normmaj"][:] = bound_coef * theta_all[times]
    out["min_sep_star"][:] = [min_component_separation(w.reshape(kappa, dim))
                              if kappa > 1 else math.inf for w in w_star_rec]
    env = np.zeros(n_rec)
    pos = times > 0
    env[pos] = np.sqrt(env_coef * env_cum[times[pos] - 1])

    # step-weight ratio bounds over active ticks
    act = np.flatnonzero(n_active > 0)
    if len(act):
        ratios = eps_star_all[act] * tick_w[act]
        i_min, i_max = int(np.argmin(ratios)), int(np.argmax(ratios))
        r_min, t_min = float(ratios[i_min]), int(act[i_min])
        r_max, t_max = float(ratios[i_max]), int(act[i_max])
    else:
        r_min = r_max = 0.0
        t_min = t_max = -1
    mart = mart_rows[:mart_cursor]
    if len(mart):
        mean = mart.mean(axis=0)
        mart_mean_norm = float(np.linalg.norm(mean))
        mart_sigma = float(np.sqrt(np.mean(np.sum((mart - mean)**2, axis=1))))
    else:
        mart_mean_norm = mart_sigma = 0.0

    return RunMetrics(times=times, w_star_rec=w_star_rec,
                      dm2_envelope=env,
                      eps_ratio_min=r_min, eps_ratio_min_t=t_min,
                      eps_ratio_max=r_max, eps_ratio_max_t=t_max,
                      eps_star_total=float(np.sum(eps_star_all)),
                      mart_mean_norm=mart_mean_norm, mart_sigma=mart_sigma,
                      mart_n=len(mart), **out)


# ---------------------------------------------------------------------------
# merge-only decay and Lipschitz probe


def _spread(x: np.ndarray) -> float:
    d = x[:, None, :] - x[None, :, :]
    return float(np.sqrt(np.einsum("ijd,ijd->ij", d, d)).max())


def consensus_decay(schedule: CommSchedule, x0: np.ndarray,
                    horizon: Optional[int] = None) -> tuple[np.ndarray, float]:
    """Spread of the pure merge iteration per tick, with a fitted decay rate.

    Returns (gaps over ticks 0..T, rho_fit); rho_fit is the least-squares
    per-tick rate on ticks whose spread exceeds 1e-14, and 0.0 when fewer
    than three such ticks exist (consensus reached essentially at once).
    """
    T = schedule.horizon if horizon is None else horizon
    state = AgreementState.initial(x0, max(schedule.B1, 1))
    gaps = np.empty(T + 1)
    gaps[0] = _spread(state.current())
    for _ in range(T):
        state = agreement_step(state, schedule)
        gaps[state.t] = _spread(state.current())
    pos = np.flatnonzero(gaps > 1e-14)
    if len(pos) < 3:
        return gaps, 0.0
    slope = np.polyfit(pos.astype(float), np.log(gaps[pos]), 1)[0]
    return gaps, float(np.exp(slope))


def estimate_lipschitz(art: RunArtifacts, metrics: RunMetrics) -> float:
    """Largest observed ratio ||h(a) - h(b)|| / ||a - b|| over the run's own
    recorded quantizers paired with the agreement trajectory."""
    cfg = art.config
    kappa, dim = cfg.kappa, cfg.dim
    n_rec, M = art.snapshots.shape[0], cfg.M
    A = art.snapshots.reshape(n_rec * M, kappa, dim)
    _, hA = _stats_chunked(A, art.batch)
    _, hS = _stats_chunked(metrics.w_star_rec.reshape(n_rec, kappa, dim), art.batch)
    best = 0.0
    floor = 1e-9 * art.batch.diameter
    for k in range(n_rec):
        for i in range(M):
            dw = float(np.linalg.norm(A[k * M + i] - metrics.w_star_rec[k].reshape(kappa, dim)))
            if dw <= floor:
                continue
            dh = float(np.linalg.norm(hA[k * M + i] - hS[k]))
            best = max(best, dh / dw)
    return best


# ---------------------------------------------------------------------------
# the report


@dataclass(frozen=True)
class ConvergenceReport:
    """Scalar summary of one run against the asynchronous theory's claims."""

    horizon: int
    n_events: int
    final_consensus_gap: float
    consensus_slope: float            # log-gap per tick over the later recorded half
    final_agreement_gap: float
    worst_bound_ratio: float          # max recorded agreement_gap / bound
    bound_params: dict
    final_distortion_star: float
    distortion_cauchy_ratio: float    # last-quarter range over full range
    final_grad_norm_star: float
    eps_ratio_min: float
    eps_ratio_min_t: int
    eps_ratio_lower: float            # eta_hat * K1
    eps_ratio_max: float
    eps_ratio_max_t: int
    eps_ratio_upper: float            # M * K2
    eps_star_total: float
    eps_star_total_floor: float       # eta_hat * K1 * ln(horizon) / 2
    sum_eps_grad2_final: float
    sum_eps_grad2_tail_fraction: float
    dm1_final_norm: float
    dm2_final_norm: float
    dm2_envelope_final: float
    mart_mean_norm: float
    mart_sigma: float
    mart_n: int
    min_sep_star_min: float
    p_hat: float
    limits_resolved: bool
    rho_hat: float
    baselines: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            out[name] = v
        return out


def _tail_slope(times: np.ndarray, vals: np.ndarray) -> float:
    half = len(times) // 2
    t, v = times[half:].astype(float), vals[half:]
    keep = v > 1e-300
    if keep.sum() < 3:
        return 0.0
    return float(np.polyfit(t[keep], np.log(v[keep]), 1)[0])


def summarize(art: RunArtifacts, metrics: RunMetrics, limits: PhiLimitSeries,
              clvq: Optional[BaselineRun] = None,
              lloyd: Optional[BaselineRun] = None,
              p_hat: Optional[float] = None) -> ConvergenceReport:
    T = art.config.horizon
    times = metrics.times
    gaps = metrics.agreement_gap
    bounds = metrics.bound_normmaj
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bounds > 0, gaps / np.where(bounds > 0, bounds, 1.0), np.inf)
        ratio[(bounds == 0) & (gaps <= 1e-12 * art.batch.diameter)] = 0.0
    worst = float(np.max(ratio)) if len(ratio) else 0.0

    dvals = metrics.distortion_star
    q = 3 * len(dvals) // 4
    full_range = float(dvals.max() - dvals.min()) if len(dvals) else 0.0
    tail_range = float(dvals[q:].max() - dvals[q:].min()) if len(dvals) > q else 0.0
    cauchy = tail_range / full_range if full_range > 0 else 0.0

    seg = metrics.sum_eps_grad2
    seg_final = float(seg[-1]) if len(seg) else 0.0
    seg_tail = float(seg[-1] - seg[q]) / seg_final if seg_final > 0 and len(seg) > q else 0.0

    if p_hat is None:
        p_hat = estimate_lipschitz(art, metrics)

    base = {}
    if clvq is not None:
        base["clvq_distortion"] = clvq.distortion
    if lloyd is not None:
        base["lloyd_distortion"] = lloyd.distortion
        base["lloyd_converged"] = lloyd.converged
    if base:
        dist_f = float(metrics.distortion_star[-1])
        for name in ("clvq_distortion", "lloyd_distortion"):
            if name in base and base[name] > 0:
                base["ratio_vs_" + name.split("_")[0]] = dist_f / base[name]

    return ConvergenceReport(
        horizon=T, n_events=int(art.events.n),
        final_consensus_gap=float(metrics.consensus_gap[-1]),
        consensus_slope=_tail_slope(times, metrics.consensus_gap),
        final_agreement_gap=float(gaps[-1]),
        worst_bound_ratio=worst,
        bound_params={"A_hat": limits.A_hat, "rho_hat": limits.rho_hat,
                      "eta_hat": limits.eta_hat, "K1": art.K1, "K2": art.K2,
                      "safety": _BOUND_SAFETY,
                      "theta_final": theta(T, limits.rho_hat)},
        final_distortion_star=float(dvals[-1]),
        distortion_cauchy_ratio=cauchy,
        final_grad_norm_star=float(metrics.grad_norm_star[-1]),
        eps_ratio_min=metrics.eps_ratio_min,
        eps_ratio_min_t=metrics.eps_ratio_min_t,
        eps_ratio_lower=limits.eta_hat * art.K1,
        eps_ratio_max=metrics.eps_ratio_max,
        eps_ratio_max_t=metrics.eps_ratio_max_t,
        eps_ratio_upper=art.config.M * art.K2,
        eps_star_total=metrics.eps_star_total,
        eps_star_total_floor=limits.eta_hat * art.K1 * math.log(max(T, 2)) / 2.0,
        sum_eps_grad2_final=seg_final,
        sum_eps_grad2_tail_fraction=seg_tail,
        dm1_final_norm=float(metrics.sum_dm1[-1]),
        dm2_final_norm=float(metrics.dm2_partial_norm[-1]),
        dm2_envelope_final=float(metrics.dm2_envelope[-1]),
        mart_mean_norm=metrics.mart_mean_norm,
        mart_sigma=metrics.mart_sigma,
        mart_n=metrics.mart_n,
        min_sep_star_min=float(np.min(metrics.min_sep_star)),
        p_hat=p_hat,
        limits_resolved=limits.resolved,
        rho_hat=limits.rho_hat,
        baselines=base,
    )
