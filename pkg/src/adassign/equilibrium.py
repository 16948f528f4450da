"""Dual objective, Nash equilibrium solver, welfare and the SYSTEM-optimum oracle.

The dual objective ``V(b) = sum_i U*_i(b_i) + sum_i b_i y_i(b)`` is convex and its
gradient is ``y_i(b) - D_i(b_i)``.  The equilibrium solver moves every bid toward
the marginal utility of its own observed click-through rate, a direction of
descent for ``V``, and backtracks whenever ``V`` would rise on the frozen pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .advertisers import AdvertiserProfile, BidProfile
from .matching import ClickMatrix
from .search_model import (CtrEstimate, InstancePool, TypeDistribution, effective_bids, exact_pool,
                           sample_instances)

__all__ = [
    "EquilibriumError",
    "EquilibriumConfig",
    "EquilibriumReport",
    "SystemSolution",
    "welfare",
    "dual_objective",
    "pool_dual_value",
    "solve_equilibrium",
    "system_oracle",
    "pool_from_support",
    "residuals",
    "targets",
]


class EquilibriumError(ValueError):
    pass


def _schemes(profiles: Sequence[AdvertiserProfile]):
    return [p.categories for p in profiles]


def _categorized(profiles: Sequence[AdvertiserProfile]) -> bool:
    return any(p.categories is not None for p in profiles)


def _as_array(bids) -> np.ndarray:
    return np.array(bids.values if isinstance(bids, BidProfile) else bids, dtype=float)


def _rows(profiles, bids: np.ndarray):
    """Yield (i, profile, own bid vector or scalar, column count)."""
    for i, p in enumerate(profiles):
        if bids.ndim == 1:
            yield i, p, bids[i], 1
        else:
            k = p.n_categories
            own = bids[i, :k] if p.categories is not None else bids[i, 0]
            yield i, p, own, k


def _own(values: np.ndarray, i: int, p: AdvertiserProfile):
    if values.ndim == 1:
        return values[i]
    if p.categories is None:
        return values[i].sum() if values.shape[1] > 1 else values[i, 0]
    return values[i, : p.n_categories]


def welfare(profiles: Sequence[AdvertiserProfile], rates) -> float:
    """``sum_i U_i(y_i)``."""
    rates = np.asarray(rates, dtype=float)
    return float(sum(p.value(_own(rates, i, p)) for i, p in enumerate(profiles)))


def _surplus_total(profiles, bids: np.ndarray) -> float:
    total = 0.0
    for i, p, own, _ in _rows(profiles, bids):
        if np.any(np.asarray(own) <= 0):
            raise EquilibriumError("bids must be strictly positive")
        total += p.surplus(own)
    return total


def _revenue_per_instance(pool: InstancePool, bids: np.ndarray, profiles, workers) -> np.ndarray:
    eff, _ = effective_bids(bids, pool.regions, _schemes(profiles) if bids.ndim == 2 else None)
    ctr = pool.solve(eff, workers).ctr
    b = eff if eff.ndim == 2 else eff[None, :]
    return (b * ctr).sum(axis=1)


def pool_dual_value(pool: InstancePool, profiles, bids, workers: int | None = None) -> tuple[float, float]:
    """``V(b)`` and its standard error on a fixed pool."""
    b = _as_array(bids)
    s = _surplus_total(profiles, b)
    rev, se = pool.mean(_revenue_per_instance(pool, b, profiles, workers))
    return float(s + rev), float(se)


def dual_objective(dist: TypeDistribution, profiles, bids, n: int, rng_state: int, *,
                   stream: int = 0, pool: InstancePool | None = None,
                   workers: int | None = None) -> tuple[float, float]:
    """``V(b) = sum U*_i(b_i) + sum b_i y_i(b)`` estimated on ``n`` keyed instances."""
    if pool is None:
        pool = sample_instances(dist, n, rng_state, stream, workers)
    return pool_dual_value(pool, profiles, bids, workers)


def residuals(profiles, bids, y_hat) -> np.ndarray:
    """Relative optimality residuals, same layout as ``bids`` (unused cells are 0)."""
    b = _as_array(bids)
    y = np.asarray(y_hat, dtype=float)
    out = np.zeros_like(b)
    for i, p, own, k in _rows(profiles, b):
        r = p.residual(_own(y, i, p), own)
        if b.ndim == 1:
            out[i] = r
        elif p.categories is None:
            out[i, 0] = r
        else:
            out[i, :k] = r
    return out


def targets(profiles, bids, y_hat) -> np.ndarray:
    """Marginal-utility target of every bid given observed rates."""
    b = _as_array(bids)
    y = np.asarray(y_hat, dtype=float)
    out = b.copy()
    for i, p, own, k in _rows(profiles, b):
        t = p.target_price(_own(y, i, p), own)
        if b.ndim == 1:
            out[i] = t
        elif p.categories is None:
            out[i, 0] = t
        else:
            out[i, :k] = t
    return out


def _active_mask(profiles, b: np.ndarray) -> np.ndarray:
    if b.ndim == 1:
        return np.ones_like(b, dtype=bool)
    mask = np.zeros_like(b, dtype=bool)
    for i, p in enumerate(profiles):
        mask[i, : (p.n_categories if p.categories is not None else 1)] = True
    return mask


@dataclass(frozen=True)
class EquilibriumConfig:
    """Solver settings.

    ``tol`` bounds the max relative residual; ``step`` is the initial damping
    ``kappa``; ``n_samples`` instances from stream ``stream`` form the frozen
    pool (or the exact support when ``exact``).
    """

    n_samples: int = 20000
    tol: float = 1e-3
    max_iter: int = 2000
    step: float = 1.0
    stream: int = 0
    exact: bool = False
    max_halvings: int = 40
    workers: int | None = None


@dataclass
class EquilibriumReport:
    bids: BidProfile
    ctr: CtrEstimate
    dual_value: float
    residuals: np.ndarray
    iterations: int
    converged: bool
    v_trace: list[float] = field(default_factory=list)
    residual_trace: list[float] = field(default_factory=list)
    duality_gap: float | None = None
    welfare: float | None = None

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0

    def to_dict(self) -> dict:
        return {
            "bids": self.bids.values.tolist(),
            "ctr": self.ctr.y_hat.tolist(),
            "ctr_std_err": self.ctr.std_err.tolist(),
            "n_samples": self.ctr.n_samples,
            "dual_value": self.dual_value,
            "residuals": self.residuals.tolist(),
            "max_residual": self.max_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "welfare": self.welfare,
            "duality_gap": self.duality_gap,
            "v_trace": list(self.v_trace),
            "residual_trace": list(self.residual_trace),
        }


def solve_equilibrium(dist: TypeDistribution | None, profiles: Sequence[AdvertiserProfile], init_bids,
                      config: EquilibriumConfig = EquilibriumConfig(), rng_state: int = 0, *,
                      pool: InstancePool | None = None) -> EquilibriumReport:
    """Damped iteration ``b <- b + kappa (U'(y_hat(b)) - b)`` on a frozen pool.

    Each accepted step lowers ``V`` on the pool; a step that would raise it is
    halved.  Changes are clipped to half the current bid so bids stay positive.
    """
    b = _as_array(init_bids)
    if len(profiles) != b.shape[0]:
        raise EquilibriumError("one profile per advertiser is required")
    mask = _active_mask(profiles, b)
    if np.any(b[mask] <= 0):
        raise EquilibriumError("initial bids must be strictly positive")
    if pool is None:
        pool = exact_pool(dist) if config.exact else sample_instances(
            dist, config.n_samples, rng_state, config.stream, config.workers)
    schemes = _schemes(profiles) if b.ndim == 2 else None
    workers = config.workers

    def evaluate(bb):
        est = pool.ctr(bb, schemes, workers)
        rev = _revenue_per_instance(pool, bb, profiles, workers)
        v = _surplus_total(profiles, bb) + float(pool.mean(rev)[0])
        return est, v

    est, v = evaluate(b)
    kappa = config.step
    v_trace = [v]
    r = residuals(profiles, b, est.y_hat)
    r_trace = [float(np.max(np.abs(r)))]
    it = 0
    converged = r_trace[-1] <= config.tol
    while not converged and it < config.max_iter:
        it += 1
        g = targets(profiles, b, est.y_hat)
        # an advertiser without clicks has an infinite target: move it by the
        # full clip at the initial step so that halving still shrinks the move
        delta = np.where(mask, np.where(np.isinf(g), 0.5 * b / config.step, g - b), 0.0)
        accepted = False
        k = min(config.step, 2.0 * kappa)
        for _ in range(config.max_halvings):
            step = np.clip(k * delta, -0.5 * b, 0.5 * b)
            trial = np.where(mask, b + step, b)
            est_t, v_t = evaluate(trial)
            if v_t <= v + 1e-14 * abs(v):
                accepted = True
                break
            k *= 0.5
        if not accepted:
            break
        kappa = k
        b, est, v = trial, est_t, v_t
        r = residuals(profiles, b, est.y_hat)
        v_trace.append(v)
        r_trace.append(float(np.max(np.abs(r))))
        converged = r_trace[-1] <= config.tol
    rep = EquilibriumReport(BidProfile(b), est, v, r, it, converged, v_trace, r_trace)
    try:
        rep.welfare = welfare(profiles, est.y_hat)
    except ValueError:
        rep.welfare = None
    return rep


# --------------------------------------------------------------------------------------
# SYSTEM oracle


@dataclass
class SystemSolution:
    y_star: np.ndarray
    welfare: float
    support: InstancePool
    gap: float
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {"y_star": self.y_star.tolist(), "welfare": self.welfare, "gap": self.gap,
                "iterations": self.iterations, "converged": self.converged,
                "support_size": self.support.size}


def pool_from_support(support: Sequence[tuple[ClickMatrix, float]]) -> InstancePool:
    """Exact pool from explicit ``(click matrix, weight)`` pairs; regions are list positions."""
    if not support:
        raise EquilibriumError("empty support")
    w = np.asarray([float(x) for _, x in support])
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise EquilibriumError("support weights must be nonnegative and sum to 1")
    I = support[0][0].n_advertisers
    L = max(cm.n_slots for cm, _ in support)
    P = np.zeros((len(support), I, L))
    Q = np.zeros_like(P)
    for j, (cm, _) in enumerate(support):
        if cm.n_advertisers != I:
            raise EquilibriumError("every atom must list every advertiser")
        P[j, :, : cm.n_slots] = cm.probs
        if cm.has_benefits:
            Q[j, :, : cm.n_slots] = cm.benefits
    return InstancePool(P, Q if Q.any() else None, np.arange(len(support)), w, True,
                        support[0][0].organic)


def _y_layout(profiles) -> tuple[int, np.ndarray]:
    """Number of rate columns and the index of the first column of each advertiser."""
    K = max(p.n_categories if p.categories is not None else 1 for p in profiles)
    return K, np.arange(len(profiles))


def system_oracle(finite_support, profiles: Sequence[AdvertiserProfile], tol: float = 1e-5,
                  max_iter: int = 20000) -> SystemSolution:
    """Maximize ``sum U_i(y_i)`` over the randomized assignments of a finite support.

    Away-step Frank-Wolfe; each linear subproblem is an assignment per atom with
    bids equal to the current marginal utilities.  ``gap`` is the Frank-Wolfe
    certificate, an upper bound on the optimality shortfall of ``welfare``.
    """
    pool = finite_support if isinstance(finite_support, InstancePool) else pool_from_support(finite_support)
    if abs(pool.weights.sum() - 1.0) > 1e-9:
        raise EquilibriumError("support weights must sum to 1")
    I = pool.n_advertisers
    if len(profiles) != I:
        raise EquilibriumError("one profile per advertiser is required")
    categorized = _categorized(profiles)
    K = max(p.n_categories for p in profiles) if categorized else 1
    schemes = _schemes(profiles)
    cats = np.zeros((pool.size, I), dtype=np.int64)
    for i, sch in enumerate(schemes):
        if sch is not None:
            cats[:, i] = sch.category_of(pool.regions)
    mask = np.zeros((I, K), dtype=bool)
    for i, p in enumerate(profiles):
        mask[i, : p.n_categories] = True
    rows = np.arange(I)[None, :]
    inst = np.arange(pool.size)[:, None]

    def vertex(eff_bids: np.ndarray) -> tuple[bytes, np.ndarray]:
        sol = pool.solve(eff_bids)
        per = np.zeros((pool.size, I, K))
        per[inst, rows, cats] = sol.ctr
        y = np.tensordot(pool.weights, per, axes=(0, 0))
        return sol.slot_of.tobytes(), y

    def as_rates(y: np.ndarray) -> np.ndarray:
        return y if categorized else y[:, 0]

    def grad(y: np.ndarray) -> np.ndarray:
        g = np.zeros((I, K))
        for i, p in enumerate(profiles):
            if p.categories is None:
                g[i, 0] = p.marginal(y[i, :].sum())
            else:
                g[i, : p.n_categories] = p.marginal(y[i, : p.n_categories])
        return g

    def safe_grad(y: np.ndarray) -> np.ndarray | None:
        if np.any(y[mask] <= 0):
            return None
        return grad(y)

    # starting point: every advertiser (and category) favoured once
    active: dict[bytes, list] = {}
    for i in range(I):
        for k in range(K):
            if not mask[i, k]:
                continue
            eff = np.full((pool.size, I), 1e-3)
            eff[:, i] = np.where(cats[:, i] == k, 1.0, 1e-3)
            key, y = vertex(eff)
            if key in active:
                active[key][1] += 1.0
            else:
                active[key] = [y, 1.0]
    total = sum(v[1] for v in active.values())
    for v in active.values():
        v[1] /= total
    y = sum(v[0] * v[1] for v in active.values())
    if np.any(y[mask] <= 0):
        raise EquilibriumError("some advertiser cannot receive clicks on this support")

    gap = np.inf
    it = 0
    while it < max_iter:
        g = grad(y)
        eff = g[np.arange(I)[None, :], cats]
        s_key, s = vertex(eff)
        fw_gap = float(np.sum(g * (s - y)))
        gap = fw_gap
        if fw_gap <= tol:
            break
        it += 1
        a_key = min(active, key=lambda k_: float(np.sum(g * active[k_][0])))
        a = active[a_key][0]
        away_gap = float(np.sum(g * (y - a)))
        if fw_gap >= away_gap or len(active) == 1:
            d = s - y
            gmax = 1.0
            fw = True
        else:
            alpha = active[a_key][1]
            d = y - a
            gmax = alpha / (1.0 - alpha)
            fw = False

        def slope(t: float) -> float:
            gr = safe_grad(y + t * d)
            return -1e300 if gr is None else float(np.sum(gr * d))

        if slope(gmax) >= 0:
            t = gmax
        else:
            t = brentq(slope, 0.0, gmax, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)
        if t <= 0:
            break
        y = y + t * d
        if fw:
            for v in active.values():
                v[1] *= 1.0 - t
            if s_key in active:
                active[s_key][1] += t
            else:
                active[s_key] = [s, t]
            if t >= 1.0:
                active = {s_key: [s, 1.0]}
        else:
            for v in active.values():
                v[1] *= 1.0 + t
            active[a_key][1] -= t
            if t >= gmax or active[a_key][1] <= 1e-15:
                del active[a_key]
        # resynchronize to the exact convex combination to stop drift
        tot = sum(v[1] for v in active.values())
        for v in active.values():
            v[1] /= tot
        y = sum(v[0] * v[1] for v in active.values())
    rates = as_rates(y)
    return SystemSolution(rates, welfare(profiles, rates), pool, gap, it, gap <= tol)
