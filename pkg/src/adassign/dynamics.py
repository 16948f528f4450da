"""Discrete-time bid adaptation from aggregated click-through feedback.

Each epoch every active advertiser observes its average click-through rate
(per category where it has them) and moves its bid toward the marginal
utility of that rate.  ``V(b)``, consumer surpluses plus revenue, is the
Lyapunov function of these dynamics and is recorded along the path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .advertisers import AdvertiserProfile, BidProfile
from .equilibrium import _active_mask, _surplus_total, _revenue_per_instance, residuals, targets
from .search_model import InstancePool, TypeDistribution, exact_pool, sample_instances

__all__ = ["DynamicsError", "DynamicsConfig", "Trajectory", "step", "step_categories", "run_trajectory"]

NOISE_MODES = ("frozen_pool_crn", "fresh_samples", "exact")
UPDATE_RULES = ("proportional", "sign")


class DynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class DynamicsConfig:
    """Dynamics settings.

    ``step_size`` is ``kappa_i`` (scalar or one per advertiser) and ``dt`` the
    epoch length.  ``entries`` lists ``(epoch, advertiser)`` pairs: the advertiser
    bids zero, and is left out of ``V``, before that epoch.  ``eval_samples`` sizes
    the fixed pool on which ``V`` and the terminal residual are measured when
    feedback is sampled.  ``halve_on_increase`` shrinks the step while the
    proposed bids would raise ``V`` on the feedback pool (ignored for fresh samples).
    """

    step_size: float | tuple[float, ...] = 0.1
    feedback_window: int = 2000
    horizon: int = 500
    noise_mode: str = "frozen_pool_crn"
    update_rule: str = "proportional"
    dt: float = 1.0
    tol: float = 5e-2
    eval_samples: int = 20000
    halve_on_increase: bool = True
    max_halvings: int = 30
    entries: tuple[tuple[int, int], ...] = ()
    stream: int = 0
    workers: int | None = None

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.step_size, dtype=float) <= 0) or self.dt <= 0:
            raise DynamicsError("step sizes must be positive")
        if self.horizon < 1:
            raise DynamicsError("horizon must be at least 1")
        object.__setattr__(self, "noise_mode", str(self.noise_mode).lower())
        if self.noise_mode not in NOISE_MODES:
            raise DynamicsError(f"unknown noise mode {self.noise_mode!r}")
        if self.update_rule not in UPDATE_RULES:
            raise DynamicsError(f"unknown update rule {self.update_rule!r}")
        if self.feedback_window < 1:
            raise DynamicsError("feedback window must be positive")
        object.__setattr__(self, "entries", tuple((int(t), int(i)) for t, i in self.entries))


def _kappa(cfg: DynamicsConfig, shape: tuple[int, ...]) -> np.ndarray:
    k = np.asarray(cfg.step_size, dtype=float)
    if k.ndim == 0:
        return np.full(shape, float(k))
    if k.shape[0] != shape[0]:
        raise DynamicsError("one step size per advertiser is required")
    return k.reshape((-1,) + (1,) * (len(shape) - 1)) * np.ones(shape)


def _move(b: np.ndarray, target: np.ndarray, kappa: np.ndarray, cfg: DynamicsConfig,
          mask: np.ndarray, scale: float) -> np.ndarray:
    resid = np.where(mask, target - b, 0.0)
    if cfg.update_rule == "proportional":
        with np.errstate(invalid="ignore"):
            raw = scale * kappa * cfg.dt * resid
        # infinite targets (no clicks observed) move by the clip, shrunk by the safeguard scale
        raw = np.where(np.isinf(resid), scale * 0.5 * b, raw)
        raw = np.where(np.isnan(raw), 0.0, raw)
    else:
        raw = scale * kappa * cfg.dt * np.sign(resid)
    return np.where(mask, b + np.clip(raw, -0.5 * b, 0.5 * b), b)


def step(bids, ctr_feedback, profiles: Sequence[AdvertiserProfile], cfg: DynamicsConfig,
         scale: float = 1.0) -> np.ndarray:
    """One Euler step of ``db_i/dt = kappa_i (U'_i(y_hat_i) - b_i)`` (or its sign).

    ``scale`` multiplies the step sizes (used by the descent safeguard).  The
    change of every bid is clipped to half its value.
    """
    b = np.array(bids.values if isinstance(bids, BidProfile) else bids, dtype=float)
    mask = _active_mask(profiles, b) & (b > 0)
    if np.any(b[_active_mask(profiles, b)] < 0):
        raise DynamicsError("bids must be positive")
    if b.ndim == 1 and np.any(b <= 0):
        raise DynamicsError("bids must be positive")
    y = np.asarray(ctr_feedback, dtype=float)
    if y.shape != b.shape:
        raise DynamicsError("feedback must match the bid layout")
    return _move(b, targets(profiles, b, y), _kappa(cfg, b.shape), cfg, mask, scale)


def step_categories(bids_ik, feedback_ik, profiles: Sequence[AdvertiserProfile], cfg: DynamicsConfig,
                    scale: float = 1.0) -> np.ndarray:
    """Per-category step: each ``b_ik`` follows the sign of ``D_ik(b_i) - y_hat_ik``."""
    b = np.array(bids_ik.values if isinstance(bids_ik, BidProfile) else bids_ik, dtype=float)
    y = np.asarray(feedback_ik, dtype=float)
    if b.ndim != 2 or y.shape != b.shape or b.shape[0] != len(profiles):
        raise DynamicsError("category bids and feedback must be (advertiser, category) matrices")
    for i, p in enumerate(profiles):
        if p.n_categories > b.shape[1]:
            raise DynamicsError("bid matrix has fewer columns than the category scheme")
    mask = _active_mask(profiles, b)
    if np.any(b[mask] <= 0):
        raise DynamicsError("category bids must be positive")
    return _move(b, targets(profiles, b, y), _kappa(cfg, b.shape), cfg, mask, scale)


@dataclass
class Trajectory:
    """Recorded path.  Row ``t`` of each array describes epoch ``t`` before its update;
    ``bids`` has one extra final row."""

    times: np.ndarray
    bids: np.ndarray
    ctr: np.ndarray
    v: np.ndarray
    residuals: np.ndarray
    accepted: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    terminal_residual: float
    converged: bool
    meta: dict = field(default_factory=dict)

    def rows(self):
        """CSV rows ``(epoch, advertiser, category, bid, ctr, residual, V)``."""
        T = self.times.size
        for t in range(T):
            b, y, r = self.bids[t], self.ctr[t], self.residuals[t]
            for i in range(b.shape[0]):
                if not self.active[t, i]:
                    continue
                if b.ndim == 1:
                    yield (int(self.times[t]), i, 0, b[i], y[i], r[i], self.v[t])
                else:
                    for k in range(b.shape[1]):
                        yield (int(self.times[t]), i, k, b[i, k], y[i, k], r[i, k], self.v[t])


def run_trajectory(dist: TypeDistribution, profiles: Sequence[AdvertiserProfile], init_bids,
                   cfg: DynamicsConfig = DynamicsConfig(), rng_state: int = 0) -> Trajectory:
    """Iterate :func:`step` with per-epoch click-through estimation."""
    b = np.array(init_bids.values if isinstance(init_bids, BidProfile) else init_bids, dtype=float)
    I = b.shape[0]
    if len(profiles) != I:
        raise DynamicsError("one profile per advertiser is required")
    full_mask = _active_mask(profiles, b)
    if np.any(b[full_mask] <= 0):
        raise DynamicsError("initial bids must be strictly positive")
    categorized = b.ndim == 2
    schemes = [p.categories for p in profiles] if categorized else None
    entry = np.zeros(I, dtype=np.int64)
    for t, i in cfg.entries:
        entry[i] = t
    workers = cfg.workers
    mode = cfg.noise_mode
    if mode == "exact":
        feedback_pool = exact_pool(dist)
        eval_pool = feedback_pool
    elif mode == "frozen_pool_crn":
        feedback_pool = sample_instances(dist, cfg.feedback_window, rng_state, cfg.stream, workers)
        eval_pool = feedback_pool
    else:
        feedback_pool = None
        eval_pool = sample_instances(dist, cfg.eval_samples, rng_state, 10_000_000 + cfg.stream, workers)
    guard = cfg.halve_on_increase and mode != "fresh_samples"

    def masked(bb: np.ndarray, act: np.ndarray) -> np.ndarray:
        out = bb.copy()
        out[~act] = 0.0
        return out

    def value(pool: InstancePool, bb: np.ndarray, act: np.ndarray) -> float:
        live = [p for p, a in zip(profiles, act) if a]
        bl = bb[act]
        s = _surplus_total(live, bl)
        rev = _revenue_per_instance(pool, masked(bb, act), profiles, workers)
        return s + float(pool.mean(rev)[0])

    def observe(pool: InstancePool, bb: np.ndarray, act: np.ndarray) -> np.ndarray:
        return pool.ctr(masked(bb, act), schemes, workers).y_hat

    H = cfg.horizon
    bids_path = np.zeros((H + 1,) + b.shape)
    ctr_path = np.zeros((H,) + b.shape)
    res_path = np.full((H,) + b.shape, np.nan)
    v_path = np.zeros(H)
    accepted = np.zeros(H, dtype=bool)
    scale_path = np.zeros(H)
    active_path = np.zeros((H, I), dtype=bool)
    scale = 1.0
    for t in range(H):
        act = entry <= t
        active_path[t] = act
        bids_path[t] = masked(b, act)
        pool = feedback_pool if feedback_pool is not None else sample_instances(
            dist, cfg.feedback_window, rng_state, cfg.stream + 1 + t, workers)
        y = observe(pool, b, act)
        ctr_path[t] = y
        live = [p for p, a in zip(profiles, act) if a]
        r = residuals(live, b[act], y[act])
        res_path[t][act] = r
        v_now = value(eval_pool, b, act)
        v_path[t] = v_now
        live_b = b[act]
        if guard:
            v_pool = v_now if pool is eval_pool else value(pool, b, act)
            k = min(1.0, 2.0 * scale)
            ok = False
            for _ in range(cfg.max_halvings):
                cand = step(live_b, y[act], live, _sub_cfg(cfg, act), k)
                trial = b.copy()
                trial[act] = cand
                if value(pool, trial, act) < v_pool:
                    ok = True
                    break
                k *= 0.5
            if ok:
                b = trial
                scale = k
            accepted[t] = ok
        else:
            cand = step(live_b, y[act], live, _sub_cfg(cfg, act))
            b = b.copy()
            b[act] = cand
            accepted[t] = True
        scale_path[t] = scale
    act = entry <= H
    bids_path[H] = masked(b, act)
    if mode == "fresh_samples":
        y_end = observe(eval_pool, b, act)
    else:
        y_end = observe(feedback_pool, b, act)
    live = [p for p, a in zip(profiles, act) if a]
    r_end = residuals(live, b[act], y_end[act])
    terminal = float(np.max(np.abs(r_end))) if r_end.size else 0.0
    return Trajectory(np.arange(H), bids_path, ctr_path, v_path, res_path, accepted, scale_path,
                      active_path, terminal, terminal <= cfg.tol,
                      {"noise_mode": mode, "update_rule": cfg.update_rule})


def _sub_cfg(cfg: DynamicsConfig, act: np.ndarray) -> DynamicsConfig:
    k = np.asarray(cfg.step_size, dtype=float)
    if k.ndim == 0:
        return cfg
    return DynamicsConfig(tuple(k[act]), cfg.feedback_window, cfg.horizon, cfg.noise_mode,
                          cfg.update_rule, cfg.dt, cfg.tol, cfg.eval_samples, cfg.halve_on_increase,
                          cfg.max_halvings, (), cfg.stream, cfg.workers)
