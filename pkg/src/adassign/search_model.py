"""Stochastic search types and Monte Carlo estimation of click-through rates.

Randomness is counter based: instance ``j`` of stream ``s`` under seed ``seed``
is drawn from the Philox generator keyed by ``(seed, purpose, s, j // BLOCK)``.
Any prefix of a stream is therefore reproducible on its own, and the work can be
split across threads in any way without changing a single bit of the output.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .advertisers import BidProfile, CategoryScheme
from .matching import BatchAssignment, ClickMatrix, solve_assignment_batch

__all__ = [
    "DistributionError",
    "ReservePolicy",
    "TypeDistribution",
    "InstancePool",
    "CtrEstimate",
    "ProbeResult",
    "BLOCK",
    "Purpose",
    "generator",
    "resolve_workers",
    "sample_click_matrix",
    "sample_instances",
    "exact_pool",
    "support_pool",
    "effective_bids",
    "estimate_ctr",
    "monotonicity_probe",
]

BLOCK = 1024
_SOLVE_CHUNK = 4096
KINDS = ("ordered_polytope_uniform", "product_form", "single_slot_independent",
         "finite_mixture", "category_mixture")


class DistributionError(ValueError):
    """Invalid type-distribution parameters."""


class Purpose:
    """Stream purposes; each gets statistically independent random numbers."""

    TYPES = 0
    RESERVE = 1
    CLICKS = 2
    CHARGES = 3
    TIES = 4
    LAYOUT = 5


def generator(seed: int, purpose: int, stream: int = 0, block: int = 0) -> np.random.Generator:
    """Keyed Philox generator for one block of one stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get("ADASSIGN_WORKERS", "1") or 1)
    return max(1, int(workers))


def _parallel(fn, items: Sequence, workers: int | None) -> list:
    workers = resolve_workers(workers)
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass(frozen=True)
class ReservePolicy:
    """With probability ``epsilon_no_reserve`` no reserve applies; otherwise every
    advert-slot pair carries benefit ``-reserve_R``."""

    reserve_R: float
    epsilon_no_reserve: float = 0.0

    def __post_init__(self) -> None:
        if self.reserve_R < 0:
            raise DistributionError("reserve must be nonnegative")
        if not 0.0 <= self.epsilon_no_reserve <= 1.0:
            raise DistributionError("epsilon_no_reserve must be a probability")


def _per_advertiser(x, n: int, what: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(x, dtype=float), (n,)).copy()
    if np.isnan(arr).any():
        raise DistributionError(f"{what} contains NaN")
    return arr


@dataclass(frozen=True, eq=False)
class TypeDistribution:
    """Distribution of search types, each realized as a click matrix.

    Kinds
    -----
    ordered_polytope_uniform
        Each advertiser's row is uniform on ``{scale >= p_1 >= ... >= p_L >= 0}``.
    product_form
        ``p_il = q_i * slot_effects[l]`` with ``q_i ~ Uniform[effect_low_i, effect_high_i]``.
    single_slot_independent
        One slot, ``p_i1 ~ Uniform[effect_low_i, effect_high_i]`` independently.
    finite_mixture
        ``atoms[j]`` with probability ``weights[j]``; atoms may have fewer slots
        than the widest one (padded with never-clicked slots).  ``jitter`` > 0
        multiplies every probability by an independent ``1 + jitter * U(-1, 1)``.
    category_mixture
        ``components[j]`` with probability ``weights[j]``.

    The *region* of a sampled type is the atom index (finite_mixture), the
    component index (category_mixture) or 0; category schemes map regions to
    categories.
    """

    kind: str
    n_advertisers: int
    n_slots: int = 1
    scale: float = 1.0
    slot_effects: tuple[float, ...] = ()
    effect_low: float | tuple[float, ...] = 0.0
    effect_high: float | tuple[float, ...] = 1.0
    atoms: tuple[ClickMatrix, ...] = ()
    components: tuple["TypeDistribution", ...] = ()
    weights: tuple[float, ...] = ()
    jitter: float = 0.0
    reserve: ReservePolicy | None = None
    organic: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise DistributionError(f"unknown distribution kind {self.kind!r}")
        if self.n_advertisers < 1:
            raise DistributionError("at least one advertiser is required")
        I = self.n_advertisers
        if self.kind in ("finite_mixture", "category_mixture"):
            parts = self.atoms if self.kind == "finite_mixture" else self.components
            if not parts:
                raise DistributionError(f"{self.kind} needs at least one atom/component")
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(parts),) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
                raise DistributionError("mixture weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", tuple(float(x) for x in w))
            if self.kind == "finite_mixture":
                if any(a.n_advertisers != I for a in parts):
                    raise DistributionError("every atom must list every advertiser")
                L = max(a.n_slots for a in parts)
                if any(a.organic is not None for a in parts):
                    raise DistributionError("organic results belong on the distribution, not atoms")
            else:
                if any(c.n_advertisers != I for c in parts):
                    raise DistributionError("every component must list every advertiser")
                if any(c.reserve is not None or c.organic is not None for c in parts):
                    raise DistributionError("reserve and organic options belong on the outer mixture")
                L = max(c.n_slots for c in parts)
            object.__setattr__(self, "n_slots", L)
            if self.jitter < 0 or self.jitter >= 1:
                raise DistributionError("jitter must lie in [0, 1)")
        elif self.kind == "product_form":
            eff = np.asarray(self.slot_effects, dtype=float)
            if eff.ndim != 1 or eff.size < 1:
                raise DistributionError("product_form needs slot effects")
            if (np.diff(eff) >= 0).any() or eff[-1] <= 0:
                raise DistributionError("slot effects must be positive and strictly decreasing")
            object.__setattr__(self, "slot_effects", tuple(float(x) for x in eff))
            object.__setattr__(self, "n_slots", eff.size)
            self._check_effects(float(eff[0]))
        elif self.kind == "single_slot_independent":
            if self.n_slots != 1:
                raise DistributionError("single_slot_independent has exactly one slot")
            self._check_effects(1.0)
        else:
            if self.n_slots < 1:
                raise DistributionError("at least one slot is required")
            if not 0 < self.scale <= 1:
                raise DistributionError("scale must lie in (0, 1]")
        if self.organic is not None:
            org = np.array(self.organic, dtype=float)
            if org.ndim != 2 or org.shape[1] != self.n_slots:
                raise DistributionError("organic benefits must be (n_results, n_slots)")
            if self.kind == "finite_mixture" and any(a.n_slots != self.n_slots for a in self.atoms):
                raise DistributionError("organic results need a fixed number of slots")
            object.__setattr__(self, "organic", org)

    def _check_effects(self, top: float) -> None:
        lo = _per_advertiser(self.effect_low, self.n_advertisers, "effect_low")
        hi = _per_advertiser(self.effect_high, self.n_advertisers, "effect_high")
        if (lo < 0).any() or (hi < lo).any() or (hi * top > 1 + 1e-12).any():
            raise DistributionError("advertiser effects must satisfy 0 <= low <= high and keep p in [0, 1]")

    @property
    def n_regions(self) -> int:
        if self.kind == "finite_mixture":
            return len(self.atoms)
        if self.kind == "category_mixture":
            return len(self.components)
        return 1

    @property
    def has_finite_support(self) -> bool:
        if self.kind == "finite_mixture":
            return self.jitter == 0
        if self.kind == "category_mixture":
            return all(c.has_finite_support for c in self.components)
        if self.kind in ("product_form", "single_slot_independent"):
            lo = _per_advertiser(self.effect_low, self.n_advertisers, "effect_low")
            hi = _per_advertiser(self.effect_high, self.n_advertisers, "effect_high")
            return bool(np.all(lo == hi))
        return False


# --------------------------------------------------------------------------------------
# raw drawing


def _draw_types(dist: TypeDistribution, rng: np.random.Generator, n: int, L: int):
    """Return probs (n, I, L), benefits (n, I, L) or None, regions (n,), effects (n, I) or None."""
    I = dist.n_advertisers
    kind = dist.kind
    if kind == "ordered_polytope_uniform":
        u = rng.random((n, I, dist.n_slots)) * dist.scale
        probs = -np.sort(-u, axis=2)
        return _pad(probs, L), None, np.zeros(n, dtype=np.int64), None
    if kind in ("product_form", "single_slot_independent"):
        lo = _per_advertiser(dist.effect_low, I, "effect_low")
        hi = _per_advertiser(dist.effect_high, I, "effect_high")
        q = lo + (hi - lo) * rng.random((n, I))
        eff = np.asarray(dist.slot_effects) if kind == "product_form" else np.ones(1)
        probs = q[:, :, None] * eff[None, None, :]
        return _pad(probs, L), None, np.zeros(n, dtype=np.int64), q
    w = np.asarray(dist.weights)
    region = rng.choice(len(w), size=n, p=w)
    if kind == "finite_mixture":
        atoms = dist.atoms
        P = np.stack([_pad(a.probs[None], L)[0] for a in atoms])
        probs = P[region]
        benefits = None
        if any(a.has_benefits for a in atoms):
            Q = np.stack([_pad(_benefits_of(a)[None], L)[0] for a in atoms])
            benefits = Q[region]
        if dist.jitter > 0:
            probs = np.clip(probs * (1.0 + dist.jitter * rng.uniform(-1.0, 1.0, probs.shape)), 0.0, 1.0)
        return probs, benefits, region.astype(np.int64), None
    probs = np.zeros((n, I, L))
    benefits = None
    for j, comp in enumerate(dist.components):
        idx = np.flatnonzero(region == j)
        if idx.size == 0:
            continue
        p, q, _, _ = _draw_types(comp, rng, idx.size, L)
        probs[idx] = p
        if q is not None:
            if benefits is None:
                benefits = np.zeros((n, I, L))
            benefits[idx] = q
    return probs, benefits, region.astype(np.int64), None


def _benefits_of(cm: ClickMatrix) -> np.ndarray:
    return np.zeros_like(cm.probs) if cm.benefits is None else np.asarray(cm.benefits, dtype=float)


def _pad(a: np.ndarray, L: int) -> np.ndarray:
    if a.shape[-1] == L:
        return a
    out = np.zeros(a.shape[:-1] + (L,))
    out[..., : a.shape[-1]] = a
    return out


def _reserve_benefits(dist: TypeDistribution, rng: np.random.Generator, n: int, L: int):
    pol = dist.reserve
    if pol is None:
        return None, np.zeros(n, dtype=bool)
    active = rng.random(n) >= pol.epsilon_no_reserve
    if not active.any():
        return None, active
    ben = np.zeros((n, dist.n_advertisers, L))
    ben[active] = -pol.reserve_R
    return ben, active


def sample_click_matrix(dist: TypeDistribution, rng_state) -> ClickMatrix:
    """Draw one search type.

    ``rng_state`` is a :class:`numpy.random.Generator` (advanced in place) or an
    integer seed, in which case the result equals instance 0 of
    :func:`sample_instances` with that seed.
    """
    if not isinstance(rng_state, np.random.Generator):
        return sample_instances(dist, 1, rng_state).matrix(0)
    L = dist.n_slots
    probs, ben, _, _ = _draw_types(dist, rng_state, 1, L)
    res, _ = _reserve_benefits(dist, rng_state, 1, L)
    if res is not None:
        ben = res if ben is None else ben + res
    return ClickMatrix(probs[0], None if ben is None else ben[0], dist.organic)


# --------------------------------------------------------------------------------------
# pools


@dataclass(frozen=True)
class CtrEstimate:
    """Estimated click-through rates.

    ``y_hat`` has shape (I,) or (I, K) in category mode, where ``y_hat[i, k]`` is
    the rate per search earned on category-``k`` searches (rows sum to the flat rate).
    """

    y_hat: np.ndarray
    std_err: np.ndarray
    n_samples: int
    seed: int | None


@dataclass(frozen=True, eq=False)
class InstancePool:
    """A frozen set of search instances with expectation weights.

    Sampled pools weight instances equally; exact pools enumerate a finite
    support with its probabilities.
    """

    probs: np.ndarray
    benefits: np.ndarray | None
    regions: np.ndarray
    weights: np.ndarray
    exact: bool = False
    organic: np.ndarray | None = None
    effects: np.ndarray | None = None
    reserve_active: np.ndarray | None = None
    seed: int | None = None
    stream: int = 0
    ids: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(self.probs.shape[0], dtype=np.int64))

    @property
    def size(self) -> int:
        return int(self.probs.shape[0])

    @property
    def n_advertisers(self) -> int:
        return int(self.probs.shape[1])

    @property
    def n_slots(self) -> int:
        return int(self.probs.shape[2])

    def matrix(self, j: int) -> ClickMatrix:
        ben = None if self.benefits is None else self.benefits[j]
        return ClickMatrix(self.probs[j], ben, self.organic)

    def subset(self, idx) -> "InstancePool":
        idx = np.asarray(idx)
        w = self.weights[idx]
        return InstancePool(self.probs[idx], None if self.benefits is None else self.benefits[idx],
                            self.regions[idx], w / w.sum() if w.size else w, self.exact, self.organic,
                            None if self.effects is None else self.effects[idx],
                            None if self.reserve_active is None else self.reserve_active[idx],
                            self.seed, self.stream, self.ids[idx])

    def solve(self, bids: np.ndarray, workers: int | None = None) -> BatchAssignment:
        """Assignment on every instance; ``bids`` is (I,) or per-instance (N, I)."""
        bids = np.asarray(bids, dtype=float)
        N = self.size
        starts = list(range(0, N, _SOLVE_CHUNK))

        def run(s: int) -> BatchAssignment:
            e = min(N, s + _SOLVE_CHUNK)
            b = bids if bids.ndim == 1 else bids[s:e]
            ben = None if self.benefits is None else self.benefits[s:e]
            return solve_assignment_batch(self.probs[s:e], b, ben, self.organic)

        parts = _parallel(run, starts, workers)
        if not parts:
            R = self.n_advertisers + (0 if self.organic is None else self.organic.shape[0])
            return BatchAssignment(np.zeros((0, R), np.int64), np.zeros(0), np.zeros((0, self.n_advertisers)))
        return BatchAssignment(np.concatenate([p.slot_of for p in parts]),
                               np.concatenate([p.objective for p in parts]),
                               np.concatenate([p.ctr for p in parts]))

    def mean(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expectation and standard error of per-instance values (axis 0)."""
        values = np.asarray(values, dtype=float)
        N = values.shape[0]
        if N == 0:
            z = np.zeros(values.shape[1:])
            return z, z.copy()
        if self.exact:
            m = np.tensordot(self.weights, values, axes=(0, 0))
            return m, np.zeros_like(m)
        m = values.mean(axis=0)
        se = values.std(axis=0, ddof=1) / np.sqrt(N) if N > 1 else np.zeros_like(m)
        return m, se

    def ctr(self, bids, schemes: Sequence[CategoryScheme | None] | None = None,
            workers: int | None = None) -> CtrEstimate:
        """Estimate ``y(b)``; category bids (I, K) need ``schemes``."""
        eff, cats = effective_bids(bids, self.regions, schemes)
        sol = self.solve(eff, workers)
        if cats is None:
            y, se = self.mean(sol.ctr)
        else:
            K = np.asarray(bids.values if isinstance(bids, BidProfile) else bids).shape[1]
            per = np.zeros((self.size, self.n_advertisers, K))
            n_idx = np.arange(self.size)
            for i in range(self.n_advertisers):
                per[n_idx, i, cats[:, i]] = sol.ctr[:, i]
            y, se = self.mean(per)
        return CtrEstimate(y, se, self.size, self.seed)


def effective_bids(bids, regions: np.ndarray, schemes=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-instance bids ``b_{i, k_i(tau)}`` and the category of each (instance, advertiser).

    Flat bids pass through unchanged (and no categories are returned).
    """
    b = np.asarray(bids.values if isinstance(bids, BidProfile) else bids, dtype=float)
    if b.ndim == 1:
        return b, None
    if schemes is None or len(schemes) != b.shape[0]:
        raise DistributionError("category bids need one (possibly empty) scheme per advertiser")
    regions = np.asarray(regions, dtype=np.int64)
    cats = np.zeros((regions.size, b.shape[0]), dtype=np.int64)
    for i, sch in enumerate(schemes):
        if sch is not None:
            if sch.n_categories > b.shape[1]:
                raise DistributionError("bid matrix has fewer columns than categories")
            cats[:, i] = sch.category_of(regions)
    eff = b[np.arange(b.shape[0])[None, :], cats]
    return eff, cats


def sample_instances(dist: TypeDistribution, n: int, seed: int, stream: int = 0,
                     workers: int | None = None) -> InstancePool:
    """Instances ``0..n-1`` of the keyed stream ``(seed, stream)``."""
    if n < 0:
        raise DistributionError("sample count must be nonnegative")
    L = dist.n_slots
    blocks = list(range((n + BLOCK - 1) // BLOCK))

    def draw(blk: int):
        g = generator(seed, Purpose.TYPES, stream, blk)
        p, q, r, e = _draw_types(dist, g, BLOCK, L)
        res, active = _reserve_benefits(dist, generator(seed, Purpose.RESERVE, stream, blk), BLOCK, L)
        return p, q, r, e, res, active

    parts = _parallel(draw, blocks, workers)
    I = dist.n_advertisers
    if not parts:
        return InstancePool(np.zeros((0, I, L)), None, np.zeros(0, np.int64), np.zeros(0),
                            organic=dist.organic, seed=seed, stream=stream)
    probs = np.concatenate([p[0] for p in parts])[:n]
    regions = np.concatenate([p[2] for p in parts])[:n]
    effects = None if parts[0][3] is None else np.concatenate([p[3] for p in parts])[:n]
    active = np.concatenate([p[5] for p in parts])[:n]
    benefits = None
    if any(p[1] is not None or p[4] is not None for p in parts):
        full = []
        for p in parts:
            b = np.zeros((BLOCK, I, L))
            if p[1] is not None:
                b = b + p[1]
            if p[4] is not None:
                b = b + p[4]
            full.append(b)
        benefits = np.concatenate(full)[:n]
        if not benefits.any() and not any(p[1] is not None for p in parts):
            benefits = None
    weights = np.full(n, 1.0 / n) if n else np.zeros(0)
    return InstancePool(probs, benefits, regions, weights, False, dist.organic, effects,
                        active if dist.reserve is not None else None, seed, stream)


def exact_pool(dist: TypeDistribution) -> InstancePool:
    """Enumerate a finite support together with its probabilities."""
    if not dist.has_finite_support:
        raise DistributionError("exact expectation needs a finite-support distribution")
    I, L = dist.n_advertisers, dist.n_slots
    probs, bens, regions, weights = [], [], [], []

    def add(d: TypeDistribution, mass: float, region: int | None):
        if d.kind == "finite_mixture":
            for j, (a, w) in enumerate(zip(d.atoms, d.weights)):
                probs.append(_pad(a.probs[None], L)[0])
                bens.append(_pad(_benefits_of(a)[None], L)[0])
                regions.append(j if region is None else region)
                weights.append(mass * w)
        elif d.kind == "category_mixture":
            for j, (c, w) in enumerate(zip(d.components, d.weights)):
                add(c, mass * w, j)
        else:
            lo = _per_advertiser(d.effect_low, I, "effect_low")
            eff = np.asarray(d.slot_effects) if d.kind == "product_form" else np.ones(1)
            probs.append(_pad((lo[:, None] * eff[None, :])[None], L)[0])
            bens.append(np.zeros((I, L)))
            regions.append(0 if region is None else region)
            weights.append(mass)

    add(dist, 1.0, None)
    P = np.stack(probs)
    Q = np.stack(bens)
    r = np.asarray(regions, dtype=np.int64)
    w = np.asarray(weights)
    active = None
    if dist.reserve is not None:
        eps, R = dist.reserve.epsilon_no_reserve, dist.reserve.reserve_R
        P = np.concatenate([P, P])
        Q = np.concatenate([Q, Q - R])
        r = np.concatenate([r, r])
        w = np.concatenate([w * eps, w * (1 - eps)])
        active = np.repeat([False, True], len(regions))
    keep = w > 0
    ben = Q[keep] if Q[keep].any() else None
    return InstancePool(P[keep], ben, r[keep], w[keep], True, dist.organic, None,
                        None if active is None else active[keep])


def support_pool(dist: TypeDistribution) -> InstancePool:
    """Exact pool of the underlying finite support, ignoring any jitter."""
    return exact_pool(_without_jitter(dist))


def _without_jitter(dist: TypeDistribution) -> TypeDistribution:
    if dist.kind == "finite_mixture":
        return dataclasses.replace(dist, jitter=0.0)
    if dist.kind == "category_mixture":
        return dataclasses.replace(dist, components=tuple(_without_jitter(c) for c in dist.components))
    return dist


def estimate_ctr(dist: TypeDistribution, bids, n: int, rng_state: int, *, stream: int = 0,
                 schemes=None, pool: InstancePool | None = None,
                 workers: int | None = None) -> CtrEstimate:
    """Monte Carlo estimate of ``y_i(b) = E y_i^tau(b)`` over ``n`` keyed instances.

    The same ``(rng_state, stream)`` always yields the same instances, so calls
    with different bids share common random numbers.  Pass ``pool`` to reuse an
    already sampled (or exact) pool.
    """
    if pool is None:
        if n < 1:
            raise DistributionError("n must be at least 1")
        pool = sample_instances(dist, n, rng_state, stream, workers)
    return pool.ctr(bids, schemes, workers)


@dataclass(frozen=True)
class ProbeResult:
    """CRN curve ``b_i -> y_hat_i`` with diagnostics.

    ``strictly_increasing``: every increment is positive.  ``within_slack``:
    no increment falls below minus one pooled standard error.  ``flagged``:
    the curve has flat or decreasing stretches, the signature of a failure of
    strict monotonicity (for example when click matrices never vary).
    """

    grid: np.ndarray
    y_hat: np.ndarray
    std_err: np.ndarray
    pooled_se: float
    strictly_increasing: bool
    within_slack: bool
    flat_steps: int
    flagged: bool

    @property
    def curve(self) -> list[tuple[float, float]]:
        return [(float(b), float(y)) for b, y in zip(self.grid, self.y_hat)]


def monotonicity_probe(dist: TypeDistribution, base_bids, i: int, grid: Sequence[float], n: int,
                       rng_state: int, *, pool: InstancePool | None = None,
                       workers: int | None = None) -> ProbeResult:
    """Advertiser ``i``'s estimated rate over ``grid`` with common random numbers."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DistributionError("empty bid grid")
    if (np.diff(grid) <= 0).any():
        raise DistributionError("grid must be strictly increasing")
    base = np.array(base_bids.values if isinstance(base_bids, BidProfile) else base_bids, dtype=float)
    if base.ndim != 1:
        raise DistributionError("the probe works on flat bids")
    if pool is None:
        pool = sample_instances(dist, n, rng_state, workers=workers)
    ys, ses = [], []
    for g in grid:
        b = base.copy()
        b[i] = g
        est = pool.ctr(b, workers=workers)
        ys.append(est.y_hat[i])
        ses.append(est.std_err[i])
    y = np.asarray(ys)
    se = np.asarray(ses)
    pooled = float(np.sqrt(np.mean(se**2)))
    d = np.diff(y)
    flat = int(np.sum(d <= 0))
    return ProbeResult(grid, y, se, pooled, bool((d > 0).all()), bool((d >= -pooled).all()),
                       flat, flat > 0)
