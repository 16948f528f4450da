"""Per-click charges: randomized re-solve, VCG rebate and Leonard dual prices.

All three agree in expectation on any fixed click.  The randomized scheme
needs one extra solve per click at a random lower bid; the rebate scheme needs
one solve with the clicked advertiser removed; the Leonard scheme reads every
advertiser's price off a single minimal dual.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .advertisers import BidProfile
from .matching import (ClickMatrix, DualSolution, Matching, solve_assignment,
                       solve_assignment_batch, solve_dual)
from .search_model import BLOCK, InstancePool, Purpose, TypeDistribution, generator, sample_instances

__all__ = [
    "PricingError",
    "ClickEvent",
    "ChargeBreakdown",
    "LeonardPrices",
    "GspResult",
    "PaymentRate",
    "randomized_charge",
    "randomized_charges",
    "expected_randomized_charge",
    "vcg_rebate_charge",
    "leonard_prices",
    "leonard_charge",
    "gsp_closed_form",
    "gsp_sum_form",
    "expected_payment_rate",
    "pool_charges",
    "layout_charge",
]

SCHEMES = ("randomized", "vcg_rebate", "leonard")


class PricingError(ValueError):
    """Raised when a charge is requested for an event that cannot be priced."""


def _bids(bids) -> np.ndarray:
    return np.array(bids.values if isinstance(bids, BidProfile) else bids, dtype=float)


@dataclass(frozen=True, eq=False)
class ClickEvent:
    """A click on the pair ``(advertiser, slot)`` assigned in the matching of ``(instance, bids)``."""

    instance: ClickMatrix
    bids: np.ndarray
    advertiser: int
    slot: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "bids", _bids(self.bids))
        m = solve_assignment(self.instance, self.bids)
        if m.slot_of[self.advertiser] != self.slot or self.slot < 0:
            raise PricingError("clicked advertiser is not assigned to that slot")
        object.__setattr__(self, "_matching", m)

    @property
    def matching(self) -> Matching:
        return self._matching

    @property
    def bid(self) -> float:
        return float(self.bids[self.advertiser])

    @property
    def ctr(self) -> float:
        return float(self.matching.ctr[self.advertiser])

    @classmethod
    def for_advertiser(cls, instance: ClickMatrix, bids, advertiser: int) -> "ClickEvent":
        m = solve_assignment(instance, bids)
        return cls(instance, bids, advertiser, m.slot_of[advertiser])


@dataclass(frozen=True)
class ChargeBreakdown:
    charge: float
    rebate: float
    scheme: str


def _rng(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return generator(int(rng_state), Purpose.CHARGES)


def randomized_charge(ev: ClickEvent, rng_state) -> ChargeBreakdown:
    """Charge ``b_i (1 - y_i(b'_i, b_-i) / y_i(b))`` with ``b'_i ~ Uniform(0, b_i)``."""
    b = ev.bid
    if b <= 0:
        raise PricingError("a positive bid is required")
    y = ev.ctr
    if y <= 0:
        raise PricingError("clicked advertiser has zero click probability")
    low = ev.bids.copy()
    low[ev.advertiser] = _rng(rng_state).uniform(0.0, b)
    y_low = solve_assignment(ev.instance, low).ctr[ev.advertiser]
    charge = b * (1.0 - y_low / y)
    return ChargeBreakdown(charge, b - charge, "randomized")


def randomized_charges(ev: ClickEvent, n: int, rng_state) -> np.ndarray:
    """``n`` independent randomized charges for the same event (vectorized)."""
    b = ev.bid
    y = ev.ctr
    if b <= 0 or y <= 0:
        raise PricingError("a positive bid and click probability are required")
    draws = _rng(rng_state).uniform(0.0, b, n)
    bids = np.broadcast_to(ev.bids, (n, ev.bids.size)).copy()
    bids[:, ev.advertiser] = draws
    cm = ev.instance
    probs = np.broadcast_to(cm.probs, (n,) + cm.probs.shape)
    ben = None if not cm.has_benefits else np.broadcast_to(cm.benefits, (n,) + cm.benefits.shape)
    out = np.empty(n)
    step = 20000
    for s in range(0, n, step):
        e = min(n, s + step)
        res = solve_assignment_batch(probs[s:e], bids[s:e], None if ben is None else ben[s:e], cm.organic)
        out[s:e] = b * (1.0 - res.ctr[:, ev.advertiser] / y)
    return out


def expected_randomized_charge(ev: ClickEvent, xtol: float = 1e-15) -> float:
    """Exact expectation of :func:`randomized_charge` over the uniform draw.

    The own-bid click-through curve is a nondecreasing step function; its
    steps are located by bisection and the uniform integral summed piece by piece.
    """
    b, y = ev.bid, ev.ctr
    if b <= 0 or y <= 0:
        raise PricingError("a positive bid and click probability are required")
    bids = ev.bids.copy()
    i = ev.advertiser

    def ctr_at(x: float) -> float:
        bids[i] = x
        return float(solve_assignment(ev.instance, bids).ctr[i])

    total = 0.0
    width = xtol * max(1.0, b)
    stack = [(0.0, ctr_at(0.0), b, y)]
    while stack:
        a, ya, c, yc = stack.pop()
        if ya == yc:
            total += ya * (c - a)
        elif c - a <= width:
            total += 0.5 * (ya + yc) * (c - a)
        else:
            m = 0.5 * (a + c)
            ym = ctr_at(m)
            stack.append((a, ya, m, ym))
            stack.append((m, ym, c, yc))
    return b - total / y


def vcg_rebate_charge(ev: ClickEvent) -> ChargeBreakdown:
    """Bid less the rebate ``(A(b) - A(0, b_-i)) / y_i(b)``.

    ``A`` is the full assignment objective, benefits included, and
    ``A(0, b_-i)`` comes from one extra solve with the advertiser removed.
    """
    b, y = ev.bid, ev.ctr
    if b <= 0:
        raise PricingError("a positive bid is required")
    if y <= 0:
        raise PricingError("clicked advertiser has zero click probability")
    removed = ev.bids.copy()
    removed[ev.advertiser] = 0.0
    a_without = solve_assignment(ev.instance, removed).objective
    rebate = (ev.matching.objective - a_without) / y
    charge = min(b, max(0.0, b - rebate))
    return ChargeBreakdown(charge, b - charge, "vcg_rebate")


@dataclass(frozen=True, eq=False)
class LeonardPrices:
    matching: Matching
    dual: DualSolution
    per_impression: np.ndarray
    per_click: dict[int, float]


def leonard_prices(instance: ClickMatrix, bids) -> LeonardPrices:
    """Slot prices from the minimal dual and the implied per-click prices ``v_l / p_il``."""
    b = _bids(bids)
    if instance.has_benefits:
        raise PricingError("dual prices are defined for instances without benefits")
    m = solve_assignment(instance, b)
    dual = solve_dual(instance, b, m)
    per_click = {}
    for i, l in enumerate(m.slot_of):
        if l < 0:
            continue
        p = instance.probs[i, l]
        if p <= 0:
            raise PricingError("cannot price per click on a zero-probability pair")
        per_click[i] = float(b[i] - dual.s[i] / p)
    return LeonardPrices(m, dual, dual.v.copy(), per_click)


def leonard_charge(ev: ClickEvent) -> ChargeBreakdown:
    lp = leonard_prices(ev.instance, ev.bids)
    charge = min(ev.bid, max(0.0, lp.per_click[ev.advertiser]))
    return ChargeBreakdown(charge, ev.bid - charge, "leonard")


# --------------------------------------------------------------------------------------
# product form


@dataclass(frozen=True)
class GspResult:
    """Product-form outcome: ``order[l]`` occupies slot ``l``, paying ``charges[l]`` per click.

    ``revenue`` is the expected payment ``sum_l charges[l] q_l p_l``;
    ``revenue_closed_form`` re-derives it as ``sum_m m (p_m - p_{m+1}) b^tau_{m+1}``;
    ``revenue_single_weight`` is the variant with weight 1 on every term, which
    agrees only when at most one slot carries a price.
    """

    order: tuple[int, ...]
    charges: np.ndarray
    revenue: float
    revenue_closed_form: float
    revenue_single_weight: float


def _gsp_order(q: np.ndarray, bids: np.ndarray, seed: int) -> np.ndarray:
    adjusted = bids * q
    perm = generator(seed, Purpose.TIES).permutation(q.size)
    order = perm[np.argsort(-adjusted[perm], kind="stable")]
    return order


def _product_inputs(q, p, bids):
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    bids = _bids(bids)
    if q.shape != bids.shape:
        raise PricingError("one advertiser effect per bid is required")
    if p.ndim != 1 or p.size == 0 or (np.diff(p) >= 0).any():
        raise PricingError("slot effects must be strictly decreasing")
    return q, p, bids


def gsp_closed_form(q, p, bids, seed: int = 0) -> GspResult:
    """Charges and revenue of the product-form instance ``p_il = q_i p_l`` by recursion."""
    q, p, bids = _product_inputs(q, p, bids)
    order = _gsp_order(q, bids, seed)
    L, I = p.size, q.size
    n = min(L, I)
    qs = np.zeros(L + 1)
    bs = np.zeros(L + 1)
    k = min(I, L + 1)
    qs[:k] = q[order[:k]]
    bs[:k] = bids[order[:k]]
    ps = np.append(p, 0.0)
    pi = np.zeros(L + 1)
    for l in range(L - 1, -1, -1):
        if qs[l] == 0 or l >= n:
            pi[l] = 0.0
            continue
        pi[l] = qs[l + 1] / qs[l] * (bs[l + 1] - ps[l + 1] / ps[l] * (bs[l + 1] - pi[l + 1]))
    charges = pi[:n]
    revenue = float(sum(charges[m] * qs[m] * ps[m] for m in range(n)))
    adj = bs * qs
    closed = float(sum((m + 1) * (ps[m] - ps[m + 1]) * adj[m + 1] for m in range(L)))
    single = float(sum((ps[m] - ps[m + 1]) * adj[m + 1] for m in range(L)))
    return GspResult(tuple(int(x) for x in order[:n]), charges, revenue, closed, single)


def gsp_sum_form(q, p, bids, seed: int = 0) -> np.ndarray:
    """Per-click charges from the explicit sum ``q_l pi_l = b^tau_{l+1} - sum_{m>l} p_m (b^tau_m - b^tau_{m+1}) / p_l``."""
    q, p, bids = _product_inputs(q, p, bids)
    order = _gsp_order(q, bids, seed)
    L, I = p.size, q.size
    n = min(L, I)
    adj = np.zeros(L + 2)
    k = min(I, L + 1)
    adj[:k] = (bids * q)[order[:k]]
    out = np.zeros(n)
    for l in range(n):
        tail = sum(p[m] * (adj[m] - adj[m + 1]) for m in range(l + 1, L))
        out[l] = (adj[l + 1] - tail / p[l]) / q[order[l]]
    return out


# --------------------------------------------------------------------------------------
# expected payment


@dataclass(frozen=True)
class PaymentRate:
    """Expected payment per search ``pi_i(b) y_i(b)`` with its standard error."""

    rate: float
    std_err: float
    y_hat: float
    price_per_click: float
    n_samples: int


def expected_payment_rate(dist: TypeDistribution | None, bids, i: int, n: int, quad_points: int = 32,
                          rng_state: int = 0, *, pool: InstancePool | None = None,
                          workers: int | None = None) -> PaymentRate:
    """``integral_0^{b_i} (y_i(b) - y_i(b', b_-i)) db'`` by Gauss-Legendre on a CRN pool."""
    b = _bids(bids)
    if b.ndim != 1 or b[i] <= 0:
        raise PricingError("a positive flat bid is required")
    if quad_points < 1:
        raise PricingError("at least one quadrature node is required")
    if pool is None:
        pool = sample_instances(dist, n, rng_state, workers=workers)
    x, w = np.polynomial.legendre.leggauss(quad_points)
    nodes = 0.5 * b[i] * (x + 1.0)
    wts = 0.5 * b[i] * w
    y_full = pool.solve(b, workers).ctr[:, i]
    per = np.zeros(pool.size)
    for node, wt in zip(nodes, wts):
        bb = b.copy()
        bb[i] = node
        per += wt * (y_full - pool.solve(bb, workers).ctr[:, i])
    m, se = pool.mean(np.column_stack([per, y_full]))
    rate, y = float(m[0]), float(m[1])
    return PaymentRate(rate, float(se[0]), y, rate / y if y > 0 else 0.0, pool.size)


def pool_charges(pool: InstancePool, bids, scheme: str, seed: int = 0,
                 workers: int | None = None) -> np.ndarray:
    """Per-click charge of every assigned advertiser on every instance, (N, I); NaN if unassigned.

    ``bids`` is (I,) or per-instance (N, I).

    ``randomized`` uses one keyed uniform draw per (instance, advertiser) from the
    charge stream; ``vcg_rebate`` uses one removal solve per advertiser;
    ``leonard`` reads the minimal dual of each instance.
    """
    if scheme not in SCHEMES:
        raise PricingError(f"unknown pricing scheme {scheme!r}")
    N, I = pool.size, pool.n_advertisers
    b = np.broadcast_to(_bids(bids), (N, I)).copy()
    base = pool.solve(b, workers)
    y = base.ctr
    assigned = base.slot_of[:, :I] >= 0
    out = np.full((N, I), np.nan)
    if N == 0:
        return out
    with np.errstate(divide="ignore", invalid="ignore"):
        if scheme == "vcg_rebate":
            for i in range(I):
                bb = b.copy()
                bb[:, i] = 0.0
                without = pool.solve(bb, workers).objective
                rebate = (base.objective - without) / y[:, i]
                out[:, i] = np.clip(b[:, i] - rebate, 0.0, b[:, i])
        elif scheme == "randomized":
            nblk = (N + BLOCK - 1) // BLOCK
            u = np.concatenate([generator(seed, Purpose.CHARGES, pool.stream, k).random((BLOCK, I))
                                for k in range(nblk)])[:N]
            for i in range(I):
                bb = b.copy()
                bb[:, i] = u[:, i] * b[:, i]
                low = pool.solve(bb, workers).ctr[:, i]
                out[:, i] = b[:, i] * (1.0 - low / y[:, i])
        else:
            for n in range(N):
                if not assigned[n].any():
                    continue
                lp = leonard_prices(pool.matrix(n), b[n])
                for i, price in lp.per_click.items():
                    if i < I:
                        out[n, i] = min(b[n, i], max(0.0, price))
    out[~assigned] = np.nan
    return out


def layout_charge(layouts: Sequence, bids, i: int, scheme: str = "vcg_rebate", rng_state=0) -> ChargeBreakdown:
    """Per-click charge of advertiser ``i`` under a general layout auction.

    ``vcg_rebate`` removes ``i`` and re-solves; ``randomized`` re-solves at a
    uniform lower bid.  Dual prices do not exist for general layouts.
    """
    from .matching import solve_layout_auction

    b = _bids(bids)
    chosen, y = solve_layout_auction(layouts, b)
    if b[i] <= 0 or y[i] <= 0:
        raise PricingError("advertiser is not shown in the chosen layout")
    if scheme == "vcg_rebate":
        value = float(np.dot(b, y))
        bb = b.copy()
        bb[i] = 0.0
        _, y0 = solve_layout_auction(layouts, bb)
        rebate = (value - float(np.dot(bb, y0))) / y[i]
        charge = min(b[i], max(0.0, b[i] - rebate))
    elif scheme == "randomized":
        bb = b.copy()
        bb[i] = _rng(rng_state).uniform(0.0, b[i])
        _, y_low = solve_layout_auction(layouts, bb)
        charge = b[i] * (1.0 - y_low[i] / y[i])
    else:
        raise PricingError(f"scheme {scheme!r} is not available for general layouts")
    return ChargeBreakdown(float(charge), float(b[i] - charge), scheme)
