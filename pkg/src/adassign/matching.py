"""Per-search assignment of adverts to slots.

The platform solves one maximum-weight bipartite matching per search
instance, with weight ``b_i * p_il + q_il`` for advert ``i`` in slot ``l``.
Only pairs with strictly positive weight are ever assigned and an advertiser
bidding zero is never shown.  Among optimal matchings the lexicographically
smallest ``slot_of`` vector wins, where "unassigned" sorts after every slot.

Three solvers share that contract:

* :func:`solve_assignment` -- Hungarian method plus a lexicographic refinement,
  used for single instances;
* :func:`solve_assignment_batch` -- vectorized scoring of every partial
  matching, used by the Monte Carlo estimators;
* :func:`enumerate_matchings` -- exhaustive depth-first search kept as an
  independent test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "AssignmentError",
    "ClickMatrix",
    "Matching",
    "DualSolution",
    "Layout",
    "BatchAssignment",
    "solve_assignment",
    "solve_assignment_batch",
    "enumerate_matchings",
    "solve_dual",
    "solve_layout_auction",
    "ordered_slot_layouts",
    "image_text_layouts",
    "solve_image_text",
    "count_matchings",
]

# Relative window inside which two objective values are considered tied.
TIE_RTOL = 1e-13
MAX_ENUMERATION_SIZE = 8
# Largest number of partial matchings scored at once by the batch engine.
TABLE_LIMIT = 20_000
_CHUNK_CELLS = 4_000_000


class AssignmentError(ValueError):
    """Raised for malformed assignment inputs or infeasible dual starts."""


@dataclass(frozen=True, eq=False)
class ClickMatrix:
    """One realized search instance.

    Parameters
    ----------
    probs : array (I, L)
        Click probabilities ``p_il`` of advert ``i`` in slot ``l``.
    benefits : array (I, L), optional
        Per-impression benefit ``q_il`` added to the assignment objective.
    organic : array (K, L), optional
        Benefits of organic results competing for the same slots.  Organic
        rows carry no bid and never receive charges.
    """

    probs: np.ndarray
    benefits: np.ndarray | None = None
    organic: np.ndarray | None = None

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=float)
        if probs.ndim == 1:
            probs = probs[:, None]
        if probs.ndim != 2:
            raise AssignmentError("probs must be a 2-D advertiser x slot matrix")
        if np.isnan(probs).any():
            raise AssignmentError("NaN click probability")
        if (probs < 0).any() or (probs > 1).any():
            raise AssignmentError("click probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", probs)
        if self.benefits is not None:
            benefits = np.array(self.benefits, dtype=float)
            if benefits.ndim == 1 and probs.shape[1] == 1:
                benefits = benefits[:, None]
            if benefits.shape != probs.shape:
                raise AssignmentError(
                    f"benefits shape {benefits.shape} does not match probs {probs.shape}")
            object.__setattr__(self, "benefits", benefits)
        if self.organic is not None:
            organic = np.array(self.organic, dtype=float)
            if organic.ndim == 1:
                organic = organic[None, :]
            if organic.ndim != 2 or organic.shape[1] != probs.shape[1]:
                raise AssignmentError("organic benefits must have one column per slot")
            object.__setattr__(self, "organic", organic)

    @property
    def n_advertisers(self) -> int:
        return self.probs.shape[0]

    @property
    def n_slots(self) -> int:
        return self.probs.shape[1]

    @property
    def has_benefits(self) -> bool:
        nonzero = self.benefits is not None and bool(np.any(self.benefits != 0))
        return nonzero or (self.organic is not None and self.organic.size > 0)


@dataclass(frozen=True, eq=False)
class Matching:
    """Integral assignment for one instance.

    ``slot_of[i]`` is the slot of advertiser ``i`` or ``-1``;
    ``ctr[i]`` is the realized click-through rate ``y_i^tau``.
    """

    slot_of: tuple[int, ...]
    objective: float
    ctr: np.ndarray
    organic_slot_of: tuple[int, ...] = ()

    def as_dict(self) -> dict[int, int]:
        return {i: l for i, l in enumerate(self.slot_of) if l >= 0}


@dataclass(frozen=True, eq=False)
class DualSolution:
    """Dual prices of the assignment LP: advertiser surpluses ``s`` and slot prices ``v``."""

    s: np.ndarray
    v: np.ndarray

    @property
    def total(self) -> float:
        return float(self.s.sum() + self.v.sum())


@dataclass(frozen=True, eq=False)
class Layout:
    """A candidate page layout with the click probability it gives each advertiser."""

    id: object
    ctr_of: np.ndarray

    def __post_init__(self) -> None:
        ctr = np.asarray(self.ctr_of, dtype=float)
        if ctr.ndim != 1:
            raise AssignmentError("layout ctr_of must be a vector over advertisers")
        if (ctr < 0).any() or (ctr > 1).any() or np.isnan(ctr).any():
            raise AssignmentError("layout click probabilities must lie in [0, 1]")
        object.__setattr__(self, "ctr_of", ctr)

    @classmethod
    def from_mapping(cls, id: object, ctr_of: Mapping[int, float], n_advertisers: int) -> "Layout":
        ctr = np.zeros(n_advertisers)
        for i, p in ctr_of.items():
            ctr[i] = p
        return cls(id, ctr)


def _check_bids(bids, n: int) -> np.ndarray:
    b = np.asarray(getattr(bids, "values", bids), dtype=float)
    if b.ndim != 1 or b.shape[0] != n:
        raise AssignmentError(f"expected {n} flat bids, got shape {b.shape}")
    if np.isnan(b).any():
        raise AssignmentError("NaN bid")
    if (b < 0).any():
        raise AssignmentError("bids must be nonnegative")
    return b


def _weights(cm: ClickMatrix, bids) -> tuple[np.ndarray, np.ndarray]:
    """Weight matrix and eligibility mask, organic rows appended below advertisers."""
    b = _check_bids(bids, cm.n_advertisers)
    with np.errstate(invalid="ignore"):
        w = b[:, None] * cm.probs
    if cm.benefits is not None:
        w = w + cm.benefits
    elig = (w > 0) & (b[:, None] > 0)
    if cm.organic is not None:
        w = np.vstack([w, cm.organic])
        elig = np.vstack([elig, cm.organic > 0])
    if np.isnan(w).any():
        raise AssignmentError("NaN weight")
    return w, elig


def _hungarian(gain: list[list[float]]) -> list[int]:
    """Maximum-weight assignment of rows to columns (rows <= columns), all gains >= 0.

    Shortest augmenting path form of the Hungarian method, O(n^2 m).
    Returns the column of every row.
    """
    n = len(gain)
    m = len(gain[0])
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = gain[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = -row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            col_of[p[j] - 1] = j - 1
    return col_of


def _max_value(w: np.ndarray, elig: np.ndarray, rows: Sequence[int], cols: Sequence[int]) -> float:
    """Optimal objective of the subproblem restricted to ``rows`` x ``cols``."""
    if not rows or not cols:
        return 0.0
    gain = [[float(w[r, c]) if elig[r, c] else 0.0 for c in cols] + [0.0] * len(rows) for r in rows]
    col_of = _hungarian(gain)
    total = 0.0
    for r, c in zip(rows, col_of):
        if c < len(cols) and elig[r, cols[c]]:
            total += float(w[r, cols[c]])
    return total


def _solve_rows(w: np.ndarray, elig: np.ndarray) -> tuple[list[int], float]:
    """Lexicographically smallest optimal matching of all rows of ``w``."""
    R, L = w.shape
    best = _max_value(w, elig, list(range(R)), list(range(L)))
    tol = TIE_RTOL * max(1.0, abs(best))
    slot_of: list[int] = []
    used: set[int] = set()
    acc = 0.0
    for r in range(R):
        rest = list(range(r + 1, R))
        candidates = [l for l in range(L) if elig[r, l] and l not in used] + [-1]
        values = []
        chosen = None
        for l in candidates:
            free = [c for c in range(L) if c not in used and c != l]
            gain = float(w[r, l]) if l >= 0 else 0.0
            total = acc + gain + _max_value(w, elig, rest, free)
            values.append(total)
            if total >= best - tol:
                chosen = l
                break
        if chosen is None:  # rounding fallback: keep the best completion
            chosen = candidates[int(np.argmax(values))]
        slot_of.append(chosen)
        if chosen >= 0:
            used.add(chosen)
            acc += float(w[r, chosen])
    objective = 0.0
    for r, l in enumerate(slot_of):
        objective += float(w[r, l]) if l >= 0 else 0.0
    return slot_of, objective


def _package(cm: ClickMatrix, rows: list[int], objective: float) -> Matching:
    n = cm.n_advertisers
    ctr = np.array([cm.probs[i, l] if l >= 0 else 0.0 for i, l in enumerate(rows[:n])])
    return Matching(tuple(rows[:n]), objective, ctr, tuple(rows[n:]))


def solve_assignment(cm: ClickMatrix, bids) -> Matching:
    """Maximum-weight matching of adverts to slots for one instance.

    Parameters
    ----------
    cm : ClickMatrix
        The realized search instance.
    bids : array-like (I,)
        Nonnegative per-click bids.

    Returns
    -------
    Matching
        The lexicographically smallest optimal matching.
    """
    w, elig = _weights(cm, bids)
    rows, objective = _solve_rows(w, elig)
    return _package(cm, rows, objective)


def _partial_maps(R: int, L: int, elig: np.ndarray):
    """All injective partial maps rows -> eligible columns, in lexicographic order."""
    slot_of = [-1] * R
    used = [False] * L

    def rec(r: int):
        if r == R:
            yield tuple(slot_of)
            return
        for l in range(L):
            if not used[l] and elig[r, l]:
                used[l] = True
                slot_of[r] = l
                yield from rec(r + 1)
                used[l] = False
        slot_of[r] = -1
        yield from rec(r + 1)

    yield from rec(0)


def enumerate_matchings(cm: ClickMatrix, bids) -> Matching:
    """Exact optimum by exhaustive enumeration (test oracle, at most 8 x 8)."""
    if cm.n_advertisers > MAX_ENUMERATION_SIZE or cm.n_slots > MAX_ENUMERATION_SIZE:
        raise AssignmentError("instance too large for enumeration")
    w, elig = _weights(cm, bids)
    R, L = w.shape
    wl = w.tolist()

    def value(rows: tuple[int, ...]) -> float:
        return sum(wl[r][l] if l >= 0 else 0.0 for r, l in enumerate(rows))

    best = max(value(rows) for rows in _partial_maps(R, L, elig))
    tol = TIE_RTOL * max(1.0, abs(best))
    for rows in _partial_maps(R, L, elig):
        val = value(rows)
        if val >= best - tol:
            return _package(cm, list(rows), val)
    raise AssertionError("unreachable")


def count_matchings(R: int, L: int) -> int:
    """Number of injective partial maps from R rows to L columns."""
    return sum(math.comb(R, k) * math.comb(L, k) * math.factorial(k) for k in range(min(R, L) + 1))


@lru_cache(maxsize=64)
def _matching_table(R: int, L: int) -> tuple[np.ndarray, np.ndarray]:
    everything = np.ones((R, L), dtype=bool)
    table = np.array(list(_partial_maps(R, L, everything)), dtype=np.int64).reshape(-1, R)
    incidence = np.zeros((table.shape[0], R * L))
    for r in range(R):
        assigned = table[:, r] >= 0
        incidence[np.nonzero(assigned)[0], r * L + table[assigned, r]] = 1.0
    table.setflags(write=False)
    incidence.setflags(write=False)
    return table, incidence


@dataclass(frozen=True, eq=False)
class BatchAssignment:
    """Solutions for a stack of instances: ``slot_of`` (N, R), ``objective`` (N,), ``ctr`` (N, I)."""

    slot_of: np.ndarray
    objective: np.ndarray
    ctr: np.ndarray


def solve_assignment_batch(probs: np.ndarray, bids: np.ndarray, benefits: np.ndarray | None = None,
                           organic: np.ndarray | None = None) -> BatchAssignment:
    """Solve many instances at once with the same tie-break contract as :func:`solve_assignment`.

    Parameters
    ----------
    probs : array (N, I, L)
    bids : array (I,) or (N, I)
        Effective bid of each advertiser on each instance.
    benefits : array (N, I, L), optional
    organic : array (K, L), optional
        Organic-result benefits shared by every instance.
    """
    probs = np.asarray(probs, dtype=float)
    N, I, L = probs.shape
    b = np.broadcast_to(np.asarray(bids, dtype=float), (N, I))
    if np.isnan(b).any():
        raise AssignmentError("NaN bid")
    if (b < 0).any():
        raise AssignmentError("bids must be nonnegative")
    w = b[:, :, None] * probs
    if benefits is not None:
        w = w + benefits
    elig = (w > 0) & (b[:, :, None] > 0)
    if organic is not None and np.size(organic):
        org = np.broadcast_to(np.asarray(organic, dtype=float), (N,) + np.shape(organic))
        w = np.concatenate([w, org], axis=1)
        elig = np.concatenate([elig, org > 0], axis=1)
    if np.isnan(w).any():
        raise AssignmentError("NaN weight")
    R = w.shape[1]
    slot_of = np.full((N, R), -1, dtype=np.int64)
    if N and R and L:
        if count_matchings(R, L) <= TABLE_LIMIT:
            _score_table(w, elig, slot_of)
        else:
            for n in range(N):
                slot_of[n], _ = _solve_rows(w[n], elig[n])
    rows = np.arange(N)
    objective = np.zeros(N)
    ctr = np.zeros((N, I))
    for r in range(R):
        assigned = slot_of[:, r] >= 0
        col = np.where(assigned, slot_of[:, r], 0)
        objective = objective + np.where(assigned, w[rows, r, col], 0.0)
        if r < I:
            ctr[:, r] = np.where(assigned, probs[rows, r, col], 0.0)
    return BatchAssignment(slot_of, objective, ctr)


def _score_table(w: np.ndarray, elig: np.ndarray, out: np.ndarray) -> None:
    N, R, L = w.shape
    table, incidence = _matching_table(R, L)
    M = table.shape[0]
    chunk = max(1, _CHUNK_CELLS // M)
    flat_w = np.where(elig, w, 0.0).reshape(N, R * L)
    flat_bad = (~elig).reshape(N, R * L).astype(float)
    inc_t = incidence.T
    for start in range(0, N, chunk):
        stop = min(N, start + chunk)
        vals = flat_w[start:stop] @ inc_t
        vals[(flat_bad[start:stop] @ inc_t) > 0] = -np.inf
        vmax = vals.max(axis=1)
        tol = TIE_RTOL * np.maximum(1.0, np.abs(vmax))
        first = np.argmax(vals >= (vmax - tol)[:, None], axis=1)
        out[start:stop] = table[first]


def solve_dual(cm: ClickMatrix, bids, m: Matching, atol: float = 1e-9) -> DualSolution:
    """Minimal dual of the assignment LP (simultaneous VCG prices).

    With an optimal matching fixed, complementary slackness pins ``s_i`` to
    ``w_{i,mu(i)} - v_{mu(i)}`` and leaves a system of difference constraints
    on the slot prices; its least solution minimizes ``sum(v)``.
    """
    if cm.has_benefits:
        raise AssignmentError("dual prices are defined for the pure bid objective only")
    b = _check_bids(bids, cm.n_advertisers)
    w = b[:, None] * cm.probs
    I, L = w.shape
    if len(m.slot_of) != I:
        raise AssignmentError("matching does not belong to this instance")
    slot_of = list(m.slot_of)
    owner = [-1] * L
    for i, l in enumerate(slot_of):
        if l >= 0:
            owner[l] = i
    v = np.zeros(L)
    for i in range(I):
        if slot_of[i] < 0:
            v = np.maximum(v, w[i])
    matched = [i for i in range(I) if slot_of[i] >= 0]
    for _ in range(L + 1):
        changed = False
        for i in matched:
            li = slot_of[i]
            bound = v[li] + w[i] - w[i, li]
            bound[li] = v[li]
            grow = bound > v + atol * 1e-3
            if grow.any():
                v = np.where(grow, bound, v)
                changed = True
        if not changed:
            break
    else:
        raise AssignmentError("positive alternating cycle: matching is not optimal")
    s = np.zeros(I)
    for i in matched:
        s[i] = w[i, slot_of[i]] - v[slot_of[i]]
    scale = atol * max(1.0, float(np.abs(w).max(initial=0.0)))
    free_slots = [l for l in range(L) if owner[l] < 0]
    if (s < -scale).any() or (v[free_slots] > scale).any():
        raise AssignmentError("no feasible dual attains the matching value: matching is not optimal")
    if (s[:, None] + v[None, :] < w - scale).any():
        raise AssignmentError("dual infeasible: matching is not optimal")
    return DualSolution(np.maximum(s, 0.0), np.maximum(v, 0.0))


def solve_layout_auction(layouts: Sequence[Layout], bids) -> tuple[Layout, np.ndarray]:
    """Pick the layout maximizing ``sum_i b_i p_il``; ties go to the earliest layout."""
    if not layouts:
        raise AssignmentError("empty layout list")
    b = _check_bids(bids, layouts[0].ctr_of.shape[0])
    values = [float(np.dot(b, lay.ctr_of)) for lay in layouts]
    best = max(values)
    tol = TIE_RTOL * max(1.0, abs(best))
    for lay, val in zip(layouts, values):
        if val >= best - tol:
            return lay, np.where(b > 0, lay.ctr_of, 0.0)
    raise AssertionError("unreachable")


def ordered_slot_layouts(cm: ClickMatrix) -> list[Layout]:
    """Every injective placement of adverts into ordered slots, as explicit layouts."""
    everything = np.ones((cm.n_advertisers, cm.n_slots), dtype=bool)
    out = []
    for rows in _partial_maps(cm.n_advertisers, cm.n_slots, everything):
        ctr = np.array([cm.probs[i, l] if l >= 0 else 0.0 for i, l in enumerate(rows)])
        out.append(Layout(("text",) + rows, ctr))
    return out


def image_text_layouts(text: ClickMatrix, image_probs) -> list[Layout]:
    """Exhaustive layouts of an image-text page: one per image advert, then every text placement.

    ``image_probs[i]`` is zero for advertisers without an image advert.
    """
    image_probs = np.asarray(image_probs, dtype=float)
    out = []
    for i in np.nonzero(image_probs > 0)[0]:
        ctr = np.zeros(text.n_advertisers)
        ctr[i] = image_probs[i]
        out.append(Layout(("image", int(i)), ctr))
    return out + ordered_slot_layouts(text)


def solve_image_text(text: ClickMatrix, image_probs, bids) -> tuple[Layout, np.ndarray]:
    """Show text adverts if their assignment optimum beats the best image product, else that image."""
    image_probs = np.asarray(image_probs, dtype=float)
    b = _check_bids(bids, text.n_advertisers)
    m = solve_assignment(text, b)
    products = np.where(b > 0, b * image_probs, 0.0)
    best_image = int(np.argmax(products)) if products.size else -1
    if best_image >= 0 and products[best_image] > 0 and not m.objective > products[best_image]:
        ctr = np.zeros(text.n_advertisers)
        ctr[best_image] = image_probs[best_image]
        return Layout(("image", best_image), ctr), ctr
    return Layout(("text",) + m.slot_of, m.ctr), m.ctr
