"""Advertiser preferences: utilities, marginal utility, demand and consumer surplus.

A profile is either *flat* (one click-through rate, one bid) or
*categorized* (one rate and one bid per category in the advertiser's
partition of search types).  Categorized profiles come in three shapes:

* separable -- the same univariate utility applied to every category and summed;
* weighted  -- a univariate utility of the weighted total ``sum_k w_k y_k``;
* budget    -- ``(B / q) log sum_k (w_k y_k)^q``, whose demand spends exactly ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "UtilityError",
    "UtilityFamily",
    "CategoryScheme",
    "Budget",
    "AdvertiserProfile",
    "BidProfile",
    "marginal_utility",
    "demand",
    "surplus",
]


class UtilityError(ValueError):
    """Raised when a utility is evaluated outside its domain."""


def _positive(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.isnan(arr).any() or (arr <= 0).any():
        raise UtilityError(f"{what} must be strictly positive")
    return arr


@dataclass(frozen=True)
class UtilityFamily:
    """Univariate utility ``U(y)``.

    ``log``: ``scale * log(y)``.  ``isoelastic``: ``scale * y**(1-a) / (1-a)``
    with ``a = elasticity``.  ``budget_ces`` is multivariate; its parameters
    live on :class:`Budget`.
    """

    kind: str = "isoelastic"
    scale: float = 1.0
    elasticity: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in ("log", "isoelastic", "budget_ces"):
            raise UtilityError(f"unknown utility kind {self.kind!r}")
        if self.scale <= 0:
            raise UtilityError("utility scale must be positive")
        if self.kind == "isoelastic" and (self.elasticity <= 0 or self.elasticity == 1):
            raise UtilityError("isoelastic utility needs a > 0, a != 1")

    def value(self, y):
        y = _positive(y, "click-through rate")
        if self.kind == "log":
            return self.scale * np.log(y)
        a = self.elasticity
        return self.scale * y ** (1 - a) / (1 - a)

    def marginal(self, y):
        y = _positive(y, "click-through rate")
        if self.kind == "log":
            return self.scale / y
        return self.scale * y ** (-self.elasticity)

    def demand(self, price):
        price = _positive(price, "price")
        if self.kind == "log":
            return self.scale / price
        return (self.scale / price) ** (1.0 / self.elasticity)

    def surplus(self, price):
        price = _positive(price, "price")
        d = self.demand(price)
        if self.kind == "log":
            return self.scale * np.log(d) - self.scale
        a = self.elasticity
        return self.scale * a / (1 - a) * d ** (1 - a)


@dataclass(frozen=True)
class CategoryScheme:
    """Partition of the search-type regions seen by one advertiser.

    ``membership[r]`` is the category of region ``r``.
    """

    n_categories: int
    membership: tuple[int, ...]

    def __post_init__(self) -> None:
        membership = tuple(int(k) for k in self.membership)
        object.__setattr__(self, "membership", membership)
        if self.n_categories < 1:
            raise UtilityError("a category scheme needs at least one category")
        if any(k < 0 or k >= self.n_categories for k in membership):
            raise UtilityError("membership refers to an undefined category")

    def category_of(self, regions: np.ndarray) -> np.ndarray:
        regions = np.asarray(regions, dtype=np.int64)
        if regions.size and regions.max() >= len(self.membership):
            raise UtilityError("search region outside the category scheme")
        return np.asarray(self.membership, dtype=np.int64)[regions]


@dataclass(frozen=True)
class Budget:
    amount: float
    ces_exponent: float = 0.5

    def __post_init__(self) -> None:
        if self.amount <= 0:
            raise UtilityError("budget must be positive")
        if not 0 < self.ces_exponent < 1:
            raise UtilityError("CES exponent must lie in (0, 1)")


@dataclass(frozen=True)
class AdvertiserProfile:
    utility: UtilityFamily = UtilityFamily()
    categories: CategoryScheme | None = None
    weights: tuple[float, ...] | None = None
    budget: Budget | None = None

    def __post_init__(self) -> None:
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if any(x <= 0 for x in w):
                raise UtilityError("category weights must be positive")
            object.__setattr__(self, "weights", w)
        if self.utility.kind == "budget_ces":
            if self.budget is None or self.categories is None:
                raise UtilityError("budget_ces needs a budget and a category scheme")
        elif self.budget is not None:
            raise UtilityError("a budget is only meaningful with budget_ces utility")
        if self.weights is not None:
            if self.categories is None or len(self.weights) != self.categories.n_categories:
                raise UtilityError("one weight per category is required")

    @property
    def n_categories(self) -> int:
        return 1 if self.categories is None else self.categories.n_categories

    @property
    def mode(self) -> str:
        if self.categories is None:
            return "flat"
        if self.utility.kind == "budget_ces":
            return "budget"
        return "weighted" if self.weights is not None else "separable"

    def _w(self) -> np.ndarray:
        return np.ones(self.n_categories) if self.weights is None else np.asarray(self.weights)

    def _vec(self, x, what: str) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        if self.mode != "flat" and arr.shape != (self.n_categories,):
            raise UtilityError(f"{what} must have one entry per category ({self.n_categories})")
        return arr

    # utility and its transforms ----------------------------------------
    def value(self, y) -> float:
        y = self._vec(y, "rates")
        mode = self.mode
        if mode == "flat":
            return float(self.utility.value(y))
        if mode == "separable":
            return float(np.sum(self.utility.value(y)))
        if mode == "weighted":
            return float(self.utility.value(np.dot(self._w(), y)))
        y = _positive(y, "click-through rate")
        B, q = self.budget.amount, self.budget.ces_exponent
        return float(B / q * np.log(np.sum((self._w() * y) ** q)))

    def marginal(self, y):
        y = self._vec(y, "rates")
        mode = self.mode
        if mode in ("flat", "separable"):
            return self.utility.marginal(y)
        w = self._w()
        if mode == "weighted":
            return w * self.utility.marginal(np.dot(w, _positive(y, "click-through rate")))
        y = _positive(y, "click-through rate")
        B, q = self.budget.amount, self.budget.ces_exponent
        return B * w**q * y ** (q - 1) / np.sum((w * y) ** q)

    def demand(self, price):
        price = self._vec(price, "prices")
        mode = self.mode
        if mode in ("flat", "separable"):
            return self.utility.demand(price)
        if mode == "weighted":
            raise UtilityError("demand of a weighted-sum utility is not unique")
        price = _positive(price, "price")
        B, q = self.budget.amount, self.budget.ces_exponent
        log_c = (q * np.log(self._w()) - np.log(price)) / (1 - q)
        c = np.exp(log_c - log_c.max())
        return B * c / np.dot(price, c)

    def surplus(self, price) -> float:
        price = self._vec(price, "prices")
        mode = self.mode
        if mode == "flat":
            return float(self.utility.surplus(price))
        if mode == "separable":
            return float(np.sum(self.utility.surplus(price)))
        if mode == "weighted":
            price = _positive(price, "price")
            return float(self.utility.surplus(np.min(price / self._w())))
        return self.value(self.demand(price)) - self.budget.amount

    # quantities driving bid updates --------------------------------------
    def target_price(self, y_hat, price) -> np.ndarray:
        """Marginal utility the advertiser would equate its bid to, given observed rates.

        Its sign relative to ``price`` matches the sign of ``demand(price) - y_hat``
        category by category (for weighted utilities it is the plain gradient).
        Zero observed rates map to an infinite target.
        """
        y_hat = np.asarray(y_hat, dtype=float)
        price = np.asarray(price, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            mode = self.mode
            if mode in ("flat", "separable"):
                u = self.utility
                if u.kind == "log":
                    out = u.scale / y_hat
                else:
                    out = u.scale * y_hat ** (-u.elasticity)
            elif mode == "weighted":
                z = np.dot(self._w(), y_hat)
                out = self._w() * (self.utility.marginal(z) if z > 0 else np.inf)
            else:
                w = self._w()
                B, q = self.budget.amount, self.budget.ces_exponent
                d = self.demand(price)
                base = (w * d) ** q
                own = (w * y_hat) ** q
                denom = base.sum() - base + own
                out = B * w**q * y_hat ** (q - 1) / denom
        return np.where(y_hat > 0, out, np.inf)

    def residual(self, y_hat, price) -> np.ndarray:
        """Relative optimality residual at bid ``price`` and observed rates ``y_hat``.

        ``(D(b) - y_hat) / D(b)`` where demand is unique, otherwise
        ``(target - b) / b``.
        """
        y_hat = np.asarray(y_hat, dtype=float)
        price = np.asarray(price, dtype=float)
        if self.mode == "weighted":
            return (self.target_price(y_hat, price) - price) / price
        d = self.demand(price)
        return (d - y_hat) / d


def marginal_utility(p: AdvertiserProfile, y):
    """Exact marginal utility (gradient for categorized profiles)."""
    return p.marginal(y)


def demand(p: AdvertiserProfile, price):
    """Click-through rate the advertiser buys at fixed per-click prices."""
    return p.demand(price)


def surplus(p: AdvertiserProfile, price) -> float:
    """Consumer surplus ``max_y U(y) - <price, y>``."""
    return p.surplus(price)


@dataclass(frozen=True, eq=False)
class BidProfile:
    """Bids of every advertiser: shape (I,) flat or (I, K) per category.

    Advertisers with fewer than ``K`` categories leave trailing entries unused.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim not in (1, 2):
            raise UtilityError("bids must be a vector or an advertiser x category matrix")
        if np.isnan(v).any() or (v < 0).any():
            raise UtilityError("bids must be nonnegative")
        object.__setattr__(self, "values", v)

    @property
    def is_flat(self) -> bool:
        return self.values.ndim == 1

    @property
    def n_advertisers(self) -> int:
        return self.values.shape[0]

    @classmethod
    def declared(cls, base: Sequence[float], weights: Sequence[Sequence[float]]) -> "BidProfile":
        """Expand declared ``(b_i, w_ik)`` pairs into per-category bids ``b_i * w_ik``."""
        base = np.asarray(base, dtype=float)
        K = max(len(w) for w in weights)
        out = np.zeros((len(base), K))
        for i, w in enumerate(weights):
            out[i, : len(w)] = base[i] * np.asarray(w, dtype=float)
        return cls(out)

    @classmethod
    def per_category(cls, bids: Sequence[Sequence[float]]) -> "BidProfile":
        K = max(len(b) for b in bids)
        out = np.zeros((len(bids), K))
        for i, b in enumerate(bids):
            out[i, : len(b)] = b
        return cls(out)
