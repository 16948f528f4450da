from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment, linprog


def brute_force_objective(w: np.ndarray) -> float:
    """Best total weight over all partial injective maps, by permutations of padded columns."""
    R, L = w.shape
    padded = np.concatenate([np.maximum(w, 0.0), np.zeros((R, R))], axis=1)
    best = 0.0
    for cols in itertools.permutations(range(L + R), R):
        best = max(best, float(sum(padded[r, c] for r, c in enumerate(cols))))
    return best


def lsa_objective(w: np.ndarray) -> float:
    """Max-weight matching value via scipy with dummy columns so nobody is forced in."""
    R, L = w.shape
    padded = np.concatenate([np.maximum(w, 0.0), np.zeros((R, R))], axis=1)
    r, c = linear_sum_assignment(padded, maximize=True)
    return float(padded[r, c].sum())


def lp_min_slot_prices(w: np.ndarray) -> tuple[float, float]:
    """(optimal LP dual value, least sum of slot prices among optimal duals)."""
    I, L = w.shape
    n = I + L
    A = np.zeros((I * L, n))
    for i in range(I):
        for l in range(L):
            A[i * L + l, i] = -1.0
            A[i * L + l, I + l] = -1.0
    rhs = -w.reshape(-1)
    first = linprog(np.ones(n), A_ub=A, b_ub=rhs, bounds=[(0, None)] * n, method="highs")
    total = first.fun
    c2 = np.concatenate([np.zeros(I), np.ones(L)])
    second = linprog(c2, A_ub=A, b_ub=rhs, A_eq=np.ones((1, n)), b_eq=[total],
                     bounds=[(0, None)] * n, method="highs")
    return float(total), float(second.fun)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
