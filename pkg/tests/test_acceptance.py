"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
when output capture is on).
"""

from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from adassign.advertisers import AdvertiserProfile, Budget, CategoryScheme, UtilityFamily
from adassign.dynamics import DynamicsConfig, run_trajectory
from adassign.equilibrium import EquilibriumConfig, solve_equilibrium, system_oracle
from adassign.harness.cli import main
from adassign.matching import (
    ClickMatrix,
    enumerate_matchings,
    image_text_layouts,
    solve_assignment,
    solve_dual,
    solve_image_text,
    solve_layout_auction,
)
from adassign.pricing import (
    ClickEvent,
    expected_payment_rate,
    expected_randomized_charge,
    gsp_closed_form,
    leonard_charge,
    randomized_charges,
    vcg_rebate_charge,
)
from adassign.search_model import (
    ReservePolicy,
    TypeDistribution,
    estimate_ctr,
    monotonicity_probe,
    sample_instances,
)
from conftest import lp_min_slot_prices, lsa_objective

N_SAMPLES = 20_000


def report(capsys, number: int, title: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
    assert ok, f"criterion {number} failed: {detail}"


def iso(scale=1.0):
    return AdvertiserProfile(UtilityFamily("isoelastic", scale, 2.0))


def log(scale=1.0):
    return AdvertiserProfile(UtilityFamily("log", scale))


def matching_instances(seed=2024, n=1000):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        I = int(rng.integers(1, 6))
        L = int(rng.integers(1, 6))
        p = rng.uniform(0, 1, (I, L))
        b = rng.exponential(1.0, I) * (rng.uniform(size=I) > 0.1)
        q = rng.normal(0, 0.5, (I, L))
        out.append((p, b, q))
    return out


CANONICAL = {
    "two": (TypeDistribution("ordered_polytope_uniform", 2, 2), [log(), iso()]),
    "three": (TypeDistribution("ordered_polytope_uniform", 3, 2), [iso(), iso(1.5), log()]),
    "four": (TypeDistribution("ordered_polytope_uniform", 4, 3), [log(), log(2.0), iso(0.5), iso(1.5)]),
    "one_slot": (TypeDistribution("ordered_polytope_uniform", 2, 1), [iso(2.0), log(0.5)]),
    "scaled": (TypeDistribution("ordered_polytope_uniform", 3, 3, scale=0.8), [log(), log(1.5), iso(0.8)]),
}


@pytest.fixture(scope="module")
def canonical_equilibria():
    out = {}
    for name, (dist, profiles) in CANONICAL.items():
        pool = sample_instances(dist, N_SAMPLES, 0)
        I = len(profiles)
        starts = [np.ones(I), np.full(I, 0.2), np.linspace(4.0, 0.5, I), np.linspace(0.3, 3.0, I)]
        reps = [solve_equilibrium(dist, profiles, s, EquilibriumConfig(n_samples=N_SAMPLES), pool=pool)
                for s in starts]
        out[name] = (dist, profiles, pool, reps)
    return out


# 1 -----------------------------------------------------------------------------------
def test_criterion_01_matching_oracle(capsys):
    worst, worst_lsa, slot_mismatch = 0.0, 0.0, 0
    for p, b, q in matching_instances():
        cm = ClickMatrix(p, q)
        m = solve_assignment(cm, b)
        e = enumerate_matchings(cm, b)
        worst = max(worst, abs(m.objective - e.objective))
        w = np.where(b[:, None] > 0, b[:, None] * p + q, 0.0)
        worst_lsa = max(worst_lsa, abs(m.objective - lsa_objective(w)))
        slot_mismatch += m.slot_of != e.slot_of
    ok = worst <= 1e-12 and worst_lsa <= 1e-12 and slot_mismatch == 0
    report(capsys, 1, "matching oracle equivalence",
           ok, f"1000 instances, max |A - A_enum| = {worst:.2e}, max |A - A_scipy| = {worst_lsa:.2e}, "
               f"tie-break mismatches = {slot_mismatch}")


# 2 -----------------------------------------------------------------------------------
def test_criterion_02_dual_certificate(capsys):
    worst_total, worst_feas, worst_min, n_small = 0.0, 0.0, 0.0, 0
    for p, b, _ in matching_instances():
        cm = ClickMatrix(p)
        m = solve_assignment(cm, b)
        d = solve_dual(cm, b, m)
        w = b[:, None] * p
        worst_total = max(worst_total, abs(d.total - m.objective))
        worst_feas = max(worst_feas, float(np.max(w - d.s[:, None] - d.v[None, :], initial=0.0)),
                         float(-min(d.s.min(initial=0), d.v.min(initial=0))))
        if p.shape[0] <= 4 and p.shape[1] <= 4:
            n_small += 1
            _, min_v = lp_min_slot_prices(w)
            worst_min = max(worst_min, d.v.sum() - min_v)
    ok = worst_total <= 1e-7 and worst_feas <= 1e-7 and worst_min <= 1e-7
    report(capsys, 2, "primal-dual certificate", ok,
           f"max |sum s + sum v - A| = {worst_total:.2e}, max constraint violation = {worst_feas:.2e}, "
           f"max excess of sum v over LP minimum = {worst_min:.2e} on {n_small} small instances")


# 3 -----------------------------------------------------------------------------------
def test_criterion_03_three_schemes(capsys):
    rng = np.random.default_rng(33)
    worst_det, worst_z, n = 0.0, 0.0, 0
    while n < 200:
        I = int(rng.integers(1, 5))
        L = int(rng.integers(1, 5))
        cm = ClickMatrix(rng.uniform(0.01, 1, (I, L)))
        b = rng.uniform(0.1, 3, I)
        m = solve_assignment(cm, b)
        shown = [i for i, l in enumerate(m.slot_of) if l >= 0]
        i = int(rng.choice(shown))
        ev = ClickEvent(cm, b, i, m.slot_of[i])
        vcg = vcg_rebate_charge(ev).charge
        worst_det = max(worst_det, abs(vcg - leonard_charge(ev).charge))
        draws = randomized_charges(ev, 100_000, n)
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        gap = abs(draws.mean() - vcg)
        z = gap / se if se > 0 else (0.0 if gap <= 1e-12 else np.inf)
        worst_z = max(worst_z, z)
        n += 1
    ok = worst_det <= 1e-7 and worst_z <= 4.0
    report(capsys, 3, "three-scheme pricing agreement", ok,
           f"200 events, max |vcg - leonard| = {worst_det:.2e}, max |mean randomized - vcg| / SE = {worst_z:.2f}")


# 4 -----------------------------------------------------------------------------------
def test_criterion_04_gsp_closed_form(capsys):
    rng = np.random.default_rng(44)
    worst_charge, worst_rev, single_weight_off = 0.0, 0.0, 0
    n = 300
    for _ in range(n):
        I = int(rng.integers(1, 6))
        L = int(rng.integers(1, 5))
        q = rng.uniform(0.1, 1, I)
        p = np.sort(rng.uniform(0.05, 1, L))[::-1] + np.arange(L)[::-1] * 1e-3
        p = p / max(1.0, p[0])
        b = rng.uniform(0.1, 3, I)
        r = gsp_closed_form(q, p, b)
        cm = ClickMatrix(q[:, None] * p[None, :])
        m = solve_assignment(cm, b)
        revenue = 0.0
        for l, i in enumerate(r.order):
            assert m.slot_of[i] == l
            ev = ClickEvent(cm, b, i, l)
            exact = expected_randomized_charge(ev)
            rebate = vcg_rebate_charge(ev).charge
            worst_charge = max(worst_charge, abs(exact - r.charges[l]), abs(rebate - r.charges[l]))
            revenue += rebate * cm.probs[i, l]
        worst_rev = max(worst_rev, abs(revenue - r.revenue_closed_form), abs(revenue - r.revenue))
        single_weight_off += abs(revenue - r.revenue_single_weight) > 1e-9
    ok = worst_charge <= 1e-9 and worst_rev <= 1e-9
    report(capsys, 4, "GSP closed form", ok,
           f"{n} product-form instances, max charge error = {worst_charge:.2e}, max revenue error = "
           f"{worst_rev:.2e}; the single-weight revenue variant disagrees on {single_weight_off} instances")


# 5 -----------------------------------------------------------------------------------
def test_criterion_05_single_slot_second_price(capsys):
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(100):
        I = int(rng.integers(2, 7))
        p = rng.uniform(0.01, 1, (I, 1))
        b = rng.uniform(0.1, 3, I)
        cm = ClickMatrix(p)
        i = int(solve_assignment(cm, b).slot_of.index(0))
        ev = ClickEvent(cm, b, i, 0)
        second = max(b[j] * p[j, 0] for j in range(I) if j != i) / p[i, 0]
        for c in (vcg_rebate_charge(ev).charge, leonard_charge(ev).charge, expected_randomized_charge(ev)):
            worst = max(worst, abs(c - second) / max(1.0, second))
    ok = worst <= 1e-12
    report(capsys, 5, "single-slot second price", ok,
           f"100 instances, max relative deviation of vcg/leonard/exact-randomized from second price = {worst:.2e}")


# 6 -----------------------------------------------------------------------------------
def test_criterion_06_equilibrium_fixed_point(capsys, canonical_equilibria):
    worst_res, worst_fresh, worst_spread, all_conv = 0.0, 0.0, 0.0, True
    for name, (dist, profiles, pool, reps) in canonical_equilibria.items():
        base = reps[0]
        all_conv &= all(r.converged for r in reps)
        for r in reps:
            worst_res = max(worst_res, r.max_residual)
        b = np.stack([r.bids.values for r in reps])
        worst_spread = max(worst_spread, float(np.max((b.max(axis=0) - b.min(axis=0)) / b.min(axis=0))))
        fresh = estimate_ctr(dist, base.bids.values, N_SAMPLES, 1, stream=7).y_hat
        d = np.array([p.demand(x) for p, x in zip(profiles, base.bids.values)])
        worst_fresh = max(worst_fresh, float(np.max(np.abs(d - fresh) / d)))
    ok = all_conv and worst_res <= 0.02 and worst_spread <= 0.03
    report(capsys, 6, "equilibrium fixed point", ok,
           f"5 scenarios x 4 starts, max residual = {worst_res:.2e} (independent pool: {worst_fresh:.2e}), "
           f"max componentwise spread across starts = {worst_spread:.2e}")


# 7 -----------------------------------------------------------------------------------
def test_criterion_07_strong_duality(capsys):
    worst, worst_pool, worst_cert = 0.0, 0.0, 0.0
    for s in range(3):
        rng = np.random.default_rng(700 + s)
        I, L = 3, 2
        atoms = tuple(ClickMatrix(-np.sort(-rng.uniform(0.05, 1, (I, L)), axis=1)) for _ in range(5))
        w = tuple(rng.dirichlet(np.ones(5) * 3))
        profiles = [iso(float(rng.uniform(0.5, 2))), log(float(rng.uniform(0.5, 2))), iso(float(rng.uniform(0.5, 2)))]
        exact = system_oracle(list(zip(atoms, w)), profiles)
        dist = TypeDistribution("finite_mixture", I, L, atoms=atoms, weights=w, jitter=0.01)
        pool = sample_instances(dist, N_SAMPLES, s)
        eq = solve_equilibrium(dist, profiles, np.ones(I), pool=pool)
        on_pool = system_oracle(pool, profiles, tol=1e-7)
        worst = max(worst, abs(exact.welfare - eq.welfare) / abs(exact.welfare))
        worst_pool = max(worst_pool, abs(on_pool.welfare - eq.welfare) / abs(on_pool.welfare))
        worst_cert = max(worst_cert, exact.gap)
    ok = worst <= 0.01 and worst_cert <= 1e-5
    report(capsys, 7, "strong-duality welfare gap", ok,
           f"3 five-atom scenarios, max relative welfare gap = {worst:.2e}, Frank-Wolfe certificate = "
           f"{worst_cert:.2e}; gap against the oracle on the sampled pool itself = {worst_pool:.2e}")


# 8 -----------------------------------------------------------------------------------
def _slope_and_se(v: np.ndarray) -> tuple[float, float]:
    t = np.arange(v.size, dtype=float)
    X = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(X, v, rcond=None)
    resid = v - X @ coef
    s2 = resid @ resid / (v.size - 2)
    cov = s2 * np.linalg.inv(X.T @ X)
    return float(coef[1]), float(np.sqrt(cov[1, 1]))


def test_criterion_08_lyapunov_descent(capsys):
    rng = np.random.default_rng(88)
    violations, checked = 0, 0
    for _ in range(3):
        atoms = tuple(ClickMatrix(-np.sort(-rng.uniform(0.05, 1, (3, 2)), axis=1)) for _ in range(4))
        w = tuple(rng.dirichlet(np.ones(4) * 2))
        dist = TypeDistribution("finite_mixture", 3, 2, atoms=atoms, weights=w)
        cfg = DynamicsConfig(step_size=0.2, horizon=200, noise_mode="exact", tol=1e-3)
        tr = run_trajectory(dist, [log(), iso(), log(1.5)], rng.uniform(0.2, 3, 3), cfg)
        res = np.nanmax(np.abs(tr.residuals), axis=1)
        for t in range(tr.times.size - 1):
            if tr.accepted[t] and res[t] > cfg.tol:
                checked += 1
                violations += not tr.v[t + 1] < tr.v[t]
    slopes = []
    worst_z = -np.inf
    for name in ("two", "three"):
        dist, profiles = CANONICAL[name]
        cfg = DynamicsConfig(step_size=0.1, horizon=500, noise_mode="fresh_samples", feedback_window=2000,
                             eval_samples=N_SAMPLES)
        tr = run_trajectory(dist, profiles, np.linspace(0.4, 2.5, len(profiles)), cfg, rng_state=8)
        half = tr.v[tr.v.size // 2:]
        slope, se = _slope_and_se(half)
        slopes.append((slope, se))
        worst_z = max(worst_z, slope / se)
    ok = violations == 0 and checked > 0 and worst_z <= 2.0
    report(capsys, 8, "Lyapunov descent", ok,
           f"exact feedback: {violations} increases in {checked} accepted steps; sampled feedback: "
           + ", ".join(f"slope {s:.2e} (SE {e:.2e})" for s, e in slopes))


# 9 -----------------------------------------------------------------------------------
def test_criterion_09_price_below_bid(capsys, canonical_equilibria):
    margins = []
    ok = True
    for name, (dist, profiles, pool, reps) in canonical_equilibria.items():
        rep = reps[0]
        ok &= rep.converged
        b = rep.bids.values
        for i in range(len(profiles)):
            pr = expected_payment_rate(None, b, i, 0, pool=pool)
            margins.append(b[i] - pr.price_per_click)
    margins = np.asarray(margins)
    ok = ok and bool((margins > 0).all())
    report(capsys, 9, "price below bid", ok,
           f"{margins.size} advertisers in 5 converged scenarios, smallest margin bid - price = {margins.min():.4f}")


# 10 / 11 -----------------------------------------------------------------------------
def _category_scenario():
    comps = (TypeDistribution("ordered_polytope_uniform", 4, 2), TypeDistribution("ordered_polytope_uniform", 4, 1))
    dist = TypeDistribution("category_mixture", 4, components=comps, weights=(0.6, 0.4))
    scheme = CategoryScheme(2, (0, 1))
    profiles = [
        AdvertiserProfile(UtilityFamily("budget_ces"), scheme, (1.0, 2.0), Budget(1.0, 0.5)),
        AdvertiserProfile(UtilityFamily("isoelastic", 1.0, 2.0), scheme, (1.0, 3.0)),
        AdvertiserProfile(UtilityFamily("budget_ces"), scheme, (2.0, 1.0), Budget(0.6, 0.3)),
        AdvertiserProfile(UtilityFamily("log", 1.0), scheme, (0.5, 1.0)),
    ]
    rep = solve_equilibrium(dist, profiles, np.ones((4, 2)), EquilibriumConfig(n_samples=N_SAMPLES))
    return dist, profiles, rep


@pytest.fixture(scope="module")
def category_equilibrium():
    return _category_scenario()


def test_criterion_10_budget_identity(capsys, category_equilibrium):
    dist, profiles, rep = category_equilibrium
    errs = []
    for i, p in enumerate(profiles):
        if p.mode == "budget":
            spent = float(np.dot(rep.bids.values[i], rep.ctr.y_hat[i]))
            errs.append(abs(spent - p.budget.amount) / p.budget.amount)
    ok = rep.converged and max(errs) <= 0.02
    report(capsys, 10, "budget identity", ok,
           f"{len(errs)} budget advertisers, max |sum_k b_k y_k - B| / B = {max(errs):.2e}")


def test_criterion_11_wardrop(capsys, category_equilibrium):
    dist, profiles, rep = category_equilibrium
    spreads = []
    for i, p in enumerate(profiles):
        if p.mode == "weighted":
            supported = rep.ctr.y_hat[i] > 0
            ratio = np.asarray(p.weights)[supported] / rep.bids.values[i][supported]
            spreads.append(float((ratio.max() - ratio.min()) / ratio.mean()))
    ok = rep.converged and max(spreads) <= 0.02
    report(capsys, 11, "Wardrop proportionality", ok,
           f"{len(spreads)} weighted-sum advertisers, max relative spread of w/b = {max(spreads):.2e}")


# 12 ----------------------------------------------------------------------------------
def test_criterion_12_monotonicity_probe(capsys):
    grid = np.linspace(0.1, 2.0, 20)
    smooth = monotonicity_probe(TypeDistribution("ordered_polytope_uniform", 2, 2), [1.0, 1.0], 0, grid,
                                N_SAMPLES, 0)
    step = monotonicity_probe(TypeDistribution("product_form", 2, slot_effects=(0.5,), effect_low=1.0,
                                               effect_high=1.0), [1.0, 1.0], 0, grid, N_SAMPLES, 0)
    levels = sorted({float(x) for x in np.round(step.y_hat, 12)})
    ok = (smooth.strictly_increasing and smooth.within_slack and not smooth.flagged
          and step.flagged and levels == [0.0, 0.5])
    report(capsys, 12, "monotonicity diagnostics", ok,
           f"ordered polytope strictly increasing = {smooth.strictly_increasing}; constant-effect product "
           f"form flagged = {step.flagged} with {step.flat_steps} flat steps, levels {levels}")


# 13 ----------------------------------------------------------------------------------
def test_criterion_13_image_text(capsys):
    rng = np.random.default_rng(1313)
    worst, wrong = 0.0, 0
    for _ in range(1000):
        I = int(rng.integers(1, 6))
        L = int(rng.integers(1, 4))
        text = ClickMatrix(rng.uniform(size=(I, L)))
        img = rng.uniform(size=I) * (rng.uniform(size=I) < 0.7)
        b = rng.exponential(1.0, I) * (rng.uniform(size=I) > 0.1)
        _, ctr = solve_image_text(text, img, b)
        _, best = solve_layout_auction(image_text_layouts(text, img), b)
        gap = float(b @ best) - float(b @ ctr)
        worst = max(worst, abs(gap))
        wrong += gap > 1e-12
    ok = wrong == 0 and worst <= 1e-12
    report(capsys, 13, "image-text layout", ok,
           f"1000 instances, max |value - exhaustive optimum| = {worst:.2e}, suboptimal choices = {wrong}")


# 14 ----------------------------------------------------------------------------------
def test_criterion_14_reserve(capsys, tmp_path):
    base = {
        "seed": 21,
        "advertisers": [{"id": "a", "utility": {"kind": "log"}, "initial_bid": 1.0},
                        {"id": "b", "utility": {"kind": "log"}, "initial_bid": 2.5}],
        "distribution": {"kind": "ordered_polytope_uniform", "n_slots": 2},
    }
    runs = {}
    for name, reserve in (("plain", None), ("never", {"reserve_R": 5.0, "epsilon_no_reserve": 1.0}),
                          ("always", {"reserve_R": 2.6, "epsilon_no_reserve": 0.0})):
        data = json.loads(json.dumps(base))
        if reserve is not None:
            data["mechanism"] = {"reserve": reserve}
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump(data))
        out = tmp_path / name
        assert main(["run", "--scenario", str(path), "--out", str(out), "--samples", "5000"]) == 0
        runs[name] = out
    files = ("impressions.csv", "clicks.csv", "charges.csv", "summary.json")
    identical = all((runs["plain"] / f).read_bytes() == (runs["never"] / f).read_bytes() for f in files)
    shown = len((runs["always"] / "impressions.csv").read_text().splitlines()) - 1
    d = TypeDistribution("ordered_polytope_uniform", 2, 2, reserve=ReservePolicy(2.6, 0.0))
    y = estimate_ctr(d, [1.0, 2.5], N_SAMPLES, 3).y_hat
    ok = identical and shown == 0 and (y == 0).all()
    report(capsys, 14, "reserve semantics", ok,
           f"epsilon = 1 outputs byte-identical to no reserve = {identical}; epsilon = 0 with R above every "
           f"product shows {shown} adverts (estimated rates {y.tolist()})")
