"""``adassign`` command line.

Subcommands ``run``, ``equilibrium``, ``dynamics``, ``price-audit`` and ``oracle``
read a scenario file and write flat files into ``--out``.  Every invocation
also writes ``run.json`` describing what was run.  Exit status is 2 for an
invalid scenario, 0 otherwise (non-convergence is reported, not an error).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from .. import __version__
from ..equilibrium import EquilibriumError, solve_equilibrium, system_oracle
from ..dynamics import DynamicsError, run_trajectory
from ..matching import image_text_layouts, solve_image_text
from ..pricing import (ClickEvent, PricingError, expected_payment_rate, expected_randomized_charge,
                       layout_charge, leonard_charge, pool_charges, randomized_charges, vcg_rebate_charge)
from ..search_model import (BLOCK, DistributionError, Purpose, effective_bids, generator, resolve_workers,
                            sample_instances, support_pool)
from . import io
from .scenario import Scenario, ScenarioError, load, scenario_hash

ENV_WORKERS = "ADASSIGN_WORKERS"


def _keyed_uniform(seed: int, purpose: int, n: int, width: int) -> np.ndarray:
    nblk = (n + BLOCK - 1) // BLOCK
    if nblk == 0:
        return np.zeros((0, width))
    return np.concatenate([generator(seed, purpose, 0, k).random((BLOCK, width)) for k in range(nblk)])[:n]


# --------------------------------------------------------------------------------------
# commands


def cmd_auction_run(sc: Scenario, n: int, out: str, workers: int | None = None) -> list[str]:
    """Sample searches, assign, simulate clicks and price them under the configured scheme."""
    dist = sc.distribution
    pool = sample_instances(dist, n, sc.seed, workers=workers)
    I = len(sc.advertisers)
    eff, _ = effective_bids(sc.initial_bids(), pool.regions, [a.profile.categories for a in sc.advertisers]
                            if sc.categorized else None)
    eff = np.broadcast_to(eff, (n, I)).astype(float)
    scheme = sc.mechanism.pricing
    u_click = _keyed_uniform(sc.seed, Purpose.CLICKS, n, I)
    slot = np.full((n, I), -1, dtype=np.int64)
    layout = np.full((n, I), "", dtype=object)
    prob = np.zeros((n, I))
    charge = np.full((n, I), np.nan)
    if sc.mechanism.layout == "image_text":
        lo, hi = sc.mechanism.image_low, sc.mechanism.image_high
        img = lo + (hi - lo) * _keyed_uniform(sc.seed, Purpose.LAYOUT, n, I)
        for j in range(n):
            text = pool.matrix(j)
            chosen, y = solve_image_text(text, img[j], eff[j])
            layouts = image_text_layouts(text, img[j])
            for i in np.nonzero(y > 0)[0]:
                prob[j, i] = y[i]
                if chosen.id[0] == "image":
                    slot[j, i], layout[j, i] = 0, "image"
                else:
                    slot[j, i], layout[j, i] = chosen.id[1 + i], "text"
                rng = np.random.Generator(np.random.Philox(
                    np.random.SeedSequence(sc.seed, spawn_key=(Purpose.CHARGES, j, int(i)))))
                charge[j, i] = layout_charge(layouts, eff[j], int(i), scheme, rng).charge
    else:
        sol = pool.solve(eff, workers)
        slot = sol.slot_of[:, :I].copy()
        layout[slot >= 0] = "text"
        prob = sol.ctr
        charge = pool_charges(pool, eff, scheme, sc.seed, workers)
    clicked = (slot >= 0) & (u_click < prob)
    ids = pool.ids
    imp_rows, click_rows, charge_rows = [], [], []
    for j in range(n):
        for i in range(I):
            if slot[j, i] < 0:
                continue
            imp_rows.append((ids[j], i, slot[j, i], layout[j, i], eff[j, i], prob[j, i]))
            if clicked[j, i]:
                click_rows.append((ids[j], i, slot[j, i], eff[j, i], prob[j, i]))
                c = charge[j, i]
                charge_rows.append((ids[j], scheme, i, slot[j, i], eff[j, i], c, eff[j, i] - c))
    files = [io.write_csv(os.path.join(out, "impressions.csv"), io.IMPRESSION_COLUMNS, imp_rows),
             io.write_csv(os.path.join(out, "clicks.csv"), io.CLICK_COLUMNS, click_rows),
             io.write_csv(os.path.join(out, "charges.csv"), io.CHARGE_COLUMNS, charge_rows)]
    advertisers = []
    for i, spec in enumerate(sc.advertisers):
        shown = slot[:, i] >= 0
        clicks = int(clicked[:, i].sum())
        paid = float(np.nansum(np.where(clicked[:, i], charge[:, i], 0.0)))
        y_hat, y_se = (float(prob[:, i].mean()), float(prob[:, i].std(ddof=1) / np.sqrt(n))) if n > 1 else \
            (float(prob[:, i].mean()) if n else 0.0, 0.0)
        c = np.where(shown, charge[:, i], 0.0)
        pc = prob[:, i] * c
        exp_price, exp_se = 0.0, 0.0
        if n and prob[:, i].sum() > 0:
            exp_price = float(pc.sum() / prob[:, i].sum())
            if n > 1:
                resid = pc - exp_price * prob[:, i]
                exp_se = float(resid.std(ddof=1) * np.sqrt(n) / prob[:, i].sum())
        advertisers.append({
            "id": spec.id, "impressions": int(shown.sum()), "clicks": clicks,
            "ctr_hat": y_hat, "ctr_std_err": y_se,
            "click_rate": clicks / n if n else 0.0,
            "total_charge": paid,
            "avg_price_per_click": paid / clicks if clicks else 0.0,
            "expected_price_per_click": exp_price, "expected_price_std_err": exp_se,
        })
    summary = {"n_searches": n, "scheme": scheme, "layout": sc.mechanism.layout,
               "advertisers": advertisers}
    files.append(io.write_json(os.path.join(out, "summary.json"), summary))
    return files


def _oracle_or_none(sc: Scenario):
    try:
        support = support_pool(sc.distribution)
    except DistributionError:
        return None
    return system_oracle(support, sc.profiles, sc.oracle.tol, sc.oracle.max_iter)


def cmd_equilibrium(sc: Scenario, n: int | None, out: str, workers: int | None = None) -> list[str]:
    cfg = sc.solver
    if n is not None:
        cfg = dataclasses.replace(cfg, n_samples=n)
    cfg = dataclasses.replace(cfg, workers=workers)
    pool = sample_instances(sc.distribution, cfg.n_samples, sc.seed, cfg.stream, workers) if not cfg.exact \
        else None
    rep = solve_equilibrium(sc.distribution, sc.profiles, sc.initial_bids(), cfg, sc.seed, pool=pool)
    payload = rep.to_dict()
    payload["advertisers"] = [a.id for a in sc.advertisers]
    if not sc.categorized and pool is not None and len(sc.advertisers) > 1:
        prices = []
        for i in range(len(sc.advertisers)):
            pr = expected_payment_rate(None, rep.bids.values, i, 0, 32, sc.seed, pool=pool, workers=workers)
            prices.append({"rate": pr.rate, "std_err": pr.std_err, "price_per_click": pr.price_per_click,
                           "bid": float(rep.bids.values[i]),
                           "margin": float(rep.bids.values[i] - pr.price_per_click)})
        payload["payments"] = prices
    orc = _oracle_or_none(sc)
    if orc is not None and rep.welfare is not None:
        payload["oracle_welfare"] = orc.welfare
        payload["duality_gap"] = (orc.welfare - rep.welfare) / abs(orc.welfare) if orc.welfare else \
            orc.welfare - rep.welfare
    files = [io.write_json(os.path.join(out, "equilibrium.json"), payload),
             io.write_csv(os.path.join(out, "equilibrium_trace.csv"), io.TRACE_COLUMNS,
                          [(k, v, r) for k, (v, r) in enumerate(zip(rep.v_trace, rep.residual_trace))])]
    return files


def cmd_dynamics(sc: Scenario, n: int | None, out: str, workers: int | None = None) -> list[str]:
    cfg = sc.dynamics
    if n is not None:
        cfg = dataclasses.replace(cfg, feedback_window=n)
    cfg = dataclasses.replace(cfg, workers=workers)
    tr = run_trajectory(sc.distribution, sc.profiles, sc.initial_bids(), cfg, sc.seed)
    files = [io.write_csv(os.path.join(out, "trajectory.csv"), io.TRAJECTORY_COLUMNS, tr.rows())]
    files.append(io.write_json(os.path.join(out, "dynamics.json"), {
        "terminal_residual": tr.terminal_residual, "converged": tr.converged,
        "final_bids": tr.bids[-1], "horizon": int(tr.times.size), "noise_mode": cfg.noise_mode,
        "accepted_fraction": float(tr.accepted.mean())}))
    return files


def cmd_price_audit(sc: Scenario, n_events: int, out: str, draws: int = 2000,
                    workers: int | None = None) -> list[str]:
    """Price the same clicks three ways and report their discrepancies."""
    dist = sc.distribution
    I = len(sc.advertisers)
    pool = sample_instances(dist, max(n_events, 1) * 2 + 16, sc.seed, workers=workers)
    eff, _ = effective_bids(sc.initial_bids(), pool.regions, [a.profile.categories for a in sc.advertisers]
                            if sc.categorized else None)
    eff = np.broadcast_to(eff, (pool.size, I))
    sol = pool.solve(eff, workers)
    rows, charge_rows = [], []
    det, zmax = 0.0, 0.0
    k = 0
    for j in range(pool.size):
        if k >= n_events:
            break
        cm = pool.matrix(j)
        for i in range(I):
            if k >= n_events or sol.slot_of[j, i] < 0 or sol.ctr[j, i] <= 0:
                continue
            ev = ClickEvent(cm, eff[j], i, int(sol.slot_of[j, i]))
            vcg = vcg_rebate_charge(ev).charge
            leo = leonard_charge(ev).charge if not cm.has_benefits else float("nan")
            exact = expected_randomized_charge(ev)
            gen = np.random.Generator(np.random.Philox(
                np.random.SeedSequence(sc.seed, spawn_key=(Purpose.CHARGES, int(pool.ids[j]), i))))
            rc = randomized_charges(ev, draws, gen)
            mean, se = float(rc.mean()), float(rc.std(ddof=1) / np.sqrt(draws)) if draws > 1 else 0.0
            det = max(det, abs(vcg - exact), 0.0 if np.isnan(leo) else abs(vcg - leo))
            if se > 0:
                zmax = max(zmax, abs(mean - vcg) / se)
            elif abs(mean - vcg) > 1e-9 * max(1.0, ev.bid):
                zmax = float("inf")
            rows.append((pool.ids[j], i, ev.slot, ev.bid, vcg, leo, exact, mean, se))
            for name, c in (("vcg_rebate", vcg), ("leonard", leo), ("randomized", mean)):
                charge_rows.append((pool.ids[j], name, i, ev.slot, ev.bid, c, ev.bid - c))
            k += 1
    files = [io.write_csv(os.path.join(out, "price_audit.csv"), io.AUDIT_COLUMNS, rows),
             io.write_csv(os.path.join(out, "charges.csv"), io.CHARGE_COLUMNS, charge_rows),
             io.write_json(os.path.join(out, "price_audit.json"), {
                 "n_events": k, "draws": draws, "max_deterministic_discrepancy": det,
                 "max_randomized_z": zmax})]
    return files


def cmd_system_oracle(sc: Scenario, out: str) -> list[str]:
    try:
        support = support_pool(sc.distribution)
    except DistributionError as exc:
        raise ScenarioError(f"the oracle needs a finite-support distribution ({exc})") from exc
    sol = system_oracle(support, sc.profiles, sc.oracle.tol, sc.oracle.max_iter)
    d = sol.to_dict()
    d["advertisers"] = [a.id for a in sc.advertisers]
    return [io.write_json(os.path.join(out, "oracle.json"), d)]


# --------------------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adassign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "simulate searches, clicks and charges"),
                           ("equilibrium", "solve for the Nash equilibrium bids"),
                           ("dynamics", "simulate bid dynamics"),
                           ("price-audit", "compare the three pricing schemes on sampled clicks"),
                           ("oracle", "solve the welfare optimum on a finite support")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--scenario", required=True, help="scenario file (YAML or JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--samples", type=int, default=None,
                       help="searches (run), pool size (equilibrium), feedback window (dynamics), "
                            "click events (price-audit)")
        p.add_argument("--workers", type=int, default=None,
                       help=f"worker threads (default: ${ENV_WORKERS} or 1); never changes results")
        if name == "price-audit":
            p.add_argument("--draws", type=int, default=2000, help="randomized draws per click event")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        sc = load(args.scenario)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ScenarioError("--seed must be an unsigned 64-bit integer")
            sc = sc.with_seed(args.seed)
        if args.samples is not None and args.samples < 0:
            raise ScenarioError("--samples must be nonnegative")
        workers = resolve_workers(args.workers)
        out = io.ensure_dir(args.out)
        if args.command == "run":
            files = cmd_auction_run(sc, 1000 if args.samples is None else args.samples, out, workers)
        elif args.command == "equilibrium":
            files = cmd_equilibrium(sc, args.samples, out, workers)
        elif args.command == "dynamics":
            files = cmd_dynamics(sc, args.samples, out, workers)
        elif args.command == "price-audit":
            files = cmd_price_audit(sc, 200 if args.samples is None else args.samples, out, args.draws, workers)
        else:
            files = cmd_system_oracle(sc, out)
    except (ScenarioError, EquilibriumError, DynamicsError, DistributionError, PricingError,
            OSError) as exc:
        print(f"adassign: error: {exc}", file=sys.stderr)
        return 2
    record = {"scenario_hash": scenario_hash(sc), "seed": sc.seed, "command": args.command,
              "samples": args.samples, "outputs": [os.path.basename(f) for f in files],
              "wall_clock_s": time.perf_counter() - t0, "version": __version__}
    io.write_json(os.path.join(out, "run.json"), record)
    print(f"wrote {', '.join(os.path.basename(f) for f in files)} to {out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
