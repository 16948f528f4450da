"""Scenario configuration: parsing, validation and canonical serialization.

A scenario is a YAML (or JSON) mapping::

    seed: 7
    advertisers:
      - id: a
        utility: {kind: isoelastic, scale: 1.0, elasticity: 2.0}
        initial_bid: 1.0
      - id: b
        utility: {kind: budget_ces}
        categories: {n_categories: 2, membership: [0, 1]}
        weights: [1.0, 2.0]
        budget: {amount: 1.0, ces_exponent: 0.5}
        initial_bid: [1.0, 1.0]
    distribution:
      kind: ordered_polytope_uniform
      n_slots: 2
    mechanism:
      pricing: vcg_rebate
      reserve: {reserve_R: 0.1, epsilon_no_reserve: 0.5}
      layout: slots
    solver: {n_samples: 20000, tol: 0.001}
    dynamics: {horizon: 500, feedback_window: 2000, entries: [[250, c]]}
    oracle: {tol: 1.0e-5}

``serialize(parse(text))`` is canonical: parsing it again gives the same text.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Any

import numpy as np
import yaml

from ..advertisers import AdvertiserProfile, Budget, CategoryScheme, UtilityError, UtilityFamily
from ..dynamics import DynamicsConfig, DynamicsError
from ..equilibrium import EquilibriumConfig
from ..matching import AssignmentError, ClickMatrix
from ..search_model import DistributionError, ReservePolicy, TypeDistribution

__all__ = ["ScenarioError", "Scenario", "MechanismOptions", "OracleOptions", "AdvertiserSpec",
           "parse", "load", "serialize", "scenario_hash"]


class ScenarioError(ValueError):
    """Schema or consistency violation in a scenario file."""


@dataclass(frozen=True)
class AdvertiserSpec:
    id: str
    profile: AdvertiserProfile
    initial_bid: float | tuple[float, ...] = 1.0


@dataclass(frozen=True)
class MechanismOptions:
    pricing: str = "vcg_rebate"
    layout: str = "slots"
    image_low: float = 0.0
    image_high: float = 1.0


@dataclass(frozen=True)
class OracleOptions:
    tol: float = 1e-5
    max_iter: int = 20000


@dataclass(frozen=True, eq=False)
class Scenario:
    seed: int
    advertisers: tuple[AdvertiserSpec, ...]
    distribution: TypeDistribution
    mechanism: MechanismOptions = MechanismOptions()
    solver: EquilibriumConfig = EquilibriumConfig()
    dynamics: DynamicsConfig = DynamicsConfig()
    oracle: OracleOptions = OracleOptions()

    @property
    def profiles(self) -> list[AdvertiserProfile]:
        return [a.profile for a in self.advertisers]

    @property
    def categorized(self) -> bool:
        return any(a.profile.categories is not None for a in self.advertisers)

    def initial_bids(self) -> np.ndarray:
        if not self.categorized:
            return np.array([float(np.atleast_1d(a.initial_bid)[0]) for a in self.advertisers])
        K = max(a.profile.n_categories for a in self.advertisers)
        out = np.zeros((len(self.advertisers), K))
        for i, a in enumerate(self.advertisers):
            k = a.profile.n_categories
            out[i, :k] = np.broadcast_to(np.asarray(a.initial_bid, dtype=float), (k,))
        return out

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, seed=int(seed))


# --------------------------------------------------------------------------------------
# parsing

_TOP = {"seed", "advertisers", "distribution", "mechanism", "solver", "dynamics", "oracle"}
_PRICING = ("randomized", "vcg_rebate", "leonard")
_LAYOUTS = ("slots", "image_text")


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ScenarioError(f"{where} must be a mapping")
    extra = set(d) - allowed
    if extra:
        raise ScenarioError(f"unknown key(s) in {where}: {sorted(extra)}")


def _floats(x, where: str):
    try:
        if isinstance(x, (list, tuple)):
            return tuple(float(v) for v in x)
        return float(x)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where} must be numeric") from exc


def _matrix(x, where: str) -> np.ndarray:
    try:
        arr = np.array(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where} must be a numeric matrix") from exc
    if arr.ndim != 2:
        raise ScenarioError(f"{where} must be a matrix")
    return arr


def _profile(d: dict, where: str) -> AdvertiserProfile:
    _check_keys(d, {"id", "utility", "categories", "weights", "budget", "initial_bid"}, where)
    u = d.get("utility", {"kind": "isoelastic"})
    _check_keys(u, {"kind", "scale", "elasticity"}, f"{where}.utility")
    util = UtilityFamily(str(u.get("kind", "isoelastic")), float(u.get("scale", 1.0)),
                         float(u.get("elasticity", 2.0)))
    cats = None
    if d.get("categories") is not None:
        c = d["categories"]
        _check_keys(c, {"n_categories", "membership"}, f"{where}.categories")
        cats = CategoryScheme(int(c["n_categories"]), tuple(int(k) for k in c["membership"]))
    budget = None
    if d.get("budget") is not None:
        b = d["budget"]
        _check_keys(b, {"amount", "ces_exponent"}, f"{where}.budget")
        budget = Budget(float(b["amount"]), float(b.get("ces_exponent", 0.5)))
    weights = d.get("weights")
    return AdvertiserProfile(util, cats, None if weights is None else _floats(weights, f"{where}.weights"),
                             budget)


def _distribution(d: dict, n_adv: int, where: str, reserve=None, organic=None) -> TypeDistribution:
    _check_keys(d, {"kind", "n_slots", "scale", "slot_effects", "effect_low", "effect_high", "atoms",
                    "components", "weights", "jitter", "organic"}, where)
    kind = d.get("kind")
    if kind is None:
        raise ScenarioError(f"{where}.kind is required")
    atoms = []
    for j, a in enumerate(d.get("atoms", []) or []):
        _check_keys(a, {"probs", "benefits"}, f"{where}.atoms[{j}]")
        probs = _matrix(a["probs"], f"{where}.atoms[{j}].probs")
        ben = None if a.get("benefits") is None else _matrix(a["benefits"], f"{where}.atoms[{j}].benefits")
        atoms.append(ClickMatrix(probs, ben))
    comps = tuple(_distribution(c, n_adv, f"{where}.components[{j}]")
                  for j, c in enumerate(d.get("components", []) or []))
    if d.get("organic") is not None:
        organic = _matrix(d["organic"], f"{where}.organic")
    return TypeDistribution(
        kind=str(kind), n_advertisers=n_adv, n_slots=int(d.get("n_slots", 1)),
        scale=float(d.get("scale", 1.0)), slot_effects=_floats(d.get("slot_effects", ()), where),
        effect_low=_floats(d.get("effect_low", 0.0), where), effect_high=_floats(d.get("effect_high", 1.0), where),
        atoms=tuple(atoms), components=comps, weights=_floats(d.get("weights", ()), where),
        jitter=float(d.get("jitter", 0.0)), reserve=reserve, organic=organic)


def parse(data: dict | str) -> Scenario:
    """Validate a scenario mapping (or YAML/JSON text) and build the typed scenario."""
    if isinstance(data, str):
        try:
            data = yaml.safe_load(data)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"cannot parse scenario: {exc}") from exc
    try:
        return _parse(data)
    except ScenarioError:
        raise
    except (UtilityError, DistributionError, DynamicsError, AssignmentError, KeyError, TypeError,
            ValueError) as exc:
        raise ScenarioError(str(exc)) from exc


def _parse(data: Any) -> Scenario:
    _check_keys(data, _TOP, "scenario")
    advs = data.get("advertisers")
    if not advs:
        raise ScenarioError("at least one advertiser is required")
    specs, ids = [], {}
    for i, a in enumerate(advs):
        where = f"advertisers[{i}]"
        pid = str(a.get("id", i)) if isinstance(a, dict) else str(i)
        if pid in ids:
            raise ScenarioError(f"advertiser id {pid!r} defined more than once")
        ids[pid] = i
        prof = _profile(a, where)
        init = a.get("initial_bid", 1.0)
        init = _floats(init, f"{where}.initial_bid")
        if isinstance(init, tuple):
            if prof.categories is None and len(init) != 1:
                raise ScenarioError(f"{where}.initial_bid must be a single value")
            if prof.categories is not None and len(init) != prof.n_categories:
                raise ScenarioError(f"{where}.initial_bid needs one value per category")
        if np.any(np.asarray(init) <= 0):
            raise ScenarioError(f"{where}.initial_bid must be positive")
        specs.append(AdvertiserSpec(pid, prof, init))
    mech = data.get("mechanism", {}) or {}
    _check_keys(mech, {"pricing", "reserve", "layout", "image_low", "image_high"}, "mechanism")
    reserve = None
    if mech.get("reserve") is not None:
        r = mech["reserve"]
        _check_keys(r, {"reserve_R", "epsilon_no_reserve"}, "mechanism.reserve")
        reserve = ReservePolicy(float(r["reserve_R"]), float(r.get("epsilon_no_reserve", 0.0)))
    mo = MechanismOptions(str(mech.get("pricing", "vcg_rebate")), str(mech.get("layout", "slots")),
                          float(mech.get("image_low", 0.0)), float(mech.get("image_high", 1.0)))
    if mo.pricing not in _PRICING:
        raise ScenarioError(f"mechanism.pricing must be one of {_PRICING}")
    if mo.layout not in _LAYOUTS:
        raise ScenarioError(f"mechanism.layout must be one of {_LAYOUTS}")
    if not 0 <= mo.image_low <= mo.image_high <= 1:
        raise ScenarioError("image click probabilities must satisfy 0 <= low <= high <= 1")
    if mo.layout == "image_text" and mo.pricing == "leonard":
        raise ScenarioError("dual prices are not defined for image-text layouts")
    if "distribution" not in data:
        raise ScenarioError("distribution is required")
    dist = _distribution(data["distribution"], len(specs), "distribution", reserve)
    if mo.pricing == "leonard" and (reserve is not None or _has_benefits(dist)):
        raise ScenarioError("dual prices are not defined when benefits are present")
    for a in specs:
        if a.profile.categories is not None and len(a.profile.categories.membership) != dist.n_regions:
            raise ScenarioError(f"category scheme of {a.id!r} must cover all {dist.n_regions} regions")
    sol = data.get("solver", {}) or {}
    _check_keys(sol, {f.name for f in dataclasses.fields(EquilibriumConfig)} - {"workers"}, "solver")
    solver = EquilibriumConfig(**{k: _cast(EquilibriumConfig, k, v) for k, v in sol.items()})
    dyn = dict(data.get("dynamics", {}) or {})
    _check_keys(dyn, {f.name for f in dataclasses.fields(DynamicsConfig)} - {"workers"}, "dynamics")
    if "entries" in dyn:
        entries = []
        for e in dyn["entries"]:
            if len(e) != 2:
                raise ScenarioError("dynamics.entries items are [epoch, advertiser]")
            who = str(e[1])
            if who not in ids:
                raise ScenarioError(f"dynamics.entries refers to unknown advertiser {who!r}")
            entries.append((int(e[0]), ids[who]))
        dyn["entries"] = tuple(entries)
    if "step_size" in dyn:
        dyn["step_size"] = _floats(dyn["step_size"], "dynamics.step_size")
    dynamics = DynamicsConfig(**{k: (v if k in ("entries", "step_size") else _cast(DynamicsConfig, k, v))
                                 for k, v in dyn.items()})
    orc = data.get("oracle", {}) or {}
    _check_keys(orc, {"tol", "max_iter"}, "oracle")
    oracle = OracleOptions(float(orc.get("tol", 1e-5)), int(orc.get("max_iter", 20000)))
    return Scenario(int(data.get("seed", 0)), tuple(specs), dist, mo, solver, dynamics, oracle)


def _has_benefits(dist: TypeDistribution) -> bool:
    if dist.organic is not None:
        return True
    if dist.kind == "finite_mixture":
        return any(a.has_benefits for a in dist.atoms)
    if dist.kind == "category_mixture":
        return any(_has_benefits(c) for c in dist.components)
    return False


def _cast(cls, name: str, value):
    default = {f.name: f.default for f in dataclasses.fields(cls)}[name]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ScenarioError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value) if isinstance(default, str) else value


def load(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


# --------------------------------------------------------------------------------------
# serialization


def _dist_dict(d: TypeDistribution) -> dict:
    out: dict[str, Any] = {"kind": d.kind}
    if d.kind == "ordered_polytope_uniform":
        out.update(n_slots=d.n_slots, scale=d.scale)
    elif d.kind in ("product_form", "single_slot_independent"):
        if d.kind == "product_form":
            out["slot_effects"] = list(d.slot_effects)
        for key in ("effect_low", "effect_high"):
            v = getattr(d, key)
            out[key] = list(v) if isinstance(v, tuple) else float(v)
    elif d.kind == "finite_mixture":
        atoms = []
        for a in d.atoms:
            item = {"probs": a.probs.tolist()}
            if a.benefits is not None and np.any(a.benefits != 0):
                item["benefits"] = a.benefits.tolist()
            atoms.append(item)
        out.update(atoms=atoms, weights=list(d.weights), jitter=d.jitter)
    else:
        out.update(components=[_dist_dict(c) for c in d.components], weights=list(d.weights))
    if d.organic is not None:
        out["organic"] = d.organic.tolist()
    return out


def to_dict(sc: Scenario) -> dict:
    advs = []
    for a in sc.advertisers:
        p = a.profile
        item: dict[str, Any] = {"id": a.id, "utility": {"kind": p.utility.kind, "scale": p.utility.scale,
                                                        "elasticity": p.utility.elasticity}}
        if p.categories is not None:
            item["categories"] = {"n_categories": p.categories.n_categories,
                                  "membership": list(p.categories.membership)}
        if p.weights is not None:
            item["weights"] = list(p.weights)
        if p.budget is not None:
            item["budget"] = {"amount": p.budget.amount, "ces_exponent": p.budget.ces_exponent}
        item["initial_bid"] = list(a.initial_bid) if isinstance(a.initial_bid, tuple) else a.initial_bid
        advs.append(item)
    mech: dict[str, Any] = {"pricing": sc.mechanism.pricing, "layout": sc.mechanism.layout,
                            "image_low": sc.mechanism.image_low, "image_high": sc.mechanism.image_high}
    if sc.distribution.reserve is not None:
        mech["reserve"] = {"reserve_R": sc.distribution.reserve.reserve_R,
                           "epsilon_no_reserve": sc.distribution.reserve.epsilon_no_reserve}
    solver = {f.name: getattr(sc.solver, f.name) for f in dataclasses.fields(EquilibriumConfig)
              if f.name != "workers"}
    dyn = {f.name: getattr(sc.dynamics, f.name) for f in dataclasses.fields(DynamicsConfig)
           if f.name != "workers"}
    names = [a.id for a in sc.advertisers]
    dyn["entries"] = [[t, names[i]] for t, i in sc.dynamics.entries]
    if isinstance(dyn["step_size"], tuple):
        dyn["step_size"] = list(dyn["step_size"])
    return {"seed": sc.seed, "advertisers": advs, "distribution": _dist_dict(sc.distribution),
            "mechanism": mech, "solver": solver, "dynamics": dyn,
            "oracle": {"tol": sc.oracle.tol, "max_iter": sc.oracle.max_iter}}


def serialize(sc: Scenario, fmt: str = "yaml") -> str:
    """Canonical text form (``yaml`` or ``json``)."""
    d = to_dict(sc)
    if fmt == "json":
        return json.dumps(d, sort_keys=True, indent=2) + "\n"
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=None)


def scenario_hash(sc: Scenario) -> str:
    """SHA-256 of the canonical JSON form, seed included."""
    return hashlib.sha256(serialize(sc, "json").encode()).hexdigest()
