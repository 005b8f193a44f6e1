"""Synthetic reservoir tables standing in for the proprietary field data.

Pre-production scenario
-----------------------
Each reservoir belongs to latent group A (terrigenous-like) or B
(carbonate-like) with probability 1/2. Sixteen numeric descriptors are
built from independent standard normal draws ``e_j``; ten of them are
shifted by ``+separation/2`` (group A) or ``-separation/2`` (group B)
along the sign listed in ``PRE_FEATURES`` before mapping to physical
units. Lithology is terrigenous with probability 0.98 in A and 0.35 in B.
Targets (percent), with ``s = noise_sigma``::

    A: rf = 32 + 10 tanh(e_porosity) + 7 e_permeability - 5 e_viscosity + N(0, s)
    B: rf = 22 + 1.5 e_porosity + N(0, 2 s)

clipped to [1, 95]. ``depletion`` ~ U(0.6, 1) and the true group label
``group`` are meta columns.

Post-production scenario
------------------------
``ooip`` V ~ LogNormal(log 20, 0.8) Mt clipped to [0.5, 800],
``delta_t`` ~ U(1, 40) years. The recovery factor fraction is::

    rf = 0.08 + 0.30 sigmoid(0.8 e_por + 0.6 e_perm - 0.7 e_visc) + 0.07 u

clipped to [0.02, 0.85], where ``u`` ~ N(0, 1) is visible only through
production. Cumulative production follows the hyperbolic curve with
``w = POST_W1 * sqrt(V) + POST_W0``::

    P = rf * V * dt / (dt + w) * (1 + N(0, noise_sigma)), clipped to [0, V]

Missing cells are injected into feature columns only, each cell
independently with probability ``missing_rate``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from rfest.tabular import CATEGORICAL, META, NUMERIC, TARGET, ColumnSchema, Dataset

PRE = "pre_production"
POST = "post_production"

POST_W0 = 4.0
POST_W1 = 2.5

# name, unit, shift sign (0 = same in both groups), physical map
PRE_FEATURES = [
    ("net_pay", "m", 0),
    ("net_gross", "fraction", +1),
    ("porosity", "percent", +1),
    ("water_saturation", "percent", -1),
    ("fvf", "m3/m3", 0),
    ("depth", "m TVD", -1),
    ("temperature", "deg C", -1),
    ("pressure", "atm", -1),
    ("permeability", "mD", +1),
    ("reservoir_age", "Myr", -1),
    ("api_gravity", "deg API", +1),
    ("viscosity", "cp", -1),
    ("water_salinity", "ppm", 0),
    ("ooip", "Mt", 0),
    ("gor", "m3/t", 0),
    ("structural_dip", "deg", 0),
]


def _pre_physical(name: str, z: np.ndarray) -> np.ndarray:
    if name == "net_pay":
        return np.exp(np.log(15.0) + 0.5 * z)
    if name == "net_gross":
        return np.clip(0.6 + 0.12 * z, 0.05, 1.0)
    if name == "porosity":
        return np.clip(18.0 + 4.0 * z, 2.0, 40.0)
    if name == "water_saturation":
        return np.clip(30.0 + 8.0 * z, 5.0, 80.0)
    if name == "fvf":
        return np.clip(1.2 + 0.1 * z, 1.0, None)
    if name == "depth":
        return np.clip(2000.0 + 500.0 * z, 200.0, 6000.0)
    if name == "temperature":
        return np.clip(80.0 + 20.0 * z, 10.0, 200.0)
    if name == "pressure":
        return np.clip(200.0 + 50.0 * z, 20.0, 800.0)
    if name == "permeability":
        return np.exp(np.log(100.0) + 0.5 * z)
    if name == "reservoir_age":
        return np.clip(150.0 + 60.0 * z, 2.0, 500.0)
    if name == "api_gravity":
        return 32.0 + 5.0 * z
    if name == "viscosity":
        return np.exp(np.log(3.0) + 0.5 * z)
    if name == "water_salinity":
        return np.clip(80000.0 + 30000.0 * z, 1000.0, None)
    if name == "ooip":
        return np.exp(np.log(30.0) + 0.6 * z)
    if name == "gor":
        return np.exp(np.log(80.0) + 0.5 * z)
    if name == "structural_dip":
        return np.exp(np.log(3.0) + 0.5 * z)
    raise KeyError(name)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = PRE
    n: int = 400
    noise_sigma: float | None = None  # None -> 5.0 (pre, percent) / 0.02 (post, relative)
    cluster_separation: float = 6.0
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in (PRE, POST):
            raise ValueError(f"scenario must be {PRE!r} or {POST!r}, got {self.scenario!r}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if self.cluster_separation < 0:
            raise ValueError("cluster_separation must be >= 0")

    @property
    def sigma(self) -> float:
        if self.noise_sigma is not None:
            return self.noise_sigma
        return 5.0 if self.scenario == PRE else 0.02

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _inject_missing(rng, columns: dict, names, rate: float) -> None:
    if rate <= 0:
        return
    for name in names:
        mask = rng.random(len(columns[name])) < rate
        col = columns[name]
        if col.dtype == object:
            col = col.copy()
            col[mask] = None
        else:
            col = np.where(mask, np.nan, col)
        columns[name] = col


def pre_schema() -> tuple[ColumnSchema, ...]:
    cols = [ColumnSchema(name, NUMERIC, unit_note=unit) for name, unit, _ in PRE_FEATURES]
    cols.append(ColumnSchema("lithology", CATEGORICAL))
    cols.append(ColumnSchema("depletion", NUMERIC, META, "fraction of reserves produced"))
    cols.append(ColumnSchema("group", CATEGORICAL, META, "generator group label"))
    cols.append(ColumnSchema("rf", NUMERIC, TARGET, "percent"))
    return tuple(cols)


def generate_pre(cfg: ScenarioConfig) -> Dataset:
    if cfg.scenario != PRE:
        raise ValueError("generate_pre needs a pre_production config")
    rng = np.random.default_rng([cfg.seed, 1])
    n = cfg.n
    in_a = rng.random(n) < 0.5
    sign = np.where(in_a, 1.0, -1.0)
    e = {name: rng.standard_normal(n) for name, _, _ in PRE_FEATURES}
    columns = {}
    for name, _, direction in PRE_FEATURES:
        z = e[name] + direction * sign * cfg.cluster_separation / 2.0
        columns[name] = _pre_physical(name, z)
    terrigenous = rng.random(n) < np.where(in_a, 0.98, 0.35)
    columns["lithology"] = np.where(terrigenous, "terrigenous", "carbonate").astype(object)
    columns["depletion"] = rng.uniform(0.6, 1.0, n)
    columns["group"] = np.where(in_a, "A", "B").astype(object)

    s = cfg.sigma
    noise = rng.standard_normal(n)
    rf_a = (32.0 + 10.0 * np.tanh(e["porosity"]) + 7.0 * e["permeability"]
            - 5.0 * e["viscosity"] + s * noise)
    rf_b = 22.0 + 1.5 * e["porosity"] + 2.0 * s * noise
    columns["rf"] = np.clip(np.where(in_a, rf_a, rf_b), 1.0, 95.0)

    feature_names = [name for name, _, _ in PRE_FEATURES] + ["lithology"]
    _inject_missing(rng, columns, feature_names, cfg.missing_rate)
    return Dataset(pre_schema(), columns)


def post_schema() -> tuple[ColumnSchema, ...]:
    cols = [
        ColumnSchema("delta_t", NUMERIC, unit_note="years since production start"),
        ColumnSchema("ooip", NUMERIC, unit_note="original oil in place, Mt"),
        ColumnSchema("cum_oil", NUMERIC, unit_note="cumulative oil production, Mt"),
        ColumnSchema("porosity", NUMERIC, unit_note="percent"),
        ColumnSchema("permeability", NUMERIC, unit_note="mD"),
        ColumnSchema("viscosity", NUMERIC, unit_note="cp"),
        ColumnSchema("net_gross", NUMERIC, unit_note="fraction"),
        ColumnSchema("depth", NUMERIC, unit_note="m TVD"),
        ColumnSchema("well_count", NUMERIC, unit_note="producers"),
        ColumnSchema("lithology", CATEGORICAL),
        ColumnSchema("offshore", CATEGORICAL),
        ColumnSchema("rf", NUMERIC, TARGET, "percent"),
    ]
    return tuple(cols)


def post_w_true(V) -> np.ndarray:
    return POST_W1 * np.sqrt(np.asarray(V, dtype=float)) + POST_W0


def generate_post(cfg: ScenarioConfig) -> Dataset:
    if cfg.scenario != POST:
        raise ValueError("generate_post needs a post_production config")
    rng = np.random.default_rng([cfg.seed, 2])
    n = cfg.n
    V = np.clip(np.exp(np.log(20.0) + 0.8 * rng.standard_normal(n)), 0.5, 800.0)
    dt = rng.uniform(1.0, 40.0, n)
    e_por, e_perm, e_visc, u = rng.standard_normal((4, n))
    score = 0.8 * e_por + 0.6 * e_perm - 0.7 * e_visc
    rf = np.clip(0.08 + 0.30 / (1.0 + np.exp(-score)) + 0.07 * u, 0.02, 0.85)
    w = post_w_true(V)
    eps = rng.standard_normal(n) * cfg.sigma
    P = np.clip(rf * V * dt / (dt + w) * (1.0 + eps), 0.0, V)

    columns = {
        "delta_t": dt,
        "ooip": V,
        "cum_oil": P,
        "porosity": np.clip(18.0 + 4.0 * e_por, 2.0, 40.0),
        "permeability": np.exp(np.log(100.0) + 0.8 * e_perm),
        "viscosity": np.exp(np.log(3.0) + 0.6 * e_visc),
        "net_gross": np.clip(0.6 + 0.12 * rng.standard_normal(n), 0.05, 1.0),
        "depth": np.clip(2000.0 + 500.0 * rng.standard_normal(n), 200.0, 6000.0),
        "well_count": np.round(np.exp(np.log(30.0) + 0.5 * np.log(V / 20.0)
                                      + 0.3 * rng.standard_normal(n))),
        "lithology": np.where(rng.random(n) < 0.6, "terrigenous", "carbonate").astype(object),
        "offshore": np.where(rng.random(n) < 0.3, "offshore", "onshore").astype(object),
        "rf": 100.0 * rf,
    }
    feature_names = [c.name for c in post_schema() if c.role != TARGET]
    _inject_missing(rng, columns, feature_names, cfg.missing_rate)
    return Dataset(post_schema(), columns)


def generate(cfg: ScenarioConfig) -> Dataset:
    return generate_pre(cfg) if cfg.scenario == PRE else generate_post(cfg)
