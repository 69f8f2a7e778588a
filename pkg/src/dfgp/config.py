"""Run configuration: one INI-style file drives every CLI command.

Parsing and serialization round-trip exactly; all scientific choices live in
the file so runs are reproducible from (config, seed) alone.
"""

from __future__ import annotations

import configparser
import io as _io
from dataclasses import dataclass, field

from .basis import layout_multires
from .car import build_adjacency
from .cv import HoldoutPlan
from .estimate import EstimatorConfig
from .grid import build_grid
from .model import DEFAULT_COVARIATES
from .synth import InstrumentSpec, ScenarioConfig

PROTOCOLS = ("filtering", "smoothing")


@dataclass(frozen=True)
class GridSection:
    nx: int = 40
    ny: int = 40
    cell_size: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    mask: str = ""


@dataclass(frozen=True)
class BasisSection:
    counts: tuple[int, ...] = (9,)
    radius_mult: float = 1.5
    centers_csv: str = ""


@dataclass(frozen=True)
class DataSection:
    observations: str = "observations.csv"
    footprints: str = "footprints.csv"
    truth: str = ""
    params: str = ""


@dataclass(frozen=True)
class ScenarioSection:
    T: int = 8
    beta: tuple[float, ...] = (1.0, 0.5, -0.2)
    h_diag: float = 0.8
    u_scale: float = 0.25
    k0_scale: float = 1.0
    gamma: float = 0.75
    tau2: float = 1.0
    fine_sigma2: float = 0.25
    fine_v: float = 1.0
    fine_swath_width: int = 8
    fine_swath_period: int = 20
    fine_swath_shift: int = 7
    fine_drop_rate: float = 0.1
    coarse_block: int = 4
    coarse_sigma2: float = 0.04
    coarse_v: float = 1.0
    coarse_drop_rate: float = 0.05


@dataclass(frozen=True)
class CVSection:
    methods: tuple[str, ...] = ("dfgp", "lowrank", "localkrige")
    lk_k: int = 100
    lk_max_fit_evals: int = 150


@dataclass(frozen=True)
class HoldoutSection:
    x0: float = 0.0
    x1: float = 0.0
    y0: float = 0.0
    y1: float = 0.0
    t_first: int = 2
    t_last: int = 8
    fraction: float = 0.1
    instrument: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    protocol: str = "smoothing"
    threads: int = 0
    grid: GridSection = field(default_factory=GridSection)
    covariates: tuple[str, ...] = DEFAULT_COVARIATES
    basis: BasisSection = field(default_factory=BasisSection)
    data: DataSection = field(default_factory=DataSection)
    estimator_mode: str = "sem"
    estimator_max_iter: int = 60
    estimator_tol_loglik: float = 1e-6
    estimator_tol_param: float = 1e-5
    estimator_consecutive: int = 5
    estimator_nugget_time_invariant: bool = False
    estimator_hu_blocks: tuple[int, ...] = ()
    estimator_draws: int = 1
    estimator_sem_average_frac: float = 0.2
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    holdout: HoldoutSection = field(default_factory=HoldoutSection)
    cv: CVSection = field(default_factory=CVSection)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")

    # ---- derived objects -------------------------------------------------
    def build_grid(self):
        g = self.grid
        mask = None
        if g.mask:
            import numpy as np
            mask = np.loadtxt(g.mask, dtype=int).astype(bool).ravel()
        return build_grid(g.nx, g.ny, g.cell_size, (g.origin_x, g.origin_y), mask)

    def build_basis(self, grid):
        if self.basis.centers_csv:
            import csv

            import numpy as np

            from .basis import BisquareBasis
            cs, rs = [], []
            with open(self.basis.centers_csv, newline="") as f:
                for row in csv.DictReader(f):
                    cs.append((float(row["center_x"]), float(row["center_y"])))
                    rs.append(float(row["radius"]))
            return BisquareBasis(np.asarray(cs), np.asarray(rs),
                                 np.zeros(len(rs), dtype=int))
        return layout_multires(grid.bbox, list(self.basis.counts), self.basis.radius_mult)

    def build_structure(self, grid):
        return build_adjacency(grid)

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            mode=self.estimator_mode, max_iter=self.estimator_max_iter,
            tol_loglik=self.estimator_tol_loglik, tol_param=self.estimator_tol_param,
            consecutive=self.estimator_consecutive,
            nugget_time_invariant=self.estimator_nugget_time_invariant,
            hu_blocks=self.estimator_hu_blocks, draws=self.estimator_draws,
            sem_average_frac=self.estimator_sem_average_frac, seed=self.seed)

    def scenario_config(self) -> ScenarioConfig:
        s = self.scenario
        fine = InstrumentSpec(block=1, sigma2_eps=s.fine_sigma2, v_factor=s.fine_v,
                              swath_width=s.fine_swath_width,
                              swath_period=s.fine_swath_period,
                              swath_shift=s.fine_swath_shift,
                              drop_rate=s.fine_drop_rate)
        coarse = InstrumentSpec(block=s.coarse_block, sigma2_eps=s.coarse_sigma2,
                                v_factor=s.coarse_v, drop_rate=s.coarse_drop_rate)
        return ScenarioConfig(nx=self.grid.nx, ny=self.grid.ny,
                              cell_size=self.grid.cell_size, T=s.T,
                              basis_counts=self.basis.counts,
                              radius_mult=self.basis.radius_mult,
                              covariates=self.covariates, beta=s.beta,
                              h_diag=s.h_diag, u_scale=s.u_scale, k0_scale=s.k0_scale,
                              gamma=s.gamma, tau2=s.tau2,
                              instruments=(fine, coarse), seed=self.seed)

    def holdout_plan(self) -> HoldoutPlan:
        h = self.holdout
        return HoldoutPlan(block_x=(h.x0, h.x1), block_y=(h.y0, h.y1),
                           time_first=h.t_first, time_last=h.t_last,
                           fraction=h.fraction, instrument=h.instrument,
                           seed=self.seed)


def _csv_ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip() != "")


def _csv_floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip() != "")


def _csv_strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip() != "")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)

    def get(section, key, default, conv=str):
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            if conv is bool:
                return cp.getboolean(section, key)
            return conv(raw)
        return default

    grid = GridSection(
        nx=get("grid", "nx", 40, int), ny=get("grid", "ny", 40, int),
        cell_size=get("grid", "cell_size", 1.0, float),
        origin_x=get("grid", "origin_x", 0.0, float),
        origin_y=get("grid", "origin_y", 0.0, float),
        mask=get("grid", "mask", ""))
    basis = BasisSection(
        counts=get("basis", "counts", (9,), _csv_ints),
        radius_mult=get("basis", "radius_mult", 1.5, float),
        centers_csv=get("basis", "centers_csv", ""))
    data = DataSection(
        observations=get("data", "observations", "observations.csv"),
        footprints=get("data", "footprints", "footprints.csv"),
        truth=get("data", "truth", ""),
        params=get("data", "params", ""))
    scen = ScenarioSection(
        T=get("scenario", "T", 8, int),
        beta=get("scenario", "beta", (1.0, 0.5, -0.2), _csv_floats),
        h_diag=get("scenario", "h_diag", 0.8, float),
        u_scale=get("scenario", "u_scale", 0.25, float),
        k0_scale=get("scenario", "k0_scale", 1.0, float),
        gamma=get("scenario", "gamma", 0.75, float),
        tau2=get("scenario", "tau2", 1.0, float),
        fine_sigma2=get("scenario", "fine_sigma2", 0.25, float),
        fine_v=get("scenario", "fine_v", 1.0, float),
        fine_swath_width=get("scenario", "fine_swath_width", 8, int),
        fine_swath_period=get("scenario", "fine_swath_period", 20, int),
        fine_swath_shift=get("scenario", "fine_swath_shift", 7, int),
        fine_drop_rate=get("scenario", "fine_drop_rate", 0.1, float),
        coarse_block=get("scenario", "coarse_block", 4, int),
        coarse_sigma2=get("scenario", "coarse_sigma2", 0.04, float),
        coarse_v=get("scenario", "coarse_v", 1.0, float),
        coarse_drop_rate=get("scenario", "coarse_drop_rate", 0.05, float))
    holdout = HoldoutSection(
        x0=get("holdout", "x0", 0.0, float), x1=get("holdout", "x1", 0.0, float),
        y0=get("holdout", "y0", 0.0, float), y1=get("holdout", "y1", 0.0, float),
        t_first=get("holdout", "t_first", 2, int),
        t_last=get("holdout", "t_last", 8, int),
        fraction=get("holdout", "fraction", 0.1, float),
        instrument=get("holdout", "instrument", 1, int))
    cv = CVSection(
        methods=get("cv", "methods", ("dfgp", "lowrank", "localkrige"), _csv_strs),
        lk_k=get("cv", "lk_k", 100, int),
        lk_max_fit_evals=get("cv", "lk_max_fit_evals", 150, int))
    return RunConfig(
        seed=get("run", "seed", 0, int),
        out_dir=get("run", "out_dir", "out"),
        protocol=get("run", "protocol", "smoothing"),
        threads=get("run", "threads", 0, int),
        grid=grid,
        covariates=get("covariates", "names", DEFAULT_COVARIATES, _csv_strs),
        basis=basis, data=data,
        estimator_mode=get("estimator", "mode", "sem"),
        estimator_max_iter=get("estimator", "max_iter", 60, int),
        estimator_tol_loglik=get("estimator", "tol_loglik", 1e-6, float),
        estimator_tol_param=get("estimator", "tol_param", 1e-5, float),
        estimator_consecutive=get("estimator", "consecutive", 5, int),
        estimator_nugget_time_invariant=get("estimator", "nugget_time_invariant",
                                            False, bool),
        estimator_hu_blocks=get("estimator", "hu_blocks", (), _csv_ints),
        estimator_draws=get("estimator", "draws", 1, int),
        estimator_sem_average_frac=get("estimator", "sem_average_frac", 0.2, float),
        scenario=scen, holdout=holdout, cv=cv)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def serialize_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["run"] = {"seed": str(cfg.seed), "out_dir": cfg.out_dir,
                 "protocol": cfg.protocol, "threads": str(cfg.threads)}
    g = cfg.grid
    cp["grid"] = {"nx": str(g.nx), "ny": str(g.ny), "cell_size": repr(g.cell_size),
                  "origin_x": repr(g.origin_x), "origin_y": repr(g.origin_y),
                  "mask": g.mask}
    cp["covariates"] = {"names": ",".join(cfg.covariates)}
    b = cfg.basis
    cp["basis"] = {"counts": ",".join(map(str, b.counts)),
                   "radius_mult": repr(b.radius_mult), "centers_csv": b.centers_csv}
    d = cfg.data
    cp["data"] = {"observations": d.observations, "footprints": d.footprints,
                  "truth": d.truth, "params": d.params}
    cp["estimator"] = {
        "mode": cfg.estimator_mode, "max_iter": str(cfg.estimator_max_iter),
        "tol_loglik": repr(cfg.estimator_tol_loglik),
        "tol_param": repr(cfg.estimator_tol_param),
        "consecutive": str(cfg.estimator_consecutive),
        "nugget_time_invariant": str(cfg.estimator_nugget_time_invariant).lower(),
        "hu_blocks": ",".join(map(str, cfg.estimator_hu_blocks)),
        "draws": str(cfg.estimator_draws),
        "sem_average_frac": repr(cfg.estimator_sem_average_frac)}
    s = cfg.scenario
    cp["scenario"] = {
        "t": str(s.T), "beta": ",".join(repr(x) for x in s.beta),
        "h_diag": repr(s.h_diag), "u_scale": repr(s.u_scale),
        "k0_scale": repr(s.k0_scale), "gamma": repr(s.gamma), "tau2": repr(s.tau2),
        "fine_sigma2": repr(s.fine_sigma2), "fine_v": repr(s.fine_v),
        "fine_swath_width": str(s.fine_swath_width),
        "fine_swath_period": str(s.fine_swath_period),
        "fine_swath_shift": str(s.fine_swath_shift),
        "fine_drop_rate": repr(s.fine_drop_rate),
        "coarse_block": str(s.coarse_block), "coarse_sigma2": repr(s.coarse_sigma2),
        "coarse_v": repr(s.coarse_v), "coarse_drop_rate": repr(s.coarse_drop_rate)}
    h = cfg.holdout
    cp["holdout"] = {"x0": repr(h.x0), "x1": repr(h.x1), "y0": repr(h.y0),
                     "y1": repr(h.y1), "t_first": str(h.t_first),
                     "t_last": str(h.t_last), "fraction": repr(h.fraction),
                     "instrument": str(h.instrument)}
    cp["cv"] = {"methods": ",".join(cfg.cv.methods), "lk_k": str(cfg.cv.lk_k),
                "lk_max_fit_evals": str(cfg.cv.lk_max_fit_evals)}
    buf = _io.StringIO()
    cp.write(buf)
    return buf.getvalue()
