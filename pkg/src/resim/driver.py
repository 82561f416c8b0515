"""Input decks, simulation orchestration, partitioning, output, CLI.

Deck format: sectioned plain text, ``key = value`` lines, ``#`` comments.
Sections: [grid], [fields], [fluid], [init], [wells], [schedule], [solver],
[time], [output] and numeric [table:NAME] blocks (rs, bo, bg, muo, pcow,
pcog).  Repeatable keys: ``well``, ``perf`` (in [wells]) and ``at`` (in
[schedule]).  Rates are signed, injection positive, in STB/day (liquids) or
Mscf/day (gas); R_s tables are surface-ft^3 per surface-ft^3.
See decks/ for complete examples.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, RockFields, cell_index, load_spe10_fields, FieldFormatError
from .linear import SolverConfig
from .model import ReservoirModel, ReservoirState
from .nonlinear import (NewtonConfig, StepController, RunReport, StepRecord,
                        SimulationAbort, advance_timestep)
from .parallel import WorkerPool
from .pvt import CoreyTwoPhase, FluidSystem, PvtModel, Table1D, ThreePhaseRelPerm
from .wells import (Constraint, Schedule, Well, WellConfigError, apply_schedule,
                    complete_vertical)
from . import units

log = logging.getLogger(__name__)


class DeckError(ValueError):
    """Raised for malformed or inconsistent input decks."""


@dataclass
class Partition:
    workers: int
    ranges: list[tuple[int, int]]
    boundary_faces: list[tuple[int, int]] = field(default_factory=list)


def partition_cells(ncell: int, workers: int, grid: Grid | None = None) -> Partition:
    """Near-equal contiguous cell ranges; sizes differ by at most one cell.

    With a grid, faces whose two cells live in different ranges are listed
    exactly once as (lower cell, upper cell) pairs.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers > ncell:
        log.warning("more workers (%d) than cells (%d); reducing", workers, ncell)
        workers = ncell
    base, extra = divmod(ncell, workers)
    ranges = []
    start = 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        ranges.append((start, start + size))
        start += size
    part = Partition(workers, ranges)
    if grid is not None:
        owner = np.empty(ncell, dtype=int)
        for w, (c0, c1) in enumerate(ranges):
            owner[c0:c1] = w
        from .grid import has_upper_neighbor

        for ax in range(3):
            if grid.shape()[ax] < 2:
                continue
            s = grid.stride(ax)
            a = np.nonzero(has_upper_neighbor(grid, ax))[0]
            cross = owner[a] != owner[a + s]
            part.boundary_faces.extend((int(x), int(x + s)) for x in a[cross])
    return part


@dataclass
class OutputConfig:
    report_csv: str = ""
    vtk_every: int = 0
    vtk_prefix: str = "resim_out"
    dump_matrices: bool = False


@dataclass
class Deck:
    grid: Grid
    rock: RockFields
    fluid: FluidSystem
    wells: list[Well]
    schedule: Schedule
    newton: NewtonConfig
    solver: SolverConfig
    controller: StepController
    t_end: float
    p_init: float = 4000.0
    p_b_init: float = 0.0
    s_w_init: float = -1.0       # negative: default to s_wc
    s_g_init: float = 0.0
    output: OutputConfig = field(default_factory=OutputConfig)
    effective: dict[str, str] = field(default_factory=dict)

    def echo_lines(self) -> list[str]:
        return [f"{k} = {v}" for k, v in self.effective.items()]


_SECTION_KEYS = {
    "grid": {"nx", "ny", "nz", "dx", "dy", "dz", "depth_top"},
    "fields": {"perm", "poro", "kx", "ky", "kz"},
    "fluid": {"model", "s_wc", "s_or", "s_gc", "mu_w", "mu_o", "mu_g",
              "rho_w_ref", "rho_o_ref", "rho_g_ref", "c_w", "c_o", "c_r",
              "c_mu", "p_ref", "pvt_defaults"},
    "init": {"p_init", "p_b_init", "s_w_init", "s_g_init"},
    "wells": {"well", "perf"},
    "schedule": {"at"},
    "solver": {"newton_tol", "newton_atol", "newton_max", "forcing_rule",
               "gamma", "beta", "theta_fixed", "theta0", "theta_min",
               "theta_max", "max_ds", "max_dp", "mb_tol", "linear_max_it",
               "preconditioner", "decoupling", "ilu_ordering"},
    "time": {"t_end", "dt_init", "dt_max", "dt_min", "growth", "cut", "max_cuts"},
    "output": {"report_csv", "vtk_every", "vtk_prefix", "dump_matrices"},
}

_TABLES = ("rs", "bo", "bg", "muo", "pcow", "pcog")

_WELL_KEYS = {"type", "fluid", "rw", "skin", "refdepth", "wi",
              "bhp", "water_rate", "oil_rate", "liquid_rate", "gas_rate"}


def load_deck(path: str) -> Deck:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_deck(text, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_deck(text: str, base_dir: str = ".") -> Deck:
    """Parse and fully validate a deck; defaults are applied and recorded."""
    sections: dict[str, list[tuple[int, str, str]]] = {}
    tables: dict[str, list[list[float]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name.startswith("table:"):
                tname = name.split(":", 1)[1]
                if tname not in _TABLES:
                    raise DeckError(f"line {lineno}: unknown table {tname!r} "
                                    f"(known: {', '.join(_TABLES)})")
                current = ("table", tname)
                tables.setdefault(tname, [])
            elif name in _SECTION_KEYS:
                current = ("section", name)
                sections.setdefault(name, [])
            else:
                raise DeckError(f"line {lineno}: unknown section [{name}]")
            continue
        if current is None:
            raise DeckError(f"line {lineno}: content before any section")
        kind, name = current
        if kind == "table":
            try:
                tables[name].append([float(t) for t in line.split()])
            except ValueError:
                raise DeckError(f"line {lineno}: non-numeric table row {line!r}") from None
            continue
        if "=" not in line:
            raise DeckError(f"line {lineno}: expected key = value, got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key not in _SECTION_KEYS[name]:
            raise DeckError(f"line {lineno}: unknown key {key!r} in [{name}]")
        sections[name].append((lineno, key, val))
    return _build_deck(sections, tables, base_dir)


class _Section:
    def __init__(self, rows, name):
        self.name = name
        self.rows = rows
        self.single: dict[str, tuple[int, str]] = {}
        for lineno, key, val in rows:
            if key in ("well", "perf", "at"):
                continue
            if key in self.single:
                raise DeckError(f"line {lineno}: duplicate key {key!r} in [{name}]")
            self.single[key] = (lineno, val)

    def get(self, key, default=None, cast=str):
        if key not in self.single:
            return default
        lineno, val = self.single[key]
        try:
            if cast is bool:
                return val.lower() in ("1", "true", "yes", "on")
            return cast(val)
        except ValueError:
            raise DeckError(f"line {lineno}: bad value for {key}: {val!r}") from None

    def repeated(self, key):
        return [(lineno, val) for lineno, k, val in self.rows if k == key]


def _required(sections, name):
    if name not in sections:
        raise DeckError(f"missing required section [{name}]")
    return _Section(sections[name], name)


def _build_deck(sections, tables, base_dir) -> Deck:
    eff: dict[str, str] = {}

    def rec(section, key, value):
        eff[f"{section}.{key}"] = str(value)

    g = _required(sections, "grid")
    grid = Grid(nx=g.get("nx", 1, int), ny=g.get("ny", 1, int), nz=g.get("nz", 1, int),
                dx=g.get("dx", 10.0, float), dy=g.get("dy", 10.0, float),
                dz=g.get("dz", 10.0, float), depth_top=g.get("depth_top", 0.0, float))
    for k in ("nx", "ny", "nz", "dx", "dy", "dz", "depth_top"):
        rec("grid", k, getattr(grid, k))

    f = _Section(sections.get("fields", []), "fields")
    rock = _load_fields(f, grid, base_dir, rec)

    fl = _required(sections, "fluid")
    fluid = _build_fluid(fl, tables, rec)

    ini = _Section(sections.get("init", []), "init")
    p_init = ini.get("p_init", 4000.0, float)
    p_b_init = ini.get("p_b_init", 0.0, float)
    s_w_init = ini.get("s_w_init", -1.0, float)
    s_g_init = ini.get("s_g_init", 0.0, float)
    for k, v in (("p_init", p_init), ("p_b_init", p_b_init),
                 ("s_w_init", s_w_init if s_w_init >= 0 else "s_wc"),
                 ("s_g_init", s_g_init)):
        rec("init", k, v)

    w = _Section(sections.get("wells", []), "wells")
    wells = _build_wells(w, grid, rock, rec)

    s = _Section(sections.get("schedule", []), "schedule")
    schedule = _build_schedule(s, rec)
    try:
        schedule.validate_names(wells)
    except WellConfigError as exc:
        raise DeckError(str(exc)) from None
    _check_constraints_at_start(wells, schedule)

    sv = _Section(sections.get("solver", []), "solver")
    newton = NewtonConfig(
        tol=sv.get("newton_tol", 1e-2, float),
        atol=sv.get("newton_atol", 1e-8, float),
        max_newton=sv.get("newton_max", 20, int),
        forcing_rule=sv.get("forcing_rule", "eq13_c"),
        gamma=sv.get("gamma", 1.0, float),
        beta=sv.get("beta", 2.0, float),
        theta_fixed=sv.get("theta_fixed", 1e-5, float),
        theta0=sv.get("theta0", 0.1, float),
        theta_min=sv.get("theta_min", 1e-4, float),
        theta_max=sv.get("theta_max", 0.9, float),
        max_ds=sv.get("max_ds", 0.2, float),
        max_dp=sv.get("max_dp", 500.0, float),
        mb_tol=sv.get("mb_tol", None, float))
    solver = SolverConfig(
        max_iterations=sv.get("linear_max_it", 50, int),
        preconditioner=sv.get("preconditioner", "cpr_fpf"),
        decoupling=sv.get("decoupling", "quasi_impes"),
        ilu_ordering=sv.get("ilu_ordering", "redblack"))
    for k in ("tol", "atol", "max_newton", "forcing_rule", "gamma", "beta",
              "theta_fixed", "theta0", "theta_min", "theta_max", "max_ds",
              "max_dp", "mb_tol"):
        rec("solver", k, getattr(newton, k))
    for k in ("max_iterations", "preconditioner", "decoupling", "ilu_ordering"):
        rec("solver", k, getattr(solver, k))

    t = _required(sections, "time")
    controller = StepController(
        dt_init=t.get("dt_init", 1.0, float), dt_max=t.get("dt_max", 100.0, float),
        dt_min=t.get("dt_min", 1e-6, float), growth=t.get("growth", 2.0, float),
        cut=t.get("cut", 0.5, float), max_cuts=t.get("max_cuts", 10, int))
    t_end = t.get("t_end", None, float)
    if t_end is None or t_end < 0:
        raise DeckError("[time] must set t_end >= 0")
    rec("time", "t_end", t_end)
    for k in ("dt_init", "dt_max", "dt_min", "growth", "cut", "max_cuts"):
        rec("time", k, getattr(controller, k))

    o = _Section(sections.get("output", []), "output")
    output = OutputConfig(
        report_csv=o.get("report_csv", "", str),
        vtk_every=o.get("vtk_every", 0, int),
        vtk_prefix=o.get("vtk_prefix", "resim_out", str),
        dump_matrices=o.get("dump_matrices", False, bool))
    for k in ("report_csv", "vtk_every", "vtk_prefix", "dump_matrices"):
        rec("output", k, getattr(output, k))

    return Deck(grid=grid, rock=rock, fluid=fluid, wells=wells, schedule=schedule,
                newton=newton, solver=solver, controller=controller, t_end=t_end,
                p_init=p_init, p_b_init=p_b_init, s_w_init=s_w_init,
                s_g_init=s_g_init, output=output, effective=eff)


def _load_fields(f: _Section, grid: Grid, base_dir: str, rec) -> RockFields:
    perm = f.get("perm", None)
    poro = f.get("poro", "0.2")
    n = grid.ncell

    def resolve(ref):
        path = os.path.join(base_dir, ref[5:].strip())
        if not os.path.exists(path):
            raise DeckError(f"referenced field file does not exist: {path}")
        return path

    if perm is not None:
        if any(f.get(k) is not None for k in ("kx", "ky", "kz")):
            raise DeckError("[fields] perm file and kx/ky/kz constants are exclusive")
        if not perm.startswith("file:"):
            raise DeckError("[fields] perm must be a file: reference")
        ppath = resolve(perm)
        if poro.startswith("file:"):
            poro_src: object = open(resolve(poro), "rb")
        else:
            poro_src = " ".join([poro] * n)
        try:
            with open(ppath, "rb") as pf:
                rock = load_spe10_fields(pf, poro_src, grid)
        except FieldFormatError as exc:
            raise DeckError(str(exc)) from None
        finally:
            if hasattr(poro_src, "close"):
                poro_src.close()
        rec("fields", "perm", perm)
        rec("fields", "poro", poro)
        return rock
    kx = f.get("kx", 100.0, float)
    ky = f.get("ky", kx, float)
    kz = f.get("kz", kx, float)
    if poro.startswith("file:"):
        raise DeckError("[fields] porosity file requires a perm file too")
    rock = RockFields(np.full(n, kx), np.full(n, ky), np.full(n, kz),
                      np.full(n, float(poro))).clamped()
    rec("fields", "kx", kx)
    rec("fields", "ky", ky)
    rec("fields", "kz", kz)
    rec("fields", "poro", poro)
    return rock


def _build_fluid(fl: _Section, tables, rec) -> FluidSystem:
    kind = fl.get("model", "two_phase")
    if kind not in ("two_phase", "black_oil"):
        raise DeckError(f"[fluid] model must be two_phase or black_oil, got {kind!r}")
    corey = CoreyTwoPhase(s_wc=fl.get("s_wc", 0.2, float),
                          s_or=fl.get("s_or", 0.2, float))
    relperm = ThreePhaseRelPerm(corey=corey, s_gc=fl.get("s_gc", 0.0, float))

    use_spe1 = fl.get("pvt_defaults", "spe1" if kind == "black_oil" else "none")
    base = PvtModel.spe1_like() if use_spe1 == "spe1" else PvtModel()
    kw = {}
    for key in ("rho_w_ref", "rho_o_ref", "rho_g_ref", "c_w", "c_o", "c_r",
                "c_mu", "p_ref", "mu_w", "mu_g"):
        v = fl.get(key, None, float)
        kw[key] = getattr(base, key) if v is None else v
    mu_o = fl.get("mu_o", None, float)
    kw["mu_o_table"] = Table1D.constant(mu_o) if mu_o is not None else base.mu_o_table
    for tname, attr in (("rs", "rs_table"), ("bo", "bo_table"), ("bg", "bg_table"),
                        ("pcow", "pcow_table"), ("pcog", "pcog_table")):
        kw[attr] = _table_from_rows(tables.get(tname), tname) or getattr(base, attr)
    muo_rows = tables.get("muo")
    if muo_rows:
        kw["mu_o_table"] = _table_from_rows(muo_rows, "muo")
        slopes = [r[2] for r in muo_rows if len(r) > 2]
        if slopes:
            if len(slopes) != len(muo_rows):
                raise DeckError("[table:muo] third column must be on every row or none")
            kw["mu_o_slope_table"] = Table1D([r[0] for r in muo_rows], slopes)
    pvt = PvtModel(**kw)
    rec("fluid", "model", kind)
    rec("fluid", "s_wc", corey.s_wc)
    rec("fluid", "s_or", corey.s_or)
    rec("fluid", "s_gc", relperm.s_gc)
    for key in ("rho_w_ref", "rho_o_ref", "rho_g_ref", "c_w", "c_o", "c_r",
                "c_mu", "p_ref", "mu_w", "mu_g"):
        rec("fluid", key, getattr(pvt, key))
    rec("fluid", "mu_o_table", _table_summary(pvt.mu_o_table))
    for tname, attr in (("rs", "rs_table"), ("bo", "bo_table"), ("bg", "bg_table"),
                        ("pcow", "pcow_table"), ("pcog", "pcog_table")):
        rec("fluid", attr, _table_summary(getattr(pvt, attr)))
    return FluidSystem(kind=kind, relperm=relperm, pvt=pvt)


def _table_summary(tab: Table1D) -> str:
    if len(tab.x) == 1:
        return f"constant {tab.y[0]:g}"
    return f"{len(tab.x)} rows on [{tab.x[0]:g}, {tab.x[-1]:g}]"


def _table_from_rows(rows, name) -> Table1D | None:
    if not rows:
        return None
    if any(len(r) < 2 for r in rows):
        raise DeckError(f"[table:{name}] rows need at least two columns")
    try:
        return Table1D([r[0] for r in rows], [r[1] for r in rows])
    except ValueError as exc:
        raise DeckError(f"[table:{name}]: {exc}") from None


def _build_wells(w: _Section, grid: Grid, rock: RockFields, rec) -> list[Well]:
    wells: list[Well] = []
    by_name: dict[str, Well] = {}
    explicit_wi: dict[str, float] = {}
    for lineno, val in w.repeated("well"):
        parts = val.split()
        if not parts:
            raise DeckError(f"line {lineno}: empty well definition")
        name = parts[0]
        if name in by_name:
            raise DeckError(f"line {lineno}: duplicate well {name!r}")
        kv = {}
        for tok in parts[1:]:
            if "=" not in tok:
                raise DeckError(f"line {lineno}: expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            if k not in _WELL_KEYS:
                raise DeckError(f"line {lineno}: unknown well key {k!r}")
            kv[k] = v
        try:
            well = Well(name=name, kind=kv.get("type", "producer"),
                        inj_phase={"water": "w", "gas": "g", "w": "w", "g": "g"}
                        .get(kv.get("fluid", "water")),
                        r_w=float(kv.get("rw", 0.3)), skin=float(kv.get("skin", 0.0)),
                        ref_depth=float(kv.get("refdepth", 0.0)))
        except (WellConfigError, ValueError, TypeError) as exc:
            raise DeckError(f"line {lineno}: {exc}") from None
        for ckind in ("bhp", "water_rate", "oil_rate", "liquid_rate", "gas_rate"):
            if ckind in kv:
                well.constraint = Constraint(ckind, float(kv[ckind]))
        if "wi" in kv:
            explicit_wi[name] = float(kv["wi"])
        well.slot = len(wells)
        wells.append(well)
        by_name[name] = well
        rec("wells", f"well.{name}", val[len(name):].strip() or "producer")
    for lineno, val in w.repeated("perf"):
        parts = val.split()
        if len(parts) != 4:
            raise DeckError(f"line {lineno}: perf needs: well_name i j k (k may be k0:k1)")
        name = parts[0]
        if name not in by_name:
            raise DeckError(f"line {lineno}: perf references undeclared well {name!r}")
        try:
            i, j = int(parts[1]), int(parts[2])
            if ":" in parts[3]:
                k0, k1 = (int(p) for p in parts[3].split(":", 1))
            else:
                k0 = int(parts[3])
                k1 = k0 + 1
            cells = [cell_index(i, j, k, grid) for k in range(k0, k1)]
        except (ValueError, IndexError) as exc:
            raise DeckError(f"line {lineno}: {exc}") from None
        try:
            complete_vertical(by_name[name], grid, rock, cells,
                              wi=explicit_wi.get(name))
        except WellConfigError as exc:
            raise DeckError(f"line {lineno}: {exc}") from None
        rec("wells", f"perf.{name}.{len(by_name[name].perforations) - 1}",
            f"({i},{j},{parts[3]})")
    for well in wells:
        if not well.perforations:
            raise DeckError(f"well {well.name} has no perforations")
    return wells


def _build_schedule(s: _Section, rec) -> Schedule:
    entries = []
    for i, (lineno, val) in enumerate(s.repeated("at")):
        parts = val.split()
        if len(parts) != 4:
            raise DeckError(f"line {lineno}: at needs: time well_name kind value")
        try:
            entries.append((float(parts[0]), parts[1],
                            Constraint(parts[2], float(parts[3]))))
        except (ValueError, WellConfigError) as exc:
            raise DeckError(f"line {lineno}: {exc}") from None
        rec("schedule", f"at.{i}", val)
    try:
        return Schedule(entries)
    except WellConfigError as exc:
        raise DeckError(str(exc)) from None


def _check_constraints_at_start(wells, schedule):
    starts = {name for t, name, _ in schedule.entries if t <= 0.0}
    for well in wells:
        if well.constraint.value == 0.0 and well.constraint.kind == "bhp" \
                and well.name not in starts:
            raise DeckError(f"well {well.name} has no constraint at t = 0 "
                            f"(set one on the well line or in [schedule])")


def initial_state(deck: Deck) -> ReservoirState:
    """Uniform pressure at the top datum, hydrostatically adjusted by depth."""
    from .pvt import phase_density

    grid, fluid = deck.grid, deck.fluid
    n = grid.ncell
    if fluid.kind == "black_oil" and deck.p_b_init > 0:
        pb_for_rho = min(deck.p_b_init, deck.p_init)
    else:
        pb_for_rho = fluid.pvt.p_ref if fluid.kind == "two_phase" else deck.p_init
    rho0 = phase_density("o", deck.p_init, pb_for_rho, 0.0, fluid.pvt)
    p_o = deck.p_init + rho0 * units.GRAVITY * (grid.cell_depth - grid.depth_top)
    s_w0 = deck.s_w_init if deck.s_w_init >= 0 else fluid.relperm.corey.s_wc
    s_w = np.full(n, s_w0)
    if fluid.kind == "black_oil":
        sat = np.asarray(deck.p_b_init >= p_o - 1e-12) | (deck.s_g_init > 0)
        sat = np.broadcast_to(sat, (n,)).copy()
        x3 = np.where(sat, deck.s_g_init, deck.p_b_init)
    else:
        sat = None
        x3 = None
    p_h = np.zeros(len(deck.wells))
    for well in deck.wells:
        if well.constraint.kind == "bhp":
            p_h[well.slot] = well.constraint.value
        else:
            cells = [p.cell for p in well.perforations]
            p_h[well.slot] = float(np.mean(p_o[cells]))
    return ReservoirState(p_o=p_o, s_w=s_w, x3=x3, sat=sat, p_h=p_h, t=0.0)


def write_vtk(grid: Grid, state: ReservoirState, rock: RockFields, path: str):
    """Legacy-VTK structured-points file with cell-data arrays."""
    arrays = [("pressure", state.p_o), ("s_w", state.s_w)]
    if state.x3 is not None:
        arrays.append(("s_g", np.where(state.sat, state.x3, 0.0)))
    arrays += [("kx", rock.kx), ("poro", rock.poro)]
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("# vtk DataFile Version 3.0\n")
            fh.write(f"resim state t={state.t:g} days\n")
            fh.write("ASCII\nDATASET STRUCTURED_POINTS\n")
            fh.write(f"DIMENSIONS {grid.nx + 1} {grid.ny + 1} {grid.nz + 1}\n")
            fh.write("ORIGIN 0 0 0\n")
            fh.write(f"SPACING {grid.dx:g} {grid.dy:g} {grid.dz:g}\n")
            fh.write(f"CELL_DATA {grid.ncell}\n")
            for name, arr in arrays:
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for i0 in range(0, len(arr), 6):
                    fh.write(" ".join(f"{v:.9e}" for v in arr[i0:i0 + 6]) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc


def run_simulation(deck: Deck, workers: int = 1, report_csv: str | None = None,
                   vtk_every: int | None = None, dump_matrices: bool | None = None,
                   output_dir: str = ".") -> RunReport:
    """Execute the deck to t_end; returns the report and writes outputs.

    Per-step records go to CSV, the final state to legacy VTK, and a summary
    table to the log.  Iteration counts are deterministic in ``workers``.
    """
    out = deck.output
    report_csv = report_csv if report_csv is not None else (out.report_csv or None)
    vtk_every = out.vtk_every if vtk_every is None else vtk_every
    dump_matrices = out.dump_matrices if dump_matrices is None else dump_matrices
    os.makedirs(output_dir, exist_ok=True)

    for line in deck.echo_lines():
        log.info("deck: %s", line)
    log.info("run: workers = %d", workers)

    grid = deck.grid
    part = partition_cells(grid.ncell, workers, grid)
    model = ReservoirModel(grid, deck.rock, deck.fluid)
    state = initial_state(deck)
    report = RunReport(workers=workers)
    report.initial_mass = model.mass_in_place(state)
    wells = deck.wells

    vtk_path = os.path.join(output_dir, f"{out.vtk_prefix}_final.vtk")
    csv_path = os.path.join(output_dir, report_csv) if report_csv else None

    switch_times = sorted({entry[0] for entry in deck.schedule.entries})

    with WorkerPool(part.workers, part) as pool:
        workspace: dict = {}
        t = 0.0
        dt = min(deck.controller.dt_init, deck.t_end) if deck.t_end > 0 else 0.0
        step = 0
        try:
            apply_schedule(deck.schedule, 0.0, wells)
            while t < deck.t_end - 1e-9:
                if apply_schedule(deck.schedule, t, wells) and step > 0:
                    dt = deck.controller.dt_init
                    log.info("t=%g: schedule switch, dt reset to %g", t, dt)
                dt = min(dt, deck.t_end - t)
                # land steps exactly on upcoming schedule switches
                for ts in switch_times:
                    if ts > t + 1e-9:
                        dt = min(dt, ts - t)
                        break
                prefix = os.path.join(output_dir, f"step{step:04d}") \
                    if dump_matrices else None
                wall0 = time.perf_counter()
                state_new, dt_acc, stats = advance_timestep(
                    model, state, dt, wells, deck.newton, deck.solver,
                    deck.controller, pool=pool, dump_prefix=prefix,
                    workspace=workspace)
                wall = time.perf_counter() - wall0
                masses = model.mass_in_place(state_new)
                rates = model.well_mass_rates(state_new, wells)
                report.steps.append(StepRecord(
                    step=step + 1, t=t + dt_acc, dt=dt_acc, newtons=stats.newtons,
                    linear_iters=stats.linear_iters, cuts=stats.cuts,
                    wall_time=wall, assembly_time=stats.assembly_time,
                    solve_time=stats.solve_time, mass_in_place=masses,
                    well_injected={c: r[0] * dt_acc for c, r in rates.items()},
                    well_produced={c: r[1] * dt_acc for c, r in rates.items()},
                    residual_sums=stats.residual_sums))
                report.newton_log.extend(stats.newton_log)
                state = state_new
                t += dt_acc
                step += 1
                dt = min(dt_acc * deck.controller.growth, deck.controller.dt_max)
                if vtk_every and step % vtk_every == 0:
                    write_vtk(grid, state, deck.rock,
                              os.path.join(output_dir, f"{out.vtk_prefix}_{step:04d}.vtk"))
        except SimulationAbort as abort:
            if csv_path:
                report.to_csv(csv_path)
            write_vtk(grid, state, deck.rock, vtk_path)
            abort.state = state
            abort.report = report
            log.error("simulation aborted at t=%g: %s", t, abort)
            raise

    if csv_path:
        report.to_csv(csv_path)
    write_vtk(grid, state, deck.rock, vtk_path)
    log.info("summary:\n%s", report.format_table())
    report.final_state = state
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="resim",
                                     description="fully implicit reservoir simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a simulation deck")
    run.add_argument("deck", help="path to the input deck")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--report", default=None, help="per-step CSV output path")
    run.add_argument("--vtk-every", type=int, default=None,
                     help="write VTK snapshots every K accepted steps")
    run.add_argument("--dump-matrices", action="store_true", default=None,
                     help="write Matrix Market dumps per Newton iteration")
    run.add_argument("--output-dir", default=".")
    run.add_argument("-q", "--quiet", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        deck = load_deck(args.deck)
    except (DeckError, OSError) as exc:
        print(f"deck error: {exc}", file=sys.stderr)
        return 1
    try:
        report = run_simulation(deck, workers=args.workers, report_csv=args.report,
                                vtk_every=args.vtk_every,
                                dump_matrices=args.dump_matrices,
                                output_dir=args.output_dir)
    except SimulationAbort as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return 2
    print(report.format_table())
    return 0


if __name__ == "__main__":
    sys.exit(main())
