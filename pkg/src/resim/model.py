"""Fully implicit residual and analytic Jacobian assembly.

Backward Euler in time, two-point flux with per-phase potential upwinding in
space.  Component equations per cell are ordered (oil, water[, gas]); cell
unknowns are (p_o, s_w[, s_g or p_b]).  Well bottom-hole pressures follow all
cell blocks.  The residual of cell i, component c is

    accumulation - sum(face fluxes into i) - well sources,

with no-flow exterior boundaries.  Assembly is partitioned by contiguous cell
ranges; boundary faces are computed redundantly by both owners so the result
is bit-identical for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import units
from .diff import CellVal, FaceVal
from .grid import Grid, RockFields, face_transmissibilities
from .linear import BlockMatrix
from .pvt import FluidSystem, evaluate_properties
from .wells import Well, well_component_rates, surface_rate_scale, RATE_COMPONENTS


class AssemblyError(RuntimeError):
    """Raised when assembly produces non-finite entries."""


@dataclass
class CellState:
    """Single-cell unknown set (diagnostic view of a ReservoirState)."""

    p_o: float
    s_w: float
    s_g: float = 0.0
    p_b: float = 0.0
    saturated: bool = True


@dataclass
class ReservoirState:
    """Per-cell unknowns, well BHPs and the time level.

    For black oil, x3[i] is s_g where sat[i] else p_b; for two-phase runs x3
    and sat are None.
    """

    p_o: np.ndarray
    s_w: np.ndarray
    x3: np.ndarray | None = None
    sat: np.ndarray | None = None
    p_h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: float = 0.0

    def copy(self) -> "ReservoirState":
        return ReservoirState(
            self.p_o.copy(), self.s_w.copy(),
            None if self.x3 is None else self.x3.copy(),
            None if self.sat is None else self.sat.copy(),
            self.p_h.copy(), self.t)

    def cell(self, i: int) -> CellState:
        if self.x3 is None:
            return CellState(float(self.p_o[i]), float(self.s_w[i]))
        saturated = bool(self.sat[i])
        return CellState(float(self.p_o[i]), float(self.s_w[i]),
                         s_g=float(self.x3[i]) if saturated else 0.0,
                         p_b=float(self.p_o[i]) if saturated else float(self.x3[i]),
                         saturated=saturated)


# (component, mass-mobility, potential pressure, gravity density) per flux stream;
# solution gas travels with the oil phase.
_STREAMS = {
    "two_phase": [("w", "lam_w", "p_w", "rho_w"), ("o", "lam_o", "p_o", "rho_o")],
    "black_oil": [("w", "lam_w", "p_w", "rho_w"), ("o", "lam_o", "p_o", "rho_o"),
                  ("g", "lam_og", "p_o", "rho_o"), ("g", "lam_g", "p_g", "rho_g")],
}


class ReservoirModel:
    """Grid + rock + fluid bundle with assembly routines."""

    def __init__(self, grid: Grid, rock: RockFields, fluid: FluidSystem,
                 gravity: bool = True):
        self.grid = grid
        self.rock = rock
        self.fluid = fluid
        self.gravity = gravity
        self.axes = [ax for ax, nax in enumerate(grid.shape()) if nax > 1]
        self.tgeo = {ax: face_transmissibilities(grid, rock, ax) for ax in self.axes}
        self.depth = grid.cell_depth if gravity else np.zeros(grid.ncell)

    @property
    def m(self) -> int:
        return self.fluid.m

    @property
    def components(self) -> tuple[str, ...]:
        return self.fluid.components

    def comp_row(self, comp: str) -> int:
        return self.components.index(comp)

    # -- property evaluation helpers -------------------------------------

    def _props(self, state: ReservoirState, derivs: bool, window=None):
        sl = slice(None) if window is None else slice(*window)
        x3 = None if state.x3 is None else state.x3[sl]
        sat = None if state.sat is None else state.sat[sl]
        return evaluate_properties(state.p_o[sl], state.s_w[sl], x3, sat,
                                   self.fluid, derivs=derivs)

    def _props_at(self, state: ReservoirState, cells: np.ndarray, derivs: bool):
        x3 = None if state.x3 is None else state.x3[cells]
        sat = None if state.sat is None else state.sat[cells]
        return evaluate_properties(state.p_o[cells], state.s_w[cells], x3, sat,
                                   self.fluid, derivs=derivs)

    def _phi(self, props, window=None) -> CellVal:
        sl = slice(None) if window is None else slice(*window)
        pv = self.fluid.pvt
        poro = self.rock.poro[sl]
        return CellVal.const(poro, None if props.p_o.d is None else self.m) \
            * (1.0 + pv.c_r * (props.p_o - pv.p_ref))

    def _masses(self, props, phi) -> dict[str, CellVal]:
        out = {"w": phi * (props.s_w * props.rho_w),
               "o": phi * (props.s_o * props.rho_oo)}
        if self.fluid.kind == "black_oil":
            out["g"] = phi * (props.rho_og * props.s_o + props.rho_g * props.s_g)
        return out

    # -- public single-entity operations ----------------------------------

    def accumulation(self, cell: int, state_new: ReservoirState,
                     state_old: ReservoirState, dt: float) -> np.ndarray:
        """Per-component accumulation residual of one cell, lbm/day."""
        if dt <= 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        out = np.empty(self.m)
        w = (cell, cell + 1)
        pn = self._props(state_new, False, w)
        po = self._props(state_old, False, w)
        mn = self._masses(pn, self._phi(pn, w))
        mo = self._masses(po, self._phi(po, w))
        v = self.grid.cell_volume / dt
        for comp in self.components:
            out[self.comp_row(comp)] = v * (mn[comp].v[0] - mo[comp].v[0])
        return out

    def face_flux(self, cell_a: int, cell_b: int, axis: int,
                  state: ReservoirState) -> np.ndarray:
        """Per-component mass flux (lbm/day) from cell_a to cell_b."""
        from .grid import geometric_transmissibility

        t = geometric_transmissibility(cell_a, cell_b, axis, self.grid, self.rock)
        sign = 1.0
        if cell_b < cell_a:
            cell_a, cell_b = cell_b, cell_a
            sign = -1.0
        props = self._props(state, False)
        idxa = np.array([cell_a])
        idxb = np.array([cell_b])
        dz = self.depth[idxa] - self.depth[idxb]
        out = np.zeros(self.m)
        for comp, lam, p, rho in _STREAMS[self.fluid.kind]:
            f = _stream_flux(props, lam, p, rho, idxa, idxb, np.array([t]), dz)
            out[self.comp_row(comp)] += sign * f.v[0]
        return out

    # -- full-system assembly ---------------------------------------------

    def assemble_residual(self, state_new: ReservoirState, state_old: ReservoirState,
                          dt: float, wells: list[Well], pool=None) -> np.ndarray:
        """Residual vector F(x), cells (row-major by cell, component) then wells."""
        r_cells, r_wells = self._assemble(state_new, state_old, dt, wells,
                                          derivs=False, pool=pool)[0:2]
        return _flatten_check(r_cells, r_wells, self.m)

    def assemble_jacobian(self, state_new: ReservoirState, state_old: ReservoirState,
                          dt: float, wells: list[Well], pool=None) -> BlockMatrix:
        """Analytic block Jacobian; the Newton rhs b = -F is attached as .b."""
        r_cells, r_wells, mat = self._assemble(state_new, state_old, dt, wells,
                                               derivs=True, pool=pool)
        f = _flatten_check(r_cells, r_wells, self.m)
        mat.b = -f
        return mat

    def _assemble(self, state_new, state_old, dt, wells, derivs, pool=None):
        if dt <= 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        n, m = self.grid.ncell, self.m
        r = np.zeros((n, m))
        diag = np.zeros((n, m, m)) if derivs else None
        lo = {ax: np.zeros((n, m, m)) for ax in self.axes} if derivs else None
        hi = {ax: np.zeros((n, m, m)) for ax in self.axes} if derivs else None

        ranges = [(0, n)]
        if pool is not None and pool.workers > 1 and pool.partition is not None:
            from .parallel import coarsen_ranges

            # below ~6k cells per range, thread dispatch costs more than it buys
            ranges = coarsen_ranges(pool.partition.ranges, 6000)

        def run_range(rng):
            self._assemble_range(rng, state_new, state_old, dt, derivs,
                                 r, diag, lo, hi)

        if len(ranges) == 1:
            run_range(ranges[0])
        else:
            pool.run(run_range, ranges)

        # wells are single-owner; their few rows touch arbitrary cells, so they
        # are applied sequentially after the parallel cell phase, with
        # properties evaluated only at the perforated cells
        nwell = len(wells)
        r_wells = np.zeros(nwell)
        perf_cells = np.unique(np.array(
            [p.cell for w in wells for p in w.perforations], dtype=int))
        cell_map = {int(c): i for i, c in enumerate(perf_cells)}
        props = self._props_at(state_new, perf_cells, derivs) if nwell else None
        cw_cells, cw_well, cw_blocks = [], [], []
        wc_blocks, ww = [], np.zeros(nwell)
        for well in wells:
            p_h = float(state_new.p_h[well.slot])
            rates = well_component_rates(well, p_h, props, self.fluid,
                                         derivs=derivs, cell_map=cell_map)
            cells = rates.cells
            for comp in self.components:
                ci = self.comp_row(comp)
                r[cells, ci] -= rates.q[comp]
            if derivs:
                blk = np.zeros((len(cells), m))
                for comp in self.components:
                    ci = self.comp_row(comp)
                    diag[cells, ci, :] -= rates.dq_dcell[comp]
                    blk[:, ci] = -rates.dq_dph[comp]
                cw_cells.append(cells)
                cw_well.append(np.full(len(cells), well.slot))
                cw_blocks.append(blk)
            kind = well.constraint.kind
            if kind == "bhp":
                r_wells[well.slot] = p_h - well.constraint.value
                if derivs:
                    ww[well.slot] = 1.0
                    wc_blocks.append(np.zeros((len(cells), m)))
            else:
                total = -well.constraint.value
                wrow = np.zeros((len(cells), m))
                for comp in RATE_COMPONENTS[kind]:
                    scale = surface_rate_scale(comp, self.fluid.pvt)
                    total += float(np.sum(rates.q[comp])) * scale
                    if derivs:
                        wrow += rates.dq_dcell[comp] * scale
                        ww[well.slot] += float(np.sum(rates.dq_dph[comp])) * scale
                r_wells[well.slot] = total
                if derivs:
                    wc_blocks.append(wrow)

        if not derivs:
            return r, r_wells, None
        mat = BlockMatrix(
            shape=self.grid.shape(), m=m, diag=diag, lo=lo, hi=hi,
            cw_cells=_cat(cw_cells, int), cw_well=_cat(cw_well, int),
            cw_blocks=_cat2(cw_blocks, m), wc_blocks=_cat2(wc_blocks, m), ww=ww)
        return r, r_wells, mat

    def _assemble_range(self, rng, state_new, state_old, dt, derivs,
                        r, diag, lo, hi):
        n, m = self.grid.ncell, self.m
        c0, c1 = rng
        smax = max((self.grid.stride(ax) for ax in self.axes), default=1)
        w0, w1 = max(0, c0 - smax), min(n, c1 + smax)
        props = self._props(state_new, derivs, (w0, w1))
        props_old = self._props(state_old, False, (w0, w1))
        phi = self._phi(props, (w0, w1))
        masses = self._masses(props, phi)
        masses_old = self._masses(props_old, self._phi(props_old, (w0, w1)))

        vol_dt = self.grid.cell_volume / dt
        own = slice(c0 - w0, c1 - w0)
        for comp in self.components:
            ci = self.comp_row(comp)
            acc = vol_dt * (masses[comp] - masses_old[comp].v)
            r[c0:c1, ci] += acc.v[own]
            if derivs:
                diag[c0:c1, ci, :] += acc.d[own]

        for ax in self.axes:
            s = self.grid.stride(ax)
            # faces keyed by their lower cell a; rows c0..c1 need faces
            # a in [c0 - s, c1)
            f0, f1 = max(0, c0 - s), min(n - s, c1)
            if f1 <= f0:
                continue
            idxa = np.arange(f0 - w0, f1 - w0)
            idxb = idxa + s
            tface = self.tgeo[ax][f0:f1]
            dz = self.depth[f0:f1] - self.depth[f0 + s:f1 + s]
            # sub-slices of the face window owned by this range
            a_lo, a_hi = max(f0, c0), min(f1, c1)          # rows a
            b_lo, b_hi = max(f0, c0 - s), min(f1, c1 - s)  # rows b = a + s
            asl = slice(a_lo - f0, a_hi - f0)
            bsl = slice(b_lo - f0, b_hi - f0)
            for comp, lam, p, rho in _STREAMS[self.fluid.kind]:
                ci = self.comp_row(comp)
                f = _stream_flux(props, lam, p, rho, idxa, idxb, tface, dz)
                if a_hi > a_lo:
                    r[a_lo:a_hi, ci] += f.v[asl]
                    if derivs:
                        diag[a_lo:a_hi, ci, :] += f.da[asl]
                        hi[ax][a_lo:a_hi, ci, :] += f.db[asl]
                if b_hi > b_lo:
                    r[b_lo + s:b_hi + s, ci] -= f.v[bsl]
                    if derivs:
                        diag[b_lo + s:b_hi + s, ci, :] -= f.db[bsl]
                        lo[ax][b_lo + s:b_hi + s, ci, :] -= f.da[bsl]

    # -- conservation bookkeeping ------------------------------------------

    def mass_in_place(self, state: ReservoirState) -> dict[str, float]:
        """Component masses (lbm) over the whole grid."""
        props = self._props(state, False)
        masses = self._masses(props, self._phi(props))
        v = self.grid.cell_volume
        return {comp: v * float(np.sum(m.v)) for comp, m in masses.items()}

    def well_mass_rates(self, state: ReservoirState,
                        wells: list[Well]) -> dict[str, tuple[float, float]]:
        """Per component: (injected, produced) mass rates in lbm/day, both >= 0."""
        out = {comp: [0.0, 0.0] for comp in self.components}
        if not wells:
            return {comp: (0.0, 0.0) for comp in self.components}
        perf_cells = np.unique(np.array(
            [p.cell for w in wells for p in w.perforations], dtype=int))
        cell_map = {int(c): i for i, c in enumerate(perf_cells)}
        props = self._props_at(state, perf_cells, False)
        for well in wells:
            rates = well_component_rates(well, float(state.p_h[well.slot]),
                                         props, self.fluid, derivs=False,
                                         cell_map=cell_map)
            for comp in self.components:
                q = rates.q[comp]
                out[comp][0] += float(np.sum(q[q > 0]))
                out[comp][1] -= float(np.sum(q[q < 0]))
        return {comp: (v[0], v[1]) for comp, v in out.items()}


def _stream_flux(props, lam_attr, p_attr, rho_attr, idxa, idxb, tface, dz) -> FaceVal:
    """Upwinded mass flux of one stream over the given faces (a -> b positive)."""
    lam = getattr(props, lam_attr)
    p = getattr(props, p_attr)
    rho = getattr(props, rho_attr)
    rho_face = 0.5 * (FaceVal.from_a(rho, idxa) + FaceVal.from_b(rho, idxb))
    dphi = (FaceVal.from_a(p, idxa) - FaceVal.from_b(p, idxb)) \
        - rho_face * (units.GRAVITY * dz)
    up = dphi.v >= 0.0
    lam_up = FaceVal.select(up, FaceVal.from_a(lam, idxa), FaceVal.from_b(lam, idxb))
    return (units.DARCY * tface) * lam_up * dphi


def _flatten_check(r_cells: np.ndarray, r_wells: np.ndarray, m: int) -> np.ndarray:
    f = np.concatenate([r_cells.ravel(), r_wells])
    if not np.all(np.isfinite(f)):
        bad = int(np.nonzero(~np.isfinite(f))[0][0])
        ncell_rows = r_cells.size
        if bad < ncell_rows:
            raise AssemblyError(f"non-finite residual at cell {bad // m}, "
                                f"component row {bad % m}")
        raise AssemblyError(f"non-finite residual at well row {bad - ncell_rows}")
    return f


def _cat(parts, dtype):
    if not parts:
        return np.zeros(0, dtype=dtype)
    return np.concatenate(parts).astype(dtype)


def _cat2(parts, m):
    if not parts:
        return np.zeros((0, m))
    return np.concatenate(parts, axis=0)
