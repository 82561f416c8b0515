"""Inexact Newton time stepping with adjustable forcing terms.

Each time step repeats assemble-solve-update cycles until the 2-norm of the
residual falls below ``tol`` relative to the step's initial residual, cutting
the step size on failure.  The linear tolerance theta_l follows one of three
adjustment rules (or a fixed value), safeguarded into [theta_min, theta_max].
Per-component residual sums are additionally driven below a mass-balance
target so that reported conservation errors stay at round-off scale.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .linear import SolverConfig, decouple, make_preconditioner, bicgstab, \
    dump_matrix_market
from .parallel import det_norm, PooledMatvec

log = logging.getLogger(__name__)

FORCING_RULES = ("eq13_a", "eq13_b", "eq13_c", "fixed")


class SimulationAbort(RuntimeError):
    """Simulation cannot continue; carries the last state and report so far."""

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


@dataclass
class NewtonConfig:
    tol: float = 1e-2
    atol: float = 1e-8
    max_newton: int = 20
    forcing_rule: str = "eq13_c"
    gamma: float = 1.0
    beta: float = 2.0
    theta_fixed: float = 1e-5
    theta0: float = 0.1
    theta_min: float = 1e-4
    theta_max: float = 0.9
    max_ds: float = 0.2
    max_dp: float = 500.0
    mb_tol: float | None = None   # None: auto per fluid kind; 0 disables
    switch_eps: float = 1e-8

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if not (0 < self.theta_min <= self.theta_max < 1):
            raise ValueError("need 0 < theta_min <= theta_max < 1")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must be in (0, 1]")
        if not (1 < self.beta <= 2):
            raise ValueError("beta must be in (1, 2]")
        if self.forcing_rule not in FORCING_RULES:
            raise ValueError(f"unknown forcing rule {self.forcing_rule!r}")

    def resolved_mb_tol(self, fluid_kind: str) -> float:
        if self.mb_tol is not None:
            return self.mb_tol
        return 1e-9 if fluid_kind == "two_phase" else 1e-7


@dataclass
class StepController:
    dt_init: float = 1.0
    dt_max: float = 100.0
    dt_min: float = 1e-6
    growth: float = 2.0
    cut: float = 0.5
    max_cuts: int = 10

    def __post_init__(self):
        if not (self.dt_min <= self.dt_init <= self.dt_max):
            raise ValueError("need dt_min <= dt_init <= dt_max")
        if self.growth <= 1:
            raise ValueError("growth must be > 1")
        if not (0 < self.cut < 1):
            raise ValueError("cut must be in (0, 1)")


@dataclass
class ForcingHistory:
    b_norm: float
    b_prev_norm: float
    r_prev_norm: float
    b_minus_r_prev_norm: float


def forcing_term(rule: str, history: ForcingHistory, config: NewtonConfig) -> float:
    """Linear tolerance theta_l for iterations l >= 1, safeguarded."""
    if rule == "fixed":
        theta = config.theta_fixed
    elif rule == "eq13_a":
        theta = history.b_minus_r_prev_norm / history.b_prev_norm \
            if history.b_prev_norm > 0 else config.theta_max
    elif rule == "eq13_b":
        theta = abs(history.b_norm - history.r_prev_norm) / history.b_prev_norm \
            if history.b_prev_norm > 0 else config.theta_max
    elif rule == "eq13_c":
        theta = config.gamma * (history.b_norm / history.b_prev_norm) ** config.beta \
            if history.b_prev_norm > 0 else config.theta_max
    else:
        raise ValueError(f"unknown forcing rule {rule!r}")
    if not np.isfinite(theta):
        theta = config.theta_max
    return float(min(max(theta, config.theta_min), config.theta_max))


@dataclass
class NewtonIterLog:
    """Per-iteration record of the inner linear-solve contract."""

    theta: float
    b_norm: float            # rhs norm of the system handed to the solver
    lhs_norm: float          # ||b - A dx|| of that system after the solve
    iterations: int
    status: str
    forcing: ForcingHistory | None = None   # rule inputs, iterations l >= 1
    theta_rule: float | None = None         # rule output before the finish cap


@dataclass
class StepStats:
    newtons: int = 0
    linear_iters: int = 0
    cuts: int = 0
    assembly_time: float = 0.0
    solve_time: float = 0.0
    newton_log: list[NewtonIterLog] = field(default_factory=list)
    residual_sums: dict = field(default_factory=dict)

    def absorb(self, other: "StepStats"):
        self.newtons += other.newtons
        self.linear_iters += other.linear_iters
        self.assembly_time += other.assembly_time
        self.solve_time += other.solve_time
        self.newton_log.extend(other.newton_log)


class _StepFailure(Exception):
    def __init__(self, reason, stats):
        super().__init__(reason)
        self.reason = reason
        self.stats = stats


def apply_update(state, dx: np.ndarray, model, config: NewtonConfig):
    """Damped Newton update with saturation clamping and variable switching."""
    n, m = model.grid.ncell, model.m
    new = state.copy()
    dxc = dx[: n * m].reshape(n, m)
    new.p_o = state.p_o + np.clip(dxc[:, 0], -config.max_dp, config.max_dp)
    new.s_w = np.clip(state.s_w + np.clip(dxc[:, 1], -config.max_ds, config.max_ds),
                      0.0, 1.0)
    if m == 3:
        sat = state.sat
        x3 = state.x3.copy()
        dsg = np.clip(dxc[:, 2], -config.max_ds, config.max_ds)
        dpb = np.clip(dxc[:, 2], -config.max_dp, config.max_dp)
        sg_new = np.where(sat, x3 + dsg, 0.0)
        pb_new = np.where(sat, new.p_o, x3 + dpb)
        new_sat = sat.copy()
        # saturated cell loses its free gas: switch unknown to p_b = p_o
        to_undersat = sat & (sg_new < 0.0)
        new_sat[to_undersat] = False
        pb_new[to_undersat] = new.p_o[to_undersat]
        sg_new[to_undersat] = 0.0
        # undersaturated cell reaches bubble point: free gas appears
        to_sat = (~sat) & (pb_new > new.p_o + config.switch_eps)
        new_sat[to_sat] = True
        sg_new[to_sat] = 0.0
        pb_new = np.minimum(pb_new, new.p_o)
        sg_new = np.clip(sg_new, 0.0, np.maximum(1.0 - new.s_w, 0.0))
        new.sat = new_sat
        new.x3 = np.where(new_sat, sg_new, pb_new)
    new.p_h = state.p_h + dx[n * m:]
    return new


def newton_step(model, state, state_old, dt: float, wells, ncfg: NewtonConfig,
                scfg: SolverConfig, theta: float, pool=None, dump_prefix=None,
                workspace: dict | None = None):
    """One assemble-solve-update cycle at the given linear tolerance.

    Returns (new_state, dx, iter_log, jac, timing) or raises _StepFailure
    when the linear solver does not meet its contract.
    """
    t0 = time.perf_counter()
    jac = model.assemble_jacobian(state, state_old, dt, wells, pool=pool)
    t1 = time.perf_counter()
    b = jac.b
    if dump_prefix is not None:
        dump_matrix_market(jac, b, dump_prefix)
    a2, b2 = decouple(jac, b, scfg.decoupling)
    matvec = PooledMatvec(a2.to_csr(), pool, model.m)
    precond = make_preconditioner(a2, scfg, matvec=matvec, workspace=workspace)
    dx, iters, status = bicgstab(matvec, precond, b2, theta,
                                 scfg.max_iterations, scfg.breakdown_tol)
    lhs = det_norm(b2 - matvec(dx))
    t2 = time.perf_counter()
    entry = NewtonIterLog(theta=theta, b_norm=det_norm(b2), lhs_norm=lhs,
                          iterations=iters, status=status)
    if status != "converged":
        raise _StepFailure(f"linear solver {status} after {iters} iterations",
                           StepStats(newtons=1, linear_iters=iters,
                                     assembly_time=t1 - t0, solve_time=t2 - t1,
                                     newton_log=[entry]))
    new_state = apply_update(state, dx, model, ncfg)
    return new_state, dx, entry, jac, (t1 - t0, t2 - t1)


def _component_sums(f: np.ndarray, model) -> dict[str, float]:
    n, m = model.grid.ncell, model.m
    sums = f[: n * m].reshape(n, m).sum(axis=0)
    return {comp: float(sums[model.comp_row(comp)]) for comp in model.components}


def _mb_converged(sums, dt, mass_ref, mb_tol) -> bool:
    if mb_tol <= 0:
        return True
    for comp, s in sums.items():
        ref = max(mass_ref.get(comp, 0.0), 1.0)
        if abs(s) * dt > mb_tol * ref:
            return False
    return True


def _attempt(model, state_old, dt, wells, ncfg, scfg, pool, dump_prefix,
             workspace=None):
    """Run Newton to convergence at fixed dt; raises _StepFailure otherwise."""
    stats = StepStats()
    state = state_old.copy()
    state.t = state_old.t + dt
    t0 = time.perf_counter()
    f = model.assemble_residual(state, state_old, dt, wells, pool=pool)
    stats.assembly_time += time.perf_counter() - t0
    b_norm0 = det_norm(f)
    if b_norm0 <= ncfg.atol:
        stats.residual_sums = _component_sums(f, model)
        return state, stats
    target = max(ncfg.tol * b_norm0, ncfg.atol)
    mass_ref = model.mass_in_place(state_old)
    mb_tol = ncfg.resolved_mb_tol(model.fluid.kind)

    b_prev_norm = b_norm0
    r_prev_norm = 0.0
    b_minus_r_prev = 0.0
    b_norm = b_norm0
    residual_ok = False

    for it in range(ncfg.max_newton):
        hist = None
        theta_rule = None
        if it == 0:
            theta = ncfg.theta0
        elif residual_ok:
            # residual target met, polishing the component balances
            theta = ncfg.theta_min
        else:
            hist = ForcingHistory(b_norm, b_prev_norm, r_prev_norm, b_minus_r_prev)
            theta = theta_rule = forcing_term(ncfg.forcing_rule, hist, ncfg)
        # termination-aware safeguard: a solve looser than the remaining
        # distance to the convergence target wastes a Newton iteration
        theta = min(theta, 0.5 * target / b_norm)
        theta = min(max(theta, ncfg.theta_min), ncfg.theta_max)
        prefix = None if dump_prefix is None else f"{dump_prefix}_n{stats.newtons}"
        try:
            state_new, dx, entry, jac, (ta, ts) = newton_step(
                model, state, state_old, dt, wells, ncfg, scfg, theta,
                pool=pool, dump_prefix=prefix, workspace=workspace)
        except _StepFailure as fail:
            stats.absorb(fail.stats)
            raise _StepFailure(fail.reason, stats) from None
        entry.forcing = hist
        entry.theta_rule = theta_rule
        stats.newtons += 1
        stats.linear_iters += entry.iterations
        stats.assembly_time += ta
        stats.solve_time += ts
        stats.newton_log.append(entry)

        t0 = time.perf_counter()
        f_new = model.assemble_residual(state_new, state_old, dt, wells, pool=pool)
        stats.assembly_time += time.perf_counter() - t0
        b_new_norm = det_norm(f_new)

        if ncfg.forcing_rule in ("eq13_a", "eq13_b"):
            t0 = time.perf_counter()
            r_prev = -f - jac.matvec(dx)
            r_prev_norm = det_norm(r_prev)
            b_minus_r_prev = det_norm(-f_new - r_prev)
            stats.solve_time += time.perf_counter() - t0

        state, f = state_new, f_new
        b_prev_norm, b_norm = b_norm, b_new_norm

        sums = _component_sums(f, model)
        residual_ok = b_norm <= target
        if residual_ok and _mb_converged(sums, dt, mass_ref, mb_tol):
            stats.residual_sums = sums
            return state, stats

    raise _StepFailure(
        f"no convergence in {ncfg.max_newton} Newton iterations "
        f"(|b|/|b0| = {b_norm / b_norm0:.3e})", stats)


def advance_timestep(model, state_old, dt: float, wells, ncfg: NewtonConfig,
                     scfg: SolverConfig, controller: StepController,
                     pool=None, dump_prefix=None, workspace: dict | None = None):
    """Advance one accepted step, cutting dt on failures.

    Returns (state_new, accepted_dt, StepStats); Newton iterations and linear
    iterations spent in failed attempts are included in the stats, and the
    number of cuts is recorded.
    """
    stats = StepStats()
    dt_try = dt
    while True:
        try:
            state_new, astats = _attempt(model, state_old, dt_try, wells, ncfg,
                                         scfg, pool, dump_prefix, workspace)
            stats.absorb(astats)
            stats.residual_sums = astats.residual_sums
            return state_new, dt_try, stats
        except _StepFailure as fail:
            stats.absorb(fail.stats)
            stats.cuts += 1
            dt_next = dt_try * controller.cut
            log.warning("step at t=%g: %s; cutting dt %g -> %g",
                        state_old.t, fail.reason, dt_try, dt_next)
            if stats.cuts > controller.max_cuts or dt_next < controller.dt_min:
                cause = ("cut budget exhausted"
                         if stats.cuts > controller.max_cuts
                         else f"dt fell below dt_min={controller.dt_min:g}")
                raise SimulationAbort(
                    f"time step abandoned after {stats.cuts} cuts ({cause}): "
                    f"{fail.reason}") from None
            dt_try = dt_next


@dataclass
class StepRecord:
    step: int
    t: float
    dt: float
    newtons: int
    linear_iters: int
    cuts: int
    wall_time: float
    assembly_time: float
    solve_time: float
    mass_in_place: dict[str, float] = field(default_factory=dict)
    well_injected: dict[str, float] = field(default_factory=dict)
    well_produced: dict[str, float] = field(default_factory=dict)
    residual_sums: dict[str, float] = field(default_factory=dict)


@dataclass
class RunReport:
    """Per-step convergence accounting plus run totals."""

    workers: int = 1
    steps: list[StepRecord] = field(default_factory=list)
    newton_log: list[NewtonIterLog] = field(default_factory=list)
    initial_mass: dict[str, float] = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def n_cuts(self) -> int:
        return sum(s.cuts for s in self.steps)

    @property
    def n_newton(self) -> int:
        return sum(s.newtons for s in self.steps)

    @property
    def n_solver(self) -> int:
        return sum(s.linear_iters for s in self.steps)

    @property
    def avg_solver(self) -> float:
        return self.n_solver / self.n_newton if self.n_newton else 0.0

    @property
    def total_time(self) -> float:
        return sum(s.wall_time for s in self.steps)

    @property
    def avg_time(self) -> float:
        return self.total_time / self.n_newton if self.n_newton else 0.0

    @property
    def assembly_time(self) -> float:
        return sum(s.assembly_time for s in self.steps)

    @property
    def solve_time(self) -> float:
        return sum(s.solve_time for s in self.steps)

    def steps_cell(self) -> str:
        cuts = self.n_cuts
        return f"{self.n_steps}({cuts})" if cuts else f"{self.n_steps}"

    def format_table(self) -> str:
        """Summary table in the layout of the result tables."""
        headers = ["# Workers", "# Steps", "# Newton", "# Solver",
                   "# Avg. solver", "Time (s)", "Avg. time (s)"]
        row = [str(self.workers), self.steps_cell(), str(self.n_newton),
               str(self.n_solver), f"{self.avg_solver:.1f}",
               f"{self.total_time:.1f}", f"{self.avg_time:.1f}"]
        widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
        line1 = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
        line2 = "  ".join(v.ljust(w) for v, w in zip(row, widths))
        return line1 + "\n" + line2

    def to_csv(self, path):
        import csv

        comps = sorted({c for s in self.steps for c in s.mass_in_place})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["step", "t_days", "dt_days", "newtons", "linear_iters",
                      "cuts", "wall_s", "assembly_s", "solve_s"]
            for c in comps:
                header += [f"mass_{c}_lbm", f"injected_{c}_lbm", f"produced_{c}_lbm"]
            w.writerow(header)
            for s in self.steps:
                row = [s.step, f"{s.t:.6g}", f"{s.dt:.6g}", s.newtons,
                       s.linear_iters, s.cuts, f"{s.wall_time:.4f}",
                       f"{s.assembly_time:.4f}", f"{s.solve_time:.4f}"]
                for c in comps:
                    row += [f"{s.mass_in_place.get(c, 0.0):.10e}",
                            f"{s.well_injected.get(c, 0.0):.10e}",
                            f"{s.well_produced.get(c, 0.0):.10e}"]
                w.writerow(row)
