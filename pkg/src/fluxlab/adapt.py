"""Solve-estimate-mark-refine loops and convergence histories."""

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .estimate import (cs_bounds, dwr_estimate, energy_estimate, goal_estimates, indices,
                       local_global_ratio, reconstruct_zstar)
from .flux import compute_residual, gradient_flux, reconstruct_local
from .galerkin import solve_dual, solve_global_mixed_flux, solve_primal
from .mesh import refine, uniform_mesh

log = logging.getLogger(__name__)

GOAL_KINDS = ("rho_varpi", "rho_tau", "I_star", "II_star", "DWR_star")
ENERGY_KINDS = ("energy_local", "energy_mixed")
HISTORY_COLUMNS = ("step", "dofs", "true_err", "eta", "i_eff", "i_osc", "rate")


def mark_fixed_fraction(indicators, fraction):
    """The ceil(fraction * N) cells of largest |indicator|, ties by ascending id."""
    eta = np.abs(np.asarray(indicators, dtype=float))
    if eta.size == 0:
        raise ValueError("no indicators to mark")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = min(eta.size, math.ceil(fraction * eta.size - 1e-12))
    order = np.lexsort((np.arange(eta.size), -eta))
    return np.sort(order[:k])


@dataclass
class StepResult:
    """Everything computed on one mesh."""

    mesh: object
    u: object
    reports: dict
    z: object = None
    rho_local: object = None
    rho_mixed: object = None
    varpi: object = None
    tau: object = None
    zstar: object = None
    local_global: float = None

    @property
    def dofs(self):
        return self.u.dofmap.n_dofs


def solve_step(case, mesh, p, goal=False, local=True, mixed=False, solver="cg"):
    """Primal (and optionally dual) solve followed by flux reconstructions and estimators."""
    A = case.A
    u = solve_primal(mesh, p, A, case.rhs, case.g_D, solver=solver)
    res = StepResult(mesh, u, {})
    r = None
    if local or goal:
        r = compute_residual(u, A, case.rhs)
        res.rho_local, _ = reconstruct_local(u, r, A)
        res.reports["energy_local"] = energy_estimate(res.rho_local, A)
    if mixed:
        sigma = solve_global_mixed_flux(mesh, p + 1, A, case.rhs, case.g_D)
        res.rho_mixed = sigma - gradient_flux(u, A)
        res.reports["energy_mixed"] = energy_estimate(res.rho_mixed, A)
        if res.rho_local is not None:
            res.local_global = local_global_ratio(res.rho_local, res.rho_mixed, A)
    if goal:
        J = case.goal
        z = solve_dual(mesh, p, A, J, solver=solver)
        res.z = z
        res.varpi, res.tau = reconstruct_local(z, compute_residual(z, A, J), A)
        res.zstar = reconstruct_zstar(z)
        res.reports.update(goal_estimates(res.rho_local, res.varpi, res.tau, z, res.zstar, A))
        res.reports["DWR_star"] = dwr_estimate(u, z, res.zstar, case.rhs, A, residual=r)
        naive, better = cs_bounds(res.rho_local, res.varpi, res.tau, A)
        res.reports["CS_naive"], res.reports["CS_better"] = naive, better
    return res


@dataclass
class ConvergenceHistory:
    """Rows of (step, dofs, true_err, eta, i_eff, i_osc, rate) plus extra columns."""

    kind: str
    rows: list = field(default_factory=list)

    def append(self, step, dofs, true_err, report, extra=None):
        if self.rows and dofs <= self.rows[-1]["dofs"]:
            raise ValueError("DOF counts must increase along a history")
        i_eff, i_osc = indices(report, true_err) if true_err else (math.nan, math.nan)
        rate = math.nan
        if self.rows:
            prev = self.rows[-1]
            rate = math.log(true_err / prev["true_err"]) / math.log(dofs / prev["dofs"])
        row = dict(step=step, dofs=dofs, true_err=true_err, eta=report.total, i_eff=i_eff, i_osc=i_osc, rate=rate)
        row.update(extra or {})
        self.rows.append(row)
        return row

    def column(self, name):
        return np.array([r[name] for r in self.rows])


def _estimator_of(step, kind):
    if kind in ("energy", "energy_local"):
        return step.reports["energy_local"]
    if kind == "energy_mixed":
        return step.reports["energy_mixed"]
    return step.reports[kind]


def true_error_for(case, step, kind, reference=None):
    """Energy error squared or goal error |J(u) - J(u_h)| matching the estimator kind."""
    from .cases import true_energy_error, true_goal_error
    if kind.startswith("energy"):
        return true_energy_error(case, step.u, reference)
    return true_goal_error(case, step.u, reference)


def afem_run(case, kind, p, steps, fraction=0.33, n0=16, reference=None, mesh=None, callback=None):
    """Adaptive loop driven by the indicators of ``kind``.

    Every step records the history row of the current mesh; the mesh is then
    refined except after the last step.  Signed goal indicators are marked
    by magnitude.
    """
    mesh = mesh if mesh is not None else uniform_mesh(case.domain, n0)
    goal = kind not in ENERGY_KINDS and kind != "energy"
    hist = ConvergenceHistory(kind)
    for s in range(1, steps + 1):
        step = solve_step(case, mesh, p, goal=goal, local=True, mixed=kind == "energy_mixed")
        rep = _estimator_of(step, kind)
        err = true_error_for(case, step, kind, reference)
        extra = {}
        if not goal:
            for name in ("local", "mixed"):
                other = step.reports.get(f"energy_{name}")
                if other is not None:
                    extra[f"eta_{name}"] = other.total
                    extra[f"ieff_{name}"] = other.total / err
        row = hist.append(s, step.dofs, err, rep, extra)
        log.info("%s step %d: dofs %d err %.3e eta %.3e", kind, s, step.dofs, err, rep.total)
        if callback is not None:
            callback(step, row)
        if s < steps:
            marked = mark_fixed_fraction(rep.per_cell, fraction)
            mesh = refine(mesh, marked)
    return hist


def uniform_levels(case, n0, levels):
    """Meshes n0 * 2^l for l = 1..levels."""
    return [uniform_mesh(case.domain, n0 * 2**l) for l in range(1, levels + 1)]


def _h_rate(prev, cur, hprev, h):
    if prev is None or prev <= 0 or cur <= 0:
        return None
    return math.log(prev / cur) / math.log(hprev / h)


def uniform_energy_study(case, p, levels, n0, flux="both", reference=None, callback=None):
    """Rows of the energy table for meshes n0 * 2^l, l = 1..levels.

    ``rate`` is the h-rate of the squared error against the previous level
    (level 0 is solved only for that purpose).
    """
    local, mixed = flux in ("local", "both"), flux in ("global_mixed", "both")
    prev = None
    if levels:
        u0 = solve_primal(uniform_mesh(case.domain, n0), p, case.A, case.rhs, case.g_D)
        prev = true_error_for(case, StepResult(u0.mesh, u0, {}), "energy", reference)
    rows = []
    for l, mesh in enumerate(uniform_levels(case, n0, levels), start=1):
        step = solve_step(case, mesh, p, local=local, mixed=mixed)
        err = true_error_for(case, step, "energy", reference)
        row = dict(level=l, dofs=step.dofs, true_sq_err=err, rate=_h_rate(prev, err, 2.0, 1.0))
        for name, key in (("mixed", "energy_mixed"), ("local", "energy_local")):
            rep = step.reports.get(key)
            row[f"eta_{name}"] = rep.total if rep else None
            row[f"ieff_{name}"] = rep.total / err if rep else None
        row["local_global"] = step.local_global
        rows.append(row)
        prev = err
        if callback is not None:
            callback(step, row)
    return rows


def uniform_goal_study(case, p, levels, n0, kinds=("rho_varpi", "II_star", "rho_tau"), reference=None,
                       callback=None, start=1):
    """Rows of the goal table: error, h-rate and (eta, I_eff, I_osc) per estimator.

    Levels start..levels are computed (mesh n0 * 2^l); the level before
    ``start`` is solved only for the rate.
    """
    prev = None
    if levels >= start:
        u0 = solve_primal(uniform_mesh(case.domain, n0 * 2 ** (start - 1)), p, case.A, case.rhs, case.g_D)
        prev = true_error_for(case, StepResult(u0.mesh, u0, {}), "goal", reference)
    rows = []
    for l, mesh in enumerate(uniform_levels(case, n0, levels)[start - 1:], start=start):
        step = solve_step(case, mesh, p, goal=True)
        err = true_error_for(case, step, "goal", reference)
        row = dict(level=l, dofs=step.dofs, goal_err=err, rate=_h_rate(prev, err, 2.0, 1.0))
        for k in kinds:
            rep = step.reports[k]
            i_eff, i_osc = indices(rep, err)
            row.update({f"eta_{k}": rep.total, f"ieff_{k}": i_eff, f"iosc_{k}": i_osc})
        rows.append(row)
        prev = err
        if callback is not None:
            callback(step, row)
    return rows
