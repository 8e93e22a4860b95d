"""Receding-horizon closed loop.

Cold start solves the stationarity system once at t0 by damped Newton;
every subsequent system step warm-starts from the previous horizon
solution (optionally shifted along the horizon by linear interpolation),
applies k matrix-free Newton-Krylov refinements, extracts the first
control entry, and propagates the plant by explicit Euler.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import precond as pc
from .krylov import FdOperator, OperatorDivergence, gmres
from .models import Model1Params, Model2Params, build_model1, build_model2
from .ocp import (HorizonSolution, ModelDefinition, RecursionDivergence,
                  evaluate_F)

Array = np.ndarray


class ColdStartFailure(RuntimeError):
    def __init__(self, residual_norm: float, iterations: int):
        super().__init__(
            f"cold start did not converge: residual {residual_norm:.3e} "
            f"after {iterations} iterations")
        self.residual_norm = residual_norm
        self.iterations = iterations


class HorizonExhausted(RuntimeError):
    """Remaining horizon p no longer covers one system step."""


class StepFailure(RuntimeError):
    """Newton refinement diverged at a system step."""

    def __init__(self, step: int, reason: str, stats: "StepStats"):
        super().__init__(f"step {step} failed: {reason}")
        self.step = step
        self.reason = reason
        self.stats = stats


class SimulationFailure(RuntimeError):
    """Closed loop aborted; carries the partial trajectory."""

    def __init__(self, trajectory: "Trajectory", cause: StepFailure):
        super().__init__(str(cause))
        self.trajectory = trajectory
        self.cause = cause


@dataclass
class MpcConfig:
    """Scenario and solver knobs; defaults mirror the nominal model-1 run."""

    model: str = "model1"
    horizon: int = 20
    steps: int = 1000
    dt: float = 2.0 / 1000
    refinements: int = 1
    shifting: bool = False
    preconditioning: bool = True
    fd_step: float = 1e-8
    gmres_tol: float = 1e-6
    gmres_max_iter: Optional[int] = None
    p0: float = 2.5
    cold_start_max_iter: int = 200
    divergence_threshold: float = 1e6
    terminal_radius: float = 0.05
    x0: tuple = (-1.0, 0.0)
    xf: tuple = (0.0, 0.0)
    wd: float = 0.005
    alpha1: float = 1e3
    alpha2: float = 0.1
    compare_unpreconditioned: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.refinements < 1:
            raise ValueError("refinements must be at least 1")

    def build_model(self) -> ModelDefinition:
        key = str(self.model).lower()
        if key in ("model1", "1"):
            return build_model1(Model1Params(
                w_d=self.wd, x_f=self.xf[0], y_f=self.xf[1]))
        if key in ("model2", "2"):
            return build_model2(Model2Params(
                w_d=self.wd, alpha1=self.alpha1, alpha2=self.alpha2,
                x_f=self.xf[0], y_f=self.xf[1]))
        raise ValueError(f"unknown model identifier: {self.model!r}")


@dataclass
class StepStats:
    """Per-step diagnostics around the Newton refinements."""

    step: int
    res_before: float
    res_after: float
    gmres_iters: int
    p: float
    wall_time: float
    u_raw: float = float("nan")
    ud_raw: float = float("nan")
    gmres_iters_noprec: Optional[int] = None
    accepted: bool = True


@dataclass
class Trajectory:
    """Closed-loop record: states, applied controls, per-step stats."""

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    stats: list = field(default_factory=list)
    success: bool = False
    stop_reason: str = ""

    def final_state_norm(self) -> float:
        return float(np.linalg.norm(self.states[-1]))


def plant_rhs(x: Array, u: float) -> Array:
    """Unscaled double-integrator dynamics: x' = y, y' = u."""
    return np.array([x[1], u])


def initial_guess(model: ModelDefinition, config: MpcConfig) -> HorizonSolution:
    """u = 0, u_d = 1, mu = w_d*p/2 (zeroing the slack row), nu = 0."""
    U = HorizonSolution.zeros(model, config.horizon)
    U.ud[:] = 1.0
    U.mu[:] = config.wd * config.p0 / 2.0
    U.p = config.p0
    return U


def _precond_apply(model, U, x_t, t, op):
    M = pc.assemble(model, U, x_t, t, op)
    factors = pc.factorize(M)
    return lambda r: pc.apply_inverse(factors, r)


def _reduced_precond(model, U, op):
    """Preconditioner for the frozen-p system: the sparse factorization with
    the trailing horizon-length row and column dropped (the nu border stays).
    Returns None when a stage block is too close to singular."""
    dtau = 1.0 / U.N
    blocks = np.asarray(model.stage_blocks(U.u, U.ud, U.mu, U.p, dtau))
    dets = np.linalg.det(blocks)
    if np.any(np.abs(dets) < pc.DET_GUARD) or not np.all(np.isfinite(dets)):
        return None
    s = model.stage_stride
    if s == 3:
        inv, _ = pc._invert_blocks_3x3(blocks)
    else:
        inv = np.linalg.inv(blocks)
    npsi = model.n_psi
    ns = U.N * s

    if npsi == 0:
        def apply_diag(r):
            out = r.copy()
            out[:ns] = np.einsum("nij,nj->ni", inv,
                                 r[:ns].reshape(U.N, s)).ravel()
            return out
        return apply_diag

    cols = np.empty((op.dim, npsi))
    e = np.zeros(op.dim)
    for j in range(npsi):
        e[ns + j] = 1.0
        cols[:, j] = op(e)
        e[ns + j] = 0.0
    corner = cols[ns:ns + npsi, :]
    corner = 0.5 * (corner + corner.T)
    border = cols[:ns, :].reshape(U.N, s, npsi)
    strip = np.einsum("nij,njl->nil", inv, border)
    schur = corner - np.einsum("nsl,nsk->lk", border, strip)
    det_s = np.linalg.det(schur)
    if not np.isfinite(det_s) or abs(det_s) < pc.DET_GUARD:
        return None
    schur_inv = np.linalg.inv(schur)

    def apply_bordered(r):
        r1 = r[:ns].reshape(U.N, s)
        y1 = np.einsum("nij,nj->ni", inv, r1)
        z2 = r[ns:ns + npsi] - np.einsum("nsl,ns->l", strip, r1)
        x2 = schur_inv @ z2
        out = r.copy()
        out[:ns] = (y1 - strip @ x2).ravel()
        out[ns:ns + npsi] = x2
        return out
    return apply_bordered


def _damped_newton(model, U, x0, t0, config, tol, max_outer, freeze_p):
    """Damped Newton on F (optionally with the horizon length frozen).

    Tries the plain preconditioned Newton direction first; when no step
    fraction decreases ||F||, falls back to Levenberg-regularized
    Gauss-Newton normal equations (A^2 + lam I) dU = -A F, escalating lam.
    Returns (U, residual_norm, gmres_iteration_count).
    """
    mask = np.ones(model.stage_stride * U.N + model.border_width)
    if freeze_p:
        mask[-1] = 0.0
    F = evaluate_F(model, U, x0, t0)
    Fm = F * mask
    res = float(np.linalg.norm(Fm))
    total_iters = 0
    lam = 0.0
    for _ in range(max_outer):
        if res <= tol:
            break
        op = FdOperator(model, U, x0, t0, h=config.fd_step)
        if freeze_p:
            op_m = lambda V: op(V * mask) * mask
        else:
            op_m = op
        apply_p = _reduced_precond(model, U, op) if freeze_p else None
        if not freeze_p:
            try:
                apply_p = _precond_apply(model, U, x0, t0, op)
            except (pc.NearSingularBlock, pc.SingularSchur):
                apply_p = None
        accepted = False
        for _attempt in range(14):
            if lam == 0.0:
                dU, report = gmres(op_m, -Fm, tol=config.gmres_tol,
                                   max_iter=config.gmres_max_iter,
                                   precond=apply_p)
            else:
                lin = (lambda V, l=lam: op_m(op_m(V)) + l * V)
                dU, report = gmres(lin, -op_m(Fm),
                                   tol=config.gmres_tol * max(res, 1.0),
                                   max_iter=config.gmres_max_iter)
            total_iters += report.iterations
            alpha = 1.0
            while alpha >= 1e-6:
                trial = U.updated(alpha * (dU * mask))
                try:
                    F_trial = evaluate_F(model, trial, x0, t0)
                    trial_res = float(np.linalg.norm(F_trial * mask))
                except RecursionDivergence:
                    trial_res = float("inf")
                if np.isfinite(trial_res) and trial_res < res:
                    U, F, res = trial, F_trial, trial_res
                    Fm = F * mask
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                lam = 0.0 if lam < 1e-10 else lam * 0.1
                break
            lam = max(lam * 10.0, 1e-3 * res) if lam > 0.0 else 1e-3 * res
        if not accepted:
            break
    return U, res, total_iters, float(F[-1])


def cold_start(config: MpcConfig, model: ModelDefinition, x0: Array,
               t0: float = 0.0) -> tuple[HorizonSolution, StepStats]:
    """Initial horizon solve from the standard guess to ||F|| <= 10*gmres_tol.

    The stationarity Jacobian is exactly singular at the symmetric all-zero
    control start, and for penalty-type models a pure Newton path is drawn to
    a spurious collapsed-horizon root.  The solve therefore proceeds in
    phases: (1) a damped Newton solve with the horizon length p frozen at its
    guess; (2) for models without hard terminal constraints, a safeguarded
    secant iteration on the scalar map p -> (horizon-length residual row at
    the frozen-p solution), which brackets the optimal horizon length; (3) a
    full-system damped Newton polish.
    """
    started = time.perf_counter()
    U = initial_guess(model, config)
    target = 10.0 * config.gmres_tol
    total_iters = 0
    res0 = float(np.linalg.norm(evaluate_F(model, U, x0, t0)))

    # Phase 1: solve the stage and constraint rows with p frozen.
    U, res_r, iters, g_a = _damped_newton(model, U, x0, t0, config,
                                          tol=target, max_outer=60,
                                          freeze_p=True)
    total_iters += iters

    # Phase 2: scalar root find on the frozen-p horizon-length residual.
    # Skipped for hard-constrained models, where the frozen-p problem is
    # infeasible below the minimum time and degenerate above it.  The map
    # can be nearly flat away from the root, so a guarded march brackets
    # the sign change before regula falsi takes over.  Every solve warm
    # starts from the last converged frozen-p solution.
    if model.n_psi == 0 and res_r <= 1e2 * target and abs(g_a) > target:
        U_good, g_good = U.copy(), g_a
        bracket = None          # ((p_neg, U_neg), (p_pos, U_pos)) by sign of g
        step = 0.05 * U.p
        for _ in range(40):
            if bracket is not None:
                (p_n, g_n, U_n), (p_p, g_p, U_p) = bracket
                p_lo, p_hi = min(p_n, p_p), max(p_n, p_p)
                if p_hi - p_lo < 1e-8 or min(abs(g_n), abs(g_p)) <= 1e-2:
                    break
                p_new = p_p - g_p * (p_p - p_n) / (g_p - g_n)
                if not (p_lo < p_new < p_hi):
                    p_new = 0.5 * (p_lo + p_hi)
                U_warm = (U_n if abs(p_new - p_n) < abs(p_new - p_p)
                          else U_p).copy()
            else:
                if abs(g_good) <= 1e-2:
                    break
                p_new = U_good.p - np.sign(g_good) * step
                step = min(2.0 * step, 0.15 * U_good.p)
                U_warm = U_good.copy()
            U_warm.p = p_new
            trial, res_t, iters, g_new = _damped_newton(
                model, U_warm, x0, t0, config, tol=target, max_outer=40,
                freeze_p=True)
            total_iters += iters
            if res_t > 1e2 * target:
                # Reduced solve degraded; back off toward the good point.
                step *= 0.5
                if bracket is not None or step < 1e-8:
                    break
                continue
            if bracket is not None:
                if g_new < 0.0:
                    bracket = ((p_new, g_new, trial), bracket[1])
                else:
                    bracket = (bracket[0], (p_new, g_new, trial))
            elif g_new * g_good < 0.0:
                lo_pt = (p_new, g_new, trial)
                hi_pt = (U_good.p, g_good, U_good)
                if lo_pt[0] > hi_pt[0]:
                    lo_pt, hi_pt = hi_pt, lo_pt
                bracket = ((lo_pt, hi_pt) if lo_pt[1] < 0.0
                           else (hi_pt, lo_pt))
            U_good, g_good = trial, g_new
        if bracket is not None:
            candidates = [bracket[0], bracket[1], (U_good.p, g_good, U_good)]
            U = min(candidates, key=lambda c: abs(c[1]))[2]
        else:
            U = U_good

    # Phase 3: full-system polish.
    U, res, iters, _ = _damped_newton(model, U, x0, t0, config, tol=target,
                                      max_outer=config.cold_start_max_iter,
                                      freeze_p=False)
    total_iters += iters
    if not (np.isfinite(res) and res <= target):
        raise ColdStartFailure(res, total_iters)
    stats = StepStats(step=0, res_before=res0, res_after=res,
                      gmres_iters=total_iters, p=U.p,
                      wall_time=time.perf_counter() - started,
                      u_raw=float(U.u[0, 0]), ud_raw=float(U.ud[0, 0]))
    return U, stats


def shift_horizon(U_prev: HorizonSolution, dt: float) -> HorizonSolution:
    """Warm-start shift: p loses one system step, stage sequences are
    linearly re-interpolated onto the shortened horizon (last node clamps)."""
    p_prev = U_prev.p
    if dt == 0.0:
        return U_prev.copy()
    if p_prev <= dt:
        raise HorizonExhausted(
            f"remaining horizon {p_prev:.3e} does not cover step {dt:.3e}")
    p_new = p_prev - dt
    N = U_prev.N
    nodes = np.arange(N) / N
    sigma = np.clip((dt + nodes * p_new) / p_prev, 0.0, (N - 1) / N)
    out = U_prev.copy()
    old = U_prev.stage_array()
    new = out.stage_array()
    for col in range(old.shape[1]):
        new[:, col] = np.interp(sigma, nodes, old[:, col])
    out.p = p_new
    return out


def newton_refine(model: ModelDefinition, U: HorizonSolution, x_j: Array,
                  t_j: float, step: int, config: MpcConfig
                  ) -> tuple[HorizonSolution, StepStats]:
    """k Newton-Krylov refinements of the warm start at the current state."""
    started = time.perf_counter()
    k = config.refinements
    total_iters = 0
    total_noprec: Optional[int] = 0 if config.compare_unpreconditioned else None

    def fail(reason: str, res_before: float, res_after: float):
        stats = StepStats(step=step, res_before=res_before, res_after=res_after,
                          gmres_iters=total_iters, p=U.p,
                          wall_time=time.perf_counter() - started)
        raise StepFailure(step, reason, stats)

    try:
        F = evaluate_F(model, U, x_j, t_j)
    except RecursionDivergence as exc:
        fail(str(exc), float("nan"), float("nan"))
    res_before = float(np.linalg.norm(F))
    if not np.isfinite(res_before) or res_before > config.divergence_threshold:
        fail(f"residual norm {res_before:.3e} diverged", res_before, res_before)

    res = res_before
    for _ in range(k):
        try:
            op = FdOperator(model, U, x_j, t_j, h=config.fd_step)
            apply_p = None
            if config.preconditioning:
                apply_p = _precond_apply(model, U, x_j, t_j, op)
            dU, report = gmres(op, -F, tol=config.gmres_tol,
                               max_iter=config.gmres_max_iter, precond=apply_p)
            total_iters += report.iterations
            if total_noprec is not None:
                _, rep0 = gmres(op, -F, tol=config.gmres_tol,
                                max_iter=config.gmres_max_iter, precond=None)
                total_noprec += rep0.iterations
            U = U.updated(dU)
            F = evaluate_F(model, U, x_j, t_j)
        except (RecursionDivergence, OperatorDivergence,
                pc.NearSingularBlock, pc.SingularSchur) as exc:
            fail(str(exc), res_before, res)
        res = float(np.linalg.norm(F))
        if not np.isfinite(res) or res > config.divergence_threshold:
            fail(f"residual norm {res:.3e} diverged", res_before, res)

    # Operational divergence: the refinements blew the residual up by more
    # than an order of magnitude, or produced an unusable horizon length.
    floor = 1e2 * config.gmres_tol
    if res > 10.0 * max(res_before, floor):
        fail(f"residual norm grew from {res_before:.3e} to {res:.3e}",
             res_before, res)
    if U.p <= 0.0:
        fail(f"horizon length {U.p:.3e} is not positive", res_before, res)

    stats = StepStats(step=step, res_before=res_before, res_after=res,
                      gmres_iters=total_iters, p=U.p,
                      wall_time=time.perf_counter() - started,
                      u_raw=float(U.u[0, 0]), ud_raw=float(U.ud[0, 0]),
                      gmres_iters_noprec=total_noprec)
    return U, stats


def simulate(config: MpcConfig) -> Trajectory:
    """Run the closed loop; raises SimulationFailure on a diverged step."""
    model = config.build_model()
    dt = config.dt
    x = np.asarray(config.x0, dtype=float)
    traj = Trajectory()

    U, stats0 = cold_start(config, model, x, 0.0)
    u_applied = float(np.clip(U.u[0, 0], -1.0, 1.0))
    traj.times.append(0.0)
    traj.states.append(x.copy())
    traj.stats.append(stats0)
    if config.steps == 0:
        traj.success = True
        traj.stop_reason = "zero steps requested"
        return traj
    traj.controls.append(u_applied)

    for j in range(1, config.steps + 1):
        x = x + dt * plant_rhs(x, u_applied)
        t_j = j * dt
        traj.times.append(t_j)
        traj.states.append(x.copy())
        if U.p <= 2.0 * dt:
            # Scaled problem degenerates as p -> 0: stop near exhaustion.
            traj.success = traj.final_state_norm() <= config.terminal_radius
            traj.stop_reason = ("terminal ball reached" if traj.success
                                else "horizon exhausted outside terminal ball")
            return traj
        warm = shift_horizon(U, dt) if config.shifting else U
        if warm.p <= 2.0 * dt:
            traj.success = traj.final_state_norm() <= config.terminal_radius
            traj.stop_reason = ("terminal ball reached" if traj.success
                                else "horizon exhausted outside terminal ball")
            return traj
        try:
            refined, stats = newton_refine(model, warm, x, t_j, j, config)
        except StepFailure as exc:
            traj.success = False
            traj.stop_reason = exc.reason
            exc.stats.accepted = False
            traj.stats.append(exc.stats)
            raise SimulationFailure(traj, exc) from exc
        U = refined
        if stats.res_after > stats.res_before:
            # Transient non-monotone step, typically where a kink of the
            # bang-bang solution crosses a horizon node.  The refined
            # iterate is still the best plan available (holding the stale
            # warm start compounds the mismatch), so it is carried forward
            # but the step is flagged as not accepted.
            stats.accepted = False
        traj.stats.append(stats)
        u_applied = float(np.clip(U.u[0, 0], -1.0, 1.0))
        if j < config.steps:
            traj.controls.append(u_applied)

    traj.success = True
    traj.stop_reason = "all steps completed"
    return traj


def aggregates(traj: Trajectory, config: MpcConfig) -> dict:
    """Summary numbers recomputable from the per-step stats."""
    refine_stats = [s for s in traj.stats if s.step > 0]
    avg_iters = (float(np.mean([s.gmres_iters for s in refine_stats]))
                 if refine_stats else 0.0)
    return {
        "steps_completed": len(traj.states) - 1,
        "avg_gmres_iters": avg_iters,
        "total_wall_time": float(sum(s.wall_time for s in traj.stats)),
        "success": traj.success,
        "stop_reason": traj.stop_reason,
        "final_state_norm": traj.final_state_norm(),
        "final_time": traj.times[-1] if traj.times else 0.0,
        "cold_start_p": traj.stats[0].p if traj.stats else float("nan"),
    }
