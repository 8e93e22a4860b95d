"""Discrete-horizon optimal control core.

A prediction problem is posed on the scaled horizon [0, 1] with N uniform
grid intervals (dtau = 1/N).  The unknowns are stacked per stage as
(control u_i, slack u_d,i, multiplier mu_i), followed by the terminal
multipliers nu and the horizon-length parameter p.  The stationarity
residual F(U, x_t, t) is evaluated by a forward state sweep, a backward
costate sweep, and vectorized stage-row assembly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

Array = np.ndarray


class RecursionDivergence(RuntimeError):
    """Non-finite value produced by a horizon sweep."""

    def __init__(self, quantity: str, stage: int):
        super().__init__(f"non-finite {quantity} at stage {stage}")
        self.quantity = quantity
        self.stage = stage


@dataclass(frozen=True)
class ModelDefinition:
    """Stage and terminal functions of a discretized prediction problem.

    Callback signatures (shapes in parentheses; s = n_u + n_d + n_c):

    - ``f(tau, x, u, p) -> (n_x,)`` scaled dynamics right-hand side
    - ``dH_dx(tau, x, lam_next, u, ud, mu, p) -> (n_x,)``
    - ``stage_dH_du(taus, xs, lams_next, us, uds, mus, p) -> (N, n_u)``
    - ``stage_dH_dud(taus, xs, lams_next, us, uds, mus, p) -> (N, n_d)``
    - ``stage_C(taus, xs, us, uds, p) -> (N, n_c)`` equality constraints
    - ``stage_L(taus, xs, us, uds, p) -> (N,)`` running-cost values
    - ``phi(tau_N, x_N, p) -> float`` terminal cost
    - ``dphi_dx(tau_N, x_N, p) -> (n_x,)``
    - ``psi(tau_N, x_N, p) -> (n_psi,)`` terminal constraint
    - ``dpsi_dx(tau_N, x_N, p) -> (n_psi, n_x)``
    - ``p_row(taus, xs, lams, us, uds, mus, nu, p) -> float`` residual row
      associated with the horizon parameter p
    - ``stage_blocks(us, uds, mus, p, dtau) -> (N, s, s)`` analytic
      second-derivative blocks of the stage rows w.r.t. (u, u_d, mu)

    The ``stage_*`` callbacks are vectorized over all N stages; ``xs`` and
    ``lams_next`` there hold the per-stage states x_i and costates
    lambda_{i+1}, while ``p_row`` receives the full (N+1)-long sweeps.
    """

    n_x: int
    n_u: int
    n_d: int
    n_c: int
    n_psi: int
    f: Callable[..., Array]
    dH_dx: Callable[..., Array]
    stage_dH_du: Callable[..., Array]
    stage_dH_dud: Callable[..., Array]
    stage_C: Callable[..., Array]
    stage_L: Callable[..., Array]
    phi: Callable[..., float]
    dphi_dx: Callable[..., Array]
    psi: Callable[..., Array]
    dpsi_dx: Callable[..., Array]
    p_row: Callable[..., float]
    stage_blocks: Callable[..., Array]

    @property
    def stage_stride(self) -> int:
        return self.n_u + self.n_d + self.n_c

    @property
    def border_width(self) -> int:
        """Width l of the dense preconditioner border (n_psi + 1)."""
        return self.n_psi + 1

    def validate(self) -> None:
        """Probe every callback once and check declared output shapes."""
        N = 2
        x = np.zeros(self.n_x)
        u = np.zeros(self.n_u)
        ud = np.ones(self.n_d)
        mu = np.zeros(self.n_c)
        lam = np.zeros(self.n_x)
        p = 1.0
        taus = np.linspace(0.0, 0.5, N)
        xs = np.zeros((N, self.n_x))
        lams = np.zeros((N, self.n_x))
        us = np.zeros((N, self.n_u))
        uds = np.ones((N, self.n_d))
        mus = np.zeros((N, self.n_c))
        nu = np.zeros(self.n_psi)

        checks = [
            (np.asarray(self.f(0.0, x, u, p)), (self.n_x,), "f"),
            (np.asarray(self.dH_dx(0.0, x, lam, u, ud, mu, p)), (self.n_x,), "dH_dx"),
            (np.asarray(self.stage_dH_du(taus, xs, lams, us, uds, mus, p)),
             (N, self.n_u), "stage_dH_du"),
            (np.asarray(self.stage_dH_dud(taus, xs, lams, us, uds, mus, p)),
             (N, self.n_d), "stage_dH_dud"),
            (np.asarray(self.stage_C(taus, xs, us, uds, p)), (N, self.n_c), "stage_C"),
            (np.asarray(self.stage_L(taus, xs, us, uds, p)), (N,), "stage_L"),
            (np.asarray(self.dphi_dx(1.0, x, p)), (self.n_x,), "dphi_dx"),
            (np.asarray(self.psi(1.0, x, p)), (self.n_psi,), "psi"),
            (np.asarray(self.dpsi_dx(1.0, x, p)), (self.n_psi, self.n_x), "dpsi_dx"),
            (np.asarray(self.stage_blocks(us, uds, mus, p, 0.5)),
             (N, self.stage_stride, self.stage_stride), "stage_blocks"),
        ]
        for value, shape, name in checks:
            if value.shape != shape:
                raise ValueError(
                    f"model callback {name} returned shape {value.shape}, "
                    f"expected {shape}")
        for scalar_name, scalar in (
                ("phi", self.phi(1.0, x, p)),
                ("p_row", self.p_row(
                    np.linspace(0.0, 1.0, N + 1),
                    np.zeros((N + 1, self.n_x)), np.zeros((N + 1, self.n_x)),
                    us, uds, mus, nu, p))):
            if not np.isscalar(scalar) and np.ndim(scalar) != 0:
                raise ValueError(f"model callback {scalar_name} must be scalar")


@dataclass
class HorizonSolution:
    """Stacked unknown vector over one prediction horizon.

    Flat layout: ``[u_0, u_d0, mu_0, ..., u_{N-1}, u_d{N-1}, mu_{N-1}, nu, p]``.
    """

    N: int
    n_u: int
    n_d: int
    n_c: int
    n_psi: int
    flat: Array

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        expected = self.N * self.stride + self.n_psi + 1
        if self.flat.shape != (expected,):
            raise ValueError(
                f"flat vector has length {self.flat.shape}, expected ({expected},)")

    @property
    def stride(self) -> int:
        return self.n_u + self.n_d + self.n_c

    @property
    def dim(self) -> int:
        return self.flat.shape[0]

    @classmethod
    def zeros(cls, model: ModelDefinition, N: int) -> "HorizonSolution":
        return cls(N, model.n_u, model.n_d, model.n_c, model.n_psi,
                   np.zeros(N * model.stage_stride + model.n_psi + 1))

    @classmethod
    def from_flat(cls, model: ModelDefinition, N: int, flat: Array) -> "HorizonSolution":
        return cls(N, model.n_u, model.n_d, model.n_c, model.n_psi,
                   np.asarray(flat, dtype=float))

    def stage_array(self) -> Array:
        """(N, stride) view of the per-stage triples."""
        return self.flat[: self.N * self.stride].reshape(self.N, self.stride)

    @property
    def u(self) -> Array:
        return self.stage_array()[:, : self.n_u]

    @property
    def ud(self) -> Array:
        return self.stage_array()[:, self.n_u: self.n_u + self.n_d]

    @property
    def mu(self) -> Array:
        return self.stage_array()[:, self.n_u + self.n_d:]

    @property
    def nu(self) -> Array:
        base = self.N * self.stride
        return self.flat[base: base + self.n_psi]

    @property
    def p(self) -> float:
        return float(self.flat[-1])

    @p.setter
    def p(self, value: float) -> None:
        self.flat[-1] = value

    def copy(self) -> "HorizonSolution":
        return replace(self, flat=self.flat.copy())

    def updated(self, delta: Array) -> "HorizonSolution":
        return replace(self, flat=self.flat + delta)


def forward_recursion(model: ModelDefinition, x_t: Array,
                      U: HorizonSolution) -> Array:
    """States x_0..x_N by explicit Euler in scaled time; x_0 pinned to x_t."""
    N = U.N
    dtau = 1.0 / N
    p = U.p
    u = U.u
    xs = np.empty((N + 1, model.n_x))
    xs[0] = x_t
    for i in range(N):
        xs[i + 1] = xs[i] + dtau * np.asarray(model.f(i * dtau, xs[i], u[i], p))
        if not np.all(np.isfinite(xs[i + 1])):
            raise RecursionDivergence("state", i + 1)
    return xs


def backward_recursion(model: ModelDefinition, xs: Array,
                       U: HorizonSolution) -> Array:
    """Costates lambda_0..lambda_N from the terminal condition backwards."""
    N = U.N
    dtau = 1.0 / N
    p = U.p
    u, ud, mu = U.u, U.ud, U.mu
    lams = np.empty((N + 1, model.n_x))
    lam_N = np.asarray(model.dphi_dx(1.0, xs[N], p), dtype=float)
    if model.n_psi:
        lam_N = lam_N + np.asarray(model.dpsi_dx(1.0, xs[N], p)).T @ U.nu
    lams[N] = lam_N
    if not np.all(np.isfinite(lams[N])):
        raise RecursionDivergence("costate", N)
    for i in range(N - 1, -1, -1):
        lams[i] = lams[i + 1] + dtau * np.asarray(
            model.dH_dx(i * dtau, xs[i], lams[i + 1], u[i], ud[i], mu[i], p))
        if not np.all(np.isfinite(lams[i])):
            raise RecursionDivergence("costate", i)
    return lams


def evaluate_F(model: ModelDefinition, U: HorizonSolution, x_t: Array,
               t: float) -> Array:
    """Stationarity residual dL/dU, flat in the HorizonSolution layout.

    Per stage: dH/du * dtau, dH/du_d * dtau, C * dtau; then psi(tau_N, x_N, p);
    then the scalar p row.  The states and costates are eliminated internally
    by the forward and backward recursions.
    """
    N = U.N
    dtau = 1.0 / N
    p = U.p
    xs = forward_recursion(model, x_t, U)
    lams = backward_recursion(model, xs, U)

    taus = np.arange(N) * dtau
    u, ud, mu = U.u, U.ud, U.mu
    xstage = xs[:-1]
    lnext = lams[1:]
    rows_u = np.asarray(model.stage_dH_du(taus, xstage, lnext, u, ud, mu, p)) * dtau
    rows_d = np.asarray(model.stage_dH_dud(taus, xstage, lnext, u, ud, mu, p)) * dtau
    rows_c = np.asarray(model.stage_C(taus, xstage, u, ud, p)) * dtau

    out = np.empty(U.dim)
    stage = out[: N * U.stride].reshape(N, U.stride)
    stage[:, : model.n_u] = rows_u
    stage[:, model.n_u: model.n_u + model.n_d] = rows_d
    stage[:, model.n_u + model.n_d:] = rows_c
    base = N * U.stride
    if model.n_psi:
        out[base: base + model.n_psi] = np.asarray(model.psi(1.0, xs[N], p))
    taus_full = np.arange(N + 1) * dtau
    out[-1] = model.p_row(taus_full, xs, lams, u, ud, mu, U.nu, p)
    return out


def reduced_lagrangian(model: ModelDefinition, U: HorizonSolution,
                       x_t: Array) -> float:
    """Discrete Lagrangian with states eliminated by the forward recursion.

    The dynamics multiplier terms vanish identically on the recursion, so
    L~(U) = phi + dtau * sum(L + mu^T C) + nu^T psi.  Its gradient w.r.t. U
    equals evaluate_F; used as an independent finite-difference oracle.
    """
    N = U.N
    dtau = 1.0 / N
    p = U.p
    xs = forward_recursion(model, x_t, U)
    taus = np.arange(N) * dtau
    u, ud, mu = U.u, U.ud, U.mu
    stage_cost = np.asarray(model.stage_L(taus, xs[:-1], u, ud, p))
    constr = np.asarray(model.stage_C(taus, xs[:-1], u, ud, p))
    total = float(model.phi(1.0, xs[N], p))
    total += dtau * float(np.sum(stage_cost) + np.sum(mu * constr))
    if model.n_psi:
        total += float(U.nu @ np.asarray(model.psi(1.0, xs[N], p)))
    return total
