"""Double-integrator prediction models.

Both models share the scaled dynamics x' = p*y, y' = p*u and the slack
equality u^2 + u_d^2 = 1 replacing |u| <= 1.  Model 1 enforces the target
state as a hard terminal constraint; model 2 replaces it with a quadratic
terminal penalty and adds a small control regularization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ocp import ModelDefinition


@dataclass(frozen=True)
class Model1Params:
    """Hard-terminal-constraint model: slack penalty weight and target."""

    w_d: float = 0.005
    x_f: float = 0.0
    y_f: float = 0.0

    def __post_init__(self):
        if self.w_d <= 0:
            raise ValueError("w_d must be positive")


@dataclass(frozen=True)
class Model2Params:
    """Soft-terminal model: adds terminal weight alpha1 and control weight alpha2."""

    w_d: float = 0.005
    alpha1: float = 1e3
    alpha2: float = 0.1
    x_f: float = 0.0
    y_f: float = 0.0

    def __post_init__(self):
        if self.w_d <= 0:
            raise ValueError("w_d must be positive")
        if self.alpha1 <= 0:
            raise ValueError("alpha1 must be positive")
        if self.alpha2 < 0:
            raise ValueError("alpha2 must be nonnegative")


def _dynamics(tau, x, u, p):
    return np.array([p * x[1], p * u[0]])


def _dH_dx(tau, x, lam_next, u, ud, mu, p):
    # H depends on x only through lambda^T f: d/dx1 = 0, d/dx2 = p*lam1.
    return np.array([0.0, p * lam_next[0]])


def _stage_C(taus, xs, us, uds, p):
    return us ** 2 + uds ** 2 - 1.0


def build_model1(params: Model1Params = Model1Params()) -> ModelDefinition:
    """Minimum-time model with hard terminal constraint x_N = x_f."""
    w_d = params.w_d
    target = np.array([params.x_f, params.y_f])

    def stage_dH_du(taus, xs, lams_next, us, uds, mus, p):
        return p * lams_next[:, 1:2] + 2.0 * us * mus

    def stage_dH_dud(taus, xs, lams_next, us, uds, mus, p):
        return 2.0 * mus * uds - w_d * p

    def stage_L(taus, xs, us, uds, p):
        return -w_d * p * uds[:, 0]

    def p_row(taus, xs, lams, us, uds, mus, nu, p):
        dtau = 1.0 / len(us)
        acc = (xs[:-1, 1] * lams[1:, 0] + us[:, 0] * lams[1:, 1]
               - w_d * uds[:, 0])
        return dtau * float(np.sum(acc)) + 1.0

    def stage_blocks(us, uds, mus, p, dtau):
        N = len(us)
        B = np.zeros((N, 3, 3))
        B[:, 0, 0] = mus[:, 0]
        B[:, 1, 1] = mus[:, 0]
        B[:, 0, 2] = B[:, 2, 0] = us[:, 0]
        B[:, 1, 2] = B[:, 2, 1] = uds[:, 0]
        return 2.0 * dtau * B

    model = ModelDefinition(
        n_x=2, n_u=1, n_d=1, n_c=1, n_psi=2,
        f=_dynamics,
        dH_dx=_dH_dx,
        stage_dH_du=stage_dH_du,
        stage_dH_dud=stage_dH_dud,
        stage_C=_stage_C,
        stage_L=stage_L,
        phi=lambda tau, x, p: float(p),
        dphi_dx=lambda tau, x, p: np.zeros(2),
        psi=lambda tau, x, p: x - target,
        dpsi_dx=lambda tau, x, p: np.eye(2),
        p_row=p_row,
        stage_blocks=stage_blocks,
    )
    model.validate()
    return model


def build_model2(params: Model2Params = Model2Params()) -> ModelDefinition:
    """Soft-terminal model with quadratic penalty and control regularization."""
    w_d = params.w_d
    a1 = params.alpha1
    a2 = params.alpha2
    target = np.array([params.x_f, params.y_f])

    def stage_dH_du(taus, xs, lams_next, us, uds, mus, p):
        return p * lams_next[:, 1:2] + 2.0 * us * mus + a2 * p * us

    def stage_dH_dud(taus, xs, lams_next, us, uds, mus, p):
        return 2.0 * mus * uds - w_d * p

    def stage_L(taus, xs, us, uds, p):
        return -w_d * p * uds[:, 0] + 0.5 * a2 * p * us[:, 0] ** 2

    def phi(tau, x, p):
        d = x - target
        return float(0.5 * a1 * (d @ d) + p)

    def p_row(taus, xs, lams, us, uds, mus, nu, p):
        dtau = 1.0 / len(us)
        acc = (xs[:-1, 1] * lams[1:, 0] + us[:, 0] * lams[1:, 1]
               - w_d * uds[:, 0] + 0.5 * a2 * us[:, 0] ** 2)
        return dtau * float(np.sum(acc)) + 1.0

    def stage_blocks(us, uds, mus, p, dtau):
        N = len(us)
        B = np.zeros((N, 3, 3))
        # d2H/du2 = 2*mu + alpha2*p, entering the block as dtau*(2mu + a2*p).
        B[:, 0, 0] = mus[:, 0] + 0.5 * a2 * p
        B[:, 1, 1] = mus[:, 0]
        B[:, 0, 2] = B[:, 2, 0] = us[:, 0]
        B[:, 1, 2] = B[:, 2, 1] = uds[:, 0]
        return 2.0 * dtau * B

    model = ModelDefinition(
        n_x=2, n_u=1, n_d=1, n_c=1, n_psi=0,
        f=_dynamics,
        dH_dx=_dH_dx,
        stage_dH_du=stage_dH_du,
        stage_dH_dud=stage_dH_dud,
        stage_C=_stage_C,
        stage_L=stage_L,
        phi=phi,
        dphi_dx=lambda tau, x, p: a1 * (x - target),
        psi=lambda tau, x, p: np.zeros(0),
        dpsi_dx=lambda tau, x, p: np.zeros((0, 2)),
        p_row=p_row,
        stage_blocks=stage_blocks,
    )
    model.validate()
    return model


def get_model(identifier: str, **kwargs) -> ModelDefinition:
    """Build a model by identifier: "model1" or "model2" (aliases "1"/"2")."""
    key = str(identifier).lower()
    if key in ("model1", "1"):
        return build_model1(Model1Params(**kwargs))
    if key in ("model2", "2"):
        return build_model2(Model2Params(**kwargs))
    raise ValueError(f"unknown model identifier: {identifier!r}")
