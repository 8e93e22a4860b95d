"""Preconditioned matrix-free Newton-Krylov MPC for minimum-time control."""

from .engine import (ColdStartFailure, HorizonExhausted, MpcConfig,
                     SimulationFailure, StepFailure, StepStats, Trajectory,
                     cold_start, newton_refine, shift_horizon, simulate)
from .krylov import (FdOperator, GmresReport, OperatorDivergence,
                     SingularMatrix, dense_direct_solve, gmres)
from .models import (Model1Params, Model2Params, build_model1, build_model2,
                     get_model)
from .ocp import (HorizonSolution, ModelDefinition, RecursionDivergence,
                  backward_recursion, evaluate_F, forward_recursion,
                  reduced_lagrangian)
from .precond import (NearSingularBlock, PreconditionerFactors, SingularSchur,
                      SparsePreconditioner, apply_inverse, assemble, factorize)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
