"""Trajectory optimisation by differential dynamic programming.

solve_fixed_time optimises an open-loop control sequence on a fixed horizon
and grid; march_solve chains it over a ladder of grid resolutions, warm
starting each level from the previous one. Both return a DdpSolution whose
gains and costates come from a final backward sweep at the converged
trajectory, so they are consistent with the returned states and controls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dynamics import CostSpec, ModelSpec, _params, terminal_quadratics


class SolveDivergedError(RuntimeError):
    """The solver ran out of regularisation or the rollout blew up."""

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


@dataclass(frozen=True)
class DdpSettings:
    """Solver knobs; the defaults are shared by every caller in the package.

    force_step_size is a test hook: when set, the line search is bypassed and
    every iteration applies exactly that step, acceptance checks included.
    """

    max_iterations: int = 200
    tol: float = 1e-9
    reg_init: float = 1e-6
    reg_min: float = 1e-10
    reg_max: float = 1e6
    reg_scale: float = 10.0
    armijo_ratio: float = 1e-4
    backtrack_factor: float = 0.5
    min_step: float = 2.0 ** -10
    divergence_norm: float = 1e6
    force_step_size: float | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not (0 < self.reg_min <= self.reg_init <= self.reg_max):
            raise ValueError("need 0 < reg_min <= reg_init <= reg_max")
        if not (0 < self.backtrack_factor < 1):
            raise ValueError("backtrack_factor must be in (0, 1)")


@dataclass
class DdpSolution:
    times: np.ndarray        # (N+1,)
    states: np.ndarray       # (N+1, n)
    controls: np.ndarray     # (N, m)
    gains_ff: np.ndarray     # (N, m)
    gains_fb: np.ndarray     # (N, m, n)
    costates: np.ndarray     # (N+1, n) value gradient along the trajectory
    cost: float
    converged: bool
    iterations: int
    cost_history: np.ndarray
    regularization: float

    @property
    def t_f(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_steps(self) -> int:
        return int(self.controls.shape[0])


@dataclass(frozen=True)
class LevelResult:
    n_steps: int
    cost: float
    converged: bool
    iterations: int


@dataclass
class MarchResult:
    levels: list[LevelResult]
    solution: DdpSolution


def _cost_args(cost: CostSpec):
    return (cost.r_time, cost.r_control, cost.r_accel, cost.r_terminal,
            np.asarray(cost.x_f, dtype=np.float64),
            np.asarray(cost.u_f, dtype=np.float64))


def solve_fixed_time(model: ModelSpec, cost: CostSpec, x0, t_f: float,
                     n_steps: int, initial_controls=None,
                     settings: DdpSettings | None = None) -> DdpSolution:
    """Minimise the reaching cost over controls on a fixed grid.

    The backward pass regularises through the value curvature and adapts the
    Levenberg parameter by factors of reg_scale: up on every rejected sweep
    or failed line search, down toward reg_min on every accepted step. Once
    the predicted improvement of a full step falls below tol (relative to
    the current cost), one last unit step is rolled out and kept if it does
    not increase the cost beyond rounding, so the returned trajectory agrees
    with the returned gains.
    """
    settings = settings or DdpSettings()
    x0 = np.asarray(x0, dtype=np.float64)
    n, m = model.state_dim, model.control_dim
    if x0.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    if not np.isfinite(x0).all():
        raise ValueError("x0 must be finite")
    if t_f <= 0 or n_steps < 1:
        raise ValueError("need t_f > 0 and n_steps >= 1")
    dt = t_f / n_steps
    kind, *phys = _params(model)
    cargs = _cost_args(cost)
    u_f = cargs[-1]

    if initial_controls is None:
        us = np.tile(u_f, (n_steps, 1))
    else:
        us = np.array(initial_controls, dtype=np.float64)
        if us.shape != (n_steps, m):
            raise ValueError(f"initial_controls must have shape ({n_steps}, {m})")

    xs, J, ok = _kernels.rollout_cost_controls(
        kind, x0, us, dt, *cargs, *phys, settings.divergence_norm)
    if not ok:
        raise SolveDivergedError("initial rollout diverged")

    reg = settings.reg_init
    history = [J]
    converged = False
    iterations = 0

    def backward(xs, us, reg):
        prep = _kernels.ddp_prep(kind, xs, us, dt, cost.r_control,
                                 cost.r_accel, u_f, *phys)
        _, mx, mxx = terminal_quadratics(cost, xs[-1])
        while True:
            ks, Ks, Vxs, dV1, dV2, ok = _kernels.ddp_backward(
                *prep, mx, mxx, reg)
            if ok:
                return ks, Ks, Vxs, dV1, dV2, reg
            reg *= settings.reg_scale
            if reg > settings.reg_max:
                raise SolveDivergedError(
                    "control Hessian not positive definite at max regularisation")

    for iterations in range(1, settings.max_iterations + 1):
        ks, Ks, Vxs, dV1, dV2, reg = backward(xs, us, reg)

        if settings.force_step_size is not None:
            alpha = settings.force_step_size
            xs2, us2, J2, ok = _kernels.rollout_cost_feedback(
                kind, xs, us, ks, Ks, alpha, dt, *cargs, *phys,
                settings.divergence_norm)
            if not ok:
                raise SolveDivergedError("forced-step rollout diverged")
            improvement = J - J2
            xs, us, J = xs2, us2, J2
            history.append(J)
            if improvement < settings.tol * max(1.0, abs(history[-2])):
                converged = True
                break
            continue

        expected_full = -(dV1 + dV2)
        if expected_full < settings.tol * max(1.0, abs(J)):
            # At the optimum up to rounding: take one clean unit step so the
            # trajectory reflects the latest, least-regularised gains.
            xs2, us2, J2, ok = _kernels.rollout_cost_feedback(
                kind, xs, us, ks, Ks, 1.0, dt, *cargs, *phys,
                settings.divergence_norm)
            if ok and J2 <= J + 1e-6 * max(1.0, abs(J)):
                xs, us, J = xs2, us2, J2
                history.append(J)
            converged = True
            break

        alpha = 1.0
        accepted = False
        while alpha >= settings.min_step:
            xs2, us2, J2, ok = _kernels.rollout_cost_feedback(
                kind, xs, us, ks, Ks, alpha, dt, *cargs, *phys,
                settings.divergence_norm)
            expected = -(alpha * dV1 + alpha * alpha * dV2)
            if ok and expected > 0 and (J - J2) >= settings.armijo_ratio * expected:
                accepted = True
                break
            alpha *= settings.backtrack_factor

        if accepted:
            improvement = J - J2
            xs, us, J = xs2, us2, J2
            history.append(J)
            reg = max(settings.reg_min, reg / settings.reg_scale)
            if improvement < settings.tol * max(1.0, abs(history[-2])):
                converged = True
                break
        else:
            reg *= settings.reg_scale
            if reg > settings.reg_max:
                raise SolveDivergedError(
                    "line search failed at max regularisation")

    ks, Ks, Vxs, _, _, reg = backward(xs, us, reg)
    times = np.arange(n_steps + 1) * dt
    return DdpSolution(times=times, states=xs, controls=us, gains_ff=ks,
                       gains_fb=Ks, costates=Vxs, cost=float(J),
                       converged=converged, iterations=iterations,
                       cost_history=np.asarray(history),
                       regularization=reg)


def rescale_guess(t_f_old: float, controls_old, t_f_new: float,
                  n_new: int) -> np.ndarray:
    """Map a control sequence onto a new horizon and grid.

    New knot i at physical time i*dt_new reads the old sequence at
    (t_f_old/t_f_new) * (i*dt_new), linearly interpolated and clamped to the
    old knot range. Rescaling onto the same (t_f, n) reproduces the input
    bit for bit, which keeps warm starts from perturbing repeated solves.
    """
    us_old = np.asarray(controls_old, dtype=np.float64)
    if us_old.ndim != 2 or us_old.shape[0] < 1:
        raise ValueError("controls_old must be a (N, m) array")
    if t_f_old <= 0 or t_f_new <= 0 or n_new < 1:
        raise ValueError("horizons must be positive and n_new >= 1")
    n_old, m = us_old.shape
    old_t = np.arange(n_old) * (t_f_old / n_old)
    tau = (t_f_old / t_f_new) * (np.arange(n_new) * (t_f_new / n_new))
    tau = np.clip(tau, 0.0, old_t[-1])
    out = np.empty((n_new, m))
    for j in range(m):
        out[:, j] = np.interp(tau, old_t, us_old[:, j])
    return out


def march_solve(model: ModelSpec, cost: CostSpec, x0, t_f: float,
                schedule, settings: DdpSettings | None = None,
                warm_start: tuple[float, np.ndarray] | None = None) -> MarchResult:
    """Solve over a ladder of grid sizes, each warm starting the next.

    schedule is an increasing sequence of step counts. warm_start, when
    given, is (t_f_guess, controls) from an earlier solve and seeds the
    first level. Warm starts accelerate, they must never degrade: only a
    CONVERGED level propagates as the next level's warm start (an
    unconverged coarse level is failed acceleration, and carrying it poisons
    every finer level, where a cold solve may be fine), and a level that
    diverges from its warm start is retried once cold. A divergence with no
    warm start to blame raises SolveDivergedError with the failing step
    count attached as .level.
    """
    schedule = [int(n) for n in schedule]
    if not schedule or any(n < 1 for n in schedule):
        raise ValueError("schedule must list positive step counts")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly increasing")
    levels: list[LevelResult] = []
    sol = None
    carry = None
    for n in schedule:
        if carry is not None:
            guess = rescale_guess(carry.t_f, carry.controls, t_f, n)
        elif warm_start is not None:
            guess = rescale_guess(warm_start[0], warm_start[1], t_f, n)
        else:
            guess = None
        try:
            sol = solve_fixed_time(model, cost, x0, t_f, n,
                                   initial_controls=guess, settings=settings)
        except SolveDivergedError as err:
            if guess is None:
                raise SolveDivergedError(str(err), level=n) from err
            try:
                sol = solve_fixed_time(model, cost, x0, t_f, n,
                                       settings=settings)
            except SolveDivergedError as err2:
                raise SolveDivergedError(str(err2), level=n) from err2
        levels.append(LevelResult(n_steps=n, cost=sol.cost,
                                  converged=sol.converged,
                                  iterations=sol.iterations))
        if sol.converged:
            carry = sol
    return MarchResult(levels=levels, solution=sol)
