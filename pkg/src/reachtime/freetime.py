"""Free-terminal-time reaching solves.

The horizon is optimised in an outer loop around the marching solver. Each
outer iteration solves the fixed-horizon problem, evaluates the horizon
gradient as the trapezoidal integral of the Hamiltonian
L(x, u) + costate . f(x, u) along the solution (equal to t_f dV/dt_f, so it
vanishes exactly when lengthening or shortening the horizon stops paying),
and steps the horizon against it. Steps start as plain gradient descent with
a trust clamp of step_scale * t_f and hand over to a secant rule close to
the optimum. The final horizon is rounded to the requested grid resolution
and the problem is re-marched once on that grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ddp import DdpSettings, DdpSolution, MarchResult, march_solve
from .dynamics import CostSpec, ModelSpec, running_cost, vector_field

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

DEFAULT_SCHEDULE = (150, 300, 450, 600, 750, 900, 1200, 1500, 1750)


@dataclass(frozen=True)
class FreeTimeSettings:
    t_f_init: float = 1.2
    step_scale: float = 0.2
    gradient_tol: float = 1e-6
    switch_tol: float = 0.3
    dt: float = 5e-4
    max_outer: int = 100
    schedule: tuple = DEFAULT_SCHEDULE
    ddp: DdpSettings = field(default_factory=DdpSettings)

    def __post_init__(self):
        if self.t_f_init <= 0 or self.dt <= 0:
            raise ValueError("t_f_init and dt must be positive")
        if not (0 < self.step_scale <= 1):
            raise ValueError("step_scale must be in (0, 1]")
        if self.max_outer < 1:
            raise ValueError("max_outer must be positive")
        sched = tuple(self.schedule)
        if not sched or any(n < 2 for n in sched):
            raise ValueError("schedule must hold step counts of at least 2")
        if any(b <= a for a, b in zip(sched, sched[1:])):
            raise ValueError("schedule must be strictly increasing")


@dataclass
class FreeTimeSolution:
    solution: DdpSolution
    t_f: float
    converged: bool
    outer_iterations: int
    gradient_history: np.ndarray   # rows (t_f, gradient), one per outer solve
    final_march: MarchResult | None = None


def terminal_time_gradient(model: ModelSpec, cost: CostSpec,
                           sol: DdpSolution) -> float:
    """Trapezoidal integral of the Hamiltonian along a fixed-time solution.

    The last knot has no control of its own and reuses the final one.
    """
    us_ext = np.vstack([sol.controls, sol.controls[-1:]])
    L = running_cost(model, cost, sol.states, us_ext)
    f = vector_field(model, sol.states, us_ext)
    H = L + np.sum(sol.costates * f, axis=1)
    return float(_trapezoid(H, dx=sol.dt))


def update_terminal_time(t_f: float, gradient: float, step_scale: float = 0.2,
                         prev_t_f: float | None = None,
                         prev_gradient: float | None = None,
                         use_secant: bool = False) -> float:
    """One horizon update. The applied step is delta scaled down so a single
    move never exceeds step_scale * t_f; the secant direction falls back to
    the plain gradient when its denominator degenerates."""
    delta = gradient
    if use_secant and prev_t_f is not None and prev_gradient is not None:
        denom = gradient - prev_gradient
        if denom != 0.0 and math.isfinite(denom):
            delta = (t_f - prev_t_f) / denom * gradient
    if delta == 0.0:
        return t_f
    alpha = min(1.0, step_scale * abs(t_f) / abs(delta))
    return t_f - alpha * delta


def solve_free_time(model: ModelSpec, cost: CostSpec, x0,
                    settings: FreeTimeSettings | None = None,
                    initial_controls=None) -> FreeTimeSolution:
    """Minimize total cost over both the control sequence and the horizon.

    initial_controls, when given, seeds the first march (rescaled to each
    level); subsequent outer iterations always warm-start from the previous
    finest solution.
    """
    settings = settings or FreeTimeSettings()
    t_f = settings.t_f_init
    warm = None
    if initial_controls is not None:
        guess = np.atleast_2d(np.asarray(initial_controls, dtype=float))
        warm = (t_f, guess)
    history: list[tuple[float, float]] = []
    converged = False
    use_secant = False
    prev_t_f: float | None = None
    prev_g: float | None = None
    outer = 0

    for outer in range(1, settings.max_outer + 1):
        march = march_solve(model, cost, x0, t_f, settings.schedule,
                            settings=settings.ddp, warm_start=warm)
        sol = march.solution
        g = terminal_time_gradient(model, cost, sol)
        history.append((t_f, g))
        warm = (sol.t_f, sol.controls)
        if abs(g) < settings.gradient_tol:
            converged = True
            break
        t_f_new = update_terminal_time(t_f, g, settings.step_scale,
                                       prev_t_f, prev_g, use_secant)
        # Hand over to the secant rule near the optimum. The magnitude test
        # alone is not enough: with a stiff cost-vs-horizon curve the clamped
        # gradient steps can hop across the minimum forever without the
        # gradient ever getting small, so a sign change also triggers the
        # switch.
        if not use_secant and (abs(g) < settings.switch_tol
                               or (prev_g is not None and g * prev_g < 0.0)):
            use_secant = True
        floor = 2.0 * settings.dt
        t_f_next = max(t_f_new, floor)
        # A positive gradient pinned at the horizon floor is a boundary
        # minimum: the cost only grows for longer horizons, and shorter ones
        # are not representable on the grid.  Happens for starts at or next
        # to the target.
        if t_f_next == floor and t_f == floor and g > 0.0:
            converged = True
            break
        prev_t_f, prev_g = t_f, g
        t_f = t_f_next

    n_final = max(2, round(t_f / settings.dt))
    t_f_final = n_final * settings.dt
    final_schedule = [n for n in settings.schedule if n < n_final] + [n_final]
    march = march_solve(model, cost, x0, t_f_final, final_schedule,
                        settings=settings.ddp, warm_start=warm)
    return FreeTimeSolution(solution=march.solution, t_f=t_f_final,
                            converged=converged, outer_iterations=outer,
                            gradient_history=np.asarray(history),
                            final_march=march)
