"""Manipulator models and reaching-task costs.

Two model families share one state convention x = (q, v): a one-joint double
integrator used for exact cross-checks, and planar revolute arms with two or
three links under gravity. Costs penalize elapsed time, torque deviation from
static gravity compensation, and joint accelerations, plus a quadratic
terminal penalty around the target state.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels

DOUBLE_INTEGRATOR = "double-integrator-1d"
PLANAR_ARM = "planar-arm"

_KIND_CODES = {
    DOUBLE_INTEGRATOR: _kernels.KIND_DOUBLE_INTEGRATOR,
    PLANAR_ARM: _kernels.KIND_PLANAR_ARM,
}


@dataclass(frozen=True)
class ModelSpec:
    """Physical description of a torque-controlled model.

    Per-link tuples are indexed from the base. `coms` is the distance of a
    link's center of mass from its joint, `inertias` the rotational inertia
    about that center. `damping` is a viscous joint coefficient (default 0).
    """

    kind: str
    dof: int
    masses: tuple[float, ...]
    lengths: tuple[float, ...]
    coms: tuple[float, ...]
    inertias: tuple[float, ...]
    gravity: float = 9.81
    damping: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == DOUBLE_INTEGRATOR and self.dof != 1:
            raise ValueError("double integrator has exactly one joint")
        if self.kind == PLANAR_ARM and self.dof not in (2, 3):
            raise ValueError("planar arm supports two or three links")
        if not self.damping:
            object.__setattr__(self, "damping", (0.0,) * self.dof)
        for name in ("masses", "lengths", "coms", "inertias", "damping"):
            vals = getattr(self, name)
            if len(vals) != self.dof:
                raise ValueError(f"{name} must have {self.dof} entries")
            if not all(np.isfinite(v) for v in vals):
                raise ValueError(f"{name} contains non-finite values")
        if any(m <= 0 for m in self.masses):
            raise ValueError("masses must be positive")
        if any(l <= 0 for l in self.lengths):
            raise ValueError("lengths must be positive")
        if any(i <= 0 for i in self.inertias):
            raise ValueError("inertias must be positive")
        if any(c < 0 for c in self.coms):
            raise ValueError("com offsets must be non-negative")
        if any(d < 0 for d in self.damping):
            raise ValueError("damping must be non-negative")
        if not np.isfinite(self.gravity):
            raise ValueError("gravity must be finite")

    @property
    def state_dim(self) -> int:
        return 2 * self.dof

    @property
    def control_dim(self) -> int:
        return self.dof


def double_integrator(damping: float = 0.0) -> ModelSpec:
    """Unit-mass single-joint model: q_dot = v, v_dot = u - damping*v."""
    return ModelSpec(
        kind=DOUBLE_INTEGRATOR, dof=1, masses=(1.0,), lengths=(1.0,),
        coms=(0.5,), inertias=(1.0 / 12.0,), gravity=0.0,
        damping=(damping,),
    )


def planar_arm(dof: int = 2, masses=None, lengths=None, coms=None,
               inertias=None, gravity: float = 9.81, damping=None) -> ModelSpec:
    """Planar revolute chain. Defaults are uniform 1 kg, 1 m rod links."""
    masses = tuple(masses) if masses is not None else (1.0,) * dof
    lengths = tuple(lengths) if lengths is not None else (1.0,) * dof
    if coms is None:
        coms = tuple(l / 2.0 for l in lengths)
    if inertias is None:
        inertias = tuple(m * l * l / 12.0 for m, l in zip(masses, lengths))
    damping = tuple(damping) if damping is not None else (0.0,) * dof
    return ModelSpec(kind=PLANAR_ARM, dof=dof, masses=masses, lengths=lengths,
                     coms=tuple(coms), inertias=tuple(inertias),
                     gravity=gravity, damping=damping)


@functools.lru_cache(maxsize=None)
def _params(model: ModelSpec):
    """Kernel argument pack: (kind code, arrays...)."""
    return (
        _KIND_CODES[model.kind],
        np.asarray(model.masses, dtype=np.float64),
        np.asarray(model.lengths, dtype=np.float64),
        np.asarray(model.coms, dtype=np.float64),
        np.asarray(model.inertias, dtype=np.float64),
        float(model.gravity),
        np.asarray(model.damping, dtype=np.float64),
    )


def _as_batch(arr, dim, name):
    a = np.asarray(arr, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise ValueError(f"{name} must have trailing dimension {dim}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return np.ascontiguousarray(a), single


def manipulator_terms(model: ModelSpec, x):
    """Mass matrix M(q), Coriolis vector c(q, v) and gravity vector g(q).

    Accepts a single state (n,) or a batch (B, n); returns matching shapes.
    The equations of motion read M(q) a + c(q, v) + g(q) + damping*v = u.
    """
    X, single = _as_batch(x, model.state_dim, "state")
    dof = model.dof
    if model.kind == DOUBLE_INTEGRATOR:
        B = X.shape[0]
        Ms = np.broadcast_to(np.eye(dof), (B, dof, dof)).copy()
        cs = np.zeros((B, dof))
        gs = np.zeros((B, dof))
    else:
        kind, masses, lengths, coms, inertias, grav, damping = _params(model)
        Ms, cs, gs = _kernels.batch_arm_terms(
            np.ascontiguousarray(X[:, :dof]), np.ascontiguousarray(X[:, dof:]),
            masses, lengths, coms, inertias, grav)
    if single:
        return Ms[0], cs[0], gs[0]
    return Ms, cs, gs


def gravity_torques(model: ModelSpec, q):
    """Static torques holding configuration q against gravity."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (model.dof,):
        raise ValueError(f"configuration must have shape ({model.dof},)")
    x = np.concatenate([q, np.zeros(model.dof)])
    _, _, g = manipulator_terms(model, x)
    return g


def forward_dynamics(model: ModelSpec, x, u):
    """Joint accelerations a(x, u). Batched like manipulator_terms."""
    X, single = _as_batch(x, model.state_dim, "state")
    U, _ = _as_batch(u, model.control_dim, "control")
    if U.shape[0] != X.shape[0]:
        raise ValueError("state and control batch sizes differ")
    out = _kernels.batch_accel(*( _params_head(model, X, U)))
    return out[0] if single else out


def _params_head(model, X, U):
    kind, masses, lengths, coms, inertias, grav, damping = _params(model)
    return (kind, X, U, masses, lengths, coms, inertias, grav, damping)


def vector_field(model: ModelSpec, x, u):
    """State derivative f(x, u) = (v, a(x, u))."""
    X, single = _as_batch(x, model.state_dim, "state")
    U, _ = _as_batch(u, model.control_dim, "control")
    if U.shape[0] != X.shape[0]:
        raise ValueError("state and control batch sizes differ")
    out = _kernels.batch_vf(*_params_head(model, X, U))
    return out[0] if single else out


def rk4_step(model: ModelSpec, x, u, dt: float):
    """One explicit fourth-order Runge-Kutta step with zero-order-hold u."""
    X, single = _as_batch(x, model.state_dim, "state")
    U, _ = _as_batch(u, model.control_dim, "control")
    kind, masses, lengths, coms, inertias, grav, damping = _params(model)
    out = _kernels.batch_rk4(kind, X, U, float(dt), masses, lengths, coms,
                             inertias, grav, damping)
    return out[0] if single else out


def linearize(model: ModelSpec, x, u):
    """Continuous-time Jacobians A = df/dx, B = df/du at a single point.

    Central differences with step 1e-6 * max(1, ||x||); accuracy is a few
    1e-10 on these smooth trig models.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n, m = model.state_dim, model.control_dim
    if x.shape != (n,) or u.shape != (m,):
        raise ValueError("linearize expects a single state and control")
    h = 1e-6 * max(1.0, float(np.linalg.norm(x)))
    Xp = np.repeat(x[None, :], 2 * (n + m), axis=0)
    Up = np.repeat(u[None, :], 2 * (n + m), axis=0)
    for j in range(n):
        Xp[2 * j, j] += h
        Xp[2 * j + 1, j] -= h
    for j in range(m):
        Up[2 * n + 2 * j, j] += h
        Up[2 * n + 2 * j + 1, j] -= h
    F = vector_field(model, Xp, Up)
    A = np.empty((n, n))
    B = np.empty((n, m))
    for j in range(n):
        A[:, j] = (F[2 * j] - F[2 * j + 1]) / (2 * h)
    for j in range(m):
        B[:, j] = (F[2 * n + 2 * j] - F[2 * n + 2 * j + 1]) / (2 * h)
    return A, B


def total_energy(model: ModelSpec, x):
    """Kinetic plus potential energy; the conserved quantity for zero torque
    and zero damping. Batched."""
    X, single = _as_batch(x, model.state_dim, "state")
    dof = model.dof
    Q, V = X[:, :dof], X[:, dof:]
    if model.kind == DOUBLE_INTEGRATOR:
        E = 0.5 * V[:, 0] ** 2
        return E[0] if single else E
    Ms, _, _ = manipulator_terms(model, X)
    kinetic = 0.5 * np.einsum("bi,bij,bj->b", V, Ms, V)
    th = np.cumsum(Q, axis=1)
    lengths = np.asarray(model.lengths)
    coms = np.asarray(model.coms)
    masses = np.asarray(model.masses)
    joint_y = np.concatenate(
        [np.zeros((X.shape[0], 1)),
         np.cumsum(lengths[None, :-1] * np.sin(th[:, :-1]), axis=1)], axis=1)
    com_y = joint_y + coms[None, :] * np.sin(th)
    potential = model.gravity * np.sum(masses[None, :] * com_y, axis=1)
    E = kinetic + potential
    return E[0] if single else E


# ---------------------------------------------------------------------------
# Costs


@dataclass(frozen=True)
class CostSpec:
    """Reaching cost around a static target (x_f, u_f).

    Running cost  L(x, u) = r_time + r_control ||u - u_f||^2
                           + r_accel ||a(x, u)||^2
    Terminal cost M(x)    = r_terminal ||x - x_f||^2

    u_f must be the gravity compensation torque at q_f so that (x_f, u_f)
    is an equilibrium; build instances through reach_cost to get that wiring
    for free.
    """

    r_time: float
    r_control: float
    r_accel: float
    r_terminal: float
    x_f: tuple[float, ...]
    u_f: tuple[float, ...]

    def __post_init__(self):
        for name in ("r_time", "r_control", "r_accel", "r_terminal"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite")
        if len(self.x_f) != 2 * len(self.u_f):
            raise ValueError("x_f must hold positions and velocities")
        if not all(np.isfinite(v) for v in self.x_f):
            raise ValueError("x_f contains non-finite values")
        if not all(np.isfinite(v) for v in self.u_f):
            raise ValueError("u_f contains non-finite values")

    @property
    def target_state(self):
        return np.asarray(self.x_f, dtype=np.float64)

    @property
    def target_control(self):
        return np.asarray(self.u_f, dtype=np.float64)


def reach_cost(model: ModelSpec, q_f, r_time: float = 100.0,
               r_control: float = 0.025, r_accel: float = 0.005,
               r_terminal: float = 2.5e5) -> CostSpec:
    """Cost for reaching configuration q_f at rest, torques referenced to
    gravity compensation at the target."""
    q_f = np.asarray(q_f, dtype=np.float64)
    u_f = gravity_torques(model, q_f)
    x_f = np.concatenate([q_f, np.zeros(model.dof)])
    cost = CostSpec(r_time=r_time, r_control=r_control, r_accel=r_accel,
                    r_terminal=r_terminal,
                    x_f=tuple(float(v) for v in x_f),
                    u_f=tuple(float(v) for v in u_f))
    resid = vector_field(model, x_f, u_f)
    if np.linalg.norm(resid) > 1e-9:
        raise ValueError("target is not an equilibrium under u_f")
    return cost


def running_cost(model: ModelSpec, cost: CostSpec, x, u):
    """L(x, u), batched."""
    X, single = _as_batch(x, model.state_dim, "state")
    U, _ = _as_batch(u, model.control_dim, "control")
    a = _kernels.batch_accel(*_params_head(model, X, U))
    du = U - cost.target_control[None, :]
    L = (cost.r_time + cost.r_control * np.sum(du * du, axis=1)
         + cost.r_accel * np.sum(a * a, axis=1))
    return float(L[0]) if single else L


def terminal_cost(cost: CostSpec, x):
    x = np.asarray(x, dtype=np.float64)
    dx = x - cost.target_state
    if dx.ndim == 1:
        return float(cost.r_terminal * np.dot(dx, dx))
    return cost.r_terminal * np.sum(dx * dx, axis=-1)


class CostQuadratics(NamedTuple):
    """Pointwise expansion of the running cost. Leading batch axis."""

    value: np.ndarray   # (B,)
    lx: np.ndarray      # (B, n)
    lu: np.ndarray      # (B, m)
    lxx: np.ndarray     # (B, n, n)
    lxu: np.ndarray     # (B, n, m)
    luu: np.ndarray     # (B, m, m)


_COST_FD_STEP = 1e-6


def cost_quadratics(model: ModelSpec, cost: CostSpec, x, u) -> CostQuadratics:
    """Running-cost derivatives used by the trajectory optimizer.

    Gauss-Newton on the residual [sqrt(r_control)(u - u_f);
    sqrt(r_accel) a(x, u)]: the acceleration Jacobian comes from central
    differences with step 1e-6, after which both the gradient (2 J^T r) and
    the curvature (2 J^T J) are formed from it directly. Differencing the
    scalar cost instead would lose ~8 digits to cancellation, which matters
    once an optimizer drives the gradient toward rounding level. The
    curvature is positive semidefinite by construction.
    """
    X, single = _as_batch(x, model.state_dim, "state")
    U, _ = _as_batch(u, model.control_dim, "control")
    B = X.shape[0]
    n, m = model.state_dim, model.control_dim
    h = _COST_FD_STEP

    L0 = running_cost(model, cost, X, U)
    a0 = _kernels.batch_accel(*_params_head(model, X, U))
    ax = np.empty((B, m, n))   # da/dx
    au = np.empty((B, m, m))   # da/du
    for j in range(n):
        Xp = X.copy(); Xp[:, j] += h
        Xm = X.copy(); Xm[:, j] -= h
        ap = _kernels.batch_accel(*_params_head(model, Xp, U))
        am = _kernels.batch_accel(*_params_head(model, Xm, U))
        ax[:, :, j] = (ap - am) / (2 * h)
    for j in range(m):
        Up = U.copy(); Up[:, j] += h
        Um = U.copy(); Um[:, j] -= h
        ap = _kernels.batch_accel(*_params_head(model, X, Up))
        am = _kernels.batch_accel(*_params_head(model, X, Um))
        au[:, :, j] = (ap - am) / (2 * h)

    two_ra = 2.0 * cost.r_accel
    lx = two_ra * np.einsum("bk,bkj->bj", a0, ax)
    lu = (two_ra * np.einsum("bk,bkj->bj", a0, au)
          + 2.0 * cost.r_control * (U - cost.target_control[None, :]))
    lxx = two_ra * np.einsum("bki,bkj->bij", ax, ax)
    lxu = two_ra * np.einsum("bki,bkj->bij", ax, au)
    luu = two_ra * np.einsum("bki,bkj->bij", au, au)
    luu += 2.0 * cost.r_control * np.eye(m)[None, :, :]

    value = np.asarray(L0, dtype=np.float64).reshape(B)
    if single:
        return CostQuadratics(float(value[0]), lx[0], lu[0], lxx[0], lxu[0],
                              luu[0])
    return CostQuadratics(value, lx, lu, lxx, lxu, luu)


def terminal_quadratics(cost: CostSpec, x):
    """Exact value, gradient and Hessian of the terminal cost at x."""
    x = np.asarray(x, dtype=np.float64)
    dx = x - cost.target_state
    value = float(cost.r_terminal * np.dot(dx, dx))
    grad = 2.0 * cost.r_terminal * dx
    hess = 2.0 * cost.r_terminal * np.eye(x.shape[0])
    return value, grad, hess
