"""Time-indexed LQR feedback about the target equilibrium.

A single backward Riccati pass at the linearization around (x_f, u_f) yields
gains for every remaining-time value on a uniform grid.  Because the
linearization point is an exact equilibrium of the model, the affine terms of
the local quadratic expansion vanish identically and the feedforward gain is
zero at every horizon; this is asserted during construction, not assumed.

The feedback is meant to act only close to the target, so lookups scale the
gains by a blend factor that is 1 for short remaining times and rolls off to
0 at the table horizon.  Controls pass through a smooth per-coordinate
saturation that is exact at u_f (sigma(u_f) == u_f in floating point) with
unit slope there.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dynamics import CostSpec, ModelSpec, _params

__all__ = [
    "BlendSchedule",
    "RiccatiTable",
    "Saturation",
    "build_riccati_table",
    "lookup_gains",
    "lqr_control",
]


@dataclass(frozen=True)
class BlendSchedule:
    """Remaining-time gain schedule: full feedback below t_low, none above t_high.

    Between the two knees the factor follows a logistic ramp whose endpoint
    values are pinned to 1 - eps_edge and eps_edge, so the schedule is
    continuous to within eps_edge at both knees.
    """

    t_low: float = 0.08
    t_high: float = 0.8
    eps_edge: float = 1e-5

    def __post_init__(self):
        if not (0 < self.t_low < self.t_high):
            raise ValueError("need 0 < t_low < t_high")
        if not (0 < self.eps_edge < 0.5):
            raise ValueError("eps_edge must be in (0, 0.5)")

    def factor(self, remaining):
        """Blend factor s(remaining), elementwise on arrays."""
        t = np.asarray(remaining, dtype=float)
        z_max = np.log((1.0 - self.eps_edge) / self.eps_edge)
        slope = 2.0 * z_max / (self.t_high - self.t_low)
        z = z_max - (t - self.t_low) * slope
        # logistic evaluated only on the ramp; hard 1/0 outside
        ramp = 1.0 / (1.0 + np.exp(-np.clip(z, -50.0, 50.0)))
        out = np.where(t < self.t_low, 1.0, np.where(t > self.t_high, 0.0, ramp))
        return float(out) if np.isscalar(remaining) else out

    def to_dict(self):
        return {"t_low": self.t_low, "t_high": self.t_high,
                "eps_edge": self.eps_edge}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Saturation:
    """Per-coordinate logistic squash onto (u_min, u_max), exact at u_ref.

    The textbook form u_min + (u_max - u_min) / (1 + c1*exp(-c2*(u - u_ref)))
    is algebraically rearranged so that sigma(u_ref) returns u_ref bitwise:
    with d = u_max - u_ref, e = u_ref - u_min, c2 = (u_max - u_min)/(d*e) and
    z = c2*(u - u_ref),

        z >= 0:  sigma = u_ref + d*e*(1 - exp(-z)) / (e + d*exp(-z))
        z <  0:  sigma = u_ref + d*e*(exp(z) - 1) / (e*exp(z) + d)

    Both branches evaluate exp only on non-positive arguments, so the form is
    also overflow-free for arbitrarily large inputs.
    """

    u_min: tuple
    u_max: tuple
    u_ref: tuple

    def __post_init__(self):
        lo, hi, ref = (np.asarray(v, dtype=float)
                       for v in (self.u_min, self.u_max, self.u_ref))
        if not (lo.shape == hi.shape == ref.shape):
            raise ValueError("saturation bound shapes differ")
        if not np.all((lo < ref) & (ref < hi)):
            raise ValueError("need u_min < u_ref < u_max per coordinate")

    @classmethod
    def from_cost(cls, cost: CostSpec, u_min=-2000.0, u_max=2000.0):
        m = len(cost.u_f)
        return cls(u_min=(float(u_min),) * m, u_max=(float(u_max),) * m,
                   u_ref=tuple(float(v) for v in cost.u_f))

    def _parts(self):
        lo = np.asarray(self.u_min)
        hi = np.asarray(self.u_max)
        ref = np.asarray(self.u_ref)
        d = hi - ref
        e = ref - lo
        c2 = (hi - lo) / (d * e)
        return ref, d, e, c2

    def __call__(self, u):
        ref, d, e, c2 = self._parts()
        z = c2 * (np.asarray(u, dtype=float) - ref)
        w = np.exp(-np.abs(z))
        pos = d * e * (1.0 - w) / (e + d * w)
        neg = d * e * (w - 1.0) / (e * w + d)
        return ref + np.where(z >= 0.0, pos, neg)

    def jacobian_diag(self, u):
        """Diagonal of d sigma / d u (the Jacobian is diagonal)."""
        ref, d, e, c2 = self._parts()
        z = c2 * (np.asarray(u, dtype=float) - ref)
        w = np.exp(-np.abs(z))
        pos = d * e * (d + e) * w / (e + d * w) ** 2
        neg = d * e * (d + e) * w / (e * w + d) ** 2
        return c2 * np.where(z >= 0.0, pos, neg)

    def to_dict(self):
        return {"u_min": list(self.u_min), "u_max": list(self.u_max),
                "u_ref": list(self.u_ref)}

    @classmethod
    def from_dict(cls, d):
        return cls(u_min=tuple(d["u_min"]), u_max=tuple(d["u_max"]),
                   u_ref=tuple(d["u_ref"]))


@dataclass
class RiccatiTable:
    """Gains indexed by remaining time on a uniform grid of spacing delta.

    Entry i holds (k_i, K_i, P_i) for remaining time i*delta; entry 0 is the
    terminal entry with P_0 equal to the terminal cost Hessian.
    """

    horizon: float
    delta: float
    ks: np.ndarray          # (N+1, m), identically zero
    Ks: np.ndarray          # (N+1, m, n)
    Ps: np.ndarray          # (N+1, n, n)
    x_f: np.ndarray
    u_f: np.ndarray

    @property
    def n_entries(self):
        return self.ks.shape[0]

    def to_dict(self):
        return {
            "horizon": self.horizon,
            "delta": self.delta,
            "ks": self.ks.tolist(),
            "Ks": self.Ks.tolist(),
            "Ps": self.Ps.tolist(),
            "x_f": self.x_f.tolist(),
            "u_f": self.u_f.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            horizon=float(d["horizon"]),
            delta=float(d["delta"]),
            ks=np.asarray(d["ks"], dtype=float),
            Ks=np.asarray(d["Ks"], dtype=float),
            Ps=np.asarray(d["Ps"], dtype=float),
            x_f=np.asarray(d["x_f"], dtype=float),
            u_f=np.asarray(d["u_f"], dtype=float),
        )


def build_riccati_table(model: ModelSpec, cost: CostSpec,
                        horizon: float = 0.8, delta: float = 5e-4) -> RiccatiTable:
    if horizon <= 0 or delta <= 0:
        raise ValueError("horizon and delta must be positive")
    n_entries = horizon / delta
    if abs(n_entries - round(n_entries)) > 1e-9:
        raise ValueError("horizon must be an integral multiple of delta")
    n_steps = int(round(n_entries))

    x_f = np.asarray(cost.x_f, dtype=float)
    u_f = np.asarray(cost.u_f, dtype=float)
    n, m = model.state_dim, model.control_dim

    # one-knot prep gives the discrete-step Jacobians and the stage
    # quadratics (already scaled by delta) in shifted coordinates
    kind, masses, lengths, coms, inertias, grav, damping = _params(model)
    fx, fu, lx, lu, lxx, lxu, luu = _kernels.ddp_prep(
        kind, x_f[None, :], u_f[None, :], delta,
        cost.r_control, cost.r_accel, u_f,
        masses, lengths, coms, inertias, grav, damping)
    a, b = fx[0], fu[0]
    lxx, lxu, luu = lxx[0], lxu[0], luu[0]

    # the linearization point is an equilibrium, so the affine expansion
    # terms must vanish; validate rather than assume, then use exact zeros
    if not (np.all(np.abs(lx) < 1e-9) and np.all(np.abs(lu) < 1e-9)):
        raise RuntimeError("linearization point is not a cost equilibrium")
    accel = _kernels.accel(kind, x_f, u_f, masses, lengths, coms,
                           inertias, grav, damping)
    if np.any(np.abs(accel) > 1e-9):
        raise RuntimeError("linearization point is not a dynamic equilibrium")

    ks = np.zeros((n_steps + 1, m))
    Ks = np.zeros((n_steps + 1, m, n))
    Ps = np.zeros((n_steps + 1, n, n))
    p = 2.0 * cost.r_terminal * np.eye(n)
    Ps[0] = p
    for i in range(1, n_steps + 1):
        pa = p @ a
        qxx = lxx + a.T @ pa
        qux = lxu.T + b.T @ pa
        quu = luu + b.T @ p @ b
        gain = -np.linalg.solve(quu, qux)
        p = qxx + gain.T @ quu @ gain + gain.T @ qux + qux.T @ gain
        p = 0.5 * (p + p.T)
        Ks[i] = gain
        Ps[i] = p

    return RiccatiTable(horizon=float(horizon), delta=float(delta),
                        ks=ks, Ks=Ks, Ps=Ps, x_f=x_f, u_f=u_f)


def lookup_gains(table: RiccatiTable, blend: BlendSchedule, remaining):
    """Blend-scaled gains at the given remaining time(s).

    Linear interpolation on the table grid, clamped to the table horizon.
    Scalar input gives (k (m,), K (m, n)); an array of B remaining times
    gives ((B, m), (B, m, n)).
    """
    scalar = np.isscalar(remaining) or np.ndim(remaining) == 0
    t = np.atleast_1d(np.asarray(remaining, dtype=float))
    if np.any(t < 0):
        raise ValueError("remaining time must be non-negative")
    pos = np.minimum(t / table.delta, table.n_entries - 1.0)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, table.n_entries - 1)
    frac = (pos - i0)[:, None, None]
    k = (1.0 - frac[:, :, 0]) * table.ks[i0] + frac[:, :, 0] * table.ks[i1]
    big_k = (1.0 - frac) * table.Ks[i0] + frac * table.Ks[i1]
    s = np.atleast_1d(blend.factor(t))
    k = s[:, None] * k
    big_k = s[:, None, None] * big_k
    if scalar:
        return k[0], big_k[0]
    return k, big_k


def lqr_control(table: RiccatiTable, blend: BlendSchedule, x, remaining):
    """Unsaturated feedback u_f + k + K (x - x_f) at the given remaining time.

    Accepts a single state (n,) with scalar remaining time, or a batch (B, n)
    with remaining times (B,).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        k, big_k = lookup_gains(table, blend, remaining)
        return table.u_f + k + big_k @ (x - table.x_f)
    k, big_k = lookup_gains(table, blend, np.asarray(remaining, dtype=float))
    dx = x - table.x_f[None, :]
    return table.u_f[None, :] + k + np.einsum("bmn,bn->bm", big_k, dx)
