"""Independent symbolic derivation of planar-arm dynamics, used as the oracle
for manipulator_terms. Run as a script to regenerate the frozen literals in
test_dynamics.py.

The derivation goes through the Lagrangian directly: kinetic energy from the
link center velocities plus rotational terms, potential energy from center
heights, then M_ij = d^2 T / dv_i dv_j, Christoffel contraction for the
velocity-product torques, and g = dV/dq. Nothing here touches the package's
kernel code.
"""

import numpy as np
import sympy as sp


def symbolic_arm_terms(masses, lengths, coms, inertias, gravity):
    dof = len(masses)
    q = sp.symbols(f"q0:{dof}")
    v = sp.symbols(f"v0:{dof}")
    th = [sum(q[: i + 1]) for i in range(dof)]
    thd = [sum(v[: i + 1]) for i in range(dof)]

    # Link center positions and velocities.
    px, py = [], []
    jx, jy = sp.Integer(0), sp.Integer(0)
    for i in range(dof):
        px.append(jx + coms[i] * sp.cos(th[i]))
        py.append(jy + coms[i] * sp.sin(th[i]))
        jx = jx + lengths[i] * sp.cos(th[i])
        jy = jy + lengths[i] * sp.sin(th[i])

    def dt(expr):
        return sum(sp.diff(expr, q[k]) * v[k] for k in range(dof))

    T = sp.Integer(0)
    V = sp.Integer(0)
    for i in range(dof):
        vx, vy = dt(px[i]), dt(py[i])
        T += sp.Rational(1, 2) * masses[i] * (vx**2 + vy**2)
        T += sp.Rational(1, 2) * inertias[i] * thd[i] ** 2
        V += masses[i] * gravity * py[i]

    M = sp.Matrix(dof, dof, lambda i, j: sp.diff(T, v[i], v[j]))
    gvec = sp.Matrix([sp.diff(V, q[k]) for k in range(dof)])
    cvec = sp.Matrix([
        sum((sp.diff(M[k, j], q[i]) - sp.Rational(1, 2) * sp.diff(M[i, j], q[k]))
            * v[i] * v[j]
            for i in range(dof) for j in range(dof))
        for k in range(dof)
    ])
    syms = list(q) + list(v)
    fM = sp.lambdify(syms, M, "numpy")
    fc = sp.lambdify(syms, cvec, "numpy")
    fg = sp.lambdify(syms, gvec, "numpy")

    def evaluate(x):
        vals = [float(t) for t in x]
        return (np.asarray(fM(*vals), dtype=float),
                np.asarray(fc(*vals), dtype=float).ravel(),
                np.asarray(fg(*vals), dtype=float).ravel())

    return evaluate


TWO_LINK = dict(masses=(1.3, 0.8), lengths=(0.9, 1.1), coms=(0.4, 0.6),
                inertias=(0.11, 0.07), gravity=9.81)
THREE_LINK = dict(masses=(1.2, 0.9, 0.5), lengths=(0.8, 0.7, 0.6),
                  coms=(0.35, 0.3, 0.25), inertias=(0.08, 0.05, 0.02),
                  gravity=9.81)

TWO_LINK_PROBES = [
    (0.3, -0.2, 0.5, 0.4),
    (1.2, 0.7, -1.1, 2.0),
    (-0.8, 2.1, 0.0, -0.6),
]
THREE_LINK_PROBES = [
    (0.4, -0.3, 0.9, 1.1, -0.5, 0.7),
    (-1.0, 0.6, 0.2, 0.0, 1.5, -2.0),
]


def main():
    np.set_printoptions(precision=17)
    for name, params, probes in [("TWO", TWO_LINK, TWO_LINK_PROBES),
                                 ("THREE", THREE_LINK, THREE_LINK_PROBES)]:
        ev = symbolic_arm_terms(**params)
        print(f"{name}_LINK_EXPECTED = [")
        for x in probes:
            M, c, g = ev(np.asarray(x))
            print("    (")
            print(f"        {list(x)!r},")
            print(f"        {M.tolist()!r},")
            print(f"        {c.tolist()!r},")
            print(f"        {g.tolist()!r},")
            print("    ),")
        print("]")


if __name__ == "__main__":
    main()
