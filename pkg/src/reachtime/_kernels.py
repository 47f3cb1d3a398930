"""Numba kernels for manipulator dynamics and trajectory rollouts.

Everything here is shape-static float64 and jitted with cache=True so worker
processes reuse the on-disk compilation cache. Public modules wrap these
kernels; nothing outside the package should import this module directly.
"""

import numpy as np
from numba import njit

# Model kind codes shared with dynamics.ModelSpec.
KIND_DOUBLE_INTEGRATOR = 0
KIND_PLANAR_ARM = 1

@njit(cache=True)
def _arm_mass_gravity(q, masses, lengths, coms, inertias, grav):
    """Mass matrix and gravity torque vector of a planar n-link chain.

    Link i hangs off joint i with its center of mass coms[i] along the link
    and rotational inertia inertias[i] about that center. The chain moves in
    a vertical plane; angles are relative joint angles, absolute link angle
    is their cumulative sum measured from the +x axis.
    """
    dof = q.shape[0]
    th = np.empty(dof)
    acc = 0.0
    for i in range(dof):
        acc += q[i]
        th[i] = acc
    cth = np.cos(th)
    sth = np.sin(th)

    # Joint positions (joint 0 at origin) and link center positions.
    jx = np.zeros(dof)
    jy = np.zeros(dof)
    for k in range(1, dof):
        jx[k] = jx[k - 1] + lengths[k - 1] * cth[k - 1]
        jy[k] = jy[k - 1] + lengths[k - 1] * sth[k - 1]
    px = np.empty(dof)
    py = np.empty(dof)
    for l in range(dof):
        px[l] = jx[l] + coms[l] * cth[l]
        py[l] = jy[l] + coms[l] * sth[l]

    # M = sum_l m_l J_l^T J_l + I_l S_l with J_l[:, k] = z x (p_l - j_k) for
    # k <= l, and S_l the all-ones block over joints k, k' <= l. The cross
    # product drops out of the dot product, leaving plain position deltas.
    M = np.zeros((dof, dof))
    for l in range(dof):
        m_l = masses[l]
        for i in range(l + 1):
            rix = px[l] - jx[i]
            riy = py[l] - jy[i]
            for j in range(i, l + 1):
                rjx = px[l] - jx[j]
                rjy = py[l] - jy[j]
                val = m_l * (rix * rjx + riy * rjy) + inertias[l]
                M[i, j] += val
                if i != j:
                    M[j, i] += val

    g = np.zeros(dof)
    for l in range(dof):
        for k in range(l + 1):
            dy = coms[l] * cth[l]
            for j in range(k, l):
                dy += lengths[j] * cth[j]
            g[k] += masses[l] * grav * dy
    return M, g


@njit(cache=True)
def _arm_terms(q, v, masses, lengths, coms, inertias, grav):
    """Mass matrix, Coriolis vector c(q, v) and gravity vector.

    Everything here is analytic. M_ij = sum_l m_l (r_i . r_j) + I_l with
    r_a = p_l - j_a (link-l centre of mass minus joint a), and the
    mass-matrix partials have the closed form
        dM_ij/dq_k = sum_{l >= max(i,j,k)} m_l [cross(r_max(i,k), r_j)
                                                + cross(r_max(j,k), r_i)].
    A finite-difference Coriolis would leave ~1e-10 rounding jitter in the
    vector field, which outer difference quotients (linearisation, solver
    Jacobians) amplify by 1/h into the 1e-4 range.
    """
    dof = q.shape[0]
    jx = np.empty(dof)
    jy = np.empty(dof)
    px = np.empty(dof)
    py = np.empty(dof)
    th = 0.0
    x = 0.0
    y = 0.0
    for l in range(dof):
        jx[l] = x
        jy[l] = y
        th += q[l]
        ct = np.cos(th)
        st = np.sin(th)
        px[l] = x + coms[l] * ct
        py[l] = y + coms[l] * st
        x += lengths[l] * ct
        y += lengths[l] * st

    M = np.zeros((dof, dof))
    g = np.zeros(dof)
    dM = np.zeros((dof, dof, dof))  # dM[k, i, j] = dM_ij / dq_k
    for l in range(dof):
        m_l = masses[l]
        for i in range(l + 1):
            rix = px[l] - jx[i]
            riy = py[l] - jy[i]
            g[i] += m_l * grav * rix
            for j in range(i, l + 1):
                rjx = px[l] - jx[j]
                rjy = py[l] - jy[j]
                val = m_l * (rix * rjx + riy * rjy) + inertias[l]
                M[i, j] += val
                if i != j:
                    M[j, i] += val
        for k in range(l + 1):
            for i in range(l + 1):
                a = k if k > i else i
                rax = px[l] - jx[a]
                ray = py[l] - jy[a]
                rix = px[l] - jx[i]
                riy = py[l] - jy[i]
                for j in range(l + 1):
                    b = k if k > j else j
                    rbx = px[l] - jx[b]
                    rby = py[l] - jy[b]
                    rjx = px[l] - jx[j]
                    rjy = py[l] - jy[j]
                    dM[k, i, j] += m_l * ((rax * rjy - ray * rjx)
                                          + (rbx * riy - rby * rix))

    # c_k = sum_ij (dM_i[k, j] - 0.5 dM_k[i, j]) v_i v_j
    c = np.zeros(dof)
    for k in range(dof):
        s = 0.0
        for i in range(dof):
            vi = v[i]
            for j in range(dof):
                s += (dM[i, k, j] - 0.5 * dM[k, i, j]) * vi * v[j]
        c[k] = s
    return M, c, g


@njit(cache=True)
def _spd_solve(M, b):
    """Solve M x = b for symmetric positive definite M of size 1..3."""
    n = M.shape[0]
    x = np.empty(n)
    if n == 1:
        x[0] = b[0] / M[0, 0]
        return x
    if n == 2:
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        x[0] = (b[0] * M[1, 1] - M[0, 1] * b[1]) / det
        x[1] = (M[0, 0] * b[1] - b[0] * M[1, 0]) / det
        return x
    if n == 3:
        a11 = M[0, 0]; a12 = M[0, 1]; a13 = M[0, 2]
        a22 = M[1, 1]; a23 = M[1, 2]; a33 = M[2, 2]
        c11 = a22 * a33 - a23 * a23
        c12 = a13 * a23 - a12 * a33
        c13 = a12 * a23 - a13 * a22
        det = a11 * c11 + a12 * c12 + a13 * c13
        c22 = a11 * a33 - a13 * a13
        c23 = a12 * a13 - a11 * a23
        c33 = a11 * a22 - a12 * a12
        x[0] = (c11 * b[0] + c12 * b[1] + c13 * b[2]) / det
        x[1] = (c12 * b[0] + c22 * b[1] + c23 * b[2]) / det
        x[2] = (c13 * b[0] + c23 * b[1] + c33 * b[2]) / det
        return x
    return np.linalg.solve(M, b)


@njit(cache=True)
def accel(kind, x, u, masses, lengths, coms, inertias, grav, damping):
    """Joint accelerations for state x = (q, v) under torque u."""
    dof = u.shape[0]
    q = x[:dof]
    v = x[dof:]
    if kind == KIND_DOUBLE_INTEGRATOR:
        a = np.empty(dof)
        for i in range(dof):
            a[i] = u[i] - damping[i] * v[i]
        return a
    M, c, g = _arm_terms(q, v, masses, lengths, coms, inertias, grav)
    rhs = np.empty(dof)
    for i in range(dof):
        rhs[i] = u[i] - c[i] - g[i] - damping[i] * v[i]
    return _spd_solve(M, rhs)


@njit(cache=True)
def vf(kind, x, u, masses, lengths, coms, inertias, grav, damping):
    dof = u.shape[0]
    dx = np.empty(2 * dof)
    a = accel(kind, x, u, masses, lengths, coms, inertias, grav, damping)
    for i in range(dof):
        dx[i] = x[dof + i]
        dx[dof + i] = a[i]
    return dx


@njit(cache=True)
def rk4_step(kind, x, u, dt, masses, lengths, coms, inertias, grav, damping):
    k1 = vf(kind, x, u, masses, lengths, coms, inertias, grav, damping)
    k2 = vf(kind, x + 0.5 * dt * k1, u, masses, lengths, coms, inertias, grav, damping)
    k3 = vf(kind, x + 0.5 * dt * k2, u, masses, lengths, coms, inertias, grav, damping)
    k4 = vf(kind, x + dt * k3, u, masses, lengths, coms, inertias, grav, damping)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def batch_vf(kind, X, U, masses, lengths, coms, inertias, grav, damping):
    B = X.shape[0]
    out = np.empty_like(X)
    for b in range(B):
        out[b] = vf(kind, X[b], U[b], masses, lengths, coms, inertias, grav, damping)
    return out


@njit(cache=True)
def batch_accel(kind, X, U, masses, lengths, coms, inertias, grav, damping):
    B = X.shape[0]
    dof = U.shape[1]
    out = np.empty((B, dof))
    for b in range(B):
        out[b] = accel(kind, X[b], U[b], masses, lengths, coms, inertias, grav, damping)
    return out


@njit(cache=True)
def batch_rk4(kind, X, U, dt, masses, lengths, coms, inertias, grav, damping):
    B = X.shape[0]
    out = np.empty_like(X)
    for b in range(B):
        out[b] = rk4_step(kind, X[b], U[b], dt, masses, lengths, coms, inertias, grav, damping)
    return out


@njit(cache=True)
def batch_arm_terms(Q, V, masses, lengths, coms, inertias, grav):
    B = Q.shape[0]
    dof = Q.shape[1]
    Ms = np.empty((B, dof, dof))
    cs = np.empty((B, dof))
    gs = np.empty((B, dof))
    for b in range(B):
        M, c, g = _arm_terms(Q[b], V[b], masses, lengths, coms, inertias, grav)
        Ms[b] = M
        cs[b] = c
        gs[b] = g
    return Ms, cs, gs


@njit(cache=True)
def _finite(x):
    for i in range(x.shape[0]):
        if not np.isfinite(x[i]):
            return False
    return True


@njit(cache=True)
def rollout_controls(kind, x0, us, dt, masses, lengths, coms, inertias, grav,
                     damping, div_norm):
    """Integrate a fixed control sequence. Returns (states, ok)."""
    N = us.shape[0]
    n = x0.shape[0]
    xs = np.zeros((N + 1, n))
    xs[0] = x0
    x = x0.copy()
    for k in range(N):
        x = rk4_step(kind, x, us[k], dt, masses, lengths, coms, inertias,
                     grav, damping)
        if not _finite(x) or np.sqrt(np.sum(x * x)) > div_norm:
            return xs, False
        xs[k + 1] = x
    return xs, True


@njit(cache=True)
def rollout_feedback(kind, xs_nom, us_nom, ks, Ks, alpha, dt, masses, lengths,
                     coms, inertias, grav, damping, div_norm):
    """Closed-loop rollout u = u_nom + alpha*k + K (x - x_nom).

    Returns (states, controls, ok); ok is False on non-finite values or a
    state norm beyond div_norm, in which case the arrays are only valid up
    to the failure index.
    """
    N = us_nom.shape[0]
    n = xs_nom.shape[1]
    m = us_nom.shape[1]
    xs = np.zeros((N + 1, n))
    us = np.zeros((N, m))
    xs[0] = xs_nom[0]
    x = xs_nom[0].copy()
    for kk in range(N):
        u = us_nom[kk] + alpha * ks[kk] + Ks[kk] @ (x - xs_nom[kk])
        us[kk] = u
        x = rk4_step(kind, x, u, dt, masses, lengths, coms, inertias, grav,
                     damping)
        if not _finite(x) or np.sqrt(np.sum(x * x)) > div_norm:
            return xs, us, False
        xs[kk + 1] = x
    return xs, us, True


@njit(cache=True)
def _stage_cost(kind, x, u, r_time, r_control, r_accel, uf, masses, lengths,
                coms, inertias, grav, damping):
    a = accel(kind, x, u, masses, lengths, coms, inertias, grav, damping)
    s = r_time
    for j in range(u.shape[0]):
        du = u[j] - uf[j]
        s += r_control * du * du
    for j in range(a.shape[0]):
        s += r_accel * a[j] * a[j]
    return s


@njit(cache=True)
def rollout_cost_controls(kind, x0, us, dt, r_time, r_control, r_accel,
                          r_terminal, xf, uf, masses, lengths, coms, inertias,
                          grav, damping, div_norm):
    """Open-loop rollout returning (states, total cost, ok)."""
    N = us.shape[0]
    n = x0.shape[0]
    xs = np.zeros((N + 1, n))
    xs[0] = x0
    x = x0.copy()
    J = 0.0
    for k in range(N):
        J += dt * _stage_cost(kind, x, us[k], r_time, r_control, r_accel, uf,
                              masses, lengths, coms, inertias, grav, damping)
        x = rk4_step(kind, x, us[k], dt, masses, lengths, coms, inertias,
                     grav, damping)
        if not _finite(x) or np.sqrt(np.sum(x * x)) > div_norm:
            return xs, np.inf, False
        xs[k + 1] = x
    for j in range(n):
        dx = x[j] - xf[j]
        J += r_terminal * dx * dx
    return xs, J, True


@njit(cache=True)
def rollout_cost_feedback(kind, xs_nom, us_nom, ks, Ks, alpha, dt, r_time,
                          r_control, r_accel, r_terminal, xf, uf, masses,
                          lengths, coms, inertias, grav, damping, div_norm):
    """Line-search rollout u = u_nom + alpha*k + K (x - x_nom) with cost."""
    N = us_nom.shape[0]
    n = xs_nom.shape[1]
    m = us_nom.shape[1]
    xs = np.zeros((N + 1, n))
    us = np.zeros((N, m))
    xs[0] = xs_nom[0]
    x = xs_nom[0].copy()
    J = 0.0
    for k in range(N):
        u = us_nom[k] + alpha * ks[k] + Ks[k] @ (x - xs_nom[k])
        us[k] = u
        J += dt * _stage_cost(kind, x, u, r_time, r_control, r_accel, uf,
                              masses, lengths, coms, inertias, grav, damping)
        x = rk4_step(kind, x, u, dt, masses, lengths, coms, inertias, grav,
                     damping)
        if not _finite(x) or np.sqrt(np.sum(x * x)) > div_norm:
            return xs, us, np.inf, False
        xs[k + 1] = x
    for j in range(n):
        dx = x[j] - xf[j]
        J += r_terminal * dx * dx
    return xs, us, J, True


@njit(cache=True)
def ddp_prep(kind, xs, us, dt, r_control, r_accel, uf, masses, lengths, coms,
             inertias, grav, damping):
    """Per-knot discrete dynamics Jacobians and stage cost quadratics.

    The dynamics Jacobians are central differences of the rk4 step with a
    norm-scaled step; the cost quadratics mirror dynamics.cost_quadratics
    (Gauss-Newton gradient and curvature from the differenced acceleration
    Jacobian) and come back already scaled by dt. Fusing both into one pass
    keeps the per iteration cost of the solver in compiled code.
    """
    N = us.shape[0]
    n = xs.shape[1]
    m = us.shape[1]
    Fx = np.empty((N, n, n))
    Fu = np.empty((N, n, m))
    lx = np.empty((N, n))
    lu = np.empty((N, m))
    lxx = np.empty((N, n, n))
    lxu = np.empty((N, n, m))
    luu = np.empty((N, m, m))
    hc = 1e-6
    # Step sizes: the rk4 step is close to affine in the control (the torque
    # enters the acceleration linearly), so hu can sit far above the usual
    # sqrt-eps compromise; that matters because the position rows of Fu are
    # O(dt^2) and the terminal weight amplifies their rounding noise by 1e5.
    for k in range(N):
        x = xs[k]
        u = us[k].copy()
        hx = 1e-5 * max(1.0, np.sqrt(np.sum(x * x)))
        xp = x.copy()
        for j in range(n):
            xj = x[j]
            xp[j] = xj + hx
            fp = rk4_step(kind, xp, u, dt, masses, lengths, coms, inertias,
                          grav, damping)
            xp[j] = xj - hx
            fm = rk4_step(kind, xp, u, dt, masses, lengths, coms, inertias,
                          grav, damping)
            xp[j] = xj
            for r in range(n):
                Fx[k, r, j] = (fp[r] - fm[r]) / (2.0 * hx)
        hu = 1e-3 * max(1.0, np.sqrt(np.sum(u * u)))
        up = u.copy()
        for j in range(m):
            uj = u[j]
            up[j] = uj + hu
            fp = rk4_step(kind, x, up, dt, masses, lengths, coms, inertias,
                          grav, damping)
            up[j] = uj - hu
            fm = rk4_step(kind, x, up, dt, masses, lengths, coms, inertias,
                          grav, damping)
            up[j] = uj
            for r in range(n):
                Fu[k, r, j] = (fp[r] - fm[r]) / (2.0 * hu)

        a0 = accel(kind, x, u, masses, lengths, coms, inertias, grav, damping)
        ax = np.empty((m, n))
        au = np.empty((m, m))
        for j in range(n):
            xj = x[j]
            xp[j] = xj + hc
            ap = accel(kind, xp, u, masses, lengths, coms, inertias, grav,
                       damping)
            xp[j] = xj - hc
            am = accel(kind, xp, u, masses, lengths, coms, inertias, grav,
                       damping)
            xp[j] = xj
            s = 0.0
            for r in range(m):
                ax[r, j] = (ap[r] - am[r]) / (2.0 * hc)
                s += a0[r] * ax[r, j]
            lx[k, j] = dt * 2.0 * r_accel * s
        for j in range(m):
            uj = u[j]
            up[j] = uj + hc
            ap = accel(kind, x, up, masses, lengths, coms, inertias, grav,
                       damping)
            up[j] = uj - hc
            am = accel(kind, x, up, masses, lengths, coms, inertias, grav,
                       damping)
            up[j] = uj
            s = 0.0
            for r in range(m):
                au[r, j] = (ap[r] - am[r]) / (2.0 * hc)
                s += a0[r] * au[r, j]
            lu[k, j] = dt * (2.0 * r_control * (uj - uf[j])
                             + 2.0 * r_accel * s)
        for i in range(n):
            for j in range(n):
                s = 0.0
                for r in range(m):
                    s += ax[r, i] * ax[r, j]
                lxx[k, i, j] = dt * 2.0 * r_accel * s
            for j in range(m):
                s = 0.0
                for r in range(m):
                    s += ax[r, i] * au[r, j]
                lxu[k, i, j] = dt * 2.0 * r_accel * s
        for i in range(m):
            for j in range(m):
                s = 0.0
                for r in range(m):
                    s += au[r, i] * au[r, j]
                luu[k, i, j] = dt * 2.0 * r_accel * s
            luu[k, i, i] += dt * 2.0 * r_control
    return Fx, Fu, lx, lu, lxx, lxu, luu


@njit(cache=True)
def _chol_factor(Q):
    """Cholesky factor of Q; ok=False when Q is not positive definite."""
    n = Q.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = Q[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return L, False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L, True


@njit(cache=True)
def _chol_solve(L, b):
    n = L.shape[0]
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@njit(cache=True)
def ddp_backward(Fx, Fu, lx, lu, lxx, lxu, luu, mx, mxx, reg):
    """One backward value sweep at a fixed regularisation.

    The Levenberg term enters through the value curvature: gains are built
    from Q terms formed with Vxx + reg I, while the value recursion itself
    keeps the unregularised Q terms. Additive control-space damping at the
    same magnitude would bias the feedforward visibly at loose tolerances.

    Returns (k, K, costates, dV1, dV2, ok); ok=False when some regularised
    control Hessian is not positive definite.
    """
    N = Fx.shape[0]
    n = Fx.shape[1]
    m = Fu.shape[2]
    ks = np.zeros((N, m))
    Ks = np.zeros((N, m, n))
    Vxs = np.zeros((N + 1, n))
    Vx = mx.copy()
    Vxx = mxx.copy()
    for j in range(n):
        Vxs[N, j] = Vx[j]
    dV1 = 0.0
    dV2 = 0.0
    eye_reg = reg * np.eye(n)
    for k in range(N - 1, -1, -1):
        fx = Fx[k]
        fu = Fu[k]
        fxT = fx.T.copy()
        fuT = fu.T.copy()
        Qx = lx[k] + fxT @ Vx
        Qu = lu[k] + fuT @ Vx
        Qxx = lxx[k] + fxT @ (Vxx @ fx)
        Qux = lxu[k].T.copy() + fuT @ (Vxx @ fx)
        Quu = luu[k] + fuT @ (Vxx @ fu)
        Vxx_r = Vxx + eye_reg
        Qux_r = lxu[k].T.copy() + fuT @ (Vxx_r @ fx)
        Quu_r = luu[k] + fuT @ (Vxx_r @ fu)
        L, ok = _chol_factor(Quu_r)
        if not ok:
            return ks, Ks, Vxs, 0.0, 0.0, False
        kff = -_chol_solve(L, Qu)
        K = np.empty((m, n))
        for j in range(n):
            col = -_chol_solve(L, Qux_r[:, j].copy())
            for r in range(m):
                K[r, j] = col[r]
        dV1 += kff @ Qu
        dV2 += 0.5 * (kff @ (Quu_r @ kff))
        KT = K.T.copy()
        QuxT = Qux.T.copy()
        Vx = Qx + KT @ (Quu @ kff) + KT @ Qu + QuxT @ kff
        Vxx = Qxx + KT @ (Quu @ K) + KT @ Qux + QuxT @ K
        Vxx = 0.5 * (Vxx + Vxx.T)
        for j in range(n):
            Vxs[k, j] = Vx[j]
        ks[k] = kff
        Ks[k] = K
    return ks, Ks, Vxs, dV1, dV2, True
