"""Compiled numerical kernels.

Hot paths of the simulator: the column ODE right-hand side, its transposed
Jacobian-vector products, the neural policy forward and backward maps,
fixed-step RK4 closed-loop rollouts with their discrete-adjoint reverse
sweeps, and the scenario stepping loops. Everything here is numba nopython
code on flat float64 arrays. The readable reference implementations live in
``colflux.column`` and ``colflux.policy``; the test suite pins the two routes
against each other.

Conventions:
    state z: [M_1..M_NT, x_1..x_NT], length 2 * n_t
    cp: packed column constants, see CP_* indices (ColumnParams.pack order)
    cost_c: [x_bottom_set, x_top_set, move_weight, lt_nom, vb_nom]
    theta: flat policy parameters [H (ni), W0 (w x ni, row-major), b0 (w),
        W1 (2 x w, row-major), b1 (2)]
    sel: int64 measurement slots (0-based); slots n_t..n_t+4 are F, T_F,
        q_F, M_1, M_NT
    n_f: 0-based feed stage index (stage N_F has array index N_F - 1)

Status codes returned by integrating kernels: 0 for success, otherwise the
1-based stage number whose holdup fell below the singularity guard.
"""

import math

import numpy as np
from numba import njit

CP_ALPHA = 0
CP_TAU_L = 1
CP_LAM = 2
CP_M0 = 3
CP_L0B = 4
CP_L0A = 5
CP_V0 = 6
CP_TBL = 7
CP_TBH = 8
CP_KD = 9
CP_KB = 10
CP_D0 = 11
CP_B0 = 12
CP_UMAX_LT = 13
CP_UMAX_VB = 14
CP_LT_NOM = 15
CP_VB_NOM = 16

MIN_HOLDUP = 1e-6


@njit(cache=True, nogil=True)
def rhs(z, lt, vb, F, zF, qF, cp, n_t, n_f, out):
    """Column ODE right-hand side; writes [dM, dx] into out."""
    n = n_t
    alpha = cp[CP_ALPHA]
    tau = cp[CP_TAU_L]
    lam = cp[CP_LAM]
    m0 = cp[CP_M0]

    for j in range(n):
        if z[j] < MIN_HOLDUP:
            return j + 1

    y = np.empty(n)
    for j in range(n):
        xj = z[n + j]
        y[j] = alpha * xj / (1.0 + (alpha - 1.0) * xj)

    vadd = (1.0 - qF) * F
    V = np.empty(n)
    for j in range(n - 1):
        V[j] = vb + vadd if j >= n_f else vb
    V[n - 1] = 0.0

    L = np.empty(n)
    L[0] = cp[CP_L0B] + (z[0] - m0) / tau
    for j in range(1, n - 1):
        l0 = cp[CP_L0B] if j <= n_f else cp[CP_L0A]
        L[j] = l0 + (z[j] - m0) / tau + lam * (V[j - 1] - cp[CP_V0])
    L[n - 1] = lt

    D = cp[CP_D0] + cp[CP_KD] * (z[n - 1] - m0)
    B = cp[CP_B0] + cp[CP_KB] * (z[0] - m0)

    dm = L[1] - V[0] - B
    dmx = L[1] * z[n + 1] - V[0] * y[0] - B * z[n]
    out[0] = dm
    out[n] = (dmx - z[n] * dm) / z[0]

    for j in range(1, n - 1):
        dm = L[j + 1] - L[j] + V[j - 1] - V[j]
        dmx = (
            L[j + 1] * z[n + j + 1]
            + V[j - 1] * y[j - 1]
            - L[j] * z[n + j]
            - V[j] * y[j]
        )
        if j == n_f:
            dm += F
            dmx += F * zF
        out[j] = dm
        out[n + j] = (dmx - z[n + j] * dm) / z[j]

    dm = -L[n - 1] + V[n - 2] - D
    dmx = V[n - 2] * y[n - 2] - (L[n - 1] + D) * z[2 * n - 1]
    out[n - 1] = dm
    out[2 * n - 1] = (dmx - z[2 * n - 1] * dm) / z[n - 1]
    return 0


@njit(cache=True, nogil=True)
def rhs_vjp(z, lt, vb, F, zF, qF, cp, n_t, n_f, wbar, zbar, ubar):
    """Transposed-Jacobian products of the RHS.

    Given the cotangent wbar on the RHS output [dM, dx], overwrite
    zbar (2 * n_t) with (d rhs / d z)^T wbar and ubar (2,) with
    (d rhs / d [lt, vb])^T wbar. Recomputes the forward pass internally.
    """
    n = n_t
    alpha = cp[CP_ALPHA]
    tau = cp[CP_TAU_L]
    lam = cp[CP_LAM]
    m0 = cp[CP_M0]

    # Forward recompute.
    y = np.empty(n)
    for j in range(n):
        xj = z[n + j]
        y[j] = alpha * xj / (1.0 + (alpha - 1.0) * xj)

    vadd = (1.0 - qF) * F
    V = np.empty(n)
    for j in range(n - 1):
        V[j] = vb + vadd if j >= n_f else vb
    V[n - 1] = 0.0

    L = np.empty(n)
    L[0] = cp[CP_L0B] + (z[0] - m0) / tau
    for j in range(1, n - 1):
        l0 = cp[CP_L0B] if j <= n_f else cp[CP_L0A]
        L[j] = l0 + (z[j] - m0) / tau + lam * (V[j - 1] - cp[CP_V0])
    L[n - 1] = lt

    D = cp[CP_D0] + cp[CP_KD] * (z[n - 1] - m0)
    B = cp[CP_B0] + cp[CP_KB] * (z[0] - m0)

    dM = np.empty(n)
    dMx = np.empty(n)
    dM[0] = L[1] - V[0] - B
    dMx[0] = L[1] * z[n + 1] - V[0] * y[0] - B * z[n]
    for j in range(1, n - 1):
        dm = L[j + 1] - L[j] + V[j - 1] - V[j]
        dmx = (
            L[j + 1] * z[n + j + 1]
            + V[j - 1] * y[j - 1]
            - L[j] * z[n + j]
            - V[j] * y[j]
        )
        if j == n_f:
            dm += F
            dmx += F * zF
        dM[j] = dm
        dMx[j] = dmx
    dM[n - 1] = -L[n - 1] + V[n - 2] - D
    dMx[n - 1] = V[n - 2] * y[n - 2] - (L[n - 1] + D) * z[2 * n - 1]

    # Reverse pass. Cotangents on the balance outputs first: the quotient
    # dx_j = (dMx_j - x_j dM_j) / M_j folds wx into wdMx/wdM and seeds the
    # direct x and M contributions.
    Lbar = np.zeros(n)
    Vbar = np.zeros(n)
    ybar = np.zeros(n)
    Mbar = np.zeros(n)
    xbar = np.zeros(n)
    Dbar = 0.0
    Bbar = 0.0

    wdM = np.empty(n)
    wdMx = np.empty(n)
    for j in range(n):
        wm = wbar[j]
        wx = wbar[n + j]
        Mj = z[j]
        wdMx[j] = wx / Mj
        wdM[j] = wm - wx * z[n + j] / Mj
        xbar[j] += -wx * dM[j] / Mj
        Mbar[j] += -wx * (dMx[j] - z[n + j] * dM[j]) / (Mj * Mj)

    # Reboiler row.
    Lbar[1] += wdM[0] + wdMx[0] * z[n + 1]
    Vbar[0] += -wdM[0] - wdMx[0] * y[0]
    Bbar += -wdM[0] - wdMx[0] * z[n]
    xbar[1] += wdMx[0] * L[1]
    xbar[0] += -wdMx[0] * B
    ybar[0] += -wdMx[0] * V[0]

    # Tray rows.
    for j in range(1, n - 1):
        wm = wdM[j]
        wmx = wdMx[j]
        Lbar[j + 1] += wm + wmx * z[n + j + 1]
        Lbar[j] += -wm - wmx * z[n + j]
        Vbar[j - 1] += wm + wmx * y[j - 1]
        Vbar[j] += -wm - wmx * y[j]
        xbar[j + 1] += wmx * L[j + 1]
        xbar[j] += -wmx * L[j]
        ybar[j - 1] += wmx * V[j - 1]
        ybar[j] += -wmx * V[j]

    # Condenser row.
    wm = wdM[n - 1]
    wmx = wdMx[n - 1]
    Lbar[n - 1] += -wm - wmx * z[2 * n - 1]
    Vbar[n - 2] += wm + wmx * y[n - 2]
    Dbar += -wm - wmx * z[2 * n - 1]
    xbar[n - 1] += -wmx * (L[n - 1] + D)
    ybar[n - 2] += wmx * V[n - 2]

    # Constitutive pullbacks. L feeds V through the K2 term, so L first.
    for j in range(1, n - 1):
        Mbar[j] += Lbar[j] / tau
        Vbar[j - 1] += lam * Lbar[j]
    ltbar = Lbar[n - 1]
    Mbar[n - 1] += cp[CP_KD] * Dbar
    Mbar[0] += cp[CP_KB] * Bbar
    vbbar = 0.0
    for j in range(n - 1):
        vbbar += Vbar[j]
    for j in range(n):
        xj = z[n + j]
        den = 1.0 + (alpha - 1.0) * xj
        xbar[j] += ybar[j] * alpha / (den * den)

    for j in range(n):
        zbar[j] = Mbar[j]
        zbar[n + j] = xbar[j]
    ubar[0] = ltbar
    ubar[1] = vbbar


@njit(cache=True, nogil=True)
def _policy_eval(z, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u):
    """Policy forward pass; fills zeta, g, hid and the control u (2,)."""
    tbl = cp[CP_TBL]
    tbh = cp[CP_TBH]
    dT = tbh - tbl
    for i in range(ni):
        s = sel[i]
        if s < n_t:
            v = (tbh - z[n_t + s] * dT + eta[s] - tbl) / dT
        elif s == n_t:
            v = F + eta[s]
        elif s == n_t + 1:
            v = (tbh - zF * dT + eta[s] - tbl) / dT
        elif s == n_t + 2:
            v = qF + eta[s]
        elif s == n_t + 3:
            v = z[0] + eta[s]
        else:
            v = z[n_t - 1] + eta[s]
        zeta[i] = v
        g[i] = theta[i] * v

    o_w0 = ni
    o_b0 = ni + w * ni
    o_w1 = o_b0 + w
    o_b1 = o_w1 + 2 * w
    for k in range(w):
        acc = theta[o_b0 + k]
        base = o_w0 + k * ni
        for i in range(ni):
            acc += theta[base + i] * g[i]
        hid[k] = 1.0 / (1.0 + math.exp(-acc))
    for c in range(2):
        acc = theta[o_b1 + c]
        base = o_w1 + c * w
        for k in range(w):
            acc += theta[base + k] * hid[k]
        s1 = 1.0 / (1.0 + math.exp(-acc))
        u[c] = (cp[CP_UMAX_LT] if c == 0 else cp[CP_UMAX_VB]) * s1


@njit(cache=True, nogil=True)
def _policy_vjp(
    z, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, ubar, gth, zbar, zeta, g, hid, gb, u
):
    """Pull a control cotangent back to theta and the state.

    Accumulates theta contributions into gth and state contributions into
    zbar (2 * n_t). Recomputes the forward pass internally using the
    provided scratch buffers (zeta, g, hid, gb, u).
    """
    _policy_eval(z, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u)

    o_w0 = ni
    o_b0 = ni + w * ni
    o_w1 = o_b0 + w
    o_b1 = o_w1 + 2 * w

    for i in range(ni):
        gb[i] = 0.0

    for c in range(2):
        umax = cp[CP_UMAX_LT] if c == 0 else cp[CP_UMAX_VB]
        s1 = u[c] / umax
        a1b = ubar[c] * umax * s1 * (1.0 - s1)
        gth[o_b1 + c] += a1b
        base = o_w1 + c * w
        for k in range(w):
            gth[base + k] += a1b * hid[k]
    for k in range(w):
        hb = 0.0
        for c in range(2):
            umax = cp[CP_UMAX_LT] if c == 0 else cp[CP_UMAX_VB]
            s1 = u[c] / umax
            hb += theta[o_w1 + c * w + k] * (ubar[c] * umax * s1 * (1.0 - s1))
        a0b = hb * hid[k] * (1.0 - hid[k])
        gth[o_b0 + k] += a0b
        base = o_w0 + k * ni
        for i in range(ni):
            gth[base + i] += a0b * g[i]
            gb[i] += theta[base + i] * a0b

    for i in range(ni):
        gth[i] += gb[i] * zeta[i]
        zetab = gb[i] * theta[i]
        s = sel[i]
        if s < n_t:
            zbar[n_t + s] += -zetab
        elif s == n_t + 3:
            zbar[0] += zetab
        elif s == n_t + 4:
            zbar[n_t - 1] += zetab
        # F, T_F and q_F slots carry no state dependency.


@njit(cache=True, nogil=True)
def _stage_cost(z, u0, u1, cost_c, n_t):
    db = z[n_t] - cost_c[0]
    dd = z[2 * n_t - 1] - cost_c[1]
    dl = u0 - cost_c[3]
    dv = u1 - cost_c[4]
    return db * db + dd * dd + cost_c[2] * (dv * dv + dl * dl)


@njit(cache=True, nogil=True)
def _cl_step(
    z, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, n_f, h, fac_lt, fac_vb,
    wk, zeta, g, hid, ub, u1, z_next,
):
    """One closed-loop RK4 step; the policy is re-evaluated per sub-stage.

    u1 receives the commanded control at the step's base state. The plant
    sees the commanded control scaled by (fac_lt, fac_vb). wk provides
    scratch rows: 0..2 sub-states, 3..6 slopes.
    """
    n2 = 2 * n_t
    z2 = wk[0]
    z3 = wk[1]
    z4 = wk[2]
    k1 = wk[3]
    k2 = wk[4]
    k3 = wk[5]
    k4 = wk[6]

    _policy_eval(z, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u1)
    st = rhs(z, fac_lt * u1[0], fac_vb * u1[1], F, zF, qF, cp, n_t, n_f, k1)
    if st != 0:
        return st
    for j in range(n2):
        z2[j] = z[j] + 0.5 * h * k1[j]
    _policy_eval(z2, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, ub)
    st = rhs(z2, fac_lt * ub[0], fac_vb * ub[1], F, zF, qF, cp, n_t, n_f, k2)
    if st != 0:
        return st
    for j in range(n2):
        z3[j] = z[j] + 0.5 * h * k2[j]
    _policy_eval(z3, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, ub)
    st = rhs(z3, fac_lt * ub[0], fac_vb * ub[1], F, zF, qF, cp, n_t, n_f, k3)
    if st != 0:
        return st
    for j in range(n2):
        z4[j] = z[j] + h * k3[j]
    _policy_eval(z4, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, ub)
    st = rhs(z4, fac_lt * ub[0], fac_vb * ub[1], F, zF, qF, cp, n_t, n_f, k4)
    if st != 0:
        return st
    h6 = h / 6.0
    for j in range(n2):
        z_next[j] = z[j] + h6 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return 0


@njit(cache=True, nogil=True)
def policy_rollout_record(
    z0, feedvec, eta, sel, theta, ni, w, cp, cost_c, n_t, n_f, h, n_steps,
    Z, U, LV,
):
    """Closed-loop rollout recording states, controls and stage cost.

    Z: (n_steps+1, 2 n_t), U: (n_steps+1, 2), LV: (n_steps+1,). Returns
    (status, J) with J the trapezoid quadrature of LV.
    """
    n2 = 2 * n_t
    F = feedvec[0]
    zF = feedvec[1]
    qF = feedvec[2]
    wk = np.empty((7, n2))
    zeta = np.empty(ni)
    g = np.empty(ni)
    hid = np.empty(w)
    ub = np.empty(2)
    u1 = np.empty(2)

    for j in range(n2):
        Z[0, j] = z0[j]
    J = 0.0
    for k in range(n_steps):
        st = _cl_step(
            Z[k], F, zF, qF, eta, sel, theta, ni, w, cp, n_t, n_f, h, 1.0, 1.0,
            wk, zeta, g, hid, ub, u1, Z[k + 1],
        )
        if st != 0:
            return st, J
        U[k, 0] = u1[0]
        U[k, 1] = u1[1]
        lv = _stage_cost(Z[k], u1[0], u1[1], cost_c, n_t)
        LV[k] = lv
        J += h * (0.5 if k == 0 else 1.0) * lv
    _policy_eval(
        Z[n_steps], F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u1
    )
    U[n_steps, 0] = u1[0]
    U[n_steps, 1] = u1[1]
    lv = _stage_cost(Z[n_steps], u1[0], u1[1], cost_c, n_t)
    LV[n_steps] = lv
    if n_steps > 0:
        J += h * 0.5 * lv
    return 0, J


@njit(cache=True, nogil=True)
def policy_rollout_ckpt(
    z0, feedvec, eta, sel, theta, ni, w, cp, cost_c, n_t, n_f, h, n_steps,
    ckpt_every, ZC,
):
    """Closed-loop rollout storing only checkpoints.

    ZC: (n_ckpt + 1, 2 n_t) where row i holds the state at step
    min(i * ckpt_every, n_steps). Returns (status, J).
    """
    n2 = 2 * n_t
    F = feedvec[0]
    zF = feedvec[1]
    qF = feedvec[2]
    wk = np.empty((7, n2))
    zeta = np.empty(ni)
    g = np.empty(ni)
    hid = np.empty(w)
    ub = np.empty(2)
    u1 = np.empty(2)
    z = np.empty(n2)
    zn = np.empty(n2)

    for j in range(n2):
        z[j] = z0[j]
        ZC[0, j] = z0[j]
    J = 0.0
    for k in range(n_steps):
        st = _cl_step(
            z, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, n_f, h, 1.0, 1.0,
            wk, zeta, g, hid, ub, u1, zn,
        )
        if st != 0:
            return st, J
        lv = _stage_cost(z, u1[0], u1[1], cost_c, n_t)
        J += h * (0.5 if k == 0 else 1.0) * lv
        for j in range(n2):
            z[j] = zn[j]
        if (k + 1) % ckpt_every == 0:
            row = (k + 1) // ckpt_every
            for j in range(n2):
                ZC[row, j] = z[j]
    _policy_eval(z, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u1)
    lv = _stage_cost(z, u1[0], u1[1], cost_c, n_t)
    if n_steps > 0:
        J += h * 0.5 * lv
    row = ZC.shape[0] - 1
    for j in range(n2):
        ZC[row, j] = z[j]
    return 0, J


@njit(cache=True, nogil=True)
def policy_adjoint_terminal(
    zN, feedvec, eta, sel, theta, ni, w, cp, cost_c, n_t, wq, lam, gth,
):
    """Seed the adjoint with the quadrature cotangent at the final node."""
    F = feedvec[0]
    zF = feedvec[1]
    qF = feedvec[2]
    zeta = np.empty(ni)
    g = np.empty(ni)
    hid = np.empty(w)
    gb = np.empty(ni)
    u = np.empty(2)
    ub = np.empty(2)
    _policy_eval(zN, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u)
    ub[0] = wq * 2.0 * cost_c[2] * (u[0] - cost_c[3])
    ub[1] = wq * 2.0 * cost_c[2] * (u[1] - cost_c[4])
    _policy_vjp(
        zN, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, ub, gth, lam,
        zeta, g, hid, gb, u,
    )
    lam[n_t] += wq * 2.0 * (zN[n_t] - cost_c[0])
    lam[2 * n_t - 1] += wq * 2.0 * (zN[2 * n_t - 1] - cost_c[1])


@njit(cache=True, nogil=True)
def policy_adjoint_segment(
    z_s0, s0, s1, n_steps, feedvec, eta, sel, theta, ni, w, cp, cost_c,
    n_t, n_f, h, lam, gth, seg,
):
    """Reverse sweep over forward steps s0..s1-1.

    Recomputes the states of the segment from the checkpoint z_s0 into seg
    ((s1 - s0 + 1) x 2 n_t), then pulls lam back step by step, fusing the
    trapezoid quadrature cotangent of each step's base node. Updates lam
    and gth in place. Returns status.
    """
    n2 = 2 * n_t
    F = feedvec[0]
    zF = feedvec[1]
    qF = feedvec[2]
    wk = np.empty((7, n2))
    zeta = np.empty(ni)
    g = np.empty(ni)
    hid = np.empty(w)
    gb = np.empty(ni)
    ub = np.empty(2)
    u1 = np.empty(2)
    u2 = np.empty(2)
    u3 = np.empty(2)
    u4 = np.empty(2)
    vu = np.empty(2)
    k1b = np.empty(n2)
    k2b = np.empty(n2)
    k3b = np.empty(n2)
    k4b = np.empty(n2)
    zb = np.empty(n2)
    vz = np.empty(n2)

    nseg = s1 - s0
    for j in range(n2):
        seg[0, j] = z_s0[j]
    for i in range(nseg):
        st = _cl_step(
            seg[i], F, zF, qF, eta, sel, theta, ni, w, cp, n_t, n_f, h, 1.0, 1.0,
            wk, zeta, g, hid, ub, u1, seg[i + 1],
        )
        if st != 0:
            return st

    z2 = wk[0]
    z3 = wk[1]
    z4 = wk[2]
    k1 = wk[3]
    k2 = wk[4]
    k3 = wk[5]
    k4 = wk[6]
    for k in range(s1 - 1, s0 - 1, -1):
        z1 = seg[k - s0]
        # Recompute the sub-stages of step k.
        _policy_eval(z1, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u1)
        rhs(z1, u1[0], u1[1], F, zF, qF, cp, n_t, n_f, k1)
        for j in range(n2):
            z2[j] = z1[j] + 0.5 * h * k1[j]
        _policy_eval(z2, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u2)
        rhs(z2, u2[0], u2[1], F, zF, qF, cp, n_t, n_f, k2)
        for j in range(n2):
            z3[j] = z1[j] + 0.5 * h * k2[j]
        _policy_eval(z3, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u3)
        rhs(z3, u3[0], u3[1], F, zF, qF, cp, n_t, n_f, k3)
        for j in range(n2):
            z4[j] = z1[j] + h * k3[j]
        _policy_eval(z4, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u4)

        # Reverse through z' = z1 + h/6 (k1 + 2 k2 + 2 k3 + k4).
        h6 = h / 6.0
        for j in range(n2):
            lj = lam[j]
            k1b[j] = h6 * lj
            k2b[j] = 2.0 * h6 * lj
            k3b[j] = 2.0 * h6 * lj
            k4b[j] = h6 * lj
            zb[j] = lj

        # k4 = G(z4): pull back, feed z4 = z1 + h k3.
        rhs_vjp(z4, u4[0], u4[1], F, zF, qF, cp, n_t, n_f, k4b, vz, vu)
        _policy_vjp(
            z4, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, vu, gth, vz,
            zeta, g, hid, gb, ub,
        )
        for j in range(n2):
            zb[j] += vz[j]
            k3b[j] += h * vz[j]
        # k3 = G(z3), z3 = z1 + h/2 k2.
        rhs_vjp(z3, u3[0], u3[1], F, zF, qF, cp, n_t, n_f, k3b, vz, vu)
        _policy_vjp(
            z3, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, vu, gth, vz,
            zeta, g, hid, gb, ub,
        )
        for j in range(n2):
            zb[j] += vz[j]
            k2b[j] += 0.5 * h * vz[j]
        # k2 = G(z2), z2 = z1 + h/2 k1.
        rhs_vjp(z2, u2[0], u2[1], F, zF, qF, cp, n_t, n_f, k2b, vz, vu)
        _policy_vjp(
            z2, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, vu, gth, vz,
            zeta, g, hid, gb, ub,
        )
        for j in range(n2):
            zb[j] += vz[j]
            k1b[j] += 0.5 * h * vz[j]
        # k1 = G(z1), fused with the quadrature cotangent at node k.
        wq = h * (0.5 if k == 0 else 1.0)
        rhs_vjp(z1, u1[0], u1[1], F, zF, qF, cp, n_t, n_f, k1b, vz, vu)
        vu[0] += wq * 2.0 * cost_c[2] * (u1[0] - cost_c[3])
        vu[1] += wq * 2.0 * cost_c[2] * (u1[1] - cost_c[4])
        _policy_vjp(
            z1, F, zF, qF, eta, sel, theta, ni, w, cp, n_t, vu, gth, vz,
            zeta, g, hid, gb, ub,
        )
        for j in range(n2):
            zb[j] += vz[j]
        zb[n_t] += wq * 2.0 * (z1[n_t] - cost_c[0])
        zb[2 * n_t - 1] += wq * 2.0 * (z1[2 * n_t - 1] - cost_c[1])
        for j in range(n2):
            lam[j] = zb[j]
    return 0


@njit(cache=True, nogil=True)
def _rk4_const_step(z, u0, u1, F, zF, qF, cp, n_t, n_f, h, wk, z_next):
    """One RK4 step under constant controls. wk rows 0..3 are scratch."""
    n2 = 2 * n_t
    k1 = wk[0]
    k2 = wk[1]
    k3 = wk[2]
    k4 = wk[3]
    zt = wk[4]
    st = rhs(z, u0, u1, F, zF, qF, cp, n_t, n_f, k1)
    if st != 0:
        return st
    for j in range(n2):
        zt[j] = z[j] + 0.5 * h * k1[j]
    st = rhs(zt, u0, u1, F, zF, qF, cp, n_t, n_f, k2)
    if st != 0:
        return st
    for j in range(n2):
        zt[j] = z[j] + 0.5 * h * k2[j]
    st = rhs(zt, u0, u1, F, zF, qF, cp, n_t, n_f, k3)
    if st != 0:
        return st
    for j in range(n2):
        zt[j] = z[j] + h * k3[j]
    st = rhs(zt, u0, u1, F, zF, qF, cp, n_t, n_f, k4)
    if st != 0:
        return st
    h6 = h / 6.0
    for j in range(n2):
        z_next[j] = z[j] + h6 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return 0


@njit(cache=True, nogil=True)
def pw_rollout(z0, feedvec, useq, spi, cp, cost_c, n_t, n_f, h, n_steps, Z):
    """Rollout under piecewise-constant controls, storing the full tape.

    useq: (n_intervals, 2); grid node k takes the control of interval
    k // spi (the final node belongs to the last interval). Returns
    (status, J).
    """
    n2 = 2 * n_t
    F = feedvec[0]
    zF = feedvec[1]
    qF = feedvec[2]
    n_iv = useq.shape[0]
    wk = np.empty((5, n2))

    for j in range(n2):
        Z[0, j] = z0[j]
    J = 0.0
    for k in range(n_steps):
        iv = min(k // spi, n_iv - 1)
        u0 = useq[iv, 0]
        u1 = useq[iv, 1]
        J += h * (0.5 if k == 0 else 1.0) * _stage_cost(Z[k], u0, u1, cost_c, n_t)
        st = _rk4_const_step(Z[k], u0, u1, F, zF, qF, cp, n_t, n_f, h, wk, Z[k + 1])
        if st != 0:
            return st, J
    if n_steps > 0:
        iv = min((n_steps - 1) // spi, n_iv - 1)
        J += h * 0.5 * _stage_cost(
            Z[n_steps], useq[iv, 0], useq[iv, 1], cost_c, n_t
        )
    return 0, J


@njit(cache=True, nogil=True)
def pw_adjoint(Z, feedvec, useq, spi, cp, cost_c, n_t, n_f, h, n_steps, ubar):
    """Reverse sweep of pw_rollout; overwrites ubar (n_intervals, 2)."""
    n2 = 2 * n_t
    F = feedvec[0]
    zF = feedvec[1]
    qF = feedvec[2]
    n_iv = useq.shape[0]
    wk = np.empty((5, n2))
    z2 = np.empty(n2)
    z3 = np.empty(n2)
    z4 = np.empty(n2)
    k1 = wk[0]
    k2 = wk[1]
    k3 = wk[2]
    k1b = np.empty(n2)
    k2b = np.empty(n2)
    k3b = np.empty(n2)
    k4b = np.empty(n2)
    zb = np.empty(n2)
    vz = np.empty(n2)
    vu = np.empty(2)
    lam = np.zeros(n2)

    for i in range(n_iv):
        ubar[i, 0] = 0.0
        ubar[i, 1] = 0.0
    if n_steps == 0:
        return

    # Final node quadrature.
    ivN = min((n_steps - 1) // spi, n_iv - 1)
    wq = h * 0.5
    lam[n_t] += wq * 2.0 * (Z[n_steps, n_t] - cost_c[0])
    lam[2 * n_t - 1] += wq * 2.0 * (Z[n_steps, 2 * n_t - 1] - cost_c[1])
    ubar[ivN, 0] += wq * 2.0 * cost_c[2] * (useq[ivN, 0] - cost_c[3])
    ubar[ivN, 1] += wq * 2.0 * cost_c[2] * (useq[ivN, 1] - cost_c[4])

    for k in range(n_steps - 1, -1, -1):
        iv = min(k // spi, n_iv - 1)
        u0 = useq[iv, 0]
        u1 = useq[iv, 1]
        z1 = Z[k]
        rhs(z1, u0, u1, F, zF, qF, cp, n_t, n_f, k1)
        for j in range(n2):
            z2[j] = z1[j] + 0.5 * h * k1[j]
        rhs(z2, u0, u1, F, zF, qF, cp, n_t, n_f, k2)
        for j in range(n2):
            z3[j] = z1[j] + 0.5 * h * k2[j]
        rhs(z3, u0, u1, F, zF, qF, cp, n_t, n_f, k3)
        for j in range(n2):
            z4[j] = z1[j] + h * k3[j]

        h6 = h / 6.0
        for j in range(n2):
            lj = lam[j]
            k1b[j] = h6 * lj
            k2b[j] = 2.0 * h6 * lj
            k3b[j] = 2.0 * h6 * lj
            k4b[j] = h6 * lj
            zb[j] = lj

        rhs_vjp(z4, u0, u1, F, zF, qF, cp, n_t, n_f, k4b, vz, vu)
        ubar[iv, 0] += vu[0]
        ubar[iv, 1] += vu[1]
        for j in range(n2):
            zb[j] += vz[j]
            k3b[j] += h * vz[j]
        rhs_vjp(z3, u0, u1, F, zF, qF, cp, n_t, n_f, k3b, vz, vu)
        ubar[iv, 0] += vu[0]
        ubar[iv, 1] += vu[1]
        for j in range(n2):
            zb[j] += vz[j]
            k2b[j] += 0.5 * h * vz[j]
        rhs_vjp(z2, u0, u1, F, zF, qF, cp, n_t, n_f, k2b, vz, vu)
        ubar[iv, 0] += vu[0]
        ubar[iv, 1] += vu[1]
        for j in range(n2):
            zb[j] += vz[j]
            k1b[j] += 0.5 * h * vz[j]
        wq = h * (0.5 if k == 0 else 1.0)
        rhs_vjp(z1, u0, u1, F, zF, qF, cp, n_t, n_f, k1b, vz, vu)
        ubar[iv, 0] += vu[0] + wq * 2.0 * cost_c[2] * (u0 - cost_c[3])
        ubar[iv, 1] += vu[1] + wq * 2.0 * cost_c[2] * (u1 - cost_c[4])
        for j in range(n2):
            zb[j] += vz[j]
        zb[n_t] += wq * 2.0 * (z1[n_t] - cost_c[0])
        zb[2 * n_t - 1] += wq * 2.0 * (z1[2 * n_t - 1] - cost_c[1])
        for j in range(n2):
            lam[j] = zb[j]


@njit(cache=True, nogil=True)
def sim_policy_segment(
    Z, U, LV, n_steps, feedvec, eta2d, eta_stride, sel, theta, ni, w,
    cp, cost_c, n_t, n_f, h, fac_lt, fac_vb,
):
    """Integrate a feed-constant span under the neural policy.

    Z[0] must hold the starting state; rows 1..n_steps are written, as are
    U and LV rows 0..n_steps. eta2d row k * eta_stride is the noise at grid
    node k (stride 0 holds one constant row, stride 1 redraws per step; the
    sub-stages of a step share its node's row). Controls are recorded as
    commanded; the plant applies them scaled by (fac_lt, fac_vb).
    """
    n2 = 2 * n_t
    F = feedvec[0]
    zF = feedvec[1]
    qF = feedvec[2]
    wk = np.empty((7, n2))
    zeta = np.empty(ni)
    g = np.empty(ni)
    hid = np.empty(w)
    ub = np.empty(2)
    u1 = np.empty(2)

    for k in range(n_steps):
        eta = eta2d[k * eta_stride]
        st = _cl_step(
            Z[k], F, zF, qF, eta, sel, theta, ni, w, cp, n_t, n_f, h,
            fac_lt, fac_vb, wk, zeta, g, hid, ub, u1, Z[k + 1],
        )
        if st != 0:
            return st
        U[k, 0] = u1[0]
        U[k, 1] = u1[1]
        LV[k] = _stage_cost(Z[k], u1[0], u1[1], cost_c, n_t)
    eta = eta2d[n_steps * eta_stride]
    _policy_eval(
        Z[n_steps], F, zF, qF, eta, sel, theta, ni, w, cp, n_t, zeta, g, hid, u1
    )
    U[n_steps, 0] = u1[0]
    U[n_steps, 1] = u1[1]
    LV[n_steps] = _stage_cost(Z[n_steps], u1[0], u1[1], cost_c, n_t)
    return 0


@njit(cache=True, nogil=True)
def sim_const_u_segment(
    Z, U, LV, n_steps, feedvec, u0, u1, cp, cost_c, n_t, n_f, h, fac_lt, fac_vb,
):
    """Integrate a feed-constant span under fixed commanded controls."""
    n2 = 2 * n_t
    F = feedvec[0]
    zF = feedvec[1]
    qF = feedvec[2]
    wk = np.empty((5, n2))
    p0 = fac_lt * u0
    p1 = fac_vb * u1
    for k in range(n_steps):
        U[k, 0] = u0
        U[k, 1] = u1
        LV[k] = _stage_cost(Z[k], u0, u1, cost_c, n_t)
        st = _rk4_const_step(Z[k], p0, p1, F, zF, qF, cp, n_t, n_f, h, wk, Z[k + 1])
        if st != 0:
            return st
    U[n_steps, 0] = u0
    U[n_steps, 1] = u1
    LV[n_steps] = _stage_cost(Z[n_steps], u0, u1, cost_c, n_t)
    return 0
