"""Compiled inner loops for the parallel-module model.

Parameter matrix rows (shape ``(7, N)``)::

    0 r_series   r_ohm + r_contact            [ohm]
    1 r_ohm                                   [ohm]
    2 r_ct0                                   [ohm]
    3 r_w                                     [ohm]
    4 c_rc                                    [F]
    5 q                                       [C]
    6 e_act / gas_constant                    [K]

Scalar vector (length 4): c_p, rth_core_surface, rth_surface_ambient, t_ambient.
State layout: ``[v_rc(N), z(N), t_rise(N)]``.
"""

import numpy as np
from numba import njit

T_RISE_MIN = -50.0
T_RISE_MAX = 200.0


@njit(cache=True)
def branch_currents_kernel(v_open, r_series, total_current):
    n = v_open.shape[0]
    ysum = 0.0
    vy = 0.0
    for k in range(n):
        yk = 1.0 / r_series[k]
        ysum += yk
        vy += v_open[k] * yk
    rp = 1.0 / ysum
    out = np.empty(n)
    for x in range(n):
        out[x] = rp / r_series[x] * ((v_open[x] * ysum - vy) + total_current)
    return out


@njit(cache=True)
def rct_kernel(r_ct0, ea_over_r, t_rise, t_ambient):
    return r_ct0 * np.exp(ea_over_r * (1.0 / (t_ambient + t_rise) - 1.0 / t_ambient))


@njit(cache=True)
def rhs_kernel(y, total_current, params, scal, ocv_soc, ocv_v):
    n = params.shape[1]
    c_p = scal[0]
    rth_total = scal[1] + scal[2]
    t_amb = scal[3]
    dy = np.empty(3 * n)
    v_open = np.empty(n)
    for x in range(n):
        z = min(max(y[n + x], 0.0), 1.0)
        v_open[x] = np.interp(z, ocv_soc, ocv_v) - y[x]
    cur = branch_currents_kernel(v_open, params[0], total_current)
    for x in range(n):
        v_rc = y[x]
        t_r = y[2 * n + x]
        if not (T_RISE_MIN <= t_r <= T_RISE_MAX):
            dy[:] = np.nan
            return dy
        r_prime = rct_kernel(params[2, x], params[6, x], t_r, t_amb) + params[3, x]
        c = params[4, x]
        i = cur[x]
        dy[x] = -v_rc / (r_prime * c) + i / c
        dy[n + x] = -i / params[5, x]
        q_gen = i * i * params[1, x] + v_rc * v_rc / r_prime
        dy[2 * n + x] = -t_r / (c_p * rth_total) + q_gen / c_p
    return dy


@njit(cache=True)
def outputs_kernel(ys, total_currents, params, scal, ocv_soc, ocv_v):
    """Derived outputs for a batch of states ``ys`` of shape (M, 3N).

    Returns currents (M, N), q_gen (M, N), terminal voltage (M,) and the
    largest pairwise disagreement of per-branch terminal voltages (M,).
    """
    m = ys.shape[0]
    n = params.shape[1]
    t_amb = scal[3]
    currents = np.empty((m, n))
    q_gen = np.empty((m, n))
    v_term = np.empty(m)
    v_spread = np.empty(m)
    v_open = np.empty(n)
    for j in range(m):
        for x in range(n):
            z = min(max(ys[j, n + x], 0.0), 1.0)
            v_open[x] = np.interp(z, ocv_soc, ocv_v) - ys[j, x]
        cur = branch_currents_kernel(v_open, params[0], total_currents[j])
        vmin = np.inf
        vmax = -np.inf
        vsum = 0.0
        for x in range(n):
            i = cur[x]
            currents[j, x] = i
            v_rc = ys[j, x]
            r_prime = rct_kernel(params[2, x], params[6, x], ys[j, 2 * n + x], t_amb) + params[3, x]
            q_gen[j, x] = i * i * params[1, x] + v_rc * v_rc / r_prime
            vb = v_open[x] - i * params[0, x]
            vsum += vb
            vmin = min(vmin, vb)
            vmax = max(vmax, vb)
        v_term[j] = vsum / n
        v_spread[j] = vmax - vmin
    return currents, q_gen, v_term, v_spread
