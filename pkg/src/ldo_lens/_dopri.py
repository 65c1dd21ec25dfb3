"""Dormand-Prince 5(4) integrator specialised to the LDO state model.

The right-hand side is fixed (three capacitive nodes plus a high-pass
sensing state, clamped pass-device current, ramped load step) so the whole
loop can be compiled with numba; this is what makes the stiff parasitic
poles affordable with an explicit method.
"""

import numpy as np
from numba import njit

# Butcher tableau (Dormand & Prince, 1980)
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1 = 71 / 57600
E3 = -71 / 16695
E4 = 71 / 1920
E5 = -17253 / 339200
E6 = 22 / 525
E7 = -1 / 40

STATUS_OK = 0
STATUS_UNDERFLOW = 1
STATUS_BUDGET = 2
STATUS_DIVERGED = 3

N_STATE = 4


@njit(cache=True, nogil=True)
def rhs(t, x, kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il, out):
    ip = gmp * x[1]
    if ip < clip_lo:
        ip = clip_lo
    elif ip > clip_hi:
        ip = clip_hi
    if t <= t_step:
        dl = 0.0
    elif t >= t_step + t_rise:
        dl = d_il
    else:
        dl = d_il * (t - t_step) / t_rise
    i0 = gmat[0, 0] * x[0] + gmat[0, 1] * x[1] + gmat[0, 2] * x[2] + gmat[0, 3] * x[3]
    i1 = gmat[1, 0] * x[0] + gmat[1, 1] * x[1] + gmat[1, 2] * x[2] + gmat[1, 3] * x[3]
    i2 = gmat[2, 0] * x[0] + gmat[2, 1] * x[1] + gmat[2, 2] * x[2] + gmat[2, 3] * x[3] + ip - dl
    for r in range(3):
        out[r] = kinv[r, 0] * i0 + kinv[r, 1] * i1 + kinv[r, 2] * i2
    out[3] = out[2] - inv_tau * x[3]


@njit(cache=True, nogil=True)
def integrate(
    kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il,
    x0, breakpoints, t_out, rtol, atol, h_min, max_steps, v_abort,
):
    """Integrate from ``breakpoints[0]`` to ``breakpoints[-1]``.

    Steps never straddle a breakpoint. States are written at ``t_out`` by
    cubic Hermite interpolation of accepted steps. Returns
    ``(y_out, status, n_accepted, n_rejected, t_peak, y_peak, t_fail)`` where
    ``(t_peak, y_peak)`` is the accepted step point with the largest
    ``|vout|`` at or after ``t_step``. Integration stops with
    ``STATUS_DIVERGED`` once ``|vout|`` exceeds ``v_abort``.
    """
    n = N_STATE
    y_out = np.zeros((t_out.size, n))
    x = x0.copy()
    t = breakpoints[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    k7 = np.empty(n)
    tmp = np.empty(n)
    ynew = np.empty(n)
    rhs(t, x, kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il, k1)

    j = 0
    while j < t_out.size and t_out[j] <= t:
        for r in range(n):
            y_out[j, r] = x[r]
        j += 1

    t_peak = t
    y_peak = np.abs(x[2])
    n_acc = 0
    n_rej = 0
    h = (breakpoints[-1] - breakpoints[0]) * 1e-9
    for seg in range(breakpoints.size - 1):
        t_end = breakpoints[seg + 1]
        while t < t_end:
            if n_acc + n_rej >= max_steps:
                return y_out, STATUS_BUDGET, n_acc, n_rej, t_peak, y_peak, t
            last = False
            h_try = h
            if t + h >= t_end:
                h = t_end - t
                last = True
            for r in range(n):
                tmp[r] = x[r] + h * A21 * k1[r]
            rhs(t + C2 * h, tmp, kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il, k2)
            for r in range(n):
                tmp[r] = x[r] + h * (A31 * k1[r] + A32 * k2[r])
            rhs(t + C3 * h, tmp, kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il, k3)
            for r in range(n):
                tmp[r] = x[r] + h * (A41 * k1[r] + A42 * k2[r] + A43 * k3[r])
            rhs(t + C4 * h, tmp, kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il, k4)
            for r in range(n):
                tmp[r] = x[r] + h * (A51 * k1[r] + A52 * k2[r] + A53 * k3[r] + A54 * k4[r])
            rhs(t + C5 * h, tmp, kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il, k5)
            for r in range(n):
                tmp[r] = x[r] + h * (A61 * k1[r] + A62 * k2[r] + A63 * k3[r] + A64 * k4[r] + A65 * k5[r])
            t_new = t_end if last else t + h
            rhs(t_new, tmp, kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il, k6)
            for r in range(n):
                ynew[r] = x[r] + h * (B1 * k1[r] + B3 * k3[r] + B4 * k4[r] + B5 * k5[r] + B6 * k6[r])
            rhs(t_new, ynew, kinv, gmat, gmp, clip_lo, clip_hi, inv_tau, t_step, t_rise, d_il, k7)

            err = 0.0
            for r in range(n):
                e = h * (E1 * k1[r] + E3 * k3[r] + E4 * k4[r] + E5 * k5[r] + E6 * k6[r] + E7 * k7[r])
                sc = atol + rtol * max(abs(x[r]), abs(ynew[r]))
                q = abs(e) / sc
                if q > err:
                    err = q

            if err <= 1.0:
                # dense output on [t, t_new]
                while j < t_out.size and t_out[j] <= t_new:
                    th = (t_out[j] - t) / h
                    h00 = (1 + 2 * th) * (1 - th) ** 2
                    h10 = th * (1 - th) ** 2
                    h01 = th * th * (3 - 2 * th)
                    h11 = th * th * (th - 1)
                    for r in range(n):
                        y_out[j, r] = h00 * x[r] + h10 * h * k1[r] + h01 * ynew[r] + h11 * h * k7[r]
                    j += 1
                t = t_new
                for r in range(n):
                    x[r] = ynew[r]
                    k1[r] = k7[r]
                n_acc += 1
                if abs(x[2]) > v_abort:
                    return y_out, STATUS_DIVERGED, n_acc, n_rej, t_peak, y_peak, t
                if t >= t_step and abs(x[2]) > y_peak:
                    y_peak = abs(x[2])
                    t_peak = t
                fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                h = h_try if last else h * fac
            else:
                n_rej += 1
                h = h * max(0.1, 0.9 * err ** -0.2)
                if h < h_min:
                    return y_out, STATUS_UNDERFLOW, n_acc, n_rej, t_peak, y_peak, t
    while j < t_out.size:
        for r in range(n):
            y_out[j, r] = x[r]
        j += 1
    return y_out, STATUS_OK, n_acc, n_rej, t_peak, y_peak, t
