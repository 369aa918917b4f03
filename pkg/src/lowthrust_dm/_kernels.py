"""Compiled numerical kernels: CR3BP field, extremal flow, DOP853, k-d tree.

Everything here works on plain float arrays so that the public modules can
wrap it with validation.  State layouts:

* ballistic (``KIND_BALLISTIC``): ``[r(3), v(3)]``, params ``[mu]``
* augmented (``KIND_AUGMENTED``): ``[r(3), v(3), m, lam_r(3), lam_v(3), lam_m]``,
  params ``[mu, c, t_max, sigma]``
"""
import math

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dop

KIND_BALLISTIC = 0
KIND_AUGMENTED = 1

OK = 0
STATUS_SINGULAR = 1
STATUS_FUEL = 2
STATUS_STEP_COLLAPSE = 3
STATUS_MAX_STEPS = 4

_NS = _dop.N_STAGES
A = np.ascontiguousarray(_dop.A, dtype=np.float64)
B = np.ascontiguousarray(_dop.B, dtype=np.float64)
C = np.ascontiguousarray(_dop.C, dtype=np.float64)
E3 = np.ascontiguousarray(_dop.E3, dtype=np.float64)
E5 = np.ascontiguousarray(_dop.E5, dtype=np.float64)
D = np.ascontiguousarray(_dop.D, dtype=np.float64)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
# PI controller exponents (error estimator of order 7)
PI_ALPHA = 1.0 / 8.0 - 0.75 * 0.04
PI_BETA = 0.04
EVENT_TIME_TOL = 1e-12


# --------------------------------------------------------------------- field

@njit(cache=True)
def distances(r1, r2, r3, mu):
    # a massless secondary (mu = 0) exerts no pull; report it as infinitely far
    rho1 = math.sqrt((r1 + mu) ** 2 + r2 * r2 + r3 * r3)
    if mu == 0.0:
        return rho1, np.inf
    rho2 = math.sqrt((r1 - 1.0 + mu) ** 2 + r2 * r2 + r3 * r3)
    return rho1, rho2


@njit(cache=True)
def accel(y, mu, out):
    x, yy, z, vx, vy = y[0], y[1], y[2], y[3], y[4]
    rho1, rho2 = distances(x, yy, z, mu)
    k1 = (1.0 - mu) / rho1**3
    k2 = mu / rho2**3
    out[0] = 2.0 * vy + x - k1 * (x + mu) - k2 * (x - 1.0 + mu)
    out[1] = -2.0 * vx + yy - k1 * yy - k2 * yy
    out[2] = -k1 * z - k2 * z


@njit(cache=True)
def gravity_gradient(y, mu, G):
    """G = d(accel)/dr, symmetric."""
    x, yy, z = y[0], y[1], y[2]
    rho1, rho2 = distances(x, yy, z, mu)
    a = 1.0 - mu
    r13 = rho1**3
    r23 = rho2**3
    r15 = rho1**5
    r25 = rho2**5
    dx1 = x + mu
    dx2 = x - 1.0 + mu
    common = -a / r13 - mu / r23
    G[0, 0] = 1.0 + common + 3.0 * a * dx1 * dx1 / r15 + 3.0 * mu * dx2 * dx2 / r25
    G[1, 1] = 1.0 + common + 3.0 * a * yy * yy / r15 + 3.0 * mu * yy * yy / r25
    G[2, 2] = common + 3.0 * a * z * z / r15 + 3.0 * mu * z * z / r25
    G[0, 1] = G[1, 0] = 3.0 * a * dx1 * yy / r15 + 3.0 * mu * dx2 * yy / r25
    G[0, 2] = G[2, 0] = 3.0 * a * dx1 * z / r15 + 3.0 * mu * dx2 * z / r25
    G[1, 2] = G[2, 1] = 3.0 * a * yy * z / r15 + 3.0 * mu * yy * z / r25


@njit(cache=True)
def switching(y, c):
    lv = math.sqrt(y[10] ** 2 + y[11] ** 2 + y[12] ** 2)
    return lv + y[13] * y[6] / c


@njit(cache=True)
def rhs(kind, y, p, out):
    mu = p[0]
    out[0] = y[3]
    out[1] = y[4]
    out[2] = y[5]
    x, yy, z, vx, vy = y[0], y[1], y[2], y[3], y[4]
    rho1, rho2 = distances(x, yy, z, mu)
    k1 = (1.0 - mu) / rho1**3
    k2 = mu / rho2**3
    gx = 2.0 * vy + x - k1 * (x + mu) - k2 * (x - 1.0 + mu)
    gy = -2.0 * vx + yy - k1 * yy - k2 * yy
    gz = -k1 * z - k2 * z
    if kind == KIND_BALLISTIC:
        out[3] = gx
        out[4] = gy
        out[5] = gz
        return
    c = p[1]
    thrust = p[2] * p[3]
    m = y[6]
    lr1, lr2, lr3 = y[7], y[8], y[9]
    lv1, lv2, lv3 = y[10], y[11], y[12]
    lvn = math.sqrt(lv1 * lv1 + lv2 * lv2 + lv3 * lv3)
    if lvn > 0.0:
        u1, u2, u3 = -lv1 / lvn, -lv2 / lvn, -lv3 / lvn
    else:
        u1, u2, u3 = 1.0, 0.0, 0.0
    tm = thrust / m
    out[3] = gx + tm * u1
    out[4] = gy + tm * u2
    out[5] = gz + tm * u3
    out[6] = -thrust / c
    # costates: lam_r' = -G^T lam_v, lam_v' = -lam_r - Hv^T lam_v
    r15 = rho1**5
    r25 = rho2**5
    a = 1.0 - mu
    dx1 = x + mu
    dx2 = x - 1.0 + mu
    common = -k1 - k2
    gxx = 1.0 + common + 3.0 * a * dx1 * dx1 / r15 + 3.0 * mu * dx2 * dx2 / r25
    gyy = 1.0 + common + 3.0 * a * yy * yy / r15 + 3.0 * mu * yy * yy / r25
    gzz = common + 3.0 * a * z * z / r15 + 3.0 * mu * z * z / r25
    gxy = 3.0 * a * dx1 * yy / r15 + 3.0 * mu * dx2 * yy / r25
    gxz = 3.0 * a * dx1 * z / r15 + 3.0 * mu * dx2 * z / r25
    gyz = 3.0 * a * yy * z / r15 + 3.0 * mu * yy * z / r25
    out[7] = -(gxx * lv1 + gxy * lv2 + gxz * lv3)
    out[8] = -(gxy * lv1 + gyy * lv2 + gyz * lv3)
    out[9] = -(gxz * lv1 + gyz * lv2 + gzz * lv3)
    out[10] = -lr1 + 2.0 * lv2
    out[11] = -lr2 - 2.0 * lv1
    out[12] = -lr3
    out[13] = -lvn * thrust / (m * m)


# --------------------------------------------------------------------- DOP853

@njit(cache=True)
def _rk_step(kind, t, y, f, h, p, K, y_new, f_new, tmp, rtol, atol):
    """One DOP853 step; fills K[0:13], y_new, f_new; returns the error norm."""
    n = y.shape[0]
    for i in range(n):
        K[0, i] = f[i]
    for s in range(1, _NS):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                acc += A[s, j] * K[j, i]
            tmp[i] = y[i] + h * acc
        rhs(kind, tmp, p, K[s])
    for i in range(n):
        acc = 0.0
        for j in range(_NS):
            acc += B[j] * K[j, i]
        y_new[i] = y[i] + h * acc
    rhs(kind, y_new, p, f_new)
    for i in range(n):
        K[_NS, i] = f_new[i]
    e5 = 0.0
    e3 = 0.0
    for i in range(n):
        sc = atol + max(abs(y[i]), abs(y_new[i])) * rtol
        a5 = 0.0
        a3 = 0.0
        for j in range(_NS + 1):
            a5 += E5[j] * K[j, i]
            a3 += E3[j] * K[j, i]
        a5 /= sc
        a3 /= sc
        e5 += a5 * a5
        e3 += a3 * a3
    if e5 == 0.0 and e3 == 0.0:
        return 0.0
    denom = e5 + 0.01 * e3
    return abs(h) * e5 / math.sqrt(denom * n)


@njit(cache=True)
def _dense_coeffs(kind, t_old, h, y_old, y_new, f_new, p, K, F, tmp):
    """Fill F (7 x n) with the 7th-order DOP853 interpolant of the last step."""
    n = y_old.shape[0]
    for s in range(_NS + 1, 16):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                acc += A[s, j] * K[j, i]
            tmp[i] = y_old[i] + h * acc
        rhs(kind, tmp, p, K[s])
    for i in range(n):
        dy = y_new[i] - y_old[i]
        F[0, i] = dy
        F[1, i] = h * K[0, i] - dy
        F[2, i] = 2.0 * dy - h * (f_new[i] + K[0, i])
        for r in range(4):
            acc = 0.0
            for j in range(16):
                acc += D[r, j] * K[j, i]
            F[3 + r, i] = h * acc


@njit(cache=True)
def dense_eval(F, y_old, x, out, ncomp):
    for i in range(ncomp):
        acc = 0.0
        for k in range(6, -1, -1):
            acc += F[k, i]
            if (6 - k) % 2 == 0:
                acc *= x
            else:
                acc *= 1.0 - x
        out[i] = acc + y_old[i]


@njit(cache=True)
def _initial_step(kind, t0, y0, f0, p, direction, rtol, atol, interval, tmp, f1):
    n = y0.shape[0]
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + abs(y0[i]) * rtol
        d0 += (y0[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = math.sqrt(d0 / n)
    d1 = math.sqrt(d1 / n)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, interval)
    for i in range(n):
        tmp[i] = y0[i] + h0 * direction * f0[i]
    rhs(kind, tmp, p, f1)
    d2 = 0.0
    for i in range(n):
        sc = atol + abs(y0[i]) * rtol
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = math.sqrt(d2 / n) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 8.0)
    return min(100.0 * h0, h1, interval)


@njit(cache=True)
def _grow(arr, new_len):
    shape = (new_len,) + arr.shape[1:]
    out = np.empty(shape, dtype=arr.dtype)
    out[: arr.shape[0]] = arr
    return out


@njit(cache=True)
def propagate(kind, y0, t_end, p_in, rtol, atol, coll_radius, m_floor, store, max_steps):
    """Integrate from t = 0 to ``t_end`` (either sign).

    Augmented arcs hold the throttle fixed between sign changes of the
    switching function; each change is bracketed on the dense interpolant and
    integration restarts there.

    Returns ``(status, t_last, y_last, switch_times, n_steps, ts, te, hs, Y, F)``
    where the last five hold per-step dense polynomials when ``store`` is set
    (step k starts at ``ts[k]`` with length ``hs[k]`` and is valid up to
    ``te[k]``, which is short of ``ts[k] + hs[k]`` after an event).
    """
    n = y0.shape[0]
    p = p_in.copy()
    direction = 1.0 if t_end >= 0.0 else -1.0
    interval = abs(t_end)

    cap = 256 if store else 1
    ts = np.empty(cap)
    te = np.empty(cap)
    hs = np.empty(cap)
    Ys = np.empty((cap, n))
    Fs = np.empty((cap, 7, n))
    switches = np.empty(16)
    n_sw = 0
    n_steps = 0

    y = y0.copy()
    t = 0.0
    augmented = kind == KIND_AUGMENTED
    if augmented:
        p[3] = 1.0 if switching(y, p[1]) > 0.0 else 0.0

    f = np.empty(n)
    y_new = np.empty(n)
    f_new = np.empty(n)
    tmp = np.empty(n)
    tmp2 = np.empty(n)
    K = np.empty((16, n))
    F = np.empty((7, n))
    ybis = np.empty(n)

    if interval == 0.0:
        return OK, 0.0, y, switches[:0], 0, ts[:0], te[:0], hs[:0], Ys[:0], Fs[:0]

    rho1, rho2 = distances(y[0], y[1], y[2], p[0])
    if rho1 < coll_radius or rho2 < coll_radius:
        return STATUS_SINGULAR, 0.0, y, switches[:0], 0, ts[:0], te[:0], hs[:0], Ys[:0], Fs[:0]

    rhs(kind, y, p, f)
    h_abs = _initial_step(kind, t, y, f, p, direction, rtol, atol, interval, tmp, tmp2)
    err_prev = 1e-4
    status = OK
    steps_taken = 0

    while direction * (t_end - t) > 0.0:
        if steps_taken >= max_steps:
            status = STATUS_MAX_STEPS
            break
        min_step = 10.0 * abs(np.nextafter(t, t + direction) - t)
        if h_abs < min_step:
            h_abs = min_step
        rejected = False
        accepted = False
        while not accepted:
            if h_abs < min_step:
                status = STATUS_STEP_COLLAPSE
                break
            h = h_abs * direction
            t_new = t + h
            if direction * (t_new - t_end) > 0.0:
                t_new = t_end
            h = t_new - t
            h_abs = abs(h)
            err = _rk_step(kind, t, y, f, h, p, K, y_new, f_new, tmp, rtol, atol)
            if not np.isfinite(err):
                h_abs *= MIN_FACTOR
                rejected = True
                continue
            if err < 1.0:
                if err == 0.0:
                    factor = MAX_FACTOR
                else:
                    factor = SAFETY * err ** (-PI_ALPHA) * err_prev ** PI_BETA
                    factor = min(MAX_FACTOR, max(MIN_FACTOR, factor))
                if rejected:
                    factor = min(1.0, factor)
                err_prev = max(err, 1e-4)
                h_next = h_abs * factor
                accepted = True
            else:
                h_abs *= max(MIN_FACTOR, SAFETY * err ** (-1.0 / 8.0))
                rejected = True
        if status != OK:
            break
        steps_taken += 1

        # event checks on the accepted step
        event = 0  # 1 switch, 2 fuel, 3 collision
        if augmented:
            s_new = switching(y_new, p[1])
            if (p[3] == 1.0 and s_new <= 0.0) or (p[3] == 0.0 and s_new > 0.0):
                event = 1
            if y_new[6] <= m_floor:
                event = 2
        rho1, rho2 = distances(y_new[0], y_new[1], y_new[2], p[0])
        if rho1 < coll_radius or rho2 < coll_radius:
            event = 3

        need_dense = store or event != 0
        if need_dense:
            _dense_coeffs(kind, t, h, y, y_new, f_new, p, K, F, tmp)

        x_end = 1.0
        if event == 1 or event == 2:
            # bracket: condition false at x=0, true at x=1
            lo = 0.0
            hi = 1.0
            while (hi - lo) * h_abs > EVENT_TIME_TOL:
                mid = 0.5 * (lo + hi)
                dense_eval(F, y, mid, ybis, n)
                if event == 1:
                    s_mid = switching(ybis, p[1])
                    hit = s_mid <= 0.0 if p[3] == 1.0 else s_mid > 0.0
                    # a fuel crossing earlier in the step takes precedence later
                else:
                    hit = ybis[6] <= m_floor
                if hit:
                    hi = mid
                else:
                    lo = mid
            if event == 1 and y_new[6] <= m_floor:
                # switch happens first only if mass is still above the floor there
                dense_eval(F, y, hi, ybis, n)
                if ybis[6] <= m_floor:
                    event = 2
                    lo = 0.0
                    hi = 1.0
                    while (hi - lo) * h_abs > EVENT_TIME_TOL:
                        mid = 0.5 * (lo + hi)
                        dense_eval(F, y, mid, ybis, n)
                        if ybis[6] <= m_floor:
                            hi = mid
                        else:
                            lo = mid
            x_end = hi
            dense_eval(F, y, x_end, y_new, n)

        if store:
            if n_steps == ts.shape[0]:
                new_cap = 2 * ts.shape[0]
                ts = _grow(ts, new_cap)
                te = _grow(te, new_cap)
                hs = _grow(hs, new_cap)
                Ys = _grow(Ys, new_cap)
                Fs = _grow(Fs, new_cap)
            ts[n_steps] = t
            te[n_steps] = t + x_end * h if x_end < 1.0 else t_new
            hs[n_steps] = h
            Ys[n_steps] = y
            Fs[n_steps] = F
            n_steps += 1

        if x_end < 1.0:
            t = t + x_end * h
        else:
            t = t_new
        for i in range(n):
            y[i] = y_new[i]

        if event == 2:
            status = STATUS_FUEL
            break
        if event == 3:
            status = STATUS_SINGULAR
            break
        if event == 1:
            if n_sw == switches.shape[0]:
                switches = _grow(switches, 2 * n_sw)
            switches[n_sw] = t
            n_sw += 1
            p[3] = 1.0 - p[3]
            rhs(kind, y, p, f)
            err_prev = 1e-4
            h_abs = min(h_next, h_abs)
        else:
            for i in range(n):
                f[i] = f_new[i]
            h_abs = h_next

    return status, t, y, switches[:n_sw], n_steps, ts[:n_steps], te[:n_steps], hs[:n_steps], Ys[:n_steps], Fs[:n_steps]


@njit(cache=True)
def eval_steps(ts, te, hs, Ys, Fs, tq, ncomp, out):
    """Evaluate stored dense output at times ``tq`` (monotone in the integration direction)."""
    nsteps = ts.shape[0]
    k = 0
    for j in range(tq.shape[0]):
        t = tq[j]
        if nsteps == 0:
            for i in range(ncomp):
                out[j, i] = np.nan
            continue
        forward = hs[0] > 0.0
        if forward:
            while k < nsteps - 1 and t > te[k]:
                k += 1
        else:
            while k < nsteps - 1 and t < te[k]:
                k += 1
        x = (t - ts[k]) / hs[k]
        dense_eval(Fs[k], Ys[k], x, out[j], ncomp)


@njit(cache=True)
def locate_step(ts, te, hs, t):
    """Index of the stored step containing t (binary search, forward storage)."""
    lo = 0
    hi = ts.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if te[mid] < t:
            lo = mid + 1
        else:
            hi = mid
    return lo


# --------------------------------------------------------------------- k-d tree

@njit(cache=True)
def _box_dist(q, lo, hi):
    d = 0.0
    for i in range(q.shape[0]):
        if q[i] < lo[i]:
            e = lo[i] - q[i]
        elif q[i] > hi[i]:
            e = q[i] - hi[i]
        else:
            e = 0.0
        if e > d:
            d = e
    return d


@njit(cache=True)
def kd_query(pts, idx, node_lo, node_hi, left, right, start, stop, q, bound):
    """Nearest stored point to q under the max-norm, restricted to distance < bound.

    Ties go to the lowest original index.  Returns ``(orig_index, dist)`` or
    ``(-1, inf)`` when no point lies strictly inside ``bound``.
    """
    best = bound
    best_i = -1
    stack = np.empty(64, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    dim = q.shape[0]
    while sp > 0:
        sp -= 1
        node = stack[sp]
        bd = _box_dist(q, node_lo[node], node_hi[node])
        if best_i < 0:
            if bd >= best:
                continue
        elif bd > best:
            continue
        if left[node] < 0:
            for j in range(start[node], stop[node]):
                d = 0.0
                for i in range(dim):
                    e = abs(pts[j, i] - q[i])
                    if e > d:
                        d = e
                        if best_i >= 0 and d > best:
                            break
                if best_i < 0:
                    if d < best:
                        best = d
                        best_i = idx[j]
                elif d < best or (d == best and idx[j] < best_i):
                    best = d
                    best_i = idx[j]
            continue
        l = left[node]
        r = right[node]
        dl = _box_dist(q, node_lo[l], node_hi[l])
        dr = _box_dist(q, node_lo[r], node_hi[r])
        if sp + 2 > stack.shape[0]:
            stack = _grow(stack, 2 * stack.shape[0])
        # push the farther child first so the nearer one is explored first
        if dl <= dr:
            stack[sp] = r
            stack[sp + 1] = l
        else:
            stack[sp] = l
            stack[sp + 1] = r
        sp += 2
    if best_i < 0:
        return -1, np.inf
    return best_i, best


# --------------------------------------------------------------------- screening

@njit(cache=True)
def _state_rate(y, p, tmp, f):
    """Max-norm of d(r, v)/dt, with the full thrust acceleration always added."""
    for i in range(14):
        tmp[i] = y[i]
    rhs(KIND_AUGMENTED, tmp, p, f)
    thrust_acc = p[2] / y[6]
    rate = 0.0
    for i in range(6):
        e = abs(f[i])
        if i >= 3:
            e += thrust_acc
        if e > rate:
            rate = e
    return rate


@njit(cache=True)
def screen_scan(ts, te, hs, Ys, Fs, t_valid, grid_dt, p, delta, max_depth, lip_safety,
                pts, idx, node_lo, node_hi, left, right, start, stop):
    """Scan a stored extremal against a target tree.

    The nearest-target distance d(t) is Lipschitz with constant bounded by
    the state rate, so a grid interval [a, b] can only hold a value below
    ``delta`` when ``(d(a) + d(b))/2 - L (b - a)/2 < delta``.  Grid values
    are queried exactly within a radius that keeps that test sound, and
    surviving intervals are bisected (left first) down to ``max_depth``
    levels.  Returns ``(delta_min, t_best, target_index, n_queries)``;
    ``delta_min`` is ``inf`` when nothing came within the query radius.
    """
    n_grid = int(math.floor(t_valid / grid_dt + 1e-9)) + 1
    tq = np.empty(n_grid)
    for k in range(n_grid):
        tq[k] = min(k * grid_dt, t_valid)
    states = np.empty((n_grid, 14))
    eval_steps(ts, te, hs, Ys, Fs, tq, 14, states)
    tmp = np.empty(14)
    f = np.empty(14)
    p_loc = p.copy()
    rate = np.empty(n_grid)
    for k in range(n_grid):
        p_loc[3] = 1.0 if switching(states[k], p[1]) > 0.0 else 0.0
        rate[k] = _state_rate(states[k], p_loc, tmp, f)
    lint = np.empty(max(n_grid - 1, 1))
    for k in range(n_grid - 1):
        lint[k] = lip_safety * max(rate[k], rate[k + 1])

    q = np.empty(6)
    dvals = np.empty(n_grid)
    best = np.inf
    best_t = 0.0
    best_j = -1
    n_queries = 0
    for k in range(n_grid):
        lk = 0.0
        if k > 0:
            lk = max(lk, lint[k - 1])
        if k < n_grid - 1:
            lk = max(lk, lint[k])
        radius = delta + lk * grid_dt
        for i in range(6):
            q[i] = states[k, i]
        j, d = kd_query(pts, idx, node_lo, node_hi, left, right, start, stop, q, radius)
        n_queries += 1
        if j < 0:
            d = radius
        elif d < best:
            best = d
            best_t = tq[k]
            best_j = j
        dvals[k] = d
    if max_depth <= 0:
        return best, best_t, best_j, n_queries

    # branch and bound on candidate intervals, in time order
    stack_a = np.empty(2 * max_depth + 8)
    stack_b = np.empty(2 * max_depth + 8)
    stack_da = np.empty(2 * max_depth + 8)
    stack_db = np.empty(2 * max_depth + 8)
    stack_lv = np.empty(2 * max_depth + 8, dtype=np.int64)
    ybuf = np.empty(14)
    for k in range(n_grid - 1):
        L = lint[k]
        h = tq[k + 1] - tq[k]
        if h <= 0.0:
            continue
        if 0.5 * (dvals[k] + dvals[k + 1]) - 0.5 * L * h >= min(best, delta):
            continue
        sp = 0
        stack_a[0] = tq[k]
        stack_b[0] = tq[k + 1]
        stack_da[0] = dvals[k]
        stack_db[0] = dvals[k + 1]
        stack_lv[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            a = stack_a[sp]
            b = stack_b[sp]
            da = stack_da[sp]
            db = stack_db[sp]
            lv = stack_lv[sp]
            if 0.5 * (da + db) - 0.5 * L * (b - a) >= min(best, delta):
                continue
            mid = 0.5 * (a + b)
            kk = locate_step(ts, te, hs, mid)
            dense_eval(Fs[kk], Ys[kk], (mid - ts[kk]) / hs[kk], ybuf, 6)
            for i in range(6):
                q[i] = ybuf[i]
            radius = delta + L * (b - a)
            j, dm = kd_query(pts, idx, node_lo, node_hi, left, right, start, stop, q, radius)
            n_queries += 1
            if j < 0:
                dm = radius
            elif dm < best:
                best = dm
                best_t = mid
                best_j = j
            if lv + 1 >= max_depth:
                continue
            half = 0.5 * (b - a)
            # push right then left so the earlier half is searched first
            if 0.5 * (dm + db) - 0.5 * L * half < min(best, delta):
                stack_a[sp] = mid
                stack_b[sp] = b
                stack_da[sp] = dm
                stack_db[sp] = db
                stack_lv[sp] = lv + 1
                sp += 1
            if 0.5 * (da + dm) - 0.5 * L * half < min(best, delta):
                stack_a[sp] = a
                stack_b[sp] = mid
                stack_da[sp] = da
                stack_db[sp] = dm
                stack_lv[sp] = lv + 1
                sp += 1
    return best, best_t, best_j, n_queries
