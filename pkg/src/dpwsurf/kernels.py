"""Hot inner loops: adaptive Dormand-Prince stepping for batches of 2x2 ODEs.

Both integrators advance a whole loop (one 2x2 system per lambda-sample)
with a shared step controller, so the loop stays coherent across lambda.
Right-hand sides are supplied as coefficient arrays:

    dY_b/dt = Y_b @ (u(t) K1_b + w(t) K2_b) + P(t)_b @ Y_b

with scalar functions u, w given on Chebyshev-free closed form per segment
kind, and P an optional per-sample left coefficient (used by the Delaunay
gauge equation).

The numba path is selected automatically when numba imports and the
environment variable DPWSURF_DISABLE_NUMBA is unset; the pure-numpy path
is bit-compatible in structure and used as fallback.  benchmarks/ compares
the two.
"""
import os

import numpy as np

from .errors import StepSizeUnderflow

_HAVE_NUMBA = False
if not os.environ.get("DPWSURF_DISABLE_NUMBA"):
    try:
        from numba import njit
        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - exercised via env flag instead
        pass

if not _HAVE_NUMBA:
    def njit(*args, **kwargs):  # noqa: D103 - decorator stub
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


def backend():
    return "numba" if _HAVE_NUMBA else "numpy"


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1 / 5, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3 / 40, 9 / 40, 0.0, 0.0, 0.0, 0.0],
    [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0, 0.0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0, 0.0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0.0],
])
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def integrate_linear_batch(coef_fn, y0, t0, t1, rtol=1e-11, atol=1e-13,
                           max_steps=100000):
    """Generic adaptive DP5(4) for dY/dt = rhs(t, Y), Y complex (B, 2, 2).

    coef_fn(t, Y) -> dY. Shared controller: error norm is the max over the
    whole batch, scaled per entry by atol + rtol * |Y|.
    """
    y = np.array(y0, dtype=complex)
    t = float(t0)
    tend = float(t1)
    if tend == t:
        return y
    direction = 1.0 if tend > t else -1.0
    h = direction * min(0.1, abs(tend - t))
    k = [None] * 7
    nsteps = 0
    while (tend - t) * direction > 1e-15:
        if nsteps >= max_steps:
            raise StepSizeUnderflow("integrator exceeded %d steps" % max_steps)
        if (t + h - tend) * direction > 0:
            h = tend - t
        k[0] = coef_fn(t, y)
        for i in range(1, 7):
            yi = y.copy()
            for j in range(i):
                a = _DP_A[i][j] if i < 6 else _DP_B5[j]
                if a != 0.0:
                    yi += h * a * k[j]
            k[i] = coef_fn(t + _DP_C[i] * h, yi)
        y5 = y + h * sum(_DP_B5[j] * k[j] for j in range(7) if _DP_B5[j] != 0.0)
        y4 = y + h * sum(_DP_B4[j] * k[j] for j in range(7) if _DP_B4[j] != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = np.max(np.abs(y5 - y4) / scale)
        if err <= 1.0:
            t += h
            y = y5
            nsteps += 1
        fac = 0.9 * (max(err, 1e-16)) ** (-0.2)
        h *= min(5.0, max(0.2, fac))
        if abs(h) < 1e-14 * max(1.0, abs(tend - t0)):
            raise StepSizeUnderflow("step size underflow at t=%g" % t)
    return y


# ---- specialised segment integrators -----------------------------------
#
# State layout for the low-level kernels: yr/yi real arrays (B, 2, 2).
# Segment kinds: 0 = straight line z(t) = z0 + t dz, t in [0, 1]
#                1 = arc z(t) = c + R exp(i(th0 + t dth)), t in [0, 1]
# Potential kinds: 0 = constant A dz (Delaunay, matrix per sample)
#                  1 = trinoid: xi = (K1 / lam... ) see frame_ode

def _seg_z(kind, p, t):
    if kind == 0:
        z = p[0] + 1j * p[1] + t * (p[2] + 1j * p[3])
        dz = p[2] + 1j * p[3]
    else:
        th = p[4] + t * p[5]
        e = np.cos(th) + 1j * np.sin(th)
        z = (p[0] + 1j * p[1]) + (p[2] + 1j * p[3]) * e
        dz = (p[2] + 1j * p[3]) * e * 1j * p[5]
    return z, dz


@njit(cache=True)
def _rhs_fill(out, y, k1, k2, u, w):  # pragma: no cover - numba kernel
    b = y.shape[0]
    for n in range(b):
        for i in range(2):
            for j in range(2):
                acc = 0.0 + 0.0j
                for m in range(2):
                    acc += y[n, i, m] * (u * k1[n, m, j] + w * k2[n, m, j])
                out[n, i, j] = acc
    return out


@njit(cache=True)
def _dp_step_batch(y, k1, k2, seg_kind, seg, pot_kind, q5, rtol, atol, hmax):  # pragma: no cover
    """One full adaptive integration over t in [0, 1] for the segment.

    q5 holds the rational coefficients of q(z) = (c2 z^2 + c1 z + c0) /
    (16 z^2 (z-1)^2) for the trinoid (unused for pot_kind 0).
    Returns (y, status); status 0 ok, 1 underflow, 2 too many steps.
    """
    bsz = y.shape[0]
    c = np.array([0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0])
    a = np.zeros((7, 6))
    a[1, 0] = 0.2
    a[2, 0] = 3.0 / 40.0; a[2, 1] = 9.0 / 40.0
    a[3, 0] = 44.0 / 45.0; a[3, 1] = -56.0 / 15.0; a[3, 2] = 32.0 / 9.0
    a[4, 0] = 19372.0 / 6561.0; a[4, 1] = -25360.0 / 2187.0
    a[4, 2] = 64448.0 / 6561.0; a[4, 3] = -212.0 / 729.0
    a[5, 0] = 9017.0 / 3168.0; a[5, 1] = -355.0 / 33.0
    a[5, 2] = 46732.0 / 5247.0; a[5, 3] = 49.0 / 176.0
    a[5, 4] = -5103.0 / 18656.0
    b5 = np.array([35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0,
                   -2187.0 / 6784.0, 11.0 / 84.0, 0.0])
    b4 = np.array([5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0,
                   -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0])
    t = 0.0
    h = min(0.5, hmax)
    ks = np.zeros((7, bsz, 2, 2), dtype=np.complex128)
    rhs = np.zeros((bsz, 2, 2), dtype=np.complex128)
    nsteps = 0
    while t < 1.0 - 1e-15:
        if nsteps > 100000:
            return y, 2
        if t + h > 1.0:
            h = 1.0 - t
        for s in range(7):
            ts = t + c[s] * h
            yi = y.copy()
            for j in range(s):
                w_ = a[s, j] if s < 6 else b5[j]
                if w_ != 0.0:
                    yi += h * w_ * ks[j]
            # geometry
            if seg_kind == 0:
                z = seg[0] + 1j * seg[1] + ts * (seg[2] + 1j * seg[3])
                dz = seg[2] + 1j * seg[3]
            else:
                th = seg[4] + ts * seg[5]
                e = np.cos(th) + 1j * np.sin(th)
                z = (seg[0] + 1j * seg[1]) + (seg[2] + 1j * seg[3]) * e
                dz = (seg[2] + 1j * seg[3]) * e * 1j * seg[5]
            if pot_kind == 0:
                u = dz
                w_c = 0.0 + 0.0j
            else:
                u = dz
                qz = ((q5[2] * z + q5[1]) * z + q5[0]) / (16.0 * z * z * (z - 1.0) ** 2)
                w_c = dz * qz
            _rhs_fill(rhs, yi, k1, k2, u, w_c)
            ks[s] = rhs
        ynew = y.copy()
        yerr = np.zeros_like(y)
        for j in range(7):
            if b5[j] != 0.0:
                ynew += h * b5[j] * ks[j]
            d = b5[j] - b4[j]
            if d != 0.0:
                yerr += h * d * ks[j]
        errmax = 0.0
        for n in range(bsz):
            for i in range(2):
                for j in range(2):
                    sc = atol + rtol * max(abs(y[n, i, j]), abs(ynew[n, i, j]))
                    e_ = abs(yerr[n, i, j]) / sc
                    if e_ > errmax:
                        errmax = e_
        if errmax <= 1.0:
            t += h
            y = ynew
            nsteps += 1
        fac = 0.9 * errmax ** (-0.2) if errmax > 1e-16 else 5.0
        if fac < 0.2:
            fac = 0.2
        if fac > 5.0:
            fac = 5.0
        h *= fac
        if h > hmax:
            h = hmax
        if h < 1e-14:
            return y, 1
    return y, 0


def _dp_step_batch_numpy(y, k1, k2, seg_kind, seg, pot_kind, q5, rtol, atol, hmax):
    """Pure-numpy mirror of _dp_step_batch (vectorised over the batch)."""
    t = 0.0
    h = min(0.5, hmax)
    nsteps = 0
    ks = [None] * 7
    y = y.copy()
    while t < 1.0 - 1e-15:
        if nsteps > 100000:
            return y, 2
        if t + h > 1.0:
            h = 1.0 - t
        for s in range(7):
            ts = t + _DP_C[s] * h
            yi = y.copy()
            for j in range(s):
                a = _DP_A[s][j] if s < 6 else _DP_B5[j]
                if a != 0.0:
                    yi = yi + h * a * ks[j]
            z, dz = _seg_z(seg_kind, seg, ts)
            if pot_kind == 0:
                u, w = dz, 0.0
            else:
                qz = ((q5[2] * z + q5[1]) * z + q5[0]) / (16.0 * z * z * (z - 1.0) ** 2)
                u, w = dz, dz * qz
            ks[s] = yi @ (u * k1 + w * k2)
        y5 = y + h * sum(_DP_B5[j] * ks[j] for j in range(7) if _DP_B5[j] != 0.0)
        y4 = y + h * sum(_DP_B4[j] * ks[j] for j in range(7) if _DP_B4[j] != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = float(np.max(np.abs(y5 - y4) / scale))
        if err <= 1.0:
            t += h
            y = y5
            nsteps += 1
        fac = 0.9 * max(err, 1e-16) ** (-0.2)
        h *= min(5.0, max(0.2, fac))
        h = min(h, hmax)
        if h < 1e-14:
            return y, 1
    return y, 0


def integrate_segment(y, k1, k2, seg_kind, seg, pot_kind, q5,
                      rtol=1e-11, atol=1e-13, hmax=1.0):
    """Dispatch one path segment to the selected backend.

    y: (B, 2, 2) complex state, k1/k2: (B, 2, 2) lambda-sample coefficient
    matrices, seg: float[6] geometry parameters, q5: float/complex[3].
    """
    y = np.ascontiguousarray(y, dtype=complex)
    k1 = np.ascontiguousarray(k1, dtype=complex)
    k2 = np.ascontiguousarray(k2, dtype=complex)
    q5 = np.ascontiguousarray(q5, dtype=complex)
    seg = np.ascontiguousarray(seg, dtype=float)
    if _HAVE_NUMBA:
        out, status = _dp_step_batch(y, k1, k2, seg_kind, seg, pot_kind, q5,
                                     rtol, atol, hmax)
    else:
        out, status = _dp_step_batch_numpy(y, k1, k2, seg_kind, seg, pot_kind,
                                           q5, rtol, atol, hmax)
    if status == 1:
        raise StepSizeUnderflow("step size underflow on path segment")
    if status == 2:
        raise StepSizeUnderflow("too many steps on path segment")
    return out
