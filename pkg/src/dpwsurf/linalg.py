"""Batched 2x2 complex matrix helpers and the fixed sl2 basis.

The basis (eps_minus, eps_plus, eps) and the bilinear pairing
<X, Y> = -tr(XY)/2 are the ones every other module builds on; the
commutators [eps, eps_minus] = 2i eps_minus, [eps_plus, eps] = 2i eps_plus,
[eps_minus, eps_plus] = i eps are verified in the test suite.
"""
import numpy as np

EPS_MINUS = np.array([[0.0, 0.0], [-1.0, 0.0]], dtype=complex)
EPS_PLUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
EPS = np.array([[-1j, 0.0], [0.0, 1j]], dtype=complex)

ID2 = np.eye(2, dtype=complex)

# Orthonormal su2 basis used to identify R^3; <eps,eps>=1 fixes the scale.
R3_BASIS = (EPS, EPS_PLUS + EPS_MINUS, 1j * (EPS_PLUS - EPS_MINUS))


class BasisConstants:
    """Read-only container for the sl2 basis and pairing."""

    eps_minus = EPS_MINUS
    eps_plus = EPS_PLUS
    eps = EPS

    @staticmethod
    def inner(x, y):
        return inner(x, y)


def inner(x, y):
    """Bilinear Ad-invariant pairing -tr(XY)/2, batched over leading axes."""
    return -0.5 * np.einsum('...ij,...ji->...', x, y)


def herm(m):
    """Conjugate transpose over the trailing 2x2 axes."""
    return np.conj(np.swapaxes(m, -1, -2))


def mul(a, b):
    return a @ b


def det2(m):
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def tr2(m):
    return m[..., 0, 0] + m[..., 1, 1]


def inv2(m):
    """Batched 2x2 inverse via the adjugate. Caller checks det himself."""
    d = det2(m)
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out / d[..., None, None]


def expm2(a):
    """Batched 2x2 matrix exponential.

    Splits off the trace and uses exp(A0) = cosh(mu) I + sinh(mu)/mu A0
    for the traceless part A0 with mu^2 = -det(A0); the mu -> 0 limit is
    taken by series to keep the formula smooth near nilpotent input.
    """
    a = np.asarray(a, dtype=complex)
    t = 0.5 * tr2(a)
    a0 = a - t[..., None, None] * ID2
    musq = -det2(a0)
    mu = np.sqrt(musq)
    small = np.abs(mu) < 1e-6
    mu_safe = np.where(small, 1.0, mu)
    c = np.where(small, 1.0 + musq / 2.0 + musq * musq / 24.0, np.cosh(mu_safe))
    s = np.where(small, 1.0 + musq / 6.0 + musq * musq / 120.0,
                 np.sinh(mu_safe) / mu_safe)
    out = c[..., None, None] * ID2 + s[..., None, None] * a0
    return np.exp(t)[..., None, None] * out


def maxabs(a):
    """Entrywise max-modulus norm used for every residual in the package."""
    a = np.asarray(a)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a)))


def su2_coordinates(f):
    """Project (a batch of) 2x2 matrices onto the orthonormal su2 basis.

    Returns real coordinates w.r.t. {eps, eps_+ + eps_-, i(eps_+ - eps_-)};
    any trace part of the input is annihilated by the pairing.
    """
    f = np.asarray(f, dtype=complex)
    coords = np.stack([inner(f, b) for b in R3_BASIS], axis=-1)
    return coords.real


def su2_point(x):
    """Inverse of su2_coordinates for a real 3-vector."""
    x = np.asarray(x, dtype=float)
    return (x[..., 0, None, None] * R3_BASIS[0]
            + x[..., 1, None, None] * R3_BASIS[1]
            + x[..., 2, None, None] * R3_BASIS[2])
