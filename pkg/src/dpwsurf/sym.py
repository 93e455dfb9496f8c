"""Sym-type immersion formulas, ambient coordinates, and closing checks.

From a unitary frame loop F the three space forms receive their points by

    R3:  f = -2 i lambda H^{-1} (d_lambda F) F^{-1}        (su2 ~ R^3)
    S3:  f = F(lambda1) F(lambda0)^{-1}                    (SU2 ~ S^3)
    H3:  f = F(lambda0) conj(F(lambda0))^t                 (Hermitian ~ H^3)

with the GL2 variants subtracting the trace term (R3), multiplying by the
determinant-ratio square root (S3), and dividing by |det F| (H3).
"""
from dataclasses import dataclass

import numpy as np

from .errors import SymPointsCoincide, ZeroParameter
from .linalg import det2, herm, inv2, maxabs, su2_coordinates, tr2
from .loops import Loop

# Pauli matrices for the Minkowski coordinate extraction
_SIG = (np.array([[0, 1], [1, 0]], dtype=complex),
        np.array([[0, -1j], [1j, 0]], dtype=complex),
        np.array([[1, 0], [0, -1]], dtype=complex))


@dataclass
class SpaceformTarget:
    """Ambient space tag plus the Sym evaluation data."""

    tag: str
    H: float
    lambda0: complex
    lambda1: complex | None = None

    def __post_init__(self):
        lam0 = complex(self.lambda0)
        if self.tag == "R3":
            if abs(abs(lam0) - 1) > 1e-12:
                raise ZeroParameter("R3 Sym point must lie on the unit circle")
            if self.H == 0:
                raise ZeroParameter("R3 needs H != 0")
        elif self.tag == "S3":
            lam1 = complex(self.lambda1)
            if abs(abs(lam0) - 1) > 1e-12 or abs(abs(lam1) - 1) > 1e-12:
                raise ZeroParameter("S3 Sym points must lie on the unit circle")
            if abs(lam0 - lam1) < 1e-12:
                raise SymPointsCoincide("S3 Sym points coincide")
            mu = lam1 / lam0
            h = 1j * (1 + mu) / (1 - mu)
            if abs(h.imag) > 1e-9:
                raise ZeroParameter("S3 Sym ratio gives nonreal H = %s" % h)
        elif self.tag == "H3":
            s = abs(lam0)
            if not (0 < s < 1):
                raise ZeroParameter("H3 Sym point needs 0 < |lambda0| < 1")
        else:
            raise ZeroParameter("unknown spaceform %r" % (self.tag,))

    @classmethod
    def r3(cls, H=1.0, lambda0=1.0 + 0j):
        return cls("R3", float(H), complex(lambda0))

    @classmethod
    def s3(cls, lambda0, lambda1):
        mu = complex(lambda1) / complex(lambda0)
        h = (1j * (1 + mu) / (1 - mu)).real
        return cls("S3", float(h), complex(lambda0), complex(lambda1))

    @classmethod
    def h3(cls, lambda0):
        s = abs(complex(lambda0))
        return cls("H3", (1 + s * s) / (1 - s * s), complex(lambda0))


def sym_r3(f: Loop, H, lambda0=1.0 + 0j, generalized=False):
    """Euclidean Sym point: su2 coordinates of -2 i lam/H (dF) F^{-1}."""
    df = f.d_lambda()
    fv = f.eval(lambda0)
    dfv = df.eval(lambda0)
    m = dfv @ inv2(fv)
    if generalized:
        m = m - tr2(m)[..., None, None] * np.eye(2)
    m = -2j * complex(lambda0) / H * m
    return su2_coordinates(m)


def sym_s3(f: Loop, lambda0, lambda1, generalized=False):
    """Spherical Sym point as a unit 4-vector (Re p, Im p, Re q, Im q)."""
    if abs(complex(lambda0) - complex(lambda1)) < 1e-14:
        raise SymPointsCoincide("lambda0 = lambda1")
    f0 = f.eval(lambda0)
    f1 = f.eval(lambda1)
    m = f1 @ inv2(f0)
    if generalized:
        ratio = det2(f0) / det2(f1)
        m = np.sqrt(ratio) * m
    return su2_to_s3(m)


def su2_to_s3(m):
    """Coordinates of an (almost) SU2 matrix [[p, q], [-conj q, conj p]]."""
    p = 0.5 * (m[..., 0, 0] + np.conj(m[..., 1, 1]))
    q = 0.5 * (m[..., 0, 1] - np.conj(m[..., 1, 0]))
    return np.stack([p.real, p.imag, q.real, q.imag], axis=-1)


def sym_h3(f: Loop, lambda0, generalized=False):
    """Hyperbolic Sym point in Minkowski coordinates (x0, x1, x2, x3)."""
    f0 = f.eval(lambda0)
    m = f0 @ herm(f0)
    if generalized:
        m = m / np.abs(det2(m)[..., None, None]) ** 0.5
    return hermitian_to_h3(m)


def hermitian_to_h3(m):
    x0 = 0.5 * tr2(m).real
    xs = [0.5 * np.einsum('...ij,...ji->...', m, s).real for s in _SIG]
    return np.stack([x0] + xs, axis=-1)


def ambient_residual(coords, tag):
    """Deviation from the ambient constraint (unit sphere / hyperboloid)."""
    coords = np.asarray(coords, dtype=float)
    if tag == "R3":
        return np.zeros(coords.shape[:-1])
    if tag == "S3":
        return np.abs(np.sum(coords ** 2, axis=-1) - 1.0)
    q = (coords[..., 0] ** 2 - coords[..., 1] ** 2
         - coords[..., 2] ** 2 - coords[..., 3] ** 2)
    return np.abs(q - 1.0)


def sym_point(f: Loop, target: SpaceformTarget, generalized=False):
    if target.tag == "R3":
        return sym_r3(f, target.H, target.lambda0, generalized)
    if target.tag == "S3":
        return sym_s3(f, target.lambda0, target.lambda1, generalized)
    return sym_h3(f, target.lambda0, generalized)


# ---------------------------------------------------------------------------
# closing checks
# ---------------------------------------------------------------------------

def closing_check(loops, target: SpaceformTarget):
    """Per-spaceform closing residuals for unitarized monodromy loops.

    R3: distance of H_k(lambda0) to +-Id and the lambda-derivative norm.
    S3: two-point agreement plus the +-Id test.  H3: +-Id at the interior
    Sym point via Laurent evaluation.  The eigenvalue shortcut reports
    |tr/2| - 1 and d_lambda tr/2 at lambda0.
    """
    out = {"spaceform": target.tag, "ends": []}
    lam0 = complex(target.lambda0)
    for k, h in enumerate(loops):
        entry = {"end": k}
        v0 = h.eval(lam0)
        dev_id = min(maxabs(v0 - np.eye(2)), maxabs(v0 + np.eye(2)))
        entry["id_residual"] = float(dev_id)
        t = 0.5 * tr2(h.samples)
        tloop = Loop(t, h.radius)
        entry["halftrace_minus_one"] = float(abs(abs(tloop.eval(lam0)) - 1.0))
        entry["halftrace_derivative"] = float(abs(tloop.d_lambda().eval(lam0)))
        if target.tag == "R3":
            entry["derivative_residual"] = float(maxabs(h.d_lambda().eval(lam0)))
        elif target.tag == "S3":
            v1 = h.eval(complex(target.lambda1))
            entry["two_point_residual"] = float(maxabs(v0 - v1))
        out["ends"].append(entry)
    keys = [k for k in out["ends"][0] if k != "end"]
    out["worst"] = {k: max(e[k] for e in out["ends"]) for k in keys}
    return out


# ---------------------------------------------------------------------------
# frame structure audit
# ---------------------------------------------------------------------------

_FD4 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0  # 5-point first derivative


def verify_frame_structure(frame_at, z0, spacing=1e-3, tol_profile=None):
    """Finite-difference audit of the unitary-frame Maurer-Cartan form.

    frame_at(z) must return the frame Loop at z.  Checks (a) the lambda
    structure: alpha = F^{-1} dF holds only powers -1, 0, 1, the lambda^-1
    part sits in the upper-triangular slot of the (1,0) component and
    lambda^+1 in the lower-triangular slot of the (0,1) component; and
    (b) the Maurer-Cartan residual d alpha + alpha wedge alpha via mixed
    finite differences on a 5x5 stencil.
    """
    h = spacing
    offs = (-2, -1, 0, 1, 2)
    frames = {}
    for i in offs:
        for j in offs:
            frames[(i, j)] = frame_at(complex(z0) + i * h + 1j * j * h)
    n = frames[(0, 0)].n
    radius = frames[(0, 0)].radius
    f00inv = inv2(frames[(0, 0)].samples)

    def alpha_x(j):
        s = sum(_FD4[m + 2] * frames[(m, j)].samples for m in offs if abs(m) <= 2)
        return inv2(frames[(0, j)].samples) @ (s / h)

    def alpha_y(i):
        s = sum(_FD4[m + 2] * frames[(i, m)].samples for m in offs if abs(m) <= 2)
        return inv2(frames[(i, 0)].samples) @ (s / h)

    ax0 = alpha_x(0)
    ay0 = alpha_y(0)
    dax_dy = sum(_FD4[m + 2] * alpha_x(m) for m in (-2, -1, 1, 2)) / h
    day_dx = sum(_FD4[m + 2] * alpha_y(m) for m in (-2, -1, 1, 2)) / h
    mc = day_dx - dax_dy + ax0 @ ay0 - ay0 @ ax0
    mc_residual = maxabs(mc)

    # lambda structure of alpha' = (ax - i ay)/2 and alpha'' = (ax + i ay)/2
    ap = Loop(0.5 * (ax0 - 1j * ay0), radius)
    app = Loop(0.5 * (ax0 + 1j * ay0), radius)
    half = n // 2
    scale = max(maxabs(ax0), maxabs(ay0), 1e-30)
    bad = 0.0
    for lp in (ap, app):
        c = lp.coeffs
        k = lp.powers
        bad = max(bad, maxabs(c[np.abs(k) >= 2]))
    cm1 = ap.coeffs[half - 1]   # lambda^-1 of the (1,0) part: eps_+ slot only
    cm1_bad = max(abs(cm1[0, 0]), abs(cm1[1, 0]), abs(cm1[1, 1]))
    cm1_pp = maxabs(app.coeffs[half - 1])
    cp1 = app.coeffs[half + 1]  # lambda^+1 of the (0,1) part: eps_- slot only
    cp1_bad = max(abs(cp1[0, 0]), abs(cp1[0, 1]), abs(cp1[1, 1]))
    cp1_p = maxabs(ap.coeffs[half + 1])
    structure_residual = max(bad, cm1_bad, cp1_bad, cm1_pp, cp1_p) / scale
    return {
        "structure_residual": float(structure_residual),
        "mc_residual": float(mc_residual / max(scale, 1.0)),
        "alpha_scale": float(scale),
        "eps_plus_weight": float(abs(cm1[0, 1])),
        "eps_minus_weight": float(abs(cp1[1, 0])),
        "spacing": float(h),
    }
