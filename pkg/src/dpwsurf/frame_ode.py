"""Integration of d Phi = Phi xi along paths, and monodromy representations.

Every lambda-sample is an independent 2x2 linear ODE; the whole loop is
advanced with one shared adaptive step controller so it stays coherent in
lambda.  Paths are polylines and circular arcs kept a safe distance delta
from the punctures.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ToleranceNotMet
from .kernels import integrate_segment
from .linalg import det2, maxabs
from .loops import Loop
from .potentials import (DelaunayParams, TrinoidParams, TrinoidPotential,
                         delaunay_matrix, trinoid_q_coeffs, trinoid_rho)

DEFAULT_RTOL = 1e-11
DEFAULT_DELTA = 0.05


@dataclass
class PathSpec:
    """A concatenation of 'line' and 'arc' segments starting at base.

    Segments: ("line", z0, z1) or ("arc", center, radius, th0, th1);
    arcs are parametrized counterclockwise when th1 > th0.
    """

    base: complex
    segments: list = field(default_factory=list)
    winding: str = ""
    delta: float = DEFAULT_DELTA

    def line_to(self, z1):
        z0 = self.end
        self.segments.append(("line", complex(z0), complex(z1)))
        return self

    def arc(self, center, radius, th0, th1):
        self.segments.append(("arc", complex(center), float(radius),
                              float(th0), float(th1)))
        return self

    @property
    def end(self):
        if not self.segments:
            return self.base
        seg = self.segments[-1]
        if seg[0] == "line":
            return seg[2]
        _, c, r, th0, th1 = seg
        return c + r * np.exp(1j * th1)

    def min_distance(self, punctures):
        """Minimum distance from the path to any puncture."""
        best = np.inf
        for seg in self.segments:
            for zp in punctures:
                if seg[0] == "line":
                    _, z0, z1 = seg
                    d = z1 - z0
                    t = np.clip(((zp - z0) * np.conj(d)).real / max(abs(d) ** 2, 1e-300),
                                0.0, 1.0)
                    best = min(best, abs(z0 + t * d - zp))
                else:
                    _, c, r, th0, th1 = seg
                    ang = np.angle(zp - c)
                    lo, hi = min(th0, th1), max(th0, th1)
                    # candidate angles: the radial projection modulo 2 pi, clamped
                    cands = [lo, hi]
                    for kk in range(-2, 3):
                        a = ang + 2 * np.pi * kk
                        if lo <= a <= hi:
                            cands.append(a)
                    for a in cands:
                        best = min(best, abs(c + r * np.exp(1j * a) - zp))
        return best

    def check_admissible(self, punctures):
        d = self.min_distance(punctures)
        if d < self.delta:
            raise ValueError(
                "path approaches a puncture to distance %.4g < delta %.4g"
                % (d, self.delta))


def loop_around(z0, center, radius=0.45, delta=DEFAULT_DELTA, winding=""):
    """Closed loop: radial approach, full counterclockwise circle, return."""
    th = np.angle(z0 - center)
    entry = center + radius * np.exp(1j * th)
    path = PathSpec(base=complex(z0), winding=winding, delta=delta)
    path.line_to(entry)
    path.arc(center, radius, th, th + 2 * np.pi)
    path.line_to(z0)
    return path


class _PotentialDriver:
    """Adapter from potential objects to the kernel coefficient format."""

    def __init__(self, pot):
        if isinstance(pot, TrinoidPotential):
            self.kind = 1
            self.k1 = pot.k1
            self.k2 = pot.k2
            self.q5 = trinoid_q_coeffs(pot.p)
            self.punctures = list(pot.punctures)
        elif isinstance(pot, Loop):
            # constant coefficient matrix: xi = A dz
            self.kind = 0
            self.k1 = pot.samples
            self.k2 = np.zeros_like(pot.samples)
            self.q5 = np.zeros(3, dtype=complex)
            self.punctures = []
        else:
            raise TypeError("unsupported potential %r" % (pot,))

    def n(self):
        return self.k1.shape[0]


def _segment_params(seg):
    if seg[0] == "line":
        _, z0, z1 = seg
        return 0, np.array([z0.real, z0.imag, (z1 - z0).real, (z1 - z0).imag,
                            0.0, 0.0])
    _, c, r, th0, th1 = seg
    return 1, np.array([c.real, c.imag, r, 0.0, th0, th1 - th0])


def integrate_frame(pot, path: PathSpec, phi0=None, rtol=DEFAULT_RTOL,
                    det_tol=1e-10):
    """Solve d Phi = Phi xi along the path; returns the endpoint Loop.

    The determinant drift over the whole path must stay below det_tol
    (xi is trace free, so det Phi is a constant of motion).
    """
    drv = _PotentialDriver(pot)
    path.check_admissible(drv.punctures)
    n = drv.n()
    if phi0 is None:
        y = np.broadcast_to(np.eye(2, dtype=complex), (n, 2, 2)).copy()
    else:
        y = np.array(phi0.samples if isinstance(phi0, Loop) else phi0,
                     dtype=complex)
    d0 = det2(y)
    for seg in path.segments:
        kind, parms = _segment_params(seg)
        y = integrate_segment(y, drv.k1, drv.k2, kind, parms, drv.kind, drv.q5,
                              rtol=rtol)
    drift = maxabs(det2(y) - d0)
    if drift > det_tol * max(1.0, maxabs(np.abs(d0))):
        raise ToleranceNotMet("det drift %.3e exceeds %.1e over the path"
                              % (drift, det_tol))
    radius = pot.radius if isinstance(pot, Loop) else pot.radius
    return Loop(y, radius)


@dataclass
class MonodromyRep:
    """Monodromies (H0, H1, Hinf) with H0 H1 Hinf = Id."""

    H0: Loop
    H1: Loop
    Hinf: Loop
    base: complex
    phi0: Loop | None = None

    @property
    def loops(self):
        return (self.H0, self.H1, self.Hinf)

    def product_residual(self):
        prod = self.H0.mul(self.H1).mul(self.Hinf)
        return maxabs(prod.samples - np.eye(2))

    def det_residual(self):
        return max(maxabs(h.det().samples - 1.0) for h in self.loops)


def monodromy(pot, params=None, phi0=None, z0=0.5, circle_radius=0.45,
              rtol=DEFAULT_RTOL, delta=DEFAULT_DELTA):
    """Monodromy representation of a trinoid (or cylinder) potential.

    For the trinoid: H_k = Phi(gamma_k end) Phi(z0)^{-1} for the loops
    around 0 and 1 based at z0, and Hinf = (H0 H1)^{-1}.  For a constant
    Delaunay coefficient the deck translation gives exp(2 pi i A) directly.
    """
    if isinstance(pot, Loop) or isinstance(params, DelaunayParams):
        a = pot.samples if isinstance(pot, Loop) else delaunay_matrix(
            params, pot.lam)
        from .linalg import expm2
        m = Loop(expm2(2j * np.pi * a), pot.radius)
        return m
    hs = []
    for center in (0.0, 1.0):
        path = loop_around(z0, center, circle_radius, delta=delta,
                           winding="around %g" % center)
        phi_end = integrate_frame(pot, path, phi0=phi0, rtol=rtol)
        if phi0 is not None:
            h = phi_end.mul(phi0.inv())
        else:
            h = phi_end
        hs.append(h)
    hinf = hs[0].mul(hs[1]).inv()
    return MonodromyRep(H0=hs[0], H1=hs[1], Hinf=hinf, base=complex(z0),
                        phi0=phi0)


def trace_identity_check(rep: MonodromyRep, p: TrinoidParams):
    """max over samples and ends of |tr(H_k)/2 - cos(2 pi rho_k)|."""
    dev = 0.0
    for k, h in enumerate(rep.loops):
        t = 0.5 * (h.samples[:, 0, 0] + h.samples[:, 1, 1])
        rho = trinoid_rho(p, h.lam, k)
        dev = max(dev, maxabs(t - np.cos(2 * np.pi * rho)))
    return float(dev)


def half_traces(rep: MonodromyRep):
    """Real half-traces t_k(lambda_j) of the three monodromies."""
    return [0.5 * (h.samples[:, 0, 0] + h.samples[:, 1, 1]).real
            for h in rep.loops]
