"""The two potential families and their parameter gates.

Delaunay:  xi = A dz on the cylinder coordinate (A dz/z on C^*), with
    A = i c eps + (a/lambda + conj(b)) eps_+ - (conj(a) lambda + b) eps_-,
plus the weight <-> (a, b) solver, the eigenvalue mu(lambda), and the
closed-form extended frame of the translationally invariant family.

Trinoid:   xi = [[0, dz/lambda], [lambda h(lambda) Q/dz, 0]] on the thrice-
punctured sphere, with h(lambda) = (lambda - l0)(lambda - 1/l0)/lambda and
Q the quadratic-over-(16 z^2 (z-1)^2) differential; admissibility is the
triangle/sum battery on n_k, m_k (and on v_k itself in the Euclidean case).
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import (EvaluationAtPuncture, GaugeNotPlus, InequalityViolation,
                     NegativeRadicand, WeightOutOfBounds, ZeroParameter)
from .kernels import integrate_linear_batch
from .linalg import EPS, EPS_MINUS, EPS_PLUS, expm2, herm, maxabs
from .loops import DEFAULT_N, Loop, nodes

SPACEFORMS = ("R3", "S3", "H3")


def _check_spaceform(tag):
    if tag not in SPACEFORMS:
        raise ValueError("spaceform must be one of %s" % (SPACEFORMS,))


# ---------------------------------------------------------------------------
# Delaunay family
# ---------------------------------------------------------------------------

@dataclass
class DelaunayParams:
    a: float
    b: float
    c: float = 0.0
    H: float = 1.0
    spaceform: str = "R3"
    lambda0: complex = 1.0 + 0j
    lambda1: complex | None = None   # second Sym point, S3 only

    def __post_init__(self):
        _check_spaceform(self.spaceform)
        if self.a == 0 or self.b == 0:
            raise ZeroParameter("Delaunay parameters a, b must be nonzero")
        if self.H == 0:
            raise ZeroParameter("mean curvature H must be nonzero")
        if self.spaceform == "S3" and self.lambda1 is None:
            self.lambda1 = np.conj(self.lambda0)

    @property
    def weight(self):
        return 16.0 * self.a * self.b / _weight_denominator(self.H, self.spaceform)


def _weight_denominator(h, spaceform):
    if spaceform == "R3":
        return abs(h)
    if spaceform == "S3":
        return np.sqrt(h * h + 1.0)
    if h * h <= 1.0:
        raise ZeroParameter("H3 requires |H| > 1")
    return np.sqrt(h * h - 1.0)


def delaunay_matrix(p, lam):
    """A(lambda), vectorized over lambda."""
    lam = np.asarray(lam, dtype=complex)
    out = 1j * p.c * EPS * np.ones(lam.shape + (1, 1))
    out = out + (p.a / lam + np.conj(p.b))[..., None, None] * EPS_PLUS
    out = out - (np.conj(p.a) * lam + p.b)[..., None, None] * EPS_MINUS
    return out


def delaunay_potential(p, n=DEFAULT_N, radius=1.0):
    """The residue A as a Loop; the 1-form is A dz in the cylinder coordinate."""
    return Loop(delaunay_matrix(p, nodes(n, radius)), radius)


def delaunay_mu(p, lam):
    """Local eigenvalue mu(lambda) of A, principal branch at lambda = 1.

    mu^2 = c^2 + (a/lambda + conj(b))(conj(a) lambda + b); for real (a, b)
    and c = 0 this is a^2 + b^2 + a b (lambda + 1/lambda), and it is real
    nonnegative on the unit circle whenever the closing normalization
    a + b = 1/2 holds, so the principal square root is the continuous
    branch from lambda = 1.
    """
    lam = np.asarray(lam, dtype=complex)
    musq = (p.c * p.c
            + (p.a / lam + np.conj(p.b)) * (np.conj(p.a) * lam + p.b))
    return np.sqrt(musq)


def delaunay_mu_squared(p, lam):
    lam = np.asarray(lam, dtype=complex)
    return (p.c * p.c + (p.a / lam + np.conj(p.b)) * (np.conj(p.a) * lam + p.b))


def spaceform_sym_points(h, spaceform):
    """Default Sym evaluation data per spaceform (unit-circle conventions).

    R3: lambda0 = 1.  S3: lambda0 with mu(lambda0) = mu(conj(lambda0)),
    determined by H through the Sym ratio.  H3: lambda0 = s in (0, 1) with
    H = (1 + s^2)/(1 - s^2).
    """
    if spaceform == "R3":
        return 1.0 + 0j, None
    if spaceform == "S3":
        lam0 = np.sqrt((h + 1j) / (h - 1j))
        if lam0.imag < 0:
            lam0 = -lam0
        return lam0, np.conj(lam0)
    s = np.sqrt((abs(h) - 1.0) / (abs(h) + 1.0))
    return complex(s), None


def delaunay_solve_weight(w, h, spaceform="R3", lambda0=None):
    """Solve the closing conditions + weight equation for real (a, b), a >= b.

    Closing pins mu(lambda0) = 1/2, i.e. a^2 + b^2 + a b chi = 1/4 with
    chi = lambda0 + 1/lambda0 at the Sym point, while the weight fixes
    16 a b.  Real solvability of the two discriminants reproduces the
    spaceform weight bounds exactly, so rejection is sharp at the boundary.
    """
    _check_spaceform(spaceform)
    if h == 0:
        raise ZeroParameter("H must be nonzero")
    if lambda0 is None:
        lambda0, _ = spaceform_sym_points(h, spaceform)
    chi = float((np.asarray(lambda0) + 1.0 / np.asarray(lambda0)).real)
    ab = w * _weight_denominator(h, spaceform) / 16.0
    disc_m = 0.25 - ab * (2.0 + chi)       # (a - b)^2
    disc_p = 0.25 + ab * (2.0 - chi)       # (a + b)^2
    if disc_m < 0:
        raise WeightOutOfBounds(
            "weight %g exceeds the %s upper bound (margin %.3e)"
            % (w, spaceform, disc_m), margin=float(disc_m))
    if disc_p < 0:
        raise WeightOutOfBounds(
            "weight %g below the %s lower bound (margin %.3e)"
            % (w, spaceform, disc_p), margin=float(disc_p))
    s, d = np.sqrt(disc_p), np.sqrt(disc_m)
    a = 0.5 * (s + d)
    b = 0.5 * (s - d)
    if a == 0 or b == 0:
        raise ZeroParameter("weight solution degenerates to a twice-punctured sphere (b = 0)")
    lam1 = np.conj(complex(lambda0)) if spaceform == "S3" else None
    return DelaunayParams(a=float(a), b=float(b), c=0.0, H=float(h),
                          spaceform=spaceform, lambda0=complex(lambda0),
                          lambda1=lam1)


def delaunay_weight_bounds(h, spaceform="R3"):
    """Admissible weight interval (lower, upper); infinite sides are None."""
    den = _weight_denominator(h, spaceform)
    if spaceform == "R3":
        return None, 1.0 / abs(h)
    if spaceform == "S3":
        return -2.0 * (np.sqrt(h * h + 1) + abs(h)), 2.0 * (np.sqrt(h * h + 1) - abs(h))
    return None, 2.0 * (abs(h) - np.sqrt(h * h - 1))


# ---- closed-form extended frame -------------------------------------------

def delaunay_profile(p, xs, rtol=1e-12):
    """Integrate v'^2 = -(v^2 - 4a^2)(v^2 - 4b^2), v(0) = 2b along xs.

    Returns (v, v') at the requested points; each accepted step is nudged
    back onto the algebraic first integral, whose drift is the natural
    self-check of the integration.
    """
    a, b = p.a, p.b
    xs = np.atleast_1d(np.asarray(xs, dtype=float))

    def rhs(t, y):
        v, vp = y[0], y[1]
        return np.array([vp, 4.0 * (a * a + b * b) * v - 2.0 * v ** 3])

    def project(y):
        # one Gauss-Newton step onto E(v, v') = v'^2 + (v^2-4a^2)(v^2-4b^2) = 0
        v, vp = y[0].real, y[1].real
        e = vp * vp + (v * v - 4 * a * a) * (v * v - 4 * b * b)
        gv = 2 * v * (v * v - 4 * b * b) + 2 * v * (v * v - 4 * a * a)
        gvp = 2 * vp
        g2 = gv * gv + gvp * gvp
        if g2 > 1e-12:
            y = y - e * np.array([gv, gvp]) / g2
        return y

    out = np.empty((len(xs), 2))
    # walk outward from 0 in each direction so the initial value stays exact
    for sign in (1.0, -1.0):
        y = np.array([2.0 * b, 0.0])
        x_cur = 0.0
        sel = xs >= 0 if sign > 0 else xs < 0
        pts = np.sort(xs[sel]) if sign > 0 else -np.sort(-xs[sel])
        for x in pts:
            if x != x_cur:
                y = integrate_linear_batch(rhs, y, x_cur, x, rtol=rtol, atol=1e-14)
                y = project(y)
                x_cur = x
            out[np.where(xs == x)[0]] = y.real
    return out[:, 0], out[:, 1]


def _theta1(v, lam, a, b):
    """x-part of the unitary-frame Maurer-Cartan form along the axis (H = 1)."""
    q = -2.0 * a * b / lam
    qs = -2.0 * a * b * lam
    return (-(q / v + v / 2.0)[..., None, None] * EPS_PLUS
            - (qs / v + v / 2.0)[..., None, None] * EPS_MINUS)


class DelaunayFrame:
    """Closed-form extended frame of exp(z A) for real a, b and c = 0.

    B(x) solves the gauge equation dB = B A dx - Theta_1 B dx with
    B(0) = Id and is independent of y; the unitary factor is
    F = exp((x + i y) A) B(x)^{-1}.  B-columns are cached per x so grids
    cost one ODE panel per column.
    """

    def __init__(self, p: DelaunayParams, n=DEFAULT_N, radius=1.0, rtol=1e-12):
        if p.c != 0.0 or abs(np.imag(p.a)) > 0 or abs(np.imag(p.b)) > 0:
            raise ZeroParameter("closed-form frame needs real a, b and c = 0"
                                " (normalize first)")
        self.p = p
        self.n = n
        self.radius = radius
        self.rtol = rtol
        self.lam = nodes(n, radius)
        self.A = delaunay_matrix(p, self.lam)
        ident = np.broadcast_to(np.eye(2, dtype=complex), (n, 2, 2)).copy()
        # joint state cache {x: (B samples, v, v')}; the system is autonomous
        # in x so integration may restart from any cached state
        self._cache = {0.0: (ident, 2.0 * p.b, 0.0)}

    def _rhs(self, t, y):
        bmat = y[:self.n * 4].reshape(self.n, 2, 2)
        v, vp = y[-2].real, y[-1].real
        a, b = self.p.a, self.p.b
        db = bmat @ self.A - _theta1(v, self.lam, a, b) @ bmat
        dv = np.array([vp, 4.0 * (a * a + b * b) * v - 2.0 * v ** 3],
                      dtype=complex)
        return np.concatenate([db.ravel(), dv])

    def b_at(self, x):
        """Gauge factor B(x) as loop samples, cached per column."""
        x = float(x)
        if x in self._cache:
            return self._cache[x][0]
        x0 = min(self._cache, key=lambda c: abs(c - x))
        bs0, v0, vp0 = self._cache[x0]
        y0 = np.concatenate([bs0.ravel(), np.array([v0, vp0], dtype=complex)])
        y = integrate_linear_batch(self._rhs, y0, x0, x, rtol=self.rtol, atol=1e-14)
        bs = y[:self.n * 4].reshape(self.n, 2, 2)
        self._cache[x] = (bs, float(y[-2].real), float(y[-1].real))
        return bs

    def phi_at(self, x, y):
        return expm2((x + 1j * y) * self.A)

    def pair_at(self, x, y):
        """IwasawaPair-compatible (F, B) loops at z = x + i y."""
        from .factorization import IwasawaPair
        bs = self.b_at(x)
        phi = self.phi_at(x, y)
        fs = phi @ np.linalg.inv(bs)
        floop, bloop = Loop(fs, self.radius), Loop(bs, self.radius)
        pair = IwasawaPair(F=floop, B=bloop)
        pair.residual = maxabs(fs @ bs - phi) / max(1.0, maxabs(phi))
        pair.unitary_residual = floop.unitarity_residual()
        bc = bloop.coeffs
        pair.neg_power_mass = maxabs(bc[bloop.powers < 0]) / max(1.0, maxabs(bc))
        return pair


def delaunay_explicit_frame(p, x, y, n=DEFAULT_N, radius=1.0, rtol=1e-12):
    """One-shot closed-form Iwasawa factorization of exp((x + iy) A)."""
    return DelaunayFrame(p, n=n, radius=radius, rtol=rtol).pair_at(x, y)


# ---------------------------------------------------------------------------
# trinoid family
# ---------------------------------------------------------------------------

@dataclass
class TrinoidParams:
    v0: float
    v1: float
    vinf: float
    H: float = 1.0
    spaceform: str = "R3"
    lambda0: complex = 1.0 + 0j

    def __post_init__(self):
        _check_spaceform(self.spaceform)
        if self.v0 == 0 or self.v1 == 0 or self.vinf == 0:
            raise ZeroParameter("end parameters v_k must be nonzero")
        lam0 = complex(self.lambda0)
        if lam0 in (0, -1):
            raise ZeroParameter("lambda0 may not be 0 or -1")
        on_circle = abs(abs(lam0) - 1.0) < 1e-12
        on_real = abs(lam0.imag) < 1e-12
        if not (on_circle or on_real):
            raise ZeroParameter("lambda0 must lie on the unit circle or the real line")
        if self.spaceform == "H3" and not (on_real and 0 < abs(lam0) < 1):
            raise ZeroParameter("H3 needs real lambda0 with 0 < |lambda0| < 1")
        if self.spaceform == "S3" and not on_circle:
            raise ZeroParameter("S3 needs lambda0 on the unit circle")

    @property
    def vs(self):
        return (self.v0, self.v1, self.vinf)


def trinoid_h(p, lam):
    """h(lambda) = (lambda - l0)(lambda - 1/l0)/lambda; real on S^1."""
    lam = np.asarray(lam, dtype=complex)
    l0 = complex(p.lambda0)
    return (lam - l0) * (lam - 1.0 / l0) / lam


def trinoid_q(p, z):
    """Coefficient of the Hopf-type quadratic differential."""
    z = np.asarray(z, dtype=complex)
    num = p.vinf * z * z + (p.v1 - p.v0 - p.vinf) * z + p.v0
    return num / (16.0 * z * z * (z - 1.0) ** 2)


def trinoid_q_coeffs(p):
    """Numerator coefficients (c0, c1, c2) of q(z) for the ODE kernels."""
    return np.array([p.v0, p.v1 - p.v0 - p.vinf, p.vinf], dtype=complex)


class TrinoidPotential:
    """Evaluator for xi(z, lambda) = E+ dz/lambda + E- lambda h q(z) dz."""

    def __init__(self, p: TrinoidParams, n=DEFAULT_N, radius=1.0):
        self.p = p
        self.n = n
        self.radius = radius
        self.lam = nodes(n, radius)
        self.h = trinoid_h(p, self.lam)
        # per-sample coefficient matrices for the integrator kernels
        self.k1 = (1.0 / self.lam)[:, None, None] * EPS_PLUS
        self.k2 = (self.lam * self.h)[:, None, None] * (-EPS_MINUS)
        self.punctures = (0.0, 1.0)

    def at(self, z):
        """xi/dz at z, as loop samples (N, 2, 2)."""
        z = complex(z)
        if z in (0.0, 1.0):
            raise EvaluationAtPuncture("potential evaluated at puncture z=%s" % z)
        q = trinoid_q(self.p, z)
        out = np.zeros((self.n, 2, 2), dtype=complex)
        out[:, 0, 1] = 1.0 / self.lam
        out[:, 1, 0] = self.lam * self.h * q
        return out


def trinoid_potential(p, n=DEFAULT_N, radius=1.0):
    return TrinoidPotential(p, n=n, radius=radius)


def trinoid_rho(p, lam, k):
    """rho_k(lambda) = 1/2 - sqrt(1 + v_k h(lambda)/4)/2, principal branch.

    Raises when the radicand goes negative on real input (the admissibility
    hypothesis); complex lambda off the circle is continued analytically.
    """
    v = p.vs[{0: 0, 1: 1, "inf": 2, 2: 2}[k]]
    rad = 1.0 + v * trinoid_h(p, lam) / 4.0
    rad_arr = np.asarray(rad)
    if np.all(np.abs(rad_arr.imag) < 1e-12):
        if np.any(rad_arr.real < -1e-12):
            raise NegativeRadicand(
                "1 + v_%s h/4 = %.6f < 0" % (k, float(np.min(rad_arr.real))))
        rad_arr = np.maximum(rad_arr.real, 0.0)
    return 0.5 - 0.5 * np.sqrt(rad_arr + 0j)


def trinoid_nm(p):
    """(n_k, m_k) = rho_k at lambda = -1 and +1 for k in (0, 1, inf)."""
    ns = np.array([np.real(trinoid_rho(p, -1.0 + 0j, k)) for k in (0, 1, 2)])
    ms = np.array([np.real(trinoid_rho(p, 1.0 + 0j, k)) for k in (0, 1, 2)])
    return ns, ms


@dataclass
class InequalityReport:
    passed: bool
    margins: dict = field(default_factory=dict)

    def worst(self):
        name = min(self.margins, key=lambda k: self.margins[k])
        return name, self.margins[name]


def trinoid_inequalities(p) -> InequalityReport:
    """Signed-margin report of the admissibility battery.

    Radicand positivity at lambda = +-1 (the hypothesis), sum and triangle
    inequalities on n_k for all spaceforms, the same on m_k for S3/H3, and
    the triangle inequality on v_k itself for R3.  A margin >= 0 means the
    inequality holds (equality allowed).
    """
    margins = {}
    h1 = float(np.real(trinoid_h(p, 1.0 + 0j)))
    hm1 = float(np.real(trinoid_h(p, -1.0 + 0j)))
    for name, v in zip(("v0", "v1", "vinf"), p.vs):
        margins["radicand_%s_minus1" % name] = 1.0 + v * hm1 / 4.0
        margins["radicand_%s_plus1" % name] = 1.0 + v * h1 / 4.0
    if p.spaceform == "R3":
        av = np.abs(np.asarray(p.vs))
        for i, j, k in ((0, 1, 2), (1, 0, 2), (2, 0, 1)):
            margins["v_triangle_%d" % i] = float(av[j] + av[k] - av[i])
    if min(margins.values()) >= 0:
        ns, ms = trinoid_nm(p)
        an, am = np.abs(ns), np.abs(ms)
        margins["n_sum"] = float(1.0 - an.sum())
        for i, j, k in ((0, 1, 2), (1, 0, 2), (2, 0, 1)):
            margins["n_triangle_%d" % i] = float(an[j] + an[k] - an[i])
        if p.spaceform in ("S3", "H3"):
            margins["m_sum"] = float(1.0 - am.sum())
            for i, j, k in ((0, 1, 2), (1, 0, 2), (2, 0, 1)):
                margins["m_triangle_%d" % i] = float(am[j] + am[k] - am[i])
    passed = all(m >= 0.0 for m in margins.values())
    return InequalityReport(passed=passed, margins=margins)


def require_admissible(p):
    rep = trinoid_inequalities(p)
    if not rep.passed:
        name, margin = rep.worst()
        raise InequalityViolation(
            "trinoid admissibility failed: %s margin %.6f" % (name, margin),
            name=name, margin=margin)
    return rep


def formal_end_weights(p):
    """Formal Delaunay end-weights w_k and their bound margins.

    w_k = v_k scaled by the spaceform weight denominator; the sharp v-space
    constraints v_k h(+-1) < 12 are reported as margins alongside.
    """
    den = _weight_denominator(p.H, p.spaceform)
    ws = tuple(v / den for v in p.vs)
    h1 = float(np.real(trinoid_h(p, 1.0 + 0j)))
    hm1 = float(np.real(trinoid_h(p, -1.0 + 0j)))
    margins = {}
    for name, v in zip(("w0", "w1", "winf"), p.vs):
        margins[name + "_at_minus1"] = 12.0 - v * hm1
        margins[name + "_at_plus1"] = 12.0 - v * h1
    bounds = {}
    absh = abs(p.H)
    if p.spaceform == "R3":
        bounds["lower"] = -3.0 / absh
    elif p.spaceform == "S3":
        bounds["lower"] = -6.0 * (np.sqrt(p.H ** 2 + 1) - absh)
        bounds["upper"] = 6.0 * (np.sqrt(p.H ** 2 + 1) + absh)
    else:
        bounds["lower"] = -6.0 * (absh - np.sqrt(p.H ** 2 - 1))
    return ws, margins, bounds


# ---------------------------------------------------------------------------
# gauge action
# ---------------------------------------------------------------------------

def gauge_potential(xi_at, g_at, dg_at):
    """Return the gauged evaluator z -> g^{-1} xi g + g^{-1} dg.

    xi_at(z) gives loop samples of xi/dz; g_at(z)/dg_at(z) give loop
    samples of the gauge and its z-derivative.  Plus-loop membership of g
    is checked on first evaluation.
    """
    checked = [False]

    def gauged(z):
        gs = g_at(z)
        if not checked[0]:
            gl = Loop(gs) if not isinstance(gs, Loop) else gs
            neg = gl.coeffs[gl.powers < 0]
            if maxabs(neg) > 1e-8 * max(1.0, maxabs(gl.coeffs)):
                raise GaugeNotPlus("gauge has negative Laurent coefficients at z=%s" % z)
            checked[0] = True
        gsamp = gs.samples if isinstance(gs, Loop) else gs
        ginv = np.linalg.inv(gsamp)
        return ginv @ xi_at(z) @ gsamp + ginv @ dg_at(z)

    return gauged
