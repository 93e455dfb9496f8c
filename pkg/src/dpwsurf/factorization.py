"""The three factorization engines.

* iwasawa: unique splitting Phi = F B into an r-unitary loop and a plus
  loop, computed through the canonical spectral factorization of the
  positive Hermitian symbol X = Phi* Phi by a finite-section block-Toeplitz
  solve on truncated Laurent coefficients.
* birkhoff_scalar: h with f = h* h for real nonnegative scalar symbols,
  including even-order boundary zeros (zero detection + exp/log Fourier
  splitting of the strictly positive remainder).
* birkhoff_matrix_semidefinite: f X = C* C for positive semidefinite X,
  via the triangular reduction Y = [[x11, x12], [0, e]] and the plus factor
  of the Iwasawa splitting of Y.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateDeterminant, FactorizationDiverged, IdenticallyZero,
                     NegativeValue, NotHermitian, NotSemidefinite, SingularSample,
                     ZeroDetectionFailure)
from .linalg import det2, herm, maxabs
from .loops import Loop

DEFAULT_TOL = 1e-10


@dataclass
class IwasawaPair:
    """Unitary factor F, plus factor B, and the achieved residuals."""

    F: Loop
    B: Loop
    residual: float = 0.0
    unitary_residual: float = 0.0
    neg_power_mass: float = 0.0
    sections: int = 0

    def check(self, tol=1e-9):
        return (self.residual < tol and self.unitary_residual < tol
                and self.neg_power_mass < tol)


def is_plus_member(b0, tol=1e-10):
    """Constant-term membership in the positive cone: upper triangular with
    real positive diagonal (tr > 0 and Ad-eigenvector eps_+)."""
    if abs(b0[1, 0]) > tol:
        return False
    d = np.diag(b0)
    return not (np.any(np.abs(d.imag) > tol) or np.any(d.real <= 0))


def _toeplitz_solve_first_block(xc, m, half):
    """Solve T v = e0 for the section T_ij = X_{i-j}, i,j < m (2x2 blocks)."""
    # lookup of X_k for k in [-(m-1), m-1], clipped to the window
    ks = np.arange(-(m - 1), m)
    idx = np.clip(ks + half, 0, xc.shape[0] - 1)
    table = np.where(((ks + half) >= 0) & ((ks + half) < xc.shape[0]))[0]
    lookup = np.zeros((2 * m - 1, 2, 2), dtype=complex)
    lookup[table] = xc[idx[table]]
    i = np.arange(m)
    kmat = i[:, None] - i[None, :] + (m - 1)
    T = lookup[kmat]                       # (m, m, 2, 2)
    T = T.transpose(0, 2, 1, 3).reshape(2 * m, 2 * m)
    e0 = np.zeros((2 * m, 2), dtype=complex)
    e0[0, 0] = e0[1, 1] = 1.0
    try:
        v = np.linalg.solve(T, e0)
    except np.linalg.LinAlgError:
        v, *_ = np.linalg.lstsq(T, e0, rcond=None)
    return v.reshape(m, 2, 2)


def factor_positive(x: Loop, sections=None, tol=DEFAULT_TOL, resid_mask=None):
    """Canonical spectral factorization X = B* B of a positive Hermitian symbol.

    Returns (B, G_samples, m, residual) with G = B^{-1} on the disk; B is
    reconstructed pole-free as herm(X G), so boundary zeros of det X only
    degrade samples in their immediate neighbourhood.  The finite-section
    order grows geometrically until the reconstruction residual meets tol.
    """
    n = x.n
    if sections is None:
        sections = [n // 8, n // 4, n // 2]
    xc = x.coeffs
    half = n // 2
    scale = max(1.0, maxabs(x.samples))
    if resid_mask is None:
        resid_mask = np.ones(n, dtype=bool)
    best = None
    for m in sections:
        v = _toeplitz_solve_first_block(xc, m, half)
        v0inv = np.linalg.inv(v[0])
        w = 0.5 * (v0inv + herm(v0inv))
        try:
            lw = np.linalg.cholesky(w)
        except np.linalg.LinAlgError:
            ev, uu = np.linalg.eigh(w)
            lw = np.linalg.cholesky((uu * np.maximum(ev, 1e-300)) @ herm(uu))
        b0 = herm(lw)                      # upper triangular, positive diagonal
        g = np.einsum('mij,jk->mik', v, herm(b0))
        pw = x.lam[:, None] ** np.arange(m)[None, :]
        gs = np.einsum('nm,mij->nij', pw, g)
        bs = herm(x.samples @ gs)          # B = (X G)^* pointwise on the circle
        resid = maxabs((herm(bs) @ bs - x.samples)[resid_mask]) / scale
        if best is None or resid < best[0]:
            best = (resid, bs, gs, m)
        if resid <= tol:
            break
    resid, bs, gs, m = best
    if resid > max(100 * tol, 1e-6):
        raise FactorizationDiverged(
            "finite-section residual %.3e stagnated above tolerance %.1e"
            % (resid, tol))
    return Loop(bs, x.radius), gs, m, resid


def iwasawa(phi: Loop, tol=DEFAULT_TOL, sections=None) -> IwasawaPair:
    """r-Iwasawa decomposition Phi = F B.

    F is r-unitary (F* = F^{-1}); B extends to the disk with B(0) upper
    triangular positive diagonal, which pins the unique splitting.
    """
    d = np.abs(phi.det().samples if not phi.is_scalar else phi.samples)
    j = int(np.argmin(d))
    if d[j] < 1e-13 * max(1.0, maxabs(phi.samples) ** 2):
        raise SingularSample("det Phi vanishes at lambda_%d (|det|=%.2e)" % (j, d[j]),
                             lam=phi.lam[j], absdet=float(d[j]))
    x = phi.star().mul(phi)
    b, gs, m, _ = factor_positive(x, sections=sections, tol=tol)
    f = Loop(phi.samples @ gs, phi.radius)
    residual = maxabs(f.samples @ b.samples - phi.samples) / max(1.0, maxabs(phi.samples))
    ures = f.unitarity_residual()
    bc = b.coeffs
    negmass = maxabs(bc[b.powers < 0]) / max(1.0, maxabs(bc))
    return IwasawaPair(F=f, B=b, residual=float(residual),
                       unitary_residual=float(ures),
                       neg_power_mass=float(negmass), sections=m)


def iwasawa_batch(samples, radius=1.0, m=None, tol=DEFAULT_TOL):
    """Iwasawa-split a batch of loops given as samples (V, N, 2, 2).

    One fixed section order for the whole batch (default N/4); used by the
    surface builder where thousands of nearby loops are split per run.
    Returns (F_samples, B_samples, worst_residual).
    """
    v_, n = samples.shape[0], samples.shape[1]
    if m is None:
        m = n // 4
    lam = radius * np.exp(2j * np.pi * np.arange(n) / n)
    xs = herm(samples) @ samples if radius == 1.0 else None
    if xs is None:
        raise NotImplementedError("batched splitting is implemented on the unit circle")
    d = np.fft.fftshift(np.fft.fft(xs, axis=1) / n, axes=1)
    half = n // 2
    ks = np.arange(-(m - 1), m)
    lookup = d[:, np.clip(ks + half, 0, n - 1)]
    oob = ((ks + half) < 0) | ((ks + half) >= n)
    lookup[:, oob] = 0.0
    i = np.arange(m)
    kmat = i[:, None] - i[None, :] + (m - 1)
    T = lookup[:, kmat].transpose(0, 1, 3, 2, 4).reshape(v_, 2 * m, 2 * m)
    e0 = np.zeros((2 * m, 2), dtype=complex)
    e0[0, 0] = e0[1, 1] = 1.0
    vv = np.linalg.solve(T, np.broadcast_to(e0, (v_, 2 * m, 2)))
    vv = vv.reshape(v_, m, 2, 2)
    v0inv = np.linalg.inv(vv[:, 0])
    w = 0.5 * (v0inv + herm(v0inv))
    lw = np.linalg.cholesky(w)
    g = np.einsum('vmij,vjk->vmik', vv, lw)   # G_m = V_m B0^dag with B0 = lw^dag
    pw = lam[:, None] ** np.arange(m)[None, :]
    gs = np.einsum('nm,vmij->vnij', pw, g)
    bs = herm(xs @ gs)
    fs = samples @ gs
    resid = np.max(np.abs(fs @ bs - samples)) / max(1.0, np.max(np.abs(samples)))
    if resid > max(100 * tol, 1e-6):
        raise FactorizationDiverged("batched splitting residual %.3e" % resid)
    return fs, bs, float(resid)


# ---------------------------------------------------------------------------
# scalar singular Birkhoff
# ---------------------------------------------------------------------------

@dataclass
class ScalarBirkhoffReport:
    zeros: list = field(default_factory=list)
    residual: float = 0.0
    winding_half_count: float = 0.0


def _detect_boundary_zeros(f, zero_tol):
    """Locate even-order boundary zeros of real nonnegative samples on S^1.

    Returns zero locations with multiplicity m (half the local order each),
    estimated from log-growth at the cluster flanks; an odd local order is
    a contract violation upstream and raises.
    """
    n = f.shape[0]
    scale = f.max()
    low = f < zero_tol * scale
    if not np.any(low):
        return []
    idx = np.where(low)[0]
    clusters = []
    cur = [idx[0]]
    for i in idx[1:]:
        if i - cur[-1] <= 2:
            cur.append(i)
        else:
            clusters.append(cur)
            cur = [i]
    clusters.append(cur)
    if len(clusters) > 1 and clusters[0][0] == 0 and clusters[-1][-1] == n - 1:
        clusters[0] = clusters.pop() + clusters[0]
    zeros = []
    for cl in clusters:
        jmid = cl[len(cl) // 2]
        tm = 2 * np.pi * jmid / n
        span = max(3, len(cl))
        h = 2 * np.pi * span / n
        jl, jr = (jmid - span) % n, (jmid + span) % n
        jl2, jr2 = (jmid - 2 * span) % n, (jmid + 2 * span) % n
        yl, yr = np.log(f[jl]), np.log(f[jr])
        y1 = 0.5 * (yl + yr)
        y2 = 0.5 * (np.log(f[jl2]) + np.log(f[jr2]))
        p = (y2 - y1) / np.log(2.0)        # local order of the zero
        m = int(round(p / 2.0))
        if m < 1 or abs(p - 2 * m) > 0.35 * max(1, m):
            raise ZeroDetectionFailure(
                "boundary zero near theta=%.4f has estimated order %.2f, not even"
                % (tm, p))
        rho = np.exp((yr - yl) / (2 * m))  # (h - d)/(h + d)
        d = h * (1.0 - rho) / (1.0 + rho)
        zeros.extend([np.exp(1j * (tm + np.clip(d, -h, h)))] * m)
    return zeros


def birkhoff_scalar(f, zero_tol=1e-8, tol=DEFAULT_TOL):
    """Factor a real nonnegative scalar symbol as f = h* h.

    h extends to the closed unit disk and does not vanish in the open disk;
    boundary zeros of f (necessarily of even order) become zeros of h on
    the circle itself.  Accepts a scalar Loop or bare samples on S^1.
    """
    loop_in = isinstance(f, Loop)
    fs = f.samples if loop_in else np.asarray(f, dtype=complex)
    radius = f.radius if loop_in else 1.0
    n = fs.shape[0]
    if maxabs(fs.imag) > 1e-9 * max(1.0, maxabs(fs)):
        raise NegativeValue("symbol is not real on the circle")
    fr = fs.real.copy()
    scale = fr.max()
    if scale <= tol:
        raise IdenticallyZero("symbol is numerically zero")
    if fr.min() < -1e-9 * scale:
        raise NegativeValue("symbol attains %.3e < 0" % fr.min())
    fr = np.maximum(fr, 0.0)
    lam = np.exp(2j * np.pi * np.arange(n) / n)
    zeros = _detect_boundary_zeros(fr, zero_tol)
    q = np.ones(n, dtype=complex)
    for a in zeros:
        q = q * (lam - a)
    if zeros:
        ang = np.angle(np.asarray(zeros))
        th = 2 * np.pi * np.arange(n) / n
        dist = np.min(np.abs(np.angle(np.exp(1j * (th[:, None] - ang[None, :])))), axis=1)
        good = dist > 3.5 * (2 * np.pi / n)
    else:
        good = np.ones(n, dtype=bool)
    g = np.empty(n)
    g[good] = fr[good] / np.abs(q[good]) ** 2
    if zeros:
        # log-linear fill across the cleared neighbourhoods
        gi = np.where(good)[0]
        for j in np.where(~good)[0]:
            pos = np.searchsorted(gi, j)
            right = gi[pos % len(gi)]
            left = gi[pos - 1]
            gap = (right - left) % n
            t = ((j - left) % n) / max(gap, 1)
            g[j] = np.exp((1 - t) * np.log(g[left]) + t * np.log(g[right]))
    if g.min() <= 0:
        raise ZeroDetectionFailure("positive remainder still vanishes after clearing")
    lg = np.log(g)
    c = np.fft.fft(lg) / n
    cplus = np.zeros(n, dtype=complex)
    cplus[1:n // 2] = c[1:n // 2]
    gplus = np.exp(np.fft.ifft(cplus) * n)
    r = np.exp(c[0].real)
    h = np.sqrt(r) * gplus * q
    resid = maxabs(np.abs(h) ** 2 - fr) / scale
    report = ScalarBirkhoffReport(zeros=zeros, residual=float(resid),
                                  winding_half_count=0.5 * len(zeros))
    return Loop(h, radius), report


def winding_number(samples):
    """Total phase increment / 2 pi along the sample sequence."""
    ph = np.angle(samples)
    d = np.diff(np.concatenate([ph, ph[:1]]))
    d = (d + np.pi) % (2 * np.pi) - np.pi
    return float(d.sum() / (2 * np.pi))


# ---------------------------------------------------------------------------
# matrix semidefinite Birkhoff
# ---------------------------------------------------------------------------

def _loop_repair(samples, good, radius=1.0, kmax=None):
    """Two-sided analytic refit of loop samples over the good node set.

    The window is kept strictly smaller than the good-sample count so the
    fit stays overdetermined.
    """
    n = samples.shape[0]
    ngood = int(good.sum())
    if kmax is None:
        kmax = min(n // 2 - 1, int(0.4 * ngood))
    k = np.arange(-kmax, kmax + 1)
    lam = radius * np.exp(2j * np.pi * np.arange(n) / n)
    pw = lam[:, None] ** k[None, :]
    c, *_ = np.linalg.lstsq(pw[good], samples[good].reshape(ngood, -1),
                            rcond=None)
    return (pw @ c).reshape(samples.shape)


def _extract_boundary_zero(xs, lam, a):
    """Split one order-two boundary zero of det X at lambda = a.

    Returns (X_check_samples, R_samples) with X = R* X_check R, where
    R = Id + (lambda - a - 1) P projects out the kernel direction of X(a);
    X_check is again positive semidefinite with the zero at `a` removed.
    """
    n = xs.shape[0]
    # kernel direction at a from the nearest samples (X is analytic)
    j = int(np.argmin(np.abs(lam - a)))
    xa = 0.5 * (xs[j] + xs[(j + 1) % n]) if abs(lam[j] - a) > 1e-13 else xs[j]
    w_, vec = np.linalg.eigh(xa)
    nhat = vec[:, 0]
    P = np.outer(nhat, np.conj(nhat))
    Q = np.eye(2) - P
    R = Q[None] + (lam - a)[:, None, None] * P[None]
    bad = np.abs(lam - a) < 3.5 * (2 * np.pi / n)
    denom = np.where(bad, 1.0, lam - a)    # bad samples get refit below
    rinv = Q[None] + (1.0 / denom)[:, None, None] * P[None]
    rinvstar = herm(rinv)                  # on S^1, star is pointwise herm
    xchk = rinvstar @ xs @ rinv
    if np.any(bad):
        xchk = _loop_repair(xchk, ~bad)
    xchk = 0.5 * (xchk + herm(xchk))
    return xchk, R


def birkhoff_matrix_semidefinite(x: Loop, tol=DEFAULT_TOL, herm_tol=1e-8):
    """Find C in the plus cone and a scalar f >= 0 with f X = C* C on S^1.

    Triangular reduction: e with det X = e* e (scalar Birkhoff), then the
    plus factor of the Iwasawa splitting of Y = [[x11, x12], [0, e]].
    Boundary zeros of det Y make the finite sections stagnate, so they are
    first pulled out with elementary rank-one factors R and multiplied back
    into C afterwards; a final constant left rotation restores the
    triangular-positive normalization of C(0).
    """
    xs = x.samples
    n = x.n
    scale = max(1.0, maxabs(xs))
    if maxabs(xs - herm(xs)) > herm_tol * scale:
        raise NotHermitian("X is not Hermitian on the circle (residual %.2e)"
                           % (maxabs(xs - herm(xs)) / scale))
    ev = np.linalg.eigvalsh(0.5 * (xs + herm(xs)))
    if ev.min() < -herm_tol * scale:
        raise NotSemidefinite("X has eigenvalue %.3e < 0" % ev.min())
    dloop = x.det()
    if maxabs(dloop.samples) <= tol * scale ** 2:
        raise DegenerateDeterminant("det X vanishes identically within tolerance")
    x11 = np.maximum(xs[:, 0, 0].real, 0.0)
    f = Loop(x11.astype(complex), x.radius)
    e, _ = birkhoff_scalar(dloop)
    ys = np.zeros_like(xs)
    ys[:, 0, 0] = xs[:, 0, 0]
    ys[:, 0, 1] = xs[:, 0, 1]
    ys[:, 1, 1] = e.samples
    y = Loop(ys, x.radius)
    z = y.star().mul(y).samples            # = x11 * X on the circle
    z = 0.5 * (z + herm(z))
    lam = x.lam
    # peel off boundary zeros of det Z (order two per pass and location)
    rtotal = np.broadcast_to(np.eye(2, dtype=complex), z.shape).copy()
    for _ in range(6):
        _, zrep = birkhoff_scalar(Loop(det2(z).astype(complex), x.radius))
        locs = sorted(set(np.round(zrep.zeros, 10)))
        if not locs:
            break
        for a in locs:
            z, r = _extract_boundary_zero(z, lam, complex(a))
            rtotal = r @ rtotal
    bchk, _, _, resid = factor_positive(Loop(z, x.radius), tol=tol)
    cs = bchk.samples @ rtotal
    c = Loop(cs, x.radius)
    cs = np.conj(plus_normalizer(c).T)[None] @ cs
    c = Loop(cs, x.radius)
    return c, f


def plus_normalizer(c: Loop):
    """Constant unitary U with (U^dag C)(0) upper triangular positive diagonal."""
    c0 = c.coeffs[c.n // 2]
    q0, r0 = np.linalg.qr(c0)
    ph = np.diag(r0) / np.abs(np.diag(r0))
    return q0 * ph[None, :]
