"""Constructive simultaneous unitarization of loop monodromy families.

Pipeline: pointwise Goldman positivity test, per-sample kernel of the
linear family L_n(X) = (X H_j - H_j*^{-1} X)_j, canonical analytic section
through the kernel lines, symmetrization to a positive semidefinite
section, and the dressing C from the semidefinite matrix Birkhoff
factorization.  C conjugates every monodromy into the unitary loop group
up to the reported residual.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import (AllZeroSymmetrization, AlignmentFailure, DegenerateFamily,
                     KernelJump, OddSwitchCount, UnitarizationResidualTooLarge)
from .factorization import birkhoff_matrix_semidefinite, plus_normalizer, _loop_repair
from .linalg import herm, maxabs
from .loops import Loop

EXCEPTIONAL_BUDGET = 8
GAP_MIN = 1e3


def goldman_T(t0, t1, tinf):
    """Goldman's function 1 - t0^2 - t1^2 - tinf^2 + 2 t0 t1 tinf.

    Evaluated through u_k = 1 - t_k to stay cancellation-free near the
    parabolic corner t = (1,1,1), where the closing points of the trinoid
    construction live.
    """
    u0, u1, u2 = 1.0 - np.asarray(t0), 1.0 - np.asarray(t1), 1.0 - np.asarray(tinf)
    return (2.0 * (u0 * u1 + u0 * u2 + u1 * u2)
            - (u0 * u0 + u1 * u1 + u2 * u2) - 2.0 * u0 * u1 * u2)


def _l_operator(hj):
    """The 4x4 matrix of X -> X H - H^dag^{-1} X in column-major vec."""
    hd = np.linalg.inv(herm(hj))
    return np.kron(hj.T, np.eye(2)) - np.kron(np.eye(2), hd)


def kernel_Ln(hs, j):
    """Kernel direction and dimension estimate of L_n at sample j.

    Stacks the per-monodromy operators, takes the SVD and estimates the
    kernel dimension from the gap between sigma_3 and sigma_4 (and deeper
    gaps for higher-dimensional kernels).
    """
    rows = [_l_operator(h.samples[j]) for h in hs]
    mat = np.vstack(rows)
    _, svals, vh = np.linalg.svd(mat)
    # A = U S V^H: the null direction is the conjugate of the last V^H row
    kvec = np.conj(vh[-1]).reshape(2, 2, order="F")
    tiny = max(svals[0], 1.0) * 1e-300
    gap = svals[-2] / max(svals[-1], tiny)
    dim = int(np.sum(svals < svals[0] * 1e-9))
    if svals[-1] > 0 and gap >= GAP_MIN:
        dim = max(dim, 1)
    return kvec, dim, float(gap), svals


@dataclass
class KernelSection:
    """An analytic section of the kernel line bundle with provenance flags."""

    X: Loop
    phase_aligned: bool = False
    zero_cleaned: bool = False
    symmetrized: bool = False
    exceptional: np.ndarray | None = None
    line_residual: float = 0.0
    window: int = 0


def _family_checks(hs):
    n = hs[0].n
    # degenerate family: all pairwise commutators tiny on many samples
    comm = np.zeros(n)
    for i in range(len(hs)):
        for j in range(i + 1, len(hs)):
            a, b = hs[i].samples, hs[j].samples
            comm = np.maximum(comm, np.max(np.abs(a @ b - b @ a), axis=(1, 2)))
    degenerate = comm < 1e-10 * max(1.0, max(maxabs(h.samples) for h in hs))
    if degenerate.sum() > n // 4:
        raise DegenerateFamily(
            "monodromies commute at %d of %d samples" % (int(degenerate.sum()), n))
    return degenerate


def _hermitian_representative(u):
    """Phase-rotate a kernel matrix onto its Hermitian positive representative."""
    ip = np.sum(np.conj(u) * herm(u))
    if abs(ip) < 1e-12:
        return None
    h = np.sqrt(ip / abs(ip)) * u
    h = 0.5 * (h + herm(h))
    if np.trace(h).real < 0:
        h = -h
    nrm = np.linalg.norm(h)
    if nrm < 1e-12:
        return None
    return h / nrm


def _hermitian_basis():
    e = [np.array([[1, 0], [0, 0]]), np.array([[0, 0], [0, 1]]),
         np.array([[0, 1], [1, 0]]) / np.sqrt(2),
         np.array([[0, -1j], [1j, 0]]) / np.sqrt(2)]
    return [m.astype(complex) for m in e]


def _general_basis():
    return [np.array(m, dtype=complex) for m in
            ([[1, 0], [0, 0]], [[0, 1], [0, 0]], [[0, 0], [1, 0]], [[0, 0], [0, 1]])]


def _section_basis(lam, window):
    """Star-symmetric band-limited basis, (N, 2, 2, ncols) over real params."""
    n = lam.shape[0]
    cols = []
    for e in _hermitian_basis():
        cols.append(np.broadcast_to(e, (n, 2, 2)))
    for k in range(1, window + 1):
        lk = (lam ** k)[:, None, None]
        lkm = (lam ** (-k))[:, None, None]
        for e in _general_basis():
            eh = herm(e)
            cols.append(lk * e + lkm * eh)
            cols.append(1j * lk * e - 1j * lkm * eh)
    return np.stack(cols, axis=-1)


def _fit_star_symmetric_section(hs, lam, good, window, mu=1e-8, stride=2,
                                tr_weight=1.0):
    """Band-limited star-symmetric near-null section of L_n.

    Real-linear least squares on the L_n rows themselves (the exact data)
    together with the pointwise normalization rows tr X(lambda_j) = 1.
    The trace rows are what resolve the scalar-multiple degeneracy of the
    kernel line bundle: they single out the representative 1/tr(X_pos)
    times the positive section, which is bounded away from zero on the
    whole circle.  Sample rows are strided; the band-limited section stays
    overdetermined regardless.
    """
    n = lam.shape[0]
    basis = _section_basis(lam, window)        # (N, 2, 2, ncols)
    ncols = basis.shape[-1]
    sel = np.zeros(n, dtype=bool)
    sel[::stride] = True
    sel &= good
    rows = []
    for h in hs:
        hd = np.linalg.inv(herm(h.samples[sel]))
        r = (np.einsum('nijc,njk->nikc', basis[sel], h.samples[sel])
             - np.einsum('nij,njkc->nikc', hd, basis[sel]))
        rows.append(r.reshape(-1, ncols))
    rows = np.vstack(rows)
    # the trace rows only fix the scalar gauge; a small weight keeps them
    # from competing with the kernel rows for the truncation budget
    tr_rows = tr_weight * (basis[sel, 0, 0] + basis[sel, 1, 1])
    ridge_w = np.concatenate([[0.0] * 4] + [[k / window] * 8
                                            for k in range(1, window + 1)])
    a_full = np.vstack([rows.real, rows.imag, tr_rows.real, tr_rows.imag,
                        mu * np.diag(ridge_w)])
    b = np.zeros(a_full.shape[0])
    nsel = int(sel.sum())
    b[2 * rows.shape[0]:2 * rows.shape[0] + nsel] = tr_weight
    coef, *_ = np.linalg.lstsq(a_full, b, rcond=None)
    x = np.einsum('nijc,c->nij', basis, coef)
    scale = max(np.linalg.norm(x) / np.sqrt(n), 1e-300)
    resid = np.linalg.norm(rows @ coef) / np.sqrt(max(rows.shape[0], 1)) / scale
    return x, float(resid)


def build_section(hs, window_ladder=(8, 16, 24, 32, 48, 64, 96),
                  tol=1e-10) -> KernelSection:
    """Analytic nowhere-zero kernel section of the monodromy family.

    Per-sample SVD kernel directions are canonicalized to their Hermitian
    positive representatives, nearest-phase/sign aligned around the circle,
    and a band-limited star-symmetric section is fit through the resulting
    line field (widening the Laurent window until the fit converges).
    Samples where the family degenerates to +-Id, or the SVD gap collapses,
    are excluded and interpolated across, within a fixed budget.
    """
    n = hs[0].n
    lam = hs[0].lam
    degenerate = _family_checks(hs)
    dirs = np.zeros((n, 2, 2), dtype=complex)
    bad = degenerate.copy()
    # near +-Id samples carry no kernel information either
    for h in hs:
        sgn = np.sign(np.trace(h.samples, axis1=1, axis2=2).real)
        iddev = np.max(np.abs(h.samples - sgn[:, None, None] * np.eye(2)), axis=(1, 2))
        bad |= iddev < 1e-6
    gaps = np.zeros(n)
    for j in range(n):
        if bad[j]:
            continue
        kvec, dim, gap, _ = kernel_Ln(hs, j)
        gaps[j] = gap
        if gap < GAP_MIN or dim != 1:
            bad[j] = True
            continue
        rep = _hermitian_representative(kvec)
        if rep is None:
            bad[j] = True
            continue
        dirs[j] = rep
    if bad.sum() > EXCEPTIONAL_BUDGET:
        # a contiguous run of bad samples means the kernel dimension jumped
        runs = np.where(bad)[0]
        if len(runs) > 2 and np.any(np.diff(runs) == 1):
            raise KernelJump("kernel dimension >= 2 on %d samples" % int(bad.sum()))
        raise AlignmentFailure("%d exceptional samples exceed the budget %d"
                               % (int(bad.sum()), EXCEPTIONAL_BUDGET))
    # nearest-phase (here: sign) continuation around the circle
    goodidx = np.where(~bad)[0]
    for prev, cur in zip(goodidx[:-1], goodidx[1:]):
        if np.sum(np.conj(dirs[prev]) * dirs[cur]).real < 0:
            dirs[cur] = -dirs[cur]
    good = ~bad
    best = None
    for window in window_ladder:
        if 8 * window + 4 > 8 * int(good.sum()):
            break
        x, resid = _fit_star_symmetric_section(hs, lam, good, window)
        # orient along the measured positive representatives
        ip = np.sum(np.conj(dirs[good]) * x[good]).real
        if ip < 0:
            x = -x
        if best is None or resid < best[1]:
            best = (x, resid, window)
        if resid <= tol:
            break
    if best is None:
        raise AlignmentFailure("no fit window available")
    x, resid, window = best
    if resid > 1e-5:
        raise AlignmentFailure("line-field fit residual %.3e above 1e-5" % resid)
    nrm = np.linalg.norm(x.reshape(n, 4), axis=1)
    section = KernelSection(X=Loop(x, hs[0].radius), phase_aligned=True,
                            exceptional=bad, line_residual=resid, window=window)
    if nrm.min() < 1e-6 * nrm.max():
        # isolated section zeros: divide out the matched real quadratic factor
        section = _clear_section_zeros(section)
    return section


def _clear_section_zeros(section: KernelSection) -> KernelSection:
    """Divide out real-on-circle factors (2 - lam/z0 - z0/lam)^m at section zeros."""
    x = section.X
    n = x.n
    lam = x.lam
    xs = x.samples.copy()
    for _ in range(4):
        nrm = np.linalg.norm(xs.reshape(n, 4), axis=1)
        j = int(np.argmin(nrm))
        if nrm[j] > 1e-6 * nrm.max():
            break
        z0 = lam[j]
        factor = 2.0 - lam / z0 - z0 / lam
        badz = np.abs(lam - z0) < 3.5 * (2 * np.pi / n)
        xs = np.where(badz[:, None, None], 0.0, xs / np.where(badz, 1.0, factor)[:, None, None])
        xs = _loop_repair(xs, ~badz, radius=x.radius)
    section.X = Loop(xs, x.radius)
    section.zero_cleaned = True
    return section


def ln_residual(hs, x: Loop, mask=None):
    """max_j ||X H_j - H_j*^{-1} X|| over unmasked samples."""
    res = 0.0
    sel = np.ones(x.n, dtype=bool) if mask is None else mask
    for h in hs:
        hdinv = np.linalg.inv(herm(h.samples))
        r = x.samples @ h.samples - hdinv @ x.samples
        res = max(res, maxabs(r[sel]))
    return float(res / max(1.0, maxabs(x.samples)))


def symmetrize_section(section: KernelSection, hysteresis=1e-9) -> KernelSection:
    """Hermitian positive semidefinite section with det not identically zero.

    Scans alpha over eight phases for the largest symmetrization
    X2 = alpha X1 + (alpha X1)*, classifies the pointwise definiteness of
    X2 with a hysteresis band, and when the sign switches, multiplies by
    g = f/f(p+) built from the switch points to flip every negative run.
    """
    x1 = section.X
    n = x1.n
    lam = x1.lam
    best = None
    for m in range(8):
        alpha = 0.5 * np.exp(1j * np.pi * m / 4.0)
        x2 = alpha * x1.samples + herm(alpha * x1.samples)
        nrm = np.linalg.norm(x2)
        if best is None or nrm > best[0]:
            best = (nrm, alpha, x2)
    nrm, alpha, x2 = best
    if nrm < 1e-12 * max(1.0, np.linalg.norm(x1.samples)):
        raise AllZeroSymmetrization("alpha X1 + (alpha X1)* vanishes identically")
    evs = np.linalg.eigvalsh(x2)
    scale = np.abs(evs).max()
    sgn = np.where(evs[:, 0] > hysteresis * scale, 1,
                   np.where(evs[:, 1] < -hysteresis * scale, -1, 0))
    if np.all(sgn >= 0):
        xfinal = x2
        switches = []
    elif np.all(sgn <= 0):
        xfinal = -x2
        switches = []
    else:
        small = np.where(np.abs(evs[:, 0]) < np.abs(evs[:, 1]), evs[:, 0], evs[:, 1])
        switches = []
        for j in range(n):
            j2 = (j + 1) % n
            a_, b_ = sgn[j], sgn[j2]
            if a_ != 0 and b_ != 0 and a_ != b_:
                y0, y1 = small[j], small[j2]
                t = y0 / (y0 - y1)
                th = 2 * np.pi * (j + t) / n
                switches.append(np.exp(1j * th))
            elif a_ != 0 and b_ == 0:
                # walk through a zero plateau; count one switch if sign flips over it
                k = j2
                while sgn[k] == 0:
                    k = (k + 1) % n
                if sgn[k] != a_ and k != j:
                    th = 2 * np.pi * (0.5 * (j + (k if k > j else k + n))) / n
                    switches.append(np.exp(1j * th))
        if len(switches) % 2 == 1:
            raise OddSwitchCount("found %d definiteness switches" % len(switches))
        ps = np.asarray(switches)
        phat = np.prod(ps)
        f = lam ** (-len(ps) // 2) * phat ** (-0.5) * np.prod(
            [lam - pj for pj in ps], axis=0)
        jplus = int(np.argmax(small))
        g = (f / f[jplus]).real
        xfinal = g[:, None, None] * x2
    xfinal = 0.5 * (xfinal + herm(xfinal))
    out = KernelSection(X=Loop(xfinal, x1.radius),
                        phase_aligned=section.phase_aligned,
                        zero_cleaned=section.zero_cleaned, symmetrized=True,
                        exceptional=section.exceptional,
                        line_residual=section.line_residual,
                        window=section.window)
    return out


@dataclass
class UnitarizerReport:
    residuals: list = field(default_factory=list)
    worst_residual: float = 0.0
    exceptional_samples: int = 0
    line_residual: float = 0.0
    goldman_positive_fraction: float = 1.0
    certified_radius: float = 1.0
    section_window: int = 0

    def to_dict(self):
        return {
            "residuals": [float(r) for r in self.residuals],
            "worst_residual": float(self.worst_residual),
            "exceptional_samples": int(self.exceptional_samples),
            "line_residual": float(self.line_residual),
            "goldman_positive_fraction": float(self.goldman_positive_fraction),
            "certified_radius": float(self.certified_radius),
            "section_window": int(self.section_window),
        }


def conjugate_loop(c: Loop, h: Loop, repair_mask=None):
    """C H C^{-1} with masked analytic refit where det C (nearly) vanishes."""
    cs = c.samples
    det = np.abs(cs[:, 0, 0] * cs[:, 1, 1] - cs[:, 0, 1] * cs[:, 1, 0])
    good = det > 1e-8 * det.max()
    if repair_mask is not None:
        good &= ~repair_mask
    out = np.zeros_like(h.samples)
    inv = np.linalg.inv(cs[good])
    out[good] = cs[good] @ h.samples[good] @ inv
    if not np.all(good):
        out = _loop_repair(out, good, radius=h.radius)
    return Loop(out, h.radius)


def unitarizer(hs, tol=1e-8, section_tol=1e-10):
    """Dressing C conjugating all monodromies to unitary loops, plus report.

    hs: list of Loops (pointwise simultaneously unitarizable away from a
    finite sample set).  Returns (C, conjugated loops, report).
    """
    section = build_section(hs, tol=section_tol)
    sym = symmetrize_section(section)
    c, _ = birkhoff_matrix_semidefinite(sym.X)
    # left-normalize so C(0) is triangular-positive (constant rotation)
    u0 = plus_normalizer(c)
    c = Loop(np.conj(u0.T)[None] @ c.samples, c.radius)
    conj = [conjugate_loop(c, h, repair_mask=section.exceptional) for h in hs]
    residuals = [g.unitarity_residual() for g in conj]
    worst = max(residuals)
    ts = [0.5 * np.trace(h.samples, axis1=1, axis2=2).real for h in hs]
    tpos = goldman_T(*ts) > 0 if len(hs) == 3 else np.ones(hs[0].n, dtype=bool)
    report = UnitarizerReport(
        residuals=residuals, worst_residual=float(worst),
        exceptional_samples=int(section.exceptional.sum()),
        line_residual=section.line_residual,
        goldman_positive_fraction=float(np.mean(tpos)),
        certified_radius=min(g.certified_radius() for g in conj),
        section_window=section.window)
    if worst > max(tol, 1e-6):
        raise UnitarizationResidualTooLarge(
            "conjugated unitarity residual %.3e above %.1e" % (worst, tol))
    return c, conj, report
