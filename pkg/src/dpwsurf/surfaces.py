"""Domain meshing, end-to-end surface evaluation, verification, export.

Delaunay surfaces ride the closed-form extended frame on a cylinder grid.
Trinoids run the full pipeline: monodromy integration, unitarization,
spanning-tree transport of the holomorphic frame over three annular end
charts glued to a triangulated central patch, batched Iwasawa splitting,
and the Sym evaluation of the chosen space form.
"""
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay as _SciDelaunay

from .errors import PeriodResidualTooLarge, UnprojectablePoint
from .factorization import iwasawa_batch
from .frame_ode import PathSpec, integrate_frame, monodromy, trace_identity_check
from .kernels import integrate_segment
from .linalg import det2, herm, inv2, maxabs, su2_coordinates, EPS
from .loops import Loop, nodes
from .potentials import (DelaunayFrame, DelaunayParams, TrinoidParams,
                         delaunay_mu, formal_end_weights, require_admissible,
                         trinoid_potential, trinoid_q_coeffs)
from .sym import (SpaceformTarget, ambient_residual, closing_check, su2_to_s3,
                  hermitian_to_h3, sym_point)
from .unitarize import unitarizer

MINK = np.diag([1.0, -1.0, -1.0, -1.0])


@dataclass
class SurfaceMesh:
    vertices: np.ndarray            # (V, 3) for R3, (V, 4) for S3/H3
    normals: np.ndarray
    faces: np.ndarray               # (F, 3) int
    domain_z: np.ndarray            # (V,) complex chart coordinate
    chart: np.ndarray               # (V,) int
    interior: np.ndarray            # (V,) bool
    diagnostics: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def spaceform(self):
        return self.metadata.get("spaceform", "R3")


# ---------------------------------------------------------------------------
# Delaunay surfaces
# ---------------------------------------------------------------------------

def build_delaunay_surface(p: DelaunayParams, nx=80, ny=48, x_range=(-1.5, 1.5),
                           n=256, rtol=1e-12, closure_tol=1e-6):
    """Surface of the translationally invariant family on a cylinder grid.

    The frame is the closed-form factorization of exp((x + iy) A); the
    profile direction y wraps; closure around the profile circle is checked
    against the monodromy at the Sym point.
    """
    target = _delaunay_target(p)
    frame = DelaunayFrame(p, n=n, rtol=rtol)
    xs = np.linspace(x_range[0], x_range[1], nx)
    ys = np.linspace(0.0, 2 * np.pi, ny, endpoint=False)
    vs = []
    norms = []
    branch = []
    # per column: B(x) once, then sweep y through the unitary rotation
    for x in xs:
        bs = frame.b_at(x)
        binv = inv2(bs)
        for y in ys:
            floop = Loop(frame.phi_at(x, y) @ binv, frame.radius)
            vs.append(sym_point(floop, target))
            norms.append(_normal_point(floop, target))
            b0 = floop_b0(bs)
            branch.append(abs(b0[0, 0] / b0[1, 1]) * abs(p.a) < 1e-8)
    vertices = np.asarray(vs)
    normals = np.asarray(norms)
    faces = _cylinder_faces(nx, ny)
    dom = (xs[:, None] + 1j * ys[None, :]).ravel()
    chart = np.zeros(len(dom), dtype=int)
    interior = np.ones(len(dom), dtype=bool)
    interior[:ny] = False
    interior[-ny:] = False
    closure = _delaunay_closure_residual(frame, target)
    mesh = SurfaceMesh(vertices=vertices, normals=normals, faces=faces,
                       domain_z=dom, chart=chart, interior=interior)
    mesh.metadata = {
        "family": "delaunay", "spaceform": p.spaceform,
        "params": {"a": p.a, "b": p.b, "c": p.c, "H": p.H,
                   "lambda0": [np.real(p.lambda0), np.imag(p.lambda0)]},
        "weight": p.weight,
        "kind": delaunay_kind(p),
        "grid": {"nx": nx, "ny": ny, "x_range": list(x_range)},
        "samples": n,
        "closure_residual": closure,
    }
    _grid_conformality(mesh, nx, ny, xs[1] - xs[0], 2 * np.pi / ny)
    mesh.diagnostics["branch_flag"] = np.asarray(branch, dtype=bool)
    verify_geometry(mesh, target)
    return mesh


def delaunay_kind(p):
    ab = p.a * p.b
    if p.c == 0 and abs(abs(p.a) - abs(p.b)) < 1e-12:
        return "cylinder"
    if ab > 0:
        return "unduloid"
    if ab < 0:
        return "nodoid"
    return "sphere-chain"


def floop_b0(bs):
    """Constant Laurent coefficient of a plus loop from its samples."""
    return np.mean(bs, axis=0)


def _delaunay_target(p):
    if p.spaceform == "R3":
        return SpaceformTarget.r3(p.H, p.lambda0)
    if p.spaceform == "S3":
        return SpaceformTarget.s3(p.lambda0, p.lambda1)
    return SpaceformTarget.h3(p.lambda0)


def _delaunay_closure_residual(frame, target, xs=(0.0, 0.4)):
    res = 0.0
    for x in xs:
        bs = frame.b_at(x)
        binv = inv2(bs)
        f0 = Loop(frame.phi_at(x, 0.0) @ binv, frame.radius)
        f1 = Loop(frame.phi_at(x, 2 * np.pi) @ binv, frame.radius)
        res = max(res, maxabs(np.asarray(sym_point(f0, target))
                              - np.asarray(sym_point(f1, target))))
    return float(res)


def _normal_point(floop, target):
    """Ambient unit normal from the frame (Ad F(eps) and its analogues)."""
    if target.tag == "R3":
        f0 = floop.eval(target.lambda0)
        nmat = f0 @ EPS @ inv2(f0)
        v = su2_coordinates(nmat)
        return v / max(np.linalg.norm(v), 1e-300)
    if target.tag == "S3":
        f0 = floop.eval(target.lambda0)
        f1 = floop.eval(target.lambda1)
        nmat = f1 @ EPS @ inv2(f0)
        v = su2_to_s3(nmat)
        return v / max(np.linalg.norm(v), 1e-300)
    f0 = floop.eval(target.lambda0)
    nmat = -f0 @ (1j * EPS) @ herm(f0)
    v = hermitian_to_h3(nmat)
    q = abs(v @ MINK @ v)
    return v / max(np.sqrt(q), 1e-300)


def _cylinder_faces(nx, ny):
    faces = []
    for i in range(nx - 1):
        for j in range(ny):
            a = i * ny + j
            b = i * ny + (j + 1) % ny
            c = (i + 1) * ny + j
            d = (i + 1) * ny + (j + 1) % ny
            faces.append((a, b, c))
            faces.append((b, d, c))
    return np.asarray(faces, dtype=int)


def _grid_conformality(mesh, nx, ny, hx, hy):
    """Second-order conformality residual on the structured cylinder grid."""
    v = mesh.vertices.reshape(nx, ny, -1)
    fx = np.gradient(v, hx, axis=0, edge_order=2)
    fy = (np.roll(v, -1, axis=1) - np.roll(v, 1, axis=1)) / (2 * hy)
    fz = 0.5 * (fx - 1j * fy)
    if mesh.spaceform == "H3":
        gm = MINK
        ip = np.einsum('xyc,cd,xyd->xy', fz, gm, fz)
        nm = np.einsum('xyc,cd,xyd->xy', fz, gm, np.conj(fz))
    else:
        ip = np.einsum('xyc,xyc->xy', fz, fz)
        nm = np.einsum('xyc,xyc->xy', fz, np.conj(fz))
    res = np.abs(ip) / np.maximum(np.abs(nm), 1e-300)
    mesh.diagnostics["conformality"] = res.ravel()


# ---------------------------------------------------------------------------
# trinoid grids
# ---------------------------------------------------------------------------

@dataclass
class TrinoidGrid:
    """Chart layout for the thrice-punctured sphere.

    Three annular end charts (geometric grading toward the punctures,
    theta offset by a half step so the homotopy cuts are never sampled)
    continued by geometric strips out to the partition curves |z| = 1,
    |z - 1| = 1 and Re z = 1/2.  Extra rays refine the two triple points,
    which are shared vertices of all three regions.
    """

    n_theta: int = 48
    n_rho: int = 16
    n_strip: int = 5
    rho_min: float = 1e-3
    rho_out: float = 0.42
    base: complex = 0.5 + 0j

    def thetas(self):
        return 2 * np.pi * (np.arange(self.n_theta) + 0.5) / self.n_theta

    def rhos(self):
        ratio = (self.rho_min / self.rho_out) ** (1.0 / (self.n_rho - 1))
        return self.rho_out * ratio ** np.arange(self.n_rho)

    def chart_point(self, k, rho, th):
        w = rho * np.exp(1j * th)
        if k == 0:
            return w
        if k == 1:
            return 1.0 - w
        return 1.0 / w

    def vertex_count(self):
        return 3 * self.n_theta * (self.n_rho + self.n_strip)


def _region_rho_max(th):
    """Outer radius of the end-0/1 regions along a chart ray.

    The thrice-punctured sphere splits into three chart regions along
    |z| = 1, |z - 1| = 1 and Re z = 1/2; for the finite ends the local
    region is { rho <= min(1, 1/(2 cos theta)) }.
    """
    c = np.cos(th)
    with np.errstate(divide="ignore"):
        line = np.where(c > 0.5, 0.5 / np.maximum(c, 1e-300), np.inf)
    return np.minimum(1.0, line)


def _chart_to_z(k, w):
    if k == 0:
        return w
    if k == 1:
        return 1.0 - w
    return 1.0 / w


def _strip_radii(rho_out, rmax, g_target):
    """Geometric strip levels continuing the annulus grading outward."""
    span = np.log(max(rmax, rho_out * 1.001) / rho_out)
    m = max(1, int(round(span / np.log(g_target))))
    return [rho_out * np.exp(span * (jl / m)) for jl in range(1, m + 1)]


def _chart_rays(grid):
    """Per-chart ray angles, strip radii, and boundary targets.

    Charts 0 and 1 use the uniform half-offset angles plus corner
    refinement rays around +-pi/3 (the triple points of the partition,
    included exactly).  The infinity chart takes one ray per shared
    circle-boundary vertex, so the three regions glue watertight.
    Returns {k: (angles, strip radii lists, target z)}.
    """
    cor = np.pi / 3
    ths = np.sort(np.concatenate([grid.thetas(),
                                  np.asarray([cor, -cor]) % (2 * np.pi)]))
    g_target = (1.0 / grid.rho_out) ** (1.0 / grid.n_strip)
    out = {}
    rmax01 = _region_rho_max(ths)
    for k in (0, 1):
        targets = np.array([_chart_to_z(k, r * np.exp(1j * t))
                            for t, r in zip(ths, rmax01)])
        radii = [_strip_radii(grid.rho_out, r, g_target) for r in rmax01]
        out[k] = (ths, radii, targets)
    wset = {}
    for k in (0, 1):
        ths_k, radii_k, targ_k = out[k]
        for th, rad, z in zip(ths_k, radii_k, targ_k):
            if rad[-1] >= 1.0 - 1e-12:      # ends on the unit circle
                w = 1.0 / z
                wset[round(np.angle(w) % (2 * np.pi), 12)] = (w, z)
    ang = np.array(sorted(wset))
    ws = np.array([wset[a][0] for a in ang])
    targ2 = np.array([wset[a][1] for a in ang])
    radii2 = [_strip_radii(grid.rho_out, abs(w), g_target) for w in ws]
    # snap the outermost level to the exact shared radius
    for rad, w in zip(radii2, ws):
        rad[-1] = abs(w)
    out[2] = (np.angle(ws) % (2 * np.pi), radii2, targ2)
    return out


def _build_trinoid_domain(grid: TrinoidGrid):
    """Vertex list, faces, chart ids, and transport chains.

    Chart k covers its full region: the graded annulus [rho_min, rho_out]
    plus a geometric strip from rho_out to the region boundary (per-ray
    level counts, ladder-stitched).  Local coordinates: w = z (end 0),
    w = 1 - z (end 1), w = 1/z (end infinity).  Boundary vertices are
    shared across regions by construction.
    """
    if grid.n_theta % 6:
        raise ValueError("n_theta must be divisible by 6")
    rhs = grid.rhos()
    nr = grid.n_rho
    rays = _chart_rays(grid)
    zs, chart, local = [], [], []
    index = {}
    strip_ids = {}
    shared = {}

    def add_vertex(k, w, key_z=None):
        if key_z is not None:
            key = (round(key_z.real, 9), round(key_z.imag, 9))
            if key in shared:
                return shared[key]
        vid = len(zs)
        zs.append(_chart_to_z(k, w))
        chart.append(k)
        local.append(w)
        if key_z is not None:
            shared[key] = vid
        return vid

    for k in range(3):
        ths_k, radii_k, targ_k = rays[k]
        for jt, th in enumerate(ths_k):
            e = np.exp(1j * th)
            for jr, rho in enumerate(rhs):
                index[(k, jt, jr)] = add_vertex(k, rho * e)
            ids = []
            rad = radii_k[jt]
            for jl, rho in enumerate(rad):
                keyz = targ_k[jt] if jl == len(rad) - 1 else None
                ids.append(add_vertex(k, rho * e, key_z=keyz))
            strip_ids[(k, jt)] = ids
    faces = []
    for k in range(3):
        ths_k, radii_k, _ = rays[k]
        nt_k = len(ths_k)
        for jt in range(nt_k):
            jt2 = (jt + 1) % nt_k
            for jr in range(nr - 1):
                a = index[(k, jt, jr)]
                b = index[(k, jt2, jr)]
                c = index[(k, jt, jr + 1)]
                d = index[(k, jt2, jr + 1)]
                faces.append((a, b, c))
                faces.append((b, d, c))
            chain_a = [index[(k, jt, 0)]] + strip_ids[(k, jt)]
            chain_b = [index[(k, jt2, 0)]] + strip_ids[(k, jt2)]
            rad_a = [grid.rho_out] + list(radii_k[jt])
            rad_b = [grid.rho_out] + list(radii_k[jt2])
            _ladder(faces, chain_a, rad_a, chain_b, rad_b)
    _fill_corner_holes(faces)
    # drop degenerate faces from shared endpoints
    faces = [f for f in faces if len(set(f)) == 3]
    zs = np.asarray(zs)
    return (zs, np.asarray(chart), np.asarray(local),
            np.asarray(faces, dtype=int), index, rays, strip_ids)


def _ladder(faces, chain_a, rad_a, chain_b, rad_b):
    """Stitch two radial chains of unequal length with triangles."""
    i = j = 0
    la, lb = len(chain_a) - 1, len(chain_b) - 1
    while i < la or j < lb:
        if i < la and (j == lb or rad_a[i + 1] <= rad_b[j + 1]):
            faces.append((chain_a[i], chain_b[j], chain_a[i + 1]))
            i += 1
        else:
            faces.append((chain_a[i], chain_b[j], chain_b[j + 1]))
            j += 1


def _fill_corner_holes(faces):
    """Close the two 3-edge holes at the triple points of the partition."""
    count = {}
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            count[(min(a, b), max(a, b))] = count.get((min(a, b), max(a, b)), 0) + 1
    boundary = [e for e, c_ in count.items() if c_ == 1]
    adj = {}
    for a, b in boundary:
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    seen = set()
    for a in sorted(adj):
        if a in seen:
            continue
        for b in sorted(adj[a]):
            common = (adj[a] & adj.get(b, set())) - {a, b}
            for c_ in sorted(common):
                tri = (a, b, c_)
                if all((min(x, y), max(x, y)) in count and
                       count[(min(x, y), max(x, y))] == 1
                       for x, y in ((a, b), (b, c_), (c_, a))):
                    faces.append(tri)
                    seen.update(tri)
                    for x, y in ((a, b), (b, c_), (c_, a)):
                        count[(min(x, y), max(x, y))] += 1


# ---------------------------------------------------------------------------
# trinoid pipeline
# ---------------------------------------------------------------------------

def _trinoid_target(p: TrinoidParams):
    lam0 = complex(p.lambda0)
    if p.spaceform == "R3":
        return SpaceformTarget.r3(p.H, lam0)
    if p.spaceform == "S3":
        # Sym points are the two zeros of h: 1/lambda0 and lambda0
        return SpaceformTarget.s3(1.0 / lam0, lam0)
    return SpaceformTarget.h3(lam0)


class _TreeTransport:
    """Walk Phi down the chart chains, one kernel segment per vertex."""

    def __init__(self, pot, grid, rtol=1e-11):
        self.pot = pot
        self.grid = grid
        self.rtol = rtol
        self.n = pot.n
        self.q5 = trinoid_q_coeffs(pot.p)

    def _advance(self, y, z_from, z_to):
        seg = np.array([z_from.real, z_from.imag, (z_to - z_from).real,
                        (z_to - z_from).imag, 0.0, 0.0])
        return integrate_segment(y, self.pot.k1, self.pot.k2, 0, seg, 1,
                                 self.q5, rtol=self.rtol)

    def _advance_arc(self, y, center, radius, th0, th1):
        seg = np.array([center.real, center.imag, radius, 0.0, th0, th1 - th0])
        return integrate_segment(y, self.pot.k1, self.pot.k2, 1, seg, 1,
                                 self.q5, rtol=self.rtol)

    def chain(self, k, th, strip_radii):
        """Phi along one radial chain of chart k at angle th.

        Route: base -> chart anchor on the outer ring at the safe entry
        angle -> arc along the ring to th -> radially inward through the
        annulus and outward through the strip.  Returns the annulus levels
        {level: samples} and the strip list [samples, ...].
        """
        grid = self.grid
        rhs = grid.rhos()
        nr = grid.n_rho
        ident = np.broadcast_to(np.eye(2, dtype=complex), (self.n, 2, 2)).copy()
        base = complex(grid.base)
        if k == 0:
            center, entry_th = 0.0 + 0j, 0.0
            anchor = center + grid.rho_out * np.exp(1j * entry_th)
            y = self._advance(ident, base, complex(anchor))
            y = self._advance_arc(y, center, grid.rho_out, entry_th,
                                  entry_th + _wrap_offset(th - entry_th))
        elif k == 1:
            # local w = 1 - z: ring point z = 1 - rho e^{i th}
            center, entry_th = 1.0 + 0j, 0.0
            anchor = center - grid.rho_out
            y = self._advance(ident, base, complex(anchor))
            # z = 1 - rho e^{i th}: z-angle about 1 is th + pi
            y = self._advance_arc(y, center, grid.rho_out, np.pi,
                                  np.pi + _wrap_offset(th))
        else:
            # anchor on the imaginary axis so the entry stays clear of z = 1
            ring_r = 1.0 / grid.rho_out
            y = self._advance(ident, base, 1j * ring_r)
            # z = (1/rho) e^{-i th}: increasing local theta walks clockwise
            y = self._advance_arc(y, 0.0, ring_r, np.pi / 2,
                                  np.pi / 2 + _wrap_offset(-th - np.pi / 2))
        out = {0: y}
        yin = y
        for jr in range(1, nr):
            z0 = _chart_to_z(k, rhs[jr - 1] * np.exp(1j * th))
            z1 = _chart_to_z(k, rhs[jr] * np.exp(1j * th))
            yin = self._advance(yin, complex(z0), complex(z1))
            out[jr] = yin
        strip = []
        yout = y
        prev = grid.rho_out
        for rho in strip_radii:
            z0 = _chart_to_z(k, prev * np.exp(1j * th))
            z1 = _chart_to_z(k, rho * np.exp(1j * th))
            yout = self._advance(yout, complex(z0), complex(z1))
            strip.append(yout)
            prev = rho
        return out, strip


def _wrap_offset(dth):
    """Angle increment in (-2 pi, 2 pi) walking the short way around."""
    return (dth + np.pi) % (2 * np.pi) - np.pi


def build_trinoid_surface(p: TrinoidParams, grid: TrinoidGrid | None = None,
                          n=256, rtol=1e-11, threads=None,
                          period_tol=1e-5, check_period=True):
    """Full pipeline mesh of a trinoid in its space form.

    Gates on the admissibility battery, unitarizes the monodromy, then
    transports the dressed frame over the chart tree, splits it per vertex
    in column batches, and applies the space form Sym formula.
    """
    require_admissible(p)
    if grid is None:
        grid = TrinoidGrid()
    target = _trinoid_target(p)
    pot = trinoid_potential(p, n=n)
    rep = monodromy(pot, rtol=max(rtol * 1e-1, 1e-13))
    trace_dev = trace_identity_check(rep, p)
    c, conj, urep = unitarizer(list(rep.loops))
    closing = closing_check(conj, target)

    zs, chart, local, faces, index, rays, strip_ids = _build_trinoid_domain(grid)
    nv = len(zs)
    psi = np.empty((nv, n, 2, 2), dtype=complex)
    transport = _TreeTransport(pot, grid, rtol=rtol)

    def run_chain(args):
        k, jt, th, radii = args
        vals, strip = transport.chain(k, th, radii)
        for jr, y in vals.items():
            psi[index[(k, jt, jr)]] = y
        for vid, y in zip(strip_ids[(k, jt)], strip):
            psi[vid] = y

    jobs = [(k, jt, rays[k][0][jt], rays[k][1][jt])
            for k in range(3) for jt in range(len(rays[k][0]))]
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(run_chain, jobs))
    else:
        for job in jobs:
            run_chain(job)

    cs = c.samples[None]
    vertices = np.empty((nv, 3 if target.tag == "R3" else 4))
    normals = np.empty_like(vertices)
    branch = np.zeros(nv, dtype=bool)
    batch = 64
    for lo in range(0, nv, batch):
        hi = min(lo + batch, nv)
        dressed = cs @ psi[lo:hi]
        fs, bs, _ = iwasawa_batch(dressed, radius=1.0)
        for i in range(lo, hi):
            floop = Loop(fs[i - lo], 1.0)
            vertices[i] = sym_point(floop, target, generalized=True)
            normals[i] = _normal_point(floop, target)
            b0 = floop_b0(bs[i - lo])
            branch[i] = abs(b0[0, 0] / b0[1, 1]) < 1e-8
    interior = np.ones(nv, dtype=bool)
    for k in range(3):
        for jt in range(len(rays[k][0])):
            interior[index[(k, jt, grid.n_rho - 1)]] = False

    period = None
    if check_period:
        period = _period_residual(rep, c, psi, zs, chart, target)
        if period > period_tol:
            raise PeriodResidualTooLarge(
                "period residual %.3e above %.1e" % (period, period_tol))

    ws, wmargins, wbounds = formal_end_weights(p)
    mesh = SurfaceMesh(vertices=vertices, normals=normals, faces=faces,
                       domain_z=local, chart=chart, interior=interior)
    mesh.metadata = {
        "family": "trinoid", "spaceform": p.spaceform,
        "params": {"v0": p.v0, "v1": p.v1, "vinf": p.vinf, "H": p.H,
                   "lambda0": [np.real(p.lambda0), np.imag(p.lambda0)]},
        "samples": n, "rtol": rtol,
        "grid": {"n_theta": grid.n_theta, "n_rho": grid.n_rho,
                 "rho_min": grid.rho_min, "rho_out": grid.rho_out},
        "trace_identity_deviation": float(trace_dev),
        "unitarizer": urep.to_dict(),
        "closing": closing["worst"],
        "period_residual": period,
        "formal_end_weights": list(ws),
        "weight_margins": wmargins,
        "weight_bounds": wbounds,
    }
    mesh.diagnostics["branch_flag"] = branch
    _face_conformality(mesh)
    mesh.diagnostics["discrete_H"] = _chart_h_field(
        transport, mesh, psi, index, rays, grid, cs, target)
    verify_geometry(mesh, target)
    return mesh


def _chart_h_field(transport, mesh, psi, index, rays, grid, cs, target):
    """Discrete mean curvature from per-chart structured stencils.

    The mesh interleaves three chart families along the partition curves,
    and pointwise cotan readings on the stitched junctions are mesh noise,
    not surface error.  Instead the estimator runs on each chart's smooth
    (theta x log rho) grid, extended by phantom rows beyond the region
    boundary, and the resulting smooth field is interpolated onto the
    chart's mesh vertices.
    """
    nr = grid.n_rho
    rhs = grid.rhos()
    gstep = rhs[0] / rhs[1]
    next = int(np.ceil(np.log(1.3 / grid.rho_out) / np.log(gstep))) + 2
    ext_levels = grid.rho_out * gstep ** np.arange(1, next + 1)
    levels = np.concatenate([rhs[::-1], ext_levels])
    nlev = len(levels)
    hfield = np.full(len(mesh.vertices), np.nan)
    owner = mesh.chart
    for k in range(3):
        all_ths = rays[k][0]
        # keep only smoothly spaced rays: the corner-refinement rays make
        # local 3:1 angular jumps that would feed noise into the stencils
        d_next = (np.roll(all_ths, -1) - all_ths) % (2 * np.pi)
        d_prev = (all_ths - np.roll(all_ths, 1)) % (2 * np.pi)
        gaps = np.minimum(d_next, d_prev)
        med = np.median(gaps)
        keep = np.where(gaps > 0.55 * med)[0]
        ths_k = all_ths[keep]
        ntk = len(ths_k)
        pts = np.empty((ntk, nlev, mesh.vertices.shape[1]))
        nrm = np.empty_like(pts)
        for jj, jt in enumerate(keep):
            for jr in range(nr):
                vid = index[(k, jt, jr)]
                pts[jj, nr - 1 - jr] = mesh.vertices[vid]
                nrm[jj, nr - 1 - jr] = mesh.normals[vid]
        # phantom extension rows: continue the rays outward
        ext = np.empty((ntk, next, transport.n, 2, 2), dtype=complex)
        for jj, jt in enumerate(keep):
            th = all_ths[jt]
            y = psi[index[(k, jt, 0)]]
            prev = grid.rho_out
            for jl, rho in enumerate(ext_levels):
                z0 = _chart_to_z(k, prev * np.exp(1j * th))
                z1 = _chart_to_z(k, rho * np.exp(1j * th))
                y = transport._advance(y, complex(z0), complex(z1))
                ext[jj, jl] = y
                prev = rho
        flat = ext.reshape(ntk * next, transport.n, 2, 2)
        for lo in range(0, len(flat), 64):
            hi = min(lo + 64, len(flat))
            fs, _, _ = iwasawa_batch(cs @ flat[lo:hi], radius=1.0)
            for i in range(lo, hi):
                jt, jl = divmod(i, next)
                floop = Loop(fs[i - lo], 1.0)
                pts[jt, nr + jl] = sym_point(floop, target, generalized=True)
                nrm[jt, nr + jl] = _normal_point(floop, target)
        # structured cotan on the chart grid (theta wraps)
        verts = pts.reshape(ntk * nlev, -1)
        norms = nrm.reshape(ntk * nlev, -1)
        gfaces = []
        for jt in range(ntk):
            jt2 = (jt + 1) % ntk
            for jr in range(nlev - 1):
                a = jt * nlev + jr
                b = jt2 * nlev + jr
                gfaces.append((a, b, a + 1))
                gfaces.append((b, b + 1, a + 1))
        gmesh = SurfaceMesh(vertices=verts, normals=norms,
                            faces=np.asarray(gfaces, dtype=int),
                            domain_z=np.zeros(len(verts), dtype=complex),
                            chart=np.zeros(len(verts), dtype=int),
                            interior=np.ones(len(verts), dtype=bool),
                            metadata={"spaceform": mesh.metadata["spaceform"]})
        hgrid = discrete_mean_curvature(gmesh, target).reshape(ntk, nlev)
        # clamp readings to levels with full stencils
        hgrid[:, 0] = hgrid[:, 1]
        hgrid[:, -1] = hgrid[:, -2]
        # bilinear interpolation in (theta, log rho) onto the chart's vertices
        loglev = np.log(levels)
        mine = np.where(owner == k)[0]
        w = mesh.domain_z[mine]
        thv = np.angle(w) % (2 * np.pi)
        rv = np.clip(np.log(np.abs(w)), loglev[0], loglev[-1])
        jt1 = np.searchsorted(ths_k, thv) % ntk
        jt0 = (jt1 - 1) % ntk
        span = (ths_k[jt1] - ths_k[jt0]) % (2 * np.pi)
        tfrac = ((thv - ths_k[jt0]) % (2 * np.pi)) / np.where(span == 0, 1, span)
        jr1 = np.clip(np.searchsorted(loglev, rv), 1, nlev - 1)
        jr0 = jr1 - 1
        rfrac = (rv - loglev[jr0]) / (loglev[jr1] - loglev[jr0])
        vals = (hgrid[jt0, jr0] * (1 - tfrac) * (1 - rfrac)
                + hgrid[jt1, jr0] * tfrac * (1 - rfrac)
                + hgrid[jt0, jr1] * (1 - tfrac) * rfrac
                + hgrid[jt1, jr1] * tfrac * rfrac)
        hfield[mine] = vals
    return hfield


def _period_residual(rep, c, psi, zs, chart, target, count=6):
    """Sym-point disagreement along deck-translated paths at probe vertices."""
    cs = c.samples
    worst = 0.0
    probes = np.linspace(0, len(zs) - 1, count, dtype=int)
    for vid in probes:
        base = cs @ psi[vid]
        for h in (rep.H0, rep.H1):
            moved = cs @ h.samples @ psi[vid]
            fs, _, _ = iwasawa_batch(np.stack([base, moved]), radius=1.0)
            p0 = np.asarray(sym_point(Loop(fs[0]), target, generalized=True))
            p1 = np.asarray(sym_point(Loop(fs[1]), target, generalized=True))
            worst = max(worst, float(np.max(np.abs(p0 - p1))))
    return worst


def _face_conformality(mesh):
    """Per-face PL conformality residual, averaged onto vertices."""
    z = mesh.domain_z
    f = mesh.vertices
    tris = mesh.faces
    u = np.stack([z.real, z.imag], axis=-1)
    e1 = u[tris[:, 1]] - u[tris[:, 0]]
    e2 = u[tris[:, 2]] - u[tris[:, 0]]
    g1 = f[tris[:, 1]] - f[tris[:, 0]]
    g2 = f[tris[:, 2]] - f[tris[:, 0]]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    det = np.where(np.abs(det) < 1e-300, 1e-300, det)
    # gradient rows: d f / dx, d f / dy of the affine map per face
    gx = (g1 * e2[:, 1, None] - g2 * e1[:, 1, None]) / det[:, None]
    gy = (-g1 * e2[:, 0, None] + g2 * e1[:, 0, None]) / det[:, None]
    fz = 0.5 * (gx - 1j * gy)
    if mesh.spaceform == "H3":
        ip = np.einsum('fc,cd,fd->f', fz, MINK, fz)
        nm = np.einsum('fc,cd,fd->f', fz, MINK, np.conj(fz))
    else:
        ip = np.einsum('fc,fc->f', fz, fz)
        nm = np.einsum('fc,fc->f', fz, np.conj(fz))
    face_res = np.abs(ip) / np.maximum(np.abs(nm), 1e-300)
    acc = np.zeros(len(mesh.vertices))
    cnt = np.zeros(len(mesh.vertices))
    # faces crossing a chart seam mix incompatible local coordinates
    same = (mesh.chart[tris[:, 0]] == mesh.chart[tris[:, 1]]) & \
           (mesh.chart[tris[:, 0]] == mesh.chart[tris[:, 2]])
    for c_ in range(3):
        np.add.at(acc, tris[same, c_], face_res[same])
        np.add.at(cnt, tris[same, c_], 1.0)
    mesh.diagnostics["conformality"] = acc / np.maximum(cnt, 1.0)


# ---------------------------------------------------------------------------
# discrete geometry verification
# ---------------------------------------------------------------------------

def _cotan_weights(v, faces, metric=None):
    """Cotangent weights and mixed areas; metric=None means Euclidean."""
    def ip(a, b):
        if metric is None:
            return np.einsum('fc,fc->f', a, b)
        return -np.einsum('fc,cd,fd->f', a, metric, b)

    i, j, k = faces[:, 0], faces[:, 1], faces[:, 2]
    cots = []
    for (a, b, c_) in ((i, j, k), (j, k, i), (k, i, j)):
        u = v[b] - v[a]
        w = v[c_] - v[a]
        uu, vv, uv = ip(u, u), ip(w, w), ip(u, w)
        area2 = np.sqrt(np.maximum(uu * vv - uv * uv, 1e-300))
        cots.append(uv / area2)
    area = 0.5 * np.sqrt(np.maximum(
        ip(v[j] - v[i], v[j] - v[i]) * ip(v[k] - v[i], v[k] - v[i])
        - ip(v[j] - v[i], v[k] - v[i]) ** 2, 1e-300))
    return cots, area


def _mixed_areas(v, faces, cots, area, metric=None):
    """Voronoi-mixed vertex areas (Voronoi cells, clamped on obtuse faces)."""
    def sq(a, b):
        if metric is None:
            return np.einsum('fc,fc->f', v[a] - v[b], v[a] - v[b])
        d = v[a] - v[b]
        return -np.einsum('fc,cd,fd->f', d, metric, d)

    nvert = len(v)
    i, j, k = faces[:, 0], faces[:, 1], faces[:, 2]
    l2 = {"jk": sq(j, k), "ki": sq(k, i), "ij": sq(i, j)}
    obtuse_any = (cots[0] < 0) | (cots[1] < 0) | (cots[2] < 0)
    amix = np.zeros(nvert)
    corner = {
        0: (i, l2["ij"], cots[2], l2["ki"], cots[1]),
        1: (j, l2["jk"], cots[0], l2["ij"], cots[2]),
        2: (k, l2["ki"], cots[1], l2["jk"], cots[0]),
    }
    for c_, (vid, la, ca, lb, cb) in corner.items():
        voro = (la * ca + lb * cb) / 8.0
        own_obtuse = cots[c_] < 0
        contrib = np.where(~obtuse_any, voro,
                           np.where(own_obtuse, area / 2.0, area / 4.0))
        np.add.at(amix, vid, contrib)
    return np.maximum(amix, 1e-300)


def discrete_mean_curvature(mesh: SurfaceMesh, target: SpaceformTarget):
    """Cotangent-Laplacian mean curvature against the vertex normals.

    R3: H = <L f / (2 A), n>.  S3: the ambient Laplacian carries the extra
    sphere term, H = <L f / (2 A), n> with the tangential projection along
    n in R^4.  H3: same with the Minkowski metric on the hyperboloid.
    """
    v = mesh.vertices
    nvert = len(v)
    metric = MINK if target.tag == "H3" else None
    cots, area = _cotan_weights(v, mesh.faces, metric)
    lap = np.zeros_like(v)
    i, j, k = mesh.faces[:, 0], mesh.faces[:, 1], mesh.faces[:, 2]
    for (a, b, opp_cot) in ((i, j, cots[2]), (j, k, cots[0]), (k, i, cots[1])):
        w = 0.5 * opp_cot
        np.add.at(lap, a, w[:, None] * (v[b] - v[a]))
        np.add.at(lap, b, w[:, None] * (v[a] - v[b]))
    amix = _mixed_areas(v, mesh.faces, cots, area, metric)
    hvec = lap / (2.0 * amix[:, None])
    n = mesh.normals
    if target.tag == "R3":
        hd = -np.einsum('vc,vc->v', hvec, n)
    elif target.tag == "S3":
        hd = -np.einsum('vc,vc->v', hvec, n)
    else:
        hd = np.einsum('vc,cd,vd->v', hvec, MINK, n)
    return hd


def verify_geometry(mesh: SurfaceMesh, target: SpaceformTarget | None = None,
                    expected_H=None):
    """Attach discrete-H and conformality statistics to the mesh."""
    if target is None:
        target = _target_from_metadata(mesh)
    if expected_H is None:
        expected_H = mesh.metadata.get("params", {}).get("H", target.H)
    mesh.diagnostics["discrete_H_mesh"] = discrete_mean_curvature(mesh, target)
    if "discrete_H" not in mesh.diagnostics:
        mesh.diagnostics["discrete_H"] = mesh.diagnostics["discrete_H_mesh"]
    hd = mesh.diagnostics["discrete_H"]
    sel = mesh.interior & ~mesh.diagnostics.get(
        "branch_flag", np.zeros(len(hd), dtype=bool))
    rel = np.abs(hd[sel] - expected_H) / max(abs(expected_H), 1e-300)
    conf = mesh.diagnostics.get("conformality")
    report = {
        "H_target": float(expected_H),
        "H_median": float(np.median(hd[sel])) if sel.any() else None,
        "H_rel_dev_quantiles": _quantiles(rel),
        "H_rel_dev_max": float(rel.max()) if sel.any() else None,
        "conformality_quantiles": _quantiles(conf[sel]) if conf is not None else None,
        "ambient_residual_max": float(np.max(ambient_residual(
            mesh.vertices, target.tag))),
        "H_mismatch_flag": bool(np.median(rel) > 0.05) if sel.any() else True,
    }
    mesh.metadata["geometry"] = report
    return report


def _quantiles(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return None
    qs = np.quantile(x, [0.5, 0.9, 0.99])
    return {"q50": float(qs[0]), "q90": float(qs[1]), "q99": float(qs[2])}


def _target_from_metadata(mesh):
    md = mesh.metadata
    tag = md.get("spaceform", "R3")
    par = md.get("params", {})
    lam0 = complex(*par.get("lambda0", (1.0, 0.0)))
    if tag == "R3":
        return SpaceformTarget.r3(par.get("H", 1.0), lam0)
    if tag == "S3":
        if md.get("family") == "trinoid":
            return SpaceformTarget.s3(1.0 / lam0, lam0)
        return SpaceformTarget.s3(lam0, np.conj(lam0))
    return SpaceformTarget.h3(lam0)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def project_vertices(mesh: SurfaceMesh):
    """Ambient points to exportable R^3 coordinates.

    S3 via stereographic projection from (-1, 0, 0, 0); H3 via the Poincare
    ball map x / (1 + x0).
    """
    v = mesh.vertices
    if mesh.spaceform == "R3":
        return v.copy()
    if mesh.spaceform == "S3":
        den = 1.0 + v[:, 0]
        bad = den < 1e-9
        if np.any(bad):
            raise UnprojectablePoint(
                "stereographic pole hit at vertex %d" % int(np.where(bad)[0][0]),
                index=int(np.where(bad)[0][0]))
        return v[:, 1:] / den[:, None]
    return v[:, 1:] / (1.0 + v[:, 0])[:, None]


def _projected_normals(pts, faces, nvert):
    nrm = np.zeros((nvert, 3))
    e1 = pts[faces[:, 1]] - pts[faces[:, 0]]
    e2 = pts[faces[:, 2]] - pts[faces[:, 0]]
    fn = np.cross(e1, e2)
    for c_ in range(3):
        np.add.at(nrm, faces[:, c_], fn)
    ln = np.linalg.norm(nrm, axis=1)
    return nrm / np.maximum(ln, 1e-300)[:, None]


def export_mesh(mesh: SurfaceMesh, fmt, path):
    """Write OBJ (text) or PLY (binary little-endian) plus a JSON sidecar."""
    fmt = fmt.upper()
    pts = project_vertices(mesh)
    if mesh.spaceform == "R3":
        nrm = mesh.normals
    else:
        nrm = _projected_normals(pts, mesh.faces, len(pts))
    path = str(path)
    if fmt == "OBJ":
        lines = []
        for p_ in pts:
            lines.append("v %.17g %.17g %.17g" % tuple(p_))
        for n_ in nrm:
            lines.append("vn %.17g %.17g %.17g" % tuple(n_))
        for f_ in mesh.faces:
            lines.append("f %d//%d %d//%d %d//%d"
                         % (f_[0] + 1, f_[0] + 1, f_[1] + 1, f_[1] + 1,
                            f_[2] + 1, f_[2] + 1))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    elif fmt == "PLY":
        _write_ply(mesh, pts, nrm, path)
    else:
        raise ValueError("format must be OBJ or PLY")
    sidecar = path + ".json"
    with open(sidecar, "w") as fh:
        json.dump(sidecar_payload(mesh), fh, sort_keys=True, indent=1)
    return sidecar


def sidecar_payload(mesh):
    diag = {}
    for key, arr in mesh.diagnostics.items():
        a = np.asarray(arr, dtype=float)
        diag[key] = {"q50": float(np.quantile(a, 0.5)),
                     "q90": float(np.quantile(a, 0.9)),
                     "max": float(a.max()), "min": float(a.min())}
    return {"metadata": _jsonable(mesh.metadata),
            "diagnostic_quantiles": diag,
            "counts": {"vertices": int(len(mesh.vertices)),
                       "faces": int(len(mesh.faces))}}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _write_ply(mesh, pts, nrm, path):
    conf = np.asarray(mesh.diagnostics.get("conformality",
                                           np.zeros(len(pts))), dtype=float)
    hd = np.asarray(mesh.diagnostics.get("discrete_H",
                                         np.zeros(len(pts))), dtype=float)
    bf = np.asarray(mesh.diagnostics.get("branch_flag",
                                         np.zeros(len(pts))), dtype=float)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        "element vertex %d\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property float conformality\nproperty float discrete_h\n"
        "property float branch_flag\n"
        "element face %d\nproperty list uchar int vertex_indices\nend_header\n"
        % (len(pts), len(mesh.faces)))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for idx in range(len(pts)):
            fh.write(struct.pack("<9f", *pts[idx], *nrm[idx], conf[idx],
                                 hd[idx], bf[idx]))
        for f_ in mesh.faces:
            fh.write(struct.pack("<Biii", 3, int(f_[0]), int(f_[1]), int(f_[2])))
