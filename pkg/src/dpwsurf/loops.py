"""Matrix-valued loops on circles C_r: sampling, Laurent transforms, star.

A Loop stores N uniform samples on the circle of radius r, with N a power
of two, and lazily caches the centered Laurent window k in [-N/2, N/2).
Loops are immutable after construction; the coefficient cache is populated
once under a lock and may be shared across threads.
"""
import threading

import numpy as np

from .errors import GridMismatch, NonAnalyticEvaluation, SingularSample, ZeroLambda
from .linalg import det2, herm, inv2, maxabs

DEFAULT_N = 256
MAX_N = 4096
TAIL_TOL = 1e-10


def nodes(n=DEFAULT_N, radius=1.0):
    """Sample points lambda_j = r exp(2 pi i j / n)."""
    return radius * np.exp(2j * np.pi * np.arange(n) / n)


def _is_pow2(n):
    return n >= 8 and (n & (n - 1)) == 0


class Loop:
    """A 2x2-matrix (or scalar) valued analytic function sampled on C_r."""

    __slots__ = ("radius", "samples", "_coeffs", "_lock")

    def __init__(self, samples, radius=1.0):
        samples = np.asarray(samples, dtype=complex)
        n = samples.shape[0]
        if not _is_pow2(n):
            raise ValueError("sample count must be a power of two >= 8, got %d" % n)
        if samples.ndim not in (1, 3) or (samples.ndim == 3 and samples.shape[1:] != (2, 2)):
            raise ValueError("samples must have shape (N,) or (N, 2, 2)")
        if not (0.0 < radius <= 1.0):
            raise ValueError("radius must lie in (0, 1]")
        if not np.all(np.isfinite(samples)):
            raise ValueError("loop samples contain NaN/Inf")
        self.radius = float(radius)
        self.samples = samples
        self.samples.setflags(write=False)
        self._coeffs = None
        self._lock = threading.Lock()

    # ---- constructors ----

    @classmethod
    def constant(cls, value, n=DEFAULT_N, radius=1.0):
        value = np.asarray(value, dtype=complex)
        return cls(np.tile(value, (n,) + (1,) * value.ndim), radius)

    @classmethod
    def identity(cls, n=DEFAULT_N, radius=1.0):
        return cls.constant(np.eye(2), n, radius)

    @classmethod
    def from_function(cls, fn, n=DEFAULT_N, radius=1.0, tail_tol=TAIL_TOL, max_n=MAX_N):
        """Sample fn(lambda_array); double N until the Laurent tail certifies.

        The doubling keeps shared nodes fixed, so band-limited functions are
        reproduced exactly at the first N that resolves them.
        """
        while True:
            loop = cls(fn(nodes(n, radius)), radius)
            if n >= max_n or loop.tail_fraction() <= tail_tol:
                return loop
            n *= 2

    @classmethod
    def from_coeffs(cls, coeffs, n=None, radius=1.0):
        """Build from a dict {power: matrix} or a centered coefficient array."""
        if isinstance(coeffs, dict):
            kmax = max(abs(int(k)) for k in coeffs)
            if n is None:
                n = DEFAULT_N
                while n // 2 <= kmax:
                    n *= 2
            first = np.asarray(next(iter(coeffs.values())), dtype=complex)
            arr = np.zeros((n,) + first.shape, dtype=complex)
            for k, v in coeffs.items():
                arr[int(k) + n // 2] = v
        else:
            arr = np.asarray(coeffs, dtype=complex)
            n = arr.shape[0]
        return cls(_coeffs_to_samples(arr, radius), radius)

    # ---- basic structure ----

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def is_scalar(self):
        return self.samples.ndim == 1

    @property
    def lam(self):
        return nodes(self.n, self.radius)

    @property
    def coeffs(self):
        """Centered Laurent coefficients; index i holds power k = i - N/2."""
        if self._coeffs is None:
            with self._lock:
                if self._coeffs is None:
                    self._coeffs = _samples_to_coeffs(self.samples, self.radius)
                    self._coeffs.setflags(write=False)
        return self._coeffs

    @property
    def powers(self):
        return np.arange(self.n) - self.n // 2

    def __repr__(self):
        kind = "scalar" if self.is_scalar else "2x2"
        return "Loop(%s, N=%d, r=%g)" % (kind, self.n, self.radius)

    # ---- diagnostics ----

    def tail_fraction(self, frac=0.25):
        """Relative coefficient mass in the outer `frac` of the window."""
        c = self.coeffs
        mag = np.abs(c).reshape(self.n, -1).max(axis=1)
        k = self.powers
        cut = int(self.n // 2 * (1.0 - frac))
        tail = mag[np.abs(k) >= cut].sum()
        total = mag.sum()
        return float(tail / total) if total > 0 else 0.0

    def tail_bound(self, s, frac=0.25):
        """Upper bound sum |c_k| s^k over the outer window; certifies eval at |lambda|=s."""
        c = self.coeffs
        mag = np.abs(c).reshape(self.n, -1).max(axis=1)
        k = self.powers
        cut = int(self.n // 2 * (1.0 - frac))
        sel = np.abs(k) >= cut
        return float(np.sum(mag[sel] * (s ** k[sel].astype(float))))

    def certified_radius(self, tol=TAIL_TOL):
        """Largest s < 1 (scanned) with tail bound below tol at s and 1/s."""
        for s in (0.95, 0.9, 0.8, 0.7, 0.6, 0.5):
            if self.tail_bound(s) <= tol and self.tail_bound(1.0 / s) <= tol:
                return s
        return 1.0

    # ---- evaluation ----

    def eval(self, lam, tol=TAIL_TOL):
        """Evaluate sum c_k lambda^k at one or many points.

        Exact samples are returned for grid nodes; off the sampling circle
        the Laurent tail must certify analyticity at |lambda|.
        """
        lam_arr = np.atleast_1d(np.asarray(lam, dtype=complex))
        if np.any(lam_arr == 0):
            raise ZeroLambda("loop evaluation at lambda = 0")
        out = np.empty(lam_arr.shape + self.samples.shape[1:], dtype=complex)
        grid = self.lam
        done = np.zeros(lam_arr.shape, dtype=bool)
        # exact grid nodes
        ang = np.angle(lam_arr / self.radius) % (2 * np.pi)
        j = np.rint(ang * self.n / (2 * np.pi)).astype(int) % self.n
        on_grid = np.abs(lam_arr - grid[j]) <= 1e-14 * self.radius
        if np.any(on_grid):
            out[on_grid] = self.samples[j[on_grid]]
            done |= on_grid
        rest = ~done
        if np.any(rest):
            s = np.abs(lam_arr[rest])
            for sv in np.unique(np.round(s, 12)):
                if abs(sv - self.radius) > 1e-12 and self.tail_bound(sv) > tol:
                    raise NonAnalyticEvaluation(
                        "Laurent tail %.3e exceeds %.1e at |lambda|=%.4g"
                        % (self.tail_bound(sv), tol, sv))
            k = self.powers
            pw = lam_arr[rest, None] ** k[None, :]
            c = self.coeffs.reshape(self.n, -1)
            vals = pw @ c
            out[rest] = vals.reshape((-1,) + self.samples.shape[1:])
        if np.isscalar(lam) or np.asarray(lam).ndim == 0:
            return out[0]
        return out

    # ---- algebra ----

    def _check_compatible(self, other):
        if self.n != other.n or abs(self.radius - other.radius) > 1e-15:
            raise GridMismatch(
                "loop grids differ: (N=%d, r=%g) vs (N=%d, r=%g)"
                % (self.n, self.radius, other.n, other.radius))

    def mul(self, other):
        """Pointwise product; matrix @ matrix, or scalar broadcasting."""
        self._check_compatible(other)
        if self.is_scalar or other.is_scalar:
            a = self.samples if not self.is_scalar else self.samples[:, None, None]
            b = other.samples if not other.is_scalar else other.samples[:, None, None]
            if self.is_scalar and other.is_scalar:
                return Loop(self.samples * other.samples, self.radius)
            return Loop(a * b if self.is_scalar else self.samples * b, self.radius)
        return Loop(self.samples @ other.samples, self.radius)

    def __matmul__(self, other):
        return self.mul(other)

    def add(self, other):
        self._check_compatible(other)
        return Loop(self.samples + other.samples, self.radius)

    def scale(self, z):
        return Loop(self.samples * z, self.radius)

    def inv(self, tol=1e-13):
        """Pointwise inverse; reports the worst node on near-singular input."""
        if self.is_scalar:
            d = self.samples
        else:
            d = det2(self.samples)
        absd = np.abs(d)
        j = int(np.argmin(absd))
        scale = np.abs(self.samples).max()
        if absd[j] <= tol * max(scale, 1.0) ** 2:
            raise SingularSample(
                "loop not invertible at lambda_%d = %s (|det| = %.3e)"
                % (j, self.lam[j], absd[j]), lam=self.lam[j], absdet=float(absd[j]))
        if self.is_scalar:
            return Loop(1.0 / self.samples, self.radius)
        return Loop(inv2(self.samples), self.radius)

    def det(self):
        """Scalar loop of pointwise determinants."""
        if self.is_scalar:
            return Loop(self.samples.copy(), self.radius)
        return Loop(det2(self.samples), self.radius)

    def star(self, tol=TAIL_TOL):
        """The involution F*(lambda) = conj(F(1/conj(lambda)))^t.

        On the unit circle this is the pointwise conjugate transpose; for
        r < 1 it acts on certified Laurent coefficients as c_k -> c_{-k}^dag.
        """
        if self.radius == 1.0:
            s = np.conj(self.samples) if self.is_scalar else herm(self.samples)
            return Loop(s, self.radius)
        if self.tail_bound(1.0 / self.radius) > tol:
            raise NonAnalyticEvaluation(
                "star needs analyticity on the reflected circle |lambda|=%.4g"
                % (1.0 / self.radius))
        return Loop.from_coeffs(star_coeffs(self.coeffs), radius=self.radius)

    def d_lambda(self, tol=1e-6):
        """Spectral differentiation: c_k -> k c_k at power k - 1."""
        if self.tail_fraction() > tol:
            raise NonAnalyticEvaluation(
                "Laurent tail %.3e too large for spectral differentiation"
                % self.tail_fraction())
        c = self.coeffs
        k = self.powers
        shifted = np.zeros_like(c)
        kc = k.reshape((-1,) + (1,) * (c.ndim - 1)) * c
        shifted[:-1] = kc[1:]          # power k goes to slot k-1
        return Loop.from_coeffs(shifted, radius=self.radius)

    def unitarity_residual(self):
        """max_j || (L* L)(lambda_j) - Id ||, zero iff r-unitary."""
        s = self.star()
        p = s.mul(self)
        if self.is_scalar:
            return maxabs(p.samples - 1.0)
        return maxabs(p.samples - np.eye(2))

    # ---- resampling ----

    def with_samples(self, n):
        """Re-sample to a different power-of-two grid via coefficients."""
        if n == self.n:
            return self
        c = self.coeffs
        out = np.zeros((n,) + self.samples.shape[1:], dtype=complex)
        half_old, half_new = self.n // 2, n // 2
        lo = max(-half_new, -half_old)
        hi = min(half_new, half_old)
        out[lo + half_new:hi + half_new] = c[lo + half_old:hi + half_old]
        return Loop.from_coeffs(out, radius=self.radius)

    def band_limit(self, kmax):
        """Zero all coefficients with |power| > kmax and resynthesize."""
        c = self.coeffs.copy()
        c[np.abs(self.powers) > kmax] = 0.0
        return Loop.from_coeffs(c, radius=self.radius)


# ---- module-level transforms (also used on bare arrays) ----

def _samples_to_coeffs(samples, radius):
    d = np.fft.fft(samples, axis=0) / samples.shape[0]
    c = np.fft.fftshift(d, axes=0)
    if radius != 1.0:
        k = np.arange(samples.shape[0]) - samples.shape[0] // 2
        c = c * (radius ** (-k.astype(float))).reshape((-1,) + (1,) * (samples.ndim - 1))
    return c


def _coeffs_to_samples(coeffs, radius):
    n = coeffs.shape[0]
    if radius != 1.0:
        k = np.arange(n) - n // 2
        coeffs = coeffs * (radius ** k.astype(float)).reshape((-1,) + (1,) * (coeffs.ndim - 1))
    return np.fft.ifft(np.fft.ifftshift(coeffs, axes=0), axis=0) * n


def star_coeffs(c):
    """Coefficient action of the star involution: c_k -> herm(c_{-k})."""
    n = c.shape[0]
    out = np.zeros_like(c)
    rev = c[::-1]
    conj = np.conj(rev) if c.ndim == 1 else herm(rev)
    # power of rev[i] is n/2 - i; shift by one slot so power -k lands at slot k
    out[1:] = conj[:-1]
    out[0] = 0.0  # power n/2 sits outside the window; negligible for certified loops
    return out


def coeffs_eval(coeffs, lam):
    """Evaluate centered coefficients at points lam (no certification)."""
    n = coeffs.shape[0]
    k = np.arange(n) - n // 2
    lam = np.atleast_1d(np.asarray(lam, dtype=complex))
    pw = lam[:, None] ** k[None, :]
    return (pw @ coeffs.reshape(n, -1)).reshape(lam.shape + coeffs.shape[1:])
