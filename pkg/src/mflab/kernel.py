"""Interaction kernels, truncations, and extension-space normalization.

Single source of truth for the two kernel families used everywhere else:

    riesz:  g(x) = |x|^(-s)   with max(d-2, 0) <= s < d and s > 0
    log:    g(x) = -log|x|    with d in {1, 2}

Both admit a local reformulation of the induced potential as a weighted
harmonic function in d+k dimensions (k = 0 in the harmonic cases, k = 1
otherwise) with weight |z|^gamma on the extra coordinate; ``c_ds`` is the
point-charge flux constant of that reformulation and is cross-checked
numerically by :func:`flux_constant_quadrature`.

Truncation helpers (the capped kernel ``g_eta``, the annular difference
``f_{alpha,eta}``, small-ball integrals) and the geometric kernel averages
used by grid and radial quadrature code (ring averages, singular-cell cell
average) live here so numerical layers never reimplement kernel math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, hyp2f1

RIESZ = "riesz"
LOG = "log"


class KernelSingularityError(ValueError):
    """Evaluation of g or its gradient at zero separation."""


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere S^{d-1} in R^d."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def ball_volume(d: int) -> float:
    return sphere_area(d) / d


@dataclass(frozen=True)
class KernelSpec:
    """Admissible interaction kernel on R^d.

    mode is ``"riesz"`` (g = |x|^-s) or ``"log"`` (g = -log|x|; s is stored
    as 0).  Construction validates the (d, s) range and raises ValueError
    outside it.  Derived attributes:

    k      extra extension dimensions (0 for the harmonic cases: riesz with
           s = d-2, d >= 3, and log with d = 2; else 1)
    gamma  weight exponent on the extension coordinate, in (-1, 1)
    c_ds   flux normalization: -div(|z|^gamma grad g~) = c_ds * delta_0 in
           R^{d+k}, g~ the extension of g
    """

    mode: str
    d: int
    s: float = 0.0

    def __post_init__(self):
        if self.mode not in (RIESZ, LOG):
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.d}")
        object.__setattr__(self, "d", int(self.d))
        if self.mode == LOG:
            if self.d not in (1, 2):
                raise ValueError("log kernel requires d in {1, 2}")
            if self.s != 0.0:
                raise ValueError("log kernel stores s = 0")
        else:
            lo = max(self.d - 2, 0)
            if not (lo <= self.s < self.d):
                raise ValueError(
                    f"riesz exponent must satisfy max(d-2,0) <= s < d, got s={self.s}, d={self.d}"
                )
            if self.s <= 0.0:
                # s = 0 is formally in range for d <= 2 but has no interaction
                # (constant kernel, zero flux constant); the log mode covers it.
                raise ValueError("riesz exponent must be positive; use the log kernel for s = 0")

    # -- constructors ------------------------------------------------------

    @classmethod
    def riesz(cls, d: int, s: float) -> "KernelSpec":
        return cls(RIESZ, d, float(s))

    @classmethod
    def log(cls, d: int) -> "KernelSpec":
        return cls(LOG, d, 0.0)

    @classmethod
    def coulomb(cls, d: int) -> "KernelSpec":
        """The harmonic member for dimension d (s = d-2 for d >= 3, log for d = 2)."""
        if d >= 3:
            return cls(RIESZ, d, float(d - 2))
        if d == 2:
            return cls(LOG, 2)
        raise ValueError("no harmonic kernel in d = 1")

    # -- derived extension parameters -------------------------------------

    @property
    def is_log(self) -> bool:
        return self.mode == LOG

    @property
    def k(self) -> int:
        if self.mode == RIESZ and self.d >= 3 and self.s == self.d - 2:
            return 0
        if self.mode == LOG and self.d == 2:
            return 0
        return 1

    @property
    def gamma(self) -> float:
        return self.s - self.d + 2 - self.k

    @property
    def c_ds(self) -> float:
        return normalization_constant(self)

    # -- scalar kernel values ----------------------------------------------

    def g_scalar(self, r: float) -> float:
        if r <= 0.0:
            raise KernelSingularityError("g evaluated at zero separation")
        return -math.log(r) if self.is_log else r ** (-self.s)


# ---------------------------------------------------------------------------
# pointwise evaluation


def _as_points(spec: KernelSpec, x) -> np.ndarray:
    """Normalize input to an (..., d) float array; d = 1 accepts bare scalars."""
    a = np.asarray(x, dtype=float)
    if spec.d == 1:
        if a.ndim == 0 or a.shape[-1] != 1:
            a = a[..., None]
    elif a.ndim == 0 or a.shape[-1] != spec.d:
        raise ValueError(f"expected points with last axis {spec.d}, got shape {a.shape}")
    return a


def _radii(spec: KernelSpec, x) -> np.ndarray:
    a = _as_points(spec, x)
    r = np.sqrt(np.sum(a * a, axis=-1))
    if np.any(r == 0.0):
        raise KernelSingularityError("kernel evaluated at zero separation")
    return r


def eval_g(spec: KernelSpec, x) -> np.ndarray:
    """g at displacement(s) x, shape (..., d) -> (...)."""
    r = _radii(spec, x)
    return -np.log(r) if spec.is_log else r ** (-spec.s)


def eval_grad_g(spec: KernelSpec, x) -> np.ndarray:
    """grad g at displacement(s) x: -s x |x|^{-s-2}, or -x/|x|^2 for log."""
    a = _as_points(spec, x)
    r2 = np.sum(a * a, axis=-1, keepdims=True)
    if np.any(r2 == 0.0):
        raise KernelSingularityError("grad g evaluated at zero separation")
    if spec.is_log:
        return -a / r2
    return -spec.s * a * r2 ** (-(spec.s + 2) / 2.0)


def _g_of_r(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    """g as a function of radius, +inf at r = 0 (no raise)."""
    safe = np.where(r > 0.0, r, 1.0)
    vals = -np.log(safe) if spec.is_log else safe ** (-spec.s)
    return np.where(r > 0.0, vals, np.inf)


def eval_g_eta(spec: KernelSpec, x, eta) -> np.ndarray:
    """Capped kernel min(g, g(eta)); continuous, finite at x = 0."""
    a = _as_points(spec, x)
    r = np.sqrt(np.sum(a * a, axis=-1))
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0.0):
        raise ValueError("truncation radius must be positive")
    cap = -np.log(eta) if spec.is_log else eta ** (-spec.s)
    return np.minimum(_g_of_r(spec, r), cap)


def eval_f_eta(spec: KernelSpec, x, eta) -> np.ndarray:
    """Singular remainder f_eta = g - g_eta; >= 0, supported in B(0, eta).

    Infinite at x = 0 (the singularity lives here, not in g_eta).
    """
    a = _as_points(spec, x)
    r = np.sqrt(np.sum(a * a, axis=-1))
    eta = np.asarray(eta, dtype=float)
    cap = -np.log(eta) if spec.is_log else eta ** (-spec.s)
    return np.maximum(_g_of_r(spec, r) - cap, 0.0)


def eval_f_alpha_eta(spec: KernelSpec, x, alpha: float, eta: float) -> np.ndarray:
    """Annular difference f_alpha - f_eta = g_eta - g_alpha.

    Piecewise: g(eta)-g(alpha) for |x| <= eta, g(x)-g(alpha) on the annulus
    eta < |x| <= alpha (for alpha > eta), zero for |x| >= max(alpha, eta).
    Finite everywhere, sign that of alpha - eta.
    """
    return eval_g_eta(spec, x, eta) - eval_g_eta(spec, x, alpha)


def integral_f_eta(spec: KernelSpec, eta) -> np.ndarray:
    """Closed-form integral of f_eta over R^d.

    riesz: |S^{d-1}| eta^{d-s} s / (d (d-s));  log: |S^{d-1}| eta^d / d^2.
    Scales like eta^{d-s} (s read as 0 for log).
    """
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0.0):
        raise ValueError("truncation radius must be positive")
    area = sphere_area(spec.d)
    d = spec.d
    if spec.is_log:
        return area * eta ** d / d**2
    s = spec.s
    return area * eta ** (d - s) * s / (d * (d - s))


# ---------------------------------------------------------------------------
# flux normalization


def normalization_constant(spec: KernelSpec) -> float:
    """Point-charge flux constant c_ds of the weighted extension.

    Harmonic cases: (d-2)|S^{d-1}| for riesz s = d-2 (d >= 3) and 2*pi for
    log (d = 1 and d = 2).  General riesz (k = 1):
    s * 2 * pi^{d/2} * Gamma((gamma+1)/2) / Gamma((gamma+d+1)/2).
    """
    d, g = spec.d, spec.gamma
    slope = 1.0 if spec.is_log else spec.s  # |grad g| on the unit sphere
    if spec.k == 0:
        return slope * sphere_area(d)
    weighted = 2.0 * math.pi ** (d / 2.0) * math.exp(
        gammaln((g + 1.0) / 2.0) - gammaln((g + d + 1.0) / 2.0)
    )
    return slope * weighted


def flux_constant_quadrature(spec: KernelSpec, nodes: int = 400) -> float:
    """Numerical cross-check of c_ds.

    Integrates the weighted flux |z|^gamma * |grad g| through the unit sphere
    of R^{d+k} around a point charge.  Independent of the Gamma closed form:
    pure quadrature with a power-law substitution absorbing the |cos|^gamma
    singularity at the equator.
    """
    d, k, g = spec.d, spec.k, spec.gamma
    D = d + k
    slope = 1.0 if spec.is_log else spec.s
    if k == 0:
        return slope * sphere_area(D)

    # integral over S^{D-1} of |omega_D|^gamma, via the polar angle:
    #   |S^{D-2}| * 2 * int_0^{pi/2} cos(t)^gamma sin(t)^{D-2} dt
    # substitute w = pi/2 - t, then w = v^{1/(1+gamma)} to flatten w^gamma.
    p = 1.0 / (1.0 + g)
    u, wts = np.polynomial.legendre.leggauss(nodes)
    a = (math.pi / 2.0) ** (1.0 + g)
    v = 0.5 * (u + 1.0) * a
    jac = 0.5 * a * wts
    w = v**p
    integrand = np.sin(w) ** g * np.cos(w) ** (D - 2) * p * np.where(v > 0, v, 1.0) ** (p - 1.0)
    theta_int = 2.0 * np.sum(integrand * jac)
    return slope * sphere_area(D - 1) * theta_int


# ---------------------------------------------------------------------------
# geometric kernel averages (used by radial quadrature and grid convolution)


def ring_average_g(spec: KernelSpec, rho, r) -> np.ndarray:
    """Average of g(|u - v|) over v on the sphere of radius r, |u| = rho.

    Closed forms where available (d=1 two-point; d=2 log mean value;
    d=3 riesz antiderivative), Gauss/hypergeometric for d=2 riesz.
    Infinite on the diagonal rho = r for the riesz family.
    """
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    d = spec.d
    if d == 1:
        with np.errstate(divide="ignore"):
            if spec.is_log:
                return -0.5 * np.log(np.abs(rho - r)) - 0.5 * np.log(rho + r)
            return 0.5 * np.abs(rho - r) ** (-spec.s) + 0.5 * (rho + r) ** (-spec.s)
    if d == 2 and spec.is_log:
        return -np.log(np.maximum(rho, r))
    if d == 3:
        s = spec.s
        with np.errstate(divide="ignore", invalid="ignore"):
            if s == 2.0:
                out = np.log((rho + r) / np.abs(rho - r)) / (2.0 * rho * r)
            else:
                out = ((rho + r) ** (2.0 - s) - np.abs(rho - r) ** (2.0 - s)) / (
                    2.0 * rho * r * (2.0 - s)
                )
        return np.where(rho == r, np.inf, out)
    if d == 2:
        # (1/pi) int_0^pi (A - B cos t)^{-s/2} dt with A = rho^2+r^2, B = 2 rho r
        s = spec.s
        z = 4.0 * rho * r / (rho + r) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (rho + r) ** (-s) * hyp2f1(s / 2.0, 0.5, 1.0, z)
        return np.where(rho == r, np.inf, out)
    raise ValueError(f"no ring average for d = {d}, mode = {spec.mode}")


def _face_integral(spec: KernelSpec, a: float, nodes: int = 48) -> float:
    """Integral of g(a e_d + y) over the face y in [-a, a]^{d-1} (smooth)."""
    d = spec.d
    if d == 1:
        return spec.g_scalar(a)
    u, w = np.polynomial.legendre.leggauss(nodes)
    y = a * u
    wy = a * w
    if d == 2:
        r2 = a * a + y * y
        vals = -0.5 * np.log(r2) if spec.is_log else r2 ** (-spec.s / 2.0)
        return float(np.sum(vals * wy))
    y1, y2 = np.meshgrid(y, y, indexing="ij")
    r2 = a * a + y1 * y1 + y2 * y2
    vals = r2 ** (-spec.s / 2.0)  # log mode never reaches d = 3
    return float(np.sum(vals * wy[:, None] * wy[None, :]))


def origin_cell_average(spec: KernelSpec, h: float) -> float:
    """Mean of g over the cube cell [-h/2, h/2]^d (finite: s < d).

    Uses the divergence identity div(x g(|x|)) = (d - s) g (riesz) resp.
    = d*g - 1 (log) to push the singular volume integral to the smooth faces.
    """
    if h <= 0.0:
        raise ValueError("cell size must be positive")
    d = spec.d
    a = h / 2.0
    face = _face_integral(spec, a)
    if spec.is_log:
        vol = (2.0 * a) ** d
        return (2.0 * d * a * face + vol) / (d * vol)
    return 2.0 * d * a * face / ((d - spec.s) * (2.0 * a) ** d)
