"""Random-matrix engine for the Wishart attention prior.

The teacher matrix is S = W W^T / sqrt(r d) with W a d x r standard Gaussian
matrix and width ratio rho = r/d, so Tr S / d -> sqrt(rho) and
Tr S^2 / d -> 1 + rho.  Observing S through additive GOE noise of variance
Delta produces the free convolution mu_Delta = mu_S [+] sc(Delta), whose
Stieltjes transform m(z) = int dmu(t) / (t - z) solves the cubic

    (a2/sr) m^3 + (z/sr + a2) m^2 + (z + 1/sr - sr) m + 1 = 0,

with sr = sqrt(rho) and a2 = Delta = 1/qhat.  Everything downstream lives on
this cubic: Stieltjes-Perron inversion gives the tabulated density, the
discriminant (a quartic in z) gives the support edges, the real part on the
axis gives the principal-value integral of the eigenvalue-shrinkage denoiser,
and the cubed-density integral gives the denoiser's divergence.

Valid noise range: qhat in (0, ~1e6].  Beyond QHAT_CAP the cubic is
numerically degenerate in float64 and the residual error Q - q is below 1e-6,
so callers cap qhat there; the shrinkage denoiser short-circuits to the
identity for Delta < 1/QHAT_CAP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.integrate import simpson

__all__ = [
    "WishartPrior",
    "SpectralDensity",
    "NumericsError",
    "QHAT_CAP",
    "teacher_density",
    "semicircle_density",
    "stieltjes_free_conv",
    "support_edges",
    "convolved_density",
    "mu_cubed_integral",
    "rie_denoise",
    "rie_divergence",
]

QHAT_CAP = 1e6
_EPS_IMAG = 1e-9


class NumericsError(RuntimeError):
    """Raised when a spectral computation cannot reach its accuracy target."""


@dataclass(frozen=True)
class WishartPrior:
    """Wishart teacher ensemble S = W W^T / sqrt(r d), parameterized by rho = r/d."""

    rho: float

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ValueError(f"width ratio rho must be positive, got {self.rho}")

    @property
    def kappa1(self) -> float:
        """First spectral moment E[Tr S]/d."""
        return math.sqrt(self.rho)

    @property
    def kappa2(self) -> float:
        """Second spectral moment E[Tr S^2]/d (the overlap ceiling Q)."""
        return 1.0 + self.rho


@dataclass
class SpectralDensity:
    """Eigenvalue density tabulated on an ascending grid.

    ``grid``/``values`` cover every support interval (plus a zeroed 5% margin),
    ``zero_mass`` is the point mass at 0, and ``edges`` lists the support
    intervals as (lo, hi) pairs.  ``segments`` marks the contiguous grid slices
    (one per interval) so integrals never straddle support gaps.
    """

    grid: np.ndarray
    values: np.ndarray
    zero_mass: float
    edges: list[tuple[float, float]]
    segments: list[slice] = field(default_factory=list)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.shape != self.values.shape:
            raise ValueError("grid and values must have matching shapes")
        if not self.segments:
            self.segments = [slice(0, len(self.grid))]

    def mass(self) -> float:
        """zero_mass plus the trapezoid integral of the continuous part."""
        cont = sum(
            np.trapezoid(self.values[s], self.grid[s]) for s in self.segments
        )
        return self.zero_mass + float(cont)

    def moment(self, k: int) -> float:
        """k-th moment of the measure (atom at 0 contributes only to k=0)."""
        cont = sum(
            np.trapezoid(self.values[s] * self.grid[s] ** k, self.grid[s])
            for s in self.segments
        )
        return float(cont) + (self.zero_mass if k == 0 else 0.0)

    def to_csv(self, path, rho: float | None = None, qhat: float | None = None):
        """Two-column CSV (x, mu); the header row carries rho/qhat/zero_mass."""
        header = (
            f"x,mu,rho={'' if rho is None else repr(float(rho))},"
            f"qhat={'' if qhat is None else repr(float(qhat))},"
            f"zero_mass={float(self.zero_mass)!r}"
        )
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for x, v in zip(self.grid, self.values):
                fh.write(f"{float(x)!r},{float(v)!r}\n")


# ---------------------------------------------------------------------------
# cubic Stieltjes transform
# ---------------------------------------------------------------------------

def _cubic_coeffs(z, prior: WishartPrior, qhat: float):
    sr = math.sqrt(prior.rho)
    a2 = 1.0 / qhat
    z = np.asarray(z, dtype=complex)
    return a2 / sr, z / sr + a2, z + 1.0 / sr - sr, np.ones_like(z)


def _cubic_roots(a3, a2, a1, a0):
    """Closed-form (Cardano) roots of a3 x^3 + a2 x^2 + a1 x + a0, vectorized."""
    b = a2 / a3
    c = a1 / a3
    d = a0 / a3
    p = c - b * b / 3.0
    q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
    sq = np.sqrt((q / 2.0) ** 2 + (p / 3.0) ** 3)
    # pick the larger branch for the cube root to avoid cancellation
    u3a = -q / 2.0 + sq
    u3b = -q / 2.0 - sq
    u3 = np.where(np.abs(u3a) >= np.abs(u3b), u3a, u3b)
    degenerate = np.abs(u3) < 1e-300
    u = np.where(degenerate, 1.0, u3) ** (1.0 / 3.0)
    v = np.where(degenerate, 0.0, -p / (3.0 * u))
    u = np.where(degenerate, 0.0, u)
    w = np.exp(2j * np.pi / 3.0)
    shift = b / 3.0
    return np.stack([u + v - shift, u * w + v / w - shift, u * w**2 + v / w**2 - shift])


def _stieltjes_roots(zz, prior: WishartPrior, qhat: float):
    """All three cubic roots at each z.

    When the noise is weak (qhat large) the cubic carries one root at scale
    z * qhat, and Cardano's depressed-cubic transform cancels catastrophically
    for the two physical-scale roots near support edges.  Solving the
    reciprocal cubic (whose leading coefficient is the constant term 1) keeps
    every intermediate at unit scale; the roots map back as m = 1/w.
    """
    a3, a2, a1, a0 = _cubic_coeffs(zz, prior, qhat)
    if qhat <= 1e3:
        return _cubic_roots(a3, a2, a1, a0)
    w = _cubic_roots(a0, a1, a2, a3 * np.ones_like(zz))
    return 1.0 / w


def stieltjes_free_conv(z, prior: WishartPrior, qhat: float, eps: float = _EPS_IMAG):
    """Stieltjes transform m(z) of mu_S [+] sc(1/qhat).

    Accepts scalar or array ``z``; real inputs are offset to z + i*eps.  Returns
    the cubic root with the largest imaginary part (the Herglotz branch: inside
    the support it is the unique root with Im m = pi * density > 0; on the real
    axis outside the support Re m is the principal-value integral
    int dmu(t)/(t - z)).
    """
    if not qhat > 0:
        raise ValueError(f"qhat must be positive, got {qhat}")
    scalar = np.isscalar(z) or np.ndim(z) == 0
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    zz = z.real + 1j * np.maximum(z.imag, eps)
    roots = _stieltjes_roots(zz, prior, qhat)
    # the transform of a unit measure is bounded by the peak density scale
    # sqrt(qhat); the weak-noise cubic carries a spurious root at scale z*qhat
    # whose rounding-born imaginary part must not win the branch selection
    bound = 3.0 * (1.0 + math.sqrt(qhat))
    im = np.where(np.abs(roots) <= bound, roots.imag, -np.inf)
    if np.isneginf(im).all(axis=0).any():
        im = roots.imag  # paranoia fallback: never select nothing
    pick = np.argmax(im, axis=0)
    m = np.take_along_axis(roots, pick[None], 0)[0]
    return m[0] if scalar else m


def support_edges(prior: WishartPrior, qhat: float) -> list[tuple[float, float]]:
    """Support intervals of mu_S [+] sc(1/qhat) from the cubic discriminant.

    The discriminant of the Stieltjes cubic is a quartic in z; it is negative
    exactly where the cubic has a complex pair, i.e. inside the support.  Roots
    are refined by bisection on density positivity, which the raw quartic loses
    when the smeared zero-eigenvalue bump is narrow.
    """
    sr = math.sqrt(prior.rho)
    a2 = 1.0 / qhat
    a = [a2 / sr]
    b = [a2, 1.0 / sr]
    c = [1.0 / sr - sr, 1.0]
    d = [1.0]
    mul, add = npoly.polymul, npoly.polyadd
    disc = add(
        add(
            add(
                add(
                    18.0 * mul(mul(a, b), mul(c, d)),
                    -4.0 * mul(mul(b, b), mul(b, d)),
                ),
                mul(mul(b, b), mul(c, c)),
            ),
            -4.0 * mul(a, mul(c, mul(c, c))),
        ),
        -27.0 * mul(mul(a, a), mul(d, d)),
    )
    roots = np.roots(disc[::-1])
    real = np.sort(roots[np.abs(roots.imag) < 1e-7 * (1.0 + np.abs(roots))].real)
    if len(real) < 2:
        raise NumericsError(
            f"discriminant analysis found no support for rho={prior.rho}, qhat={qhat}"
        )

    coeffs = disc[::-1]

    def disc_at(x):
        return float(np.polyval(coeffs, x))

    def refine(root, radius):
        # polish the sign-change location; np.roots drifts when the noise
        # level makes the quartic stiff
        lo, hi = root - radius, root + radius
        slo, shi = disc_at(lo) < 0, disc_at(hi) < 0
        if slo == shi:
            return root
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if (disc_at(mid) < 0) == slo:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    spacing = np.diff(real)
    intervals = []
    for i in range(len(real) - 1):
        lo, hi = real[i], real[i + 1]
        if hi - lo < 1e-14:
            continue
        if disc_at(0.5 * (lo + hi)) < 0:
            rad_lo = 0.4 * (spacing[i - 1] if i > 0 else hi - lo)
            rad_hi = 0.4 * (spacing[i + 1] if i + 1 < len(spacing) else hi - lo)
            lo_ref = refine(lo, min(0.4 * (hi - lo), rad_lo))
            hi_ref = refine(hi, min(0.4 * (hi - lo), rad_hi))
            intervals.append((lo_ref, hi_ref))
    if not intervals:
        raise NumericsError(
            f"no support interval detected for rho={prior.rho}, qhat={qhat}"
        )
    # merge intervals the refinement may have brought into contact
    merged = [intervals[0]]
    for lo, hi in intervals[1:]:
        plo, phi = merged[-1]
        if lo <= phi + 1e-12:
            merged[-1] = (plo, max(phi, hi))
        else:
            merged.append((lo, hi))
    return merged


def _clustered_grid(lo: float, hi: float, n: int) -> np.ndarray:
    # sin^2 map clusters nodes at both endpoints, taming sqrt edges
    t = np.linspace(0.0, 1.0, n)
    return lo + (hi - lo) * np.sin(0.5 * np.pi * t) ** 2


def _adapted_grid(lo: float, hi: float, n: int, value_fn) -> np.ndarray:
    """Two-pass node placement: probe on a clustered grid, then equidistribute
    the arclength of the (normalized) density so multi-scale features (narrow
    smeared-atom bumps, hard-edge peaks) get their share of nodes."""
    t = np.linspace(0.0, 1.0, 2 * n + 1)
    x_probe = lo + (hi - lo) * np.sin(0.5 * np.pi * t) ** 2
    v = np.clip(value_fn(x_probe), 0.0, None)
    peak = v.max()
    if peak <= 0:
        return _clustered_grid(lo, hi, n)
    w = v / peak
    ds = np.hypot(np.diff(t), np.diff(w))
    s = np.concatenate([[0.0], np.cumsum(ds)])
    s /= s[-1]
    t_nodes = np.interp(np.linspace(0.0, 1.0, n), s, t)
    x = lo + (hi - lo) * np.sin(0.5 * np.pi * t_nodes) ** 2
    x[0], x[-1] = lo, hi
    return np.unique(x)


_N_MARGIN = 8


def _tabulate(edges, value_fn, grid_size, adaptive=True):
    grids, vals, segments = [], [], []
    pos = 0
    for lo, hi in edges:
        margin = 0.05 * (hi - lo)
        if adaptive:
            inner = _adapted_grid(lo, hi, grid_size, value_fn)
        else:
            inner = _clustered_grid(lo, hi, grid_size)
        left = np.linspace(lo - margin, lo, _N_MARGIN, endpoint=False)
        right = np.linspace(hi, hi + margin, _N_MARGIN + 1)[1:]
        g = np.concatenate([left, inner, right])
        v = np.zeros_like(g)
        v[_N_MARGIN:_N_MARGIN + len(inner)] = np.clip(value_fn(inner), 0.0, None)
        grids.append(g)
        vals.append(v)
        segments.append(slice(pos, pos + len(g)))
        pos += len(g)
    return np.concatenate(grids), np.concatenate(vals), segments


def convolved_density(
    prior: WishartPrior, qhat: float, grid_size: int = 2000
) -> SpectralDensity:
    """Normalized density of mu_S [+] sc(1/qhat) by Stieltjes-Perron inversion."""
    if not qhat > 0:
        raise ValueError(f"qhat must be positive, got {qhat}")
    if grid_size < 64:
        raise ValueError("grid_size must be at least 64")
    try:
        edges = support_edges(prior, qhat)
    except NumericsError:
        # widen the bracketing by re-running on a mildly perturbed noise level
        edges = support_edges(prior, qhat * (1.0 + 1e-9))
    grid, values, segments = _tabulate(
        edges,
        lambda x: stieltjes_free_conv(x, prior, qhat).imag / np.pi,
        grid_size,
    )
    dens = SpectralDensity(grid, values, 0.0, edges, segments)
    m = dens.mass()
    if abs(m - 1.0) > 1e-3:
        raise NumericsError(
            f"convolved density mass {m:.6f} off unity (rho={prior.rho}, qhat={qhat})"
        )
    return dens


def teacher_density(prior: WishartPrior, grid_size: int = 2000) -> SpectralDensity:
    """Asymptotic spectrum of the teacher S itself (scaled Marchenko-Pastur).

    The continuous part is supported on [sqrt(rho) + 1/sqrt(rho) -+ 2]; for
    rho < 1 a point mass 1 - rho sits at zero.
    """
    if grid_size < 64:
        raise ValueError("grid_size must be at least 64")
    rho = prior.rho
    sr = math.sqrt(rho)
    lo = sr + 1.0 / sr - 2.0
    hi = sr + 1.0 / sr + 2.0

    def mp_values(x):
        rad = np.clip((hi - x) * (x - lo), 0.0, None)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = sr * np.sqrt(rad) / (2.0 * np.pi * x)
        return np.where(x > 0, v, 0.0)

    grid, values, segments = _tabulate([(lo, hi)], mp_values, grid_size)
    return SpectralDensity(grid, values, max(0.0, 1.0 - rho), [(lo, hi)], segments)


def semicircle_density(delta: float, grid_size: int = 2000) -> SpectralDensity:
    """Semicircle of variance delta, sc(delta)(x) = sqrt(4 delta - x^2)/(2 pi delta)."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    a = 2.0 * math.sqrt(delta)

    def sc_values(x):
        return np.sqrt(np.clip(4.0 * delta - x * x, 0.0, None)) / (2.0 * np.pi * delta)

    grid, values, segments = _tabulate([(-a, a)], sc_values, grid_size)
    return SpectralDensity(grid, values, 0.0, [(-a, a)], segments)


# ---------------------------------------------------------------------------
# denoising integrals
# ---------------------------------------------------------------------------

def mu_cubed_integral(density: SpectralDensity) -> float:
    """int mu(t)^3 dt of the continuous part, composite Simpson per interval.

    The point mass is excluded: the cube of an atom is not defined, and the
    state-evolution integrand is the continuous convolved law, atom-free at any
    finite noise.
    """
    total = 0.0
    for s in density.segments:
        total += simpson(density.values[s] ** 3, x=density.grid[s])
    return float(max(total, 0.0))


def rie_denoise(
    eigenvalues: np.ndarray,
    eigenbasis: np.ndarray,
    delta: float,
    prior: WishartPrior,
) -> np.ndarray:
    """Eigenvalue-shrinkage denoiser for X = S + sqrt(delta) Z observed in GOE noise.

    Shrinks each eigenvalue by twice the noise variance times the principal
    value of int dmu_delta(t) / (lambda - t) and reassembles in the observed
    eigenbasis (columns of ``eigenbasis``), which the estimator shares exactly.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    lam = np.asarray(eigenvalues, dtype=float)
    basis = np.asarray(eigenbasis, dtype=float)
    if delta < 1.0 / QHAT_CAP:
        xi = lam  # noiseless limit: the observation is the estimate, O(delta) error
    else:
        m = stieltjes_free_conv(lam, prior, 1.0 / delta)
        # PV int dmu/(lam - t) = -Re m(lam + i eps)
        xi = lam + 2.0 * delta * m.real
    return (basis * xi) @ basis.T


def rie_divergence(delta: float, prior: WishartPrior, grid_size: int = 2000) -> float:
    """Normalized divergence of the shrinkage denoiser at noise variance delta.

    Equals the asymptotic posterior variance of the denoising problem,
    delta - (4 pi^2 delta^2 / 3) * int mu_delta^3, which is also the residual
    error Q - q of the matching overlap update.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if delta < 1.0 / QHAT_CAP:
        return 0.0
    ceiling = prior.kappa2 - prior.kappa1**2
    if delta >= 500.0:
        # deep-noise regime: the convolved law is semicircle(delta + Var) up to
        # O(1/delta^2) free-cumulant corrections, and the quadratic formula
        # delta*Var/(delta + Var) beats the cancellation-limited integral
        return ceiling * delta / (delta + ceiling)
    mu3 = mu_cubed_integral(convolved_density(prior, 1.0 / delta, grid_size))
    val = delta - (4.0 * np.pi**2 * delta**2 / 3.0) * mu3
    if val < -1e-6 or val > ceiling + 1e-4:
        raise NumericsError(
            f"divergence {val:.6g} outside [0, {ceiling:.3g}] at delta={delta}"
        )
    return float(min(max(val, 0.0), ceiling))
