"""Output channels: forward activations, partition functions, and scores.

Labels are generated row-wise from the unsymmetrized preactivation matrix h;
all posterior-side quantities (omega, V, g_out) live in the symmetrized basis
where h_ab is rescaled by tau_ab = sqrt(2 - delta_ab) and every upper-triangle
entry has conditional variance V = 2(Q - q).

A note on the hardmax score: ``zout_hardmax`` is the exact partition function
Phi2(k1, k2; c).  The compact closed-form score ``gout_hardmax`` (the
phi2/Phi2 ratio times a fixed sign matrix) is what the state-evolution and
message-passing routines use - it reproduces the quantitative targets of this
model family (e.g. the 0.563 weak-recovery constant) - but it is *not* the
exact gradient of ln Phi2, whose partial derivatives involve phi(k_a) times a
conditional normal CDF, not the joint pdf.  The exact gradient is provided as
``gout_hardmax_grad``; the two coincide nowhere except by accident, so pick
deliberately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr
from scipy.special import logsumexp

__all__ = [
    "ChannelKind",
    "ChannelPoint",
    "linear",
    "softmax",
    "hardmax",
    "apply_channel",
    "phi2_pdf",
    "phi2_cdf",
    "gout_linear",
    "gout_softmax",
    "zout_hardmax",
    "gout_hardmax",
    "gout_hardmax_grad",
    "gout_batch",
    "TAU_CACHE",
]


@dataclass(frozen=True)
class ChannelKind:
    """Tagged output-channel choice: linear | softmax(beta) | hardmax."""

    tag: str
    tokens: int = 2
    beta: float | None = None

    def __post_init__(self):
        if self.tag not in ("linear", "softmax", "hardmax"):
            raise ValueError(f"unknown channel tag {self.tag!r}")
        if self.tag == "softmax":
            if self.beta is None or not (0 < self.beta < math.inf):
                raise ValueError("softmax requires finite beta > 0")
            if self.tokens < 2:
                raise ValueError("softmax needs at least 2 tokens")
        if self.tag == "hardmax" and self.tokens < 2:
            raise ValueError("hardmax needs at least 2 tokens")
        if self.tokens < 1:
            raise ValueError("tokens must be >= 1")


def linear(tokens: int = 1) -> ChannelKind:
    return ChannelKind("linear", tokens)


def softmax(beta: float, tokens: int = 2) -> ChannelKind:
    return ChannelKind("softmax", tokens, beta)


def hardmax(tokens: int = 2) -> ChannelKind:
    return ChannelKind("hardmax", tokens)


@dataclass
class ChannelPoint:
    """One posterior-side channel evaluation point (symmetrized basis)."""

    omega: np.ndarray  # T x T symmetric mean field
    V: float           # scalar conditional variance 2(Q - q)
    y: np.ndarray      # observed T x T label

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not self.V > 0:
            raise ValueError(f"V must be positive, got {self.V}")


def _tau(T: int) -> np.ndarray:
    return np.sqrt(2.0 - np.eye(T))


TAU_CACHE = {T: _tau(T) for T in range(1, 9)}


def tau_matrix(T: int) -> np.ndarray:
    if T not in TAU_CACHE:
        TAU_CACHE[T] = _tau(T)
    return TAU_CACHE[T]


# ---------------------------------------------------------------------------
# forward activations
# ---------------------------------------------------------------------------

def apply_channel(kind: ChannelKind, h: np.ndarray) -> np.ndarray:
    """Forward map from unsymmetrized preactivations to labels, row-wise.

    linear: identity; softmax: rows of exp(beta h) normalized; hardmax: one-hot
    row argmax (ties broken to the lowest index, a probability-zero event kept
    deterministic).  Supports batched input (..., T, T).
    """
    h = np.asarray(h, dtype=float)
    if not np.isfinite(h).all():
        raise ValueError("preactivations must be finite")
    if kind.tag == "linear":
        return h.copy()
    if kind.tag == "softmax":
        z = kind.beta * h
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    # hardmax
    T = h.shape[-1]
    idx = np.argmax(h, axis=-1)
    return np.eye(T)[idx]


# ---------------------------------------------------------------------------
# bivariate normal primitives
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def phi2_pdf(u, v, c):
    """Standard bivariate normal density with correlation c."""
    u, v, c = np.asarray(u, float), np.asarray(v, float), np.asarray(c, float)
    if np.any(np.abs(c) >= 1):
        raise ValueError("correlation must satisfy |c| < 1")
    om = 1.0 - c * c
    return np.exp(-(u * u - 2.0 * c * u * v + v * v) / (2.0 * om)) / (
        2.0 * np.pi * np.sqrt(om)
    )


def phi2_cdf(u, v, c):
    """Standard bivariate normal CDF via fixed-order quadrature on the
    correlation integral:

        Phi2(u, v; c) = Phi(u) Phi(v)
            + (1/2pi) int_0^c exp(-(u^2 - 2 t u v + v^2)/(2(1-t^2))) / sqrt(1-t^2) dt

    64-node Gauss-Legendre; absolute error well below 1e-10 for |c| <= 0.95
    (the only correlations this model produces are +-1/3).
    """
    u, v, c = np.broadcast_arrays(
        np.asarray(u, float), np.asarray(v, float), np.asarray(c, float)
    )
    if np.any(np.abs(c) >= 1):
        raise ValueError("correlation must satisfy |c| < 1")
    scalar = u.ndim == 0
    u, v, c = np.atleast_1d(u), np.atleast_1d(v), np.atleast_1d(c)
    t = 0.5 * c[..., None] * (_GL_NODES + 1.0)  # nodes mapped onto [0, c]
    w = 0.5 * c[..., None] * _GL_WEIGHTS
    om = 1.0 - t * t
    f = np.exp(
        -(u[..., None] ** 2 - 2.0 * t * u[..., None] * v[..., None] + v[..., None] ** 2)
        / (2.0 * om)
    ) / np.sqrt(om)
    corr = (f * w).sum(axis=-1) / (2.0 * np.pi)
    out = ndtr(u) * ndtr(v) + corr
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if scalar else out


def _log_phi2_cdf(u, v, c):
    """log Phi2 by quadrature of phi(s) Phi((v - c s)/sqrt(1-c^2)) for s <= u,
    carried in log space; used only in the deep lower tail."""
    u, v, c = np.broadcast_arrays(
        np.atleast_1d(np.asarray(u, float)), np.asarray(v, float), np.asarray(c, float)
    )
    s = u[..., None] - np.linspace(0.0, 42.0, 1200)
    logphi = -0.5 * s * s - 0.5 * math.log(2.0 * math.pi)
    logPhi = log_ndtr((v[..., None] - c[..., None] * s) / np.sqrt(1.0 - c[..., None] ** 2))
    step = 42.0 / 1199.0
    return logsumexp(logphi + logPhi, axis=-1) + math.log(step)


def _phi2_ratio(k1, k2, c):
    """phi2(k1,k2;c) / Phi2(k1,k2;c), switching to log space when the CDF
    underflows (deep-tail mean fields); reentrant, no state."""
    k1, k2, c = np.broadcast_arrays(
        np.asarray(k1, float), np.asarray(k2, float), np.asarray(c, float)
    )
    Z = phi2_cdf(k1, k2, c)
    Z = np.atleast_1d(Z)
    k1a, k2a, ca = np.atleast_1d(k1), np.atleast_1d(k2), np.atleast_1d(c)
    ratio = np.empty_like(Z)
    ok = Z > 1e-280
    ratio[ok] = phi2_pdf(k1a[ok], k2a[ok], ca[ok]) / Z[ok]
    if (~ok).any():
        om = 1.0 - ca[~ok] ** 2
        logpdf = (
            -(k1a[~ok] ** 2 - 2 * ca[~ok] * k1a[~ok] * k2a[~ok] + k2a[~ok] ** 2)
            / (2.0 * om)
            - math.log(2.0 * math.pi)
            - 0.5 * np.log(om)
        )
        ratio[~ok] = np.exp(logpdf - _log_phi2_cdf(k1a[~ok], k2a[~ok], ca[~ok]))
    return ratio if np.ndim(k1) else float(ratio[0])


# ---------------------------------------------------------------------------
# channel scores
# ---------------------------------------------------------------------------

def gout_linear(point: ChannelPoint) -> np.ndarray:
    """Linear-channel score (tau_ab y_ab - omega_ab) / V, symmetric output."""
    T = point.y.shape[-1]
    tau = tau_matrix(T)
    return (tau * point.y - point.omega) / point.V


def _softmax_shifts(y: np.ndarray, beta: float) -> np.ndarray:
    """Reconstruct z_ab - z_TT from label ratios (rows are softmax outputs of a
    symmetric logit matrix, so row T supplies the anchor column)."""
    if np.any(y <= 0):
        raise ValueError("softmax labels must be strictly positive")
    L = np.log(y) / beta
    lastrow = L[..., -1, :]
    anchor = lastrow[..., -1]
    # m_ab = (z_ab - z_aT) + (z_aT - z_TT) for b < T; m_aT = z_aT - z_TT
    m = L - L[..., -1:].repeat(L.shape[-1], axis=-1)  # z_ab - z_aT per row
    m = m + lastrow[..., None] - anchor[..., None, None]
    m[..., :, -1] = lastrow - anchor[..., None]
    # symmetrize: entries above the diagonal are the channel's mean parameters
    up = np.triu(m)
    return up + np.swapaxes(np.triu(m, 1), -1, -2)


def gout_softmax(point: ChannelPoint, beta: float) -> np.ndarray:
    """Softmax-channel score, the closed form of the single-shift Gaussian
    integral: V g_ab = tau_ab [D_ab - (1/T^2) sum_{c<=d} tau_cd^2 D_cd] with
    D = m(y) - omega/tau."""
    T = point.y.shape[-1]
    tau = tau_matrix(T)
    D = _softmax_shifts(point.y, beta) - point.omega / tau
    return tau * (D - np.sum(D) / T**2) / point.V


def _hardmax_kappas(point: ChannelPoint):
    s1 = 2.0 * point.y[0, 0] - 1.0
    s2 = 2.0 * point.y[1, 1] - 1.0
    root = math.sqrt(3.0 * point.V)
    k1 = s1 * (math.sqrt(2.0) * point.omega[0, 0] - point.omega[0, 1]) / root
    k2 = s2 * (math.sqrt(2.0) * point.omega[1, 1] - point.omega[0, 1]) / root
    return s1, s2, k1, k2, s1 * s2 / 3.0, root


def zout_hardmax(point: ChannelPoint) -> float:
    """Hardmax (T=2) partition function Phi2(k1, k2; s1 s2 / 3)."""
    _check_hardmax(point)
    _, _, k1, k2, c, _ = _hardmax_kappas(point)
    return float(phi2_cdf(k1, k2, c))


def gout_hardmax(point: ChannelPoint) -> np.ndarray:
    """Compact closed-form hardmax score (T=2): the phi2/Phi2 ratio times the
    sign matrix [[sqrt2 s1, -(s1+s2)], [-(s1+s2), sqrt2 s2]] / sqrt(6(Q-q)).

    This is the operational score of the model family (see module docstring);
    for the exact gradient of ln Z_out use ``gout_hardmax_grad``.
    """
    _check_hardmax(point)
    s1, s2, k1, k2, c, root = _hardmax_kappas(point)
    ratio = _phi2_ratio(k1, k2, c)
    mat = np.array(
        [
            [math.sqrt(2.0) * s1, -(s1 + s2)],
            [-(s1 + s2), math.sqrt(2.0) * s2],
        ]
    )
    return ratio / root * mat


def gout_hardmax_grad(point: ChannelPoint) -> np.ndarray:
    """Exact gradient of ln Z_out for the hardmax channel (T=2).

    Uses the partial derivatives of the bivariate CDF,
    d/du Phi2(u,v;c) = phi(u) Phi((v - c u)/sqrt(1-c^2)).
    """
    _check_hardmax(point)
    s1, s2, k1, k2, c, root = _hardmax_kappas(point)
    Z = phi2_cdf(k1, k2, c)
    om = math.sqrt(1.0 - c * c)
    if Z > 1e-280:
        e1 = math.exp(-0.5 * k1 * k1) / math.sqrt(2 * math.pi) * ndtr((k2 - c * k1) / om) / Z
        e2 = math.exp(-0.5 * k2 * k2) / math.sqrt(2 * math.pi) * ndtr((k1 - c * k2) / om) / Z
    else:
        logZ = float(np.atleast_1d(_log_phi2_cdf(k1, k2, c))[0])
        e1 = math.exp(
            -0.5 * k1 * k1 - 0.5 * math.log(2 * math.pi) + float(log_ndtr((k2 - c * k1) / om)) - logZ
        )
        e2 = math.exp(
            -0.5 * k2 * k2 - 0.5 * math.log(2 * math.pi) + float(log_ndtr((k1 - c * k2) / om)) - logZ
        )
    return np.array(
        [
            [math.sqrt(2.0) * s1 * e1, -(s1 * e1 + s2 * e2)],
            [-(s1 * e1 + s2 * e2), math.sqrt(2.0) * s2 * e2],
        ]
    ) / root


def _check_hardmax(point: ChannelPoint):
    if point.y.shape != (2, 2):
        raise ValueError("analytic hardmax channel is restricted to T = 2")
    rows_onehot = np.all(np.isin(point.y, (0.0, 1.0))) and np.all(point.y.sum(axis=1) == 1)
    if not rows_onehot:
        raise ValueError("hardmax labels must have one-hot rows")


# ---------------------------------------------------------------------------
# batched scores (message-passing hot path)
# ---------------------------------------------------------------------------

def gout_batch(kind: ChannelKind, y: np.ndarray, omega: np.ndarray, V: float) -> np.ndarray:
    """Vectorized channel score over a batch: y, omega are (n, T, T)."""
    T = y.shape[-1]
    tau = tau_matrix(T)
    if kind.tag == "linear":
        return (tau * y - omega) / V
    if kind.tag == "softmax":
        D = _softmax_shifts(y, kind.beta) - omega / tau
        tot = D.sum(axis=(-1, -2), keepdims=True)
        return tau * (D - tot / T**2) / V
    if T != 2:
        raise ValueError("analytic hardmax score is restricted to T = 2")
    s1 = 2.0 * y[:, 0, 0] - 1.0
    s2 = 2.0 * y[:, 1, 1] - 1.0
    root = math.sqrt(3.0 * V)
    k1 = s1 * (math.sqrt(2.0) * omega[:, 0, 0] - omega[:, 0, 1]) / root
    k2 = s2 * (math.sqrt(2.0) * omega[:, 1, 1] - omega[:, 0, 1]) / root
    ratio = _phi2_ratio(k1, k2, s1 * s2 / 3.0) / root
    g = np.empty_like(y)
    g[:, 0, 0] = math.sqrt(2.0) * s1 * ratio
    g[:, 1, 1] = math.sqrt(2.0) * s2 * ratio
    g[:, 0, 1] = g[:, 1, 0] = -(s1 + s2) * ratio
    return g
