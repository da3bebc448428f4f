"""Message-passing estimator for the single-layer model.

Alternates a channel step (per-sample mean fields with a memory correction)
and a spectral step (eigenvalue-shrinkage denoising of the pseudo-observation
R at noise 1/qhat).  Sensing matrices are never materialized: the per-sample
traces reduce to two T x d products, and R accumulates symmetric rank updates
x_a x_b^T + x_b x_a^T plus a diagonal correction, dropping memory from
O(n T^2 d^2) to O(d^2 + n T^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channels import ChannelKind, gout_batch
from .model import Dataset, overlap
from .spectra import QHAT_CAP, WishartPrior, rie_denoise, rie_divergence

__all__ = [
    "AmpOptions",
    "AmpState",
    "AmpResult",
    "trace_z_s",
    "run_amp",
    "nishimori_check",
    "trajectory_to_csv",
]


@dataclass
class AmpOptions:
    max_iter: int = 200
    tol: float = 1e-7            # on ||S_new - S_old||_F^2 / d
    damping: float | None = None # None = per-channel auto (see run_amp)
    seed: int = 0
    record_trajectory: bool = True
    init: str = "mean"           # "mean": kappa1 * I; "draw": sample of the prior

    def __post_init__(self):
        if self.init not in ("mean", "draw"):
            raise ValueError("init must be 'mean' or 'draw'")
        if self.damping is not None and not (0 <= self.damping < 1):
            raise ValueError("damping must lie in [0, 1)")


@dataclass
class AmpState:
    S_hat: np.ndarray            # d x d symmetric estimate
    omega: np.ndarray            # (n, T, T) per-sample mean fields
    V: float                     # scalar variance 2 * C_hat
    qhat: float
    C_hat: float                 # scalar posterior variance
    gout_prev: np.ndarray | None # memory term
    t: int = 0


@dataclass
class AmpResult:
    S_hat: np.ndarray
    trajectory: list[dict] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    def estimation_error(self, S_star: np.ndarray) -> float:
        diff = self.S_hat - S_star
        return overlap(diff, diff)


def trace_z_s(X_sample: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Symmetrized sensing traces (2 x_a^T S x_b - 2 delta_ab Tr S)/sqrt(2d(1+delta)).

    Equals sqrt(2 - delta_ab) times the centered bilinear index; computed from
    X S without building any d x d sensing matrix.
    """
    X_sample = np.asarray(X_sample, dtype=float)
    d = X_sample.shape[-1]
    T = X_sample.shape[-2]
    M = (X_sample @ S) @ np.swapaxes(X_sample, -1, -2)
    out = 2.0 * M - 2.0 * np.trace(S) * np.eye(T)
    return out / np.sqrt(2.0 * d * (1.0 + np.eye(T)))


_DIV_TABLES: dict = {}


def _divergence_cached(delta: float, prior: WishartPrior) -> float:
    """Monotone-interpolated shrinkage divergence; the exact integral costs a
    full density tabulation, too slow for the per-iteration loop."""
    key = round(prior.rho, 12)
    if key not in _DIV_TABLES:
        from scipy.interpolate import PchipInterpolator

        logd = np.linspace(-6.0, np.log10(499.0), 90)
        vals = [rie_divergence(10.0**x, prior, grid_size=700) for x in logd]
        _DIV_TABLES[key] = PchipInterpolator(logd, vals)
    if delta < 1e-6:
        return 0.0
    if delta >= 499.0:
        ceiling = prior.kappa2 - prior.kappa1**2
        return ceiling * delta / (delta + ceiling)
    return float(_DIV_TABLES[key](np.log10(delta)))


def _assemble_r(X, A_flat, g, qhat, S_hat):
    """R = S_hat + (2/(d qhat)) sum_{mu,a<=b} g_ab Z_ab via weighted rank updates."""
    n, T, d = X.shape
    W = g / math.sqrt(2.0 * d)
    idx = np.arange(T)
    W_diag = g[:, idx, idx] / math.sqrt(d)
    W = W.copy()
    W[:, idx, idx] = W_diag
    C = np.matmul(W, X)                      # (n, T, d)
    quad = A_flat.T @ C.reshape(n * T, d)    # sum_mu X^T W X
    diag = np.sum(g[:, idx, idx]) / math.sqrt(d)
    R = S_hat + (2.0 / (d * qhat)) * (quad - diag * np.eye(d))
    return 0.5 * (R + R.T)


def run_amp(
    dataset: Dataset,
    kind: ChannelKind,
    prior: WishartPrior,
    opts: AmpOptions | None = None,
    teacher_S: np.ndarray | None = None,
) -> AmpResult:
    """Iterate the estimator on a dataset; returns the final matrix and the
    per-iteration overlap trajectory (self overlap, teacher overlap when the
    teacher is supplied, conjugate noise, variance, and update residual)."""
    opts = opts or AmpOptions()
    if kind.tag != dataset.kind.tag:
        raise ValueError(
            f"dataset generated with {dataset.kind.tag!r} but inference uses {kind.tag!r}"
        )
    X, Y = dataset.X, dataset.Y
    n, T, d = X.shape
    A_flat = X.reshape(n * T, d)
    rng = np.random.default_rng(opts.seed)

    # The channel variance must match the initializer's actual mean-field
    # spread E[(omega^0 - omega^*)^2] = 2(q0 + Q - 2 m0): the prior mean
    # (m0 = q0 = kappa1^2) gives C^0 = kappa2 - kappa1^2 and keeps the
    # self/teacher overlaps balanced from the start; a prior draw
    # (q0 = kappa2, m0 = kappa1^2) needs twice that.
    if opts.init == "mean":
        S_hat = prior.kappa1 * np.eye(d)
        C_hat = prior.kappa2 - prior.kappa1**2
    else:
        r = max(int(round(prior.rho * d)), 1)
        W0 = rng.standard_normal((d, r))
        S_hat = W0 @ W0.T / math.sqrt(r * d)
        C_hat = 2.0 * (prior.kappa2 - prior.kappa1**2)
    if teacher_S is None and dataset.teacher is not None:
        teacher_S = dataset.teacher.S

    result = AmpResult(S_hat)
    if n == 0:
        result.converged = True
        return result

    # Stabilization at desk sizes (measured at d = 100): the closed-form
    # channels develop a period-2 oscillation of the (V, qhat) bookkeeping
    # below the recovery threshold and a variance-collapse runaway once the
    # finite-size error floor is reached above it.  Adaptive damping (raised
    # when the update residual grows, decayed otherwise) cures the former;
    # tracking the best iterate and aborting on blow-up cures the latter, and
    # a heavily damped polishing phase restarted from the best iterate buys
    # back part of the floor.  The hardmax channel never collapses its
    # variance and runs plain by default.
    adaptive = opts.damping is None and kind.tag != "hardmax"

    trajectory = []
    iu = np.triu_indices(T)
    state = {"count": 0, "converged": False}

    q_self_bound = 3.0 * prior.kappa2 + 1.0

    def phase(S_hat, C_hat, g_prev, damping, n_iter, adapt, tail=0, resid_guard=True):
        best = [math.inf, S_hat, C_hat, g_prev]
        prev_resid = math.inf
        ring = []
        for _ in range(n_iter):
            V = max(2.0 * C_hat, 1e-12)
            raw = trace_z_s(X, S_hat)
            omega = raw if g_prev is None else raw - g_prev * V
            g = gout_batch(kind, Y, omega, V)
            qhat = (4.0 / d**2) * float(np.sum(g[:, iu[0], iu[1]] ** 2))
            if qhat <= 1e-12:
                break  # no signal extracted: keep the current state
            qhat = min(qhat, QHAT_CAP)
            R = _assemble_r(X, A_flat, g, qhat, S_hat)
            evals, evecs = np.linalg.eigh(R)
            S_new = rie_denoise(evals, evecs, 1.0 / qhat, prior)
            if damping > 0:
                S_new = damping * S_hat + (1.0 - damping) * S_new
            C_hat = _divergence_cached(1.0 / qhat, prior)
            residual = overlap(S_new - S_hat, S_new - S_hat)
            S_hat = S_new
            g_prev = g
            state["count"] += 1
            if opts.record_trajectory:
                trajectory.append({
                    "t": state["count"] - 1,
                    "q_self": overlap(S_hat, S_hat),
                    "m_teacher": overlap(S_hat, teacher_S) if teacher_S is not None else float("nan"),
                    "qhat": qhat,
                    "V": V,
                    "residual": residual,
                })
            blown = not math.isfinite(residual) or overlap(S_hat, S_hat) > q_self_bound
            if resid_guard:
                blown = blown or residual > 100.0 * max(best[0], 1e-10)
            if blown:
                break  # blow-up past the resolution floor
            if tail and residual < 5.0 * max(best[0], 1e-10):
                ring.append(S_hat)
                if len(ring) > tail:
                    ring.pop(0)
            if residual < best[0]:
                best = [residual, S_hat, C_hat, g_prev]
            if adapt:
                if residual > prev_resid:
                    damping = min(0.8, 0.15 + 1.3 * damping)
                else:
                    damping = max(0.0, 0.9 * damping - 0.01)
            prev_resid = residual
            if residual < opts.tol:
                state["converged"] = True
                best = [residual, S_hat, C_hat, g_prev]
                break
        return best, ring

    base_damping = 0.0 if opts.damping is None else opts.damping
    best, ring1 = phase(S_hat, C_hat, None, base_damping, opts.max_iter, adaptive, tail=24)
    final_S = best[1]
    if not state["converged"] and best[3] is not None:
        if kind.tag == "hardmax":
            # the hardmax loop jitters benignly at its floor but drifts under
            # damping, so the read-out is the plain phase's tail average
            if ring1:
                final_S = np.mean(ring1, axis=0)
        else:
            # polish at the finite-size floor: heavily damped walk whose tail
            # average is the stable read-out (the residual guard stays off:
            # the resume transient always exceeds it; the self-overlap bound
            # still protects against runaways)
            _, ring = phase(
                best[1], best[2], best[3], 0.5, max(60, opts.max_iter // 3),
                False, tail=24, resid_guard=False,
            )
            if ring:
                final_S = np.mean(ring, axis=0)

    result.S_hat = final_S
    result.trajectory = trajectory
    result.converged = state["converged"]
    result.iterations = state["count"]
    return result


def nishimori_check(trajectory: list[dict], burn_in: int = 2) -> float:
    """Largest gap |q_self - m_teacher| after burn-in; the matched Bayes run
    keeps the two overlaps equal up to finite-size fluctuations."""
    gaps = [
        abs(row["q_self"] - row["m_teacher"])
        for row in trajectory
        if row["t"] >= burn_in and not math.isnan(row["m_teacher"])
    ]
    if not gaps:
        raise ValueError("trajectory has no recorded teacher overlaps after burn-in")
    return max(gaps)


def trajectory_to_csv(trajectory: list[dict], path: str):
    cols = ["t", "q_self", "m_teacher", "qhat", "V", "residual"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in trajectory:
            fh.write(",".join(repr(int(row[c]) if c == "t" else float(row[c])) for c in cols) + "\n")
