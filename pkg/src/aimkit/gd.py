"""Gradient-descent baselines on the squared label loss over the factor W.

The loss is sum_mu sum_ab (y_ab - sigma_beta((x_a^T W W^T x_b
- delta_ab Tr W W^T)/(sqrt(r) d)))^2, optimized full-batch with Adam at the
stock moments.  The averaged estimator is the mean of W W^T / sqrt(r d) over
independently initialized converged runs.  Hardmax-generated targets train
through the softmax surrogate at the configured beta (the hard activation is
not differentiable); that is an optimization choice, not a model statement.

Restart batches share one set of fused matrix products (float32 by default;
the loss/gradient oracle below runs in float64).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import Dataset

__all__ = [
    "GdConfig",
    "GdDivergenceError",
    "loss_and_grad",
    "train_adam",
    "averaged_gd",
    "estimator_matrix",
]


class GdDivergenceError(RuntimeError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass
class GdConfig:
    r_student: int
    beta: float = 1.0
    learning_rate: float = 0.1
    epochs: int = 1500
    m_runs: int = 32
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rel_tol: float = 1e-9        # early stop on relative loss change
    seed: int = 0
    dtype: type = np.float32
    log_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.m_runs < 1:
            raise ValueError("m_runs must be at least 1")


def estimator_matrix(W: np.ndarray) -> np.ndarray:
    """S estimate W W^T / sqrt(r d) for a single factor."""
    d, r = W.shape
    return (W @ W.T) / math.sqrt(r * d)


@np.errstate(over="ignore", invalid="ignore")  # divergence handled by callers
def _forward_backward(Wb, A_flat, Y, beta, n, T, d):
    """Batched loss and gradient; Wb is (B, d, r).

    The token contractions are unrolled over T (tiny) so every heavy
    operation is either one large sgemm or a flat elementwise pass: batched
    micro-matmuls over n*B tiny matrices are an order of magnitude slower.
    """
    B, _, r = Wb.shape
    scale = 1.0 / (math.sqrt(r) * d)
    Wc = np.moveaxis(Wb, 0, 1).reshape(d, B * r)
    P = (A_flat @ Wc).reshape(n, T, B * r)
    P = np.ascontiguousarray(P.transpose(1, 0, 2))                # (T, n, B*r)
    Pr = P.reshape(T, n, B, r)
    trW = np.einsum("bdr,bdr->b", Wb, Wb)
    H = np.empty((n, B, T, T), dtype=Wb.dtype)
    for i in range(T):
        for j in range(i, T):
            H[:, :, i, j] = np.einsum("nbr,nbr->nb", Pr[i], Pr[j])
            if j > i:
                H[:, :, j, i] = H[:, :, i, j]
    H *= scale
    H -= (trW * scale)[None, :, None, None] * np.eye(T, dtype=Wb.dtype)
    z = beta * H
    z -= z.max(axis=-1, keepdims=True)
    sig = np.exp(z)
    sig /= sig.sum(axis=-1, keepdims=True)
    resid = sig - Y[:, None]
    loss = np.einsum("nbij,nbij->b", resid, resid)
    rowdot = np.sum(resid * sig, axis=-1, keepdims=True)
    G = 2.0 * beta * sig * (resid - rowdot)                       # dL/dH
    GT = np.ascontiguousarray((G + np.swapaxes(G, -1, -2)).transpose(2, 3, 0, 1))
    C = np.empty_like(Pr)                                         # (GT @ P) rows
    for i in range(T):
        np.multiply(GT[i, 0][..., None], Pr[0], out=C[i])
        for j in range(1, T):
            C[i] += GT[i, j][..., None] * Pr[j]
    C_flat = C.reshape(T, n, B * r).transpose(1, 0, 2).reshape(n * T, B * r)
    quad = (A_flat.T @ np.ascontiguousarray(C_flat)).reshape(d, B, r)
    trG = np.einsum("nbii->b", G)
    grad = (np.moveaxis(quad, 1, 0) - 2.0 * trG[:, None, None] * Wb) * scale
    return loss, grad


def loss_and_grad(W: np.ndarray, dataset: Dataset, beta: float):
    """Full-batch loss and gradient for one factor W (float64).

    The gradient is the analytic backpropagation through the bilinear form and
    the row softmax; checked against central finite differences in the tests.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(dataset.X, dtype=np.float64)
    Y = np.asarray(dataset.Y, dtype=np.float64)
    n, T, d = X.shape
    loss, grad = _forward_backward(W[None], X.reshape(n * T, d), Y, beta, n, T, d)
    if not np.isfinite(loss[0]):
        raise GdDivergenceError("non-finite loss", last_iterate=W)
    return float(loss[0]), grad[0]


def adam_step(theta, grad, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (theta, m, v)."""
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    return theta - lr * mhat / (np.sqrt(vhat) + eps), m, v


def _adam_batched(W0, dataset: Dataset, config: GdConfig, collect=None):
    """Run Adam on a batch of restarts (B, d, r); returns final batch and the
    per-run loss histories."""
    dtype = config.dtype
    X = np.asarray(dataset.X, dtype=dtype)
    Y = np.asarray(dataset.Y, dtype=dtype)
    n, T, d = X.shape
    A_flat = X.reshape(n * T, d)
    Wb = np.asarray(W0, dtype=dtype).copy()
    B = Wb.shape[0]
    m = np.zeros_like(Wb)
    v = np.zeros_like(Wb)
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    lr = config.learning_rate
    prev_loss = np.full(B, np.inf)
    losses = [[] for _ in range(B)]
    steps_done = 0
    for t in range(1, config.epochs + 1):
        loss, grad = _forward_backward(Wb, A_flat, Y, config.beta, n, T, d)
        if not np.isfinite(loss).all():
            bad = ~np.isfinite(loss)
            raise GdDivergenceError(
                f"{int(bad.sum())} run(s) diverged at step {t}", last_iterate=Wb
            )
        Wb, m, v = adam_step(Wb, grad, m, v, t, lr, b1, b2, eps)
        if collect is not None and (t % config.log_every == 0 or t == 1):
            collect(t, loss, Wb)
        for b in range(B):
            losses[b].append(float(loss[b]))
        with np.errstate(invalid="ignore"):
            rel = np.abs(prev_loss - loss) / np.maximum(np.abs(prev_loss), 1e-30)
        rel = np.where(np.isfinite(rel), rel, np.inf)
        prev_loss = loss.copy()
        steps_done = t
        if t > 20 and np.all(rel < config.rel_tol):
            break
    return Wb.astype(np.float64), losses, steps_done


def train_adam(config: GdConfig, dataset: Dataset, W0: np.ndarray | None = None):
    """Single-run Adam training; returns (W_final, loss_history)."""
    d = dataset.d
    if W0 is None:
        rng = np.random.default_rng(config.seed)
        W0 = rng.standard_normal((d, config.r_student))
    Wb, losses, _ = _adam_batched(W0[None], dataset, config)
    return Wb[0], losses[0]


def averaged_gd(config: GdConfig, dataset: Dataset, return_runs: bool = False):
    """Mean of W W^T / sqrt(r d) over m_runs independently initialized runs.

    A run that diverges is dropped with a warning; fewer than half surviving is
    an error.  All restarts share one batched optimizer pass.
    """
    if config.m_runs < 1:
        raise ValueError("m_runs must be >= 1")
    d = dataset.d
    rng = np.random.default_rng(config.seed)
    W0 = rng.standard_normal((config.m_runs, d, config.r_student))
    try:
        Wb, losses, _ = _adam_batched(W0, dataset, config)
        survivors = list(range(config.m_runs))
    except GdDivergenceError:
        # retry run-by-run so healthy restarts survive
        Wb = np.zeros((config.m_runs, d, config.r_student))
        losses = [[] for _ in range(config.m_runs)]
        survivors = []
        for b in range(config.m_runs):
            try:
                res, ls, _ = _adam_batched(W0[b:b + 1], dataset, config)
                Wb[b] = res[0]
                losses[b] = ls[0]
                survivors.append(b)
            except GdDivergenceError:
                warnings.warn(f"restart {b} diverged; excluded from the average")
        if len(survivors) < config.m_runs / 2:
            raise GdDivergenceError(
                f"only {len(survivors)}/{config.m_runs} restarts converged"
            )
    mats = [estimator_matrix(Wb[b]) for b in survivors]
    S_avg = np.mean(mats, axis=0)
    if return_runs:
        return S_avg, mats, losses
    return S_avg
