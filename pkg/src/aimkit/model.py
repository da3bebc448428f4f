"""Synthetic data for the bilinear token model, plus the exact layer mapping.

The teacher is S = W W^T / sqrt(r d); tokens are iid standard Gaussian rows;
labels pass the centered bilinear preactivations
h_ab = (x_a^T S x_b - delta_ab Tr S)/sqrt(d) through the output channel.

The deep stack with residual strength c collapses exactly onto a function of
the per-layer preactivations through the token-space recursion
B^0 = I, B^l = [c I + sigma_beta(B^{l-1} h^(l) B^{l-1 T})] B^{l-1}; both sides
are implemented independently so the identity is a checkable invariant rather
than a definition.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .channels import ChannelKind, apply_channel

__all__ = [
    "Teacher",
    "Dataset",
    "DeepConfig",
    "ResourceBudgetError",
    "sample_teacher",
    "preactivations",
    "generate_dataset",
    "overlap",
    "estimation_error",
    "deep_forward",
    "aim_forward",
    "multihead_forward",
    "save_dataset",
    "load_dataset",
    "dataset_to_csv",
]

TOKEN_CAP = 8
LAYER_CAP = 4
_CHANNEL_TAGS = {"linear": 0, "softmax": 1, "hardmax": 2}
_TAGS_CHANNEL = {v: k for k, v in _CHANNEL_TAGS.items()}


class ResourceBudgetError(RuntimeError):
    """Dataset would exceed the configured element budget."""


@dataclass
class Teacher:
    W: np.ndarray
    S: np.ndarray
    rho: float
    d: int
    r: int
    seed: int


def sample_teacher(d: int, rho: float, seed: int) -> Teacher:
    """Draw W in R^{d x r} with unit Gaussian entries, r = round(rho d)."""
    if d < 2:
        raise ValueError("d must be at least 2")
    if not rho > 0:
        raise ValueError("rho must be positive")
    r = int(round(rho * d))
    if r < 1:
        raise ValueError(f"rho={rho} gives zero width at d={d}")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d, r))
    S = W @ W.T / math.sqrt(r * d)
    S = 0.5 * (S + S.T)
    return Teacher(W, S, rho, d, r, seed)


def preactivations(S: np.ndarray | Teacher, X: np.ndarray) -> np.ndarray:
    """Centered bilinear indices h = (X S X^T - Tr S * I)/sqrt(d).

    X is (T, d) or batched (n, T, d); the diagonal centering is unconditional.
    """
    if isinstance(S, Teacher):
        S = S.S
    X = np.asarray(X, dtype=float)
    d = X.shape[-1]
    T = X.shape[-2]
    h = (X @ S) @ np.swapaxes(X, -1, -2) / math.sqrt(d)
    h = h - (np.trace(S) / math.sqrt(d)) * np.eye(T)
    return 0.5 * (h + np.swapaxes(h, -1, -2))


@dataclass
class Dataset:
    X: np.ndarray          # (n, T, d)
    Y: np.ndarray          # (n, T, T)
    kind: ChannelKind
    seed: int
    d: int
    r: int
    alpha: float
    teacher: Teacher | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def T(self) -> int:
        return self.X.shape[1]


_BLOCK = 2048


def generate_dataset(
    teacher: Teacher,
    kind: ChannelKind,
    alpha: float,
    T: int,
    seed: int,
    element_budget: int = 400_000_000,
) -> Dataset:
    """n = round(alpha d^2) labeled samples, reproducible per (seed, params).

    Samples are generated in fixed-size blocks with per-block child streams of
    the master seed, so the output is byte-identical however the blocks are
    scheduled.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    d = teacher.d
    n = int(round(alpha * d * d))
    if n * T * d > element_budget:
        raise ResourceBudgetError(
            f"dataset of {n}x{T}x{d} doubles exceeds budget {element_budget}"
        )
    X = np.empty((n, T, d))
    Y = np.empty((n, T, T))
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(start // _BLOCK,))
        )
        Xb = rng.standard_normal((stop - start, T, d))
        X[start:stop] = Xb
        Y[start:stop] = apply_channel(kind, preactivations(teacher.S, Xb))
    return Dataset(X, Y, kind, seed, d, teacher.r, alpha, teacher)


def overlap(A: np.ndarray, B: np.ndarray) -> float:
    """Normalized alignment Tr(A^T B)/d."""
    A = np.asarray(A)
    if A.shape != np.shape(B):
        raise ValueError("overlap requires matching shapes")
    return float(np.tensordot(A, B) / A.shape[0])


def estimation_error(S_hat: np.ndarray, S_star: np.ndarray) -> float:
    """Per-dimension squared distance ||S_hat - S*||_F^2 / d."""
    return overlap(S_hat - S_star, S_hat - S_star)


# ---------------------------------------------------------------------------
# deep stack <-> index-function mapping
# ---------------------------------------------------------------------------

@dataclass
class DeepConfig:
    """Stacked attention layers; weights[l] is one S matrix or a per-head list."""

    weights: list          # length L; each entry (d, d) or list of (d, d)
    c: float = 0.0
    beta: float = 1.0
    max_layers: int = LAYER_CAP

    def __post_init__(self):
        if not (self.c >= 0):
            raise ValueError("residual strength c must be nonnegative")
        L = len(self.weights)
        if L < 1 or L > self.max_layers:
            raise ValueError(f"layer count {L} outside [1, {self.max_layers}]")
        for w in self.weights:
            for S in w if isinstance(w, (list, tuple)) else [w]:
                if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-10):
                    raise ValueError("every layer weight must be symmetric d x d")

    @property
    def L(self) -> int:
        return len(self.weights)

    def heads(self, layer: int) -> list:
        w = self.weights[layer]
        return list(w) if isinstance(w, (list, tuple)) else [w]


def _softmax_rows(h: np.ndarray, beta: float) -> np.ndarray:
    z = beta * h
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def deep_forward(
    config: DeepConfig,
    X0: np.ndarray,
    centering: str = "population",
    center_batch: np.ndarray | None = None,
    max_tokens: int = TOKEN_CAP,
):
    """Run the residual attention stack on token matrix X0 (T, d).

    Returns (y, X_L) where y is the final row-softmax logits' activation and
    X_L the sequence output of the last layer (no residual on that read-out).
    Logits of every layer are centered by the population value
    (Tr S/sqrt(d)) P P^T, P being the accumulated token-space operator; pass
    centering="empirical" with a batch of inputs for the finite-sample variant
    (diagnostics only: the exact mapping holds for the population form).
    """
    X0 = np.asarray(X0, dtype=float)
    T, d = X0.shape
    if T > max_tokens:
        raise ValueError(f"T={T} exceeds the configured cap {max_tokens}")
    if centering not in ("population", "empirical"):
        raise ValueError("centering must be 'population' or 'empirical'")
    if centering == "empirical" and center_batch is None:
        raise ValueError("empirical centering needs a center_batch of inputs")

    X = X0
    P = np.eye(T)  # accumulated operator, only used for the centering term
    Xc = None if center_batch is None else np.asarray(center_batch, dtype=float)
    y = None
    for layer in range(config.L):
        heads = config.heads(layer)
        H = np.zeros((T, T))
        for S in heads:
            raw = X @ S @ X.T / math.sqrt(d)
            if centering == "population":
                H += raw - (np.trace(S) / math.sqrt(d)) * (P @ P.T)
            else:
                emp = np.mean(Xc @ S @ np.swapaxes(Xc, -1, -2), axis=0) / math.sqrt(d)
                H += raw - emp
        H /= len(heads)
        A = _softmax_rows(H, config.beta)
        if layer == config.L - 1:
            y = A
            X = A @ X                   # sequence read-out, no residual
        else:
            step = config.c * np.eye(T) + A
            X = step @ X
            P = step @ P
            if centering == "empirical":
                Xc = np.einsum("ij,njd->nid", step, Xc)
    return y, X


def aim_forward(h_list: list[np.ndarray], c: float, beta: float):
    """Index-space recursion: B^0 = I, B^l = [c I + sigma(B h B^T)] B.

    Returns (y, B_out) with y = sigma(B^{L-1} h^(L) B^{L-1 T}) and B_out the
    accumulated operator for sequence composition.
    """
    T = h_list[0].shape[0]
    for h in h_list:
        if h.shape != (T, T):
            raise ValueError("all index matrices must share the token count")
    B = np.eye(T)
    for h in h_list[:-1]:
        B = (c * np.eye(T) + _softmax_rows(B @ h @ B.T, beta)) @ B
    y = _softmax_rows(B @ h_list[-1] @ B.T, beta)
    return y, B


def multihead_forward(config: DeepConfig, X0: np.ndarray) -> np.ndarray:
    """Multi-head stack: per-layer logits are head-averaged before the
    activation, which is what keeps the index-space recursion closed."""
    y, _ = deep_forward(config, X0)
    return y


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path: str):
    """Flat binary layout: little-endian int64 (d, r, T, n, tag), float64 beta,
    int64 seed, then X row-major, then Y row-major, all float64."""
    beta = ds.kind.beta if ds.kind.beta is not None else 0.0
    header = struct.pack(
        "<5qdq", ds.d, ds.r, ds.T, ds.n, _CHANNEL_TAGS[ds.kind.tag], beta, ds.seed
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.Y, dtype="<f8").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        d, r, T, n, tag, beta, seed = struct.unpack("<5qdq", fh.read(7 * 8))
        X = np.frombuffer(fh.read(n * T * d * 8), dtype="<f8").reshape(n, T, d)
        Y = np.frombuffer(fh.read(n * T * T * 8), dtype="<f8").reshape(n, T, T)
    tag_name = _TAGS_CHANNEL[tag]
    kind = ChannelKind(tag_name, T, beta if tag_name == "softmax" else None)
    return Dataset(X.copy(), Y.copy(), kind, seed, d, r, n / d**2)


def dataset_to_csv(ds: Dataset, path: str, max_elements: int = 2_000_000):
    """Row-per-sample CSV (flattened X then Y) for small instances."""
    if ds.n * ds.T * (ds.d + ds.T) > max_elements:
        raise ResourceBudgetError("dataset too large for CSV export")
    with open(path, "w") as fh:
        xcols = ",".join(f"x{a}_{i}" for a in range(ds.T) for i in range(ds.d))
        ycols = ",".join(f"y{a}_{b}" for a in range(ds.T) for b in range(ds.T))
        fh.write(f"sample,{xcols},{ycols}\n")
        for mu in range(ds.n):
            vals = np.concatenate([ds.X[mu].ravel(), ds.Y[mu].ravel()])
            fh.write(str(mu) + "," + ",".join(repr(float(v)) for v in vals) + "\n")
