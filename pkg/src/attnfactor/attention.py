"""Deterministic temporal and cross-sectional attention matrices.

The attended panel is ``Z_tilde = B @ [X | Y] @ A_z`` with ``B`` (T x T)
acting over time and ``A_z`` (N x N) acting over series.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .panels import Panel


@dataclass(frozen=True)
class TemporalAttention:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("temporal attention must be square")
        if not np.all(np.isfinite(m)):
            raise ValueError("temporal attention has non-finite entries")
        object.__setattr__(self, "matrix", m)

    @property
    def T(self) -> int:
        return self.matrix.shape[0]

    @property
    def frob_sq_over_T(self) -> float:
        return float(np.sum(self.matrix ** 2) / self.T)


@dataclass(frozen=True)
class CrossSectionAttention:
    matrix: np.ndarray
    block_split: tuple | None = None
    variant: str = "custom"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("cross-sectional attention must be square")
        if not np.all(np.isfinite(m)):
            raise ValueError("cross-sectional attention has non-finite entries")
        if self.block_split is not None:
            nx, ny = self.block_split
            if nx < 0 or ny < 0 or nx + ny != m.shape[0]:
                raise ValueError("block_split must add up to the matrix size")
        object.__setattr__(self, "matrix", m)

    @property
    def N(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class AttentionDiagnostics:
    trace_AtA: float
    frob_sq_AtA: float
    n_eff: float
    n_x_eff: float
    n_y_eff: float
    bar_alpha: float

    def to_dict(self) -> dict:
        return {"trace_ata": self.trace_AtA, "frob_sq_ata": self.frob_sq_AtA,
                "n_eff": self.n_eff, "n_x_eff": self.n_x_eff, "n_y_eff": self.n_y_eff,
                "bar_alpha": self.bar_alpha}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def identity_attention(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be positive")
    return np.eye(n)


def target_pca_attention(n_x: int, n_y: int, gamma: float) -> CrossSectionAttention:
    """``diag(I_{n_x}, sqrt(gamma) I_{n_y})``: the Y block gets second-moment weight gamma."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    d = np.concatenate([np.ones(n_x), np.full(n_y, np.sqrt(gamma))])
    return CrossSectionAttention(np.diag(d), (n_x, n_y), "target_pca", {"gamma": float(gamma)})


def softmax_similarity_attention(Z, axis: str = "temporal", temperature: float = 1.0) -> np.ndarray:
    """Row-stochastic ``softmax(S / temperature)`` with S the Gram matrix of Z.

    ``temporal`` compares rows (T x T); ``cross_sectional`` compares columns (N x N).
    """
    Z = np.asarray(Z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise ValueError("Z has non-finite entries")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if axis == "temporal":
        S = Z @ Z.T
    elif axis == "cross_sectional":
        S = Z.T @ Z
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return softmax(S / temperature, axis=1)


def diffuse_attention(n: int, variant: str = "diagonal") -> CrossSectionAttention:
    """Every column has squared norm exactly ``1/n``.

    ``diagonal`` is ``I / sqrt(n)``; ``dense`` is ``J / n``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if variant == "diagonal":
        m = np.eye(n) / np.sqrt(n)
    elif variant == "dense":
        m = np.full((n, n), 1.0 / n)
    else:
        raise ValueError(f"unknown diffuse variant {variant!r}")
    return CrossSectionAttention(m, None, "diffuse", {"construction": variant})


def sparse_attention(n: int, m: int) -> CrossSectionAttention:
    """First ``m`` columns are unit basis vectors, the rest are zero."""
    if not 1 <= m <= n:
        raise ValueError("need 1 <= m <= n")
    a = np.zeros((n, n))
    a[np.arange(m), np.arange(m)] = 1.0
    return CrossSectionAttention(a, None, "sparse", {"m": int(m)})


def attention_diagnostics(a, b=None, T: int | None = None) -> AttentionDiagnostics:
    """Trace/Frobenius summaries, effective sizes and the rate ``bar_alpha``.

    ``bar_alpha = tr(A'A) ||A'A||_F^2 / N * ||B||_F^4 / T^2``; ``B`` defaults
    to the identity of size ``T``.
    """
    if not isinstance(a, CrossSectionAttention):
        a = CrossSectionAttention(np.asarray(a, dtype=float))
    A = a.matrix
    N = A.shape[0]
    if b is None:
        if T is None:
            raise ValueError("need B or T")
        bf4_over_t2 = 1.0
    else:
        B = b.matrix if isinstance(b, TemporalAttention) else np.asarray(b, dtype=float)
        T = B.shape[0] if T is None else T
        if B.shape != (T, T):
            raise ValueError("B must be T x T")
        bf4_over_t2 = float(np.sum(B ** 2)) ** 2 / T ** 2
    AtA = A.T @ A
    trace = float(np.trace(AtA))
    frob = float(np.sum(AtA ** 2))
    if a.block_split is not None:
        nx = a.block_split[0]
        n_x = float(np.sum(A[:nx] ** 2))
        n_y = float(np.sum(A[nx:] ** 2))
    else:
        n_x = n_y = float("nan")
    return AttentionDiagnostics(trace, frob, trace, n_x, n_y, trace * frob / N * bf4_over_t2)


def apply_attention(b, x, y, a) -> np.ndarray:
    """``B [X | Y] A_z`` for aligned, fully observed panels (or arrays)."""
    X = x.dense() if isinstance(x, Panel) else np.asarray(x, dtype=float)
    Y = y.dense() if isinstance(y, Panel) else np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    Z = np.hstack([X, Y])
    B = b.matrix if isinstance(b, TemporalAttention) else np.asarray(b, dtype=float)
    A = a.matrix if isinstance(a, CrossSectionAttention) else np.asarray(a, dtype=float)
    if B.shape != (Z.shape[0], Z.shape[0]):
        raise ValueError(f"B has shape {B.shape}, expected {(Z.shape[0],) * 2}")
    if A.shape != (Z.shape[1], Z.shape[1]):
        raise ValueError(f"A_z has shape {A.shape}, expected {(Z.shape[1],) * 2}")
    return B @ Z @ A


def banded_smoother(T: int, width: int = 3) -> TemporalAttention:
    """Row-normalized moving average over ``width`` neighbours (``||B||_F^2/T`` stays O(1))."""
    if width < 1:
        raise ValueError("width must be positive")
    half = width // 2
    B = np.zeros((T, T))
    for t in range(T):
        lo, hi = max(0, t - half), min(T, t + half + 1)
        B[t, lo:hi] = 1.0 / (hi - lo)
    return TemporalAttention(B)
