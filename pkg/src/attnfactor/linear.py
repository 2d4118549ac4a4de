"""Attention-weighted principal components and the linear autoencoder view.

Normalization follows ``Lambda' Lambda / N = I_k``: loadings are ``sqrt(N)``
times the leading eigenvectors of ``Z'Z / N`` and factors come from the
cross-sectional regression of ``Z`` on the loadings.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

GAP_TOL = 1e-12


class DegenerateRankError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class TrainingFailure(RuntimeError):
    pass


@dataclass
class FactorFit:
    k: int
    loadings: np.ndarray
    factors: np.ndarray
    eigenvalues: np.ndarray
    singular_values: np.ndarray
    explained_variance_ratio: np.ndarray
    subspace_only: bool = False
    column_mean: np.ndarray | None = None
    method: str = "eig"

    @property
    def N(self) -> int:
        return self.loadings.shape[0]

    @property
    def T(self) -> int:
        return self.factors.shape[0]

    @property
    def Q(self) -> np.ndarray:
        """Orthonormal right singular vectors (``loadings / sqrt(N)``)."""
        return self.loadings / np.sqrt(self.N)

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / "loadings.csv", d / "factors.csv", d / "eigenvalues.csv", d / "fit.json"]
        np.savetxt(paths[0], self.loadings, delimiter=",", fmt="%.17g")
        np.savetxt(paths[1], self.factors, delimiter=",", fmt="%.17g")
        np.savetxt(paths[2], np.column_stack([self.eigenvalues, self.singular_values,
                                              self.explained_variance_ratio]),
                   delimiter=",", fmt="%.17g", header="eigenvalue,singular_value,explained_ratio",
                   comments="")
        meta = {"k": self.k, "N": self.N, "T": self.T, "subspace_only": self.subspace_only,
                "method": self.method,
                "column_mean": None if self.column_mean is None else self.column_mean.tolist()}
        paths[3].write_text(json.dumps(meta, indent=2))
        return paths

    @classmethod
    def load(cls, directory) -> "FactorFit":
        d = Path(directory)
        meta = json.loads((d / "fit.json").read_text())
        k, N, T = meta["k"], meta["N"], meta["T"]
        lam = np.loadtxt(d / "loadings.csv", delimiter=",", ndmin=2).reshape(N, k)
        fac = np.loadtxt(d / "factors.csv", delimiter=",", ndmin=2).reshape(T, k)
        ev = np.loadtxt(d / "eigenvalues.csv", delimiter=",", skiprows=1, ndmin=2).reshape(k, 3)
        cm = meta["column_mean"]
        return cls(k, lam, fac, ev[:, 0], ev[:, 1], ev[:, 2], meta["subspace_only"],
                   None if cm is None else np.asarray(cm), meta["method"])


def _check_k(z, k):
    T, N = z.shape
    if not 0 <= k <= min(T, N):
        raise ValueError(f"k={k} must lie in [0, min(T, N)={min(T, N)}]")
    if not np.all(np.isfinite(z)):
        raise ValueError("z_tilde has non-finite entries")


def _sign_fix(Q: np.ndarray, *others: np.ndarray):
    """Make the largest-magnitude entry of each column of Q positive."""
    if Q.shape[1] == 0:
        return (Q, *others)
    idx = np.argmax(np.abs(Q), axis=0)
    s = np.sign(Q[idx, np.arange(Q.shape[1])])
    s[s == 0] = 1.0
    return (Q * s, *(o * s for o in others))


def _finish(z, k, Q, ev_all, total, mean, method):
    """Shared tail of both solvers. ``ev_all`` holds eigenvalues of Z'Z/N (k+1 if available)."""
    T, N = z.shape
    ev = ev_all[:k]
    if k > 0:
        lam1 = ev[0]
        if lam1 <= 0 or ev[-1] <= lam1 * max(T, N) * np.finfo(float).eps:
            raise DegenerateRankError(f"rank of Z_tilde is below k={k}")
    subspace_only = False
    if k > 0 and len(ev_all) > k and ev_all[k - 1] - ev_all[k] < GAP_TOL * ev_all[0]:
        subspace_only = True
        warnings.warn("eigengap at k is numerically zero; only the subspace is identified")
    Q, = _sign_fix(Q)
    loadings = np.sqrt(N) * Q
    factors = z @ loadings / N
    S = np.sqrt(np.maximum(ev, 0) * N)
    ratio = ev * N / total if total > 0 else np.zeros(k)
    return FactorFit(k, loadings, factors, ev, S, ratio, subspace_only, mean, method)


def _prep(z_tilde, k, demean):
    z = np.asarray(z_tilde, dtype=float)
    if z.ndim != 2:
        raise ValueError("z_tilde must be a T x N matrix")
    _check_k(z, k)
    mean = None
    if demean:
        mean = z.mean(axis=0)
        z = z - mean
    return z, mean


def fit_attention_pca(z_tilde, k: int, demean: bool = False) -> FactorFit:
    """Leading eigenvectors of ``Z'Z / N`` (symmetric eigensolver).

    When ``T < N`` the ``T x T`` Gram matrix is decomposed instead and the
    loadings recovered through ``Z' P / S``, which spans the same eigenvectors.
    """
    z, mean = _prep(z_tilde, k, demean)
    T, N = z.shape
    total = float(np.sum(z * z))
    m = min(k + 1, min(T, N))
    if k == 0:
        return FactorFit(0, np.zeros((N, 0)), np.zeros((T, 0)), np.zeros(0), np.zeros(0),
                         np.zeros(0), False, mean, "eig")
    if N <= T:
        M = z.T @ z / N
        w, V = linalg.eigh(M, subset_by_index=[N - m, N - 1])
        w, V = w[::-1], V[:, ::-1]
        Q = V[:, :k]
    else:
        G = z @ z.T / N
        w, P = linalg.eigh(G, subset_by_index=[T - m, T - 1])
        w, P = w[::-1], P[:, ::-1]
        if w[k - 1] <= w[0] * max(T, N) * np.finfo(float).eps:
            raise DegenerateRankError(f"rank of Z_tilde is below k={k}")
        Q = z.T @ P[:, :k] / np.sqrt(w[:k] * N)
    return _finish(z, k, Q, w, total, mean, "eig")


def svd_fit(z_tilde, k: int, demean: bool = False) -> FactorFit:
    """Same estimator through the thin SVD ``Z = P S Q'``."""
    z, mean = _prep(z_tilde, k, demean)
    T, N = z.shape
    if k == 0:
        return FactorFit(0, np.zeros((N, 0)), np.zeros((T, 0)), np.zeros(0), np.zeros(0),
                         np.zeros(0), False, mean, "svd")
    U, S, Vt = linalg.svd(z, full_matrices=False)
    Q = Vt[:k].T
    fit = _finish(z, k, Q, S ** 2 / N, float(np.sum(S ** 2)), mean, "svd")
    fit.singular_values = S[:k].copy()
    return fit


def common_component(fit: FactorFit) -> np.ndarray:
    return fit.factors @ fit.loadings.T


@dataclass
class RotationAlignment:
    H: np.ndarray
    residual: float
    method: str = "orthogonal"


def align_rotation(estimated, truth, method: str = "orthogonal") -> RotationAlignment:
    """Rotation ``H`` with ``estimated ~ truth @ H.T`` (rows: ``est_i ~ H truth_i``).

    ``orthogonal`` solves the Procrustes problem through the SVD of
    ``truth' estimated``; ``invertible`` is an unrestricted least-squares fit.
    """
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if method == "orthogonal":
        M = tru.T @ est
        U, s, Vt = linalg.svd(M)
        if s.size and s[-1] <= s[0] * s.size * np.finfo(float).eps * 10:
            raise AlignmentError("cross-product matrix is rank deficient")
        Ht = U @ Vt
    elif method == "invertible":
        if np.linalg.matrix_rank(tru) < tru.shape[1]:
            raise AlignmentError("truth loadings are rank deficient")
        Ht = linalg.lstsq(tru, est)[0]
    else:
        raise ValueError(f"unknown alignment method {method!r}")
    resid = float(np.linalg.norm(est - tru @ Ht))
    return RotationAlignment(Ht.T, resid, method)


def loading_mse(estimated, truth, h: RotationAlignment) -> float:
    """Average over units of ``||est_i - H truth_i||^2``."""
    d = np.asarray(estimated) - np.asarray(truth) @ h.H.T
    return float(np.mean(np.sum(d * d, axis=1)))


def factor_mse(estimated, truth, h: RotationAlignment) -> float:
    """Average over periods of ``||est_t - (H')^{-1} truth_t||^2``."""
    d = np.asarray(estimated) - np.asarray(truth) @ np.linalg.inv(h.H)
    return float(np.mean(np.sum(d * d, axis=1)))


# -- linear autoencoder ----------------------------------------------------

@dataclass
class LinearAutoencoderFit:
    W0: np.ndarray
    W1: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    final_loss: float
    loss_history: list = field(default_factory=list)
    converged: bool = True

    def reconstruct(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.b1 + (self.b0 + z @ self.W0.T) @ self.W1.T


def autoencoder_loss(z, W0, W1, b0, b1) -> float:
    z = np.asarray(z, dtype=float)
    E = z - (b1 + (b0 + z @ W0.T) @ W1.T)
    return float(np.sum(E * E))


def fit_linear_autoencoder(z_tilde, k: int, mode: str = "closed_form", *, lr: float | None = None,
                           max_iter: int = 200_000, tol: float = 1e-12, seed: int = 0,
                           init: LinearAutoencoderFit | None = None) -> LinearAutoencoderFit:
    """Fit ``z_t -> b1 + W1 (b0 + W0 z_t)`` by least squares.

    ``closed_form`` uses the top-k right singular vectors of the centered
    panel with ``b0 = 0`` and ``b1 = mean - W1 W0 mean``; on a centered panel
    these are the singular vectors of ``Z`` itself. ``gradient`` runs
    full-batch fixed-step descent on the same objective (scaled by 1/T).
    """
    z = np.asarray(z_tilde, dtype=float)
    _check_k(z, k)
    T, N = z.shape
    zbar = z.mean(axis=0)
    if mode == "closed_form":
        _, _, Vt = linalg.svd(z - zbar, full_matrices=False)
        Q = _sign_fix(Vt[:k].T)[0]
        W1, W0, b0 = Q.copy(), Q.T.copy(), np.zeros(k)
        b1 = zbar - W1 @ (b0 + W0 @ zbar)
        loss = autoencoder_loss(z, W0, W1, b0, b1)
        return LinearAutoencoderFit(W0, W1, b0, b1, loss, [loss], True)
    if mode != "gradient":
        raise ValueError(f"unknown mode {mode!r}")

    rng = np.random.default_rng(seed)
    if init is not None:
        W0, W1, b0, b1 = (np.array(init.W0), np.array(init.W1), np.array(init.b0), np.array(init.b1))
    else:
        W0 = rng.normal(scale=1 / np.sqrt(N), size=(k, N))
        W1 = rng.normal(scale=1 / np.sqrt(N), size=(N, k))
        b0 = np.zeros(k)
        b1 = np.zeros(N)
    if lr is None:
        top = linalg.svdvals(z)[0] ** 2 / T
        lr = 0.1 / max(top, 1e-12)
    history = []
    prev = np.inf
    rises = 0
    converged = False
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            H = b0 + z @ W0.T
            E = b1 + H @ W1.T - z
            loss = float(np.sum(E * E)) / T
        if not np.isfinite(loss):
            raise TrainingFailure("autoencoder loss became non-finite")
        history.append(loss * T)
        if loss > prev:
            rises += 1
            if rises >= 10:
                raise TrainingFailure("autoencoder loss increased 10 consecutive steps")
        else:
            rises = 0
        if np.isfinite(prev) and abs(prev - loss) <= tol * max(prev, 1e-300):
            converged = True
            break
        prev = loss
        dE = 2.0 * E / T
        gb1 = dE.sum(axis=0)
        gW1 = dE.T @ H
        dH = dE @ W1
        gb0 = dH.sum(axis=0)
        gW0 = dH.T @ z
        W0 -= lr * gW0
        W1 -= lr * gW1
        b0 -= lr * gb0
        b1 -= lr * gb1
    final = autoencoder_loss(z, W0, W1, b0, b1)
    return LinearAutoencoderFit(W0, W1, b0, b1, final, history, converged)


def subspace_distance(A, B) -> float:
    """Largest principal angle (radians) between the column spaces of A and B."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[1] == 0 and B.shape[1] == 0:
        return 0.0
    for M in (A, B):
        if np.linalg.matrix_rank(M) < M.shape[1]:
            raise DegenerateRankError("basis matrix is rank deficient")
    return float(np.max(linalg.subspace_angles(A, B)))


def autoencoder_pca_subspace_distance(ae: LinearAutoencoderFit, pca: FactorFit) -> float:
    if ae.W1.shape[1] != pca.k:
        raise ValueError("autoencoder and PCA fits have different k")
    return subspace_distance(ae.W1, pca.loadings)
