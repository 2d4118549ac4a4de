"""Synthetic mixed-frequency panels driven by VAR(2) latent factors.

High-frequency index ``t`` runs over ``0..T_high-1``. Low-frequency row
``t'`` (0-based) closes at high-frequency index ``r*(t'+1) - 1``, the last
sub-period of the block, so ``Y_{t'}`` loads on ``g(F)`` at indices
``r*(t'+1) - 1 - j``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .panels import HIGH, LOW, Panel, make_panel, save_csv

BASE_YEAR = 1960
MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *index: int) -> int:
    """Child seed for replication ``index`` of master ``seed``."""
    s = int(seed) & MASK64
    for i in index:
        s = splitmix64((s + int(i)) & MASK64)
    return s


@dataclass
class DgpConfig:
    q: int = 3
    r: int = 3
    N_x: int = 30
    N_y: int = 5
    L_x: int = 1
    L_y: int = 1
    q_fx: int = 2
    q_fy: int = 2
    regime: str = "linear"
    K: int = 6
    nu: float = 5.0
    rho_factor: float = 0.95
    rho_x: float = 0.7
    rho_y: float = 0.7
    T_high: int = 5000
    burn_in: int = 500
    seed: int = 0
    snr: float = 2.0
    almon: tuple = (0.0, 0.1, -0.5)
    lead_in: int = 90

    def __post_init__(self):
        self.almon = tuple(float(a) for a in self.almon)
        if self.regime.startswith("rbf") and self.regime != "rbf":
            self.K = int(self.regime[3:])
            self.regime = "rbf"
        for name in ("q", "r", "N_x", "N_y", "T_high"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("L_x", "L_y", "q_fx", "q_fy", "burn_in"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("rho_factor", "rho_x", "rho_y"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.nu > 2:
            raise ValueError("nu must exceed 2")
        if self.regime not in ("linear", "rbf"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.regime == "rbf" and self.K < 2:
            raise ValueError("rbf regime needs K >= 2")
        if self.lead_in % self.r or self.lead_in < max(self.q_fx, self.q_fy) + 1:
            raise ValueError("lead_in must be a multiple of r exceeding the lag depths")
        if not self.snr > 0:
            raise ValueError("snr must be positive (use inf for noiseless panels)")

    @property
    def regime_label(self) -> str:
        return "linear" if self.regime == "linear" else f"rbf{self.K}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["almon"] = list(self.almon)
        return d


@dataclass
class LatentPath:
    F: np.ndarray
    innovations_cov: np.ndarray
    lead_in: np.ndarray
    coeffs: list = field(default_factory=list)


@dataclass
class SimulatedData:
    x: Panel
    y: Panel
    latent: LatentPath
    rbf_centers: np.ndarray | None
    rbf_gamma: float | None
    loadings_x: list
    loadings_y: list
    ar_x: list
    ar_y: list
    noise_sd_x: np.ndarray
    noise_sd_y: np.ndarray
    g: np.ndarray
    config: DgpConfig
    extras: dict = field(default_factory=dict)
    g_lead: np.ndarray | None = None

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = list(save_csv(self.x, d / "x.csv")) + list(save_csv(self.y, d / "y.csv"))
        info = {
            "config": self.config.to_dict(),
            "rbf_gamma": self.rbf_gamma,
            "rbf_centers": None if self.rbf_centers is None else self.rbf_centers.tolist(),
            "noise_sd_x": self.noise_sd_x.tolist(),
            "noise_sd_y": self.noise_sd_y.tolist(),
            **{k: v for k, v in self.extras.items()},
        }
        p = d / "dgp.json"
        p.write_text(json.dumps(info, indent=2, sort_keys=True))
        return paths + [p]


def companion(blocks) -> np.ndarray:
    blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
    n, p = blocks[0].shape[0], len(blocks)
    C = np.zeros((n * p, n * p))
    C[:n] = np.hstack(blocks)
    if p > 1:
        C[n:, :-n] = np.eye(n * (p - 1))
    return C


def spectral_radius(blocks) -> float:
    if len(blocks) == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(companion(blocks)))))


def rescale_to_spectral_radius(coeff_blocks, cap: float, tol: float = 1e-6) -> list:
    """Scale all blocks by one factor ``s <= 1`` so the companion radius is <= cap."""
    if not 0 < cap < 1:
        raise ValueError("cap must lie in (0, 1)")
    blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in coeff_blocks]
    if not blocks or spectral_radius(blocks) <= cap:
        return [b.copy() for b in blocks]
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if spectral_radius([mid * b for b in blocks]) <= cap:
            lo = mid
        else:
            hi = mid
    return [lo * b for b in blocks]


def simulate_factors(config: DgpConfig, rng, coeffs=None) -> LatentPath:
    """VAR(2) with innovation covariance ``0.5 I``; burn-in rows are discarded.

    The last ``config.lead_in`` pre-sample rows are kept separately as lag
    inputs for the observable panels.
    """
    q = config.q
    if coeffs is None:
        coeffs = [rng.uniform(-0.5, 0.5, (q, q)) for _ in range(2)]
        coeffs = rescale_to_spectral_radius(coeffs, config.rho_factor)
    phi1, phi2 = (np.atleast_2d(np.asarray(c, dtype=float)) for c in coeffs)
    sigma = 0.5 * np.eye(q)
    total = config.burn_in + config.lead_in + config.T_high
    eps = rng.normal(scale=np.sqrt(0.5), size=(total, q))
    F = np.zeros((total, q))
    for t in range(total):
        f = eps[t].copy()
        if t >= 1:
            f += phi1 @ F[t - 1]
        if t >= 2:
            f += phi2 @ F[t - 2]
        F[t] = f
    lead = F[config.burn_in: config.burn_in + config.lead_in]
    return LatentPath(F[config.burn_in + config.lead_in:].copy(), sigma, lead.copy(), [phi1, phi2])


def _rbf_raw(F, centers, gamma):
    d2 = ((F[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-gamma * d2)


def rbf_transform(F, centers, gamma: float, scale=None) -> np.ndarray:
    """``exp(-gamma ||F_t - c_k||^2) / sigma_k`` with ``sigma_k`` the column std.

    ``scale`` overrides the per-column ``sigma_k`` (used to apply in-sample
    scaling to pre-sample rows).
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    raw = _rbf_raw(np.atleast_2d(F), np.atleast_2d(centers), gamma)
    if scale is None:
        if raw.shape[0] < 2:
            return raw
        scale = raw.std(axis=0)
        if np.any(scale <= 0):
            raise ValueError("RBF column has zero variance")
    return raw / scale


def median_heuristic_gamma(centers) -> float:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if centers.shape[0] < 2:
        raise ValueError("need at least two centers")
    med = float(np.median(pdist(centers)))
    if med <= 0:
        raise ValueError("median center distance is zero")
    return 1.0 / (2.0 * med ** 2)


def almon_weights(n_lags: int, params) -> np.ndarray:
    """``w_j`` proportional to ``exp(a1 j + a2 j^2)`` for ``j = 0..n_lags``, summing to 1."""
    if n_lags < 0:
        raise ValueError("n_lags must be nonnegative")
    _, a1, a2 = params
    if a2 >= 0:
        warnings.warn("a2 >= 0 gives non-decaying Almon weights")
    j = np.arange(n_lags + 1, dtype=float)
    w = np.exp(a1 * j + a2 * j ** 2)
    return w / w.sum()


def almon_loadings(rows: int, n_lags: int, params, cols: int = 1, rng=None) -> list:
    """Lag blocks ``w_j * Lambda_base`` sharing one standard-normal base matrix."""
    rng = np.random.default_rng(0) if rng is None else rng
    base = rng.normal(size=(rows, cols))
    return [w * base for w in almon_weights(n_lags, params)]


def _scaled_noise(rng, shape, sd, nu=None):
    if nu is None:
        e = rng.normal(size=shape)
    else:
        e = rng.standard_t(nu, size=shape) * np.sqrt((nu - 2) / nu)
    return e * sd


def simulate_panels(config: DgpConfig, latent: LatentPath, rng) -> SimulatedData:
    r, lead = config.r, latent.lead_in.shape[0]
    if lead < max(config.q_fx, config.q_fy) + 1 or lead % r:
        raise ValueError("latent lead-in is too short for the lag depths")
    F_all = np.vstack([latent.lead_in, latent.F])
    T = latent.F.shape[0]
    M = F_all.shape[0]

    centers = gamma = None
    if config.regime == "linear":
        G_all = F_all
    else:
        centers = rng.normal(size=(config.K, config.q))
        gamma = median_heuristic_gamma(centers)
        scale = _rbf_raw(latent.F, centers, gamma).std(axis=0)
        if np.any(scale <= 0):
            raise ValueError("RBF column has zero variance")
        G_all = rbf_transform(F_all, centers, gamma, scale=scale)
    dim_g = G_all.shape[1]

    lam_x = almon_loadings(config.N_x, config.q_fx, config.almon, dim_g, rng)
    lam_y = almon_loadings(config.N_y, config.q_fy, config.almon, dim_g, rng)
    A = rescale_to_spectral_radius(
        [rng.uniform(-0.5, 0.5, (config.N_x, config.N_x)) for _ in range(config.L_x)], config.rho_x)
    C = rescale_to_spectral_radius(
        [rng.uniform(-0.5, 0.5, (config.N_y, config.N_y)) for _ in range(config.L_y)], config.rho_y)

    sx = np.zeros((M, config.N_x))
    for j, lam in enumerate(lam_x):
        sx[j:] += G_all[: M - j] @ lam.T
    n_low = M // r
    ends = r * (np.arange(n_low) + 1) - 1
    sy = np.zeros((n_low, config.N_y))
    for j, lam in enumerate(lam_y):
        sy += G_all[ends - j] @ lam.T

    low_lead = lead // r
    T_low = T // r
    noiseless = not np.isfinite(config.snr)
    sd_x = np.zeros(config.N_x) if noiseless else np.sqrt(sx[lead:].var(axis=0) / config.snr)
    sd_y = np.zeros(config.N_y) if noiseless else np.sqrt(sy[low_lead:low_lead + T_low].var(axis=0) / config.snr)
    eta = _scaled_noise(rng, (M, config.N_x), sd_x, config.nu)
    xi = _scaled_noise(rng, (n_low, config.N_y), sd_y)

    X = sx + eta
    for t in range(M):
        for l, a in enumerate(A, start=1):
            if t - l >= 0:
                X[t] += a @ X[t - l]
    Y = sy + xi
    for t in range(n_low):
        for l, c in enumerate(C, start=1):
            if t - l >= 0:
                Y[t] += c @ Y[t - l]

    X = X[lead:]
    Y = Y[low_lead:low_lead + T_low]
    x = make_panel(X, frequency=HIGH, start=BASE_YEAR * 12, period_months=1)
    y = make_panel(Y, frequency=LOW, start=BASE_YEAR * 12 // r, period_months=r,
                   first_id=config.N_x)
    extras = {
        "almon_weights_x": almon_weights(config.q_fx, config.almon).tolist(),
        "almon_weights_y": almon_weights(config.q_fy, config.almon).tolist(),
        "spectral_radius_factor": spectral_radius(latent.coeffs),
        "spectral_radius_x": spectral_radius(A),
        "spectral_radius_y": spectral_radius(C),
    }
    return SimulatedData(x, y, latent, centers, gamma, lam_x, lam_y, A, C, sd_x, sd_y,
                         G_all[lead:], config, extras, G_all[:lead])


def simulate(config: DgpConfig, seed: int | None = None) -> SimulatedData:
    """Factors then panels from one seeded generator."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    latent = simulate_factors(config, rng)
    return simulate_panels(config, latent, rng)


def split_sizes(T: int) -> tuple[int, int, int]:
    """80% for estimation (the last tenth of it for validation), 20% test."""
    n_fit = int(np.floor(0.8 * T + 1e-9))
    n_val = int(round(0.1 * n_fit))
    return n_fit - n_val, n_val, T - n_fit


def standard_split(data) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contiguous train/validation/test index sets over the high-frequency sample."""
    T = int(data) if np.isscalar(data) else data.x.T
    a, b, _ = split_sizes(T)
    idx = np.arange(T)
    return idx[:a], idx[a:a + b], idx[a + b:]
