"""Monte Carlo checks of the linear estimator's large-sample behaviour.

All studies share one static factor design: ``k = k_ys + k_R`` factors, Y
series load only on the first ``k_ys`` (Y-strong) factors, X series load on
the remaining X-only factors and, optionally, on a proper subset of the
Y-strong directions. Errors are Gaussian and independent across units and
time unless stated otherwise.

Each replication renormalizes the truth by the realized factor second
moment so that the true and estimated factors share the ``F'F/T = I``
convention (or ``Lambda'Lambda/N = I`` in the rate study); the remaining
rotation is fixed by orthogonal Procrustes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .attention import (
    CrossSectionAttention, attention_diagnostics, banded_smoother, diffuse_attention,
    identity_attention, sparse_attention, target_pca_attention,
)
from .dgp import derive_seed
from .linear import DegenerateRankError, align_rotation, fit_attention_pca
from .parallel import chunked, parallel_map


# -- long-run covariance ---------------------------------------------------

def auto_bandwidth(T: int) -> int:
    return int(math.floor(4 * (T / 100.0) ** (2.0 / 9.0)))


def newey_west_longrun(score_series, bandwidth="auto", demean: bool = True,
                       return_info: bool = False):
    """Bartlett-kernel long-run covariance of a ``T x k`` score series.

    ``Gamma_0 + sum_{l=1}^{L} (1 - l/(L+1)) (Gamma_l + Gamma_l')`` with
    autocovariances divided by ``T``. Negative eigenvalues (possible only
    through rounding) are clipped to zero and reported.
    """
    u = np.asarray(score_series, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    T = u.shape[0]
    L = auto_bandwidth(T) if bandwidth == "auto" else int(bandwidth)
    if L < 0:
        raise ValueError("bandwidth must be nonnegative")
    if L >= T or T <= 2 * L:
        raise ValueError(f"bandwidth {L} too large for T={T} (need T > 2*bandwidth)")
    if demean:
        u = u - u.mean(axis=0)
    S = u.T @ u / T
    for l in range(1, L + 1):
        G = u[l:].T @ u[:-l] / T
        S += (1.0 - l / (L + 1.0)) * (G + G.T)
    S = 0.5 * (S + S.T)
    clipped = False
    w, V = np.linalg.eigh(S)
    if np.any(w < 0):
        clipped = True
        S = (V * np.maximum(w, 0)) @ V.T
    if return_info:
        return S, {"bandwidth": L, "clipped": clipped}
    return S


# -- designs ---------------------------------------------------------------

@dataclass
class StrongBlockSpec:
    """Loading layout.

    ``x_ys_dims`` (< ``k_ys``) Y-strong directions also drive X, with
    loadings scaled by ``x_signal``; ``x_signal = 0`` removes X's Y-strong
    content entirely.
    """

    k_ys: int = 2
    k_R: int = 1
    x_ys_dims: int = 1
    x_signal: float = 1.0
    aligned_units: int = 1

    def __post_init__(self):
        if self.k_ys < 1 or self.k_R < 0:
            raise ValueError("need k_ys >= 1 and k_R >= 0")
        if not 0 <= self.x_ys_dims < self.k_ys:
            raise ValueError("X may load on fewer than k_ys Y-strong directions")

    @property
    def k(self) -> int:
        return self.k_ys + self.k_R

    def loadings(self, N_x: int, N_y: int, rng) -> np.ndarray:
        """``(N_x + N_y) x k`` loadings, X rows first.

        The first ``aligned_units`` Y units load only on Y-strong direction 1
        and the next ``aligned_units`` only on direction 2 (when k_ys > 1).
        """
        k, kys = self.k, self.k_ys
        lam = np.zeros((N_x + N_y, k))
        lam[:N_x, kys:] = rng.normal(size=(N_x, self.k_R))
        lam[:N_x, : self.x_ys_dims] = self.x_signal * rng.normal(size=(N_x, self.x_ys_dims))
        ly = rng.normal(size=(N_y, kys))
        a = self.aligned_units
        if a:
            ly[:a] = 0.0
            ly[:a, 0] = np.abs(rng.normal(size=a)) + 0.5
            if kys > 1:
                ly[a:2 * a] = 0.0
                ly[a:2 * a, 1] = np.abs(rng.normal(size=a)) + 0.5
        lam[N_x:, :kys] = ly
        smallest = np.linalg.eigvalsh(ly.T @ ly / N_y)[0]
        if smallest <= 0.1:
            raise ValueError("Y-strong loading second moment is near singular")
        return lam


@dataclass
class McDesign:
    cells: list
    families: list = field(default_factory=lambda: ["identity"])
    R: int = 200
    strong_block: StrongBlockSpec = field(default_factory=StrongBlockSpec)
    noise_sd: float = 1.0
    level: float = 0.95
    seed: int = 0
    temporal: str = "identity"
    units: tuple = (0,)
    times: tuple = (0,)
    hac_bandwidth: object = "auto"
    workers: int = 1
    chunk: int = 25

    def __post_init__(self):
        self.cells = [tuple(int(v) for v in c) for c in self.cells]
        if isinstance(self.strong_block, dict):
            self.strong_block = StrongBlockSpec(**self.strong_block)
        self.units = tuple(self.units)
        self.times = tuple(self.times)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        return d


@dataclass
class McResult:
    study: str
    rows: list
    summary: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"study": self.study, "rows": self.rows, "summary": self.summary,
                           "flags": self.flags}, indent=2, sort_keys=True, default=_jsonable)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        keys = sorted({k for r in self.rows for k in r if not isinstance(r[k], (list, dict))})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in self.rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"### {self.study}", ""]
        if self.rows:
            keys = [k for k in self.rows[0] if not isinstance(self.rows[0][k], (list, dict))]
            lines.append("| " + " | ".join(keys) + " |")
            lines.append("|" + "---|" * len(keys))
            for r in self.rows:
                lines.append("| " + " | ".join(_fmt(r.get(k, "")) for k in keys) + " |")
        if self.summary:
            lines.append("")
            for k in sorted(self.summary):
                v = self.summary[k]
                if not isinstance(v, (list, dict)):
                    lines.append(f"- {k}: {_fmt(v)}")
        for f in self.flags:
            lines.append(f"- flag: {f}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.12g" % v
    return str(v)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, StrongBlockSpec):
        return asdict(o)
    raise TypeError(type(o))


# -- shared machinery ------------------------------------------------------

def family_attention(family: str, N_x: int, N_y: int):
    N = N_x + N_y
    if family == "identity":
        return identity_attention(N), (N_x, N_y)
    if family == "diffuse":
        return diffuse_attention(N).matrix, (N_x, N_y)
    if family == "sparse":
        return sparse_attention(N, int(math.ceil(math.sqrt(N)))).matrix, (N_x, N_y)
    if family.startswith("target_pca"):
        gamma = float(family.split(":")[1]) if ":" in family else 1.0
        return target_pca_attention(N_x, N_y, gamma).matrix, (N_x, N_y)
    raise ValueError(f"unknown attention family {family!r}")


def _temporal(design: McDesign, T: int):
    if design.temporal == "identity":
        return None
    if design.temporal.startswith("banded"):
        width = int(design.temporal.split(":")[1]) if ":" in design.temporal else 3
        return banded_smoother(T, width).matrix
    raise ValueError(f"unknown temporal attention {design.temporal!r}")


def _cell_loadings(design: McDesign, ci: int):
    N_x, N_y, _ = design.cells[ci]
    rng = np.random.default_rng(derive_seed(design.seed, 1_000_003, ci))
    return design.strong_block.loadings(N_x, N_y, rng)


def _draw(design: McDesign, ci: int, rep: int, lam: np.ndarray):
    _, _, T = design.cells[ci]
    rng = np.random.default_rng(derive_seed(design.seed, ci, rep))
    k = lam.shape[1]
    F = rng.normal(size=(T, k))
    e = design.noise_sd * rng.normal(size=(T, lam.shape[0]))
    return F, e


def _factor_normalize(F, lam):
    """Rotate truth so ``F'F/T = I`` while keeping the common component."""
    T = F.shape[0]
    L = np.linalg.cholesky(F.T @ F / T)
    return np.linalg.solve(L, F.T).T, lam @ L


def _pca_factor_normalized(z, k):
    """Estimator rescaled to ``F'F/T = I``, ``Lambda = Z'F/T``."""
    fit = fit_attention_pca(z, k)
    T, N = z.shape
    P = fit.factors * np.sqrt(N) / fit.singular_values
    F_hat = np.sqrt(T) * P
    lam_hat = fit.loadings * fit.singular_values / np.sqrt(N * T)
    return F_hat, lam_hat


def _y_strong(lam_hat_y, k_ys):
    """Leading ``k_ys`` eigenvectors of the estimated Y-block loading second moment."""
    w, V = np.linalg.eigh(lam_hat_y.T @ lam_hat_y / lam_hat_y.shape[0])
    return V[:, ::-1][:, :k_ys]


def _run_tasks(kind: str, design: McDesign, ci: int) -> list:
    tasks = [(kind, design, ci, list(r)) for r in chunked(design.R, max(1, design.chunk))]
    out = parallel_map(_rep_chunk, tasks, design.workers)
    return [row for chunk in out for row in chunk]


def _rep_chunk(task):
    kind, design, ci, reps = task
    fn = _REP_FUNCS[kind]
    lam = _cell_loadings(design, ci)
    return [fn(design, ci, rep, lam) for rep in reps]


# -- consistency rates -----------------------------------------------------

def _rep_consistency(design, ci, rep, lam):
    N_x, N_y, T = design.cells[ci]
    F, e = _draw(design, ci, rep, lam)
    k = lam.shape[1]
    B = _temporal(design, T)
    out = {}
    for fam in design.families:
        A, _ = family_attention(fam, N_x, N_y)
        Z = F @ lam.T + e
        Fb = F if B is None else B @ F
        Zt = (Z if B is None else B @ Z) @ A
        lam_a = A.T @ lam
        N = lam_a.shape[0]
        Lc = np.linalg.cholesky(lam_a.T @ lam_a / N)
        lam_true = np.linalg.solve(Lc, lam_a.T).T
        F_true = Fb @ Lc
        try:
            fit = fit_attention_pca(Zt, k)
        except DegenerateRankError:
            out[fam] = None
            continue
        h = align_rotation(fit.loadings, lam_true)
        dl = fit.loadings - lam_true @ h.H.T
        df = fit.factors - F_true @ h.H.T
        # same fit under the F'F/T = I convention, for comparison
        F_fn, lam_fn = _factor_normalize(Fb, lam_a)
        _, lam_hat_fn = _pca_factor_normalized(Zt, k)
        g = align_rotation(lam_hat_fn, lam_fn)
        dfn = lam_hat_fn - lam_fn @ g.H.T
        out[fam] = (float(np.mean(np.sum(dl ** 2, axis=1))), float(np.mean(np.sum(df ** 2, axis=1))),
                    float(np.mean(np.sum(dfn ** 2, axis=1))))
    return out


def _slope(logn, logy):
    X = np.column_stack([np.ones_like(logn), logn])
    return float(np.linalg.lstsq(X, logy, rcond=None)[0][1])


def run_consistency_study(design: McDesign, n_boot: int = 200) -> McResult:
    """Loading and factor MSE across a growing cross-section, per attention family.

    The reported slope is the least-squares slope of ``log(mean MSE)`` on
    ``log N``; its standard error comes from resampling replications within
    each cell. The family's theoretical exponent is the slope of
    ``log bar_alpha`` computed from exact diagnostics.
    """
    per_cell = [_run_tasks("consistency", design, ci) for ci in range(len(design.cells))]
    rows, summary, flags = [], {}, []
    Ns = np.array([c[0] + c[1] for c in design.cells], dtype=float)
    rng = np.random.default_rng(derive_seed(design.seed, 77))
    for fam in design.families:
        lm, fm, nm, ba = [], [], [], []
        for ci, reps in enumerate(per_cell):
            N_x, N_y, T = design.cells[ci]
            vals = [r[fam] for r in reps if r[fam] is not None]
            fails = len(reps) - len(vals)
            if fails > 0.05 * len(reps):
                flags.append(f"{fam} cell {design.cells[ci]}: {fails} degenerate replications")
            arr = np.array(vals) if vals else np.full((1, 3), np.nan)
            lm.append(arr[:, 0])
            fm.append(arr[:, 1])
            nm.append(arr[:, 2])
            A, split = family_attention(fam, N_x, N_y)
            B = _temporal(design, T)
            diag = attention_diagnostics(CrossSectionAttention(A, split), B, T)
            ba.append(diag.bar_alpha)
            rows.append({"family": fam, "N_x": N_x, "N_y": N_y, "T": T, "N": N_x + N_y,
                         "loading_mse": float(arr[:, 0].mean()), "factor_mse": float(arr[:, 1].mean()),
                         "loading_mse_factor_normalized": float(arr[:, 2].mean()),
                         "bar_alpha": diag.bar_alpha, "n_eff": diag.n_eff, "failures": fails})
        logn = np.log(Ns)
        theo = _slope(logn, np.log(np.array(ba)))
        res = {"theoretical_exponent": theo}
        for name, data in (("loading", lm), ("factor", fm), ("loading_factor_normalized", nm)):
            means = np.array([d.mean() for d in data])
            if np.all(means > 0):
                s = _slope(logn, np.log(means))
                boots = []
                for _ in range(n_boot):
                    bm = [d[rng.integers(0, d.size, d.size)].mean() for d in data]
                    boots.append(_slope(logn, np.log(bm)))
                se = float(np.std(boots, ddof=1))
            else:
                s, se = float("nan"), float("nan")
            res[f"{name}_slope"] = s
            res[f"{name}_slope_se"] = se
        res["rate_condition_violated"] = bool(theo >= 0)
        if theo >= 0:
            flags.append(f"{fam}: bar_alpha does not vanish (rate condition violated)")
        summary[fam] = res
    return McResult("consistency", rows, summary, flags)


# -- loading normality ----------------------------------------------------

def _rep_loading(design, ci, rep, lam):
    N_x, N_y, T = design.cells[ci]
    sb = design.strong_block
    F, e = _draw(design, ci, rep, lam)
    Z = F @ lam.T + e
    Ft, lt = _factor_normalize(F, lam)
    F_hat, lam_hat = _pca_factor_normalized(Z, sb.k)
    S = _y_strong(lam_hat[N_x:], sb.k_ys)
    lam_ys_hat = lam_hat[N_x:] @ S
    F_ys_hat = F_hat @ S
    lam_ys = lt[N_x:, : sb.k_ys]
    h = align_rotation(lam_ys_hat, lam_ys)
    resid = Z - F_hat @ lam_hat.T
    out = {"err": [], "z_oracle": [], "z_hac": []}
    for i in design.units:
        err = np.sqrt(T) * (lam_ys_hat[i] - h.H @ lam_ys[i])
        out["err"].append(err)
        if design.noise_sd == 0:
            continue
        v_or = design.noise_sd ** 2 * np.ones(sb.k_ys)
        score = F_ys_hat * resid[:, N_x + i][:, None]
        omega = newey_west_longrun(score, design.hac_bandwidth)
        sig_f = F_ys_hat.T @ F_ys_hat / T
        sinv = np.linalg.inv(sig_f)
        v_hac = np.diag(sinv @ omega @ sinv)
        out["z_oracle"].append(err / np.sqrt(v_or))
        out["z_hac"].append(err / np.sqrt(v_hac))
    return out


def _coverage_result(study, design, per_cell, level, scale_name):
    crit = stats.norm.ppf(0.5 + level / 2)
    rows, flags = [], []
    summary = {}
    for ci, reps in enumerate(per_cell):
        N_x, N_y, T = design.cells[ci]
        err = np.array([r["err"] for r in reps])
        if design.noise_sd == 0:
            rows.append({"N_x": N_x, "N_y": N_y, "T": T, "max_abs_error": float(np.abs(err).max()),
                         "degenerate": True})
            flags.append(f"cell {design.cells[ci]}: zero noise, studentization skipped")
            continue
        zo = np.array([r["z_oracle"] for r in reps])
        zh = np.array([r["z_hac"] for r in reps])
        ks_pass = []
        for ui, unit in enumerate(design.units):
            for j in range(zo.shape[2]):
                cov_o = float(np.mean(np.abs(zo[:, ui, j]) <= crit))
                cov_h = float(np.mean(np.abs(zh[:, ui, j]) <= crit))
                ks = float(stats.kstest(zo[:, ui, j], "norm").pvalue)
                ks_pass.append(ks > 0.01)
                rows.append({"N_x": N_x, "N_y": N_y, "T": T, "unit": unit, "coord": j,
                             "coverage_oracle": cov_o, "coverage_hac": cov_h,
                             "sd_studentized": float(zo[:, ui, j].std(ddof=1)),
                             "ks_pvalue": ks, "scale": scale_name})
        summary[str(design.cells[ci])] = {"ks_pass_share": float(np.mean(ks_pass))}
    if design.R < 100:
        flags.append(f"R={design.R} is below 100; coverage is imprecise")
    return McResult(study, rows, summary, flags)


def run_loading_normality_study(design: McDesign) -> McResult:
    """Coverage of studentized ``sqrt(T)`` Y-strong loading errors.

    Oracle variance uses the known error variance; the feasible version uses
    ``Sigma_F^{-1} Omega Sigma_F^{-1}`` with ``Omega`` from Newey-West on
    the estimated scores ``F_hat_t e_hat_it``.
    """
    for N_x, N_y, T in design.cells:
        if design.hac_bandwidth != "auto" and T <= 2 * int(design.hac_bandwidth):
            raise ValueError("HAC bandwidth exceeds T/2")
    per_cell = [_run_tasks("loading", design, ci) for ci in range(len(design.cells))]
    return _coverage_result("loading_normality", design, per_cell, design.level, "sqrt(T)")


# -- factor normality -----------------------------------------------------

def _rep_factor(design, ci, rep, lam):
    N_x, N_y, T = design.cells[ci]
    sb = design.strong_block
    N = N_x + N_y
    F, e = _draw(design, ci, rep, lam)
    Z = F @ lam.T + e
    Ft, lt = _factor_normalize(F, lam)
    F_hat, lam_hat = _pca_factor_normalized(Z, sb.k)
    S = _y_strong(lam_hat[N_x:], sb.k_ys)
    lam_ys_hat = lam_hat[N_x:] @ S
    F_ys_hat = F_hat @ S
    h = align_rotation(lam_ys_hat, lt[N_x:, : sb.k_ys])
    resid = Z - F_hat @ lam_hat.T
    sig_lam = lt.T @ lt / N
    v_or_full = design.noise_sd ** 2 * np.linalg.inv(sig_lam)
    v_or = h.H @ v_or_full[: sb.k_ys, : sb.k_ys] @ h.H.T
    sig_hat = lam_hat.T @ lam_hat / N
    s2 = np.mean(resid ** 2, axis=0)
    xi = (lam_hat * s2[:, None]).T @ lam_hat / N
    sinv = np.linalg.inv(sig_hat)
    v_hac = S.T @ (sinv @ xi @ sinv) @ S
    out = {"err": [], "z_oracle": [], "z_hac": []}
    for t in design.times:
        err = np.sqrt(N) * (F_ys_hat[t] - h.H @ Ft[t, : sb.k_ys])
        out["err"].append(err)
        if design.noise_sd == 0:
            continue
        out["z_oracle"].append(err / np.sqrt(np.diag(v_or)))
        out["z_hac"].append(err / np.sqrt(np.diag(v_hac)))
    return out


def run_factor_normality_study(design: McDesign) -> McResult:
    """Coverage of studentized ``sqrt(N_eff)`` Y-strong factor errors at fixed dates.

    ``design.units`` is ignored; ``design.times`` lists the dates.
    """
    per_cell = [_run_tasks("factor", design, ci) for ci in range(len(design.cells))]
    d = McDesign(**{**design.__dict__, "units": design.times})
    res = _coverage_result("factor_normality", d, per_cell, design.level, "sqrt(N_eff)")
    for r in res.rows:
        if "unit" in r:
            r["time"] = r.pop("unit")
    return res


# -- common-component regimes ---------------------------------------------

def _rep_common(design, ci, rep, lam):
    N_x, N_y, T = design.cells[ci]
    sb = design.strong_block
    N = N_x + N_y
    F, e = _draw(design, ci, rep, lam)
    Z = F @ lam.T + e
    Ft, lt = _factor_normalize(F, lam)
    F_hat, lam_hat = _pca_factor_normalized(Z, sb.k)
    S = _y_strong(lam_hat[N_x:], sb.k_ys)
    lam_ys_hat = lam_hat[N_x:] @ S
    F_ys_hat = F_hat @ S
    lam_ys = lt[N_x:, : sb.k_ys]
    h = align_rotation(lam_ys_hat, lam_ys)
    Hm = h.H
    sig_lam_inv = np.linalg.inv(lt.T @ lt / N)[: sb.k_ys, : sb.k_ys]
    sig2 = design.noise_sd ** 2
    rows = []
    for i in design.units:
        for t in design.times:
            li, ft = lam_ys[i], Ft[t, : sb.k_ys]
            c_true = li @ ft
            c_hat = lam_ys_hat[i] @ F_ys_hat[t]
            d_f = (Hm @ li) @ (F_ys_hat[t] - Hm @ ft)
            d_l = (lam_ys_hat[i] - Hm @ li) @ (Hm @ ft)
            s2_lam = sig2 * ft @ ft
            s2_f = sig2 * li @ sig_lam_inv @ li
            rows.append((c_hat - c_true, d_f, d_l, s2_lam, s2_f))
    return rows


def run_common_component_regimes(design: McDesign) -> McResult:
    """Common-component error decomposition at fixed ``(i, t)`` pairs.

    Each cell is classified by ``N_eff / T``. Reported per cell: the share
    of error variance due to loading estimation, the rate-scaled variance
    ``T Var`` and ``N_eff Var``, and the mixed-regime prediction
    ``sigma2_Lambda + (T / N_eff) sigma2_F`` averaged over replications.
    """
    per_cell = [_run_tasks("common", design, ci) for ci in range(len(design.cells))]
    rows = []
    for ci, reps in enumerate(per_cell):
        N_x, N_y, T = design.cells[ci]
        N = N_x + N_y
        arr = np.array(reps)  # R x pairs x 5
        err, d_f, d_l, s2l, s2f = (arr[..., j] for j in range(5))
        var_err = float(np.mean(err ** 2))
        if design.noise_sd == 0:
            rows.append({"N_x": N_x, "N_y": N_y, "T": T, "degenerate": True, "var_err": var_err})
            continue
        share_l = float(np.mean(d_l ** 2) / var_err)
        share_f = float(np.mean(d_f ** 2) / var_err)
        ratio = N / T
        regime = "F-dominant" if ratio < 0.2 else ("Lambda-dominant" if ratio > 5 else "mixed")
        pred_mixed = float(np.mean(s2l + (T / N) * s2f))
        rows.append({
            "N_x": N_x, "N_y": N_y, "T": T, "N_eff_over_T": ratio, "regime": regime,
            "lambda_share": share_l, "factor_share": share_f,
            "T_var": T * var_err, "N_var": N * var_err,
            "sigma2_lambda": float(np.mean(s2l)), "sigma2_f": float(np.mean(s2f)),
            "mixed_prediction": pred_mixed,
            "mixed_ratio": T * var_err / pred_mixed,
            "f_regime_ratio": N * var_err / float(np.mean(s2f)),
            "lambda_regime_ratio": T * var_err / float(np.mean(s2l)),
        })
    return McResult("common_component_regimes", rows,
                    {"note": "score orthogonality across blocks holds by construction"})


# -- transfer efficiency ---------------------------------------------------

def _rep_efficiency(design, ci, rep, lam):
    N_x, N_y, T = design.cells[ci]
    sb = design.strong_block
    F, e = _draw(design, ci, rep, lam)
    Z = F @ lam.T + e
    C_true = F @ lam[N_x:].T
    F_hat, lam_hat = _pca_factor_normalized(Z, sb.k)
    S = _y_strong(lam_hat[N_x:], sb.k_ys)
    C_joint = F_hat @ S @ S.T @ lam_hat[N_x:].T
    Fy, ly = _pca_factor_normalized(Z[:, N_x:], sb.k_ys)
    C_y = Fy @ ly.T
    units = list(design.units)
    ej = np.mean((C_joint[:, units] - C_true[:, units]) ** 2, axis=0)
    ey = np.mean((C_y[:, units] - C_true[:, units]) ** 2, axis=0)
    return ej, ey


def efficiency_comparison(design: McDesign, alpha: float = 0.05) -> McResult:
    """Joint (X and Y) versus Y-only estimation of Y common components.

    Per replication the squared common-component error is averaged over
    time for each tracked unit; joint and Y-only are compared with a
    one-sided paired t-test across replications.
    """
    rows, flags = [], []
    for ci in range(len(design.cells)):
        reps = _run_tasks("efficiency", design, ci)
        ej = np.array([r[0] for r in reps])
        ey = np.array([r[1] for r in reps])
        N_x, N_y, T = design.cells[ci]
        for ui, unit in enumerate(design.units):
            if design.noise_sd == 0:
                rows.append({"N_x": N_x, "N_y": N_y, "T": T, "unit": unit, "ratio": float("nan"),
                             "max_mse": float(max(ej[:, ui].max(), ey[:, ui].max())),
                             "degenerate": True})
                flags.append("noiseless design: variance ratio undefined")
                continue
            test = stats.ttest_rel(ej[:, ui], ey[:, ui], alternative="less")
            rows.append({"N_x": N_x, "N_y": N_y, "T": T, "unit": unit,
                         "mse_joint": float(ej[:, ui].mean()), "mse_y_only": float(ey[:, ui].mean()),
                         "ratio": float(ej[:, ui].mean() / ey[:, ui].mean()),
                         "t_stat": float(test.statistic), "p_value": float(test.pvalue),
                         "joint_better": bool(test.pvalue < alpha)})
    return McResult("efficiency", rows, {"x_signal": design.strong_block.x_signal}, flags)


def y_strong_eigen_slopes(N_y_grid, T_per_unit: float = 2.0, spec: StrongBlockSpec | None = None,
                        seed: int = 0) -> dict:
    """Log-log slopes of the ``k_ys``-th and ``(k_ys+1)``-th eigenvalues of the
    Y-block sample covariance against ``N_y``.

    ``T`` grows with ``N_y`` (``T = T_per_unit * N_y``) so the noise
    eigenvalues stay bounded instead of drifting with ``N_y / T``.
    """
    spec = spec or StrongBlockSpec()
    ev_k, ev_k1 = [], []
    for n in N_y_grid:
        T = int(round(T_per_unit * n))
        rng = np.random.default_rng(derive_seed(seed, n))
        lam = spec.loadings(1, n, rng)[1:, : spec.k_ys]
        Y = rng.normal(size=(T, spec.k_ys)) @ lam.T + rng.normal(size=(T, n))
        w = np.sort(np.linalg.eigvalsh(Y.T @ Y / T))[::-1]
        ev_k.append(w[spec.k_ys - 1])
        ev_k1.append(w[spec.k_ys])
    logn = np.log(np.asarray(N_y_grid, dtype=float))
    return {"slope_k": _slope(logn, np.log(ev_k)), "slope_k_plus_1": _slope(logn, np.log(ev_k1))}


_REP_FUNCS = {
    "consistency": _rep_consistency,
    "loading": _rep_loading,
    "factor": _rep_factor,
    "common": _rep_common,
    "efficiency": _rep_efficiency,
}
