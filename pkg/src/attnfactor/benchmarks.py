"""Reference forecasters, accuracy metrics, subsample splits and the DM test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .dgp import derive_seed
from .encoder import activation, activation_grad, dense, dense_backward
from .inference import newey_west_longrun
from .panels import Panel, parse_year_month
from .training import Adam


class SingularDesignError(np.linalg.LinAlgError):
    pass


class DegenerateSeriesError(ValueError):
    pass


# -- AR --------------------------------------------------------------------

@dataclass
class ArModel:
    order: int
    intercept: float
    coefs: np.ndarray
    bic_trace: list


def _lag_matrix(y, p, start):
    n = len(y) - start
    cols = [np.ones(n)] + [y[start - j: len(y) - j] for j in range(1, p + 1)]
    return np.column_stack(cols), y[start:]


def fit_ar_bic(y, p_max: int) -> ArModel:
    """BIC order selection on a common sample (first ``p_max`` points held back).

    ``BIC = n ln(RSS/n) + (p+1) ln n``; ties go to the smaller order. The
    chosen order is then refit on every usable observation.
    """
    y = np.asarray(y, dtype=float)
    y = y[np.isfinite(y)]
    n_all = len(y)
    if p_max < 0 or p_max >= n_all / 2:
        raise ValueError("p_max must be below half the sample length")
    if n_all <= p_max + 10:
        raise ValueError("series too short for the requested p_max")
    if np.ptp(y) == 0:
        raise DegenerateSeriesError("constant series")
    trace = []
    best_p, best_bic = 0, math.inf
    for p in range(p_max + 1):
        X, t = _lag_matrix(y, p, p_max)
        beta = linalg.lstsq(X, t)[0]
        rss = float(np.sum((t - X @ beta) ** 2))
        n = len(t)
        bic = n * math.log(max(rss, 1e-300) / n) + (p + 1) * math.log(n)
        trace.append((p, bic))
        if bic < best_bic:
            best_p, best_bic = p, bic
    X, t = _lag_matrix(y, best_p, best_p)
    beta = linalg.lstsq(X, t)[0]
    return ArModel(best_p, float(beta[0]), beta[1:].copy(), trace)


def forecast_ar(model: ArModel, history, horizon: int = 1) -> float:
    """Iterated ``horizon``-step prediction from the end of ``history``."""
    h = list(np.asarray(history, dtype=float))
    if len(h) < model.order:
        raise ValueError("history shorter than the AR order")
    for _ in range(horizon):
        x = model.intercept + sum(model.coefs[j] * h[-1 - j] for j in range(model.order))
        h.append(x)
    return float(h[-1])


# -- least squares ---------------------------------------------------------

@dataclass
class OlsModel:
    intercept: float
    coefs: np.ndarray

    def predict(self, x) -> np.ndarray:
        x = _as_2d(x)
        return self.intercept + x @ self.coefs


def _as_2d(x):
    if isinstance(x, Panel):
        x = x.dense()
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _lstsq(X, y, allow_fallback: bool):
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        if not allow_fallback:
            raise SingularDesignError(f"design has rank {rank} < {X.shape[1]} columns")
        return linalg.lstsq(X, y)[0], True
    q, r = np.linalg.qr(X)
    return linalg.solve_triangular(r, q.T @ y), False


def fit_ols(y, x) -> OlsModel:
    y = np.asarray(y, dtype=float)
    X = np.column_stack([np.ones(len(y)), _as_2d(x)])
    ok = np.isfinite(y) & np.all(np.isfinite(X), axis=1)
    beta, _ = _lstsq(X[ok], y[ok], allow_fallback=False)
    return OlsModel(float(beta[0]), beta[1:])


# -- MIDAS -----------------------------------------------------------------

@dataclass
class MidasModel:
    r: int
    lags: int
    horizon: int
    intercept: float
    coefs: np.ndarray
    n_regressors: int
    n_extra: int = 0
    fallback: bool = False

    def design(self, x_high, rows, extra=None):
        return midas_design(x_high, self.r, self.lags, rows, self.horizon, extra)

    def predict(self, x_high, rows, extra=None) -> np.ndarray:
        X, ok = self.design(x_high, rows, extra)
        out = np.full(len(ok), np.nan)
        out[ok] = self.intercept + X[ok] @ self.coefs
        return out


def midas_design(x_high, r: int, lags: int, rows, horizon: int = 0, extra=None):
    """Rows ``[x_{c-j}]_{j<lags}`` per regressor, with ``c`` the last high-frequency
    period of low row ``t' - horizon`` (``c = r (t' - horizon + 1) - 1``).

    Returns the design (without intercept) and a validity flag per row.
    """
    x = _as_2d(x_high)
    rows = np.asarray(rows, dtype=np.int64)
    c = r * (rows - horizon + 1) - 1
    cols = []
    ok = (c - (lags - 1) >= 0) & (c < x.shape[0])
    cc = np.clip(c, lags - 1, x.shape[0] - 1)
    for i in range(x.shape[1]):
        for j in range(lags):
            cols.append(x[cc - j, i])
    X = np.column_stack(cols) if cols else np.zeros((len(rows), 0))
    if extra is not None:
        e = _as_2d(extra)
        X = np.column_stack([X, e])
    ok &= np.all(np.isfinite(X), axis=1)
    return X, ok


def fit_midas_unrestricted(y_low, x_high, r: int, lags: int = 4, horizon: int = 0, extra=None,
                           rows=None, allow_fallback: bool = True) -> MidasModel:
    """Unrestricted distributed-lag regression fitted by least squares.

    ``extra`` holds additional low-frequency regressors aligned with
    ``y_low``. Rank-deficient designs fall back to minimum-norm least
    squares (flagged) unless ``allow_fallback`` is false.
    """
    y = np.asarray(y_low, dtype=float)
    if lags < 1 or r < 1:
        raise ValueError("lags and r must be positive")
    rows = np.arange(len(y)) if rows is None else np.asarray(rows, dtype=np.int64)
    X, ok = midas_design(x_high, r, lags, rows, horizon, None if extra is None else _as_2d(extra)[rows])
    ok &= np.isfinite(y[rows])
    Xd = np.column_stack([np.ones(ok.sum()), X[ok]])
    beta, fb = _lstsq(Xd, y[rows][ok], allow_fallback)
    n_extra = 0 if extra is None else _as_2d(extra).shape[1]
    return MidasModel(r, lags, horizon, float(beta[0]), beta[1:], _as_2d(x_high).shape[1], n_extra, fb)


# -- small feedforward net -------------------------------------------------

@dataclass
class NnLiteModel:
    weights: list
    act: str
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    best_val: float
    epochs_run: int

    def predict(self, x) -> np.ndarray:
        h = (_as_2d(x) - self.x_mean) / self.x_std
        for i, (W, b) in enumerate(self.weights):
            h = dense(h, W, b)
            if i < len(self.weights) - 1:
                h = activation(h, self.act)
        return h[:, 0] * self.y_std + self.y_mean


def fit_nn_lite(y, x, hyper: dict | None = None) -> NnLiteModel:
    """Feedforward regression net assembled from the encoder's dense layers.

    ``hidden=()`` gives a purely linear map. The last ``val_frac`` of the
    sample drives early stopping.
    """
    h = {"hidden": (16,), "lr": 1e-2, "max_epochs": 500, "patience": 30, "seed": 0,
         "activation": "relu", "val_frac": 0.1, "batch_size": 32}
    h.update(hyper or {})
    y = np.asarray(y, dtype=float)
    X = _as_2d(x)
    n = len(y)
    n_val = max(1, int(round(h["val_frac"] * n))) if h["val_frac"] > 0 else 0
    n_tr = n - n_val
    xm, xs = X[:n_tr].mean(0), X[:n_tr].std(0)
    xs = np.where(xs > 0, xs, 1.0)
    ym = float(y[:n_tr].mean())
    ys = float(y[:n_tr].std()) or 1.0
    Xs, Ys = (X - xm) / xs, (y - ym) / ys
    rng = np.random.default_rng(derive_seed(h["seed"], 0))
    dims = [X.shape[1], *h["hidden"], 1]
    params = {}
    for i in range(len(dims) - 1):
        bound = 1.0 / math.sqrt(dims[i])
        params[f"W{i}"] = rng.uniform(-bound, bound, (dims[i], dims[i + 1]))
        params[f"b{i}"] = np.zeros(dims[i + 1])
    nl = len(dims) - 1
    act = h["activation"]

    def fwd(xb):
        hs, pre = [xb], []
        for i in range(nl):
            z = dense(hs[-1], params[f"W{i}"], params[f"b{i}"])
            pre.append(z)
            hs.append(activation(z, act) if i < nl - 1 else z)
        return hs, pre

    def mse(xb, yb):
        return float(np.mean((fwd(xb)[0][-1][:, 0] - yb) ** 2))

    opt = Adam(params, h["lr"])
    shuffle = np.random.default_rng(derive_seed(h["seed"], 1))
    Xt, Yt = Xs[:n_tr], Ys[:n_tr]
    Xv, Yv = (Xs[n_tr:], Ys[n_tr:]) if n_val else (Xt, Yt)
    best = mse(Xv, Yv)
    best_p = {k: v.copy() for k, v in params.items()}
    bad, epoch = 0, 0
    for epoch in range(1, h["max_epochs"] + 1):
        order = shuffle.permutation(n_tr)
        for s in range(0, n_tr, h["batch_size"]):
            idx = order[s:s + h["batch_size"]]
            hs, pre = fwd(Xt[idx])
            d = 2.0 * (hs[-1][:, 0] - Yt[idx])[:, None] / len(idx)
            grads = {}
            for i in reversed(range(nl)):
                if i < nl - 1:
                    d = d * activation_grad(pre[i], act)
                d, grads[f"W{i}"], grads[f"b{i}"] = dense_backward(d, hs[i], params[f"W{i}"])
            opt.step(params, grads)
        val = mse(Xv, Yv)
        if not np.isfinite(val):
            from .linear import TrainingFailure
            raise TrainingFailure(f"non-finite validation loss in epoch {epoch}")
        if val < best:
            best, bad = val, 0
            best_p = {k: v.copy() for k, v in params.items()}
        else:
            bad += 1
            if bad > h["patience"]:
                break
    weights = [(best_p[f"W{i}"], best_p[f"b{i}"]) for i in range(nl)]
    return NnLiteModel(weights, act, xm, xs, ym, ys, best, epoch)


# -- metrics ---------------------------------------------------------------

@dataclass
class MetricsReport:
    rmse: float
    mae: float
    da: float
    n_obs: int

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "da": self.da, "n_obs": self.n_obs}


def metrics(predictions, actuals) -> MetricsReport:
    """RMSE, MAE and directional accuracy (sign(0) counts as positive)."""
    p = np.asarray(predictions, dtype=float)
    a = np.asarray(actuals, dtype=float)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size < 1:
        raise ValueError("need at least one observation")
    e = p - a
    return MetricsReport(float(np.sqrt(np.mean(e * e))), float(np.mean(np.abs(e))),
                         float(np.mean((p >= 0) == (a >= 0))), int(p.size))


@dataclass
class DmTest:
    statistic: float
    p_value: float
    loss: str
    hac_bandwidth: int
    degenerate: bool = False


def diebold_mariano(errors_a, errors_b, loss: str = "squared", horizon: int = 1) -> DmTest:
    """Equal-accuracy test on ``d_t = L(e_a) - L(e_b)``; negative favours ``a``.

    The long-run variance is Newey-West with bandwidth ``horizon - 1``.
    """
    ea = np.asarray(errors_a, dtype=float)
    eb = np.asarray(errors_b, dtype=float)
    if ea.shape != eb.shape:
        raise ValueError("error series differ in length")
    if ea.size < 10:
        raise ValueError("need at least 10 forecast errors")
    if loss == "squared":
        d = ea * ea - eb * eb
    elif loss == "absolute":
        d = np.abs(ea) - np.abs(eb)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    bw = horizon - 1
    if np.all(d == 0):
        return DmTest(0.0, 1.0, loss, bw, True)
    lrv = float(newey_west_longrun(d, bw)[0, 0])
    if not lrv > 0:
        return DmTest(float("nan"), float("nan"), loss, bw, True)
    stat = float(d.mean() / math.sqrt(lrv / d.size))
    p = float(2 * stats.norm.sf(abs(stat)))
    return DmTest(stat, min(max(p, 0.0), 1.0), loss, bw)


COVID_CUTOFF = (2019, 6)


def _month_index(d) -> int:
    if isinstance(d, str):
        y, m = parse_year_month(d)
        return y * 12 + m - 1
    return int(d)


def subsample_split(dates, cutoff=COVID_CUTOFF) -> dict:
    """Full / pre / post index sets; ``pre`` includes the cutoff month.

    Dates are ``YYYY-MM`` strings or monthly period indices.
    """
    m = np.array([_month_index(d) for d in dates], dtype=np.int64)
    cut = cutoff[0] * 12 + cutoff[1] - 1
    idx = np.arange(len(m))
    return {"full": idx, "pre": idx[m <= cut], "post": idx[m > cut]}
