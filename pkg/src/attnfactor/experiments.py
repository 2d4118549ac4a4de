"""Forecasting workflows shared by the simulation, ablation and empirical commands."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .benchmarks import fit_ar_bic, fit_midas_unrestricted, forecast_ar, metrics
from .dgp import DgpConfig, derive_seed, simulate, split_sizes
from .encoder import EncoderConfig, predict_batch
from .linear import TrainingFailure
from .panels import Panel, standardize_apply, standardize_fit
from .sequence import Ablations, collate, forecast_dataset, low_close_index
from .training import DESK_SPACE, TrainHyper, random_search, train

log = logging.getLogger(__name__)

ABLATION_LABELS = ("AB1", "AB2", "AB3", "AB4", "AB5")


@dataclass
class ForecastData:
    train: object
    val: object
    test: object
    target: int
    y_mean: float
    y_std: float
    test_rows: np.ndarray
    test_actual: np.ndarray
    n_vars: int
    ablations: Ablations

    def to_raw(self, pred_std):
        return np.asarray(pred_std) * self.y_std + self.y_mean


def split_points(low: Panel, n_low: int | None = None) -> tuple[int, int]:
    """High-frequency timestamps closing the training and estimation samples.

    The low-frequency sample is split 80/20 with the last tenth of the
    estimation part held out for validation; a low row belongs to the split
    in which its target period closes.
    """
    T = low.T if n_low is None else n_low
    a, b, _ = split_sizes(T)
    close = low_close_index(low)
    return int(close[a - 1]), int(close[a + b - 1])


def prepare_forecast_data(high: Panel | None, low: Panel, target: int, window: int,
                          train_end: int, fit_end: int, ablations: Ablations | None = None,
                          te_origin: str = "window", horizon: int = 1) -> ForecastData:
    """Standardize with estimation-sample moments and build the three batches."""
    ab = ablations or Ablations()
    low_s = standardize_apply(low, standardize_fit(low, (fit_end + 1) // low.period_months - 1))
    high_s = None
    if high is not None:
        high_s = standardize_apply(high, standardize_fit(high, fit_end))
    name = low.meta[target].name
    st = standardize_fit(low, (fit_end + 1) // low.period_months - 1)
    seqs, ys, rows = forecast_dataset(high_s, low_s, target, window, horizon, ab)
    sample_start = int(high.timestamps[0]) if high is not None else int(low_close_index(low)[0])
    close = low_close_index(low)[rows]
    parts = {}
    for key, sel in (("train", close <= train_end), ("val", (close > train_end) & (close <= fit_end)),
                     ("test", close > fit_end)):
        idx = np.nonzero(sel)[0]
        parts[key] = (collate([seqs[i] for i in idx], ys[idx], te_origin, sample_start) if idx.size else None, idx)
    test_idx = parts["test"][1]
    n_high = high.N if high is not None else 0
    return ForecastData(parts["train"][0], parts["val"][0], parts["test"][0], target,
                        st.mean[name], st.std[name], rows[test_idx],
                        low.values[rows[test_idx], target], n_high + low.N, ab)


def encoder_config(hyper: dict, n_vars: int, ablations: Ablations, base: dict | None = None) -> EncoderConfig:
    keys = ("d_model", "n_head", "n_layers", "d_ff", "activation", "dropout", "d_var", "d_freq",
            "pooling", "te_origin", "norm")
    kw = dict(base or {})
    kw.update({k: hyper[k] for k in keys if k in hyper})
    return EncoderConfig(n_vars=n_vars, n_freqs=2, ablations=ablations, **kw)


@dataclass
class MpteFit:
    label: str
    hyper: dict
    val_loss: float
    predictions: np.ndarray
    state: object = None
    trials: list = field(default_factory=list)


def fit_mpte(fd: ForecastData, space: dict, n_trials: int, seed: int, train_kw: dict | None = None,
             base: dict | None = None, label: str = "MPTE", log_path=None) -> MpteFit:
    """Random search over ``space``; every trial trains to early stopping."""
    tk = {"batch_size": 32, "max_epochs": 30, "patience": 8, "optimizer": "adam"}
    tk.update(train_kw or {})

    def objective(hyper, tseed):
        cfg = encoder_config(hyper, fd.n_vars, fd.ablations, base)
        th = TrainHyper(lr=hyper.get("lr", 1e-3), seed=tseed, **tk)
        res = train(fd.train, fd.val, cfg, th)
        return res.best_val, res.state

    sr = random_search(space, n_trials, seed, objective, log_path)
    state = sr.best_payload
    if state is None:
        raise TrainingFailure(f"{label}: all {n_trials} search trials failed; last: {sr.trials[-1]['status']}")
    pred = fd.to_raw(predict_batch(fd.test, state))
    return MpteFit(label, dict(base or {}, **sr.best), sr.best_loss, pred, state, sr.trials)


def ar_benchmark(low: Panel, target: int, fit_end: int, test_rows, p_max: int = 4) -> np.ndarray:
    y = low.values[:, target]
    close = low_close_index(low)
    n_fit = int(np.sum(close <= fit_end))
    model = fit_ar_bic(y[:n_fit], p_max)
    return np.array([forecast_ar(model, y[:t], 1) for t in test_rows])


def midas_benchmark(high: Panel, low: Panel, target: int, fit_end: int, test_rows,
                    lags: int = 4, low_regressors: str = "all") -> np.ndarray:
    """Unrestricted MIDAS forecast of ``y_{t'+1}`` from high-frequency lags closing at ``t'``.

    The high panel must start at the first period of the low panel's first
    block. ``low_regressors`` adds the quarter-``t'`` values of every
    low-frequency series (``"all"``), of the target only (``"own"``) or
    nothing (``"none"``).
    """
    r = low.period_months
    if int(high.timestamps[0]) != int(low_close_index(low)[0]) - r + 1:
        raise ValueError("high and low panels are not on a common clock")
    y = low.values[:, target]
    close = low_close_index(low)
    n_fit = int(np.sum(close <= fit_end))
    if low_regressors == "all":
        lagged = low.values
    elif low_regressors == "own":
        lagged = y[:, None]
    elif low_regressors == "none":
        lagged = None
    else:
        raise ValueError(f"unknown low_regressors {low_regressors!r}")
    extra = None if lagged is None else np.vstack([np.full((1, lagged.shape[1]), np.nan), lagged[:-1]])
    rows = np.arange(1, n_fit)
    model = fit_midas_unrestricted(y, high.values, r, lags, horizon=1, extra=extra, rows=rows)
    return model.predict(high.values, np.asarray(test_rows), None if extra is None else extra[test_rows])


def _simulation_runs(dgp: DgpConfig, seed: int):
    cfg = replace(dgp, seed=seed)
    return simulate(cfg)


def run_sim_cell(dgp: DgpConfig, seed: int, window: int = 6, space: dict | None = None,
                 n_trials: int = 4, ablations=ABLATION_LABELS, n_ablation_trials: int = 2,
                 train_kw: dict | None = None, base: dict | None = None, target: int = 0,
                 log_dir=None) -> dict:
    """One regime and seed: MPTE, its ablations, AR and MIDAS on the first target.

    Ablations keep the full model's architecture and redraw only the
    learning rate and dropout rate.
    """
    space = space or DESK_SPACE
    base = {"te_origin": "window", **(base or {})}
    data = _simulation_runs(dgp, seed)
    high, low = data.x, data.y
    train_end, fit_end = split_points(low)
    rows = {}
    preds = {}
    fd = prepare_forecast_data(high, low, target, window, train_end, fit_end, te_origin=base["te_origin"])
    actual = fd.test_actual
    lp = None if log_dir is None else f"{log_dir}/trials_{dgp.regime_label}_{seed}_MPTE.jsonl"
    full = fit_mpte(fd, space, n_trials, derive_seed(seed, 1), train_kw, base, "MPTE", lp)
    preds["MPTE"] = full.predictions
    arch = {k: v for k, v in full.hyper.items() if k not in ("lr", "dropout")}
    sub = {k: space[k] for k in ("lr", "dropout") if k in space}
    for i, lab in enumerate(ablations):
        ab = Ablations.from_label(lab)
        fda = prepare_forecast_data(high, low, target, window, train_end, fit_end, ab, base["te_origin"])
        lp = None if log_dir is None else f"{log_dir}/trials_{dgp.regime_label}_{seed}_{lab}.jsonl"
        preds[lab] = fit_mpte(fda, sub, n_ablation_trials, derive_seed(seed, 2, i), train_kw, arch, lab, lp).predictions
    preds["AR"] = ar_benchmark(low, target, fit_end, fd.test_rows)
    preds["MIDAS"] = midas_benchmark(high, low, target, fit_end, fd.test_rows)
    for k, p in preds.items():
        rows[k] = metrics(p, actual).to_dict()
    return {"regime": dgp.regime_label, "seed": seed, "metrics": rows, "mpte_hyper": full.hyper,
            "n_test": int(len(actual))}


def _rank_flags(values: dict, higher_better: bool) -> dict:
    order = sorted(values, key=lambda k: (-values[k] if higher_better else values[k], k))
    flags = {k: "" for k in values}
    if order:
        flags[order[0]] = "best"
    if len(order) > 1:
        flags[order[1]] = "second"
    return flags


def summarize_cells(cells, models=None) -> list[dict]:
    """Seed-averaged metrics per regime and model with best/second-best flags per metric."""
    by_regime = {}
    for c in cells:
        by_regime.setdefault(c["regime"], []).append(c)
    rows = []
    for regime, group in by_regime.items():
        names = [m for m in (models or group[0]["metrics"]) if m in group[0]["metrics"]]
        means = {m: {k: float(np.mean([g["metrics"][m][k] for g in group])) for k in ("rmse", "mae", "da")}
                 for m in names}
        flags = {k: _rank_flags({m: means[m][k] for m in names}, k == "da") for k in ("rmse", "mae", "da")}
        for m in names:
            rows.append({"regime": regime, "model": m, **means[m], "n_seeds": len(group),
                         **{f"{k}_flag": flags[k][m] for k in ("rmse", "mae", "da")}})
    return rows


def orderings(cells) -> dict:
    """Per-seed RMSE comparisons used by the directional checks."""
    out = {}
    for c in cells:
        m = c["metrics"]
        r = out.setdefault(c["regime"], {"n": 0, "mpte_lt_ar": 0, "mpte_lt_midas": 0, "midas_le_mpte": 0,
                                         "mpte_lt_ab5": 0})
        r["n"] += 1
        r["mpte_lt_ar"] += int(m["MPTE"]["rmse"] < m["AR"]["rmse"])
        r["mpte_lt_midas"] += int(m["MPTE"]["rmse"] < m["MIDAS"]["rmse"])
        r["midas_le_mpte"] += int(m["MIDAS"]["rmse"] <= m["MPTE"]["rmse"])
        if "AB5" in m:
            r["mpte_lt_ab5"] += int(m["MPTE"]["rmse"] < m["AB5"]["rmse"])
    return out
