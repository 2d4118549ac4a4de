"""Empirical pipeline: monthly/quarterly CSVs in, per-target forecasts and reports out."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .benchmarks import (
    SingularDesignError, diebold_mariano, fit_midas_unrestricted, fit_nn_lite, fit_ols, metrics,
    subsample_split,
)
from .dgp import derive_seed, split_sizes
from .encoder import attention_records
from .experiments import (
    ar_benchmark, fit_mpte, midas_benchmark, prepare_forecast_data, split_points,
)
from .heatmaps import extract_attention_heatmaps
from .panels import (
    HIGH, LOW, Panel, PanelError, SeriesMeta, collapse_to_low_frequency, format_period, load_csv,
    load_manifest,
)
from .sequence import Ablations, low_close_index
from .training import EMPIRICAL_SPACE

log = logging.getLogger(__name__)

WINDOW_MONTHS = 24
BENCHMARKS = ("MIDAS", "AR", "OLS", "NN")
SUBSAMPLES = ("full", "pre", "post")


def _read_header(path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        try:
            header = next(csv.reader(fh))
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
    return [h.strip() for h in header[1:]]


def _load_block(path, kind: str, names, first_id: int) -> Panel:
    """Load the requested manifest columns of one CSV, in the requested order."""
    entries = {e["mnemonic"]: e for e in load_manifest()[kind]}
    header = _read_header(path)
    names = list(entries) if names is None else list(names)
    unknown = [n for n in names if n not in entries]
    if unknown:
        raise PanelError(f"mnemonics not in the {kind} manifest: {unknown}")
    missing = [n for n in names if n not in header]
    if missing:
        raise PanelError(f"{path}: missing {kind} series {missing}")
    freq = HIGH if kind == "monthly" else LOW
    schema = {c: SeriesMeta(10_000 + i, c, freq, entries.get(c, {}).get("category", ""))
              for i, c in enumerate(header)}
    panel = load_csv(path, schema, 1 if kind == "monthly" else 3)
    cols = [header.index(n) for n in names]
    meta = tuple(SeriesMeta(first_id + i, n, freq, schema[n].category) for i, n in enumerate(names))
    return Panel(panel.values[:, cols], panel.timestamps, meta, panel.mask[:, cols], freq,
                 panel.period_months)


def load_empirical_panels(data_dir, monthly=None, quarterly=None) -> tuple[Panel, Panel]:
    """Read ``monthly.csv`` and ``quarterly.csv`` and put them on a common clock.

    The quarterly panel is trimmed to quarters whose three months are all
    inside the monthly sample, and the monthly panel to those quarters.
    """
    d = Path(data_dir)
    high = _load_block(d / "monthly.csv", "monthly", monthly, 0)
    low = _load_block(d / "quarterly.csv", "quarterly", quarterly, high.N)
    if np.any(np.diff(high.timestamps) != 1) or np.any(np.diff(low.timestamps) != 1):
        raise PanelError("empirical panels must have consecutive periods (use blanks for gaps)")
    first_q = max(int(low.timestamps[0]), -(-int(high.timestamps[0]) // 3))
    last_q = min(int(low.timestamps[-1]), (int(high.timestamps[-1]) + 1) // 3 - 1)
    if last_q - first_q + 1 < 20:
        raise PanelError("monthly and quarterly samples overlap in fewer than 20 quarters")
    low = low.rows(np.flatnonzero((low.timestamps >= first_q) & (low.timestamps <= last_q)))
    high = high.rows(np.flatnonzero((high.timestamps >= 3 * first_q) & (high.timestamps <= 3 * last_q + 2)))
    return high, low


def split_summary(n_quarters: int) -> dict:
    a, b, c = split_sizes(n_quarters)
    return {"train": a, "validation": b, "test": c}


def _quarterly_design(high: Panel, low: Panel) -> np.ndarray:
    """Quarter-end monthly values next to the quarterly panel, one row per quarter."""
    hq = collapse_to_low_frequency(high, low.period_months, "last")
    idx = np.searchsorted(hq.timestamps, low.timestamps)
    return np.column_stack([hq.values[idx], low.values])


@dataclass
class TargetRun:
    target: str
    dates: list
    actual: np.ndarray
    predictions: dict
    metrics: dict
    mpte_hyper: dict
    heatmaps: object = None
    extras: dict = field(default_factory=dict)


def run_empirical_target(high: Panel, low: Panel, target: str, seed: int, n_trials: int = 4,
                         space: dict | None = None, window: int = WINDOW_MONTHS, train_kw=None,
                         base=None, ablations=(), nn_hyper=None) -> TargetRun:
    """Fit MPTE (plus optional ablations) and the benchmarks for one quarterly target."""
    j = low.names.index(target)
    space = space or EMPIRICAL_SPACE
    base = {"te_origin": "window", **(base or {})}
    train_end, fit_end = split_points(low)
    fd = prepare_forecast_data(high, low, j, window, train_end, fit_end, te_origin=base["te_origin"])
    if fd.train is None or fd.val is None or fd.test is None:
        raise PanelError(f"{target}: sample too short for the train/validation/test split")
    rows = fd.test_rows
    actual = fd.test_actual
    preds = {}
    full = fit_mpte(fd, space, n_trials, derive_seed(seed, 1), train_kw, base, "MPTE")
    preds["MPTE"] = full.predictions
    arch = {k: v for k, v in full.hyper.items() if k not in ("lr", "dropout")}
    sub = {k: space[k] for k in ("lr", "dropout") if k in space}
    for i, lab in enumerate(ablations):
        fda = prepare_forecast_data(high, low, j, window, train_end, fit_end, Ablations.from_label(lab),
                                    base["te_origin"])
        preds[lab] = fit_mpte(fda, sub, max(1, n_trials // 2), derive_seed(seed, 2, i), train_kw,
                              arch, lab).predictions
    preds["MIDAS"] = midas_benchmark(high, low, j, fit_end, rows)
    preds["AR"] = ar_benchmark(low, j, fit_end, rows)
    Z = _quarterly_design(high, low)
    y = low.values[:, j]
    n_fit = int(np.sum(low_close_index(low) <= fit_end))
    fit_rows = np.arange(1, n_fit)
    flags = []
    try:
        ols = fit_ols(y[fit_rows], Z[fit_rows - 1])
        preds["OLS"] = ols.predict(Z[rows - 1])
    except SingularDesignError:
        # same regression through the MIDAS path, which allows a minimum-norm solution
        m = fit_midas_unrestricted(y[fit_rows], Z[fit_rows - 1], 1, 1)
        preds["OLS"] = m.intercept + Z[rows - 1] @ m.coefs
        flags.append("OLS design rank deficient; minimum-norm least squares used")
    ok = np.isfinite(y[fit_rows]) & np.all(np.isfinite(Z[fit_rows - 1]), axis=1)
    nn = fit_nn_lite(y[fit_rows][ok], Z[fit_rows - 1][ok], {"seed": derive_seed(seed, 3), **(nn_hyper or {})})
    preds["NN"] = nn.predict(Z[rows - 1])
    months = low_close_index(low)[rows]
    split = subsample_split(months)
    table = {}
    for model, p in preds.items():
        table[model] = {s: (metrics(p[idx], actual[idx]).to_dict() if idx.size else None)
                        for s, idx in split.items()}
    hm = None
    if full.state is not None:
        hm = extract_attention_heatmaps(attention_records(fd.test, full.state),
                                        n_vars=fd.n_vars, window=window)
    dates = [format_period(t, low.period_months) for t in low.timestamps[rows]]
    return TargetRun(target, dates, actual, preds, table, full.hyper, hm,
                     {"n_train": int(len(fd.train)), "n_val": int(len(fd.val)), "n_test": int(len(actual)),
                      "flags": flags})


def metrics_table_csv(runs, models=None) -> str:
    """Long table: target x model with rmse/mae/da for each subsample."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "model"] + [f"{s}_{m}" for s in SUBSAMPLES for m in ("rmse", "mae", "da")]
               + ["n_full", "n_pre", "n_post"])
    for run in runs:
        for model in models or run.metrics:
            if model not in run.metrics:
                continue
            cells, counts = [], []
            for s in SUBSAMPLES:
                rep = run.metrics[model][s]
                cells += ["" if rep is None else "%.6g" % rep[k] for k in ("rmse", "mae", "da")]
                counts.append(0 if rep is None else rep["n_obs"])
            w.writerow([run.target, model] + cells + counts)
    return buf.getvalue()


def dm_matrix_csv(runs, benchmarks=BENCHMARKS, loss: str = "squared") -> str:
    """DM statistic (negative favours MPTE) and p-value of MPTE against each benchmark."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target"] + [f"{b}_{k}" for b in benchmarks for k in ("stat", "p")])
    for run in runs:
        e0 = run.predictions["MPTE"] - run.actual
        row = [run.target]
        for b in benchmarks:
            eb = run.predictions[b] - run.actual
            ok = np.isfinite(e0) & np.isfinite(eb)
            if ok.sum() < 10:
                row += ["", ""]
                continue
            dm = diebold_mariano(e0[ok], eb[ok], loss)
            row += ["%.6g" % dm.statistic, "%.6g" % dm.p_value]
        w.writerow(row)
    return buf.getvalue()


def predictions_csv(run: TargetRun) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    models = list(run.predictions)
    w.writerow(["date", "actual"] + models)
    for i, d in enumerate(run.dates):
        w.writerow([d, "%.12g" % run.actual[i]] + ["%.12g" % run.predictions[m][i] for m in models])
    return buf.getvalue()


def write_synthetic_fixture(directory, n_quarters: int = 80, start_year: int = 1990, seed: int = 0,
                            monthly=None, quarterly=None) -> tuple[Path, Path]:
    """FRED-shaped ``monthly.csv``/``quarterly.csv`` from a small factor model.

    Useful for smoke runs and tests; the series are stationary growth-rate
    lookalikes, not real data.
    """
    man = load_manifest()
    mnames = [e["mnemonic"] for e in man["monthly"]] if monthly is None else list(monthly)
    qnames = [e["mnemonic"] for e in man["quarterly"]] if quarterly is None else list(quarterly)
    rng = np.random.default_rng(seed)
    T = 3 * n_quarters
    f = np.zeros((T + 50, 2))
    for t in range(1, T + 50):
        f[t] = 0.8 * f[t - 1] + rng.normal(scale=0.6, size=2)
    f = f[50:]
    xm = f @ rng.normal(size=(2, len(mnames))) + 0.5 * rng.normal(size=(T, len(mnames)))
    g = np.tanh(f[2::3]) + 0.2 * f[2::3] ** 2
    lead = np.vstack([g[1:], g[-1:]])
    yq = 0.01 * (lead @ rng.normal(size=(2, len(qnames))) + 0.5 * rng.normal(size=(n_quarters, len(qnames))))
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m0 = start_year * 12
    paths = []
    for name, cols, vals, step in (("monthly.csv", mnames, xm, 1), ("quarterly.csv", qnames, yq, 3)):
        p = d / name
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date"] + cols)
            for t in range(vals.shape[0]):
                m = m0 + step * t + step - 1
                w.writerow([f"{m // 12:04d}-{m % 12 + 1:02d}"] + ["%.8g" % v for v in vals[t]])
        paths.append(p)
    return paths[0], paths[1]
