"""``attnfactor sim|mc|empirical|ablate|heatmaps --config FILE --out DIR [--seed N] [--workers N]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
Verbosity follows the ``ATTNFACTOR_LOG`` environment variable (a logging
level name, default ``WARNING``).
"""

import os

# one BLAS thread per process; parallelism comes from the worker pool
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import contextlib  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass, field, fields, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

if sys.version_info >= (3, 11):
    import tomllib  # noqa: E402
else:
    import tomli as tomllib  # noqa: E402

from . import __version__  # noqa: E402
from .dgp import DgpConfig, derive_seed, simulate  # noqa: E402
from .empirical import (  # noqa: E402
    WINDOW_MONTHS, dm_matrix_csv, load_empirical_panels, metrics_table_csv, predictions_csv,
    run_empirical_target, split_summary,
)
from .encoder import NumericalFailure, attention_records  # noqa: E402
from .experiments import (  # noqa: E402
    ABLATION_LABELS, fit_mpte, orderings, prepare_forecast_data, run_sim_cell, split_points,
    summarize_cells,
)
from .heatmaps import extract_attention_heatmaps, matrix_csv, matrix_svg  # noqa: E402
from .inference import (  # noqa: E402
    McDesign, efficiency_comparison, run_common_component_regimes, run_consistency_study,
    run_factor_normality_study, run_loading_normality_study,
)
from .linear import TrainingFailure  # noqa: E402
from .panels import PanelError  # noqa: E402
from .parallel import parallel_map  # noqa: E402
from .sequence import Ablations  # noqa: E402
from .training import DESK_SPACE, EMPIRICAL_SPACE, SIMULATION_SPACE  # noqa: E402

log = logging.getLogger("attnfactor")

COMMANDS = ("sim", "mc", "empirical", "ablate", "heatmaps")
SPACES = {"desk": DESK_SPACE, "simulation": SIMULATION_SPACE, "empirical": EMPIRICAL_SPACE}
MC_STUDIES = {
    "consistency": run_consistency_study,
    "loading_normality": run_loading_normality_study,
    "factor_normality": run_factor_normality_study,
    "regimes": run_common_component_regimes,
    "efficiency": efficiency_comparison,
}
TRAIN_KEYS = ("batch_size", "max_epochs", "patience", "optimizer", "grad_clip")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# -- configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    """Resolved run settings: the TOML file with command-line overrides applied."""

    command: str
    out: Path
    seed: int
    workers: int = 1
    data: dict = field(default_factory=dict)
    dgp: DgpConfig | None = None
    regimes: tuple = ("linear", "rbf6", "rbf12")
    n_seeds: int = 5
    design: dict = field(default_factory=dict)
    studies: tuple = tuple(MC_STUDIES)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def space(self) -> dict:
        sp = self.model.get("space", "desk")
        if isinstance(sp, str):
            if sp not in SPACES:
                raise ConfigError(f"unknown search space {sp!r}")
            return SPACES[sp]
        return {k: list(v) for k, v in sp.items()}

    def resolved(self) -> dict:
        """Everything that determines the outputs (the worker count does not)."""
        return {"command": self.command, "seed": self.seed, "data": self.data,
                "dgp": None if self.dgp is None else self.dgp.to_dict(), "regimes": list(self.regimes),
                "n_seeds": self.n_seeds, "design": self.design, "studies": list(self.studies),
                "model": self.model, "train": self.train}

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _dgp_from(section: dict) -> DgpConfig:
    names = {f.name for f in fields(DgpConfig)}
    unknown = sorted(set(section) - names)
    if unknown:
        raise ConfigError(f"unknown dgp keys: {unknown}")
    try:
        return DgpConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid dgp section: {exc}") from exc


def load_config(path, command: str, out, seed=None, workers=None, regimes=None) -> RunConfig:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    seed = raw.get("seed") if seed is None else seed
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    workers = int(raw.get("workers", 1) if workers is None else workers)
    if workers < 1:
        raise ConfigError("workers must be positive")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory is not writable: {exc}") from None
    dgp_sec = dict(raw.get("dgp", {}))
    reg = dgp_sec.pop("regimes", ["linear", "rbf6", "rbf12"])
    n_seeds = int(dgp_sec.pop("n_seeds", 5))
    if regimes:
        reg = list(regimes)
    for r in reg:
        if r != "linear" and not (r.startswith("rbf") and r[3:].isdigit()):
            raise ConfigError(f"unknown regime {r!r}")
    dgp = _dgp_from(dgp_sec) if (dgp_sec or command in ("sim",)) else None
    mc = dict(raw.get("mc", {}))
    studies = tuple(mc.pop("studies", list(MC_STUDIES)))
    bad = [s for s in studies if s not in MC_STUDIES]
    if bad:
        raise ConfigError(f"unknown Monte Carlo studies: {bad}")
    model = dict(raw.get("model", {}))
    for lab in model.get("ablations", []):
        try:
            Ablations.from_label(lab)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    train = dict(raw.get("train", {}))
    unknown = sorted(set(train) - set(TRAIN_KEYS))
    if unknown:
        raise ConfigError(f"unknown train keys: {unknown}")
    cfg = RunConfig(command, out, seed, workers, dict(raw.get("data", {})), dgp, tuple(reg), n_seeds,
                    mc, studies, model, train, raw)
    cfg.space  # validates the space name
    if command == "mc" and not mc.get("cells"):
        raise ConfigError("mc needs [mc] cells = [[N_x, N_y, T], ...]")
    if command == "empirical" and "dir" not in cfg.data:
        raise ConfigError("empirical needs [data] dir")
    if command in ("ablate", "heatmaps") and "dir" not in cfg.data and dgp is None:
        raise ConfigError(f"{command} needs either [data] dir or a [dgp] section")
    return cfg


# -- artifacts -------------------------------------------------------------

class Artifacts:
    """Writes text artifacts and remembers their sha256 digests."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.checksums = {}

    def write(self, rel: str, text: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode("utf-8")
        p.write_bytes(data)
        self.checksums[rel] = hashlib.sha256(data).hexdigest()
        return p

    def json(self, rel: str, obj) -> Path:
        return self.write(rel, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")

    def adopt(self, rel: str) -> None:
        """Record a file written by someone else (for example a trial log)."""
        self.checksums[rel] = hashlib.sha256((self.root / rel).read_bytes()).hexdigest()


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def code_version() -> str:
    h = hashlib.sha256()
    src = Path(__file__).parent
    for p in sorted(src.rglob("*.py")) + sorted(src.rglob("*.json")):
        h.update(p.relative_to(src).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(cfg: RunConfig, arts: Artifacts, wall: float) -> Path:
    manifest = {"config_hash": cfg.config_hash(), "code_version": code_version(),
                "wall_time_s": round(wall, 3), "workers": cfg.workers,
                "config": cfg.resolved(), "artifacts": dict(sorted(arts.checksums.items()))}
    p = cfg.out / "run_manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return p


def _rows_csv(rows, keys) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([("%.6g" % r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    return buf.getvalue()


def _rows_markdown(rows, keys, title) -> str:
    lines = [f"## {title}", "", "| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    for r in rows:
        lines.append("| " + " | ".join(("%.4f" % r[k]) if isinstance(r[k], float) else str(r[k])
                                       for k in keys) + " |")
    return "\n".join(lines) + "\n"


def _train_kw(cfg: RunConfig) -> dict:
    return {k: cfg.train[k] for k in TRAIN_KEYS if k in cfg.train}


# -- sim / ablate on simulated data ---------------------------------------

def _sim_task(args):
    dgp, regime, seed, kw = args
    return run_sim_cell(replace(dgp, regime=regime), seed, **kw)


def _sim_cells(cfg: RunConfig, ablations, arts: Artifacts, tag: str):
    m = cfg.model
    kw = {"window": int(m.get("window", 6)), "space": cfg.space, "n_trials": int(m.get("n_trials", 4)),
          "ablations": tuple(ablations), "n_ablation_trials": int(m.get("n_ablation_trials", 2)),
          "train_kw": _train_kw(cfg), "base": m.get("base"), "target": int(m.get("target", 0))}
    seeds = [cfg.seed + i for i in range(cfg.n_seeds)]
    tasks = [(cfg.dgp, reg, s, kw) for reg in cfg.regimes for s in seeds]
    with stage(f"{tag}: simulate and fit"):
        cells = parallel_map(_sim_task, tasks, cfg.workers)
    long_rows = [{"regime": c["regime"], "seed": c["seed"], "model": k, **v}
                 for c in cells for k, v in c["metrics"].items()]
    arts.write(f"{tag}_metrics.csv", _rows_csv(long_rows, ["regime", "seed", "model", "rmse", "mae", "da", "n_obs"]))
    arts.json(f"{tag}_cells.json", cells)
    return cells


def run_sim(cfg: RunConfig, arts: Artifacts) -> None:
    if cfg.dgp is None:
        raise ConfigError("sim needs a [dgp] section")
    labels = cfg.model.get("ablations", list(ABLATION_LABELS))
    arts.json("dgp.json", {"config": cfg.dgp.to_dict(), "regimes": list(cfg.regimes),
                           "seeds": [cfg.seed + i for i in range(cfg.n_seeds)]})
    cells = _sim_cells(cfg, labels, arts, "sim")
    with stage("sim: report"):
        models = ["MPTE", *labels, "AR", "MIDAS"]
        rows = summarize_cells(cells, models)
        keys = ["regime", "model", "rmse", "mae", "da", "rmse_flag", "mae_flag", "da_flag", "n_seeds"]
        arts.write("sim_summary.csv", _rows_csv(rows, keys))
        arts.write("sim_summary.md", _rows_markdown(rows, keys, "Simulation forecasting accuracy (first target)"))
        arts.json("orderings.json", orderings(cells))


# -- empirical -------------------------------------------------------------

def _empirical_panels(cfg: RunConfig):
    d = cfg.data
    with stage("empirical: load data"):
        try:
            return load_empirical_panels(d["dir"], d.get("monthly"), d.get("quarterly"))
        except FileNotFoundError as exc:
            raise PanelError(f"missing data file: {exc.filename}") from None


def _emp_task(args):
    high, low, target, seed, kw = args
    return run_empirical_target(high, low, target, seed, **kw)


def _empirical_runs(cfg: RunConfig, ablations, tag: str):
    high, low = _empirical_panels(cfg)
    targets = cfg.data.get("targets", low.names)
    missing = [t for t in targets if t not in low.names]
    if missing:
        raise PanelError(f"target mnemonics not in the quarterly panel: {missing}")
    m = cfg.model
    kw = {"n_trials": int(m.get("n_trials", 4)), "space": cfg.space if "space" in m else EMPIRICAL_SPACE,
          "window": int(m.get("window", WINDOW_MONTHS)), "train_kw": _train_kw(cfg), "base": m.get("base"),
          "ablations": tuple(ablations), "nn_hyper": m.get("nn")}
    tasks = [(high, low, t, derive_seed(cfg.seed, i), kw) for i, t in enumerate(targets)]
    with stage(f"{tag}: fit targets"):
        runs = parallel_map(_emp_task, tasks, cfg.workers)
    return high, low, runs


def _write_heatmaps(arts: Artifacts, prefix: str, hm, var_labels, window: int) -> None:
    if hm is None or hm.no_attention:
        arts.json(f"{prefix}no_attention.json",
                  {"no_attention_weights": True,
                   "reason": "the selected architecture has no attention layer, so there are no weights to aggregate"})
        return
    lag_labels = [f"lag{i}" for i in range(window)]
    arts.write(f"{prefix}variables.csv", matrix_csv(hm.variable_matrix, var_labels, var_labels))
    arts.write(f"{prefix}variables.svg", matrix_svg(hm.variable_matrix, title="variable attention"))
    arts.write(f"{prefix}lags.csv", matrix_csv(hm.temporal_matrix, lag_labels, lag_labels))
    arts.write(f"{prefix}lags.svg", matrix_svg(hm.temporal_matrix, title="lag attention"))
    arts.json(f"{prefix}metadata.json", hm.metadata)


def run_empirical(cfg: RunConfig, arts: Artifacts) -> None:
    high, low, runs = _empirical_runs(cfg, cfg.model.get("ablations", []), "empirical")
    with stage("empirical: report"):
        sizes = split_summary(low.T)
        arts.json("splits.json", {"n_quarters": low.T, **sizes,
                                  "per_target": {r.target: r.extras for r in runs}})
        arts.write("empirical_metrics.csv", metrics_table_csv(runs))
        arts.write("dm_matrix.csv", dm_matrix_csv(runs))
        arts.json("hyperparameters.json", {r.target: r.mpte_hyper for r in runs})
        names = high.names + low.names
        window = int(cfg.model.get("window", WINDOW_MONTHS))
        for r in runs:
            arts.write(f"predictions/{r.target}.csv", predictions_csv(r))
            _write_heatmaps(arts, f"heatmaps/{r.target}_", r.heatmaps, names, window)
        md = ["# Empirical forecasting accuracy", ""]
        for r in runs:
            rows = [{"model": k, **{f"{s}_{m}": (v[s][m] if v[s] else float("nan"))
                                    for s in ("full", "pre", "post") for m in ("rmse", "mae", "da")}}
                    for k, v in r.metrics.items()]
            md.append(_rows_markdown(rows, list(rows[0]), r.target))
        arts.write("summary.md", "\n".join(md))


# -- ablate ----------------------------------------------------------------

def run_ablate(cfg: RunConfig, arts: Artifacts) -> None:
    labels = list(cfg.model.get("ablations", list(ABLATION_LABELS)))
    keys = ["source", "model", "rmse", "mae", "da"]
    rows = []
    if "dir" in cfg.data:
        _, _, runs = _empirical_runs(cfg, labels, "ablate")
        for r in runs:
            for mname in ["MPTE", *labels]:
                rows.append({"source": r.target, "model": mname, **{k: r.metrics[mname]["full"][k]
                                                                    for k in ("rmse", "mae", "da")}})
    else:
        cells = _sim_cells(cfg, labels, arts, "ablate")
        for s in summarize_cells(cells, ["MPTE", *labels]):
            rows.append({"source": s["regime"], "model": s["model"], "rmse": s["rmse"], "mae": s["mae"],
                         "da": s["da"]})
    arts.write("ablation_metrics.csv", _rows_csv(rows, keys))
    arts.write("ablation_metrics.md", _rows_markdown(rows, keys, "Ablations"))


# -- heatmaps --------------------------------------------------------------

def run_heatmaps(cfg: RunConfig, arts: Artifacts) -> None:
    m = cfg.model
    label = m.get("ablation", "full")
    ab = Ablations.from_label(label)
    if "dir" in cfg.data:
        high, low = _empirical_panels(cfg)
        target = low.names.index(cfg.data.get("targets", low.names)[0])
        window = int(m.get("window", WINDOW_MONTHS))
        space = cfg.space if "space" in m else EMPIRICAL_SPACE
    else:
        with stage("heatmaps: simulate"):
            data = simulate(replace(cfg.dgp, regime=cfg.regimes[0], seed=cfg.seed))
        high, low, target = data.x, data.y, int(m.get("target", 0))
        window = int(m.get("window", 6))
        space = cfg.space
    with stage("heatmaps: fit"):
        train_end, fit_end = split_points(low)
        base = {"te_origin": "window", **(m.get("base") or {})}
        fd = prepare_forecast_data(high, low, target, window, train_end, fit_end, ab, base["te_origin"])
        fit = fit_mpte(fd, space, int(m.get("n_trials", 2)), derive_seed(cfg.seed, 1), _train_kw(cfg), base, label)
    with stage("heatmaps: aggregate"):
        hm = extract_attention_heatmaps(attention_records(fd.test, fit.state), n_vars=fd.n_vars, window=window)
        _write_heatmaps(arts, "heatmap_", hm, high.names + low.names, window)
        arts.json("heatmap_model.json", {"ablation": ab.label, "hyper": fit.hyper, "val_loss": fit.val_loss,
                                         "target": low.names[target]})


# -- Monte Carlo -----------------------------------------------------------

def run_mc(cfg: RunConfig, arts: Artifacts) -> None:
    base = {k: v for k, v in cfg.design.items() if k not in MC_STUDIES}
    md = ["# Monte Carlo studies", ""]
    for name in cfg.studies:
        kw = dict(base, **cfg.design.get(name, {}))
        kw.setdefault("seed", cfg.seed)
        kw["workers"] = cfg.workers
        try:
            design = McDesign(**kw)
        except TypeError as exc:
            raise ConfigError(f"invalid [mc] design for {name}: {exc}") from None
        with stage(f"mc: {name}"):
            res = MC_STUDIES[name](design)
        arts.write(f"mc_{name}.json", res.to_json() + "\n")
        arts.write(f"mc_{name}.csv", res.to_csv())
        md.append(res.to_markdown())
        for f in res.flags:
            log.warning("%s: %s", name, f)
    arts.write("mc_summary.md", "\n".join(md) + "\n")


RUNNERS = {"sim": run_sim, "mc": run_mc, "empirical": run_empirical, "ablate": run_ablate,
           "heatmaps": run_heatmaps}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnfactor", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--workers", type=int, help="worker processes (outputs do not depend on it)")
    p.add_argument("--regime", action="append", help="restrict sim/ablate to this regime (repeatable)")
    return p


def _setup_logging():
    level = getattr(logging, os.environ.get("ATTNFACTOR_LOG", "WARNING").upper(), logging.WARNING)
    log.setLevel(level)
    for h in list(log.handlers):
        if getattr(h, "_attnfactor", False):
            log.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    h._attnfactor = True
    log.addHandler(h)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.command, args.out, args.seed, args.workers, args.regime)
        arts = Artifacts(cfg.out)
        RUNNERS[cfg.command](cfg, arts)
    except StageError as exc:
        cause = exc.cause
        print(f"attnfactor: {exc}", file=sys.stderr)
        if isinstance(cause, (NumericalFailure, TrainingFailure, np.linalg.LinAlgError, FloatingPointError)):
            return 3
        if isinstance(cause, (ConfigError, PanelError, KeyError, ValueError)):
            return 2
        return 1
    except (ConfigError, PanelError) as exc:
        print(f"attnfactor: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, TrainingFailure) as exc:
        print(f"attnfactor: numerical failure: {exc}", file=sys.stderr)
        return 3
    write_manifest(cfg, arts, time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
