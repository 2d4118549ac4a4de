"""Training loop, seeded random search and gradient / reduction checks."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dgp import derive_seed
from .encoder import (
    EncoderConfig, EncoderState, NumericalFailure, activation, dense, dense_backward,
    init_state, loss_and_gradients, predict_batch,
)
from .linear import TrainingFailure, fit_attention_pca, subspace_distance
from .sequence import Batch

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float | None = 5.0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("invalid training hyperparameters")


@dataclass
class TrainResult:
    state: EncoderState
    best_val: float
    best_epoch: int
    epochs_run: int
    history: list = field(default_factory=list)


class Adam:
    def __init__(self, params: dict, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = np.asarray(params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))


class Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] = np.asarray(params[k] - self.lr * g)


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}
    return grads


def evaluate_mse(batch: Batch, state: EncoderState) -> float:
    pred = predict_batch(batch, state)
    return float(np.mean((pred - batch.targets) ** 2))


def train(train_batch: Batch, val_batch: Batch, config: EncoderConfig, hyper: TrainHyper,
          state: EncoderState | None = None, log_fn=None) -> TrainResult:
    """Minibatch training with early stopping on validation MSE.

    Training stops once ``patience + 1`` consecutive epochs fail to improve
    on the best validation loss; the best parameters are returned.
    """
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise ValueError("need nonempty train and validation splits")
    state = state or init_state(config, derive_seed(hyper.seed, 0))
    state.rng = np.random.default_rng(derive_seed(hyper.seed, 1))
    shuffle = np.random.default_rng(derive_seed(hyper.seed, 2))
    opt = (Adam if hyper.optimizer == "adam" else Sgd)(state.params, hyper.lr)
    best = evaluate_mse(val_batch, state)
    best_params = {k: v.copy() for k, v in state.params.items()}
    best_epoch, bad, history = 0, 0, []
    n = len(train_batch)
    epoch = 0
    for epoch in range(1, hyper.max_epochs + 1):
        order = shuffle.permutation(n)
        losses = []
        for s in range(0, n, hyper.batch_size):
            mb = train_batch.take(order[s:s + hyper.batch_size])
            try:
                loss, grads = loss_and_gradients(mb, state, "train")
            except NumericalFailure as exc:
                raise TrainingFailure(f"divergence in epoch {epoch}: {exc}") from exc
            opt.step(state.params, _clip(grads, hyper.grad_clip))
            losses.append(loss * len(mb))
        train_loss = sum(losses) / n
        try:
            val = evaluate_mse(val_batch, state)
        except NumericalFailure as exc:
            raise TrainingFailure(f"divergence in epoch {epoch}: {exc}") from exc
        if not (np.isfinite(train_loss) and np.isfinite(val)):
            raise TrainingFailure(f"non-finite loss in epoch {epoch}")
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val}
        history.append(rec)
        if log_fn:
            log_fn(rec)
        if val < best:
            best, best_epoch, bad = val, epoch, 0
            best_params = {k: v.copy() for k, v in state.params.items()}
        else:
            bad += 1
            if bad > hyper.patience:
                break
    state.params = best_params
    state.zero_grad()
    return TrainResult(state, best, best_epoch, epoch, history)


# -- random search ---------------------------------------------------------

SIMULATION_SPACE = {
    "d_model": [16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512],
    "n_head": [1, 2, 4, 8],
    "n_layers": [1, 2, 3, 4],
    "dropout": [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
    "lr": [1e-5, 3e-5, 1e-4, 3e-4, 5e-4, 1e-3],
    "d_freq": [2, 4, 8, 16, 32, 128],
    "d_var": [4, 8, 16, 32, 64, 128],
    "d_ff": [32, 64, 128, 256],
    "activation": ["relu", "gelu"],
}

EMPIRICAL_SPACE = {
    "d_model": [128, 192, 256, 384, 512, 1024],
    "n_head": [1, 2, 4, 8, 16],
    "n_layers": [1, 2, 3],
    "dropout": [0.0, 0.05, 0.1, 0.15],
    "lr": [1e-5, 3e-5, 1e-4, 3e-4, 5e-4],
    "d_ff": [8, 16, 32, 64, 128, 256, 512, 1024],
    "activation": ["relu", "gelu"],
}

ABLATION_SPACE = {"lr": EMPIRICAL_SPACE["lr"], "dropout": EMPIRICAL_SPACE["dropout"]}

# desk-scale space used for the reduced simulation study
DESK_SPACE = {
    "d_model": [16, 32],
    "n_head": [2, 4],
    "n_layers": [1, 2],
    "dropout": [0.0, 0.1],
    "lr": [1e-3, 3e-3],
    "d_ff": [32, 64],
    "activation": ["relu", "gelu"],
}


def sample_trial(space: dict, seed: int, trial: int) -> dict:
    rng = np.random.default_rng(derive_seed(seed, trial))
    out = {}
    for key in sorted(space):
        vals = list(space[key])
        out[key] = vals[int(rng.integers(len(vals)))]
    if "d_model" in out and "n_head" in out:
        # largest admissible head count not above the draw
        h = out["n_head"]
        while out["d_model"] % h:
            h //= 2
        out["n_head"] = max(h, 1)
    return out


@dataclass
class SearchResult:
    best: dict
    best_loss: float
    trials: list
    best_payload: object = None


def random_search(space: dict, n_trials: int, seed: int, objective, log_path=None) -> SearchResult:
    """Seeded uniform draws from ``space``; ``objective(hyper, trial_seed)`` returns
    the validation loss (or ``(loss, payload)``). Failed trials score ``inf``."""
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    trials, best, best_loss, payload = [], None, math.inf, None
    fh = open(log_path, "w") if log_path else None
    try:
        for i in range(n_trials):
            hyper = sample_trial(space, seed, i)
            tseed = derive_seed(seed, 10_000 + i)
            try:
                res = objective(hyper, tseed)
                loss, pl = res if isinstance(res, tuple) else (res, None)
                status = "ok"
            except (TrainingFailure, NumericalFailure) as exc:
                loss, pl, status = math.inf, None, f"failed: {exc}"
            rec = {"trial": i, "seed": tseed, "hyper": hyper, "val_loss": loss, "status": status}
            trials.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True, default=float) + "\n")
            if loss < best_loss or best is None:
                best, best_loss, payload = hyper, loss, pl
    finally:
        if fh:
            fh.close()
    return SearchResult(best, best_loss, trials, payload)


# -- finite-difference check -----------------------------------------------

def _relu_pattern(batch, state, rng_seed):
    from .encoder import embed_batch, encoder_layers_forward
    cfg = state.config
    if cfg.effective_activation != "relu":
        return None
    z, _ = embed_batch(batch, cfg, state.params)
    rng = np.random.default_rng(rng_seed)
    _, caches = encoder_layers_forward(z, cfg, state.params, batch.mask, "train", rng)
    return [c["h"] > 0 for c in caches]


def gradient_check(batch: Batch, state: EncoderState, n_params: int = 200, eps: float = 1e-5,
                   seed: int = 0, dropout_seed: int = 7) -> dict:
    """Central finite differences on randomly sampled scalar parameters.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``. Samples whose
    perturbation flips a ReLU gate are redrawn, since the loss is not
    differentiable there. Key biases have an identically zero gradient
    (softmax is shift invariant per row); they are checked in absolute terms
    and excluded from the relative sample.
    """
    rng = np.random.default_rng(seed)

    def loss_at():
        return loss_and_gradients(batch, state, "train", np.random.default_rng(dropout_seed))[0]

    _, g = loss_and_gradients(batch, state, "train", np.random.default_rng(dropout_seed))
    g = {k: v.copy() for k, v in g.items()}
    key_bias = [k for k in g if k.endswith(".bk")]
    key_bias_max = max((float(np.abs(g[k]).max()) for k in key_bias), default=0.0)
    names = [k for k in state.params if k not in key_bias and state.params[k].size]
    sizes = np.array([state.params[k].size for k in names], dtype=float)
    base_pattern = _relu_pattern(batch, state, dropout_seed)
    errs, skipped, rows = [], 0, []
    attempts = 0
    while len(errs) < n_params:
        attempts += 1
        if attempts > 50 * n_params:
            raise RuntimeError("too many non-differentiable samples")
        k = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        a = state.params[k]
        idx = tuple(int(i) for i in np.unravel_index(int(rng.integers(a.size)), a.shape)) if a.ndim else ()
        old = float(a[idx])
        vals = []
        flipped = False
        for sgn in (1.0, -1.0):
            a[idx] = old + sgn * eps
            if base_pattern is not None:
                pat = _relu_pattern(batch, state, dropout_seed)
                flipped |= any(np.any(p != q) for p, q in zip(pat, base_pattern))
            vals.append(loss_at())
        a[idx] = old
        if flipped:
            skipped += 1
            continue
        num = (vals[0] - vals[1]) / (2 * eps)
        an = float(g[k][idx])
        err = abs(num - an) / max(abs(num), abs(an), 1e-6)
        errs.append(err)
        rows.append((k, idx, an, num, err))
    loss_and_gradients(batch, state, "train", np.random.default_rng(dropout_seed))
    return {"max_rel_error": float(max(errs)), "n_checked": len(errs), "n_skipped_kinks": skipped,
            "key_bias_abs_grad": key_bias_max, "worst": max(rows, key=lambda r: r[-1])}


# -- linear reduction ------------------------------------------------------

@dataclass
class ReductionResult:
    angle: float
    W1: np.ndarray
    W2: np.ndarray
    loss_history: list


def linear_reduction_check(z_tilde, k: int, init: str = "random", seed: int = 0, lr: float | None = None,
                           max_iter: int = 50_000, tol: float = 1e-12) -> ReductionResult:
    """Train the encoder's feedforward sublayer as a width-``k`` linear autoencoder.

    The sublayer runs with identity activation, no normalization and no
    dropout: ``Z_hat = (Z W1 + b1) W2 + b2``. Returns the largest principal
    angle (radians) between ``span(W2')`` and the top-``k`` PCA subspace of
    the column-centered input.
    """
    z = np.asarray(z_tilde, dtype=float)
    T, N = z.shape
    if not 1 <= k <= min(T, N):
        raise ValueError("k out of range")
    mu = z.mean(axis=0)
    pca = fit_attention_pca(z - mu, k)
    if init == "closed_form":
        W1, W2 = pca.Q.copy(), pca.Q.T.copy()
        b1 = -mu @ W1
        b2 = mu.copy()
        hist = []
    else:
        rng = np.random.default_rng(seed)
        W1 = rng.uniform(-1, 1, (N, k)) / math.sqrt(N)
        W2 = rng.uniform(-1, 1, (k, N)) / math.sqrt(k)
        b1, b2 = np.zeros(k), np.zeros(N)
        if lr is None:
            lr = 0.25 / np.linalg.eigvalsh(z.T @ z / T)[-1]
        hist = []
        prev = math.inf
        for it in range(max_iter):
            h = dense(z, W1, b1)
            out = dense(activation(h, "identity"), W2, b2)
            r = out - z
            loss = float(np.mean(np.sum(r * r, axis=1)))
            if not np.isfinite(loss):
                raise TrainingFailure(f"non-finite loss at iteration {it}")
            hist.append(loss)
            if abs(prev - loss) <= tol * max(loss, 1e-300):
                break
            prev = loss
            d_out = 2.0 * r / T
            dh, gW2, gb2 = dense_backward(d_out, h, W2)
            _, gW1, gb1 = dense_backward(dh, z, W1)
            W1 -= lr * gW1
            b1 -= lr * gb1
            W2 -= lr * gW2
            b2 -= lr * gb2
    angle = subspace_distance(W2.T, pca.Q)
    return ReductionResult(float(angle), W1, W2, hist)
