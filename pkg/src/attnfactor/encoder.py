"""Transformer encoder with hand-written reverse-mode gradients.

Layout per layer (post-norm): multi-head attention with biases, dropout,
residual, layer norm, position-wise feedforward with activation ``g``,
dropout, residual, layer norm. With attention ablated the first residual
block passes its input through unchanged. The forecast head pools the
final encoding over valid tokens and applies an affine map.

All arrays are batched as ``(B, L, d)`` with a boolean validity mask;
padded keys receive zero attention and padded rows are ignored by pooling.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import erf

from .sequence import Ablations, Batch, TokenSequence, collate, embedding_dim, temporal_encoding

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NumericalFailure(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 16
    n_head: int = 2
    n_layers: int = 1
    d_ff: int = 32
    activation: str = "relu"
    dropout: float = 0.0
    ablations: Ablations = Ablations()
    pooling: str = "mean"
    n_vars: int = 1
    n_freqs: int = 2
    d_var: int | None = None
    d_freq: int | None = None
    norm: bool = True
    te_origin: str = "window"

    def __post_init__(self):
        if isinstance(self.ablations, dict):
            object.__setattr__(self, "ablations", Ablations(**self.ablations))
        elif isinstance(self.ablations, str):
            object.__setattr__(self, "ablations", Ablations.from_label(self.ablations))
        if self.d_var is None:
            object.__setattr__(self, "d_var", embedding_dim(self.n_vars))
        if self.d_freq is None:
            object.__setattr__(self, "d_freq", embedding_dim(self.n_freqs))
        if self.d_model % self.n_head:
            raise ValueError("d_model must be divisible by n_head")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the temporal encoding")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation not in ("relu", "gelu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pooling not in ("mean", "last"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if min(self.n_layers, self.d_ff, self.n_vars, self.n_freqs) < 1:
            raise ValueError("sizes must be positive")

    @property
    def d_in(self) -> int:
        return 1 + self.d_var + self.d_freq

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_head

    @property
    def effective_activation(self) -> str:
        return "identity" if self.ablations.no_nonlinearity else self.activation

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = asdict(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass
class EmbeddingTables:
    var: np.ndarray
    freq: np.ndarray
    W_proj: np.ndarray


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict
    grads: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if not self.grads:
            self.zero_grad()

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def tables(self) -> EmbeddingTables:
        p = self.params
        return EmbeddingTables(p["emb_var"], p["emb_freq"], p["W_proj"])

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "EncoderState":
        return EncoderState(self.config, {k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.grads.items()}, self.rng)


def param_shapes(config: EncoderConfig) -> dict:
    d, f = config.d_model, config.d_ff
    shapes = {"emb_var": (config.n_vars, config.d_var), "emb_freq": (config.n_freqs, config.d_freq),
              "W_proj": (d, config.d_in)}
    for l in range(config.n_layers):
        if not config.ablations.no_attention:
            for m in "qkvo":
                shapes[f"l{l}.W{m}"] = (d, d)
                shapes[f"l{l}.b{m}"] = (d,)
        shapes[f"l{l}.W1"] = (d, f)
        shapes[f"l{l}.b1"] = (f,)
        shapes[f"l{l}.W2"] = (f, d)
        shapes[f"l{l}.b2"] = (d,)
        if config.norm:
            for n in (1, 2):
                if n == 1 and config.ablations.no_attention:
                    continue
                shapes[f"l{l}.ln{n}_g"] = (d,)
                shapes[f"l{l}.ln{n}_b"] = (d,)
    shapes["w_head"] = (d,)
    shapes["b_head"] = ()
    return shapes


def init_state(config: EncoderConfig, seed: int = 0) -> EncoderState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains.

    Embedding rows are one-hot lookups (fan-in 1).
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        base = name.split(".")[-1]
        if base.endswith("_g"):
            params[name] = np.ones(shape)
        elif base.startswith("b") or base.endswith("_b"):
            params[name] = np.zeros(shape)
        elif name.startswith("emb_"):
            params[name] = rng.uniform(-1.0, 1.0, shape)
        else:
            fan_in = shape[1] if name == "W_proj" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, shape)
    return EncoderState(config, params, rng=np.random.default_rng(seed + 1))


# -- primitives ------------------------------------------------------------

def activation(x, kind: str):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x / _SQRT2))
    return x


def activation_grad(x, kind: str):
    if kind == "relu":
        return (x > 0).astype(float)
    if kind == "gelu":
        return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return np.ones_like(x)


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).reshape(-1, dy.shape[-1]).sum(0), dy.reshape(-1, dy.shape[-1]).sum(0)


def dense(x, W, b):
    return x @ W + b


def dense_backward(dy, x, W):
    d_in = x.shape[-1]
    dW = x.reshape(-1, d_in).T @ dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, dW, dy.reshape(-1, dy.shape[-1]).sum(0)


def dropout_mask(rng, shape, p):
    if p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def _check(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite activations in {where}")


# -- embedding -------------------------------------------------------------

def embed_batch(batch: Batch, config: EncoderConfig, params: dict):
    ev = params["emb_var"]
    ef = params["emb_freq"]
    if batch.variable_ids.max(initial=0) >= ev.shape[0] or batch.variable_ids.min(initial=0) < 0:
        raise IndexError("variable id outside the embedding table")
    if batch.frequencies.max(initial=0) >= ef.shape[0] or batch.frequencies.min(initial=0) < 0:
        raise IndexError("frequency id outside the embedding table")
    phi = np.concatenate([batch.values[..., None], ev[batch.variable_ids], ef[batch.frequencies]], axis=-1)
    z = phi @ params["W_proj"].T
    if not config.ablations.no_temporal_encoding:
        z = z + temporal_encoding(batch.positions, config.d_model)
    z = z * batch.mask[..., None]
    return z, phi


def embed_tokens(seq: TokenSequence, tables: EmbeddingTables, config: EncoderConfig,
                 sample_start: int | None = None) -> np.ndarray:
    """``W_proj [r*, e_var, e_freq] (+ TE(t))`` for one sequence, ``L x d_model``."""
    batch = collate([seq], te_origin=config.te_origin, sample_start=sample_start)
    z, _ = embed_batch(batch, config, {"emb_var": tables.var, "emb_freq": tables.freq,
                                       "W_proj": tables.W_proj})
    return z[0]


# -- encoder ---------------------------------------------------------------

@dataclass
class AttentionRecord:
    """Per-layer ``(n_head, L, L)`` weights for one sequence, plus token index maps."""

    weights: list | None
    variable_ids: np.ndarray
    lags: np.ndarray

    def __post_init__(self):
        if self.weights is not None:
            for w in self.weights:
                if w.shape[-1] != len(self.variable_ids) or w.shape[-2] != len(self.variable_ids):
                    raise ValueError("attention matrix does not match the token maps")


def _attention_forward(x, p, l, config, mask, keep):
    B, L, d = x.shape
    H, dh = config.n_head, config.d_head

    def heads(t):
        return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

    q = heads(dense(x, p[f"l{l}.Wq"], p[f"l{l}.bq"]))
    k = heads(dense(x, p[f"l{l}.Wk"], p[f"l{l}.bk"]))
    v = heads(dense(x, p[f"l{l}.Wv"], p[f"l{l}.bv"]))
    s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    s = np.where(mask[:, None, None, :], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    P = e / e.sum(axis=-1, keepdims=True)
    o = (P @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    a = dense(o, p[f"l{l}.Wo"], p[f"l{l}.bo"])
    if keep is not None:
        a = a * keep
    return a, (q, k, v, P, o)


def _attention_backward(da, x, cache, p, l, config, keep, g):
    q, k, v, P, o = cache
    B, L, d = x.shape
    H, dh = config.n_head, config.d_head
    if keep is not None:
        da = da * keep
    do, g[f"l{l}.Wo"], g[f"l{l}.bo"] = dense_backward(da, o, p[f"l{l}.Wo"])
    do = do.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    dP = do @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ do
    ds = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, L, d)

    dx = np.zeros_like(x)
    for m, dt in (("q", dq), ("k", dk), ("v", dv)):
        dxm, g[f"l{l}.W{m}"], g[f"l{l}.b{m}"] = dense_backward(merge(dt), x, p[f"l{l}.W{m}"])
        dx += dxm
    return dx


def encoder_layers_forward(z, config: EncoderConfig, params: dict, mask, mode: str = "eval",
                           rng=None):
    """Run the layer stack; returns the final encoding and the per-layer caches."""
    # overflow shows up as a NumericalFailure naming the layer, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        return _layers_forward(z, config, params, mask, mode, rng)


def _layers_forward(z, config, params, mask, mode, rng):
    p = params
    act = config.effective_activation
    drop = config.dropout if mode == "train" else 0.0
    if drop > 0 and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    x = z
    caches = []
    for l in range(config.n_layers):
        c = {"x": x}
        if config.ablations.no_attention:
            x1 = x
        else:
            keep1 = dropout_mask(rng, x.shape, drop) if drop else None
            a, c["att"] = _attention_forward(x, p, l, config, mask, keep1)
            c["keep1"] = keep1
            r1 = x + a
            if config.norm:
                x1, c["ln1"] = layer_norm(r1, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
            else:
                x1 = r1
            _check(x1, f"layer {l} attention")
        c["x1"] = x1
        h = dense(x1, p[f"l{l}.W1"], p[f"l{l}.b1"])
        gh = activation(h, act)
        f = dense(gh, p[f"l{l}.W2"], p[f"l{l}.b2"])
        keep2 = dropout_mask(rng, f.shape, drop) if drop else None
        if keep2 is not None:
            f = f * keep2
        r2 = x1 + f
        if config.norm:
            x2, c["ln2"] = layer_norm(r2, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])
        else:
            x2 = r2
        _check(x2, f"layer {l} feedforward")
        c.update(h=h, gh=gh, keep2=keep2)
        caches.append(c)
        x = x2
    return x, caches


def encoder_layers_backward(dx, config: EncoderConfig, params: dict, caches, grads: dict):
    p = params
    act = config.effective_activation
    for l in reversed(range(config.n_layers)):
        c = caches[l]
        if config.norm:
            dr2, grads[f"l{l}.ln2_g"], grads[f"l{l}.ln2_b"] = layer_norm_backward(dx, p[f"l{l}.ln2_g"], c["ln2"])
        else:
            dr2 = dx
        df = dr2 if c["keep2"] is None else dr2 * c["keep2"]
        dgh, grads[f"l{l}.W2"], grads[f"l{l}.b2"] = dense_backward(df, c["gh"], p[f"l{l}.W2"])
        dh = dgh * activation_grad(c["h"], act)
        dx1, grads[f"l{l}.W1"], grads[f"l{l}.b1"] = dense_backward(dh, c["x1"], p[f"l{l}.W1"])
        dx1 = dx1 + dr2
        if config.ablations.no_attention:
            dx = dx1
            continue
        if config.norm:
            dr1, grads[f"l{l}.ln1_g"], grads[f"l{l}.ln1_b"] = layer_norm_backward(dx1, p[f"l{l}.ln1_g"], c["ln1"])
        else:
            dr1 = dx1
        dx = dr1 + _attention_backward(dr1, c["x"], c["att"], p, l, config, c["keep1"], grads)
    return dx


def pool(x, mask, pooling: str):
    if pooling == "mean":
        w = mask / mask.sum(axis=1, keepdims=True)
        return np.einsum("bl,bld->bd", w, x), w
    last = mask.sum(axis=1) - 1
    w = np.zeros(mask.shape)
    w[np.arange(mask.shape[0]), last] = 1.0
    return x[np.arange(x.shape[0]), last], w


def forward(batch: Batch, state: EncoderState, mode: str = "eval", rng=None, records: bool = False):
    """Predictions for a batch, plus the caches needed for backprop."""
    cfg, p = state.config, state.params
    z, phi = embed_batch(batch, cfg, p)
    if mode == "train" and rng is None:
        rng = state.rng
    x, caches = encoder_layers_forward(z, cfg, p, batch.mask, mode, rng)
    pooled, w = pool(x, batch.mask, cfg.pooling)
    pred = pooled @ p["w_head"] + p["b_head"]
    cache = {"phi": phi, "caches": caches, "x": x, "pooled": pooled, "w": w}
    if records:
        cache["records"] = _records(batch, caches, cfg)
    return pred, cache


def _records(batch, caches, cfg):
    out = []
    lags = batch.lags if batch.lags is not None else np.zeros_like(batch.variable_ids)
    for b in range(len(batch)):
        n = int(batch.mask[b].sum())
        if cfg.ablations.no_attention:
            w = None
        else:
            w = [c["att"][3][b, :, :n, :n].copy() for c in caches]
        out.append(AttentionRecord(w, batch.variable_ids[b, :n].copy(), lags[b, :n].copy()))
    return out


def backward(dpred, batch: Batch, state: EncoderState, cache) -> dict:
    cfg, p = state.config, state.params
    g = {k: np.zeros_like(v) for k, v in p.items()}
    g["w_head"] = cache["pooled"].T @ dpred
    g["b_head"] = np.asarray(dpred.sum())
    dx = cache["w"][..., None] * (dpred[:, None, None] * p["w_head"])
    dz = encoder_layers_backward(dx, cfg, p, cache["caches"], g)
    dz = dz * batch.mask[..., None]
    phi = cache["phi"]
    d_in = phi.shape[-1]
    g["W_proj"] = dz.reshape(-1, cfg.d_model).T @ phi.reshape(-1, d_in)
    dphi = dz @ p["W_proj"]
    np.add.at(g["emb_var"], batch.variable_ids, dphi[..., 1:1 + cfg.d_var])
    np.add.at(g["emb_freq"], batch.frequencies, dphi[..., 1 + cfg.d_var:])
    return g


def loss_and_gradients(batch: Batch, state: EncoderState, mode: str = "train", rng=None):
    """Mean squared error over the batch and gradients for every parameter."""
    if batch.targets is None or len(batch) == 0:
        raise ValueError("need a nonempty batch with targets")
    pred, cache = forward(batch, state, mode, rng)
    err = pred - batch.targets
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float(np.mean(err ** 2))
    if not np.isfinite(loss):
        raise NumericalFailure("non-finite loss")
    grads = backward(2.0 * err / len(batch), batch, state, cache)
    state.grads = grads
    return loss, grads


def encoder_forward(Z, config: EncoderConfig, state: EncoderState, mode: str = "eval", rng=None):
    """Layer stack on a single ``L x d_model`` input; returns the encoding and its record."""
    Z = np.asarray(Z, dtype=float)
    mask = np.ones((1, Z.shape[0]), dtype=bool)
    if mode == "train" and rng is None:
        rng = state.rng
    x, caches = encoder_layers_forward(Z[None], config, state.params, mask, mode, rng)
    w = None if config.ablations.no_attention else [c["att"][3][0] for c in caches]
    rec = AttentionRecord(w, np.zeros(Z.shape[0], dtype=np.int64), np.zeros(Z.shape[0], dtype=np.int64))
    return x[0], rec


def predict(encoding, head: dict, pooling: str = "mean", mask=None) -> float:
    """Pool a ``L x d`` encoding and apply ``w' pooled + b``."""
    x = np.asarray(encoding, dtype=float)[None]
    m = np.ones(x.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)[None]
    pooled, _ = pool(x, m, pooling)
    return float(pooled[0] @ head["w_head"] + head["b_head"])


def predict_batch(batch: Batch, state: EncoderState, chunk: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(batch), chunk):
        pred, _ = forward(batch.take(np.arange(s, min(len(batch), s + chunk))), state, "eval")
        out.append(pred)
    return np.concatenate(out)


def attention_records(batch: Batch, state: EncoderState, chunk: int = 128) -> list:
    out = []
    for s in range(0, len(batch), chunk):
        _, cache = forward(batch.take(np.arange(s, min(len(batch), s + chunk))), state, "eval",
                           records=True)
        out.extend(cache["records"])
    return out


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(state: EncoderState, path, extra: dict | None = None):
    """JSON header line followed by one CSV block per parameter."""
    names = sorted(state.params)
    header = {"format": "attnfactor-checkpoint-1", "config": state.config.to_dict(),
              "params": {n: list(state.params[n].shape) for n in names},
              "checksum": state.checksum(), "extra": extra or {}}
    lines = [json.dumps(header, sort_keys=True)]
    for n in names:
        arr = np.atleast_2d(state.params[n].reshape(state.params[n].shape[0], -1)
                            if state.params[n].ndim else state.params[n].reshape(1, 1))
        lines.append(f"# {n}")
        lines.extend(",".join(repr(float(v)) for v in row) for row in arr)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> EncoderState:
    with open(path) as fh:
        text = fh.read().splitlines()
    header = json.loads(text[0])
    cfg = header["config"]
    cfg["ablations"] = Ablations(**cfg["ablations"])
    config = EncoderConfig(**cfg)
    params, name, rows = {}, None, []

    def flush():
        if name is not None:
            shape = tuple(header["params"][name])
            params[name] = np.array(rows, dtype=float).reshape(shape)

    for line in text[1:]:
        if line.startswith("# "):
            flush()
            name, rows = line[2:], []
        elif line:
            rows.append([float(v) for v in line.split(",")])
    flush()
    state = EncoderState(config, params)
    if state.checksum() != header["checksum"]:
        raise ValueError("checkpoint checksum mismatch")
    return state
