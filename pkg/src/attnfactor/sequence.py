"""Mixed-frequency token sequences and sinusoidal temporal encoding.

Every unmasked observation inside a context window becomes one token
``(variable, timestamp, frequency, value)``. Timestamps are expressed in
high-frequency periods; a low-frequency observation is stamped with the
last high-frequency period of its block (quarter ``q`` closes at month
``r (q + 1) - 1`` on the shared year-0 clock).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .panels import HIGH, Panel

FREQ_HIGH = 0
FREQ_LOW = 1


class EmptySequenceError(ValueError):
    pass


@dataclass(frozen=True)
class Ablations:
    """AB1 no_nonlinearity, AB2 no_attention, AB4 no_temporal_encoding,
    AB5 low_freq_only. AB3 is AB1 and AB2 together."""

    no_nonlinearity: bool = False
    no_attention: bool = False
    no_temporal_encoding: bool = False
    low_freq_only: bool = False

    @classmethod
    def from_label(cls, label: str) -> "Ablations":
        """``full``, ``AB1`` .. ``AB5`` or a ``+``-joined combination."""
        flags = {}
        for part in label.replace(" ", "").split("+"):
            part = part.upper()
            if part in ("", "FULL", "MPTE"):
                continue
            if part == "AB3":
                flags.update(no_nonlinearity=True, no_attention=True)
            elif part in _LABELS:
                flags[_LABELS[part]] = True
            else:
                raise ValueError(f"unknown ablation {part!r}")
        return cls(**flags)

    @property
    def label(self) -> str:
        parts = [k for k, v in _LABELS.items() if getattr(self, v)]
        if self.no_nonlinearity and self.no_attention:
            parts = ["AB3"] + [p for p in parts if p not in ("AB1", "AB2")]
        return "+".join(parts) or "full"


_LABELS = {"AB1": "no_nonlinearity", "AB2": "no_attention",
           "AB4": "no_temporal_encoding", "AB5": "low_freq_only"}


@dataclass(frozen=True)
class Token:
    position: int
    variable_id: int
    timestamp: int
    frequency: int
    value: float


@dataclass
class TokenSequence:
    """Tokens in array form, sorted by timestamp with a fixed tie order."""

    values: np.ndarray
    variable_ids: np.ndarray
    frequencies: np.ndarray
    timestamps: np.ndarray
    start: int
    end: int
    target: tuple = (None, 0)

    def __post_init__(self):
        if len(self.values) < 1:
            raise EmptySequenceError("sequence has no tokens")
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("tokens must be sorted by timestamp")
        if self.timestamps[0] < self.start or self.timestamps[-1] > self.end:
            raise ValueError("token outside the context window")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def tokens(self) -> list[Token]:
        return [Token(i, int(v), int(t), int(f), float(x)) for i, (v, t, f, x) in
                enumerate(zip(self.variable_ids, self.timestamps, self.frequencies, self.values))]

    @property
    def lags(self) -> np.ndarray:
        """High-frequency periods before the window end (0 = most recent)."""
        return self.end - self.timestamps

    def te_positions(self, origin: str = "window", sample_start: int | None = None) -> np.ndarray:
        if origin == "window":
            return self.timestamps - self.start
        if origin == "sample":
            if sample_start is None:
                raise ValueError("sample origin needs sample_start")
            return self.timestamps - sample_start
        raise ValueError(f"unknown TE origin {origin!r}")


def low_close_index(low: Panel) -> np.ndarray:
    """High-frequency timestamp at which each low-frequency row closes."""
    r = low.period_months
    return (low.timestamps + 1) * r - 1


def build_sequence(high: Panel | None, low: Panel, window_periods: int, as_of: int,
                   ablations: Ablations | None = None, target=(None, 0)) -> TokenSequence:
    """Tokens for every unmasked observation in ``(as_of - window, as_of]``.

    Variable ids follow ingestion order: high-frequency columns first, then
    low-frequency columns. Ties at a timestamp keep that order.
    """
    ab = ablations or Ablations()
    if window_periods < 1:
        raise ValueError("window must be positive")
    lo = as_of - window_periods + 1
    parts = []
    n_high = 0
    if high is not None:
        if high.frequency != HIGH or high.period_months != 1:
            raise ValueError("high panel must be at the base frequency")
        n_high = high.N
        if not ab.low_freq_only:
            rows = np.nonzero((high.timestamps >= lo) & (high.timestamps <= as_of))[0]
            ti, vi = np.nonzero(~high.mask[rows])
            parts.append((high.timestamps[rows][ti], vi, np.full(ti.size, FREQ_HIGH),
                          high.values[rows[ti], vi]))
    close = low_close_index(low)
    rows = np.nonzero((close >= lo) & (close <= as_of))[0]
    ti, vi = np.nonzero(~low.mask[rows])
    parts.append((close[rows][ti], vi + n_high, np.full(ti.size, FREQ_LOW), low.values[rows[ti], vi]))
    ts = np.concatenate([p[0] for p in parts])
    if ts.size == 0:
        raise EmptySequenceError(f"no observations in window ending {as_of}")
    var = np.concatenate([p[1] for p in parts])
    freq = np.concatenate([p[2] for p in parts])
    val = np.concatenate([p[3] for p in parts])
    order = np.lexsort((var, ts))
    return TokenSequence(val[order].astype(float), var[order].astype(np.int64),
                         freq[order].astype(np.int64), ts[order].astype(np.int64), lo, as_of, target)


def temporal_encoding(t, d_model: int) -> np.ndarray:
    """Interleaved ``sin / cos(t / 10000^{2j/d})``; vector for scalar t, rows for arrays."""
    if d_model % 2:
        raise ValueError("d_model must be even")
    t = np.asarray(t, dtype=float)
    freq = 10000.0 ** (-np.arange(0, d_model, 2) / d_model)
    ang = t[..., None] * freq
    out = np.empty(t.shape + (d_model,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def embedding_dim(vocab: int) -> int:
    """``ceil(log2(vocab)) + 2``."""
    return int(np.ceil(np.log2(max(vocab, 1)))) + 2


@dataclass
class Batch:
    """Padded, left-aligned token arrays for ``B`` sequences."""

    values: np.ndarray
    variable_ids: np.ndarray
    frequencies: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    targets: np.ndarray | None = None
    lags: np.ndarray | None = None
    meta: list = field(default_factory=list)

    def __len__(self):
        return self.values.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.values[idx], self.variable_ids[idx], self.frequencies[idx],
                     self.positions[idx], self.mask[idx],
                     None if self.targets is None else self.targets[idx],
                     None if self.lags is None else self.lags[idx],
                     [self.meta[i] for i in idx] if self.meta else [])


def collate(seqs, targets=None, te_origin: str = "window", sample_start: int | None = None) -> Batch:
    seqs = list(seqs)
    if not seqs:
        raise ValueError("empty batch")
    B, L = len(seqs), max(len(s) for s in seqs)
    vals = np.zeros((B, L))
    var = np.zeros((B, L), dtype=np.int64)
    freq = np.zeros((B, L), dtype=np.int64)
    pos = np.zeros((B, L))
    lags = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, s in enumerate(seqs):
        n = len(s)
        vals[b, :n] = s.values
        var[b, :n] = s.variable_ids
        freq[b, :n] = s.frequencies
        pos[b, :n] = s.te_positions(te_origin, sample_start)
        lags[b, :n] = s.lags
        mask[b, :n] = True
    y = None if targets is None else np.asarray(targets, dtype=float).reshape(B)
    return Batch(vals, var, freq, pos, mask, y, lags, [(s.start, s.end) for s in seqs])


def forecast_dataset(high: Panel | None, low: Panel, target: int, window_periods: int,
                     horizon: int = 1, ablations: Ablations | None = None,
                     rows=None) -> tuple[list[TokenSequence], np.ndarray, np.ndarray]:
    """Sequences ending at low-frequency row ``t'`` paired with ``low[t' + horizon, target]``.

    Returns the sequences, the targets and the low-frequency target rows.
    Rows whose window is not fully inside the sample or whose target is
    masked are skipped.
    """
    close = low_close_index(low)
    first = close[0] - low.period_months + 1
    if high is not None:
        first = max(first, int(high.timestamps[0]))
    cand = range(low.T - horizon) if rows is None else rows
    seqs, ys, tr = [], [], []
    for t in cand:
        t_target = t + horizon
        if t_target >= low.T or low.mask[t_target, target]:
            continue
        as_of = int(close[t])
        if as_of - window_periods + 1 < first:
            continue
        seqs.append(build_sequence(high, low, window_periods, as_of, ablations, (target, horizon)))
        ys.append(low.values[t_target, target])
        tr.append(t_target)
    return seqs, np.array(ys), np.array(tr, dtype=np.int64)
