"""Variable-by-variable and lag-by-lag summaries of encoder attention."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


class AggregationError(ValueError):
    pass


@dataclass
class Heatmaps:
    variable_matrix: np.ndarray | None
    temporal_matrix: np.ndarray | None
    no_attention: bool = False
    metadata: dict = field(default_factory=dict)


def _row_normalize(m):
    s = m.sum(axis=1, keepdims=True)
    return np.divide(m, s, out=np.zeros_like(m), where=s > 0)


def extract_attention_heatmaps(records, n_vars: int | None = None, window: int | None = None) -> Heatmaps:
    """Average token-level attention into ``(variable, variable)`` and ``(lag, lag)`` maps.

    Each record's weights are first averaged over layers and heads. Cell
    ``(a, b)`` of the variable map is the mean weight over all query/key
    token pairs with query variable ``a`` and key variable ``b`` (pooled over
    time pairs and sequences); the lag map does the same with lags
    (``0`` = window end). Both maps are then row-normalized.
    """
    records = list(records)
    if not records:
        raise AggregationError("no attention records")
    if all(r.weights is None for r in records):
        return Heatmaps(None, None, True, {"reason": "no attention weights (attention ablated)"})
    if any(r.weights is None for r in records):
        raise AggregationError("mixing records with and without attention")
    V = n_vars if n_vars is not None else int(max(r.variable_ids.max() for r in records)) + 1
    W = window if window is not None else int(max(r.lags.max() for r in records)) + 1
    vs, vc = np.zeros((V, V)), np.zeros((V, V))
    ts, tc = np.zeros((W, W)), np.zeros((W, W))
    for r in records:
        M = np.mean([w.mean(axis=0) for w in r.weights], axis=0)
        n = len(r.variable_ids)
        if M.shape != (n, n):
            raise AggregationError("attention matrix does not match token maps")
        v, g = r.variable_ids, r.lags
        if v.max() >= V or g.max() >= W or v.min() < 0 or g.min() < 0:
            raise AggregationError("token index outside the heatmap grid")
        vq, vk = np.meshgrid(v, v, indexing="ij")
        gq, gk = np.meshgrid(g, g, indexing="ij")
        np.add.at(vs, (vq, vk), M)
        np.add.at(vc, (vq, vk), 1.0)
        np.add.at(ts, (gq, gk), M)
        np.add.at(tc, (gq, gk), 1.0)
    var_mean = np.divide(vs, vc, out=np.zeros_like(vs), where=vc > 0)
    tmp_mean = np.divide(ts, tc, out=np.zeros_like(ts), where=tc > 0)
    meta = {"averaging": "layers and heads equally weighted, then pooled over token pairs",
            "normalization": "rows normalized after aggregation", "n_records": len(records)}
    return Heatmaps(_row_normalize(var_mean), _row_normalize(tmp_mean), False, meta)


def matrix_csv(m: np.ndarray, row_labels, col_labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + list(col_labels))
    for lab, row in zip(row_labels, m):
        w.writerow([lab] + ["%.12g" % v for v in row])
    return buf.getvalue()


def matrix_svg(m: np.ndarray, cell: int = 12, title: str = "") -> str:
    """Minimal grayscale SVG; one ``rect`` per cell, darker for larger values."""
    rows, cols = m.shape
    top = 20 if title else 0
    width, height = cols * cell, rows * cell + top
    hi = float(m.max()) if m.size and m.max() > 0 else 1.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'data-rows="{rows}" data-cols="{cols}">']
    if title:
        out.append(f'<text x="2" y="14" font-size="12">{title}</text>')
    for i in range(rows):
        for j in range(cols):
            shade = int(round(255 * (1 - m[i, j] / hi)))
            out.append(f'<rect x="{j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({shade},{shade},{shade})"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
