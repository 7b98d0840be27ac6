"""Closed-form linear heads on propagated features, and label propagation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import EmptyLabelSet, InvalidSpec, ShapeMismatch
from .graph_store import GraphDataset, row_normalize

LP_ALPHAS = (0.1, 0.3, 0.5, 0.7, 0.9)
LP_HOPS = (1, 2, 3)


@dataclass(frozen=True)
class SolveConfig:
    rcond: float = 1e-10
    softmax_output: bool = True

    def __post_init__(self):
        if not 0.0 < self.rcond < 1.0:
            raise InvalidSpec(f"rcond must lie in (0, 1), got {self.rcond}")


@dataclass
class ChannelPrediction:
    name: str
    probs: np.ndarray
    logits: np.ndarray | None = None


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def pinv_lstsq(f_l: np.ndarray, y_l: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Minimum-norm least-squares weights ``pinv(F_L) @ Y_L`` via a thin SVD.

    Singular values below ``rcond * sigma_max`` are treated as zero, so an
    all-zero ``F_L`` gives all-zero weights.
    """
    f_l = np.asarray(f_l, dtype=np.float64)
    y_l = np.asarray(y_l, dtype=np.float64)
    if f_l.ndim != 2 or y_l.ndim != 2 or f_l.shape[0] != y_l.shape[0]:
        raise ShapeMismatch(f"F_L {f_l.shape} and Y_L {y_l.shape} do not align")
    m, d = f_l.shape
    if m == 0:
        raise EmptyLabelSet("no labeled rows")
    u, s, vt = np.linalg.svd(f_l, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((d, y_l.shape[1]))
    keep = s > rcond * s[0]
    k = int(keep.sum())
    # pinv(F) Y = V_k diag(1/s_k) U_k^T Y
    return vt[:k].T @ ((u[:, :k].T @ y_l) / s[:k, None])


def channel_predict(
    f: np.ndarray, w: np.ndarray, cfg: SolveConfig = SolveConfig(), name: str = "", keep_logits: bool = False
) -> ChannelPrediction:
    if f.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"F {f.shape} and W {w.shape} do not align")
    logits = f @ w
    probs = softmax(logits, axis=1) if cfg.softmax_output else logits
    return ChannelPrediction(name, probs, logits if keep_logits else None)


def solve_channel(
    features: np.ndarray,
    labeled: np.ndarray,
    y_l: np.ndarray,
    cfg: SolveConfig = SolveConfig(),
    name: str = "",
    rows: np.ndarray | None = None,
) -> ChannelPrediction:
    """Fit on the ``labeled`` rows of ``features`` and predict.

    Predictions cover every node, or only ``rows`` when given (used during
    training, where only the target nodes are needed).
    """
    labeled = np.asarray(labeled, dtype=np.int64)
    if labeled.size == 0:
        raise EmptyLabelSet("cannot solve a channel with no labeled nodes")
    w = pinv_lstsq(features[labeled], y_l, cfg.rcond)
    f = features if rows is None else features[rows]
    return channel_predict(f, w, cfg, name)


def solve_all(caches, labeled, y_l, cfg=SolveConfig(), rows=None) -> list[ChannelPrediction]:
    return [solve_channel(c.features, labeled, y_l, cfg, c.name, rows) for c in caches]


def label_propagation(
    graph: GraphDataset,
    alpha: float,
    hops: int,
    labeled: np.ndarray | None = None,
    abar: sp.csr_matrix | None = None,
    normalize: bool = True,
) -> ChannelPrediction:
    """``Y <- alpha Abar Y + (1 - alpha) Y0`` for ``hops`` rounds.

    ``Y0`` is one-hot on ``labeled`` (default: train split) and zero elsewhere.
    Output rows with positive mass are rescaled onto the simplex; rows with no
    mass become uniform.
    """
    if not 0.0 <= alpha <= 1.0:
        raise InvalidSpec(f"alpha must lie in [0, 1], got {alpha}")
    if hops < 0:
        raise InvalidSpec(f"hops must be >= 0, got {hops}")
    if labeled is None:
        labeled = graph.split("train")
    if abar is None:
        abar = row_normalize(graph.adjacency)
    y0 = np.zeros((graph.num_nodes, graph.num_classes))
    y0[labeled, graph.labels[labeled]] = 1.0
    y = y0
    for _ in range(hops):
        y = alpha * np.asarray(abar @ y) + (1.0 - alpha) * y0
    if not normalize:
        return ChannelPrediction(f"labelprop(a={alpha:g},k={hops})", y)
    mass = y.sum(axis=1, keepdims=True)
    out = np.full_like(y, 1.0 / graph.num_classes)
    pos = mass[:, 0] > 0
    out[pos] = y[pos] / mass[pos]
    return ChannelPrediction(f"labelprop(a={alpha:g},k={hops})", out)


def label_propagation_search(graph: GraphDataset, alphas=LP_ALPHAS, hops=LP_HOPS):
    """Grid search over ``(alpha, hops)`` on validation accuracy.

    Ties keep the earliest grid point (hops outer, alpha inner). Returns
    ``(alpha, hops, prediction, val_accuracy)``.
    """
    from .trainer import evaluate

    abar = row_normalize(graph.adjacency)
    best = None
    for k, a in itertools.product(hops, alphas):
        pred = label_propagation(graph, a, k, abar=abar)
        acc = evaluate(pred.probs, graph, "val")
        if best is None or acc > best[3]:
            best = (a, k, pred, acc)
    return best
