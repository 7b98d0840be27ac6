"""Entropy-normalized distance features between channel predictions.

For node ``u`` and anchor channel ``i`` the feature block is

    p_u(j | i) = exp(-beta * d_ij) / sum_{k != i} exp(-beta * d_ik),   j != i

with ``d_ij`` the squared Euclidean distance between the two channels'
prediction rows and ``beta = 1 / (2 sigma^2)`` chosen per (u, i) so that the
block has a fixed Shannon entropy (in bits). Blocks are laid out anchor-major:
``(0,1), (0,2), ..., (1,0), (1,2), ...``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, InvalidTarget, ShapeMismatch

BETA_LO = 1e-10
BETA_HI = 1e10
MAX_ITERS = 64
ENTROPY_TOL = 1e-10
# Gaps to the row minimum below TIE_RTOL * (largest distance) are rounding
# noise from the upstream solves; they count as exact ties. Without this a
# search that runs to BETA_HI magnifies 1e-15 noise into visible features.
TIE_RTOL = 1e-9


@dataclass
class SimilarityFeatures:
    values: np.ndarray  # (n, t*(t-1))
    sigma: np.ndarray  # (n, t); nan where the row is degenerate
    num_channels: int

    @property
    def shape(self):
        return self.values.shape


def feature_pairs(t: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(t) for j in range(t) if j != i]


def _stack(preds) -> np.ndarray:
    """(n, t, c) array from a list of predictions or a ready array."""
    if isinstance(preds, np.ndarray):
        arr = preds
    else:
        mats = [getattr(p, "probs", p) for p in preds]
        shapes = {m.shape for m in mats}
        if len(shapes) != 1:
            raise ShapeMismatch(f"channel predictions have different shapes {sorted(shapes)}")
        arr = np.stack(mats, axis=1)
    if arr.ndim != 3 or arr.shape[1] < 2:
        raise ShapeMismatch(f"need (n, t >= 2, c) predictions, got {arr.shape}")
    return arr


def pairwise_sq_dist(preds, u: int | None = None) -> np.ndarray:
    """Squared distances between channel rows: (t, t) for node ``u``, else (n, t, t)."""
    arr = _stack(preds)
    if u is not None:
        arr = arr[u:u + 1]
    diff = arr[:, :, None, :] - arr[:, None, :, :]
    d = np.einsum("ntsc,ntsc->nts", diff, diff)
    return d[0] if u is not None else d


def _entropy_bits(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log2(p), 0.0)
    return -terms.sum(axis=-1)


def _kernel(d: np.ndarray, beta: np.ndarray) -> np.ndarray:
    z = -beta[:, None] * (d - d.min(axis=1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def entropy_normalize_rows(
    d: np.ndarray, h_target: float, tol: float = ENTROPY_TOL, max_iters: int = MAX_ITERS
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized bandwidth search for a batch of distance rows of shape (r, m).

    Bisection runs on ``log(beta)`` over ``[BETA_LO, BETA_HI]``; entropy is
    non-increasing in ``beta``. Rows whose target is out of reach end at the
    nearest bound. Distances within ``TIE_RTOL`` (relative to the row's
    largest) of the row minimum are snapped onto it. Rows with all-equal
    distances are returned uniform with ``sigma = nan``. Returns
    ``(probs, sigma)``.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] < 1:
        raise ShapeMismatch(f"distance rows must be (r, m >= 1), got {d.shape}")
    r, m = d.shape
    h_max = np.log2(m) if m > 1 else 0.0
    if m < 2 or not 0.0 < h_target <= h_max + 1e-12:
        raise InvalidTarget(f"target entropy {h_target} outside (0, log2({m})] = (0, {h_max:.6g}]")
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and non-negative")

    probs = np.full((r, m), 1.0 / m)
    sigma = np.full(r, np.nan)
    gap = d - d.min(axis=1, keepdims=True)
    d = np.where(gap <= TIE_RTOL * d.max(axis=1, keepdims=True), 0.0, gap)
    active = d.max(axis=1) > 0
    if h_target >= h_max - 1e-12:
        # maximum-entropy target: only the uniform distribution qualifies
        sigma[active] = np.inf
        return probs, sigma

    idx = np.flatnonzero(active)
    if idx.size:
        dd = d[idx]
        lo = np.full(idx.size, np.log(BETA_LO))
        hi = np.full(idx.size, np.log(BETA_HI))
        beta = np.exp(0.5 * (lo + hi))
        todo = np.ones(idx.size, dtype=bool)
        for _ in range(max_iters):
            mid = 0.5 * (lo + hi)
            b = np.exp(mid)
            h = _entropy_bits(_kernel(dd, b))
            beta = np.where(todo, b, beta)
            todo &= np.abs(h - h_target) > tol
            if not todo.any():
                break
            too_flat = h > h_target
            lo = np.where(todo & too_flat, mid, lo)
            hi = np.where(todo & ~too_flat, mid, hi)
        probs[idx] = _kernel(dd, beta)
        sigma[idx] = np.sqrt(1.0 / (2.0 * beta))
    return probs, sigma


def entropy_normalize(row, h_target: float, tol: float = ENTROPY_TOL) -> tuple[np.ndarray, float]:
    """Single-row version of :func:`entropy_normalize_rows`."""
    p, s = entropy_normalize_rows(np.asarray(row, dtype=np.float64)[None, :], h_target, tol)
    return p[0], float(s[0])


def assemble_features(preds, h_target: float, tol: float = ENTROPY_TOL) -> SimilarityFeatures:
    """``t (t-1)`` entropy-normalized similarity features per node."""
    d = pairwise_sq_dist(preds)
    n, t, _ = d.shape
    off = ~np.eye(t, dtype=bool)
    rows = d[:, off].reshape(n * t, t - 1)  # anchor-major, j ascending, j != i
    p, s = entropy_normalize_rows(rows, h_target, tol)
    return SimilarityFeatures(p.reshape(n, t * (t - 1)), s.reshape(n, t), t)


def export_histograms(features, bins: int, out: str | Path) -> Path:
    """Write per-dimension histograms as TSV: ``dim bin_lo bin_hi count``."""
    if bins < 2:
        raise InvalidSpec(f"need at least 2 bins, got {bins}")
    vals = getattr(features, "values", features)
    vals = np.asarray(vals, dtype=np.float64)
    out = Path(out)
    lines = ["dim\tbin_lo\tbin_hi\tcount\n"]
    for k in range(vals.shape[1]):
        col = vals[:, k]
        lo, hi = float(col.min()), float(col.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        counts, edges = np.histogram(col, bins=bins, range=(lo, hi))
        for b in range(bins):
            lines.append(f"{k}\t{edges[b]:.9g}\t{edges[b + 1]:.9g}\t{int(counts[b])}\n")
    out.write_text("".join(lines), encoding="utf-8")
    return out
