"""Loading, validation and normalization of graph datasets.

A dataset lives in a directory with the following files::

    meta.json            {"num_nodes", "feat_dim", "num_classes", "directed"}
    edges.tsv            src<TAB>dst per line, 0-based
    features.bin         little-endian float32, row-major n x feat_dim
    labels.tsv           node_id<TAB>class_id; absent nodes are unlabeled
    splits/train.txt     one node id per line (also val.txt, test.txt)

Adjacency matrices are held as ``scipy.sparse.csr_matrix`` with sorted,
duplicate-free column indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DatasetMalformed, NegativeWeight

UNLABELED = -1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetMeta:
    num_nodes: int
    feat_dim: int
    num_classes: int
    directed: bool

    def __post_init__(self):
        if self.num_nodes < 1 or self.feat_dim < 1 or self.num_classes < 2:
            raise ValueError(
                "need num_nodes >= 1, feat_dim >= 1, num_classes >= 2, got "
                f"{self.num_nodes}, {self.feat_dim}, {self.num_classes}"
            )


@dataclass(frozen=True)
class GraphDataset:
    """In-memory graph. Treat every array as read-only."""

    meta: DatasetMeta
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    name: str = ""

    @property
    def num_nodes(self) -> int:
        return self.meta.num_nodes

    @property
    def num_classes(self) -> int:
        return self.meta.num_classes

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.nnz)

    def split(self, name: str) -> np.ndarray:
        return self.splits[name]

    def one_hot(self, nodes: np.ndarray) -> np.ndarray:
        """One-hot label matrix for ``nodes`` (rows follow the given order)."""
        y = self.labels[nodes]
        if np.any(y < 0):
            raise ValueError("one_hot called on unlabeled nodes")
        out = np.zeros((len(nodes), self.num_classes))
        out[np.arange(len(nodes)), y] = 1.0
        return out


def check_csr(a: sp.csr_matrix, *, stochastic: bool = False, atol: float = 1e-9) -> None:
    """Assert the structural invariants every adjacency in the package obeys."""
    indptr, indices = a.indptr, a.indices
    assert indptr[0] == 0 and indptr[-1] == len(indices) == len(a.data)
    assert np.all(np.diff(indptr) >= 0)
    for r in range(a.shape[0]):
        row = indices[indptr[r]:indptr[r + 1]]
        assert np.all(np.diff(row) > 0), f"row {r} has unsorted or duplicate columns"
    assert np.all(np.isfinite(a.data))
    if stochastic:
        sums = np.asarray(a.sum(axis=1)).ravel()
        assert np.all(np.abs(sums - 1.0) <= atol)


def adjacency_from_edges(src, dst, num_nodes: int, directed: bool = True) -> sp.csr_matrix:
    """Binary CSR adjacency from edge lists; duplicates collapse to one entry."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if not directed:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    a = sp.csr_matrix(
        (np.ones(len(src)), (src, dst)), shape=(num_nodes, num_nodes), dtype=np.float64
    )
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


def _read_id_lines(path: Path, n: int, what: str) -> np.ndarray:
    ids = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                v = int(s)
            except ValueError:
                raise DatasetMalformed(f"expected an integer {what}, got {s!r}", path, lineno)
            if not 0 <= v < n:
                raise DatasetMalformed(f"{what} {v} out of range [0, {n})", path, lineno)
            ids.append(v)
    return np.asarray(ids, dtype=np.int64)


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DatasetMalformed(f"missing file {path.name}", path)
    return path


def load_dataset(path: str | Path) -> GraphDataset:
    """Read and validate a dataset directory."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetMalformed("not a dataset directory", root)

    meta_path = _require(root / "meta.json")
    try:
        raw = json.loads(meta_path.read_text(encoding="utf-8"))
        meta = DatasetMeta(
            num_nodes=int(raw["num_nodes"]),
            feat_dim=int(raw["feat_dim"]),
            num_classes=int(raw["num_classes"]),
            directed=bool(raw["directed"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetMalformed(f"bad meta.json: {exc}", meta_path) from exc
    n, d, c = meta.num_nodes, meta.feat_dim, meta.num_classes

    edges_path = _require(root / "edges.tsv")
    src, dst = [], []
    with open(edges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetMalformed("expected two tab-separated columns", edges_path, lineno)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DatasetMalformed(f"non-integer node id in {line.strip()!r}", edges_path, lineno)
            if not (0 <= u < n and 0 <= v < n):
                raise DatasetMalformed(f"edge ({u}, {v}) out of range [0, {n})", edges_path, lineno)
            src.append(u)
            dst.append(v)
    adjacency = adjacency_from_edges(src, dst, n, directed=meta.directed)

    feat_path = _require(root / "features.bin")
    blob = feat_path.read_bytes()
    if len(blob) != 4 * n * d:
        raise DatasetMalformed(
            f"expected {4 * n * d} bytes for {n}x{d} float32, found {len(blob)}", feat_path
        )
    features = np.frombuffer(blob, dtype="<f4").reshape(n, d).astype(np.float64)
    bad = np.argwhere(~np.isfinite(features))
    if len(bad):
        r, col = bad[0]
        raise DatasetMalformed(
            f"non-finite feature at node {r}, dim {col}", feat_path, int((r * d + col) * 4)
        )

    labels_path = _require(root / "labels.tsv")
    labels = np.full(n, UNLABELED, dtype=np.int64)
    with open(labels_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            try:
                u, y = int(parts[0]), int(parts[1])
            except (ValueError, IndexError):
                raise DatasetMalformed(f"bad label line {line.strip()!r}", labels_path, lineno)
            if not 0 <= u < n:
                raise DatasetMalformed(f"node {u} out of range [0, {n})", labels_path, lineno)
            if not 0 <= y < c:
                raise DatasetMalformed(f"class {y} out of range [0, {c})", labels_path, lineno)
            labels[u] = y

    splits = {}
    for name in SPLITS:
        splits[name] = _read_id_lines(_require(root / "splits" / f"{name}.txt"), n, "node id")
    _validate_splits(splits, labels, root)

    for arr in (features, labels, *splits.values()):
        arr.setflags(write=False)
    return GraphDataset(meta, adjacency, features, labels, splits, name=root.name)


def _validate_splits(splits, labels, root):
    seen: dict[int, str] = {}
    for name, ids in splits.items():
        if len(np.unique(ids)) != len(ids):
            raise DatasetMalformed(f"duplicate node id in {name} split", root / "splits" / f"{name}.txt")
        for u in ids.tolist():
            if u in seen:
                raise DatasetMalformed(f"node {u} appears in both {seen[u]} and {name}", root / "splits")
            seen[u] = name
        unl = ids[labels[ids] < 0]
        if len(unl):
            raise DatasetMalformed(
                f"node {int(unl[0])} in {name} split has no label", root / "labels.tsv"
            )


def write_dataset(graph: GraphDataset, path: str | Path) -> Path:
    """Write ``graph`` in the canonical directory format.

    Undirected graphs are written with each edge once (src < dst, plus self
    loops); directed graphs write every stored entry.
    """
    root = Path(path)
    (root / "splits").mkdir(parents=True, exist_ok=True)
    m = graph.meta
    (root / "meta.json").write_text(
        json.dumps(
            {
                "num_nodes": m.num_nodes,
                "feat_dim": m.feat_dim,
                "num_classes": m.num_classes,
                "directed": m.directed,
            }
        ),
        encoding="utf-8",
    )
    coo = graph.adjacency.tocoo()
    rows, cols = coo.row, coo.col
    if not m.directed:
        keep = rows <= cols
        rows, cols = rows[keep], cols[keep]
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{u}\t{v}\n" for u, v in zip(rows.tolist(), cols.tolist()))
    (root / "features.bin").write_bytes(np.ascontiguousarray(graph.features, dtype="<f4").tobytes())
    with open(root / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u in np.flatnonzero(graph.labels >= 0).tolist():
            fh.write(f"{u}\t{int(graph.labels[u])}\n")
    for name in SPLITS:
        ids = graph.splits.get(name, np.empty(0, dtype=np.int64))
        (root / "splits" / f"{name}.txt").write_text(
            "".join(f"{int(u)}\n" for u in ids), encoding="utf-8"
        )
    return root


def make_dataset(
    adjacency: sp.spmatrix,
    features: np.ndarray,
    labels: np.ndarray,
    splits: dict[str, np.ndarray],
    num_classes: int | None = None,
    directed: bool = True,
    name: str = "",
) -> GraphDataset:
    """Assemble a validated in-memory dataset (no files involved)."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    a.sum_duplicates()
    a.eliminate_zeros()
    a.data[:] = 1.0
    a.sort_indices()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != a.shape[0]:
        raise DatasetMalformed(f"features shape {x.shape} does not match {a.shape[0]} nodes")
    if not np.all(np.isfinite(x)):
        raise DatasetMalformed("non-finite feature values")
    y = np.asarray(labels, dtype=np.int64)
    c = int(num_classes if num_classes is not None else y.max() + 1)
    if np.any(y >= c):
        raise DatasetMalformed(f"label out of range [0, {c})")
    sp_ = {k: np.asarray(splits.get(k, []), dtype=np.int64) for k in SPLITS}
    for k, ids in sp_.items():
        if len(ids) and (ids.min() < 0 or ids.max() >= a.shape[0]):
            raise DatasetMalformed(f"{k} split has out-of-range node ids")
    _validate_splits(sp_, y, Path(name or "."))
    meta = DatasetMeta(a.shape[0], x.shape[1], c, directed)
    return GraphDataset(meta, a, x, y, sp_, name=name)


def row_normalize(a: sp.spmatrix) -> sp.csr_matrix:
    """Scale each row to sum 1; rows with no out-weight get a unit self loop."""
    a = sp.csr_matrix(a, dtype=np.float64, copy=True)
    if a.nnz and a.data.min() < 0:
        raise NegativeWeight(f"adjacency has negative weight {a.data.min()}")
    a.eliminate_zeros()
    deg = np.asarray(a.sum(axis=1)).ravel()
    empty = np.flatnonzero(deg == 0)
    if len(empty):
        loops = sp.csr_matrix((np.ones(len(empty)), (empty, empty)), shape=a.shape)
        a = (a + loops).tocsr()
        deg[empty] = 1.0
    out = sp.diags(1.0 / deg) @ a
    out = sp.csr_matrix(out)
    out.sort_indices()
    return out


def scaled_laplacian(a: sp.spmatrix) -> sp.csr_matrix:
    """Rescaled normalized Laplacian ``2 L / lambda_max - I`` with ``lambda_max = 2``.

    With that convention the result is ``-D^{-1/2} A D^{-1/2}``; nodes with
    zero degree contribute ``d^{-1/2} = 0``.
    """
    a = sp.csr_matrix(a, dtype=np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    d = sp.diags(inv_sqrt)
    out = sp.csr_matrix(-(d @ a @ d))
    out.sort_indices()
    return out
