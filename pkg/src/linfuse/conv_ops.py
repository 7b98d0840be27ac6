"""Non-parametric feature propagation for each channel, with an on-disk cache.

Supported channels and their names:

=============  ==================  ==========================================
name           kind                propagated features
=============  ==================  ==========================================
``linear``     Linear              ``X``
``sgcK``       SGC(K)              ``Abar^K X``
``hgcK``       HGC(K)              ``(I - Abar)^K X``
``chebK``      Chebyshev(K)        K-th term of the Chebyshev recursion
``pprR``       PPR(R)              fixed point of ``(1-R) Abar F + R X``
=============  ==================  ==========================================

``Abar`` is the row-normalized adjacency. Every power is applied as a chain of
sparse-times-dense products; no dense ``n x n`` matrix is ever formed.
"""

from __future__ import annotations

import hashlib
import logging
import re
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CacheCorrupt, InvalidSpec
from .graph_store import GraphDataset, row_normalize, scaled_laplacian

log = logging.getLogger(__name__)

KINDS = ("linear", "sgc", "hgc", "cheb", "ppr")
DEFAULT_CHANNELS = ("linear", "sgc1", "sgc2", "hgc1", "hgc2")
PPR_MAX_ITERS = 100
PPR_TOL = 1e-6
CACHE_FORMAT = b"linfuse-cache-v1"


class _Counter:
    """Number of sparse-dense products executed, for complexity instrumentation."""

    def __init__(self):
        self.spmm = 0


PROPAGATIONS = _Counter()


def propagation_count() -> int:
    return PROPAGATIONS.spmm


def _spmm(a: sp.csr_matrix, f: np.ndarray) -> np.ndarray:
    PROPAGATIONS.spmm += 1
    return np.asarray(a @ f)


@dataclass(frozen=True)
class ChannelSpec:
    kind: str
    param: float = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown channel kind {self.kind!r}")
        if self.kind in ("sgc", "hgc", "cheb"):
            if int(self.param) != self.param or self.param < 1:
                raise InvalidSpec(f"{self.kind} needs an integer order >= 1, got {self.param}")
            object.__setattr__(self, "param", int(self.param))
        elif self.kind == "ppr":
            if not 0.0 < float(self.param) <= 1.0:
                raise InvalidSpec(f"ppr restart must lie in (0, 1], got {self.param}")
            object.__setattr__(self, "param", float(self.param))
        if not self.name:
            object.__setattr__(self, "name", self.default_name())

    def default_name(self) -> str:
        if self.kind == "linear":
            return "linear"
        if self.kind == "ppr":
            return f"ppr{self.param:g}"
        return f"{self.kind}{self.param}"

    @classmethod
    def parse(cls, token: str) -> "ChannelSpec":
        """Build a spec from a channel name such as ``sgc2`` or ``ppr0.25``."""
        tok = token.strip().lower()
        if tok == "linear":
            return cls("linear", 0, tok)
        m = re.fullmatch(r"(sgc|hgc|cheb)(\d+)", tok)
        if m:
            return cls(m.group(1), int(m.group(2)), tok)
        m = re.fullmatch(r"ppr(\d*\.?\d+(?:e-?\d+)?)", tok)
        if m:
            return cls("ppr", float(m.group(1)), tok)
        raise InvalidSpec(f"unknown channel name {token!r}")


def parse_channels(text) -> list[ChannelSpec]:
    if isinstance(text, str):
        text = [t for t in text.split(",") if t.strip()]
    return [t if isinstance(t, ChannelSpec) else ChannelSpec.parse(t) for t in text]


@dataclass
class FeatureCache:
    name: str
    features: np.ndarray
    digest: bytes = b""
    from_cache: bool = False
    iterations: int = 0
    converged: bool = True
    seconds: float = 0.0

    @property
    def shape(self):
        return self.features.shape


@dataclass
class _Operators:
    """Lazily built sparse operators of one graph."""

    graph: GraphDataset
    self_loops: bool = False
    _abar: sp.csr_matrix | None = field(default=None, repr=False)
    _lhat: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def abar(self) -> sp.csr_matrix:
        if self._abar is None:
            a = self.graph.adjacency
            if self.self_loops:
                a = (a + sp.eye(a.shape[0], format="csr")).tocsr()
                a.data[:] = np.minimum(a.data, 1.0)
            self._abar = row_normalize(a)
        return self._abar

    @property
    def lhat(self) -> sp.csr_matrix:
        if self._lhat is None:
            self._lhat = scaled_laplacian(self.graph.adjacency)
        return self._lhat


def _ops(graph, ops):
    return ops if ops is not None else _Operators(graph)


def propagate(spec: ChannelSpec, graph: GraphDataset, ops: _Operators | None = None) -> FeatureCache:
    """Compute the propagated feature matrix of one channel."""
    ops = _ops(graph, ops)
    x = np.asarray(graph.features, dtype=np.float64)
    t0 = time.perf_counter()
    iters, converged = 0, True
    if spec.kind == "linear":
        f = x.copy()
    elif spec.kind == "sgc":
        f = x
        for _ in range(spec.param):
            f = _spmm(ops.abar, f)
    elif spec.kind == "hgc":
        f = x
        for _ in range(spec.param):
            f = f - _spmm(ops.abar, f)
    elif spec.kind == "cheb":
        f = chebyshev_features(spec.param, graph, ops)[-1].features
    else:
        res = ppr_iterate(spec.param, graph, ops=ops)
        f, iters, converged = res.features, res.iterations, res.converged
    return FeatureCache(
        spec.name, f, iterations=iters, converged=converged, seconds=time.perf_counter() - t0
    )


def chebyshev_features(order: int, graph: GraphDataset, ops: _Operators | None = None) -> list[FeatureCache]:
    """All Chebyshev terms ``T_1 .. T_order`` (``T_1 = X``, ``T_2 = Lhat X``)."""
    if order < 1:
        raise InvalidSpec(f"chebyshev order must be >= 1, got {order}")
    ops = _ops(graph, ops)
    x = np.asarray(graph.features, dtype=np.float64)
    terms = [x.copy()]
    if order >= 2:
        terms.append(_spmm(ops.lhat, x))
    for _ in range(3, order + 1):
        terms.append(2.0 * _spmm(ops.lhat, terms[-1]) - terms[-2])
    return [FeatureCache(f"cheb{i + 1}", f) for i, f in enumerate(terms)]


def ppr_iterate(
    restart: float,
    graph: GraphDataset,
    max_iters: int = PPR_MAX_ITERS,
    tol: float = PPR_TOL,
    ops: _Operators | None = None,
) -> FeatureCache:
    """Power iteration ``F <- (1 - r) Abar F + r X`` starting from ``F = X``.

    Stops when the max-abs change drops to ``tol`` or after ``max_iters``
    updates. Hitting the cap only sets ``converged=False`` and warns.
    """
    if not 0.0 < restart <= 1.0:
        raise InvalidSpec(f"ppr restart must lie in (0, 1], got {restart}")
    if tol <= 0:
        raise InvalidSpec("tol must be positive")
    ops = _ops(graph, ops)
    x = np.asarray(graph.features, dtype=np.float64)
    f = x.copy()
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        nxt = (1.0 - restart) * _spmm(ops.abar, f) + restart * x
        delta = np.max(np.abs(nxt - f)) if f.size else 0.0
        f = nxt
        if delta <= tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"ppr({restart}) did not reach tol={tol} in {max_iters} iterations")
    return FeatureCache(f"ppr{restart:g}", f, iterations=it, converged=converged)


def dataset_digest(graph: GraphDataset) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    a = graph.adjacency
    for arr in (a.indptr.astype("<i8"), a.indices.astype("<i8"), a.data.astype("<f8")):
        h.update(arr.tobytes())
    h.update(np.ascontiguousarray(graph.features, dtype="<f8").tobytes())
    h.update(repr(graph.features.shape).encode())
    return h.digest()


def channel_digest(ds_digest: bytes, spec: ChannelSpec, self_loops: bool = False) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(CACHE_FORMAT)
    h.update(ds_digest)
    h.update(f"{spec.kind}:{spec.param!r}:{int(self_loops)}".encode())
    return h.digest()


def _read_cache(path: Path, digest: bytes, shape) -> np.ndarray:
    blob = path.read_bytes()
    n, d = shape
    if len(blob) != 16 + 4 * n * d or blob[:16] != digest:
        raise CacheCorrupt(f"{path}: digest or size mismatch")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, d).astype(np.float64)


def _write_cache(path: Path, digest: bytes, f: np.ndarray) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(digest)
        fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())
    tmp.replace(path)


def build_channel_set(
    specs,
    graph: GraphDataset,
    cache_dir: str | Path | None = None,
    self_loops: bool = False,
) -> list[FeatureCache]:
    """Propagated features for every channel, in the order given.

    With ``cache_dir`` each matrix is stored as
    ``<cache_dir>/<dataset digest>/<channel>.f32`` (16-byte digest header then
    float32 data) and returned at float32 precision, whether it was computed
    or read back, so cold and warm runs agree bitwise. A corrupt or stale file
    is recomputed and overwritten.
    """
    specs = parse_channels(specs)
    if not specs:
        raise InvalidSpec("at least one channel is required")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise InvalidSpec(f"duplicate channel names in {names}")

    ops = _Operators(graph, self_loops=self_loops)
    ds = dataset_digest(graph)
    root = None
    if cache_dir is not None:
        root = Path(cache_dir) / ds.hex()
        root.mkdir(parents=True, exist_ok=True)

    out = []
    for spec in specs:
        digest = channel_digest(ds, spec, self_loops)
        if root is not None:
            path = root / f"{spec.name}.f32"
            if path.exists():
                t0 = time.perf_counter()
                try:
                    f = _read_cache(path, digest, (graph.num_nodes, graph.meta.feat_dim))
                except CacheCorrupt as exc:
                    log.warning("%s; recomputing", exc)
                else:
                    out.append(
                        FeatureCache(spec.name, f, digest, from_cache=True,
                                     seconds=time.perf_counter() - t0)
                    )
                    continue
        fc = propagate(spec, graph, ops)
        fc.digest = digest
        if root is not None:
            _write_cache(root / f"{spec.name}.f32", digest, fc.features)
            fc.features = fc.features.astype(np.float32).astype(np.float64)
        out.append(fc)
    return out
