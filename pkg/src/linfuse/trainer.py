"""Training the attention module on one graph and inference on any other."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import conv_ops
from .attention import (
    AdamState,
    AttentionModel,
    adam_step,
    attention_forward,
    backward,
    fuse,
    init_params,
    layer_sizes_for,
)
from .conv_ops import DEFAULT_CHANNELS, build_channel_set, parse_channels
from .errors import ChannelMismatch, EmptySplit, InvalidSpec, NonFiniteLoss, TooFewLabels
from .features import assemble_features
from .graph_store import SPLITS, GraphDataset
from .solver import SolveConfig, solve_all

log = logging.getLogger(__name__)

# Per-dataset settings from the original experiments: batches, lr, hidden
# width, number of MLP layers, target entropy (bits).
PRESETS = {
    "cora": dict(n_batches=500, lr=2e-4, hidden=(), entropy=2.0),
    "wisconsin": dict(n_batches=1000, lr=2e-4, hidden=(32,), entropy=1.0),
    "arxiv": dict(n_batches=1000, lr=2e-4, hidden=(128,), entropy=1.0),
    "products": dict(n_batches=1000, lr=2e-4, hidden=(128,), entropy=1.0),
}


@dataclass
class TrainConfig:
    n_batches: int = 1000
    batch_size: int = 128
    lr: float = 2e-4
    hidden: tuple = (32,)
    entropy: float = 1.0
    seed: int = 0
    mask_hgc: bool = True
    rcond: float = 1e-10
    channels: tuple = DEFAULT_CHANNELS
    ref_cap: int = 4  # ref set capped at ref_cap * batch_size nodes

    def __post_init__(self):
        if self.n_batches < 1:
            raise InvalidSpec(f"n_batches must be >= 1, got {self.n_batches}")
        if self.batch_size < 2:
            raise InvalidSpec(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr <= 0:
            raise InvalidSpec(f"lr must be positive, got {self.lr}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.channels = tuple(s.name for s in parse_channels(self.channels))

    @classmethod
    def preset(cls, dataset: str, **overrides) -> "TrainConfig":
        kw = dict(PRESETS[dataset.lower()])
        kw.update(overrides)
        return cls(**kw)


@dataclass
class Metrics:
    dataset: str = ""
    seed: int | None = None
    channels: list = field(default_factory=list)
    accuracy: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)
    mean_attention: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def channel_mask(channels, mask_hgc: bool) -> np.ndarray:
    specs = parse_channels(channels)
    return np.array([not (mask_hgc and s.kind == "hgc") for s in specs])


def sample_ref_target(labeled, batch_size: int, rng: np.random.Generator, ref_cap: int = 4):
    """Disjoint (ref, target) node sets drawn from ``labeled``.

    ``target`` has ``min(batch_size, len(labeled) // 2)`` nodes; ``ref`` is the
    rest, subsampled to at most ``ref_cap * batch_size`` nodes.
    """
    labeled = np.asarray(labeled, dtype=np.int64)
    if len(labeled) < 2:
        raise TooFewLabels(f"need at least 2 labeled nodes, got {len(labeled)}")
    k = min(batch_size, len(labeled) // 2)
    perm = rng.permutation(labeled)
    target, rest = perm[:k], perm[k:]
    ref = rest[: ref_cap * batch_size]
    return ref, target


def _stack(preds) -> np.ndarray:
    return np.stack([p.probs for p in preds], axis=1)


@dataclass
class _Coords:
    name: str
    features: np.ndarray


# singular values kept when compressing the train rows; far below any rcond
BASIS_RTOL = 1e-14


def train_coordinates(caches, labeled) -> list[_Coords]:
    """Row-space coordinates of the labeled rows of every channel.

    With ``F_L = U S V^T`` the coordinates are ``Z = U S``. For any row
    subsets ``R`` and ``T`` of the labeled nodes,
    ``F_T pinv(F_R) = Z_T pinv(Z_R)``, so per-batch solves run on
    ``(|R|, rank)`` matrices instead of ``(|R|, d)``.
    """
    out = []
    for c in caches:
        u, s, _ = np.linalg.svd(np.asarray(c.features[labeled], dtype=np.float64), full_matrices=False)
        k = max(int(np.sum(s > BASIS_RTOL * s[0])) if s.size and s[0] > 0 else 0, 1)
        out.append(_Coords(c.name, u[:, :k] * s[:k]))
    return out


def train(
    graph: GraphDataset,
    cfg: TrainConfig,
    caches=None,
    cache_dir=None,
) -> tuple[AttentionModel, Metrics]:
    """Fit the attention module on the train split of ``graph``.

    Each batch solves every channel on the ref nodes, predicts the target
    nodes, and takes one Adam step on the fused cross-entropy of the targets.
    Propagated features are computed once up front (or read from
    ``cache_dir``); the loop itself never touches the adjacency.
    """
    t0 = time.perf_counter()
    if caches is None:
        caches = build_channel_set(cfg.channels, graph, cache_dir)
    names = [c.name for c in caches]
    if names != list(cfg.channels):
        raise ChannelMismatch(f"caches {names} do not match configured channels {list(cfg.channels)}")
    t_pre = time.perf_counter()

    labeled = graph.split("train")
    if len(labeled) < 2:
        raise TooFewLabels(f"{graph.name or 'graph'} has {len(labeled)} labeled train nodes")
    t = len(caches)
    model = AttentionModel(
        init_params(layer_sizes_for(t, cfg.hidden), cfg.seed),
        list(names),
        channel_mask(names, cfg.mask_hgc),
        cfg.entropy,
    )
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    solve_cfg = SolveConfig(rcond=cfg.rcond)

    losses, ref_sizes = [], []
    props_before = conv_ops.propagation_count()
    coords = train_coordinates(caches, labeled)
    slot = np.full(graph.num_nodes, -1, dtype=np.int64)
    slot[labeled] = np.arange(len(labeled))
    for b in range(cfg.n_batches):
        ref, target = sample_ref_target(labeled, cfg.batch_size, rng, cfg.ref_cap)
        assert not np.intersect1d(ref, target).size
        preds = _stack(solve_all(coords, slot[ref], graph.one_hot(ref), solve_cfg, rows=slot[target]))
        feats = assemble_features(preds, cfg.entropy).values
        loss, grads = backward(model, feats, preds, graph.labels[target])
        if not np.isfinite(loss):
            raise NonFiniteLoss(b, loss)
        adam_step(model.params, grads, opt)
        losses.append(loss)
        ref_sizes.append(len(ref))
        if (b + 1) % 100 == 0:
            log.info("batch %d loss %.4f", b + 1, float(np.mean(losses[-100:])))
    props_in_loop = conv_ops.propagation_count() - props_before
    t_end = time.perf_counter()

    metrics = Metrics(
        dataset=graph.name,
        seed=cfg.seed,
        channels=list(names),
        loss_trace=losses,
        timings_ms={"preprocess": 1e3 * (t_pre - t0), "train": 1e3 * (t_end - t_pre)},
        extra={
            "propagations_in_loop": props_in_loop,
            "ref_sizes": ref_sizes,
            "cache_hits": sum(bool(c.from_cache) for c in caches),
            "param_digest": model.params.digest(),
        },
    )
    return model, metrics


def predict_channels(caches, graph: GraphDataset, rcond: float = 1e-10) -> np.ndarray:
    """(n, t, c) channel predictions solved on the full train split."""
    labeled = graph.split("train")
    return _stack(solve_all(caches, labeled, graph.one_hot(labeled), SolveConfig(rcond=rcond)))


def inductive_infer(
    model: AttentionModel,
    graph: GraphDataset,
    caches=None,
    cache_dir=None,
    rcond: float = 1e-10,
) -> tuple[np.ndarray, Metrics]:
    """Fused predictions for every node of ``graph`` with a frozen model."""
    t0 = time.perf_counter()
    if caches is None:
        caches = build_channel_set(model.channels, graph, cache_dir)
    names = [c.name for c in caches]
    if names != model.channels:
        raise ChannelMismatch(f"model expects channels {model.channels}, got {names}")
    t1 = time.perf_counter()
    digest = model.params.digest()

    preds = predict_channels(caches, graph, rcond)
    feats = assemble_features(preds, model.entropy).values
    alpha = attention_forward(model, feats)
    ybar = fuse(alpha, preds)
    t2 = time.perf_counter()
    assert model.params.digest() == digest, "inference modified the model"

    metrics = Metrics(
        dataset=graph.name,
        channels=list(names),
        accuracy=split_accuracies(ybar, graph),
        mean_attention={n: float(a) for n, a in zip(names, alpha.mean(axis=0))},
        timings_ms={"preprocess": 1e3 * (t1 - t0), "infer": 1e3 * (t2 - t1)},
        extra={"param_digest": digest, "num_nodes": graph.num_nodes, "num_classes": graph.num_classes},
    )
    return ybar, metrics


def mean_agg(graph: GraphDataset, channels=DEFAULT_CHANNELS, caches=None, cache_dir=None, rcond=1e-10):
    """Uniform-attention fusion over all channels."""
    if caches is None:
        caches = build_channel_set(channels, graph, cache_dir)
    return predict_channels(caches, graph, rcond).mean(axis=1)


def evaluate(predictions: np.ndarray, graph: GraphDataset, split) -> float:
    """Accuracy of row-wise argmax (ties go to the lowest class) on a split."""
    nodes = graph.split(split) if isinstance(split, str) else np.asarray(split, dtype=np.int64)
    if len(nodes) == 0:
        raise EmptySplit(f"split {split!r} is empty")
    pred = np.argmax(predictions[nodes], axis=1)
    return float(np.mean(pred == graph.labels[nodes]))


def split_accuracies(predictions, graph) -> dict:
    return {s: (evaluate(predictions, graph, s) if len(graph.split(s)) else None) for s in SPLITS}
