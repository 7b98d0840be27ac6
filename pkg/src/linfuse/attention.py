"""Attention MLP over channel predictions: forward, exact gradients, Adam, I/O.

The network maps the ``t (t-1)`` similarity features of a node to ``t``
attention logits. Masked channels get ``-inf`` before the softmax, so their
weight is exactly zero. Nothing here depends on the feature or label width
of the underlying graph.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChannelMismatch,
    ChecksumMismatch,
    InvalidLabel,
    InvalidSpec,
    ModelFormatError,
    ShapeMismatch,
    VersionMismatch,
)

MAGIC = b"GANY"
FORMAT_VERSION = 1
LOSS_FLOOR = 1e-12


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def init_params(layer_sizes, seed: int = 0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise InvalidSpec(f"need at least input and output sizes >= 1, got {sizes}")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def layer_sizes_for(num_channels: int, hidden) -> list[int]:
    t = int(num_channels)
    return [t * (t - 1), *[int(h) for h in hidden], t]


@dataclass
class AttentionModel:
    params: MlpParams
    channels: list[str]
    mask: np.ndarray  # True = channel may receive attention
    entropy: float
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        t = len(self.channels)
        if self.mask.shape != (t,):
            raise ShapeMismatch(f"mask length {self.mask.shape} does not match {t} channels")
        if not self.mask.any():
            raise InvalidSpec("every channel is masked")
        sizes = self.params.sizes
        if sizes[0] != t * (t - 1) or sizes[-1] != t:
            raise ShapeMismatch(f"layer sizes {sizes} do not fit {t} channels")

    @property
    def num_channels(self) -> int:
        return len(self.channels)


def _forward_cache(params: MlpParams, x: np.ndarray):
    """Pre-activations and activations of every layer."""
    acts = [x]
    pres = []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pres.append(z)
        h = np.maximum(z, 0.0) if k < last else z
        acts.append(h)
    return pres, acts


def _masked_softmax(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_logits(model: AttentionModel, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    want = model.params.sizes[0]
    if feats.shape[-1] != want:
        raise ShapeMismatch(f"expected {want} features per node, got {feats.shape[-1]}")
    pres, _ = _forward_cache(model.params, feats)
    return pres[-1]


def attention_forward(model: AttentionModel, feats: np.ndarray) -> np.ndarray:
    """Attention weights for one node (vector) or a batch of nodes (rows)."""
    return _masked_softmax(attention_logits(model, feats), model.mask)


def fuse(alpha: np.ndarray, preds: np.ndarray) -> np.ndarray:
    """Convex combination of channel predictions.

    ``alpha`` is (t,) with ``preds`` (t, c), or batched (n, t) with (n, t, c).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape[:-1] != alpha.shape:
        raise ShapeMismatch(f"alpha {alpha.shape} does not match predictions {preds.shape}")
    return np.einsum("...t,...tc->...c", alpha, preds)


def nll_loss(ybar, label) -> float | np.ndarray:
    """``-log(max(ybar[label], 1e-12))``; vectorizes over leading rows."""
    ybar = np.asarray(ybar, dtype=np.float64)
    label = np.asarray(label)
    c = ybar.shape[-1]
    if np.any(label < 0) or np.any(label >= c):
        raise InvalidLabel(f"label outside [0, {c})")
    if ybar.ndim == 1:
        return float(-np.log(max(ybar[int(label)], LOSS_FLOOR)))
    picked = ybar[np.arange(len(ybar)), label]
    return -np.log(np.maximum(picked, LOSS_FLOOR))


def batch_loss(model: AttentionModel, feats, preds, labels) -> float:
    alpha = attention_forward(model, feats)
    return float(np.mean(nll_loss(fuse(alpha, preds), labels)))


def backward(model: AttentionModel, feats, preds, labels) -> tuple[float, MlpParams]:
    """Mean batch loss and its exact gradient with respect to every parameter.

    feats: (B, t(t-1)); preds: (B, t, c); labels: (B,)
    """
    feats = np.asarray(feats, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ShapeMismatch("need a non-empty (B, features) batch")
    bsz = len(feats)
    if preds.shape[:2] != (bsz, model.num_channels) or labels.shape != (bsz,):
        raise ShapeMismatch(
            f"batch shapes disagree: feats {feats.shape}, preds {preds.shape}, labels {labels.shape}"
        )
    params = model.params
    pres, acts = _forward_cache(params, feats)
    alpha = _masked_softmax(pres[-1], model.mask)
    ybar = fuse(alpha, preds)
    losses = nll_loss(ybar, labels)
    loss = float(losses.mean())

    rows = np.arange(bsz)
    picked = ybar[rows, labels]
    # the clamp has zero slope below the floor
    dpicked = np.where(picked > LOSS_FLOOR, -1.0 / np.maximum(picked, LOSS_FLOOR), 0.0) / bsz
    dalpha = dpicked[:, None] * preds[rows, :, labels]
    dz = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    dz = np.where(model.mask, dz, 0.0)

    grads = params.zeros_like()
    g = dz
    for k in range(len(params.weights) - 1, -1, -1):
        grads.weights[k] = acts[k].T @ g
        grads.biases[k] = g.sum(axis=0)
        if k > 0:
            g = (g @ params.weights[k].T) * (pres[k - 1] > 0)
    return loss, grads


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update, in place; returns ``(params, state)``."""
    ps, gs = params.arrays(), grads.arrays()
    if len(ps) != len(gs) or any(p.shape != g.shape for p, g in zip(ps, gs)):
        raise ShapeMismatch("gradient shapes do not match parameters")
    if not state.m:
        state.m = [np.zeros_like(p) for p in ps]
        state.v = [np.zeros_like(p) for p in ps]
    elif any(m.shape != p.shape for m, p in zip(state.m, ps)):
        raise ShapeMismatch("optimizer state does not match parameters")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- model files -----------------------------------------------------------
#
# "GANY" | u32 version | u32 t | t x (u16 len, utf-8 name) | mask bits
# | f64 entropy | u32 L | L x u32 layer size | params f64 (W0, b0, W1, ...)
# | 8-byte blake2b checksum of everything before it


def model_to_bytes(model: AttentionModel) -> bytes:
    t = model.num_channels
    out = bytearray(MAGIC)
    out += struct.pack("<II", model.version, t)
    for name in model.channels:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    out += np.packbits(model.mask.astype(np.uint8), bitorder="little").tobytes()
    out += struct.pack("<d", float(model.entropy))
    sizes = model.params.sizes
    out += struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    for a in model.params.arrays():
        out += np.ascontiguousarray(a, dtype="<f8").tobytes()
    out += hashlib.blake2b(bytes(out), digest_size=8).digest()
    return bytes(out)


def model_from_bytes(blob: bytes) -> AttentionModel:
    if blob[:4] != MAGIC[: len(blob[:4])]:
        raise ModelFormatError("not a model file (bad magic)")
    if len(blob) < len(MAGIC) + 8:
        raise ChecksumMismatch("model file is truncated")
    body, check = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != check:
        raise ChecksumMismatch("model file checksum mismatch (truncated or corrupted)")
    pos = 4
    version, t = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    names = []
    for _ in range(t):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        names.append(body[pos:pos + ln].decode("utf-8"))
        pos += ln
    nbytes = (t + 7) // 8
    mask = np.unpackbits(np.frombuffer(body, np.uint8, nbytes, pos), bitorder="little")[:t].astype(bool)
    pos += nbytes
    (entropy,) = struct.unpack_from("<d", body, pos)
    pos += 8
    (nl,) = struct.unpack_from("<I", body, pos)
    pos += 4
    sizes = list(struct.unpack_from(f"<{nl}I", body, pos))
    pos += 4 * nl
    ws, bs = [], []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        ws.append(np.frombuffer(body, "<f8", fi * fo, pos).reshape(fi, fo).astype(np.float64))
        pos += 8 * fi * fo
        bs.append(np.frombuffer(body, "<f8", fo, pos).astype(np.float64))
        pos += 8 * fo
    if pos != len(body):
        raise ModelFormatError(f"{len(body) - pos} trailing bytes in model file")
    return AttentionModel(MlpParams(ws, bs), names, mask, entropy, version)


def save_model(model: AttentionModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path: str | Path, channels=None) -> AttentionModel:
    """Read a model file; ``channels`` (names) guards against a different channel set."""
    model = model_from_bytes(Path(path).read_bytes())
    if channels is not None:
        channels = [getattr(c, "name", c) for c in channels]
        if list(channels) != model.channels:
            raise ChannelMismatch(
                f"model was trained with channels {model.channels}, got {list(channels)}"
            )
    return model
