"""Fully connected ReLU/softmax network with standard, modulated and frozen passes.

Batches are column-major in the sense that each column is one sample: ``x`` of
shape ``(input_dim, n)``. A 1-D ``x`` is treated as a single sample and every
array in the returned trace is squeezed back to 1-D.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import DTYPE, Rng, ShapeError, he_uniform, relu, relu_deriv, softmax

RELU = "relu"
SOFTMAX = "softmax"
IDENTITY = "identity"  # hidden layers only; for exactness tests of the gradient checker

CHECKPOINT_MAGIC = b"PEPITAMLP"
CHECKPOINT_VERSION = 1


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = RELU

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=DTYPE)
        self.b = np.asarray(self.b, dtype=DTYPE)
        if self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"bias {self.b.shape} does not match weights {self.W.shape}")
        if self.activation not in (RELU, SOFTMAX, IDENTITY):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Mlp:
    layers: list[Layer]
    F: np.ndarray  # (input_dim, output_dim)
    dropout_rate: float = 0.1
    input_dropout: bool = False

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=DTYPE)
        if not self.layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.W.shape[1] != prev.W.shape[0]:
                raise ShapeError("layer dimensions do not chain")
        if any(layer.activation == SOFTMAX for layer in self.layers[:-1]):
            raise ValueError("only the output layer may be softmax")
        if self.layers[-1].activation != SOFTMAX:
            raise ValueError("the output layer must be softmax")
        if self.F.shape != (self.input_dim, self.output_dim):
            raise ShapeError(f"F must be {(self.input_dim, self.output_dim)}, got {self.F.shape}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @classmethod
    def create(
        cls,
        sizes: list[int],
        rng: Rng,
        f_scale: float = 0.05,
        dropout_rate: float = 0.1,
        input_dropout: bool = False,
    ) -> "Mlp":
        """He-uniform weights, zero biases and a fixed feedback matrix F.

        ``sizes`` lists the widths from input to output, e.g. ``[784, 1024, 10]``.
        F is drawn with the He bound of the input width, scaled by ``f_scale``;
        a bound from its 10 output columns makes the modulation ~9x larger
        and PEPITA diverges at the tuned MNIST learning rates.
        """
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            act = SOFTMAX if i == len(sizes) - 2 else RELU
            layers.append(Layer(he_uniform(rng, fan_out, fan_in), np.zeros(fan_out), act))
        F = he_uniform(rng, sizes[0], sizes[-1], scale=f_scale, fan_in=sizes[0])
        return cls(layers, F, dropout_rate=dropout_rate, input_dropout=input_dropout)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.W.shape[0] for layer in self.layers]

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def n_params(self) -> int:
        return sum(layer.W.size + layer.b.size for layer in self.layers)


@dataclass
class ForwardTrace:
    """Pre-activations ``zs[l]`` and activations ``hs[l]`` (``hs[0]`` is the input).

    ``masks[l]`` is the binary dropout mask applied to ``hs[l]`` for
    ``l < L``; ``None`` means no dropout on that layer.
    """

    zs: list[np.ndarray]
    hs: list[np.ndarray]
    masks: list[np.ndarray | None]
    keep_prob: float = 1.0

    @property
    def output(self) -> np.ndarray:
        return self.hs[-1]


@dataclass
class ModulatedTrace(ForwardTrace):
    x_mod: np.ndarray = field(default=None)


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    if single:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != dim:
        raise ShapeError(f"expected input with leading dimension {dim}, got {x.shape}")
    return x, single


def _squeeze(arrs, single):
    if not single:
        return list(arrs)
    return [None if a is None else a[:, 0] for a in arrs]


def sample_masks(model: Mlp, n: int, rng: Rng | None) -> list[np.ndarray | None]:
    """Dropout masks for one batch; all ``None`` in eval mode or when p == 0."""
    L = len(model.layers)
    masks: list[np.ndarray | None] = [None] * L
    if rng is None or model.dropout_rate == 0.0:
        return masks
    keep = 1.0 - model.dropout_rate
    widths = model.sizes
    for l in range(L):
        if l == 0 and not model.input_dropout:
            continue
        masks[l] = (rng.random((widths[l], n)) < keep).astype(DTYPE)
    return masks


def _propagate(model: Mlp, h0: np.ndarray, masks, keep: float):
    hs = [h0 if masks[0] is None else h0 * masks[0] / keep]
    zs = []
    for l, layer in enumerate(model.layers, start=1):
        z = layer.W @ hs[-1] + layer.b[:, None]
        if layer.activation == SOFTMAX:
            h = softmax(z)
        else:
            h = relu(z) if layer.activation == RELU else z
            if masks[l] is not None:
                h = h * masks[l] / keep
        zs.append(z)
        hs.append(h)
    return zs, hs


def forward(
    model: Mlp,
    x: np.ndarray,
    rng: Rng | None = None,
    masks: list[np.ndarray | None] | None = None,
) -> ForwardTrace:
    """Standard forward pass.

    Passing ``rng`` selects training mode: inverted-dropout masks are drawn
    from it. Without ``rng`` the pass runs in eval mode with no dropout.
    Explicit ``masks`` (e.g. from an earlier trace) override both.
    """
    X, single = _as_batch(x, model.input_dim)
    if masks is None:
        masks = sample_masks(model, X.shape[1], rng)
    else:
        masks = [None if m is None else (m[:, None] if m.ndim == 1 else m) for m in masks]
    keep = 1.0 - model.dropout_rate
    zs, hs = _propagate(model, X, masks, keep)
    return ForwardTrace(_squeeze(zs, single), _squeeze(hs, single), _squeeze(masks, single), keep)


def forward_modulated(
    model: Mlp, x: np.ndarray, e: np.ndarray, masks: list[np.ndarray | None]
) -> ModulatedTrace:
    """Second pass on ``x + F e`` reusing the standard pass's dropout masks."""
    X, single = _as_batch(x, model.input_dim)
    E, _ = _as_batch(e, model.output_dim)
    if E.shape[1] != X.shape[1]:
        raise ShapeError("error batch size differs from input batch size")
    masks = [None if m is None else (m[:, None] if m.ndim == 1 else m) for m in masks]
    keep = 1.0 - model.dropout_rate
    x_mod = X + model.F @ E
    zs, hs = _propagate(model, x_mod, masks, keep)
    return ModulatedTrace(
        _squeeze(zs, single),
        _squeeze(hs, single),
        _squeeze(masks, single),
        keep,
        x_mod=x_mod[:, 0] if single else x_mod,
    )


def forward_frozen(model: Mlp, x: np.ndarray) -> ForwardTrace:
    """Eval-mode pass used by attacks and evaluation."""
    return forward(model, x)


def predict_proba(model: Mlp, x: np.ndarray) -> np.ndarray:
    return forward_frozen(model, x).output


def predict(model: Mlp, x: np.ndarray) -> np.ndarray | int:
    """Argmax class; ties go to the lowest index."""
    out = predict_proba(model, x)
    if out.ndim == 1:
        return int(np.argmax(out))
    return np.argmax(out, axis=0)


def backward_deltas(model: Mlp, trace, delta_out: np.ndarray) -> list[np.ndarray]:
    """Propagate the output delta down through the transposed weights.

    Returns ``deltas[l-1]`` for layers ``l = 1..L`` (batched, samples in columns).
    Dropout masks of the trace are applied exactly as in the forward pass.
    """
    L = len(model.layers)
    deltas = [None] * L
    deltas[-1] = delta_out
    for l in range(L - 1, 0, -1):  # hidden layer index l (1-based)
        d = model.layers[l].W.T @ deltas[l]
        if model.layers[l - 1].activation == RELU:
            d = d * relu_deriv(trace.zs[l - 1])
        mask = trace.masks[l]
        if mask is not None:
            d = d * mask / trace.keep_prob
        deltas[l - 1] = d
    return deltas


# -- checkpoints -------------------------------------------------------------


def checkpoint_bytes(model: Mlp) -> bytes:
    """Binary layout: magic, u32 version, u32 layer count, u32 (out, in) per
    layer, then little-endian float64 W and b per layer, then F."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(model.layers)))
    for layer in model.layers:
        buf.write(struct.pack("<II", *layer.W.shape))
    for layer in model.layers:
        buf.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(model.F, dtype="<f8").tobytes())
    return buf.getvalue()


def model_hash(model: Mlp) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def save_checkpoint(model: Mlp, path: str | Path, meta: dict | None = None) -> Path:
    """Write ``path`` plus a ``.json`` sidecar with dropout settings and ``meta``."""
    if any(layer.activation == IDENTITY for layer in model.layers):
        raise ValueError("checkpoints only store ReLU/softmax networks")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    sidecar = {
        "dropout_rate": model.dropout_rate,
        "input_dropout": model.input_dropout,
        "sizes": model.sizes,
        "sha256": model_hash(model),
    }
    sidecar.update(meta or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[Mlp, dict]:
    path = Path(path)
    raw = path.read_bytes()
    sidecar_path = path.with_suffix(".json")
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    model = model_from_bytes(raw, meta.get("dropout_rate", 0.1), meta.get("input_dropout", False))
    return model, meta


def model_from_bytes(raw: bytes, dropout_rate: float = 0.1, input_dropout: bool = False) -> Mlp:
    n_magic = len(CHECKPOINT_MAGIC)
    if raw[:n_magic] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = n_magic
    version, n_layers = struct.unpack_from("<II", raw, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", raw, off))
        off += 8

    def take(count, shape):
        nonlocal off
        nbytes = 8 * count
        if off + nbytes > len(raw):
            raise ValueError(f"checkpoint truncated at offset {off}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(DTYPE).reshape(shape)
        off += nbytes
        return arr

    layers = []
    for i, (rows, cols) in enumerate(dims):
        W = take(rows * cols, (rows, cols))
        b = take(rows, (rows,))
        layers.append(Layer(W, b, SOFTMAX if i == n_layers - 1 else RELU))
    in_dim, out_dim = dims[0][1], dims[-1][0]
    F = take(in_dim * out_dim, (in_dim, out_dim))
    if off != len(raw):
        raise ValueError(f"trailing bytes after offset {off}")
    return Mlp(layers, F, dropout_rate=dropout_rate, input_dropout=input_dropout)
