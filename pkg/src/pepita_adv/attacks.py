"""White-box l-infinity attacks through the transposed forward pathway.

Both attacks maximise the training loss ``0.5 * ||softmax(z_L) - y*||^2`` and
always run on the eval-mode network (no dropout). The gradient only depends
on the forward weights, so BP- and PEPITA-trained models are attacked the
same way; the PEPITA feedback matrix F is never used here.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .model import Mlp, backward_deltas, forward_frozen, model_hash
from .numerics import DTYPE, Rng, make_rng, softmax_jacobian_vp

FGSM = "fgsm"
PGD = "pgd"

TENSOR_MAGIC = b"PEPITATNS"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class AttackConfig:
    kind: str = PGD
    epsilon: float = 0.3
    step: float = 0.1
    iterations: int = 40
    random_start: bool = True
    pixel_min: float = 0.0
    pixel_max: float = 1.0

    def __post_init__(self):
        if self.kind not in (FGSM, PGD):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0 or self.step <= 0 or self.iterations < 1:
            raise ValueError("need epsilon >= 0, step > 0 and iterations >= 1")
        if not self.pixel_min < self.pixel_max:
            raise ValueError("pixel_min must be below pixel_max")

    @classmethod
    def fgsm(cls, epsilon: float = 0.3, **kw) -> "AttackConfig":
        kw.setdefault("step", epsilon if epsilon > 0 else 0.1)
        return cls(kind=FGSM, epsilon=epsilon, iterations=1, random_start=False, **kw)

    @classmethod
    def pgd(cls, epsilon: float = 0.3, step: float = 0.1, iterations: int = 40, **kw) -> "AttackConfig":
        return cls(kind=PGD, epsilon=epsilon, step=step, iterations=iterations, **kw)

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


def _one_hot_cols(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    y = np.zeros((n_classes, labels.size), dtype=DTYPE)
    y[labels, np.arange(labels.size)] = 1.0
    return y


def _targets(model: Mlp, y_star, n: int) -> np.ndarray:
    """Accept either class indices or one-hot columns."""
    y = np.asarray(y_star)
    if y.ndim == 2 and y.shape[0] == model.output_dim:
        return y.astype(DTYPE)
    if y.ndim == 1 and y.shape[0] == model.output_dim and n == 1 and y.dtype.kind == "f":
        return y.astype(DTYPE)[:, None]
    return _one_hot_cols(y, model.output_dim)


def attack_loss(model: Mlp, x: np.ndarray, y_star) -> np.ndarray:
    """Per-sample ``0.5 * ||h_L - y*||^2`` on the eval network."""
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    X = x[:, None] if single else x
    Y = _targets(model, y_star, X.shape[1])
    out = forward_frozen(model, X).output
    loss = 0.5 * np.sum((out - Y) ** 2, axis=0)
    return float(loss[0]) if single else loss


def input_gradient(model: Mlp, x: np.ndarray, y_star) -> np.ndarray:
    """``dL/dx = W_1^T delta_1`` with the same delta chain as backprop."""
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    X = x[:, None] if single else x
    Y = _targets(model, y_star, X.shape[1])
    tr = forward_frozen(model, X)
    deltas = backward_deltas(model, tr, softmax_jacobian_vp(tr.output, tr.output - Y))
    g = model.layers[0].W.T @ deltas[0]
    return g[:, 0] if single else g


def project(x_adv: np.ndarray, x0: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Clamp into the epsilon ball around ``x0`` and then into the pixel box.

    Rounding in ``x0 +/- eps`` can leave ``|x_adv - x0|`` one ulp above
    epsilon; those entries are stepped toward ``x0`` until the bound holds.
    """
    eps = cfg.epsilon
    out = np.clip(x_adv, x0 - eps, x0 + eps)
    out = np.clip(out, cfg.pixel_min, cfg.pixel_max)
    while True:
        over = np.abs(out - x0) > eps
        if not over.any():
            return out
        out[over] = np.nextafter(out[over], x0[over])


def fgsm(model: Mlp, x: np.ndarray, y_star, cfg: AttackConfig | None = None) -> np.ndarray:
    """One signed-gradient step of size epsilon, then clipped. ``sign(0) = 0``."""
    cfg = cfg or AttackConfig.fgsm()
    x0 = np.asarray(x, dtype=DTYPE)
    g = input_gradient(model, x0, y_star)
    return project(x0 + cfg.epsilon * np.sign(g), x0, cfg)


def pgd(
    model: Mlp,
    x: np.ndarray,
    y_star,
    cfg: AttackConfig | None = None,
    rng: Rng | None = None,
    start: np.ndarray | None = None,
) -> np.ndarray:
    """Iterated signed-gradient steps projected onto the epsilon ball and pixel box.

    With ``cfg.random_start`` the first iterate is ``x0 + U(-eps, eps)``
    (drawn from ``rng`` unless an explicit ``start`` offset is given).
    """
    cfg = cfg or AttackConfig.pgd()
    x0 = np.asarray(x, dtype=DTYPE)
    xk = x0.copy()
    if cfg.random_start:
        if start is None:
            if rng is None:
                raise ValueError("random start needs an rng")
            start = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape)
        xk = project(x0 + start, x0, cfg)
    for _ in range(cfg.iterations):
        g = input_gradient(model, xk, y_star)
        xk = project(xk + cfg.step * np.sign(g), x0, cfg)
    return xk


def random_starts(cfg: AttackConfig, d: int, seed: int, sample_ids, keys=()) -> np.ndarray:
    """One uniform start per sample, each from its own ``(seed, *keys, id)`` stream."""
    cols = [make_rng(seed, "attack", *keys, int(i)).uniform(-cfg.epsilon, cfg.epsilon, d) for i in sample_ids]
    return np.stack(cols, axis=1) if cols else np.zeros((d, 0))


def attack_batch(
    model: Mlp,
    x: np.ndarray,
    y_star,
    cfg: AttackConfig,
    seed: int = 0,
    sample_ids=None,
    keys=(),
) -> np.ndarray:
    """Attack every column of ``x`` independently.

    ``sample_ids`` names each column's random-start substream, so a sample's
    adversarial counterpart does not depend on the rest of the batch.
    """
    X = np.asarray(x, dtype=DTYPE)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[1]
    if sample_ids is None:
        sample_ids = np.arange(n)
    if cfg.kind == FGSM:
        return fgsm(model, X, y_star, cfg)
    start = random_starts(cfg, X.shape[0], seed, sample_ids, keys) if cfg.random_start else None
    return pgd(model, X, y_star, cfg, start=start)


# -- adversarial dumps -------------------------------------------------------


def tensor_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    """Magic, u32 version, u32 count, then per tensor: u32 name length, name,
    u32 ndim, u32 dims, little-endian float64 data."""
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<II", TENSOR_VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode()
        buf.write(struct.pack("<I", len(raw_name)) + raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def read_tensors(raw: bytes) -> dict[str, np.ndarray]:
    if raw[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    off = len(TENSOR_MAGIC)
    version, count = struct.unpack_from("<II", raw, off)
    off += 8
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor file version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if off + 8 * size > len(raw):
            raise ValueError(f"tensor file truncated at offset {off}")
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(DTYPE).reshape(shape)
        off += 8 * size
    return out


def dump_adversarial(
    path: str | Path,
    x_adv: np.ndarray,
    labels: np.ndarray,
    cfg: AttackConfig,
    seed: int,
    model: Mlp,
) -> Path:
    """Write adversarial samples plus a JSON manifest next to them."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = tensor_bytes({"x_adv": x_adv, "labels": np.asarray(labels, dtype=DTYPE)})
    path.write_bytes(raw)
    manifest = {
        "attack": cfg.kind,
        "epsilon": cfg.epsilon,
        "step": cfg.step,
        "iterations": cfg.iterations,
        "random_start": cfg.random_start,
        "seed": seed,
        "model_hash": model_hash(model),
        "sha256": hashlib.sha256(raw).hexdigest(),
        "config": asdict(cfg),
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
