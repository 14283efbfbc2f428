"""Dense float64 kernels, activations, the MSE loss and seeded RNG streams.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Batched
quantities keep samples in columns, so ``W @ H`` propagates a whole batch.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

Rng = np.random.Generator

# Independent purposes get independent streams, so toggling e.g. dropout does
# not shift the shuffling or initialization draws.
STREAMS = {
    "init": 1,
    "dropout": 2,
    "shuffle": 3,
    "attack": 4,
    "split": 5,
    "noise": 6,
}


class ShapeError(ValueError):
    """Operand dimensions violate an operation's contract."""


def make_rng(seed: int, purpose: str, *keys: int) -> Rng:
    """Return a Philox generator for ``(seed, purpose, *keys)``.

    Philox is counter based, so the same key gives the same stream on every
    platform. ``keys`` lets callers derive sub-streams, e.g. one per sample.
    """
    if purpose not in STREAMS:
        raise KeyError(f"unknown rng purpose {purpose!r}")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, STREAMS[purpose], *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_deriv(z: np.ndarray) -> np.ndarray:
    # tie at z == 0 goes to 0
    return (z > 0).astype(DTYPE)


def softmax(z: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over axis 0 (the class axis)."""
    z = np.asarray(z, dtype=DTYPE)
    shifted = z - z.max(axis=0, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=0, keepdims=True)


def softmax_jacobian_vp(s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Return ``J.T @ v`` for the softmax Jacobian ``J_ij = s_i (d_ij - s_j)``.

    J is symmetric, so this is also ``J @ v``. Works column-wise on batches.
    """
    return s * (v - np.sum(s * v, axis=0, keepdims=True))


def mse_loss(h_out: np.ndarray, y_star: np.ndarray) -> float:
    """Mean squared error, averaged over outputs and (if batched) samples."""
    if np.shape(h_out) != np.shape(y_star):
        raise ShapeError(f"loss operands differ: {np.shape(h_out)} vs {np.shape(y_star)}")
    return float(np.mean((np.asarray(h_out) - np.asarray(y_star)) ** 2))


def mse_error(h_out: np.ndarray, y_star: np.ndarray) -> np.ndarray:
    """Output error ``e = h_L - y*``; the 2/n factor of the MSE gradient is dropped."""
    if np.shape(h_out) != np.shape(y_star):
        raise ShapeError(f"error operands differ: {np.shape(h_out)} vs {np.shape(y_star)}")
    return np.asarray(h_out, dtype=DTYPE) - np.asarray(y_star, dtype=DTYPE)


def he_uniform(
    rng: Rng, rows: int, cols: int, scale: float = 1.0, fan_in: int | None = None
) -> np.ndarray:
    """Uniform draws on ``[-b, b]`` with ``b = scale * sqrt(6 / fan_in)``.

    ``fan_in`` defaults to ``cols``, the input width of a ``(out, in)`` weight.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    bound = scale * np.sqrt(6.0 / (cols if fan_in is None else fan_in))
    return rng.uniform(-bound, bound, size=(rows, cols))
