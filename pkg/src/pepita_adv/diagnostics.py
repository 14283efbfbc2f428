"""Gradient checks, PEPITA/BP update alignment and noisy-BP calibration.

Noisy BP perturbs exact gradients so that their cosine to the clean gradient
matches PEPITA's, to test whether misalignment alone explains robustness.
It is exposed as the ``noisy_bp`` training rule but not used by the tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import attack_loss, input_gradient
from .model import Mlp, forward, sample_masks
from .numerics import DTYPE, Rng
from .training import UpdateSet, bp_updates, noisy_bp_updates, pepita_updates

# Entries smaller than this are compared absolutely rather than relatively:
# central differences carry ~eps*|L|/h of roundoff no matter how small the entry.
REL_ERR_FLOOR = 1e-4

# The finite-difference oracle runs its own forward pass in extended precision
# (80-bit on x86), so its roundoff sits far below the float64 analytic values.
ORACLE_DTYPE = np.longdouble


@dataclass
class FdResult:
    max_rel_error: float
    worst: tuple  # (what, layer, index)
    checked: int
    skipped: int

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_rel_error < tol


def batch_loss(model: Mlp, x: np.ndarray, y: np.ndarray, masks=None) -> float:
    """Mean over the batch of ``0.5 * ||h_L - y||^2``."""
    tr = forward(model, x, masks=masks)
    out = tr.output if tr.output.ndim == 2 else tr.output[:, None]
    y = y if y.ndim == 2 else y[:, None]
    return float(np.mean(0.5 * np.sum((out - y) ** 2, axis=0)))


class _Oracle:
    """Extended-precision copy of a network and batch, written independently
    of the model module, evaluating the batch loss and hidden pre-activations."""

    def __init__(self, model: Mlp, x, y, masks):
        ld = ORACLE_DTYPE
        self.params = [[layer.W.astype(ld), layer.b.astype(ld)] for layer in model.layers]
        self.acts = [layer.activation for layer in model.layers]
        self.x = x.astype(ld)
        self.y = y.astype(ld)
        keep = ld(1) - ld(model.dropout_rate)
        self.scales = [None if m is None else (m if m.ndim == 2 else m[:, None]).astype(ld) / keep for m in (masks or [None] * len(model.layers))]

    def __call__(self):
        h = self.x if self.scales[0] is None else self.x * self.scales[0]
        zs = []
        for l, ((W, b), act) in enumerate(zip(self.params, self.acts), start=1):
            z = W @ h + b[:, None]
            if act == "softmax":
                ez = np.exp(z - z.max(axis=0, keepdims=True))
                h = ez / ez.sum(axis=0, keepdims=True)
            else:
                zs.append(z)
                h = np.maximum(z, 0) if act == "relu" else z
                if self.scales[l] is not None:
                    h = h * self.scales[l]
        loss = np.mean(np.sum((h - self.y) ** 2, axis=0) / 2)
        return loss, zs

    def central(self, arr, idx, h):
        """Central difference of the loss w.r.t. ``arr[idx]`` plus a kink flag."""
        orig = arr[idx]
        step = ORACLE_DTYPE(h)
        arr[idx] = orig + step
        lp, zp = self()
        arr[idx] = orig - step
        lm, zm = self()
        arr[idx] = orig
        return float((lp - lm) / (2 * step)), zp, zm


def _kink(zs_base, zs_pert, h) -> bool:
    for zb, zp in zip(zs_base, zs_pert):
        if np.any(np.abs(zp) < 10 * h) or np.any(np.sign(zp) != np.sign(zb)):
            return True
    return False


def _rel(a, n):
    return abs(a - n) / max(abs(a), abs(n), REL_ERR_FLOOR)


def finite_diff_check(
    model: Mlp,
    x: np.ndarray,
    y: np.ndarray,
    which: str = "weights",
    h: float = 1e-6,
    masks=None,
    analytic=None,
) -> FdResult:
    """Compare analytic gradients against central differences of the batch loss.

    ``which`` is ``"weights"`` (every W and b, via :func:`bp_updates`) or
    ``"input"`` (the attack gradient). ``analytic`` substitutes a gradient to
    check (an UpdateSet or an input-gradient array), e.g. a corrupted one.
    Coordinates whose perturbation puts a ReLU pre-activation within ``10 h``
    of its kink are skipped. Relative error is ``|a - n| / max(|a|, |n|, 1e-4)``.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError("h must be in [1e-8, 1e-4]")
    if model.n_params() > 1000:
        raise ValueError("finite differences are only meant for small nets")
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    if which == "input" and masks is not None and any(m is not None for m in masks):
        raise ValueError("input gradients are taken on the eval network")
    oracle = _Oracle(model, x, y, masks)
    _, zs0 = oracle()
    worst, worst_at, checked, skipped = 0.0, None, 0, 0

    if which == "weights":
        upd = analytic if analytic is not None else bp_updates(model, x, y, masks=masks)
        targets = []
        for li, (W, b) in enumerate(oracle.params):
            targets += [("W", li, W, upd.dW[li]), ("b", li, b, upd.db[li])]
    elif which == "input":
        # attack gradient is per sample; the batch loss is their mean
        g = analytic if analytic is not None else input_gradient(model, x, y) / x.shape[1]
        targets = [("x", 0, oracle.x, g)]
    else:
        raise ValueError("which must be 'weights' or 'input'")

    for name, li, arr, grad in targets:
        for idx in np.ndindex(arr.shape):
            fd, zp, zm = oracle.central(arr, idx, h)
            if _kink(zs0, zp, h) or _kink(zs0, zm, h):
                skipped += 1
                continue
            err = _rel(grad[idx], fd)
            checked += 1
            if err > worst:
                worst, worst_at = err, (name, li, idx)
    return FdResult(float(worst), worst_at, checked, skipped)


# -- alignment ---------------------------------------------------------------


@dataclass
class LayerAlignment:
    cosine: float | None
    angle_deg: float | None
    norm_bp: float
    norm_pepita: float


@dataclass
class AlignmentReport:
    layers: list[LayerAlignment] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"layers": [vars(l) for l in self.layers]}


def cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= eps or nb <= eps:
        return None
    return float(np.clip(np.vdot(a, b) / (na * nb), -1.0, 1.0))


def compare_updates(bp: UpdateSet, pep: UpdateSet) -> AlignmentReport:
    report = AlignmentReport()
    for a, b in zip(bp.dW, pep.dW):
        c = cosine(a, b)
        report.layers.append(
            LayerAlignment(
                cosine=c,
                angle_deg=None if c is None else float(np.degrees(np.arccos(c))),
                norm_bp=float(np.linalg.norm(a)),
                norm_pepita=float(np.linalg.norm(b)),
            )
        )
    return report


def alignment(model: Mlp, x: np.ndarray, y: np.ndarray, rng: Rng | None = None) -> AlignmentReport:
    """Per-layer cosine between the BP and PEPITA weight updates on one batch.

    Both rules see the same dropout masks (drawn from ``rng`` if given).
    """
    x = np.asarray(x, dtype=DTYPE)
    n = 1 if x.ndim == 1 else x.shape[1]
    masks = sample_masks(model, n, rng)
    if x.ndim == 1:
        masks = [None if m is None else m[:, 0] for m in masks]
    return compare_updates(
        bp_updates(model, x, y, masks=masks),
        pepita_updates(model, x, y, masks=masks),
    )


# -- noisy BP ----------------------------------------------------------------


def noise_level_for_cosine(c: float) -> float:
    """Noise-to-signal norm ratio whose expected cosine to the signal is ``c``.

    Isotropic noise in high dimension is nearly orthogonal to the signal, so
    ``cos ~ 1 / sqrt(1 + r^2)`` for norm ratio ``r``.
    """
    if not 0 < c <= 1:
        raise ValueError("only positive cosines can be matched")
    return float(np.sqrt(1.0 / c**2 - 1.0))


# Exact BP with scaled isotropic noise; see training.noisy_bp_updates.
noisy_bp_probe = noisy_bp_updates


def attack_gradient_alignment(model: Mlp, x: np.ndarray, y) -> dict:
    """Loss and input-gradient norm on a batch; a cheap robustness probe."""
    g = input_gradient(model, x, y)
    return {
        "mean_loss": float(np.mean(attack_loss(model, x, y))),
        "mean_grad_norm": float(np.mean(np.linalg.norm(np.atleast_2d(g.T), axis=1))),
    }
