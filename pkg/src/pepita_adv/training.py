"""Backprop and PEPITA learning rules, momentum SGD and the epoch loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .attacks import AttackConfig, attack_batch
from .model import Mlp, backward_deltas, forward, forward_modulated, predict
from .numerics import DTYPE, Rng, make_rng, mse_error, mse_loss, softmax_jacobian_vp

log = logging.getLogger(__name__)

BP = "bp"
PEPITA = "pepita"
NOISY_BP = "noisy_bp"
RULES = (BP, PEPITA, NOISY_BP)


@dataclass
class TrainConfig:
    rule: str = PEPITA
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 64
    dropout: float = 0.1
    input_dropout: bool = False
    decay_epochs: tuple[int, ...] = (60, 90)
    decay_factor: float = 0.1
    # "lr": step learning-rate decay; "l2": shrink parameters by decay_factor
    # at each decay epoch while keeping the learning rate fixed.
    decay_mode: str = "lr"
    early_stop_metric: str = "natural"  # or "adversarial"
    patience: int = 10
    divergence_epoch: int = 20
    seed: int = 0
    # noisy_bp only: noise norm as a multiple of each gradient array's norm
    noise_level: float = 0.0

    def __post_init__(self):
        self.decay_epochs = tuple(sorted(int(e) for e in self.decay_epochs))
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_mode not in ("lr", "l2"):
            raise ValueError("decay_mode must be 'lr' or 'l2'")
        if self.early_stop_metric not in ("natural", "adversarial"):
            raise ValueError("early_stop_metric must be 'natural' or 'adversarial'")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class UpdateSet:
    """Batch-averaged gradients per layer, before the optimizer."""

    dW: list[np.ndarray]
    db: list[np.ndarray]
    loss: float = 0.0

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.dW, self.db):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self.arrays())


@dataclass
class OptimizerState:
    vW: list[np.ndarray]
    vb: list[np.ndarray]
    momentum: float = 0.9

    @classmethod
    def zeros(cls, model: Mlp, momentum: float = 0.9) -> "OptimizerState":
        return cls(
            [np.zeros_like(layer.W) for layer in model.layers],
            [np.zeros_like(layer.b) for layer in model.layers],
            momentum,
        )


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


# -- gradients ---------------------------------------------------------------


def _batched(x, y):
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    if x.shape[1] == 0:
        raise ValueError("empty batch")
    return x, y


def bp_updates(
    model: Mlp,
    x: np.ndarray,
    y_star: np.ndarray,
    rng: Rng | None = None,
    masks=None,
) -> UpdateSet:
    """Exact gradients of the batch mean of ``0.5 * ||h_L - y*||^2``.

    The output delta goes through the softmax Jacobian; hidden deltas follow
    ``delta_l = (W_{l+1}^T delta_{l+1}) * relu'(z_l)``.
    """
    x, y_star = _batched(x, y_star)
    n = x.shape[1]
    tr = forward(model, x, rng=rng, masks=masks)
    e = mse_error(tr.output, y_star)
    deltas = backward_deltas(model, tr, softmax_jacobian_vp(tr.output, e))
    dW = [d @ h.T / n for d, h in zip(deltas, tr.hs[:-1])]
    db = [d.mean(axis=1) for d in deltas]
    return UpdateSet(dW, db, mse_loss(tr.output, y_star))


def pepita_updates(
    model: Mlp,
    x: np.ndarray,
    y_star: np.ndarray,
    rng: Rng | None = None,
    masks=None,
) -> UpdateSet:
    """Two forward passes; updates from activation differences.

    Hidden layers: ``dW_i = (h_i - h_mod_i) h_mod_{i-1}^T``, ``db_i = h_i - h_mod_i``.
    Output layer: ``dW_L = e h_mod_{L-1}^T``, ``db_L = e``.
    """
    x, y_star = _batched(x, y_star)
    n = x.shape[1]
    tr = forward(model, x, rng=rng, masks=masks)
    e = mse_error(tr.output, y_star)
    mod = forward_modulated(model, x, e, tr.masks)
    L = len(model.layers)
    dW, db = [], []
    for l in range(1, L):
        diff = tr.hs[l] - mod.hs[l]
        dW.append(diff @ mod.hs[l - 1].T / n)
        db.append(diff.mean(axis=1))
    dW.append(e @ mod.hs[L - 1].T / n)
    db.append(e.mean(axis=1))
    return UpdateSet(dW, db, mse_loss(tr.output, y_star))


def noisy_bp_updates(
    model: Mlp,
    x: np.ndarray,
    y_star: np.ndarray,
    noise_level: float,
    noise_rng: Rng,
    rng: Rng | None = None,
    masks=None,
) -> UpdateSet:
    """BP gradients plus isotropic Gaussian noise of norm ``noise_level * ||g||`` per array.

    A control rule: the updates are as misaligned with BP as PEPITA's can be
    made, but the forward pathway is trained exactly as in BP.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    upd = bp_updates(model, x, y_star, rng=rng, masks=masks)
    if noise_level == 0:
        return upd

    def noisy(g):
        z = noise_rng.standard_normal(g.shape)
        nz = np.linalg.norm(z)
        return g + (noise_level * np.linalg.norm(g) / nz) * z if nz > 0 else g

    return UpdateSet([noisy(g) for g in upd.dW], [noisy(g) for g in upd.db], upd.loss)


RULE_UPDATES: dict[str, Callable[..., UpdateSet]] = {BP: bp_updates, PEPITA: pepita_updates}


def rule_for(config: TrainConfig, epoch: int) -> Callable[..., UpdateSet]:
    """Update function for ``config.rule``; noisy BP draws from a per-epoch noise stream."""
    if config.rule != NOISY_BP:
        return RULE_UPDATES[config.rule]
    noise_rng = make_rng(config.seed, "noise", epoch)

    def rule(model, x, y, rng=None, masks=None):
        return noisy_bp_updates(model, x, y, config.noise_level, noise_rng, rng=rng, masks=masks)

    return rule


def sgd_momentum_step(model: Mlp, state: OptimizerState, updates: UpdateSet, lr: float) -> None:
    """Classical momentum: ``v <- m v + g``; ``p <- p - lr v``. Mutates in place."""
    m = state.momentum
    for i, layer in enumerate(model.layers):
        state.vW[i] *= m
        state.vW[i] += updates.dW[i]
        state.vb[i] *= m
        state.vb[i] += updates.db[i]
        layer.W -= lr * state.vW[i]
        layer.b -= lr * state.vb[i]


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if config.decay_mode != "lr":
        return config.lr
    n = sum(1 for d in config.decay_epochs if d <= epoch)
    return config.lr * config.decay_factor**n


# -- epoch loop --------------------------------------------------------------


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.epochs]
        lines.append(json.dumps({"summary": self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RunRecord":
        rec = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "summary" in obj:
                rec.summary = obj["summary"]
            else:
                rec.epochs.append(obj)
        return rec

    def deterministic_view(self) -> dict:
        """Everything except wall-clock timings."""
        return {
            "epochs": [{k: v for k, v in r.items() if k != "wall_ms"} for r in self.epochs],
            "summary": {k: v for k, v in self.summary.items() if k != "wall_ms"},
        }


def iterate_minibatches(n: int, batch_size: int, rng: Rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train(
    model: Mlp,
    data,
    config: TrainConfig,
    attack_augment=None,
    val_attack=None,
    epoch_callback: Callable[[int, Mlp], dict] | None = None,
) -> tuple[Mlp, RunRecord]:
    """Train ``model`` (a copy is made) and return the best epoch by the
    configured early-stopping metric together with its RunRecord.

    ``data`` needs ``x_train``, ``y_train`` (one-hot), ``labels_val`` and
    ``x_val`` (samples in rows). With ``attack_augment`` each mini-batch is
    doubled with adversarial counterparts crafted against the current
    weights. ``val_attack`` enables adversarial validation accuracy; it is
    required when early stopping on the adversarial metric.
    """
    if config.early_stop_metric == "adversarial" and val_attack is None:
        raise ValueError("adversarial early stopping needs a val_attack")

    model = model.copy()
    model.dropout_rate = config.dropout
    model.input_dropout = config.input_dropout
    opt = OptimizerState.zeros(model, config.momentum)
    record = RunRecord(summary={"rule": config.rule, "lr": config.lr, "seed": config.seed})

    x_train, y_train = data.x_train, data.y_train
    labels_train = np.argmax(y_train, axis=1)
    n_train = x_train.shape[0]
    chance = 1.0 / y_train.shape[1]

    best_model, best_score, best_epoch = model.copy(), -np.inf, -1
    since_best = 0
    status = "completed"
    t_run = time.perf_counter()

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        if config.decay_mode == "l2" and epoch in config.decay_epochs:
            for layer in model.layers:
                layer.W *= 1.0 - config.decay_factor
                layer.b *= 1.0 - config.decay_factor
        shuffle_rng = make_rng(config.seed, "shuffle", epoch)
        dropout_rng = make_rng(config.seed, "dropout", epoch)
        rule = rule_for(config, epoch)
        losses, counts = [], []
        for bi, idx in enumerate(iterate_minibatches(n_train, config.batch_size, shuffle_rng)):
            xb = x_train[idx].T
            yb = y_train[idx].T
            if attack_augment is not None:
                x_adv = attack_batch(
                    model, xb, labels_train[idx], attack_augment,
                    seed=config.seed, sample_ids=idx, keys=(1, epoch),
                )
                xb = np.concatenate([xb, x_adv], axis=1)
                yb = np.concatenate([yb, yb], axis=1)
            with np.errstate(over="ignore", invalid="ignore"):
                # overflow here is reported as divergence just below
                upd = rule(model, xb, yb, rng=dropout_rng)
            if not np.isfinite(upd.loss) or not all(np.all(np.isfinite(a)) for a in upd.arrays()):
                status = "diverged"
                break
            sgd_momentum_step(model, opt, upd, lr)
            losses.append(upd.loss)
            counts.append(xb.shape[1])
        if status == "diverged":
            break
        params_finite = all(np.all(np.isfinite(l.W)) and np.all(np.isfinite(l.b)) for l in model.layers)
        if not params_finite:
            status = "diverged"
            break

        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.average(losses, weights=counts)) if losses else 0.0,
            "val_nat_acc": evaluate(model, data.x_val, data.labels_val),
        }
        if val_attack is not None:
            entry["val_adv_acc"] = evaluate(
                model, data.x_val_adv, data.labels_val_adv, val_attack, seed=config.seed
            )
        if epoch_callback is not None:
            entry.update(epoch_callback(epoch, model))
        entry["wall_ms"] = round(1000 * (time.perf_counter() - t0), 3)
        record.epochs.append(entry)
        log.debug("epoch %d %s", epoch, entry)

        score = entry["val_nat_acc"] if config.early_stop_metric == "natural" else entry["val_adv_acc"]
        if score > best_score:
            best_score, best_epoch, best_model = score, epoch, model.copy()
            since_best = 0
        else:
            since_best += 1

        if epoch + 1 >= config.divergence_epoch and entry["val_nat_acc"] <= 1.5 * chance:
            status = "stalled"
            break
        if since_best >= config.patience:
            status = "early_stopped"
            break

    record.summary.update(
        status=status,
        converged=status in ("completed", "early_stopped"),
        best_epoch=best_epoch,
        best_score=None if best_epoch < 0 else float(best_score),
        metric=config.early_stop_metric,
        epochs_run=len(record.epochs),
        wall_ms=round(1000 * (time.perf_counter() - t_run), 3),
    )
    if status == "diverged":
        log.warning("run diverged (rule=%s lr=%g seed=%d)", config.rule, config.lr, config.seed)
        raise TrainingDiverged(f"non-finite loss or parameters at epoch {len(record.epochs)}", record)
    if best_epoch >= 0:
        for epoch_entry in record.epochs:
            if epoch_entry["epoch"] == best_epoch:
                record.summary["best"] = {k: v for k, v in epoch_entry.items() if k != "wall_ms"}
    return best_model, record


def evaluate(
    model: Mlp,
    x: np.ndarray,
    labels: np.ndarray,
    attack: AttackConfig | None = None,
    seed: int = 0,
    chunk: int = 2000,
) -> float:
    """Fraction of correct argmax predictions over ``x`` (samples in rows).

    With ``attack`` every sample is first perturbed against ``model``; the
    random start of sample ``i`` comes from the substream ``(seed, i)``.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("nothing to evaluate")
    correct = 0
    for start in range(0, n, chunk):
        xb = x[start : start + chunk].T
        lb = np.asarray(labels[start : start + chunk])
        if attack is not None:
            xb = attack_batch(model, xb, lb, attack, seed=seed, sample_ids=np.arange(start, start + xb.shape[1]))
        correct += int(np.sum(predict(model, xb) == lb))
    return correct / n


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["decay_epochs"] = list(config.decay_epochs)
    return d
