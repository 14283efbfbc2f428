"""Learning-rate grid search, seed sweeps, trade-off curves and table output."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .data import Dataset, load_raw, prepare
from .model import Mlp, save_checkpoint
from .numerics import make_rng
from .training import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger(__name__)

# Learning rates tuned at full scale, per (table, rule, dataset).
TUNED_ETAS = {
    "natural": {
        "bp": {"mnist": 0.123, "fmnist": 0.051, "cifar10": 0.008, "cifar100": 0.035},
        "pepita": {"mnist": 0.255, "fmnist": 0.016, "cifar10": 0.012, "cifar100": 0.029},
    },
    "natural-advsel": {
        "bp": {"mnist": 0.378, "fmnist": 0.273, "cifar10": 0.039, "cifar100": 0.180},
        "pepita": {"mnist": 0.378, "fmnist": 0.037, "cifar10": 0.025, "cifar100": 0.061},
    },
    "pgd": {
        "bp": {"mnist": 0.052, "fmnist": 0.030, "cifar10": 0.012, "cifar100": 0.014},
        "pepita": {"mnist": 0.067, "fmnist": 0.012, "cifar10": 0.012, "cifar100": 0.021},
    },
    "fgsm": {
        "bp": {"mnist": 0.097, "fmnist": 0.010, "cifar10": 0.012, "cifar100": 0.027},
        "pepita": {"mnist": 0.097, "fmnist": 0.027, "cifar10": 0.016, "cifar100": 0.041},
    },
}

# Full-scale test accuracies (mean, std) in percent for MNIST, used by the
# reproduction report to compare against.
REFERENCE_MNIST = {
    ("natural", "bp"): {"natural": (98.58, 0.05), "pgd": (2.504, 0.48)},
    ("natural", "pepita"): {"natural": (98.16, 0.04), "pgd": (0.056, 0.31)},
    ("natural-advsel", "bp"): {"natural": (94.22, 0.40), "pgd": (92.72, 0.36)},
    ("natural-advsel", "pepita"): {"natural": (97.69, 0.16), "pgd": (97.56, 0.18)},
    ("pgd", "bp"): {"natural": (98.73, 0.06), "pgd": (89.93, 0.03)},
    ("pgd", "pepita"): {"natural": (98.18, 0.10), "pgd": (97.30, 0.41)},
    ("fgsm", "bp"): {"natural": (98.93, 0.05), "fgsm": (91.04, 0.13), "pgd": (86.25, 0.09)},
    ("fgsm", "pepita"): {"natural": (98.00, 0.14), "fgsm": (97.91, 0.13), "pgd": (97.81, 0.12)},
}


@dataclass(frozen=True)
class Scale:
    name: str
    hidden: int
    epochs: int
    subset: int | None
    train_pgd_iters: int
    adv_val_size: int | None

    def decay_epochs(self) -> tuple[int, ...]:
        # 60 and 90 of 100 epochs, kept proportional for shorter runs
        return (round(0.6 * self.epochs), round(0.9 * self.epochs))


SCALES = {
    "paper": Scale("paper", 1024, 100, None, 40, None),
    "desk": Scale("desk", 256, 15, 10000, 10, 1000),
}


@dataclass
class LrGrid:
    count: int = 50
    min: float = 0.001
    max: float = 0.3
    spacing: str = "log"

    def __post_init__(self):
        if not 0 < self.min < self.max:
            raise ValueError("grid needs 0 < min < max")
        if self.count < 1:
            raise ValueError("grid needs at least one value")
        if self.spacing not in ("log", "linear"):
            raise ValueError("spacing must be 'log' or 'linear'")

    def values(self) -> list[float]:
        if self.count == 1:
            return [self.min]
        if self.spacing == "log":
            vals = np.geomspace(self.min, self.max, self.count)
        else:
            vals = np.linspace(self.min, self.max, self.count)
        return [float(v) for v in vals]


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    rule: str = "pepita"
    training_attack: str | None = None  # None | "fgsm" | "pgd"
    eval_attacks: list[str] = field(default_factory=lambda: ["pgd"])
    selection: str = "natural"  # or "adversarial"
    lr_grid: LrGrid = field(default_factory=LrGrid)
    lr_values: list[float] | None = None  # explicit grid, overrides lr_grid
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    tuning_seed: int = 0
    eta: float | None = None
    scale: str = "desk"
    hidden: int | None = None
    epochs: int | None = None
    subset: int | None = None
    epsilon: float = 0.3
    step: float = 0.1
    pgd_iters: int = 40
    pgd_random_start: bool = True
    f_scale: float = 0.05
    split_seed: int = 0
    val_size: int | None = None
    adv_val_size: int | None = None
    data_dir: str | None = None  # default data/<dataset>
    out_dir: str = "runs"
    n_jobs: int = 1
    train: dict = field(default_factory=dict)  # TrainConfig overrides

    def __post_init__(self):
        if isinstance(self.lr_grid, dict):
            self.lr_grid = LrGrid(**self.lr_grid)
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.selection not in ("natural", "adversarial"):
            raise ValueError("selection must be 'natural' or 'adversarial'")
        if self.training_attack not in (None, "fgsm", "pgd"):
            raise ValueError("training_attack must be None, 'fgsm' or 'pgd'")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {sorted(SCALES)}")

    # -- resolved settings --------------------------------------------------

    @property
    def scale_preset(self) -> Scale:
        base = SCALES[self.scale]
        return replace(
            base,
            hidden=self.hidden or base.hidden,
            epochs=self.epochs if self.epochs is not None else base.epochs,
            subset=self.subset if self.subset is not None else base.subset,
            adv_val_size=self.adv_val_size if self.adv_val_size is not None else base.adv_val_size,
        )

    def eval_attack(self, kind: str) -> AttackConfig:
        if kind == "fgsm":
            return AttackConfig.fgsm(self.epsilon)
        return AttackConfig.pgd(self.epsilon, self.step, self.pgd_iters, random_start=self.pgd_random_start)

    def train_attack(self) -> AttackConfig | None:
        if self.training_attack is None:
            return None
        if self.training_attack == "fgsm":
            return AttackConfig.fgsm(self.epsilon)
        return AttackConfig.pgd(
            self.epsilon, self.step, self.scale_preset.train_pgd_iters, random_start=self.pgd_random_start
        )

    def train_config(self, eta: float, seed: int) -> TrainConfig:
        sp = self.scale_preset
        kw = dict(
            rule=self.rule,
            lr=eta,
            epochs=sp.epochs,
            decay_epochs=sp.decay_epochs(),
            early_stop_metric=self.selection,
            seed=seed,
        )
        kw.update(self.train)
        return TrainConfig(**kw)

    def table_key(self) -> str:
        if self.training_attack is not None:
            return self.training_attack
        return "natural-advsel" if self.selection == "adversarial" else "natural"

    def tuned_eta(self) -> float | None:
        return TUNED_ETAS.get(self.table_key(), {}).get(self.rule, {}).get(self.dataset)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


_DATA_CACHE: dict = {}


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    sp = cfg.scale_preset
    data_dir = cfg.data_dir or f"data/{cfg.dataset}"
    key = (cfg.dataset, str(Path(data_dir).resolve()), cfg.split_seed, cfg.val_size, sp.subset, sp.adv_val_size)
    if key not in _DATA_CACHE:
        raw = load_raw(cfg.dataset, data_dir)
        _DATA_CACHE[key] = prepare(
            raw, seed=cfg.split_seed, val_size=cfg.val_size, subset=sp.subset, adv_val_size=sp.adv_val_size
        )
    return _DATA_CACHE[key]


# -- single runs -------------------------------------------------------------


@dataclass
class RunResult:
    eta: float
    seed: int
    converged: bool
    status: str
    val_nat: float = 0.0
    val_adv: float | None = None
    test: dict = field(default_factory=dict)
    record: object = None
    model: Mlp | None = None

    def summary(self) -> dict:
        return {
            "eta": self.eta,
            "seed": self.seed,
            "converged": self.converged,
            "status": self.status,
            "val_nat": self.val_nat,
            "val_adv": self.val_adv,
            **{f"test_{k}": v for k, v in self.test.items()},
        }


def init_model(cfg: ExperimentConfig, data: Dataset, seed: int) -> Mlp:
    sizes = [data.input_dim, cfg.scale_preset.hidden, data.n_classes]
    return Mlp.create(sizes, make_rng(seed, "init"), f_scale=cfg.f_scale)


def run_single(
    cfg: ExperimentConfig,
    data: Dataset,
    eta: float,
    seed: int,
    evaluate_test: bool = True,
    adversarial_val: bool | None = None,
    epoch_callback=None,
    epochs: int | None = None,
) -> RunResult:
    """Train one (eta, seed) configuration and score it.

    Non-convergent runs come back with ``converged=False`` and zero scores.
    """
    tcfg = cfg.train_config(eta, seed)
    if epochs is not None:
        tcfg = replace(tcfg, epochs=epochs)
    val_pgd = cfg.eval_attack("pgd")
    need_val_adv = cfg.selection == "adversarial"
    model0 = init_model(cfg, data, seed)
    try:
        model, record = train(
            model0,
            data,
            tcfg,
            attack_augment=cfg.train_attack(),
            val_attack=val_pgd if need_val_adv else None,
            epoch_callback=epoch_callback,
        )
    except TrainingDiverged as exc:
        return RunResult(eta, seed, False, "diverged", record=exc.record)
    status = record.summary["status"]
    if not record.summary["converged"]:
        return RunResult(eta, seed, False, status, record=record)
    best = record.summary.get("best", {})
    res = RunResult(eta, seed, True, status, best.get("val_nat_acc", 0.0), best.get("val_adv_acc"), record=record)
    if adversarial_val and res.val_adv is None:
        res.val_adv = evaluate(model, data.x_val_adv, data.labels_val_adv, val_pgd, seed=seed)
    if evaluate_test:
        res.test["natural"] = evaluate(model, data.x_test, data.labels_test)
        for kind in cfg.eval_attacks:
            res.test[kind] = evaluate(model, data.x_test, data.labels_test, cfg.eval_attack(kind), seed=seed)
    res.model = model
    return res


def _run_many(cfg: ExperimentConfig, jobs: list[tuple], **kw) -> list[RunResult]:
    data = load_dataset(cfg)
    if cfg.n_jobs <= 1 or len(jobs) <= 1:
        return [run_single(cfg, data, eta, seed, **kw) for eta, seed in jobs]
    with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
        futures = [pool.submit(_worker, cfg, eta, seed, kw) for eta, seed in jobs]
        return [f.result() for f in futures]


def _worker(cfg, eta, seed, kw):
    return run_single(cfg, load_dataset(cfg), eta, seed, **kw)


# -- grid search -------------------------------------------------------------


@dataclass
class GridResult:
    best_eta: float
    runs: list[RunResult]

    def rows(self) -> list[dict]:
        return [r.summary() | {"score": score_run(r, self.selection)} for r in self.runs]

    selection: str = "natural"


def score_run(run: RunResult, selection: str) -> float:
    if not run.converged:
        return 0.0
    if selection == "natural":
        return run.val_nat
    return run.val_adv or 0.0


def select_best(runs: list[RunResult], selection: str) -> float:
    """Argmax of the validation score; ties go to the smaller learning rate."""
    best = max(runs, key=lambda r: (score_run(r, selection), -r.eta))
    return best.eta


def grid_search(cfg: ExperimentConfig, evaluate_test: bool = False) -> GridResult:
    etas = cfg.lr_values if cfg.lr_values is not None else cfg.lr_grid.values()
    runs = _run_many(cfg, [(eta, cfg.tuning_seed) for eta in etas], evaluate_test=evaluate_test, adversarial_val=True)
    return GridResult(select_best(runs, cfg.selection), runs, cfg.selection)


# -- aggregation and tables ----------------------------------------------------


def mean_std(values) -> tuple[float, float, int]:
    """Mean and sample standard deviation (n - 1 denominator; 0 for n == 1)."""
    arr = np.asarray(list(values), dtype=float)
    n = arr.size
    if n == 0:
        raise ValueError("nothing to aggregate")
    mean = float(arr.mean())
    if n == 1 or np.all(arr == arr[0]):
        return mean, 0.0, n
    return mean, float(arr.std(ddof=1)), n


@dataclass
class SummaryTable:
    rows: list[dict] = field(default_factory=list)
    runs: list[RunResult] = field(default_factory=list)

    def cell(self, metric: str) -> dict:
        for row in self.rows:
            if row["metric"] == metric:
                return row
        raise KeyError(metric)

    def write_csv(self, path: str | Path) -> Path:
        return write_csv(path, self.rows, ["rule", "dataset", "metric", "mean", "std", "n", "eta"])


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def resolve_eta(cfg: ExperimentConfig) -> float:
    if cfg.eta is not None:
        return cfg.eta
    return grid_search(cfg).best_eta


def run_table(cfg: ExperimentConfig, eta: float | None = None) -> SummaryTable:
    """Train every seed at one learning rate and aggregate test accuracies (%)."""
    eta = eta if eta is not None else resolve_eta(cfg)
    runs = _run_many(cfg, [(eta, s) for s in cfg.seeds])
    table = SummaryTable(runs=runs)
    for metric in ["natural", *cfg.eval_attacks]:
        vals = [100.0 * r.test.get(metric, 0.0) for r in runs]
        mean, std, n = mean_std(vals)
        table.rows.append(
            {"rule": cfg.rule, "dataset": cfg.dataset, "metric": metric, "mean": mean, "std": std, "n": n, "eta": eta}
        )
    return table


# -- trade-off curve ---------------------------------------------------------


def default_targets(count: int = 13, lo: float = 96.0, hi: float = 99.0) -> list[float]:
    return [float(v) for v in np.linspace(lo, hi, count)]


def pick_for_target(candidates: list[dict], target: float, tol: float | None = None) -> dict | None:
    """Closest natural accuracy to ``target``; ties broken by adversarial accuracy."""
    pool = [c for c in candidates if c.get("converged", True)]
    if tol is not None:
        pool = [c for c in pool if abs(c["val_nat"] - target) <= tol]
    if not pool:
        return None
    return min(pool, key=lambda c: (round(abs(c["val_nat"] - target), 9), -(c.get("val_adv") or 0.0), c["eta"]))


@dataclass
class TradeoffResult:
    points: list[dict]
    skipped: list[float]
    mean_gap: float | None

    def write_csv(self, path) -> Path:
        cols = ["target", "eta", "natural_mean", "natural_std", "pgd_mean", "pgd_std", "gap", "n"]
        return write_csv(path, self.points, cols)


def tradeoff_sweep(
    cfg: ExperimentConfig,
    targets: list[float] | None = None,
    grid: GridResult | None = None,
    tol: float | None = None,
) -> TradeoffResult:
    """For each natural-accuracy target (in %), take the grid run closest to it
    (best adversarial accuracy on ties), retrain it on every seed and report
    mean natural and PGD test accuracy plus the average natural-minus-PGD gap.
    """
    targets = targets if targets is not None else default_targets()
    grid = grid if grid is not None else grid_search(cfg)
    cands = [
        {"eta": r.eta, "val_nat": 100.0 * r.val_nat, "val_adv": 100.0 * (r.val_adv or 0.0), "converged": r.converged}
        for r in grid.runs
    ]
    chosen: dict[float, float] = {}
    skipped = []
    for t in targets:
        pick = pick_for_target(cands, t, tol)
        if pick is None:
            skipped.append(t)
        else:
            chosen[t] = pick["eta"]
    cache: dict[float, list[RunResult]] = {}
    points = []
    for t, eta in chosen.items():
        if eta not in cache:
            cache[eta] = _run_many(cfg, [(eta, s) for s in cfg.seeds])
        runs = cache[eta]
        nat_m, nat_s, n = mean_std(100.0 * r.test.get("natural", 0.0) for r in runs)
        pgd_m, pgd_s, _ = mean_std(100.0 * r.test.get("pgd", 0.0) for r in runs)
        points.append(
            {"target": t, "eta": eta, "natural_mean": nat_m, "natural_std": nat_s,
             "pgd_mean": pgd_m, "pgd_std": pgd_s, "gap": nat_m - pgd_m, "n": n}
        )
    mean_gap = float(np.mean([p["gap"] for p in points])) if points else None
    return TradeoffResult(points, skipped, mean_gap)


# -- training curves ---------------------------------------------------------


def training_curves(cfg: ExperimentConfig, eta: float | None = None, factor: int = 2) -> list[dict]:
    """Natural and PGD test accuracy after every epoch, over ``factor`` x the
    usual epoch budget, aggregated across seeds (early stopping disabled)."""
    eta = eta if eta is not None else resolve_eta(cfg)
    data = load_dataset(cfg)
    n_epochs = factor * cfg.scale_preset.epochs
    pgd = cfg.eval_attack("pgd")
    per_seed = []
    for seed in cfg.seeds:
        series = []

        def cb(epoch, model, seed=seed, series=series):
            m = {
                "test_nat": evaluate(model, data.x_test, data.labels_test),
                "test_pgd": evaluate(model, data.x_test, data.labels_test, pgd, seed=seed),
            }
            series.append(m)
            return m

        c = replace(cfg, train={**cfg.train, "patience": n_epochs + 1})
        run_single(c, data, eta, seed, evaluate_test=False, adversarial_val=False, epoch_callback=cb, epochs=n_epochs)
        per_seed.append(series)
    rows = []
    for epoch in range(n_epochs):
        alive = [s[epoch] for s in per_seed if len(s) > epoch]
        if not alive:
            break
        nm, ns, n = mean_std(100.0 * m["test_nat"] for m in alive)
        pm, ps, _ = mean_std(100.0 * m["test_pgd"] for m in alive)
        rows.append({"epoch": epoch, "natural_mean": nm, "natural_std": ns, "pgd_mean": pm, "pgd_std": ps, "n": n})
    return rows


def curve_slope(rows: list[dict], key: str = "natural_mean", tail: float = 0.25) -> float:
    """Least-squares slope (points per epoch) over the last ``tail`` of a curve."""
    k = max(2, int(round(len(rows) * tail)))
    sub = rows[-k:]
    x = np.array([r["epoch"] for r in sub], dtype=float)
    y = np.array([r[key] for r in sub], dtype=float)
    return float(np.polyfit(x, y, 1)[0])


# -- provenance --------------------------------------------------------------


def git_revision(cwd: str | Path | None = None) -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=cwd, capture_output=True, text=True, check=True, timeout=10
        )
        return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return None


def write_manifest(out_dir: str | Path, cfg: ExperimentConfig, outputs: list[str | Path], extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "git_revision": git_revision(Path(__file__).parent),
        "outputs": [str(p) for p in outputs],
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def save_run(out_dir: str | Path, run: RunResult, tag: str) -> list[Path]:
    """Checkpoint plus JSON-lines run log for one run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if run.record is not None:
        p = out_dir / f"{tag}.jsonl"
        p.write_text(run.record.to_jsonl())
        paths.append(p)
    if run.model is not None:
        paths.append(save_checkpoint(run.model, out_dir / f"{tag}.ckpt", {"eta": run.eta, "seed": run.seed}))
    return paths
