"""Command-line entry point: ``pepita-adv <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import diagnostics, experiments
from .attacks import attack_batch, dump_adversarial
from .experiments import ExperimentConfig
from .model import Mlp, load_checkpoint
from .numerics import make_rng

log = logging.getLogger("pepita_adv")


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text)


def build_config(args) -> ExperimentConfig:
    d = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "dataset": args.dataset,
        "rule": args.rule,
        "selection": args.selection,
        "scale": args.scale,
        "data_dir": args.data_dir,
        "out_dir": args.out_dir,
        "eta": args.eta,
        "n_jobs": args.jobs,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.train_attack is not None:
        d["training_attack"] = None if args.train_attack == "none" else args.train_attack
    if args.seeds is not None:
        d["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.epochs is not None:
        d["epochs"] = args.epochs
    if args.subset is not None:
        d["subset"] = args.subset
    return ExperimentConfig.from_dict(d)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = build_config(args)
    eta = cfg.eta if cfg.eta is not None else cfg.tuned_eta()
    if eta is None:
        raise SystemExit("no learning rate: pass --eta")
    data = experiments.load_dataset(cfg)
    out = Path(cfg.out_dir)
    outputs, summaries = [], []
    for seed in cfg.seeds:
        run = experiments.run_single(cfg, data, eta, seed)
        outputs += experiments.save_run(out, run, f"{cfg.rule}-{cfg.dataset}-eta{eta:g}-seed{seed}")
        summaries.append(run.summary())
    experiments.write_manifest(out, cfg, outputs, {"runs": summaries})
    _emit(summaries)
    return 0


def cmd_attack(args) -> int:
    cfg = build_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    data = experiments.load_dataset(cfg)
    x = data.x_test[: args.count]
    labels = data.labels_test[: args.count]
    acfg = cfg.eval_attack(args.kind)
    seed = cfg.seeds[0]
    x_adv = attack_batch(model, x.T, labels, acfg, seed=seed, sample_ids=np.arange(x.shape[0]))
    path = dump_adversarial(Path(cfg.out_dir) / f"adv-{args.kind}.tensors", x_adv.T, labels, acfg, seed, model)
    _emit({"path": str(path), "n": int(x.shape[0])})
    return 0


def cmd_grid(args) -> int:
    cfg = build_config(args)
    res = experiments.grid_search(cfg)
    out = Path(cfg.out_dir)
    rows = res.rows()
    path = experiments.write_csv(
        out / f"grid-{cfg.rule}-{cfg.dataset}.csv", rows,
        ["eta", "seed", "converged", "status", "val_nat", "val_adv", "score"],
    )
    experiments.write_manifest(out, cfg, [path], {"best_eta": res.best_eta})
    _emit({"best_eta": res.best_eta, "csv": str(path)})
    return 0


def cmd_table(args) -> int:
    cfg = build_config(args)
    eta = cfg.eta if cfg.eta is not None else (cfg.tuned_eta() if args.tuned else None)
    table = experiments.run_table(cfg, eta)
    out = Path(cfg.out_dir)
    path = table.write_csv(out / f"table-{cfg.table_key()}-{cfg.rule}-{cfg.dataset}.csv")
    experiments.write_manifest(out, cfg, [path])
    _emit(table.rows)
    return 0


def cmd_tradeoff(args) -> int:
    cfg = build_config(args)
    targets = [float(t) for t in args.targets.split(",")] if args.targets else None
    res = experiments.tradeoff_sweep(cfg, targets)
    out = Path(cfg.out_dir)
    path = res.write_csv(out / f"tradeoff-{cfg.rule}-{cfg.dataset}.csv")
    experiments.write_manifest(out, cfg, [path], {"skipped_targets": res.skipped, "mean_gap": res.mean_gap})
    _emit({"mean_gap": res.mean_gap, "skipped": res.skipped, "csv": str(path)})
    return 0


def cmd_curves(args) -> int:
    cfg = build_config(args)
    eta = cfg.eta if cfg.eta is not None else cfg.tuned_eta()
    rows = experiments.training_curves(cfg, eta, factor=args.factor)
    out = Path(cfg.out_dir)
    path = experiments.write_csv(
        out / f"curves-{cfg.rule}-{cfg.dataset}.csv", rows,
        ["epoch", "natural_mean", "natural_std", "pgd_mean", "pgd_std", "n"],
    )
    experiments.write_manifest(out, cfg, [path])
    _emit({"epochs": len(rows), "csv": str(path)})
    return 0


def run_diagnostics(trials: int = 100, seed: int = 0, tol: float = 1e-6) -> dict:
    """Finite-difference and alignment checks on random small nets."""
    rng = make_rng(seed, "init", 99)
    worst = {"weights": 0.0, "input": 0.0}
    cosines = []
    for t in range(trials):
        sizes = [int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(2, 4))]
        model = Mlp.create(sizes, make_rng(seed, "init", t))
        model.dropout_rate = 0.0
        n = int(rng.integers(1, 4))
        x = rng.uniform(0, 1, (sizes[0], n))
        y = np.eye(sizes[-1])[:, rng.integers(0, sizes[-1], n)]
        for which in worst:
            r = diagnostics.finite_diff_check(model, x, y, which=which)
            worst[which] = max(worst[which], r.max_rel_error)
        rep = diagnostics.alignment(model, x, y)
        cosines.append([l.cosine for l in rep.layers])
    checks = {f"fd_{k}": {"max_rel_error": v, "threshold": tol, "passed": bool(v < tol)} for k, v in worst.items()}
    hidden = [c[0] for c in cosines if c[0] is not None]
    out_cos = [c[-1] for c in cosines if c[-1] is not None]
    return {
        "trials": trials,
        "checks": checks,
        "passed": all(c["passed"] for c in checks.values()),
        "alignment": {
            "hidden_cosine_mean": float(np.mean(hidden)) if hidden else None,
            "output_cosine_mean": float(np.mean(out_cos)) if out_cos else None,
            "undefined": sum(1 for c in cosines if None in c),
        },
    }


def cmd_diag(args) -> int:
    report = run_diagnostics(args.trials, args.seed)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        cfg = build_config(args)
        data = experiments.load_dataset(cfg)
        x = data.x_val[: args.batch].T
        y = np.eye(data.n_classes)[:, data.labels_val[: args.batch]]
        report["checkpoint_alignment"] = diagnostics.alignment(model, x, y).to_dict()
    _emit(report)
    return 0 if report["passed"] else 1


# -- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML experiment config")
    p.add_argument("--dataset", choices=["mnist", "fmnist", "cifar10", "cifar100"])
    p.add_argument("--rule", choices=["bp", "pepita", "noisy_bp"])
    p.add_argument("--train-attack", choices=["none", "fgsm", "pgd"])
    p.add_argument("--selection", choices=["natural", "adversarial"])
    p.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    p.add_argument("--scale", choices=sorted(experiments.SCALES))
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--eta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--subset", type=int)
    p.add_argument("--jobs", type=int, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pepita-adv", description="BP vs PEPITA adversarial robustness experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train at a fixed learning rate on every seed")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="dump adversarial test samples for a checkpoint")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--kind", choices=["fgsm", "pgd"], default="pgd")
    p.add_argument("--count", type=int, default=1000)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("grid", help="learning-rate grid search")
    _common(p)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("table", help="seed sweep at one learning rate, mean and std per metric")
    _common(p)
    p.add_argument("--tuned", action="store_true", help="use the reference tuned learning rate")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("tradeoff", help="natural vs PGD accuracy at matched natural accuracy targets")
    _common(p)
    p.add_argument("--targets", help="comma-separated natural accuracies in percent")
    p.set_defaults(func=cmd_tradeoff)

    p = sub.add_parser("curves", help="per-epoch accuracy over an extended run")
    _common(p)
    p.add_argument("--factor", type=int, default=2)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("diag", help="gradient checks and update alignment; nonzero exit on failure")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--batch", type=int, default=256)
    p.set_defaults(func=cmd_diag)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
