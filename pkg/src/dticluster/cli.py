"""``dti`` command line: train, eval, viz and scan-k.

Settings are resolved as: built-in defaults < ``--config`` JSON < flags.
The resolved configuration is written to every run directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import configs
from .data import load_dataset
from .evaluation import RunRecord, aggregate, elbow_scan, stats_rows
from .training import TrainConfig, fit, load_checkpoint, resolve_steps, stage_budgets

log = logging.getLogger("dti")

# flag name -> (config key, type)
OVERRIDES = {
    "method": ("method", str),
    "dataset": ("dataset", str),
    "k": ("n_clusters", int),
    "steps": ("steps", str),
    "lr": ("lr", float),
    "batch_size": ("batch_size", int),
    "final_epochs": ("final_epochs", int),
    "gaussian_weight_sigma": ("gaussian_weight_sigma", float),
    "data_source": ("data_source", str),
    "data_subset": ("data_subset", int),
    "data_seed": ("data_seed", int),
    "backbone": ("backbone", str),
}


class CLIError(Exception):
    pass


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def add_config_flags(p):
    p.add_argument("--config", help="JSON config file or shipped config name (e.g. mnist-1k)")
    p.add_argument("--method", choices=["dti_kmeans", "dti_gmm", "kmeans", "gmm", "ti_kmeans"])
    p.add_argument("--dataset")
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--steps", help='transformation recipe, e.g. "aff-morpho-tps" ("" for none)')
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs-per-stage", type=int_list, help="comma-separated epochs, stage 0 first")
    p.add_argument("--final-epochs", type=int)
    p.add_argument("--gaussian-weight-sigma", type=float)
    p.add_argument("--data-source")
    p.add_argument("--data-subset", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--backbone", choices=["auto", "resnet20", "resnet18"])
    p.add_argument("--no-curriculum", action="store_true", help="enable all modules from the start")
    p.add_argument("--no-reassign", action="store_true", help="disable empty-cluster reassignment")
    p.add_argument("--seed", type=int, help="base seed (run i uses seed + i)")


def resolve_config(args) -> TrainConfig:
    d = {}
    if args.config:
        path = Path(args.config)
        if not path.exists() and args.config in configs.available():
            path = configs.config_path(args.config)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {args.config}: {exc}")
        if "K" in d:
            d["n_clusters"] = d.pop("K")
    for flag, (key, _) in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if getattr(args, "epochs_per_stage", None) is not None:
        d["epochs_per_stage"] = args.epochs_per_stage
    if getattr(args, "no_curriculum", False):
        d["curriculum"] = False
    if getattr(args, "no_reassign", False):
        d["reassign"] = False
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid config: {exc}")


def dataset_for(config: TrainConfig):
    try:
        return load_dataset(config.dataset, source=config.data_source, data_seed=config.data_seed,
                            subset=config.data_subset)
    except (OSError, KeyError, ValueError) as exc:
        raise CLIError(f"cannot load dataset {config.dataset!r}: {exc}")


def check_config(config: TrainConfig, dataset):
    """Dataset-dependent checks (recipe, stage budget, K) before any run starts."""
    try:
        steps = resolve_steps(config, dataset.images.shape[1])
        stage_budgets(config, len(steps))
    except (KeyError, ValueError) as exc:
        raise CLIError(f"invalid config: {exc}")
    if len(dataset) < config.n_clusters:
        raise CLIError(f"invalid config: K={config.n_clusters} exceeds the {len(dataset)} samples")


def _fit_one(config: TrainConfig, run_dir: str) -> dict:
    rec = fit(dataset_for(config), config, run_dir=run_dir)
    return rec.to_dict()


def write_stats(out: Path, runs: list[RunRecord]) -> dict:
    stats = aggregate(runs)
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    with open(out / "stats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "stat", "value"])
        w.writerows(stats_rows(stats))
    with open(out / "runs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "status", "final_loss", "acc", "nmi", "epochs", "wall_time", "run_dir"])
        for r in runs:
            w.writerow([r.seed, r.status, r.final_loss, r.acc, r.nmi, r.epochs, round(r.wall_time, 2), r.run_dir])
    return stats


def cmd_train(args) -> int:
    config = resolve_config(args)
    if args.runs < 1:
        raise CLIError("--runs must be >= 1")
    out = Path(args.out or f"runs/{config.dataset}_{config.method}")
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset_for(config)
    check_config(config, dataset)
    configs = [replace(config, seed=config.seed + i) for i in range(args.runs)]
    dirs = [str(out / f"seed{c.seed}") for c in configs]
    if args.jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_fit_one, configs, dirs))
    else:
        results = [fit(dataset, c, run_dir=d).to_dict() for c, d in zip(configs, dirs)]
    runs = [RunRecord.from_dict(r) for r in results]
    for r in runs:
        print(f"seed {r.seed}: status={r.status} loss={r.final_loss:.6g} acc={r.acc} nmi={r.nmi}")
    if not any(r.status == "ok" for r in runs):
        print("all runs diverged", file=sys.stderr)
        return 1
    stats = write_stats(out, runs)
    if any(r.acc is not None for r in runs):
        from .viz import plot_loss_vs_accuracy
        plot_loss_vs_accuracy(runs, out / "loss_vs_acc.png")
    print("metric,stat,value")
    for row in stats_rows(stats):
        print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    print(f"wrote {out / 'stats.json'}")
    return 0


def _load_ckpt(path):
    if not path or not Path(path).is_file():
        raise CLIError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _eval_dataset(ckpt, name, source=None):
    config = ckpt.config if name is None else replace(ckpt.config, dataset=name, data_source=None,
                                                      data_subset=None)
    if source is not None:
        config = replace(config, data_source=source)
    return dataset_for(config)


def cmd_eval(args) -> int:
    from .evaluation import accuracy, nmi

    ckpt = _load_ckpt(args.ckpt)
    dataset = _eval_dataset(ckpt, args.dataset, args.data_source)
    if dataset.shape != tuple(ckpt.cluster.centers.shape[1:]):
        raise CLIError(f"dataset shape {dataset.shape} does not match the model {tuple(ckpt.cluster.centers.shape[1:])}")
    loss, assign = ckpt.evaluate(dataset.images)
    K = ckpt.cluster.n_clusters
    metrics = {"dataset": dataset.name or args.dataset, "loss": loss,
               "cluster_sizes": np.bincount(assign, minlength=K).tolist()}
    if dataset.labels is not None:
        metrics["acc"] = accuracy(assign, dataset.labels, K)
        metrics["nmi"] = nmi(assign, dataset.labels)
    text = json.dumps(metrics, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def cmd_viz(args) -> int:
    from . import viz

    ckpt = _load_ckpt(args.ckpt)
    run_dir = Path(args.ckpt).parent
    path = viz.viz_path(run_dir, args.kind, args.index)
    centers = ckpt.cluster.centers.detach()
    if args.kind == "prototypes":
        viz.prototype_grid(centers, path)
    else:
        dataset = _eval_dataset(ckpt, args.dataset, args.data_source)
        if args.kind == "alignment":
            i = args.index
            if not 0 <= i < len(dataset):
                raise CLIError(f"sample index {i} out of range")
            x = dataset.images[i:i + 1]
            predicted = ckpt.predicted(x, [i])
            best = viz.alignment_strip(dataset.images[i], centers, ckpt.steps, predicted, path)
            print(f"closest prototype: {best}")
        else:
            k = args.index
            if not 0 <= k < ckpt.cluster.n_clusters:
                raise CLIError(f"cluster index {k} out of range")
            _, assign = ckpt.evaluate(dataset.images)

            def aligned_fn(idx):
                from .clustering import align
                idx = torch.as_tensor(idx)
                predicted = ckpt.predicted(dataset.images[idx], idx)
                return align(centers, ckpt.steps, predicted)[:, k]

            viz.cluster_montage(dataset.images, assign, centers, k, args.n, path, aligned_fn)
    print(f"wrote {path}")
    return 0


def cmd_scan_k(args) -> int:
    from .viz import plot_elbow

    config = resolve_config(args)
    dataset = dataset_for(config)
    check_config(config, dataset)
    out = Path(args.out or f"runs/{config.dataset}_{config.method}_scan")
    out.mkdir(parents=True, exist_ok=True)
    seeds = [config.seed + i for i in range(args.runs)]
    table = elbow_scan(dataset, args.k_list, config, seeds, run_root=out,
                       progress=lambda K, s, r: print(f"K={K} seed={s} loss={r.final_loss:.6g} acc={r.acc}"))
    (out / "elbow.json").write_text(json.dumps(table, indent=2) + "\n")
    with open(out / "elbow.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["K", "avg_loss"] + [f"loss_seed{s}" for s in seeds])
        for row in table:
            w.writerow([row["K"], row["loss"]] + row["losses"])
    plot_elbow(table, out / "elbow.png")
    print("K,avg_loss")
    for row in table:
        print(f"{row['K']},{row['loss']:.6g}")
    print(f"wrote {out / 'elbow.png'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dti", description="Deep transformation-invariant clustering")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one or more independent fits")
    add_config_flags(p)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", help="output directory (one sub-directory per run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", help="defaults to the training dataset")
    p.add_argument("--data-source", help="pool a derived dataset (mnist-1k, mnist-color) is drawn from")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render figures for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kind", choices=["prototypes", "alignment", "montage"], default="prototypes")
    p.add_argument("--index", type=int, default=0, help="sample index (alignment) or cluster (montage)")
    p.add_argument("--n", type=int, default=8, help="members shown in a montage")
    p.add_argument("--dataset")
    p.add_argument("--data-source", help="pool a derived dataset is drawn from")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("scan-k", help="elbow scan of the final loss over K")
    add_config_flags(p)
    p.add_argument("--k-list", type=int_list, required=True)
    p.add_argument("--runs", type=int, default=1, help="seeds per K")
    p.add_argument("--out")
    p.set_defaults(func=cmd_scan_k)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"dti: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
