"""Clustering metrics and multi-run statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

STAT_NAMES = ("avg", "std", "min", "median", "max", "minLoss")


@dataclass
class RunRecord:
    seed: int
    final_loss: float
    acc: float | None = None
    nmi: float | None = None
    cluster_sizes: list = field(default_factory=list)
    wall_time: float = 0.0
    method: str = ""
    dataset: str = ""
    epochs: int = 0
    status: str = "ok"
    error: str | None = None
    run_dir: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def contingency(assignments, labels, K=None) -> np.ndarray:
    a = np.asarray(assignments, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if a.shape != y.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {y.shape}")
    n_rows = max(K or 0, int(a.max(initial=-1)) + 1)
    n_cols = int(y.max(initial=-1)) + 1
    table = np.zeros((n_rows, n_cols), dtype=np.int64)
    np.add.at(table, (a, y), 1)
    return table


def accuracy(assignments, labels, K=None) -> float:
    """Best one-to-one cluster-to-class matching (Hungarian), as a fraction."""
    table = contingency(assignments, labels, K)
    if table.sum() == 0:
        return 0.0
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / table.sum())


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignments, labels) -> float:
    """Mutual information normalized by the geometric mean of the entropies."""
    table = contingency(assignments, labels).astype(np.float64)
    n = table.sum()
    if n == 0:
        return 0.0
    h_a, h_l = _entropy(table.sum(1)), _entropy(table.sum(0))
    if h_a == 0 or h_l == 0:
        return 0.0
    joint = table / n
    outer = np.outer(table.sum(1), table.sum(0)) / n ** 2
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / outer[nz])).sum())
    return min(max(mi / math.sqrt(h_a * h_l), 0.0), 1.0)


def _stats(values, best_index) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"avg": float(v.mean()), "std": float(v.std()), "min": float(v.min()),
            "median": float(np.median(v)), "max": float(v.max()), "minLoss": float(v[best_index])}


def min_loss_index(runs) -> int:
    """Index of the run with the smallest final loss; ties go to the earliest."""
    losses = [r.final_loss for r in runs]
    return int(np.argmin(losses))


def aggregate(runs, metrics=("acc", "nmi", "final_loss")) -> dict:
    """Statistics over runs (diverged runs are excluded)."""
    ok = [r for r in runs if r.status == "ok" and math.isfinite(r.final_loss)]
    if not ok:
        raise ValueError("no successful runs to aggregate")
    best = min_loss_index(ok)
    out = {"n_runs": len(ok), "n_failed": len(runs) - len(ok), "minLoss_seed": ok[best].seed}
    for m in metrics:
        values = [getattr(r, m) for r in ok]
        if any(v is None for v in values):
            continue
        out[m] = _stats(values, best)
    return out


def stats_rows(stats: dict) -> list[list]:
    """Flatten aggregate output into rows of (metric, stat, value)."""
    rows = []
    for m, s in stats.items():
        if isinstance(s, dict):
            rows.extend([m, k, s[k]] for k in STAT_NAMES)
    return rows


def elbow_scan(dataset, K_list, config, seeds=(0,), run_root=None, progress=None) -> list[dict]:
    """Fit once per (K, seed) and tabulate the average final loss per K."""
    from dataclasses import replace

    from .training import fit

    table = []
    for K in K_list:
        records = []
        for s in seeds:
            cfg = replace(config, n_clusters=int(K), seed=int(s))
            run_dir = None if run_root is None else f"{run_root}/K{K}_seed{s}"
            records.append(fit(dataset, cfg, run_dir=run_dir))
            if progress:
                progress(K, s, records[-1])
        losses = [r.final_loss for r in records]
        table.append({"K": int(K), "loss": float(np.mean(losses)), "losses": losses,
                      "acc": [r.acc for r in records]})
    return table
