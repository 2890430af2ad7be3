"""Training loop: curriculum over transformation modules, empty-cluster
reassignment and a two-phase learning-rate schedule."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .clustering import (DivergenceError, GMMState, KMeansState, gaussian_weight, gmm_log_density,
                         gmm_m_loss, kmeans_loss, squared_distances, align)
from .evaluation import RunRecord, accuracy, nmi
from .predictor import PredictorConfig, TransformPredictor, init_identity, predictor_from_blob, config_to_dict
from .transforms import parse_steps, recipe_string

log = logging.getLogger(__name__)

METHODS = ("dti_kmeans", "dti_gmm", "kmeans", "gmm", "ti_kmeans")


@dataclass
class TrainConfig:
    method: str = "dti_kmeans"
    dataset: str = "mnist-1k"
    n_clusters: int = 10
    steps: str | None = None          # recipe like "aff-morpho-tps"; None = dataset default
    lr: float = 1e-3
    lr_decay_factor: float = 10.0
    weight_decay: float = 1e-6
    batch_size: int | None = None     # None = 64 for photo folders, 128 otherwise
    epochs_per_stage: list | None = None
    final_epochs: int = 10
    plateau_rel_tol: float = 1e-4
    plateau_patience: int = 5
    reassign_threshold_frac: float = 0.2
    noise_std: float = 0.01
    seed: int = 0
    gaussian_weight_sigma: float | None = None
    curriculum: bool = True
    reassign: bool = True
    backbone: str = "auto"
    pad: str = "border"
    data_source: str | None = None
    data_subset: int | None = None
    data_seed: int = 0
    ti_inner_steps: int = 10
    ti_lr: float = 0.01
    eval_batch_size: int = 256

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        for name in ("lr", "lr_decay_factor", "plateau_rel_tol", "noise_std", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.final_epochs < 0 or self.plateau_patience < 1:
            raise ValueError("weight_decay and final_epochs must be >= 0, plateau_patience >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs_per_stage is not None and any(int(e) < 0 for e in self.epochs_per_stage):
            raise ValueError("epochs_per_stage entries must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"K"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "K" in d:
            d["n_clusters"] = d.pop("K")
        return cls(**d).validate()


def uses_transforms(method: str) -> bool:
    return method in ("dti_kmeans", "dti_gmm", "ti_kmeans")


def is_gmm(method: str) -> bool:
    return method in ("dti_gmm", "gmm")


def resolve_steps(config: TrainConfig, channels: int):
    if not uses_transforms(config.method):
        return []
    recipe = config.steps
    if recipe is None:
        from .data import dataset_spec
        recipe = dataset_spec(config.dataset).default_steps
    return parse_steps(recipe, channels)


def stage_budgets(config: TrainConfig, n_steps: int) -> list[int]:
    """Epoch budget per stage: stage 0 has no transform, stage m enables m modules."""
    budgets = config.epochs_per_stage
    if budgets is None:
        budgets = [20] * (n_steps + 1)
    budgets = [int(b) for b in budgets]
    if len(budgets) != n_steps + 1:
        raise ValueError(f"epochs_per_stage needs {n_steps + 1} entries (stage 0 + one per module), "
                         f"got {len(budgets)}")
    return budgets


def plateau_reached(history, rel_tol=1e-4, patience=5) -> bool:
    """True when each epoch-to-epoch relative improvement across the last
    ``patience`` epochs is below ``rel_tol``."""
    if len(history) < patience or patience < 2:
        return False
    window = history[-patience:]
    return all((a - b) / max(abs(a), 1e-12) < rel_tol for a, b in zip(window, window[1:]))


def reassign_threshold(n_samples: int, n_clusters: int, frac: float = 0.2) -> Fraction:
    return Fraction(str(frac)) * n_samples / n_clusters


def init_prototypes(images: torch.Tensor, K: int, seed: int, gmm: bool = False):
    """K distinct random samples as initial prototypes (or GMM means)."""
    if len(images) < K:
        raise ValueError(f"dataset has {len(images)} samples, fewer than K={K}")
    idx = np.random.default_rng(seed).choice(len(images), size=K, replace=False)
    protos = images[torch.as_tensor(idx)].clone()
    return GMMState(protos) if gmm else KMeansState(protos)


def reassign_empty(cluster, counts, frac=0.2, noise_std=0.01, generator=None, predictor=None,
                   extra=None):
    """Replace every tiny cluster by a noisy copy of the current largest one.

    ``counts`` are modified in place: the source's count is split with the
    reassigned cluster, so the largest cluster is recomputed after each copy.
    Returns the list of ``(k, source)`` pairs.
    """
    counts = np.asarray(counts, dtype=np.int64)
    K = len(counts)
    threshold = reassign_threshold(int(counts.sum()), K, frac)
    report = []
    for k in range(K):
        if counts[k] >= threshold:
            continue
        src = int(np.argmax(counts))
        if src == k:
            continue
        center = cluster.centers
        noise = torch.randn(center.shape[1:], generator=generator, dtype=center.dtype) * noise_std
        cluster.copy_cluster(src, k, noise)
        if predictor is not None:
            predictor.copy_cluster(src, k)
        if extra is not None:
            extra(src, k)
        moved = counts[src] // 2
        counts[src] -= moved
        counts[k] += moved
        report.append((k, src))
    return report


class Trainer:
    """Mutable state of one training run."""

    def __init__(self, images: torch.Tensor, config: TrainConfig, labels=None):
        config.validate()
        self.config = config
        self.images = images
        self.labels = labels
        self.method = config.method
        N, C, H, W = images.shape
        self.steps = resolve_steps(config, C)
        self.budgets = stage_budgets(config, len(self.steps))
        self.batch_size = config.batch_size or (64 if config.dataset.startswith("folder:") else 128)
        self.weights = None
        if config.gaussian_weight_sigma:
            self.weights = gaussian_weight(H, W, config.gaussian_weight_sigma, images.dtype)

        self.cluster = init_prototypes(images, config.n_clusters, config.seed, is_gmm(self.method))
        self.predictor: TransformPredictor | None = None
        self.ti_beta: torch.Tensor | None = None
        if self.method in ("dti_kmeans", "dti_gmm") and self.steps:
            pc = PredictorConfig(config.n_clusters, self.steps, C, (H, W), config.backbone)
            self.predictor = init_identity(pc, config.seed)
        if self.method == "ti_kmeans" and self.steps:
            ident = torch.cat([s.identity(images.dtype) for s in self.steps])
            self.ti_beta = ident.expand(N, config.n_clusters, -1).clone()

        self.order_gen = torch.Generator().manual_seed(config.seed + 1)
        self.noise_gen = torch.Generator().manual_seed(config.seed + 2)
        self.lr = config.lr
        self.optimizer = self._make_optimizer()
        self.stage = 0
        self.active = 0
        self.epoch = 0
        self.final_phase = False
        self.history: list[float] = []
        if not config.curriculum:
            self._enable(len(self.steps))

    # -- setup ---------------------------------------------------------------------

    def _make_optimizer(self):
        groups = [{"params": list(self.cluster.parameters()), "weight_decay": 0.0, "name": "cluster"}]
        if self.predictor is not None:
            groups.append({"params": list(self.predictor.parameters()),
                           "weight_decay": self.config.weight_decay, "name": "predictor"})
        return torch.optim.Adam(groups, lr=self.lr)

    def _enable(self, n: int):
        self.active = n
        if self.predictor is not None:
            self.predictor.active_modules = n

    def set_lr(self, lr: float):
        self.lr = lr
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    @property
    def active_steps(self):
        return self.steps[:self.active]

    def curriculum_step(self):
        """Enable the next transformation module (identity-initialized heads)."""
        if self.active >= len(self.steps):
            raise RuntimeError("curriculum already at its final stage")
        self._enable(self.active + 1)
        # heads of the new module never received gradients, so their optimizer
        # state is still empty; clear it anyway in case of a resumed optimizer
        if self.predictor is not None:
            for p in self.predictor.head_parameters(self.active - 1):
                self.optimizer.state.pop(p, None)
        self.stage += 1
        self.history = []

    # -- losses --------------------------------------------------------------------

    def predict(self, x):
        if self.predictor is None or self.active == 0:
            return []
        return self.predictor(x)[:self.active]

    def _ti_params(self, idx):
        """Per-sample free parameters of the active steps, split per step."""
        out, start = [], 0
        for s in self.steps:
            out.append(self.ti_beta[idx, :, start:start + s.param_count])
            start += s.param_count
        return out[:self.active]

    def batch_loss(self, x, idx=None):
        """``(loss, assignments)`` of one batch under the current state."""
        steps = self.active_steps
        pad = self.config.pad
        if self.method == "ti_kmeans":
            predicted = self._ti_params(idx) if self.active else []
            loss, assign, _ = kmeans_loss(x, self.cluster, steps, predicted, self.weights, pad)
            return loss, assign
        predicted = self.predict(x)
        if is_gmm(self.method):
            logp = gmm_log_density(x, self.cluster, steps, predicted, self.weights, pad)
            loss = gmm_m_loss(x, self.cluster, steps, predicted, weights=self.weights, logp=logp)
            return loss, torch.argmax(logp.detach() + torch.log_softmax(self.cluster.mixing_logits.detach(), 0), 1)
        loss, assign, _ = kmeans_loss(x, self.cluster, steps, predicted, self.weights, pad)
        return loss, assign

    def _ti_inner(self, x, idx):
        """Optimize the free per-sample parameters of the batch against every prototype."""
        beta = self.ti_beta[idx].clone().requires_grad_(True)
        opt = torch.optim.Adam([beta], lr=self.config.ti_lr)
        protos = self.cluster.centers.detach()
        for _ in range(self.config.ti_inner_steps):
            params, start = [], 0
            for s in self.active_steps:
                params.append(beta[:, :, start:start + s.param_count])
                start += s.param_count
            aligned = align(protos, self.active_steps, params, self.config.pad)
            loss = squared_distances(x, aligned, self.weights).sum(1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.ti_beta[idx] = beta.detach()

    # -- epochs ---------------------------------------------------------------------

    def train_epoch(self) -> dict:
        N = len(self.images)
        K = self.config.n_clusters
        order = torch.randperm(N, generator=self.order_gen)
        counts = np.zeros(K, dtype=np.int64)
        total = 0.0
        if self.predictor is not None:
            self.predictor.train()
        for start in range(0, N, self.batch_size):
            idx = order[start:start + self.batch_size]
            x = self.images[idx]
            if self.method == "ti_kmeans" and self.active:
                self._ti_inner(x, idx)
            loss, assign = self.batch_loss(x, idx)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {self.epoch}")
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()
            total += float(loss.detach()) * len(idx)
            counts += np.bincount(assign.numpy(), minlength=K)
        report = []
        if self.config.reassign:
            report = self.reassign_empty(counts.copy())
        self.epoch += 1
        mean = total / N
        self.history.append(mean)
        return {"epoch": self.epoch, "stage": self.stage, "active_modules": self.active,
                "loss": mean, "lr": self.lr, "cluster_counts": counts.tolist(),
                "reassignments": [list(r) for r in report]}

    def reassign_empty(self, counts):
        def copy_beta(src, dst):
            self.ti_beta[:, dst] = self.ti_beta[:, src]
        extra = copy_beta if self.ti_beta is not None else None
        return reassign_empty(self.cluster, counts, self.config.reassign_threshold_frac,
                              self.config.noise_std, self.noise_gen, self.predictor, extra)

    def stage_done(self, epochs_in_stage: int, budget: int) -> bool:
        if epochs_in_stage >= budget:
            return True
        return plateau_reached(self.history, self.config.plateau_rel_tol, self.config.plateau_patience)

    def run(self, on_epoch=None):
        """Train all stages then the reduced-lr phase; ``on_epoch`` gets each metrics record."""
        stages = self.budgets if self.config.curriculum else [sum(self.budgets)]
        for s, budget in enumerate(stages):
            if s > 0:
                self.curriculum_step()
            n = 0
            while not self.stage_done(n, budget):
                rec = self.train_epoch()
                n += 1
                if on_epoch:
                    on_epoch(rec)
        self.final_phase = True
        self.set_lr(self.config.lr / self.config.lr_decay_factor)
        self.history = []
        for _ in range(self.config.final_epochs):
            rec = self.train_epoch()
            if on_epoch:
                on_epoch(rec)

    # -- evaluation -------------------------------------------------------------------

    @torch.no_grad()
    def evaluate(self, images=None):
        """Full-dataset loss, assignments and cluster sizes (predictor in eval mode)."""
        return evaluate(self.method, self.cluster, self.predictor, self.steps[:self.active],
                        self.images if images is None else images, self.weights, self.config.pad,
                        self.config.eval_batch_size, ti_params=self._ti_full() if images is None else None)

    def _ti_full(self):
        if self.ti_beta is None or not self.active:
            return None
        return self._ti_params(slice(None))

    def checkpoint(self) -> dict:
        blob = {"config": self.config.to_dict(), "recipe": recipe_string(self.steps),
                "active": self.active, "cluster": {k: v.detach().clone() for k, v in self.cluster.state_dict().items()},
                "predictor": None, "ti_beta": self.ti_beta}
        if self.predictor is not None:
            blob["predictor"] = {"config": config_to_dict(self.predictor.config),
                                 "state": self.predictor.state_dict()}
        return blob


@torch.no_grad()
def evaluate(method, cluster, predictor, steps, images, weights=None, pad="border", batch_size=256,
             ti_params=None):
    """Returns ``(loss, assignments)``; the GMM loss is the mean negative log-likelihood."""
    was_training = predictor.training if predictor is not None else False
    if predictor is not None:
        predictor.eval()
    total, assigns = 0.0, []
    try:
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]
            if ti_params is not None:
                predicted = [p[start:start + batch_size] for p in ti_params]
            elif predictor is not None and steps:
                predicted = predictor(x)[:len(steps)]
            else:
                predicted = []
            if is_gmm(method):
                logp = gmm_log_density(x, cluster, steps, predicted, weights, pad)
                joint = logp + torch.log_softmax(cluster.mixing_logits, 0)
                total += float(-torch.logsumexp(joint, 1).sum())
                assigns.append(torch.argmax(joint, 1))
            else:
                dist = squared_distances(x, align(cluster.centers, steps, predicted, pad), weights)
                assign = torch.argmin(dist, 1)
                total += float(dist.gather(1, assign[:, None]).sum())
                assigns.append(assign)
    finally:
        if predictor is not None:
            predictor.train(was_training)
    return total / len(images), torch.cat(assigns).numpy()


@dataclass
class Checkpoint:
    config: TrainConfig
    cluster: KMeansState | GMMState
    predictor: TransformPredictor | None
    steps: list
    ti_beta: torch.Tensor | None = None

    @property
    def method(self):
        return self.config.method

    @torch.no_grad()
    def predicted(self, x, indices=None):
        """Per-step parameters (N, K, P) for a batch; TI runs need dataset ``indices``."""
        if not self.steps:
            return []
        if self.ti_beta is not None:
            if indices is None:
                raise ValueError("TI checkpoints store per-sample parameters; pass dataset indices")
            out, start = [], 0
            for s in self.steps:
                out.append(self.ti_beta[indices, :, start:start + s.param_count])
                start += s.param_count
            return out
        self.predictor.eval()
        return self.predictor(x)[:len(self.steps)]

    def evaluate(self, images):
        ti = None
        if self.ti_beta is not None and self.steps:
            ti = self.predicted(None, slice(None))
        weights = None
        if self.config.gaussian_weight_sigma:
            weights = gaussian_weight(*images.shape[-2:], self.config.gaussian_weight_sigma, images.dtype)
        return evaluate(self.method, self.cluster, self.predictor, self.steps, images, weights,
                        self.config.pad, self.config.eval_batch_size, ti_params=ti)


def load_checkpoint(path) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    config = TrainConfig.from_dict(blob["config"])
    state = blob["cluster"]
    key = "means" if "means" in state else "prototypes"
    cluster = GMMState(state[key]) if key == "means" else KMeansState(state[key])
    cluster.load_state_dict(state)
    predictor = None
    if blob["predictor"] is not None:
        predictor = predictor_from_blob(blob["predictor"])
    channels = state[key].shape[1]
    steps = parse_steps(blob["recipe"], channels)[:blob["active"]] if blob["recipe"] else []
    return Checkpoint(config, cluster, predictor, steps, blob.get("ti_beta"))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def fit(dataset, config: TrainConfig, run_dir=None, on_epoch=None) -> RunRecord:
    """Train one model on ``dataset`` (a :class:`dticluster.data.Dataset`).

    Writes ``config.json``, ``metrics.jsonl``, ``final.ckpt`` and
    ``run_record.json`` to ``run_dir`` when given. A diverging run is stopped
    and reported with ``status="diverged"``.
    """
    config.validate()
    t0 = time.perf_counter()
    trainer = Trainer(dataset.images, config, dataset.labels)
    metrics_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", config.to_dict())
        metrics_file = open(run_dir / "metrics.jsonl", "w")

    def record(rec):
        if metrics_file:
            metrics_file.write(json.dumps(rec) + "\n")
            metrics_file.flush()
        log.info("epoch %d stage %d loss %.6g reassign %s", rec["epoch"], rec["stage"], rec["loss"],
                 rec["reassignments"])
        if on_epoch:
            on_epoch(rec)

    result = RunRecord(seed=config.seed, final_loss=float("nan"), method=config.method,
                       dataset=config.dataset, run_dir=str(run_dir) if run_dir else None)
    try:
        trainer.run(record)
        loss, assign = trainer.evaluate()
        if not math.isfinite(loss):
            raise DivergenceError("non-finite final loss")
        result.final_loss = loss
        result.cluster_sizes = np.bincount(assign, minlength=config.n_clusters).tolist()
        if dataset.labels is not None:
            result.acc = accuracy(assign, dataset.labels, config.n_clusters)
            result.nmi = nmi(assign, dataset.labels)
    except DivergenceError as exc:
        result.status, result.error = "diverged", str(exc)
        log.error("run diverged: %s", exc)
    finally:
        if metrics_file:
            metrics_file.close()
    result.epochs = trainer.epoch
    result.wall_time = time.perf_counter() - t0
    if run_dir is not None:
        if result.status == "ok":
            torch.save(trainer.checkpoint(), run_dir / "final.ckpt")
        _write_json(run_dir / "run_record.json", result.to_dict())
    result.trainer = trainer
    return result
