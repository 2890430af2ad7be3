"""Deep transformation-parameter predictors.

A shared residual backbone (truncated after global average pooling) feeds
K x M small MLP heads, one per (cluster, transformation step). The last layer
of every head starts at zero, so each head outputs exactly its step's
identity parameters until training moves it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .transforms import TransformStep, make_step

HIDDEN = 128


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet20(nn.Module):
    """CIFAR-style 3-stage residual net (16/32/64 channels, 3 blocks each)."""

    out_features = 64

    def __init__(self, in_channels=1):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, 16, 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(16), nn.ReLU(inplace=True))
        layers, planes = [], 16
        for width, stride in ((16, 1), (32, 2), (64, 2)):
            for b in range(3):
                layers.append(BasicBlock(planes, width, stride if b == 0 else 1))
                planes = width
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        x = self.layers(self.stem(x))
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


def resnet18(in_channels=3) -> nn.Module:
    net = torchvision.models.resnet18(weights=None)
    if in_channels != 3:
        net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
    net.fc = nn.Identity()
    net.out_features = 512
    return net


def make_backbone(name: str, in_channels: int) -> nn.Module:
    if name == "resnet20":
        return ResNet20(in_channels)
    if name == "resnet18":
        return resnet18(in_channels)
    raise ValueError(f"unknown backbone {name!r}")


def make_head(in_features: int, out_features: int) -> nn.Sequential:
    head = nn.Sequential(nn.Linear(in_features, HIDDEN), nn.ReLU(inplace=True),
                         nn.Linear(HIDDEN, HIDDEN), nn.ReLU(inplace=True),
                         nn.Linear(HIDDEN, out_features))
    nn.init.zeros_(head[-1].weight)
    nn.init.zeros_(head[-1].bias)
    return head


@dataclass
class PredictorConfig:
    n_clusters: int
    steps: list = field(default_factory=list)
    in_channels: int = 1
    img_size: tuple = (28, 28)
    backbone: str = "auto"

    def resolved_backbone(self) -> str:
        if self.backbone != "auto":
            return self.backbone
        return "resnet20" if max(self.img_size) < 64 else "resnet18"


class TransformPredictor(nn.Module):
    """Shared backbone + ``K * M`` heads with a curriculum mask.

    ``forward`` returns one tensor of shape (N, K, P_m) per step, already
    offset by the step's identity parameters. Heads of steps beyond
    ``active_modules`` are bypassed and yield identity parameters exactly.
    """

    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.steps: list[TransformStep] = list(config.steps)
        self.backbone = make_backbone(config.resolved_backbone(), config.in_channels)
        feat = self.backbone.out_features
        self.heads = nn.ModuleList(
            nn.ModuleList(make_head(feat, s.param_count) for s in self.steps)
            for _ in range(config.n_clusters))
        for m, s in enumerate(self.steps):
            self.register_buffer(f"identity_{m}", s.identity())
        self.register_buffer("active", torch.tensor(0))

    @property
    def n_clusters(self) -> int:
        return self.config.n_clusters

    @property
    def active_modules(self) -> int:
        return int(self.active)

    @active_modules.setter
    def active_modules(self, value: int):
        if not 0 <= value <= len(self.steps):
            raise ValueError(f"active_modules must be in [0, {len(self.steps)}]")
        if value < self.active_modules:
            raise ValueError("active_modules can only grow during a run")
        self.active.fill_(value)

    def identity_params(self, m: int) -> torch.Tensor:
        return getattr(self, f"identity_{m}")

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (N, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        N, K = x.shape[0], self.n_clusters
        active = self.active_modules
        feats = self.backbone(x) if active > 0 else None
        out = []
        for m in range(len(self.steps)):
            ident = self.identity_params(m).to(x.dtype)
            if m >= active:
                out.append(ident.expand(N, K, -1).clone())
                continue
            offsets = torch.stack([self.heads[k][m](feats) for k in range(K)], dim=1)
            out.append(ident + offsets.to(x.dtype))
        return out

    def copy_cluster(self, src: int, dst: int):
        """Overwrite every head of cluster ``dst`` with those of ``src``."""
        with torch.no_grad():
            for m in range(len(self.steps)):
                for p_dst, p_src in zip(self.heads[dst][m].parameters(), self.heads[src][m].parameters()):
                    p_dst.copy_(p_src)

    def head_parameters(self, m: int):
        for k in range(self.n_clusters):
            yield from self.heads[k][m].parameters()


def init_identity(config: PredictorConfig, seed: int) -> TransformPredictor:
    """Backbone drawn from ``seed``; every head predicts the identity."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return TransformPredictor(config)
    finally:
        torch.random.set_rng_state(gen_state)


def config_to_dict(config: PredictorConfig) -> dict:
    return {"n_clusters": config.n_clusters, "steps": [s.kind for s in config.steps],
            "channels": config.steps[0].channels if config.steps else config.in_channels,
            "in_channels": config.in_channels, "img_size": list(config.img_size),
            "backbone": config.backbone}


def config_from_dict(d: dict) -> PredictorConfig:
    steps = [make_step(k, d.get("channels", d["in_channels"])) for k in d["steps"]]
    return PredictorConfig(d["n_clusters"], steps, d["in_channels"], tuple(d["img_size"]), d["backbone"])


def save_predictor(predictor: TransformPredictor, path):
    torch.save({"config": config_to_dict(predictor.config), "state": predictor.state_dict()}, path)


def load_predictor(path) -> TransformPredictor:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return predictor_from_blob(blob)


def predictor_from_blob(blob: dict) -> TransformPredictor:
    pred = TransformPredictor(config_from_dict(blob["config"]))
    pred.load_state_dict(blob["state"])
    return pred
