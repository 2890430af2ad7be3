"""Shipped training configurations (JSON), one per dataset or experiment."""
import json
from importlib import resources

from ..training import TrainConfig


def available() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".json"))


def config_path(name: str):
    return resources.files(__name__) / f"{name}.json"


def load_config(name: str, **overrides) -> TrainConfig:
    path = config_path(name)
    if not path.is_file():
        raise KeyError(f"no shipped config {name!r}; available: {', '.join(available())}")
    d = json.loads(path.read_text())
    d.update(overrides)
    return TrainConfig.from_dict(d)
