"""JSON run configuration with strict key checking."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import Dataset, PlantedConfig, generate_planted, load_idx, load_tensor
from .network import ConvSpec, LossConfig, NetworkSpec, OptimizerConfig


class ConfigError(ValueError):
    """Unparseable or invalid configuration; the message names the line or field."""


SECTIONS = ("data", "network", "optimizer", "output", "sweep", "gradcheck")


@dataclass
class DataConfig:
    source: str = "planted"              # planted | idx | ofst
    resolution: list = field(default_factory=lambda: [64, 48])
    positive_extent: int = 7
    negative_extent: int = 3
    blobs_per_image: int = 4
    noise_sigma: float = 0.5
    n_train: int = 4000
    n_test: int = 1000
    seed: int = 0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    positive_class: int = 1


@dataclass
class NetworkConfig:
    conv_layers: list = field(default_factory=lambda: [
        {"out_channels": 32, "mode": "learned", "k0": 4.0},
        {"out_channels": 32, "mode": "learned", "k0": 4.0},
        {"out_channels": 64, "mode": "learned", "k0": 4.0}])
    pool_window: int = 3
    pool_stride: int = 3
    pool_after: list = field(default_factory=lambda: [0, 1])
    fc_nodes: int = 64
    hidden_relu: bool = False
    positive_weight: float = 1.0
    k_min: float = 1.0
    k_max: float = 11.0


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class SweepConfig:
    sizes: list = field(default_factory=lambda: [3, 5, 7, 9])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    layer: int = 0
    k0: float = 4.0
    threshold: float = 0.5


@dataclass
class GradcheckConfig:
    network: str = "tiny"        # tiny | config
    batch: int = 4
    n_coords: int = 200
    step: float = 1e-5
    tolerance: float = 1e-4
    seed: int = 0
    corrupt_size_grad: float = 1.0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    # -- derived objects ----------------------------------------------------
    def network_spec(self) -> NetworkSpec:
        n = self.network
        return NetworkSpec(
            input_resolution=tuple(self.data.resolution),
            conv_layers=[ConvSpec(**c) for c in n.conv_layers],
            pool_window=n.pool_window, pool_stride=n.pool_stride,
            pool_after=tuple(n.pool_after), fc_nodes=n.fc_nodes, hidden_relu=n.hidden_relu,
            loss=LossConfig(n.positive_weight), k_min=n.k_min, k_max=n.k_max)

    def planted(self, split: str) -> PlantedConfig:
        d = self.data
        # train and test sets are distinct substreams of the data seed
        n = d.n_train if split == "train" else d.n_test
        seed = [d.seed, 0] if split == "train" else [d.seed, 1]
        return PlantedConfig(resolution=tuple(d.resolution), positive_extent=d.positive_extent,
                             negative_extent=d.negative_extent, blobs_per_image=d.blobs_per_image,
                             noise_sigma=d.noise_sigma, n_samples=n, seed=seed)

    def datasets(self) -> tuple[Dataset, Dataset]:
        d = self.data
        if d.source == "planted":
            return generate_planted(self.planted("train")), generate_planted(self.planted("test"))
        if d.source == "idx":
            train = load_idx(d.train_images, d.train_labels, d.positive_class)
            test = load_idx(d.test_images or d.train_images, d.test_labels or d.train_labels, d.positive_class)
            return train, test
        if d.source == "ofst":
            def load(images, labels):
                return Dataset(load_tensor(images), load_tensor(labels).astype(int),
                               {"source": "ofst", "images": images, "labels": labels})
            train = load(d.train_images, d.train_labels)
            test = load(d.test_images or d.train_images, d.test_labels or d.train_labels)
            return train, test
        raise ConfigError(f"data.source: unknown source {d.source!r}")

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


_SECTION_TYPES = {
    "data": DataConfig, "network": NetworkConfig, "optimizer": OptimizerConfig,
    "output": OutputConfig, "sweep": SweepConfig, "gradcheck": GradcheckConfig,
}

_CONV_KEYS = {f.name for f in fields(ConvSpec)}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        body = raw.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: section must be an object")
        allowed = {f.name for f in fields(cls)}
        bad = set(body) - allowed
        if bad:
            raise ConfigError(f"{name}.{sorted(bad)[0]}: unknown key")
        try:
            sections[name] = cls(**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc
    for i, conv in enumerate(sections["network"].conv_layers):
        if not isinstance(conv, dict):
            raise ConfigError(f"network.conv_layers[{i}]: must be an object")
        bad = set(conv) - _CONV_KEYS
        if bad:
            raise ConfigError(f"network.conv_layers[{i}].{sorted(bad)[0]}: unknown key")
    cfg = RunConfig(**sections)
    try:
        cfg.network_spec()
        if cfg.data.source == "planted":
            cfg.planted("train").validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)
