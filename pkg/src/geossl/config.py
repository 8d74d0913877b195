"""Model and training configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

TASKS = ("classification", "segmentation")
SUPERVISIONS = ("none", "geossl", "geopl")
GEOPL_SOURCES = ("analytic", "transfer")
REG_INPUTS = ("embed", "edge")
REG_TARGETS = ("nu", "n", "u")


@dataclass
class ModelConfig:
    task: str = "classification"
    num_classes: int = 5
    num_parts: int = 12
    in_channels: int = 3
    k_graph: int = 20
    edge_channels: tuple = (32, 32, 64)
    embed_dim: int = 128
    cls_hidden: tuple = (64, 32)
    seg_hidden: tuple = (64, 32)
    reg_hidden: tuple = (64, 32)
    dynamic_graph: bool = True
    # "embed": regression head reads the shared per-point embedding;
    # "edge": it reads the concatenated edge-conv outputs instead.
    reg_input: str = "embed"

    def __post_init__(self):
        self.edge_channels = tuple(int(c) for c in self.edge_channels)
        self.cls_hidden = tuple(int(c) for c in self.cls_hidden)
        self.seg_hidden = tuple(int(c) for c in self.seg_hidden)
        self.reg_hidden = tuple(int(c) for c in self.reg_hidden)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.reg_input not in REG_INPUTS:
            raise ValueError(f"reg_input must be one of {REG_INPUTS}, got {self.reg_input!r}")
        widths = (*self.edge_channels, *self.cls_hidden, *self.seg_hidden, *self.reg_hidden,
                  self.embed_dim, self.num_classes, self.num_parts, self.in_channels, self.k_graph)
        if any(w < 1 for w in widths):
            raise ValueError("all widths and counts must be positive")
        if len(self.reg_hidden) != 2:
            raise ValueError("the regression head has three layers: two hidden widths then 4 outputs")

    @property
    def reg_out(self) -> int:
        return 4

    def to_dict(self) -> dict:
        return _plain(asdict(self))


@dataclass
class TrainConfig:
    lam: float = 1e-2
    lr: float = 0.01
    momentum: float = 0.9
    gamma: float = 0.5
    decay_period: int = 20
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    supervision: str = "geossl"
    geopl_source: str = "analytic"
    pretrain_geom_epochs: int = 0
    grad_clip: float = 1.0
    # which parts of g = (n, u) the regression loss sees
    reg_targets: str = "nu"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.supervision not in SUPERVISIONS:
            raise ValueError(f"supervision must be one of {SUPERVISIONS}, got {self.supervision!r}")
        if self.geopl_source not in GEOPL_SOURCES:
            raise ValueError(f"geopl_source must be one of {GEOPL_SOURCES}")
        if self.reg_targets not in REG_TARGETS:
            raise ValueError(f"reg_targets must be one of {REG_TARGETS}, got {self.reg_targets!r}")
        if self.pretrain_geom_epochs < 0:
            raise ValueError("pretrain_geom_epochs must be >= 0")

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.supervision == "none" else self.lam

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def from_dict(cls, d: dict | None):
    names = {f.name for f in fields(cls)}
    d = dict(d or {})
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)
