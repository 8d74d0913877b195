"""SGD with classical momentum and a stepwise exponential learning-rate decay."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class OptimState:
    base_lr: float = 0.01
    momentum: float = 0.9
    gamma: float = 0.5
    period: int = 20
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.period < 1:
            raise ValueError(f"decay period must be >= 1, got {self.period}")


def lr_at_epoch(state: OptimState, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return state.base_lr * state.gamma ** (epoch // state.period)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             state: OptimState, lr: float | None = None) -> dict[str, Tensor]:
    """``v <- mu*v - lr*g``, ``p <- p + v`` for every parameter with a gradient."""
    lr = state.base_lr if lr is None else lr
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: gradient shape {g.shape} does not match "
                             f"parameter {name!r} shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v - lr * g
        state.velocity[name] = v
        p.data = p.data + v
    return params


def save_params(params: dict[str, Tensor], path: str | Path, extra: dict | None = None) -> None:
    """Checkpoint as JSON: name -> {shape, data}. ``repr`` floats round-trip exactly."""
    doc = {"schema_version": 1,
           "params": {name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                      for name, t in sorted(params.items())}}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    arrays = {name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
              for name, entry in doc.pop("params").items()}
    return arrays, doc
