"""Multi-task edge-convolution network with an auxiliary geometry-regression head.

Shared layers: a stack of edge convolutions over (dynamic) kNN graphs and one
per-point MLP layer producing the shared embedding. Two branches read it: the
semantic head (classification or per-point segmentation) and a three-layer
regression head emitting ``(nx, ny, nz, u)`` per point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import smallnet as sn
from .config import ModelConfig, TrainConfig
from .geomprops import smallest_k
from .rng import stream

log = logging.getLogger(__name__)

GROUPS = ("shared", "task", "reg")


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelParams:
    """Parameters split into shared encoder, semantic head and regression head."""

    shared: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    reg: dict = field(default_factory=dict)

    def group(self, name: str) -> dict:
        return getattr(self, name)

    def named(self, groups=GROUPS) -> dict[str, sn.Tensor]:
        out = {}
        for g in groups:
            for key, t in self.group(g).items():
                out[f"{g}.{key}"] = t
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        p = cls()
        for name, value in arrays.items():
            group, key = name.split(".", 1)
            if group not in GROUPS:
                raise ValueError(f"parameter {name!r} belongs to no known group")
            p.group(group)[key] = sn.parameter(np.array(value, dtype=np.float64), name=name)
        return p

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.arrays())


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """He-normal weights, zero biases; each tensor draws from its own stream."""
    arrays = {}

    def weight(name, fan_in, fan_out):
        arrays[name] = _dense(stream(seed, "init", name), fan_in, fan_out)

    c_in = cfg.in_channels
    for layer, width in enumerate(cfg.edge_channels):
        weight(f"shared.edge{layer}.w_center", c_in, width)
        weight(f"shared.edge{layer}.w_diff", c_in, width)
        arrays[f"shared.edge{layer}.b"] = np.zeros(width)
        c_in = width
    cat = sum(cfg.edge_channels)
    weight("shared.embed.w", cat, cfg.embed_dim)
    arrays["shared.embed.b"] = np.zeros(cfg.embed_dim)

    if cfg.task == "classification":
        widths = [cfg.embed_dim, *cfg.cls_hidden, cfg.num_classes]
        for i in range(len(widths) - 1):
            weight(f"task.fc{i}.w", widths[i], widths[i + 1])
            arrays[f"task.fc{i}.b"] = np.zeros(widths[i + 1])
    else:
        first = cfg.seg_hidden[0]
        weight("task.fc0.w_point", cfg.embed_dim, first)
        weight("task.fc0.w_global", cfg.embed_dim, first)
        arrays["task.fc0.b"] = np.zeros(first)
        widths = [*cfg.seg_hidden, cfg.num_parts]
        for i in range(len(widths) - 1):
            weight(f"task.fc{i + 1}.w", widths[i], widths[i + 1])
            arrays[f"task.fc{i + 1}.b"] = np.zeros(widths[i + 1])

    reg_in = cfg.embed_dim if cfg.reg_input == "embed" else cat
    widths = [reg_in, *cfg.reg_hidden, cfg.reg_out]
    for i in range(len(widths) - 1):
        weight(f"reg.fc{i}.w", widths[i], widths[i + 1])
        arrays[f"reg.fc{i}.b"] = np.zeros(widths[i + 1])
    return ModelParams.from_arrays(arrays)


# --------------------------------------------------------------------------
# layers

def feature_knn(features: np.ndarray, k: int) -> np.ndarray:
    """Per-cloud kNN (self excluded) in feature space, shape (b, n, k).

    Ties are broken toward the smaller point index.
    """
    b, n, _ = features.shape
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n - 1}] for clouds of {n} points, got {k}")
    sq = (features * features).sum(axis=2)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * features @ features.transpose(0, 2, 1)
    d2[:, np.arange(n), np.arange(n)] = np.inf
    return smallest_k(d2.reshape(b * n, n), k).reshape(b, n, k)


def edge_conv(x: sn.Tensor, k: int, w_center: sn.Tensor, w_diff: sn.Tensor,
              bias: sn.Tensor, neighbors: np.ndarray | None = None):
    """One edge convolution: ``max_j relu(W [x_i || x_j - x_i] + b)``.

    ``W = [w_center; w_diff]``, so the edge pre-activation splits into
    ``x_i (w_center - w_diff) + x_j w_diff``. The first term does not depend
    on ``j`` and relu is monotone, so the max moves inside:
    ``relu(x_i (w_center - w_diff) + max_j x_j w_diff + b)``. Floating-point
    addition is monotone too, so this matches the per-edge form exactly.
    Returns ``(output, neighbors)``.
    """
    x = sn.constant(x)
    if x.data.ndim == 2:
        x = sn.unsqueeze(x, 0)
        out, nbrs = edge_conv(x, k, w_center, w_diff, bias,
                              None if neighbors is None else neighbors[None])
        return sn.reshape(out, out.shape[1:]), nbrs[0]
    if neighbors is None:
        neighbors = feature_knn(x.data, k)
    center = sn.matmul(x, w_center)
    diff = sn.matmul(x, w_diff)
    best, _ = sn.gather_max(diff, neighbors)
    out = sn.relu(sn.add_bias(sn.add(sn.sub(center, diff), best), bias))
    return out, neighbors


def _dense_layer(x, params, name, act=True):
    y = sn.add_bias(sn.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])
    return sn.relu(y) if act else y


def encode(params: ModelParams, x: np.ndarray | sn.Tensor, cfg: ModelConfig):
    """Shared layers. Returns ``(per-point embedding, concatenated edge features)``."""
    x = sn.constant(x)
    p = params.shared
    if x.shape[-1] != cfg.in_channels:
        raise sn.ShapeError(f"input has {x.shape[-1]} channels, model expects {cfg.in_channels}")
    if x.shape[1] < cfg.k_graph + 1:
        raise ValueError(f"clouds need at least k_graph + 1 = {cfg.k_graph + 1} points, "
                         f"got {x.shape[1]}")
    # first graph lives in coordinate space regardless of extra input channels
    nbrs = feature_knn(x.data[..., :3], cfg.k_graph)
    feats, h = [], x
    for layer in range(len(cfg.edge_channels)):
        if layer and cfg.dynamic_graph:
            nbrs = feature_knn(h.data, cfg.k_graph)
        h, _ = edge_conv(h, cfg.k_graph, p[f"edge{layer}.w_center"], p[f"edge{layer}.w_diff"],
                         p[f"edge{layer}.b"], nbrs)
        feats.append(h)
    cat = sn.concat(feats, axis=-1)
    return _dense_layer(cat, p, "embed"), cat


def regression_head(params: ModelParams, features: sn.Tensor) -> sn.Tensor:
    h = _dense_layer(features, params.reg, "fc0")
    h = _dense_layer(h, params.reg, "fc1")
    return _dense_layer(h, params.reg, "fc2", act=False)


def task_head(params: ModelParams, emb: sn.Tensor, cfg: ModelConfig) -> sn.Tensor:
    p = params.task
    pooled, _ = sn.max_over_axis(emb, axis=1)  # (b, embed)
    if cfg.task == "classification":
        h = pooled
        n_layers = len(cfg.cls_hidden) + 1
        for i in range(n_layers):
            h = _dense_layer(h, p, f"fc{i}", act=i < n_layers - 1)
        return h
    local = sn.matmul(emb, p["fc0.w_point"])
    glob = sn.unsqueeze(sn.matmul(pooled, p["fc0.w_global"]), 1)
    h = sn.relu(sn.add_bias(sn.add(local, glob), p["fc0.b"]))
    n_layers = len(cfg.seg_hidden)
    for i in range(1, n_layers + 1):
        h = _dense_layer(h, p, f"fc{i}", act=i < n_layers)
    return h


def forward(params: ModelParams, clouds, cfg: ModelConfig, need_task: bool = True,
            need_geom: bool = True):
    """Run the network on a batch ``(b, n, c)`` (or a single ``(n, c)`` cloud).

    Returns ``(task_output, geom_output)``: logits of shape (b, C) or
    (b, n, P), and per-point ``(nx, ny, nz, u)`` of shape (b, n, 4). A branch
    that is not requested comes back as ``None``.
    """
    data = clouds.points if hasattr(clouds, "points") and not isinstance(clouds, np.ndarray) \
        else clouds
    x = sn.constant(data)
    single = x.data.ndim == 2
    if single:
        x = sn.Tensor(x.data[None])
    emb, cat = encode(params, x, cfg)
    task_out = task_head(params, emb, cfg) if need_task else None
    geom_out = None
    if need_geom:
        geom_out = regression_head(params, emb if cfg.reg_input == "embed" else cat)
    if single:
        task_out = None if task_out is None else sn.reshape(task_out, task_out.shape[1:])
        geom_out = None if geom_out is None else sn.reshape(geom_out, geom_out.shape[1:])
    return task_out, geom_out


TARGET_COLUMNS = {"nu": (0, 1, 2, 3), "n": (0, 1, 2), "u": (3,)}


def joint_loss(task_out, labels, geom_out, geom_gt, lam: float, mask=None,
               targets: str = "nu"):
    """``total = L_task + lam * L_reg``.

    ``L_task`` is mean cross-entropy (per cloud, or per point for
    segmentation). ``L_reg`` is the mean over non-masked points of
    ``||n - n_hat||^2 + (u - u_hat)^2``. With ``lam == 0`` the regression term
    is left out of the graph entirely. Either output may be ``None``.
    ``targets`` restricts ``L_reg`` to the normal (``"n"``) or curvature
    (``"u"``) columns.
    Returns ``(total, task_loss, reg_loss)`` as tensors (``None`` if absent).
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    task_loss = reg_loss = None
    if task_out is not None:
        labels = np.asarray(labels)
        logits = task_out
        if task_out.data.ndim == 3:
            logits = sn.reshape(task_out, (-1, task_out.shape[-1]))
        task_loss = sn.softmax_cross_entropy(logits, labels.reshape(-1))
    if geom_out is not None and geom_gt is not None:
        gt = np.asarray(geom_gt, dtype=np.float64).reshape(-1, 4)
        pred = sn.reshape(geom_out, (-1, 4))
        keep = None if mask is None else np.asarray(mask, bool).reshape(-1)
        if keep is not None and not keep.any():
            log.warning("every point is degenerate; regression loss set to 0")
        if targets != "nu":
            cols = TARGET_COLUMNS[targets]
            pick = np.eye(4)[:, cols]
            pred, gt = sn.matmul(pred, pick), gt[:, cols]
        reg_loss = sn.mse(pred, gt, keep)
    if task_loss is None:
        total = reg_loss
    elif reg_loss is None or lam == 0:
        total = task_loss
    else:
        total = sn.add(task_loss, sn.scale(reg_loss, lam))
    return total, task_loss, reg_loss


def predict(params: ModelParams, points: np.ndarray, cfg: ModelConfig, batch_size: int = 16,
            need_task: bool = True, need_geom: bool = True):
    """Forward in batches without keeping graphs. Returns numpy ``(task, geom)``."""
    tasks, geoms = [], []
    for lo in range(0, len(points), batch_size):
        t, g = forward(params, points[lo:lo + batch_size], cfg, need_task, need_geom)
        if t is not None:
            tasks.append(t.data)
        if g is not None:
            geoms.append(g.data)
    return (np.concatenate(tasks) if tasks else None,
            np.concatenate(geoms) if geoms else None)
