"""Training, evaluation and the frozen-backbone probe."""

from __future__ import annotations

import logging
import math
import numpy as np

from . import metrics
from . import smallnet as sn
from .config import ModelConfig, TrainConfig
from .model import ModelParams, TrainingError, forward, init_params, joint_loss, predict
from .rng import stream
from .synthdata import ShapeDataset

log = logging.getLogger(__name__)

INPUT_PROPS = ("", "n", "u", "nu")
HISTORY_FIELDS = ("epoch", "lr", "task_loss", "reg_loss", "total", "phase")


def model_inputs(ds: ShapeDataset, input_props: str = "") -> np.ndarray:
    """Coordinates, optionally followed by the cloud's own normals and/or curvature."""
    if input_props not in INPUT_PROPS:
        raise ValueError(f"input_props must be one of {INPUT_PROPS}, got {input_props!r}")
    if not input_props:
        return ds.points
    g, _ = ds.labels["geossl"]
    extra = []
    if "n" in input_props:
        extra.append(g[..., :3])
    if "u" in input_props:
        extra.append(g[..., 3:])
    return np.concatenate([ds.points, *extra], axis=-1)


def input_channels(input_props: str) -> int:
    return 3 + 3 * ("n" in input_props) + ("u" in input_props)


def label_source(tcfg: TrainConfig) -> str | None:
    if tcfg.supervision == "none":
        return None
    if tcfg.supervision == "geossl":
        return "geossl"
    return "geopl" if tcfg.geopl_source == "analytic" else "geopl_transfer"


def geometry_targets(ds: ShapeDataset, source: str | None):
    """``(g, keep_mask)`` for a label source, computing GeoSSL labels if missing."""
    if source is None:
        return None, None
    if source not in ds.labels:
        if source != "geossl":
            raise ValueError(f"dataset carries no {source!r} labels")
        from .geomprops import compute_props
        k = ds.meta.get("spec", {}).get("k", 20)
        props = [compute_props(p, k) for p in ds.points]
        ds.labels["geossl"] = (np.stack([p.as_array() for p in props]),
                               np.stack([p.degenerate for p in props]))
    g, degenerate = ds.labels[source]
    return g, ~degenerate


def _task_labels(ds: ShapeDataset, cfg: ModelConfig) -> np.ndarray:
    return ds.class_labels if cfg.task == "classification" else ds.part_labels


def _clip(grads: dict, limit: float) -> dict:
    if limit <= 0:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= limit:
        return grads
    return {k: g * (limit / norm) for k, g in grads.items()}


def fit(params: ModelParams, x: np.ndarray, y: np.ndarray | None, g: np.ndarray | None,
        keep: np.ndarray | None, cfg: ModelConfig, tcfg: TrainConfig, *, epochs: int,
        lam: float, groups=("shared", "task", "reg"), phase: str = "joint",
        objective: str = "joint", first_epoch: int = 0) -> list[dict]:
    """Minibatch SGD on ``params`` in place; returns one history row per epoch.

    ``objective="joint"`` minimises ``L_task + lam * L_reg``; ``"reg"`` uses
    ``L_reg`` alone. Only tensors in ``groups`` are updated.
    """
    if len(x) == 0:
        raise TrainingError("empty training set")
    trainable = params.named(groups)
    state = sn.OptimState(tcfg.lr, tcfg.momentum, tcfg.gamma, tcfg.decay_period)
    need_task = objective == "joint"
    need_geom = g is not None
    m = len(x)
    history = []
    for epoch in range(epochs):
        lr = sn.lr_at_epoch(state, epoch)
        order = stream(tcfg.seed, "shuffle", phase, epoch).permutation(m)
        sums = {"task": 0.0, "reg": 0.0, "total": 0.0}
        seen = {"task": 0, "reg": 0}
        for bi, lo in enumerate(range(0, m, tcfg.batch_size)):
            idx = order[lo:lo + tcfg.batch_size]
            task_out, geom_out = forward(params, x[idx], cfg, need_task, need_geom)
            total, task_loss, reg_loss = joint_loss(
                task_out, None if y is None else y[idx], geom_out,
                None if g is None else g[idx], lam if objective == "joint" else 1.0,
                None if keep is None else keep[idx], tcfg.reg_targets)
            if not np.isfinite(total.data):
                raise TrainingError(f"non-finite loss at epoch {first_epoch + epoch} batch {bi}")
            grads = sn.backward(total, trainable)
            sn.sgd_step(trainable, _clip(grads, tcfg.grad_clip), state, lr)
            w = len(idx)
            sums["total"] += float(total.data) * w
            if task_loss is not None:
                sums["task"] += float(task_loss.data) * w
                seen["task"] += w
            if reg_loss is not None:
                sums["reg"] += float(reg_loss.data) * w
                seen["reg"] += w
        history.append({
            "epoch": first_epoch + epoch, "lr": lr,
            "task_loss": sums["task"] / seen["task"] if seen["task"] else float("nan"),
            "reg_loss": sums["reg"] / seen["reg"] if seen["reg"] else float("nan"),
            "total": sums["total"] / m, "phase": phase,
        })
        log.debug("%s epoch %d: %s", phase, first_epoch + epoch, history[-1])
    return history


def train(dataset: ShapeDataset, cfg: ModelConfig, tcfg: TrainConfig,
          params: ModelParams | None = None, input_props: str = ""):
    """Train the multi-task network. Returns ``(params, history)``.

    An optional first phase (``pretrain_geom_epochs``) fits the shared layers
    and regression head on ``L_reg`` alone; the main phase then optimises the
    joint loss over every parameter.
    """
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    params = params.copy() if params is not None else init_params(cfg, tcfg.seed)
    x = model_inputs(dataset, input_props)
    y = _task_labels(dataset, cfg)
    source = label_source(tcfg)
    g, keep = geometry_targets(dataset, source)
    history = []
    if tcfg.pretrain_geom_epochs:
        pre_g, pre_keep = (g, keep) if g is not None else geometry_targets(dataset, "geossl")
        history += fit(params, x, None, pre_g, pre_keep, cfg, tcfg,
                       epochs=tcfg.pretrain_geom_epochs, lam=1.0, groups=("shared", "reg"),
                       phase="pretrain", objective="reg")
    history += fit(params, x, y, g, keep, cfg, tcfg, epochs=tcfg.epochs,
                   lam=tcfg.effective_lam, phase="joint",
                   first_epoch=tcfg.pretrain_geom_epochs)
    return params, history


def predicted_normals(geom: np.ndarray) -> np.ndarray:
    n = geom[..., :3]
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, n / safe, np.array([0.0, 0.0, 1.0]))


def evaluate(params: ModelParams, dataset: ShapeDataset, cfg: ModelConfig,
             gt_source: str | None = "geopl", input_props: str = "",
             return_predictions: bool = False):
    """Score ``params`` on ``dataset``.

    Normal metrics are included when ``gt_source`` labels are present.
    Segmentation predictions are restricted to the parts of each cloud's own
    category.
    """
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    if cfg.task == "classification" and cfg.num_classes < int(dataset.class_labels.max()) + 1:
        raise ValueError("dataset has more classes than the model predicts")
    if cfg.task == "segmentation" and cfg.num_parts < dataset.num_parts:
        raise ValueError("dataset has more parts than the model predicts")
    x = model_inputs(dataset, input_props)
    have_gt = gt_source is not None and gt_source in dataset.labels
    logits, geom = predict(params, x, cfg, need_geom=have_gt)
    report = metrics.MetricsReport(task=cfg.task, num_samples=len(dataset))
    preds = {}
    if cfg.task == "classification":
        pred = np.argmax(logits, axis=1)
        report.mean_class_accuracy = metrics.mean_class_accuracy(pred, dataset.class_labels)
        report.overall_accuracy = metrics.overall_accuracy(pred, dataset.class_labels)
        report.classes_counted = int(len(np.unique(dataset.class_labels)))
        preds["class"] = pred
    else:
        pred = np.empty_like(dataset.part_labels)
        ious = []
        for i in range(len(dataset)):
            allowed = np.asarray(dataset.parts_of(i))
            pred[i] = allowed[np.argmax(logits[i][:, allowed], axis=1)]
            ious.append(metrics.shape_iou(pred[i], dataset.part_labels[i], allowed))
        report.per_shape_iou = [float(v) for v in ious]
        report.mean_iou = metrics.mean_iou(ious)
        report.overall_accuracy = metrics.overall_accuracy(pred, dataset.part_labels)
        preds["parts"] = pred
    if have_gt:
        gt, degenerate = dataset.labels[gt_source]
        normals = predicted_normals(geom)
        keep = ~degenerate.reshape(-1)
        sim, dist, rms = metrics.normal_errors(normals.reshape(-1, 3), gt[..., :3].reshape(-1, 3),
                                               keep)
        report.normal_cosine_similarity = sim
        report.normal_cosine_distance = dist
        report.normal_rms_angle_deg = rms
        report.normal_unoriented_cosine_distance = metrics.normal_errors(
            normals.reshape(-1, 3), gt[..., :3].reshape(-1, 3), keep, oriented=False)[1]
        preds["normals"] = normals
    if return_predictions:
        return report, preds
    return report


def train_regressor(dataset: ShapeDataset, cfg: ModelConfig, tcfg: TrainConfig,
                    source: str = "geopl", params: ModelParams | None = None,
                    freeze_shared: bool = False):
    """Fit only the regression objective. With ``freeze_shared`` the shared
    encoder in ``params`` is left untouched and only the regression head learns.
    """
    if freeze_shared and params is None:
        raise ValueError("a frozen backbone needs pretrained parameters")
    fresh = init_params(cfg, tcfg.seed)
    if params is not None:
        fresh.shared = params.copy().shared
    x = model_inputs(dataset)
    g, keep = geometry_targets(dataset, source)
    groups = ("reg",) if freeze_shared else ("shared", "reg")
    history = fit(fresh, x, None, g, keep, cfg, tcfg,
                  epochs=tcfg.epochs, lam=1.0, groups=groups, phase="probe", objective="reg")
    return fresh, history


def probe_frozen_backbone(pretrained: ModelParams | None, train_set: ShapeDataset,
                          test_set: ShapeDataset, cfg: ModelConfig, tcfg: TrainConfig,
                          source: str = "geopl"):
    """Train a fresh regression head on a frozen pretrained encoder.

    Returns ``(params, report)`` where the report holds the normal metrics on
    ``test_set``.
    """
    if pretrained is None or not pretrained.shared:
        raise ValueError("probe needs pretrained classification parameters")
    params, _ = train_regressor(train_set, cfg, tcfg, source, pretrained, freeze_shared=True)
    return params, evaluate_normals(params, test_set, cfg, source)


def evaluate_normals(params: ModelParams, dataset: ShapeDataset, cfg: ModelConfig,
                     gt_source: str = "geopl") -> metrics.MetricsReport:
    _, geom = predict(params, model_inputs(dataset), cfg, need_task=False)
    gt, degenerate = dataset.labels[gt_source]
    normals = predicted_normals(geom).reshape(-1, 3)
    keep = ~degenerate.reshape(-1)
    sim, dist, rms = metrics.normal_errors(normals, gt[..., :3].reshape(-1, 3), keep)
    return metrics.MetricsReport(task="normals", num_samples=len(dataset),
                                 normal_cosine_similarity=sim, normal_cosine_distance=dist,
                                 normal_rms_angle_deg=rms)
