"""Evaluation measures: mean class accuracy, overall accuracy, shape IoU, normal errors."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1


def _pair(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred.ravel(), truth.ravel()


def mean_class_accuracy(pred, truth) -> float:
    """Average over the classes present in ``truth`` of the per-class recall."""
    pred, truth = _pair(pred, truth)
    classes = np.unique(truth)
    return float(np.mean([np.mean(pred[truth == c] == c) for c in classes]))


def overall_accuracy(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(pred == truth))


def part_ious(pred, truth, category_parts) -> np.ndarray:
    """IoU of each part of the shape's category; an empty union scores 1."""
    pred, truth = _pair(pred, truth)
    parts = np.asarray(list(category_parts))
    if parts.size == 0:
        raise ValueError("category has no parts")
    allowed = set(parts.tolist())
    stray = (set(np.unique(pred).tolist()) | set(np.unique(truth).tolist())) - allowed
    if stray:
        raise ValueError(f"labels {sorted(stray)} are not parts of this category {sorted(allowed)}")
    out = np.empty(len(parts))
    for j, c in enumerate(parts):
        p, t = pred == c, truth == c
        union = np.sum(p | t)
        out[j] = 1.0 if union == 0 else np.sum(p & t) / union
    return out


def shape_iou(pred, truth, category_parts) -> float:
    return float(part_ious(pred, truth, category_parts).mean())


def mean_iou(shape_ious) -> float:
    shape_ious = np.asarray(shape_ious, dtype=np.float64)
    if shape_ious.size == 0:
        raise ValueError("empty input")
    return float(shape_ious.mean())


def _unit(v, what):
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(v, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        log.warning("%s normals are not unit length; renormalizing", what)
        v = v / np.where(norms > 0, norms, 1.0)[:, None]
    return v


def normal_dots(pred, gt, mask=None) -> np.ndarray:
    pred, gt = _unit(pred, "predicted"), _unit(gt, "ground-truth")
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {gt.shape}")
    keep = np.ones(len(pred), bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    if not keep.any():
        raise ValueError("no points left after masking")
    return np.clip((pred[keep] * gt[keep]).sum(axis=1), -1.0, 1.0)


def normal_errors(pred, gt, mask=None, oriented: bool = True) -> tuple[float, float, float]:
    """``(cosine similarity, cosine distance, RMS angle in degrees)``.

    The unoriented variant scores ``|cos|``, so flipped normals count as exact.
    """
    dots = normal_dots(pred, gt, mask)
    if not oriented:
        dots = np.abs(dots)
    sim = float(dots.mean())
    rms = float(np.sqrt(np.mean(np.degrees(np.arccos(dots)) ** 2)))
    return sim, 1.0 - sim, rms


def angle_histogram(angles_deg, edges=(0, 5, 10, 15, 20, 25, 30)) -> dict:
    """Counts per angular-error bin; everything past the last edge shares one bin."""
    angles = np.asarray(angles_deg, dtype=np.float64).ravel()
    edges = list(edges)
    counts, _ = np.histogram(angles, bins=edges + [np.inf])
    labels = [f"{a}-{b}" for a, b in zip(edges[:-1], edges[1:])] + [f">={edges[-1]}"]
    return dict(zip(labels, (int(c) for c in counts)))


@dataclass
class MetricsReport:
    task: str = "classification"
    num_samples: int = 0
    classes_counted: int | None = None
    mean_class_accuracy: float | None = None
    overall_accuracy: float | None = None
    per_shape_iou: list | None = None
    mean_iou: float | None = None
    normal_cosine_similarity: float | None = None
    normal_cosine_distance: float | None = None
    normal_rms_angle_deg: float | None = None
    normal_unoriented_cosine_distance: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None and k != "extra"}
        d.update(self.extra)
        return {"schema_version": REPORT_SCHEMA, **d}

    CSV_FIELDS = ("task", "num_samples", "classes_counted", "mean_class_accuracy",
                  "overall_accuracy", "mean_iou", "normal_cosine_similarity",
                  "normal_cosine_distance", "normal_rms_angle_deg")

    def csv_row(self) -> dict:
        return {k: ("" if getattr(self, k) is None else getattr(self, k)) for k in self.CSV_FIELDS}
