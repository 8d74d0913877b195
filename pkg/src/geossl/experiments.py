"""Study drivers: property ablation, lambda sweep, noise robustness, normal probe.

Each study is a list of independent cells (one training run each). Cells are
pure functions of their arguments, so they can run in a process pool and the
results are collected in cell order regardless of completion order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import geomprops as gp
from . import metrics
from .config import ModelConfig, TrainConfig
from .model import predict
from .pointcloud import PointCloud, add_gaussian_noise
from .rng import derive_seed
from .synthdata import ShapeDataset
from .training import (evaluate, input_channels, predicted_normals, probe_frozen_backbone,
                       train, train_regressor)

log = logging.getLogger(__name__)

LAMBDA_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
PROPERTY_SETS = ("", "n", "u", "nu")
ABLATION_MODES = ("input", "supervision")
PROBE_VARIANTS = ("scratch", "frozen", "geossl")


def run_cells(fn, cells: list, workers: int = 1) -> list:
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, cells))
    return [fn(c) for c in cells]


def _summary(rows: list[dict], keys: tuple, value: str) -> list[dict]:
    """Mean and sample std of ``value`` grouped by ``keys``, in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    out = []
    for key, vals in groups.items():
        vals = np.asarray(vals, dtype=np.float64)
        out.append({**dict(zip(keys, key)), "n": len(vals), "mean": float(vals.mean()),
                    "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0})
    return out


# --------------------------------------------------------------------------
# classification cells

def _classify_cell(cell):
    train_set, test_set, cfg, tcfg, input_props, tags = cell
    params, _ = train(train_set, cfg, tcfg, input_props=input_props)
    rep = evaluate(params, test_set, cfg, gt_source=None, input_props=input_props)
    return {**tags, "seed": tcfg.seed, "oa": rep.overall_accuracy, "ma": rep.mean_class_accuracy}


def classify_runs(train_set: ShapeDataset, test_set: ShapeDataset, cfg: ModelConfig,
                  variants: dict[str, TrainConfig], seeds, workers: int = 1) -> list[dict]:
    """Train every ``variants`` config for every seed; one row per run."""
    cells = [(train_set, test_set, cfg, replace(tcfg, seed=int(s)), "", {"variant": name})
             for name, tcfg in variants.items() for s in seeds]
    return run_cells(_classify_cell, cells, workers)


def ablate_properties(train_set: ShapeDataset, test_set: ShapeDataset, cfg: ModelConfig,
                      tcfg: TrainConfig, seeds, workers: int = 1) -> list[dict]:
    """{P, P+n, P+u, P+n+u} x {as input, as supervision}, one row per cell and seed.

    As input, the cloud's own estimated properties are appended to the
    coordinates and no auxiliary loss is used. As supervision, the same
    properties become regression targets (GeoSSL) on plain coordinates.
    """
    cells = []
    for props in PROPERTY_SETS:
        for mode in ABLATION_MODES:
            for s in seeds:
                if mode == "input" or not props:
                    c = replace(cfg, in_channels=input_channels(props if mode == "input" else ""))
                    t = replace(tcfg, seed=int(s), supervision="none")
                    inp = props if mode == "input" else ""
                else:
                    c = cfg
                    t = replace(tcfg, seed=int(s), supervision="geossl", reg_targets=props)
                    inp = ""
                cells.append((train_set, test_set, c, t, inp,
                              {"properties": "P" + "".join("+" + p for p in props), "mode": mode}))
    return run_cells(_classify_cell, cells, workers)


def sweep_lambda(train_set: ShapeDataset, test_set: ShapeDataset, cfg: ModelConfig,
                 tcfg: TrainConfig, lambdas=LAMBDA_GRID, seeds=(0,), workers: int = 1) -> list[dict]:
    cells = [(train_set, test_set, cfg, replace(tcfg, lam=float(lam), seed=int(s)), "",
              {"lambda": float(lam)})
             for lam in lambdas for s in seeds]
    rows = run_cells(_classify_cell, cells, workers)
    return [{"lambda": r["lambda"], "seed": r["seed"], "oa": r["oa"], "ma": r["ma"]} for r in rows]


# --------------------------------------------------------------------------
# normal estimation

def noisy_copy(ds: ShapeDataset, sigma: float, seed: int) -> ShapeDataset:
    """Every cloud perturbed by its own seeded Gaussian noise stream."""
    pts = np.stack([add_gaussian_noise(PointCloud(p), sigma, derive_seed(seed, "noise", i)).points
                    for i, p in enumerate(ds.points)])
    return ds.with_points(pts)


def _noise_cell(cell):
    train_set, test_set, cfg, tcfg, sigma, k, label_source, gt_source, keep_points = cell
    gt, degenerate = test_set.labels[gt_source]
    gt_n = gt[..., :3].reshape(-1, 3)
    keep = ~degenerate.reshape(-1)
    noisy = noisy_copy(test_set, sigma, tcfg.seed)
    row = {"seed": tcfg.seed, "sigma": sigma}
    angles = {}
    for orientation in gp.ORIENTATIONS:
        est = np.stack([gp.compute_props(p, k, orientation=orientation).normals
                        for p in noisy.points]).reshape(-1, 3)
        row[f"pca_{orientation}"] = metrics.normal_errors(est, gt_n, keep)[1]
        angles[f"pca_{orientation}"] = gp.angular_error_deg(est, gt_n)
    params, _ = train_regressor(train_set, cfg, tcfg, label_source)
    _, geom = predict(params, noisy.points, cfg, need_task=False)
    learned = predicted_normals(geom).reshape(-1, 3)
    row["learned"] = metrics.normal_errors(learned, gt_n, keep)[1]
    angles["learned"] = gp.angular_error_deg(learned, gt_n)
    row["histograms"] = {name: metrics.angle_histogram(a[keep]) for name, a in angles.items()}
    if keep_points:
        row["per_point_deg"] = {name: a.reshape(degenerate.shape).tolist()
                                for name, a in angles.items()}
    return row


def noise_robustness(train_set: ShapeDataset, test_set: ShapeDataset, cfg: ModelConfig,
                     tcfg: TrainConfig, sigma: float = 0.01, seeds=(0,), k: int = gp.DEFAULT_K,
                     label_source: str = "geopl", gt_source: str = "geopl",
                     workers: int = 1) -> dict:
    """PCA normals versus a learned regressor on noisy test clouds.

    The regressor is trained on the clean training clouds against
    ``label_source`` targets. Both estimates are scored by oriented cosine
    distance against ``gt_source`` normals. PCA is reported twice, with
    outward orientation and with the raw eigenvector sign.
    Per-point angular errors are kept for the first seed.
    """
    if gt_source not in test_set.labels:
        raise ValueError(f"test set carries no {gt_source!r} labels")
    if label_source not in train_set.labels:
        raise ValueError(f"training set carries no {label_source!r} labels")
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    cells = [(train_set, test_set, cfg, replace(tcfg, seed=int(s)), sigma, k, label_source,
              gt_source, i == 0)
             for i, s in enumerate(seeds)]
    rows = run_cells(_noise_cell, cells, workers)
    methods = ("pca_outward", "pca_none", "learned")
    summary = {m: float(np.mean([r[m] for r in rows])) for m in methods}
    return {"sigma": sigma, "k": k, "label_source": label_source, "gt_source": gt_source,
            "seeds": [int(s) for s in seeds], "cosine_distance": summary, "runs": rows}


def _probe_cell(cell):
    train_set, test_set, cfg, tcfg, source, variant = cell
    if variant == "scratch":
        params, _ = train_regressor(train_set, cfg, tcfg, source)
        rep = evaluate(params, test_set, cfg, gt_source=source)
    elif variant == "frozen":
        pre, _ = train(train_set, cfg, replace(tcfg, supervision="none"))
        _, rep = probe_frozen_backbone(pre, train_set, test_set, cfg, tcfg, source)
    else:
        params, _ = train(train_set, cfg, replace(tcfg, supervision="geossl"))
        rep = evaluate(params, test_set, cfg, gt_source=source)
    return {"variant": variant, "seed": tcfg.seed, "cosine_similarity": rep.normal_cosine_similarity}


def probe(train_set: ShapeDataset, test_set: ShapeDataset, cfg: ModelConfig, tcfg: TrainConfig,
          seeds=(0,), source: str = "geopl", workers: int = 1) -> list[dict]:
    """Normal-estimation quality of three encoders.

    ``scratch`` trains encoder and regression head on normals alone;
    ``frozen`` trains only a regression head on a classification-only encoder;
    ``geossl`` reads the regression head of a jointly trained GeoSSL network.
    """
    cells = [(train_set, test_set, cfg, replace(tcfg, seed=int(s)), source, v)
             for v in PROBE_VARIANTS for s in seeds]
    return run_cells(_probe_cell, cells, workers)


def summarize(rows: list[dict], keys: tuple, value: str) -> list[dict]:
    return _summary(rows, keys, value)
