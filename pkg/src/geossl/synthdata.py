"""Procedural shape datasets with analytic normals and part labels.

Five categories (sphere, box, cylinder, cone, torus) are sampled uniformly by
area. Each cloud carries three kinds of geometric labels:

* ``geossl``  -- normals/curvature estimated from the (jittered) cloud itself;
* ``geopl``   -- analytic normals, with curvature taken as the local-PCA
                 eigenvalue ratio of a 16x denser clean sample;
* ``geopl_transfer`` -- labels estimated on a dense clean sample and copied to
                 each sparse point from its nearest dense point.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geomprops as gp
from .pointcloud import PointCloud
from .rng import derive_seed, stream

GENERATOR_VERSION = "geossl-synth/1"
SCHEMA_VERSION = 1
CLASS_NAMES = ("sphere", "cube", "cylinder", "cone", "torus")
PART_NAMES = {
    "sphere": ("upper_hemisphere", "lower_hemisphere"),
    "cube": ("x_faces", "y_faces", "z_faces"),
    "cylinder": ("side", "top_cap", "bottom_cap"),
    "cone": ("side", "base"),
    "torus": ("outer_half", "inner_half"),
}
DENSE_FACTOR = 16

# Ranges for the per-cloud size parameters; each cloud draws uniformly inside.
DEFAULT_RANGES = {
    "sphere": {"radius": (1.0, 1.0)},
    "cube": {"sx": (0.7, 1.3), "sy": (0.7, 1.3), "sz": (0.7, 1.3)},
    "cylinder": {"radius": (0.5, 1.0), "height": (1.0, 2.5)},
    "cone": {"radius": (0.5, 1.0), "height": (1.0, 2.5)},
    "torus": {"major": (1.0, 1.0), "minor": (0.25, 0.5)},
}


def category_parts() -> dict[str, list[int]]:
    """Global part ids owned by each category."""
    out, nxt = {}, 0
    for name in CLASS_NAMES:
        out[name] = list(range(nxt, nxt + len(PART_NAMES[name])))
        nxt += len(PART_NAMES[name])
    return out


NUM_PARTS = sum(len(v) for v in PART_NAMES.values())


@dataclass
class ShapeSpec:
    class_name: str
    params: dict = field(default_factory=dict)
    points: int = 256
    jitter: float = 0.005
    seed: int = 0
    normalize: bool = True
    rotate: bool = False
    k: int = gp.DEFAULT_K

    def __post_init__(self):
        if self.class_name not in CLASS_NAMES:
            raise ValueError(f"unknown shape class {self.class_name!r}; expected one of {CLASS_NAMES}")
        if self.points < 64:
            raise ValueError(f"points per cloud must be >= 64, got {self.points}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")
        defaults = {key: lo for key, (lo, _) in DEFAULT_RANGES[self.class_name].items()}
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(f"unknown {self.class_name} parameters: {sorted(unknown)}")
        self.params = {**defaults, **self.params}


@dataclass
class ShapeSample:
    cloud: PointCloud          # normalized, jittered; carries part + class labels
    analytic: gp.GeomProps     # normals at the clean positions, dense-limit curvature
    clean_points: np.ndarray   # normalized, pre-jitter
    center: np.ndarray
    radius: float
    rotation: np.ndarray

    def dense(self, spec: ShapeSpec, m: int) -> tuple[np.ndarray, np.ndarray]:
        """A clean dense sample in the same normalized frame, with analytic normals."""
        pts, nrm, _ = surface_sample(spec.class_name, spec.params, m,
                                     stream(spec.seed, "dense", m))
        return self._to_frame(pts, nrm)

    def _to_frame(self, pts, nrm):
        pts = (pts @ self.rotation.T - self.center) / self.radius
        return pts, nrm @ self.rotation.T


# --------------------------------------------------------------------------
# analytic surfaces

def _sphere(p, m, rng):
    d = rng.normal(size=(m, 3))
    n = d / np.linalg.norm(d, axis=1, keepdims=True)
    parts = np.where(n[:, 2] >= 0, 0, 1)
    return p["radius"] * n, n, parts


def _cube(p, m, rng):
    half = 0.5 * np.array([p["sx"], p["sy"], p["sz"]])
    face_area = 4 * np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    probs = np.repeat(face_area, 2) / (2 * face_area.sum())
    face = rng.choice(6, size=m, p=probs)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts = (rng.random((m, 3)) * 2 - 1) * half
    rows = np.arange(m)
    pts[rows, axis] = sign * half[axis]
    n = np.zeros((m, 3))
    n[rows, axis] = sign
    return pts, n, axis


def _cylinder(p, m, rng):
    r, h = p["radius"], p["height"]
    areas = np.array([2 * math.pi * r * h, math.pi * r * r, math.pi * r * r])
    where = rng.choice(3, size=m, p=areas / areas.sum())
    theta = rng.random(m) * 2 * math.pi
    rho = r * np.sqrt(rng.random(m))
    z = (rng.random(m) - 0.5) * h
    side = where == 0
    cap_z = np.where(where == 1, 0.5 * h, -0.5 * h)
    rad = np.where(side, r, rho)
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), np.where(side, z, cap_z)], axis=1)
    n = np.zeros((m, 3))
    n[side, 0], n[side, 1] = np.cos(theta[side]), np.sin(theta[side])
    n[where == 1, 2], n[where == 2, 2] = 1.0, -1.0
    return pts, n, where


def _cone(p, m, rng):
    r, h = p["radius"], p["height"]
    slant = math.hypot(r, h)
    areas = np.array([math.pi * r * slant, math.pi * r * r])
    where = rng.choice(2, size=m, p=areas / areas.sum())
    theta = rng.random(m) * 2 * math.pi
    frac = np.sqrt(rng.random(m))  # distance from the apex (side) / from the axis (base)
    side = where == 0
    rad = r * frac
    z = np.where(side, h * (1 - frac), 0.0)
    pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
    n = np.stack([h * np.cos(theta), h * np.sin(theta), np.full(m, r)], axis=1) / slant
    n[~side] = (0.0, 0.0, -1.0)
    return pts, n, where


def _torus(p, m, rng):
    big, small = p["major"], p["minor"]
    phis = np.empty(0)
    while len(phis) < m:
        # area element is proportional to (R + r cos phi)
        phi = rng.random(2 * m) * 2 * math.pi
        keep = rng.random(2 * m) * (big + small) <= big + small * np.cos(phi)
        phis = np.concatenate([phis, phi[keep]])
    phi = phis[:m]
    theta = rng.random(m) * 2 * math.pi
    ring = big + small * np.cos(phi)
    pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)
    n = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)], axis=1)
    return pts, n, np.where(np.cos(phi) >= 0, 0, 1)


_SURFACES = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder,
             "cone": _cone, "torus": _torus}


def surface_sample(class_name: str, params: dict, m: int, rng: np.random.Generator):
    """``m`` area-uniform points with outward unit normals and local part ids."""
    return _SURFACES[class_name](params, m, rng)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def dense_limit_curvature(query: np.ndarray, dense: np.ndarray, k: int) -> np.ndarray:
    """Eigenvalue-ratio curvature at ``query`` points from ``k`` dense neighbours."""
    nbrs = gp.knn_query(dense, query, k)
    r = query[:, None, :] - dense[nbrs]
    cov = np.einsum("nki,nkj->nij", r, r)
    values, _ = gp.eig_sym3_batch(cov)
    return gp._eigen_ratio(values)


def gen_shape(spec: ShapeSpec) -> tuple[PointCloud, gp.GeomProps, np.ndarray]:
    sample = gen_shape_sample(spec)
    return sample.cloud, sample.analytic, sample.cloud.part_labels


def gen_shape_sample(spec: ShapeSpec) -> ShapeSample:
    pts, normals, parts = surface_sample(spec.class_name, spec.params, spec.points,
                                         stream(spec.seed, "surface"))
    rot = _random_rotation(stream(spec.seed, "rotation")) if spec.rotate else np.eye(3)
    pts, normals = pts @ rot.T, normals @ rot.T
    if spec.normalize:
        center = pts.mean(axis=0)
        radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1)).max())
    else:
        center, radius = np.zeros(3), 1.0
    clean = (pts - center) / radius
    sample = ShapeSample(cloud=None, analytic=None, clean_points=clean,
                         center=center, radius=radius, rotation=rot)
    dense_pts, _ = sample.dense(spec, DENSE_FACTOR * spec.points)
    curvature = dense_limit_curvature(clean, dense_pts, DENSE_FACTOR * spec.k)
    offset = category_parts()[spec.class_name][0]
    noisy = clean
    if spec.jitter > 0:
        noisy = clean + stream(spec.seed, "jitter").normal(0.0, spec.jitter, size=clean.shape)
    sample.cloud = PointCloud(noisy, parts + offset, CLASS_NAMES.index(spec.class_name))
    sample.analytic = gp.GeomProps(normals, curvature, np.zeros(len(clean), bool))
    return sample


# --------------------------------------------------------------------------
# datasets

LABEL_SOURCES = ("geossl", "geopl", "geopl_transfer")


@dataclass
class DatasetSpec:
    classes: tuple = CLASS_NAMES
    train_per_class: int = 40
    test_per_class: int = 20
    points: int = 256
    dense_points: int = 4096
    jitter: float = 0.005
    seed: int = 0
    k: int = gp.DEFAULT_K
    rotate: bool = False
    transfer: bool = True
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        self.classes = tuple(self.classes)
        for name in self.classes:
            if name not in CLASS_NAMES:
                raise ValueError(f"unknown shape class {name!r}")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ValueError("need at least one training cloud per class")
        if self.points < 64:
            raise ValueError(f"points per cloud must be >= 64, got {self.points}")
        if self.dense_points <= self.points:
            raise ValueError("dense_points must exceed points")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        d["ranges"] = {c: {k: list(v) for k, v in r.items()} for c, r in self.ranges.items()}
        return d


@dataclass
class ShapeDataset:
    """Equal-size clouds stacked into arrays, ready for batching."""

    points: np.ndarray                 # (m, n, 3)
    class_labels: np.ndarray           # (m,)
    part_labels: np.ndarray            # (m, n) global part ids
    labels: dict                       # source -> (g (m, n, 4), degenerate (m, n))
    class_names: tuple = CLASS_NAMES
    category_parts: dict = field(default_factory=category_parts)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def num_parts(self) -> int:
        return max(max(v) for v in self.category_parts.values()) + 1

    def subset(self, idx) -> "ShapeDataset":
        idx = np.asarray(idx)
        return ShapeDataset(self.points[idx], self.class_labels[idx], self.part_labels[idx],
                            {k: (g[idx], d[idx]) for k, (g, d) in self.labels.items()},
                            self.class_names, self.category_parts, dict(self.meta))

    def with_points(self, points: np.ndarray) -> "ShapeDataset":
        return ShapeDataset(np.asarray(points, float), self.class_labels, self.part_labels,
                            self.labels, self.class_names, self.category_parts, dict(self.meta))

    def parts_of(self, i: int) -> list[int]:
        return self.category_parts[self.class_names[int(self.class_labels[i])]]

    # -- serialization ------------------------------------------------------
    def to_json(self) -> dict:
        clouds = []
        per_cloud = self.meta.get("clouds", [{}] * len(self))
        for i in range(len(self)):
            entry = dict(per_cloud[i])
            entry.update({
                "class_label": int(self.class_labels[i]),
                "points": self.points[i].tolist(),
                "part_labels": self.part_labels[i].tolist(),
                "labels": {src: gp.GeomProps(g[i, :, :3], g[i, :, 3], d[i]).to_json()
                           for src, (g, d) in self.labels.items()},
            })
            clouds.append(entry)
        head = {k: v for k, v in self.meta.items() if k != "clouds"}
        return {"schema_version": SCHEMA_VERSION, "generator_version": GENERATOR_VERSION,
                **head, "class_names": list(self.class_names),
                "category_parts": self.category_parts, "clouds": clouds}

    @classmethod
    def from_json(cls, doc: dict) -> "ShapeDataset":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema version {doc.get('schema_version')!r}")
        clouds = doc["clouds"]
        if not clouds:
            raise ValueError("dataset has no clouds")
        points = np.array([c["points"] for c in clouds], dtype=np.float64)
        labels = {}
        for src in clouds[0]["labels"]:
            props = [gp.GeomProps.from_json(c["labels"][src]) for c in clouds]
            labels[src] = (np.stack([p.as_array() for p in props]),
                           np.stack([p.degenerate for p in props]))
        meta = {k: v for k, v in doc.items()
                if k not in ("clouds", "class_names", "category_parts", "schema_version",
                             "generator_version")}
        meta["clouds"] = [{k: v for k, v in c.items()
                           if k not in ("points", "part_labels", "labels", "class_label")}
                          for c in clouds]
        return cls(points, np.array([c["class_label"] for c in clouds], dtype=np.int64),
                   np.array([c["part_labels"] for c in clouds], dtype=np.int64), labels,
                   tuple(doc["class_names"]),
                   {k: list(v) for k, v in doc["category_parts"].items()}, meta)


def dump_json(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def save_dataset(ds: ShapeDataset, path: str | Path) -> str:
    """Write ``ds`` and return the SHA-256 of the bytes written."""
    data = dump_json(ds.to_json())
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path: str | Path) -> ShapeDataset:
    return ShapeDataset.from_json(json.loads(Path(path).read_text()))


def _draw_params(class_name: str, ranges: dict, rng: np.random.Generator) -> dict:
    merged = {**DEFAULT_RANGES[class_name], **{k: tuple(v) for k, v in ranges.get(class_name, {}).items()}}
    return {key: float(lo if lo == hi else rng.uniform(lo, hi)) for key, (lo, hi) in merged.items()}


def make_cloud(spec: DatasetSpec, class_name: str, split: str, index: int) -> dict:
    """Generate one cloud with all label kinds. Pure function of its arguments."""
    seed = derive_seed(spec.seed, split, class_name, index)
    params = _draw_params(class_name, spec.ranges, stream(seed, "params"))
    shape = ShapeSpec(class_name, params, spec.points, spec.jitter, seed,
                      rotate=spec.rotate, k=spec.k)
    sample = gen_shape_sample(shape)
    cloud = sample.cloud
    labels = {"geossl": gp.compute_props(cloud, spec.k), "geopl": sample.analytic}
    if spec.transfer:
        dense_pts, _ = sample.dense(shape, spec.dense_points)
        nearest = gp.knn_query(dense_pts, cloud.points, 1)[:, 0]
        labels["geopl_transfer"] = gp.compute_props_at(dense_pts, nearest, spec.k)
    return {"seed": seed, "class_name": class_name, "params": params, "cloud": cloud,
            "labels": labels}


def build_split(spec: DatasetSpec, split: str, per_class: int, workers: int = 1) -> ShapeDataset:
    jobs = [(name, i) for i in range(per_class) for name in spec.classes]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            made = list(pool.map(make_cloud, [spec] * len(jobs), [j[0] for j in jobs],
                                 [split] * len(jobs), [j[1] for j in jobs]))
    else:
        made = [make_cloud(spec, name, split, i) for name, i in jobs]
    sources = list(made[0]["labels"])
    labels = {}
    for src in sources:
        labels[src] = (np.stack([m["labels"][src].as_array() for m in made]),
                       np.stack([m["labels"][src].degenerate for m in made]))
    meta = {"split": split, "spec": spec.to_dict(),
            "clouds": [{"id": f"{split}-{i:05d}", "seed": m["seed"], "class_name": m["class_name"],
                        "params": m["params"]} for i, m in enumerate(made)]}
    return ShapeDataset(np.stack([m["cloud"].points for m in made]),
                        np.array([spec.classes.index(m["class_name"]) for m in made], np.int64),
                        np.stack([m["cloud"].part_labels for m in made]), labels, spec.classes,
                        category_parts(), meta)


def gen_dataset(spec: DatasetSpec, out_dir: str | Path | None = None, workers: int = 1):
    """Build train/test splits; when ``out_dir`` is given also write them plus a manifest.

    Returns ``(train, test, manifest)``; the manifest is ``None`` when nothing is written.
    """
    train = build_split(spec, "train", spec.train_per_class, workers)
    test = build_split(spec, "test", spec.test_per_class, workers) if spec.test_per_class else None
    if out_dir is None:
        return train, test, None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"train.json": save_dataset(train, out / "train.json")}
    if test is not None:
        files["test.json"] = save_dataset(test, out / "test.json")
    manifest = {"schema_version": SCHEMA_VERSION, "kind": "dataset_manifest",
                "generator_version": GENERATOR_VERSION, "spec": spec.to_dict(),
                "files": files}
    (out / "manifest.json").write_bytes(dump_json(manifest))
    return train, test, manifest
