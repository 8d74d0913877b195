"""Point clouds and triangle meshes: ingestion, sampling, normalization, noise."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream


class OFFParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    part_labels: np.ndarray | None = None
    class_label: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError(f"points must be a non-empty (n, 3) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.part_labels is not None:
            labels = np.asarray(self.part_labels, dtype=np.int64)
            if labels.shape != (len(pts),):
                raise ValueError(
                    f"part_labels has shape {labels.shape}, expected ({len(pts)},)")
            object.__setattr__(self, "part_labels", _frozen(labels))
        if self.class_label is not None:
            object.__setattr__(self, "class_label", int(self.class_label))

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.part_labels, self.class_label)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    degenerate: np.ndarray = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "degenerate", _frozen(self.face_areas() <= 0.0))

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def load_off(path: str | Path) -> TriMesh:
    """Read an ASCII OFF file, fan-triangulating polygonal faces."""
    rows: list[tuple[int, list[str]]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                rows.append((lineno, text.split()))
    if not rows or not rows[0][1][0].startswith("OFF"):
        raise OFFParseError(rows[0][0] if rows else 1, "missing OFF header")

    lineno, head = rows[0]
    # Some exporters glue the counts onto the keyword ("OFF490 518 0").
    tail = head[0][3:]
    counts = ([tail] if tail else []) + head[1:]
    pos = 1
    if not counts:
        if len(rows) < 2:
            raise OFFParseError(lineno, "missing element counts")
        lineno, counts = rows[1]
        pos = 2

    def ints(tokens: list[str], line: int) -> list[int]:
        try:
            return [int(t) for t in tokens]
        except ValueError:
            raise OFFParseError(line, f"expected integers, got {' '.join(tokens)!r}") from None

    if len(counts) < 2:
        raise OFFParseError(lineno, "expected vertex and face counts")
    n_vert, n_face = ints(counts[:2], lineno)
    if n_vert < 0 or n_face < 0:
        raise OFFParseError(lineno, "negative element count")
    if len(rows) - pos < n_vert + n_face:
        last = rows[-1][0] if rows else lineno
        raise OFFParseError(last, "unexpected end of file")

    vertices = np.empty((n_vert, 3))
    for i in range(n_vert):
        line, tokens = rows[pos + i]
        if len(tokens) < 3:
            raise OFFParseError(line, "vertex needs 3 coordinates")
        try:
            vertices[i] = [float(t) for t in tokens[:3]]
        except ValueError:
            raise OFFParseError(line, f"non-numeric vertex token in {' '.join(tokens)!r}") from None
        if not np.all(np.isfinite(vertices[i])):
            raise OFFParseError(line, "non-finite vertex coordinate")
    pos += n_vert

    triangles = []
    for i in range(n_face):
        line, tokens = rows[pos + i]
        values = ints(tokens, line)
        m = values[0]
        idx = values[1:1 + m]
        if m < 3 or len(idx) != m:
            raise OFFParseError(line, f"face declares {m} vertices but lists {len(idx)}")
        for v in idx:
            if not 0 <= v < n_vert:
                raise OFFParseError(line, f"vertex index {v} out of range [0, {n_vert})")
        triangles.extend((idx[0], idx[j], idx[j + 1]) for j in range(1, m - 1))
    return TriMesh(vertices, np.array(triangles, dtype=np.int64).reshape(-1, 3))


def write_off(mesh: TriMesh, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"OFF\n{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_xyz(path: str | Path) -> PointCloud:
    """One ``x y z [part_label]`` record per line."""
    points, labels = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            tokens = raw.split("#", 1)[0].split()
            if not tokens:
                continue
            if len(tokens) not in (3, 4):
                raise ValueError(f"line {lineno}: expected 3 or 4 fields, got {len(tokens)}")
            try:
                points.append([float(t) for t in tokens[:3]])
                if len(tokens) == 4:
                    labels.append(int(tokens[3]))
            except ValueError:
                raise ValueError(f"line {lineno}: malformed record {raw.strip()!r}") from None
    if labels and len(labels) != len(points):
        raise ValueError("part labels present on some lines but not all")
    return PointCloud(np.array(points).reshape(-1, 3), np.array(labels) if labels else None)


def write_xyz(cloud: PointCloud, path: str | Path) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(cloud.points):
            line = " ".join(repr(float(c)) for c in p)
            if cloud.part_labels is not None:
                line += f" {int(cloud.part_labels[i])}"
            fh.write(line + "\n")


def _pair_distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


def farthest_point_sample(points: np.ndarray, n: int, start: int = 0,
                          return_radii: bool = False):
    """Greedy farthest point sampling.

    Each step picks the point whose distance to the already selected set is
    largest; ties go to the smallest index. With ``return_radii`` the covered
    radius before each pick is returned as well (``inf`` for the first pick),
    which is non-increasing by construction.
    """
    points = np.asarray(points, dtype=np.float64)
    m = len(points)
    if not 1 <= n <= m:
        raise ValueError(f"n must be in [1, {m}], got {n}")
    if not 0 <= start < m:
        raise ValueError(f"start index {start} out of range [0, {m})")
    chosen = np.empty(n, dtype=np.int64)
    radii = np.empty(n)
    chosen[0], radii[0] = start, np.inf
    mindist = _pair_distances(points, points[start])
    for t in range(1, n):
        nxt = int(np.argmax(mindist))
        chosen[t], radii[t] = nxt, mindist[nxt]
        np.minimum(mindist, _pair_distances(points, points[nxt]), out=mindist)
    return (chosen, radii) if return_radii else chosen


def sample_surface(mesh: TriMesh, n: int, seed: int, oversample: int = 4,
                   start: int = 0) -> PointCloud:
    """Area-weighted random samples on the faces, thinned to ``n`` by FPS."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    areas = np.where(mesh.degenerate, 0.0, mesh.face_areas())
    total = areas.sum()
    if total <= 0.0:
        raise ValueError("mesh has no non-degenerate faces")
    rng = stream(seed, "sample_surface")
    m = oversample * n
    face = rng.choice(len(areas), size=m, p=areas / total)
    r1 = np.sqrt(rng.random(m))
    r2 = rng.random(m)
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    cand = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    idx = farthest_point_sample(cand, n, start=start)
    return PointCloud(cand[idx])


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((centered ** 2).sum(axis=1)).max()
    if radius == 0.0:
        raise ValueError("cannot normalize a cloud whose points are all identical")
    out = centered / radius
    # one refinement pass pulls the centroid from ~1e-16*radius to round-off
    out = out - out.mean(axis=0)
    return cloud.with_points(out / np.sqrt((out ** 2).sum(axis=1)).max())


def normalization_transform(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Centroid and radius that ``normalize_unit_sphere`` divides by (first pass)."""
    points = np.asarray(points, dtype=np.float64)
    center = points.mean(axis=0)
    radius = float(np.sqrt(((points - center) ** 2).sum(axis=1)).max())
    if radius == 0.0:
        raise ValueError("cannot normalize a cloud whose points are all identical")
    return center, radius


def add_gaussian_noise(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return cloud
    noise = stream(seed, "gaussian_noise").normal(0.0, sigma, size=cloud.points.shape)
    return cloud.with_points(cloud.points + noise)
