"""Local geometric labels: kNN graphs, local covariance, normals, curvature.

These are the self-generated targets of the auxiliary regression branch. The
covariance follows the literal displacement form ``C = sum_j r_j r_j^T`` with
``r_j = p_i - p_j`` (not mean-centered) unless ``centered=True``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud

DEFAULT_K = 20
DEGENERATE_TRACE = 1e-12
FALLBACK_NORMAL = (0.0, 0.0, 1.0)
ORIENTATIONS = ("outward", "none")
CURVATURE_KINDS = ("eigen", "normal_dev")


@dataclass(frozen=True)
class KnnGraph:
    neighbors: np.ndarray  # (n, k), sorted by distance then index
    k: int

    def __post_init__(self):
        if self.neighbors.ndim != 2 or self.neighbors.shape[1] != self.k:
            raise ValueError(f"neighbors must have shape (n, {self.k})")


@dataclass(frozen=True)
class SymMat3:
    xx: float
    xy: float
    xz: float
    yy: float
    yz: float
    zz: float

    @classmethod
    def from_matrix(cls, m) -> "SymMat3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2])

    def matrix(self) -> np.ndarray:
        return np.array([[self.xx, self.xy, self.xz],
                         [self.xy, self.yy, self.yz],
                         [self.xz, self.yz, self.zz]])


@dataclass(frozen=True)
class EigenDecomp3:
    values: np.ndarray   # ascending
    vectors: np.ndarray  # vectors[j] pairs with values[j]


@dataclass(frozen=True)
class GeomProps:
    normals: np.ndarray
    curvature: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.curvature)

    def as_array(self) -> np.ndarray:
        """Per-point target ``g = (n, u)`` of shape (n, 4)."""
        return np.concatenate([self.normals, self.curvature[:, None]], axis=1)

    def take(self, idx) -> "GeomProps":
        return GeomProps(self.normals[idx], self.curvature[idx], self.degenerate[idx])

    def to_json(self) -> dict:
        return {"normal": self.normals.tolist(),
                "curvature": self.curvature.tolist(),
                "degenerate": self.degenerate.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "GeomProps":
        return cls(np.asarray(d["normal"], dtype=np.float64).reshape(-1, 3),
                   np.asarray(d["curvature"], dtype=np.float64),
                   np.asarray(d["degenerate"], dtype=bool))


# --------------------------------------------------------------------------
# neighbours

def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def smallest_k(d2: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, ordered by value then index."""
    n = d2.shape[1]
    if k >= n or n <= 64:
        return np.argsort(d2, axis=1, kind="stable")[:, :k]
    cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d2, cand, axis=1)
    # a tie straddling the cut could have dropped a smaller index: redo those rows
    ambiguous = (d2 <= vals.max(axis=1, keepdims=True)).sum(axis=1) > k
    order = np.lexsort((cand, vals), axis=1)
    out = np.take_along_axis(cand, order, axis=1)
    if ambiguous.any():
        out[ambiguous] = np.argsort(d2[ambiguous], axis=1, kind="stable")[:, :k]
    return out


def knn_query(reference: np.ndarray, queries: np.ndarray, k: int,
              exclude: np.ndarray | None = None, chunk: int = 256) -> np.ndarray:
    """Indices into ``reference`` of the k nearest rows for every query.

    Exact brute force on squared Euclidean distance. Ties go to the smaller
    index. ``exclude[i]`` (if given) is removed from the candidates of query i.
    """
    reference = np.asarray(reference, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    out = np.empty((len(queries), k), dtype=np.int64)
    for lo in range(0, len(queries), chunk):
        d2 = _sq_dist(queries[lo:lo + chunk], reference)
        if exclude is not None:
            d2[np.arange(len(d2)), exclude[lo:lo + chunk]] = np.inf
        out[lo:lo + chunk] = smallest_k(d2, k)
    return out


def knn(points: np.ndarray, k: int, include_self: bool = False) -> KnnGraph:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    limit = n if include_self else n - 1
    if not 1 <= k <= limit:
        raise ValueError(f"k must be in [1, {limit}] for {n} points, got {k}")
    exclude = None if include_self else np.arange(n)
    return KnnGraph(knn_query(points, points, k, exclude=exclude), k)


# --------------------------------------------------------------------------
# covariance and eigen-decomposition

def covariance_at(points: np.ndarray, graph: KnnGraph, i: int,
                  centered: bool = False) -> SymMat3:
    points = np.asarray(points, dtype=np.float64)
    if not 0 <= i < len(points):
        raise IndexError(f"point index {i} out of range")
    return SymMat3.from_matrix(_covariance(points, graph.neighbors[i], points[i], centered))


def _covariance(points, nbrs, center, centered):
    ref = points[nbrs].mean(axis=0) if centered else center
    r = ref - points[nbrs]
    return r.T @ r


def local_covariances(points: np.ndarray, graph: KnnGraph,
                      centered: bool = False) -> np.ndarray:
    """All per-point covariance matrices, shape (n, 3, 3)."""
    points = np.asarray(points, dtype=np.float64)
    nb = points[graph.neighbors]  # (n, k, 3)
    ref = nb.mean(axis=1, keepdims=True) if centered else points[:, None, :]
    r = ref - nb
    return np.einsum("nki,nkj->nij", r, r)


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive.

    When several entries share the largest magnitude the first non-zero entry
    decides instead.
    """
    mag = np.abs(vecs)
    top = mag.max(axis=-1, keepdims=True)
    n_top = (mag == top).sum(axis=-1)
    lead = np.take_along_axis(vecs, np.argmax(mag, axis=-1)[..., None], -1)[..., 0]
    first_nz = np.take_along_axis(vecs, np.argmax(vecs != 0, axis=-1)[..., None], -1)[..., 0]
    ref = np.where(n_top > 1, first_nz, lead)
    return np.where((ref < 0)[..., None], -vecs, vecs)


_PAIRS = ((0, 1), (0, 2), (1, 2))


def eig_sym3_batch(mats: np.ndarray, max_sweeps: int = 16):
    """Cyclic Jacobi eigen-solver for a stack of symmetric 3x3 matrices.

    Returns ``(values, vectors)`` with ascending values of shape (..., 3) and
    sign-canonical eigenvectors as rows, shape (..., 3, 3).
    """
    mats = np.asarray(mats, dtype=np.float64)
    lead = mats.shape[:-2]
    a = np.array(mats.reshape(-1, 3, 3), copy=True)
    a = 0.5 * (a + a.transpose(0, 2, 1))
    m = len(a)
    v = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    scale = np.sqrt((a * a).sum(axis=(1, 2)))
    rows = np.arange(m)
    for _ in range(max_sweeps):
        off = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
        # per-matrix convergence keeps each result independent of the batch
        busy = off > 1e-36 * scale * scale
        if not busy.any():
            break
        for p, q in _PAIRS:
            apq = a[:, p, q]
            act = busy & (apq != 0.0)
            if not act.any():
                continue
            sel = rows[act]
            ap = a[sel]
            x = apq[act]
            theta = (ap[:, q, q] - ap[:, p, p]) / (2.0 * x)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.broadcast_to(np.eye(3), (len(sel), 3, 3)).copy()
            r = np.arange(len(sel))
            rot[r, p, p] = c
            rot[r, q, q] = c
            rot[r, p, q] = s
            rot[r, q, p] = -s
            ap = rot.transpose(0, 2, 1) @ ap @ rot
            ap[r, p, q] = 0.0
            ap[r, q, p] = 0.0
            a[sel] = ap
            v[sel] = v[sel] @ rot
    values = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(values, axis=1, kind="stable")
    values = np.take_along_axis(values, order, axis=1)
    vecs = np.take_along_axis(v.transpose(0, 2, 1), order[:, :, None], axis=1)
    vecs = _canonical_signs(vecs)
    return values.reshape(*lead, 3), vecs.reshape(*lead, 3, 3)


def eig_sym3(c: SymMat3 | np.ndarray) -> EigenDecomp3:
    mat = c.matrix() if isinstance(c, SymMat3) else np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        raise ValueError("matrix entries must be finite")
    values, vectors = eig_sym3_batch(mat[None])
    return EigenDecomp3(values[0], vectors[0])


# --------------------------------------------------------------------------
# normals and curvature

def _orient(normals, points, policy):
    if policy == "none":
        return normals
    if policy != "outward":
        raise ValueError(f"unknown orientation policy {policy!r}; expected one of {ORIENTATIONS}")
    outward = points - points.mean(axis=0)
    dots = (normals * outward).sum(axis=1)
    return np.where((dots < 0)[:, None], -normals, normals)


def _normals_from_eigen(values, vectors, points, orientation):
    degenerate = values.sum(axis=1) <= DEGENERATE_TRACE
    normals = vectors[:, 0, :].copy()
    normals = _orient(normals, points, orientation)
    normals[degenerate] = FALLBACK_NORMAL
    return normals, degenerate


def _eigen_ratio(values):
    total = values.sum(axis=1)
    degenerate = total <= DEGENERATE_TRACE
    lam_min = np.maximum(values[:, 0], 0.0)
    u = np.where(degenerate, 0.0, lam_min / np.where(degenerate, 1.0, total))
    return np.minimum(u, 1.0 / 3.0)


def estimate_normals(cloud: PointCloud | np.ndarray, k: int = DEFAULT_K,
                     orientation: str = "outward", centered: bool = False,
                     graph: KnnGraph | None = None):
    """Minimal-eigenvalue eigenvector of the local covariance at every point.

    Returns ``(normals, degenerate)``; degenerate neighbourhoods get the
    fallback normal (0, 0, 1).
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    graph = graph or knn(points, k)
    values, vectors = eig_sym3_batch(local_covariances(points, graph, centered))
    return _normals_from_eigen(values, vectors, points, orientation)


def curvature_eigen(points: np.ndarray, graph: KnnGraph, i: int,
                    centered: bool = False) -> float:
    """Change of curvature ``lambda_min / sum(lambda)``; 0 for degenerate."""
    dec = eig_sym3(covariance_at(points, graph, i, centered))
    return float(_eigen_ratio(dec.values[None])[0])


def curvature_normal_dev(normals: np.ndarray, graph: KnnGraph, i: int) -> float:
    """Mean distance between ``n_i`` and its neighbours' sign-aligned normals."""
    return float(_normal_dev_all(np.asarray(normals, float), graph)[i])


def _normal_dev_all(normals, graph):
    nb = normals[graph.neighbors]  # (n, k, 3)
    dots = np.einsum("nkj,nj->nk", nb, normals)
    nb = np.where((dots < 0)[..., None], -nb, nb)
    return np.sqrt(((normals[:, None, :] - nb) ** 2).sum(axis=2)).mean(axis=1)


def compute_props(cloud: PointCloud | np.ndarray, k: int = DEFAULT_K,
                  curvature_kind: str = "eigen", orientation: str = "outward",
                  centered: bool = False) -> GeomProps:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    if curvature_kind not in CURVATURE_KINDS:
        raise ValueError(f"unknown curvature kind {curvature_kind!r}; expected one of {CURVATURE_KINDS}")
    graph = knn(points, k)
    values, vectors = eig_sym3_batch(local_covariances(points, graph, centered))
    normals, degenerate = _normals_from_eigen(values, vectors, points, orientation)
    if curvature_kind == "eigen":
        curvature = _eigen_ratio(values)
    else:
        curvature = np.where(degenerate, 0.0, _normal_dev_all(normals, graph))
    return GeomProps(normals, curvature, degenerate)


def compute_props_at(points: np.ndarray, rows: np.ndarray, k: int = DEFAULT_K,
                     orientation: str = "outward", centered: bool = False) -> GeomProps:
    """``compute_props(points, k).take(rows)`` for the eigen-ratio curvature,
    without touching the rows that are not asked for."""
    points = np.asarray(points, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64)
    if not 1 <= k <= len(points) - 1:
        raise ValueError(f"k must be in [1, {len(points) - 1}], got {k}")
    graph = KnnGraph(knn_query(points, points[rows], k, exclude=rows), k)
    nb = points[graph.neighbors]
    ref = nb.mean(axis=1, keepdims=True) if centered else points[rows][:, None, :]
    r = ref - nb
    values, vectors = eig_sym3_batch(np.einsum("nki,nkj->nij", r, r))
    degenerate = values.sum(axis=1) <= DEGENERATE_TRACE
    normals = vectors[:, 0, :].copy()
    if orientation == "outward":
        dots = (normals * (points[rows] - points.mean(axis=0))).sum(axis=1)
        normals = np.where((dots < 0)[:, None], -normals, normals)
    elif orientation != "none":
        raise ValueError(f"unknown orientation policy {orientation!r}")
    normals[degenerate] = FALLBACK_NORMAL
    return GeomProps(normals, _eigen_ratio(values), degenerate)


def transfer_privileged(dense: PointCloud | np.ndarray, dense_props: GeomProps,
                        sparse: PointCloud | np.ndarray) -> GeomProps:
    """Give every sparse point the labels of its nearest dense point."""
    dense_pts = dense.points if isinstance(dense, PointCloud) else np.asarray(dense, float)
    sparse_pts = sparse.points if isinstance(sparse, PointCloud) else np.asarray(sparse, float)
    if len(dense_pts) == 0:
        raise ValueError("dense cloud is empty")
    if len(dense_props) != len(dense_pts):
        raise ValueError("dense labels do not match the dense cloud")
    nearest = knn_query(dense_pts, sparse_pts.reshape(-1, 3), 1)[:, 0]
    return dense_props.take(nearest)


def write_props_csv(props: GeomProps, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "nx", "ny", "nz", "u", "degenerate"])
        for i in range(len(props)):
            n = props.normals[i]
            w.writerow([i, repr(float(n[0])), repr(float(n[1])), repr(float(n[2])),
                        repr(float(props.curvature[i])), int(props.degenerate[i])])


def angular_error_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row angle between two sets of unit vectors, in degrees."""
    dots = np.clip((a * b).sum(axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))
