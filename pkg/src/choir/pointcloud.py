"""Point clouds: containers, file formats, augmentations and exact kNN graphs."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import so3

PTS_MAGIC = b"CHOIRPTS"
PTS_VERSION = 1
DEFAULT_N = 1024
DEFAULT_K = 20
DEFAULT_PATCH = 64
PRECISIONS = {"single": np.float32, "double": np.float64}


class PointCloudFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    instance_id: str = ""
    class_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> PointCloud:
        return replace(self, points=points)


@dataclass(frozen=True)
class KnnGraph:
    k: int
    indices: np.ndarray
    precision_mode: str = "double"
    frozen: bool = False

    def averaging_matrix(self, k: int | None = None) -> sp.csr_matrix:
        """Sparse row-stochastic matrix averaging over the first ``k`` neighbors."""
        k = k or self.k
        idx = self.indices[:, :k]
        n = len(idx)
        rows = np.repeat(np.arange(n), k)
        return sp.csr_matrix((np.full(n * k, 1.0 / k), (rows, idx.ravel())), shape=(n, n))

    def truncated(self, k: int) -> KnnGraph:
        if k > self.k:
            raise ValueError(f"cannot truncate a {self.k}-NN graph to k={k}")
        return replace(self, k=k, indices=self.indices[:, :k])


# -- I/O ---------------------------------------------------------------------
def load(path, fmt: str | None = None, instance_id: str | None = None, class_id: str = "") -> PointCloud:
    """Read ``xyz`` text or ``choir`` binary; the result is not re-centered."""
    path = Path(path)
    fmt = fmt or ("choir" if path.suffix == ".choir" else "xyz")
    iid = instance_id if instance_id is not None else path.stem
    if fmt == "xyz":
        rows = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 3:
                raise PointCloudFormatError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise PointCloudFormatError(f"{path}:{lineno}: non-numeric token in {s!r}") from exc
        if not rows:
            raise PointCloudFormatError(f"{path}: no points")
        return PointCloud(np.array(rows), iid, class_id)
    if fmt == "choir":
        buf = path.read_bytes()
        if buf[:len(PTS_MAGIC)] != PTS_MAGIC:
            raise PointCloudFormatError(f"{path}: bad magic {buf[:len(PTS_MAGIC)]!r}")
        try:
            version, n = struct.unpack_from("<IQ", buf, len(PTS_MAGIC))
        except struct.error as exc:
            raise PointCloudFormatError(f"{path}: truncated header") from exc
        if version != PTS_VERSION:
            raise PointCloudFormatError(f"{path}: unsupported version {version}")
        offset = len(PTS_MAGIC) + 12
        if len(buf) != offset + 24 * n:
            raise PointCloudFormatError(f"{path}: expected {n} points, payload has {len(buf) - offset} bytes")
        pts = np.frombuffer(buf, dtype="<f8", count=3 * n, offset=offset).reshape(n, 3)
        return PointCloud(pts.astype(np.float64), iid, class_id)
    raise ValueError(f"unknown point-cloud format {fmt!r}")


def save(pc: PointCloud, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("choir" if path.suffix == ".choir" else "xyz")
    if fmt == "xyz":
        lines = [f"{x!r} {y!r} {z!r}" for x, y, z in pc.points.tolist()]
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "choir":
        header = PTS_MAGIC + struct.pack("<IQ", PTS_VERSION, len(pc))
        path.write_bytes(header + np.ascontiguousarray(pc.points, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unknown point-cloud format {fmt!r}")


# -- geometry and augmentation -----------------------------------------------
def center(pc: PointCloud) -> PointCloud:
    return pc.with_points(pc.points - pc.points.mean(axis=0))


def apply_rotation(pc: PointCloud, r: np.ndarray) -> PointCloud:
    """Row-vector action ``points @ r``."""
    return pc.with_points(pc.points @ np.asarray(r, dtype=np.float64))


def resample(pc: PointCloud, n: int = DEFAULT_N, rng: np.random.Generator | None = None) -> PointCloud:
    if n <= 0:
        raise ValueError("resample needs n >= 1")
    if len(pc) == 0:
        raise ValueError("cannot resample an empty cloud")
    rng = rng or np.random.default_rng()
    idx = rng.choice(len(pc), size=n, replace=n > len(pc))
    return pc.with_points(pc.points[idx])


def knn_patch_removal(pc: PointCloud, patch_size: int = DEFAULT_PATCH,
                      rng: np.random.Generator | None = None) -> PointCloud:
    """Drop a random seed point and its ``patch_size - 1`` nearest neighbours."""
    if patch_size >= len(pc):
        raise ValueError(f"patch_size {patch_size} must be < N = {len(pc)}")
    if patch_size <= 0:
        return pc
    rng = rng or np.random.default_rng()
    seed = int(rng.integers(len(pc)))
    d = ((pc.points - pc.points[seed]) ** 2).sum(axis=1)
    order = np.argsort(d, kind="stable")
    keep = np.ones(len(pc), dtype=bool)
    keep[order[:patch_size]] = False
    return center(pc.with_points(pc.points[keep]))


def gaussian_noise(pc: PointCloud, sigma: float, rng: np.random.Generator | None = None) -> PointCloud:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return pc
    rng = rng or np.random.default_rng()
    return center(pc.with_points(pc.points + rng.normal(0.0, sigma, size=pc.points.shape)))


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean squared nearest-neighbour distance, averaged over both directions."""
    from scipy.spatial import cKDTree

    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (np.mean(da ** 2) + np.mean(db ** 2)))


# -- kNN -----------------------------------------------------------------------
def squared_distances(points: np.ndarray, precision_mode: str = "double") -> np.ndarray:
    """Pairwise squared distances via ``|x|^2 + |y|^2 - 2 x.y`` in the requested precision."""
    x = np.asarray(points, dtype=PRECISIONS[precision_mode])
    sq = (x * x).sum(axis=1)
    return sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)


def knn_indices(points: np.ndarray, k: int, precision_mode: str = "double") -> np.ndarray:
    """Exact kNN table sorted by distance, ties broken by lowest index, no self-loops."""
    n = len(points)
    if n <= k:
        raise ValueError(f"kNN needs N > k, got N = {n}, k = {k}")
    d = squared_distances(points, precision_mode)
    np.fill_diagonal(d, np.inf)
    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d, part, axis=1).max(axis=1, keepdims=True)
    less = d < kth
    equal = d == kth
    need = k - less.sum(axis=1, keepdims=True)
    take = less | (equal & (np.cumsum(equal, axis=1) <= need))
    rows, cols = np.nonzero(take)
    idx = cols.reshape(n, k)  # row-major nonzero keeps ascending index within a row
    dist = np.take_along_axis(d, idx, axis=1)
    order = np.argsort(dist, axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def knn(pc: PointCloud | np.ndarray, k: int = DEFAULT_K, precision_mode: str = "double",
        frozen: bool = False) -> KnnGraph:
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc)
    return KnnGraph(k, knn_indices(pts, k, precision_mode), precision_mode, frozen)


def wrong_edges(reference: np.ndarray, other: np.ndarray) -> int:
    """Directed edges of ``reference`` missing from the same row of ``other``."""
    present = (reference[:, :, None] == other[:, None, :]).any(axis=2)
    return int((~present).sum())


@dataclass
class AuditResult:
    counts: np.ndarray
    k: int
    n: int
    precision_mode: str
    frozen: bool

    @property
    def mean(self) -> float:
        return float(self.counts.mean())

    @property
    def total_edges(self) -> int:
        return self.n * self.k


def knn_rotation_audit(pc: PointCloud, k: int = DEFAULT_K, precision_mode: str = "double",
                       trials: int = 10, rng: np.random.Generator | None = None,
                       frozen: bool = False) -> AuditResult:
    """Count kNN edges that change when the cloud is rotated."""
    rng = rng or np.random.default_rng()
    base = knn(pc, k, precision_mode, frozen=frozen)
    counts = []
    for _ in range(trials):
        r = so3.sample_uniform(rng)
        if frozen:
            rotated = base  # a frozen graph is reused as-is
        else:
            rotated = knn(apply_rotation(pc, r), k, precision_mode)
        counts.append(wrong_edges(base.indices, rotated.indices))
    return AuditResult(np.array(counts), k, len(pc), precision_mode, frozen)
