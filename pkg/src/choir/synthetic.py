"""Parametric asymmetric shape families used as a desk-scale stand-in for
ShapeNet-style categories.

Every family samples a surface made of simple parts (boxes, cylinders,
ellipsoids) in one shared aligned frame; instances differ by jittered part
sizes and offsets.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import pointcloud as pcm
from . import so3
from .pointcloud import PointCloud

CORPUS_VERSION = 1


# -- surface primitives ------------------------------------------------------
# Each primitive is (area, sampler(rng, n) -> n x 3).
def _box(center, size):
    c, s = np.asarray(center, float), np.asarray(size, float)
    faces = []
    for ax in range(3):
        u, v = [a for a in range(3) if a != ax]
        faces.append((s[u] * s[v], ax, u, v))
    area = 2 * sum(f[0] for f in faces)

    def sample(rng, n):
        w = np.array([f[0] for f in faces] * 2)
        pick = rng.choice(6, size=n, p=w / w.sum())
        out = rng.uniform(-0.5, 0.5, size=(n, 3)) * s
        ax = np.array([faces[p % 3][1] for p in pick])
        sign = np.where(pick < 3, -0.5, 0.5)
        out[np.arange(n), ax] = sign * s[ax]
        return out + c

    return area, sample


def _cylinder(center, radius, length, axis):
    c = np.asarray(center, float)
    area = 2 * np.pi * radius * length + 2 * np.pi * radius ** 2

    def sample(rng, n):
        n_side = rng.binomial(n, (2 * np.pi * radius * length) / area)
        th = rng.uniform(0, 2 * np.pi, n)
        t = rng.uniform(-0.5, 0.5, n) * length
        r = np.full(n, radius)
        r[n_side:] = radius * np.sqrt(rng.uniform(0, 1, n - n_side))
        t[n_side:] = np.where(rng.uniform(size=n - n_side) < 0.5, -0.5, 0.5) * length
        local = np.stack([t, r * np.cos(th), r * np.sin(th)], axis=1)
        perm = {0: [0, 1, 2], 1: [1, 0, 2], 2: [1, 2, 0]}[axis]
        return local[:, perm] + c

    return area, sample


def _ellipsoid(center, radii):
    c, r = np.asarray(center, float), np.asarray(radii, float)
    p = 1.6075
    a, b, cc = r
    area = 4 * np.pi * (((a * b) ** p + (a * cc) ** p + (b * cc) ** p) / 3) ** (1 / p)

    def sample(rng, n):
        g = rng.standard_normal((n, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * r + c

    return area, sample


def _frustum(height, bottom, top):
    """Tapered box along z with rectangular cross sections ``bottom`` -> ``top``."""
    bottom, top = np.asarray(bottom, float), np.asarray(top, float)
    mid = 0.5 * (bottom + top)
    area = 2 * height * (mid[0] + mid[1]) + bottom.prod() + top.prod()

    def sample(rng, n):
        t = rng.uniform(0, 1, n)
        wh = bottom + (top - bottom) * t[:, None]
        side = rng.integers(0, 6, n)
        u = rng.uniform(-0.5, 0.5, n)
        pts = np.zeros((n, 3))
        pts[:, 2] = (t - 0.5) * height
        for s, (ax, sign) in enumerate([(0, -1), (0, 1), (1, -1), (1, 1)]):
            m = side == s
            other = 1 - ax
            pts[m, ax] = sign * 0.5 * wh[m, ax]
            pts[m, other] = u[m] * wh[m, other]
        for s, (z, dims) in ((4, (-0.5, bottom)), (5, (0.5, top))):
            m = side == s
            pts[m, 2] = z * height
            pts[m, 0] = rng.uniform(-0.5, 0.5, m.sum()) * dims[0]
            pts[m, 1] = rng.uniform(-0.5, 0.5, m.sum()) * dims[1]
        return pts

    return area, sample


def _sample_parts(parts, n: int, rng: np.random.Generator) -> np.ndarray:
    areas = np.array([a for a, _ in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate([s(rng, c) for (_, s), c in zip(parts, counts) if c > 0])


# -- families ----------------------------------------------------------------
def _j(rng, jitter):
    """Multiplicative jitter factor in [1 - jitter, 1 + jitter]; 1 when rng is None."""
    return 1.0 if rng is None else float(rng.uniform(1 - jitter, 1 + jitter))


def _o(rng, amount):
    return 0.0 if rng is None else float(rng.uniform(-amount, amount))


def plane_parts(rng=None, jitter=0.15):
    L = 2.0 * _j(rng, jitter)
    R = 0.2 * _j(rng, jitter)
    span = 1.8 * _j(rng, jitter)
    chord = 0.4 * _j(rng, jitter)
    wing_x = 0.25 * L / 2 + _o(rng, 0.08)
    fin_h = 0.6 * _j(rng, jitter)
    tail_x = -0.42 * L
    return [
        _ellipsoid([0, 0, 0], [L / 2, R, R]),
        _box([wing_x, 0, -0.6 * R], [chord, span, 0.05]),
        _box([tail_x, 0, R + fin_h / 2 - 0.05], [0.35 * _j(rng, jitter), 0.08, fin_h]),
        _box([tail_x, 0, 0.3 * R], [0.2, 0.6 * _j(rng, jitter), 0.03]),
        _ellipsoid([0.3 * L, 0, 0.8 * R], [0.25 * _j(rng, jitter), 0.12, 0.12]),  # canopy
    ]


def bracket_parts(rng=None, jitter=0.15):
    base_l = 1.6 * _j(rng, jitter)
    base_w = 0.7 * _j(rng, jitter)
    wall_h = 1.0 * _j(rng, jitter)
    t = 0.1
    boss_x = 0.25 * base_l + _o(rng, 0.08)
    boss_y = 0.15 + _o(rng, 0.05)
    return [
        _box([0, 0, 0], [base_l, base_w, t]),
        _box([-base_l / 2 + t / 2, 0, wall_h / 2], [t, base_w, wall_h]),
        _cylinder([boss_x, boss_y, 0.15 * _j(rng, jitter)], 0.12 * _j(rng, jitter), 0.3, axis=2),
        _box([-base_l / 2 + 0.2, -base_w / 2 + 0.05, 0.2], [0.3, 0.1, 0.3 * _j(rng, jitter)]),
    ]


def tapered_parts(rng=None, jitter=0.15):
    h = 1.6 * _j(rng, jitter)
    bottom = [0.9 * _j(rng, jitter), 0.6 * _j(rng, jitter)]
    top = [0.4 * _j(rng, jitter), 0.3 * _j(rng, jitter)]
    knob_z = 0.25 * h + _o(rng, 0.1)
    return [
        _frustum(h, bottom, top),
        _cylinder([0.45 + 0.2 * _j(rng, jitter), 0.05, knob_z], 0.14, 0.5 * _j(rng, jitter), axis=0),
        _box([-0.15, 0.1, h / 2 + 0.15], [0.2, 0.45 * _j(rng, jitter), 0.3]),
    ]


def chair_parts(rng=None, jitter=0.15):
    w = 1.0 * _j(rng, jitter)
    d = 0.9 * _j(rng, jitter)
    back_h = 1.0 * _j(rng, jitter)
    leg_h = 0.8 * _j(rng, jitter)
    parts = [
        _box([0, 0, 0], [d, w, 0.08]),
        _box([-d / 2 + 0.04, 0, back_h / 2], [0.08, w, back_h]),
    ]
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(_box([sx * (d / 2 - 0.05), sy * (w / 2 - 0.05), -leg_h / 2], [0.06, 0.06, leg_h]))
    parts.append(_box([0.1, w / 2, 0.2], [0.5 * _j(rng, jitter), 0.05, 0.05]))
    return parts


def mug_parts(rng=None, jitter=0.15):
    r = 0.45 * _j(rng, jitter)
    h = 1.2 * _j(rng, jitter)
    hz = 0.2 + _o(rng, 0.05)
    return [
        _cylinder([0, 0, 0], r, h, axis=2),
        _cylinder([0, 0, -h / 2 - 0.06], 1.3 * r, 0.12, axis=2),  # foot
        _box([r + 0.25, 0, hz + 0.3], [0.5, 0.16, 0.1]),
        _box([r + 0.25, 0, hz - 0.3], [0.5, 0.16, 0.1]),
        _box([r + 0.45, 0, hz], [0.1, 0.16, 0.6 * _j(rng, jitter)]),
    ]


FAMILIES: dict[str, Callable] = {
    "plane": plane_parts,
    "bracket": bracket_parts,
    "tapered": tapered_parts,
    "chair": chair_parts,
    "mug": mug_parts,
}


class SymmetricFamilyError(ValueError):
    pass


def candidate_symmetries(points: np.ndarray, rng: np.random.Generator, n_random: int = 32) -> list[np.ndarray]:
    """Rotations worth testing for self-symmetry: cyclic turns about the
    principal axes, axis swaps of the principal frame, and random draws."""
    _, vecs = np.linalg.eigh(np.cov(points.T))
    cands = []
    for ax in range(3):
        for order in (2, 3, 4, 5, 6):
            for m in range(1, order):
                # rotation about a principal axis, expressed for row vectors
                r = axis_angle_in_frame(vecs, ax, 2 * np.pi * m / order)
                cands.append(r)
    for perm in ([1, 0, 2], [0, 2, 1], [2, 1, 0], [1, 2, 0], [2, 0, 1]):
        for signs in ([1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1], [-1, 1, 1], [1, -1, 1], [1, 1, -1], [-1, -1, -1]):
            m = vecs[:, perm] * signs
            r = vecs @ m.T
            if np.linalg.det(r) > 0:
                cands.append(r)
    cands.extend(so3.sample_many(rng, n_random))
    return [c for c in cands if so3.angle_between(c, np.eye(3)) > 1e-3]


def axis_angle_in_frame(frame: np.ndarray, ax: int, theta: float) -> np.ndarray:
    return so3.axis_angle(frame[:, ax], theta)


def check_asymmetric(parts_fn: Callable, seed: int = 0, n: int = 4096, tol: float = 1e-3) -> float:
    """Reject a family whose template maps onto itself under a nonidentity rotation.

    Returns the smallest Chamfer distance found over the candidate rotations.
    """
    rng = np.random.default_rng(seed)
    pts = _sample_parts(parts_fn(None), n, rng)
    pts -= pts.mean(axis=0)
    best = np.inf
    for r in candidate_symmetries(pts, rng):
        best = min(best, pcm.chamfer(pts, pts @ r))
        if best < tol:
            raise SymmetricFamilyError(f"template maps to itself within Chamfer {best:.2e} < {tol:g}")
    return best


@functools.lru_cache(maxsize=None)
def _checked_family(name: str) -> float:
    return check_asymmetric(FAMILIES[name])


# -- corpus ------------------------------------------------------------------
@dataclass
class SyntheticCorpus:
    classes: list[str] = field(default_factory=lambda: ["plane", "chair", "tapered"])
    instances_per_class: int = 64
    n_points: int = pcm.DEFAULT_N
    seed: int = 0
    jitter: float = 0.15
    grid: float = 0.0  # coordinate quantization step; 0 keeps continuous coordinates
    val_fraction: float = 0.25


@dataclass
class Dataset:
    clouds: list[PointCloud]
    val_ids: set[str] = field(default_factory=set)

    def by_class(self, split: str | None = None) -> dict[str, list[PointCloud]]:
        out: dict[str, list[PointCloud]] = {}
        for pc in self.clouds:
            if split == "train" and pc.instance_id in self.val_ids:
                continue
            if split == "val" and pc.instance_id not in self.val_ids:
                continue
            out.setdefault(pc.class_id, []).append(pc)
        return out

    def split(self, name: str) -> Dataset:
        keep = [pc for pc in self.clouds if (pc.instance_id in self.val_ids) == (name == "val")]
        return Dataset(keep, self.val_ids & {pc.instance_id for pc in keep})

    @property
    def classes(self) -> list[str]:
        return sorted({pc.class_id for pc in self.clouds})


def make_instance(family: str, rng: np.random.Generator, n: int, jitter: float, grid: float) -> np.ndarray:
    pts = _sample_parts(FAMILIES[family](rng, jitter), n, rng)
    pts -= pts.mean(axis=0)
    if grid > 0:
        # mimic coordinates stored at limited resolution; produces exact distance ties
        pts = np.round(pts / grid) * grid
        pts -= pts.mean(axis=0)
    return pts


def generate_synthetic_corpus(spec: SyntheticCorpus, check_symmetry: bool = True) -> Dataset:
    if len(spec.classes) < 2:
        raise ValueError("a corpus needs at least 2 classes")
    if spec.instances_per_class < 8:
        raise ValueError("cross-instance pairing needs at least 8 instances per class")
    for name in spec.classes:
        if name not in FAMILIES:
            raise ValueError(f"unknown shape family {name!r}; known: {sorted(FAMILIES)}")
        if check_symmetry:
            _checked_family(name)
    clouds, val_ids = [], set()
    n_val = max(2, int(round(spec.val_fraction * spec.instances_per_class)))
    for ci, name in enumerate(spec.classes):
        for i in range(spec.instances_per_class):
            rng = np.random.default_rng([spec.seed, ci, i])
            pts = make_instance(name, rng, spec.n_points, spec.jitter, spec.grid)
            iid = f"{name}_{i:04d}"
            clouds.append(PointCloud(pts, iid, name))
            if i >= spec.instances_per_class - n_val:
                val_ids.add(iid)
    return Dataset(clouds, val_ids)


def write_corpus(ds: Dataset, out_dir, header: dict[str, str] | None = None) -> Path:
    """Write one ``.choir`` file per instance and ``manifest.csv``.

    The manifest carries ``#``-prefixed metadata lines, then a header row
    ``path,class_id,instance_id,split``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        fh.write(f"# corpus_version: {CORPUS_VERSION}\n")
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class_id", "instance_id", "split"])
        for pc in ds.clouds:
            rel = f"{pc.class_id}/{pc.instance_id}.choir"
            (out_dir / pc.class_id).mkdir(exist_ok=True)
            pcm.save(pc, out_dir / rel)
            w.writerow([rel, pc.class_id, pc.instance_id, "val" if pc.instance_id in ds.val_ids else "train"])
    return manifest


def read_manifest_header(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.startswith("#"):
            break
        key, _, value = line[1:].partition(":")
        out[key.strip()] = value.strip()
    return out


def read_corpus(manifest) -> Dataset:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    rows = [ln for ln in manifest.read_text().splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(rows)
    clouds, val_ids = [], set()
    for row in reader:
        path = manifest.parent / row["path"]
        pc = pcm.load(path, instance_id=row["instance_id"], class_id=row["class_id"])
        clouds.append(pc)
        if row.get("split") == "val":
            val_ids.add(row["instance_id"])
    return Dataset(clouds, val_ids)
