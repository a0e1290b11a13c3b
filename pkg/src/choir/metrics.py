"""Stability and consistency of predicted orientations, and the evaluation report.

stability: RMS angle of the net rotations ``R_i R'_i^T`` around their
chordal mean, over K random rotations of one instance.
consistency: RMS angle of the predictions ``R'_j`` for the aligned instances
of one class around their chordal mean.
Both are reported in degrees.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pointcloud as pcm
from . import so3
from .pointcloud import PointCloud
from .synthetic import Dataset

PERTURBATIONS = ("none", "resample", "gaussian")


def parse_perturbation(text: str | None) -> tuple[str, float]:
    """``"gaussian:0.01"``, ``"resample:512"`` or ``"none"``."""
    if not text or text == "none":
        return "none", 0.0
    kind, _, arg = text.partition(":")
    if kind not in PERTURBATIONS[1:] or not arg:
        raise ValueError(f"perturbation must be 'gaussian:<sigma>' or 'resample:<n>', got {text!r}")
    value = float(arg)
    if value <= 0 or (kind == "resample" and value != int(value)):
        raise ValueError(f"bad perturbation magnitude in {text!r}")
    return kind, value


@dataclass
class EvalConfig:
    K: int = 10
    seed: int = 0
    knn_mode: str = "adaptive"
    precision: str | None = None  # None uses the model's configured precision
    perturbation: str = "none"
    split: str = "val"  # "val" or "all"
    consistency_protocol: str = "aligned"  # or "rotated"
    instances: dict[str, list[str]] | None = None  # optional per-class instance lists

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.knn_mode not in ("adaptive", "frozen"):
            raise ValueError(f"unknown knn_mode {self.knn_mode!r}")
        if self.split not in ("val", "all"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.consistency_protocol not in ("aligned", "rotated"):
            raise ValueError(f"unknown consistency protocol {self.consistency_protocol!r}")
        parse_perturbation(self.perturbation)


def _instance_rng(cfg: EvalConfig, pc: PointCloud, salt: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, zlib.crc32(pc.instance_id.encode()), salt])


def _perturb(pc: PointCloud, cfg: EvalConfig, rng: np.random.Generator) -> PointCloud:
    kind, value = parse_perturbation(cfg.perturbation)
    if kind == "gaussian":
        return pcm.gaussian_noise(pc, value, rng)
    if kind == "resample":
        return pcm.center(pcm.resample(pc, int(value), rng))
    return pc


def _k_of(model) -> int:
    cfg = getattr(model, "cfg", None)
    return cfg.hypothesizer.k if cfg is not None and hasattr(cfg, "hypothesizer") else pcm.DEFAULT_K


def _precision_of(model, cfg: EvalConfig) -> str:
    if cfg.precision:
        return cfg.precision
    mcfg = getattr(model, "cfg", None)
    return getattr(mcfg, "precision", "double")


def _predict(model, points: np.ndarray, graph, precision: str) -> np.ndarray:
    if hasattr(model, "predict"):
        return np.asarray(model.predict(points, graph=graph, precision=precision))
    return np.asarray(model(points))


def net_rotations(pc: PointCloud, model, cfg: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    """The K sampled rotations and the net rotations ``R_i R'_i^T``."""
    rng = _instance_rng(cfg, pc, 0)
    precision = _precision_of(model, cfg)
    rots = so3.sample_many(rng, cfg.K)
    nets = []
    base = pc
    graph = None
    if cfg.knn_mode == "frozen" and cfg.perturbation == "none":
        graph = pcm.knn(base, _k_of(model), precision, frozen=True)
    for r in rots:
        copy = _perturb(pc, cfg, rng)
        g = graph
        if cfg.knn_mode == "frozen" and g is None:
            g = pcm.knn(copy, _k_of(model), precision, frozen=True)
        pred = _predict(model, copy.points @ r, g, precision)
        nets.append(r @ pred.T)
    return rots, np.stack(nets)


def stability(pc: PointCloud, model, cfg: EvalConfig | None = None, return_flag: bool = False):
    """RMS angle (degrees) of the net rotations around their chordal mean."""
    cfg = cfg or EvalConfig()
    _, nets = net_rotations(pc, model, cfg)
    rad, flag = so3.rms_angle_to_mean(nets)
    deg = math.degrees(rad)
    return (deg, flag) if return_flag else deg


def predicted_orientations(instances: list[PointCloud], model, cfg: EvalConfig) -> np.ndarray:
    precision = _precision_of(model, cfg)
    preds = []
    for pc in instances:
        rng = _instance_rng(cfg, pc, 1)
        pc = _perturb(pc, cfg, rng)
        graph = pcm.knn(pc, _k_of(model), precision, frozen=True) if cfg.knn_mode == "frozen" else None
        if cfg.consistency_protocol == "rotated":
            r = so3.sample_uniform(rng)
            preds.append(_predict(model, pc.points @ r, graph, precision) @ r.T)
        else:
            preds.append(_predict(model, pc.points, graph, precision))
    return np.stack(preds)


def consistency(instances: list[PointCloud], model, cfg: EvalConfig | None = None, return_flag: bool = False):
    """RMS angle (degrees) of the predicted orientations of aligned instances
    around their chordal mean."""
    cfg = cfg or EvalConfig()
    if len(instances) < 2:
        raise ValueError("consistency needs at least 2 instances")
    rad, flag = so3.rms_angle_to_mean(predicted_orientations(instances, model, cfg))
    deg = math.degrees(rad)
    return (deg, flag) if return_flag else deg


# -- report --------------------------------------------------------------------
@dataclass
class ClassResult:
    class_id: str
    stability_deg: float
    consistency_deg: float
    n_instances: int
    per_instance_stability_deg: dict[str, float] = field(default_factory=dict)
    degenerate_means: int = 0


@dataclass
class EvalReport:
    classes: list[ClassResult]
    metadata: dict[str, object] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def by_class(self) -> dict[str, ClassResult]:
        return {c.class_id: c for c in self.classes}

    @property
    def mean_stability_deg(self) -> float:
        return float(np.mean([c.stability_deg for c in self.classes]))

    @property
    def mean_consistency_deg(self) -> float:
        return float(np.mean([c.consistency_deg for c in self.classes]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, value in self.metadata.items():
            buf.write(f"# {key}: {value}\n")
        for w in self.warnings:
            buf.write(f"# warning: {w}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class_id", "stability_deg", "consistency_deg", "n_instances", "degenerate_means"])
        for c in self.classes:
            writer.writerow([c.class_id, f"{c.stability_deg:.6f}", f"{c.consistency_deg:.6f}",
                             c.n_instances, c.degenerate_means])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"classes": [asdict(c) for c in self.classes], "metadata": self.metadata,
                           "warnings": self.warnings}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        doc = json.loads(text)
        return cls([ClassResult(**c) for c in doc["classes"]], doc["metadata"], doc["warnings"])

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path


def evaluate(dataset: Dataset | dict[str, list[PointCloud]], model, cfg: EvalConfig | None = None,
             checkpoint_id: str = "") -> EvalReport:
    cfg = cfg or EvalConfig()
    if isinstance(dataset, Dataset):
        groups = dataset.by_class("val" if cfg.split == "val" else None)
        for cls in dataset.classes:
            groups.setdefault(cls, [])
    else:
        groups = dict(dataset)
    if cfg.instances is not None:
        groups = {cls: [pc for pc in groups.get(cls, []) if pc.instance_id in set(ids)]
                  for cls, ids in cfg.instances.items()}
    results, warnings = [], []
    for cls in sorted(groups):
        pool = groups[cls]
        if len(pool) < 2:
            warnings.append(f"class {cls} has {len(pool)} instance(s); omitted")
            continue
        per, degenerate = {}, 0
        for pc in pool:
            deg, flag = stability(pc, model, cfg, return_flag=True)
            per[pc.instance_id] = deg
            degenerate += flag
        cons, flag = consistency(pool, model, cfg, return_flag=True)
        degenerate += flag
        results.append(ClassResult(cls, float(np.mean(list(per.values()))), cons, len(pool), per, degenerate))
    meta = {"seed": cfg.seed, "K": cfg.K, "knn_mode": cfg.knn_mode,
            "precision": _precision_of(model, cfg), "perturbation": cfg.perturbation,
            "consistency_split": cfg.split, "consistency_protocol": cfg.consistency_protocol,
            "checkpoint": checkpoint_id}
    return EvalReport(results, meta, warnings)
