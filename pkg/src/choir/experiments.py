"""Training studies on the default synthetic corpus: full model, the
hypothesis-only ablation and same-instance pairing, over several seeds.

Each (variant, seed) run is cached as JSON under a key derived from its
full configuration, so repeated invocations reuse finished runs.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import pointcloud as pcm
from .metrics import EvalConfig, evaluate
from .synthetic import CORPUS_VERSION, Dataset, SyntheticCorpus, generate_synthetic_corpus
from .training import TrainConfig, save_run, train

VARIANTS: dict[str, dict] = {
    "full": {},
    "h-only": {"use_residual": False},
    "same-instance": {"mode": "same-instance"},
}


@dataclass
class StudyProfile:
    """Desk-scale settings shared by every run of a study."""

    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=300, lr=0.003, train_points=256, eval_every=10, val_instances=4, val_rotations=3, val_points=256))
    corpus: SyntheticCorpus = field(default_factory=SyntheticCorpus)
    # final evaluation on the whole validation split, resampled to the training resolution
    eval_points: int = 256
    eval: EvalConfig = field(default_factory=lambda: EvalConfig(K=10, seed=0, knn_mode="adaptive",
                                                                precision="single"))


def run_key(profile: StudyProfile, variant: str, seed: int) -> str:
    doc = {"train": asdict(run_config(profile, variant, seed)), "corpus": asdict(profile.corpus),
           "eval_points": profile.eval_points, "eval": asdict(profile.eval), "version": __version__,
           "corpus_version": CORPUS_VERSION}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def run_config(profile: StudyProfile, variant: str, seed: int) -> TrainConfig:
    if variant not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(profile.train, seed=seed, **VARIANTS[variant])


def eval_split(ds: Dataset, points: int) -> dict[str, list[pcm.PointCloud]]:
    val = ds.by_class("val")
    if not points:
        return val
    rng = np.random.default_rng([points, 11])
    return {cls: [pcm.center(pcm.resample(pc, points, rng)) for pc in pool] for cls, pool in sorted(val.items())}


def run_one(ds: Dataset, profile: StudyProfile, variant: str, seed: int, out_dir: Path | None = None,
            log=None) -> dict:
    cfg = run_config(profile, variant, seed)
    t0 = time.time()
    result = train(ds, cfg, log=log)
    train_s = time.time() - t0
    if out_dir is not None:
        save_run(result, out_dir)
    t0 = time.time()
    report = evaluate(eval_split(ds, profile.eval_points), result.model, profile.eval)
    return {
        "variant": variant, "seed": seed, "selected_epoch": result.selected_epoch,
        "train_seconds": train_s, "eval_seconds": time.time() - t0,
        "first_loss": result.history[0].loss,
        "stability_deg": {c.class_id: c.stability_deg for c in report.classes},
        "consistency_deg": {c.class_id: c.consistency_deg for c in report.classes},
        "mean_stability_deg": report.mean_stability_deg,
        "mean_consistency_deg": report.mean_consistency_deg,
    }


def run_study(cache_dir, variants=("full", "h-only", "same-instance"), seeds=(0, 1, 2),
              profile: StudyProfile | None = None, log=print) -> list[dict]:
    """Run (or load from cache) every (variant, seed) combination."""
    profile = profile or StudyProfile()
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    ds = None
    rows = []
    for variant in variants:
        for seed in seeds:
            key = run_key(profile, variant, seed)
            path = cache_dir / f"{variant}_seed{seed}_{key}.json"
            if path.is_file():
                rows.append(json.loads(path.read_text()))
                continue
            if ds is None:
                ds = generate_synthetic_corpus(profile.corpus)
            if log:
                log(f"training {variant} seed {seed}")
            row = run_one(ds, profile, variant, seed, cache_dir / f"{variant}_seed{seed}_{key}")
            row["key"] = key
            path.write_text(json.dumps(row, indent=2, sort_keys=True))
            if log:
                log(f"  consistency {row['mean_consistency_deg']:.2f} deg, stability "
                    f"{row['mean_stability_deg']:.3f} deg, {row['train_seconds']:.0f}s")
            rows.append(row)
    return rows
