"""Siamese self-supervised training on pairs of aligned clouds.

Two clouds of one class are independently rotated; the loss ties the
predicted relative orientation to the known relative rotation, so only the
relative frame is supervised and the canonical frame is learned.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import pointcloud as pcm
from . import so3
from .autodiff import Tensor
from .hypothesizer import HypothesizerConfig
from .pointcloud import PointCloud
from .residual import CharacteristicOrientationPredictor, PredictorConfig, ResidualConfig
from .synthetic import Dataset

PAIR_MODES = ("cross-instance", "same-instance", "mixed")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, seed: int, pair_ids: list[tuple[str, str]]):
        self.epoch, self.seed, self.pair_ids = epoch, seed, pair_ids
        super().__init__(f"non-finite loss at epoch {epoch}; replay with seed={seed}, pairs={pair_ids}")


@dataclass
class TrainConfig:
    mode: str = "cross-instance"
    epochs: int = 300
    batch_size: int = 8
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    knn_mode: str = "adaptive"
    precision: str = "double"
    use_residual: bool = True
    seed: int = 0
    mixed_cross_prob: float = 0.5
    # augmentation; 0 disables each step
    train_points: int = 1024
    patch_size: int = pcm.DEFAULT_PATCH
    augment_cross: bool = False
    # validation protocol run every eval_every epochs
    eval_every: int = 10
    val_instances: int = 0  # per class; 0 uses the whole validation split
    val_rotations: int = 10
    val_points: int = 0  # 0 keeps the stored resolution
    selection: str = "min-stability-plus-consistency"

    def __post_init__(self):
        if self.mode not in PAIR_MODES:
            raise ValueError(f"mode must be one of {PAIR_MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if not 0.0 <= self.mixed_cross_prob <= 1.0:
            raise ValueError("mixed_cross_prob must lie in [0, 1]")

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(HypothesizerConfig(), ResidualConfig(), self.use_residual,
                               self.knn_mode, self.precision)


def _parse_value(raw: str, kind):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def train_config_from(values: dict[str, object]) -> TrainConfig:
    """Build a config from string or typed values; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in values.items():
        if key not in types:
            raise KeyError(f"unknown training option {key!r}")
        kwargs[key] = _parse_value(value, types[key]) if isinstance(value, str) else value
    return TrainConfig(**kwargs)


# -- pairs -------------------------------------------------------------------
@dataclass
class TrainingPair:
    p1: PointCloud  # rotated copies, p_i = aligned_i @ r_i
    p2: PointCloud
    r1: np.ndarray
    r2: np.ndarray
    source_ids: tuple[str, str] = ("", "")


def _augment(pc: PointCloud, cfg: TrainConfig, rng: np.random.Generator, patch: bool) -> PointCloud:
    if patch and cfg.patch_size > 0:
        pc = pcm.knn_patch_removal(pc, cfg.patch_size, rng)
    if cfg.train_points > 0 and cfg.train_points != len(pc.points):
        pc = pcm.center(pcm.resample(pc, cfg.train_points, rng))
    return pc


def sample_pair(dataset: Dataset | dict[str, list[PointCloud]], cfg: TrainConfig,
                rng: np.random.Generator, class_id: str | None = None) -> TrainingPair:
    by_class = dataset.by_class("train") if isinstance(dataset, Dataset) else dataset
    classes = sorted(by_class)
    if not classes:
        raise ValueError("no training clouds")
    cls = class_id if class_id is not None else classes[rng.integers(len(classes))]
    pool = by_class[cls]
    cross = cfg.mode == "cross-instance" or (cfg.mode == "mixed" and rng.random() < cfg.mixed_cross_prob)
    if cross:
        if len(pool) < 2:
            raise ValueError(f"class {cls!r} has {len(pool)} instance(s); cross-instance pairs need 2")
        i, j = rng.choice(len(pool), size=2, replace=False)
        a = _augment(pool[i], cfg, rng, cfg.augment_cross)
        b = _augment(pool[j], cfg, rng, cfg.augment_cross)
    else:
        src = pool[rng.integers(len(pool))]
        a = _augment(src, cfg, rng, True)
        b = _augment(src, cfg, rng, True)
    r1, r2 = so3.sample_uniform(rng), so3.sample_uniform(rng)
    return TrainingPair(pcm.apply_rotation(a, r1), pcm.apply_rotation(b, r2), r1, r2,
                        (a.instance_id, b.instance_id))


# -- loss --------------------------------------------------------------------
def pair_loss(f1, f2, r1, r2) -> Tensor:
    """``|f1^T f2 - r1^T r2|_F^2`` in the full relative form."""
    f1, f2 = ad.as_tensor(f1), ad.as_tensor(f2)
    target = np.asarray(r1).T @ np.asarray(r2)
    diff = ad.matmul(ad.transpose(f1), f2) - target
    return ad.reduce_sum(ad.square(diff))


def simplified_pair_loss(f1, f2) -> float:
    """``|f1 - f2|_F^2``, valid only for exactly equivariant predictors
    where ``f_i`` are predictions for the un-rotated clouds."""
    return float(np.sum((np.asarray(f1) - np.asarray(f2)) ** 2))


# -- optimizer ---------------------------------------------------------------
class Adam:
    def __init__(self, params: list[Tensor], lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- history and selection ------------------------------------------------------
@dataclass
class HistoryRow:
    epoch: int
    loss: float
    val_stability_deg: float = math.nan
    val_consistency_deg: float = math.nan
    selected_flag: int = 0

    @property
    def evaluated(self) -> bool:
        return not (math.isnan(self.val_stability_deg) or math.isnan(self.val_consistency_deg))


def select_checkpoint(history: list[HistoryRow]) -> int:
    """Epoch minimizing validation stability + consistency; earliest on ties."""
    evaluated = [row for row in history if row.evaluated]
    if not evaluated:
        raise ValueError("no evaluated checkpoints in history")
    best = evaluated[0]
    for row in evaluated[1:]:
        if row.val_stability_deg + row.val_consistency_deg < best.val_stability_deg + best.val_consistency_deg:
            best = row
    return best.epoch


def write_history(history: list[HistoryRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_stability_deg", "val_consistency_deg", "selected_flag"])
        for row in history:
            w.writerow([row.epoch, repr(row.loss),
                        "" if math.isnan(row.val_stability_deg) else repr(row.val_stability_deg),
                        "" if math.isnan(row.val_consistency_deg) else repr(row.val_consistency_deg),
                        row.selected_flag])


def read_history(path) -> list[HistoryRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [HistoryRow(int(r["epoch"]), float(r["loss"]),
                       float(r["val_stability_deg"]) if r["val_stability_deg"] else math.nan,
                       float(r["val_consistency_deg"]) if r["val_consistency_deg"] else math.nan,
                       int(r["selected_flag"])) for r in rows]


@dataclass
class TrainResult:
    model: CharacteristicOrientationPredictor
    history: list[HistoryRow]
    selected_epoch: int
    config: TrainConfig = field(repr=False, default=None)

    def config_dict(self) -> dict:
        return asdict(self.config)


# -- training loop ------------------------------------------------------------
def _validation_subset(dataset: Dataset, cfg: TrainConfig) -> dict[str, list[PointCloud]]:
    val = dataset.by_class("val")
    rng = np.random.default_rng([cfg.seed, 7])
    out = {}
    for cls, pool in sorted(val.items()):
        if cfg.val_instances and cfg.val_instances < len(pool):
            keep = sorted(rng.choice(len(pool), size=cfg.val_instances, replace=False))
            pool = [pool[i] for i in keep]
        if cfg.val_points:
            pool = [pcm.center(pcm.resample(pc, cfg.val_points, rng)) for pc in pool]
        out[cls] = pool
    return out


def validate(model: CharacteristicOrientationPredictor, val: dict[str, list[PointCloud]],
             cfg: TrainConfig) -> tuple[float, float]:
    """Mean over classes of (mean per-instance stability, consistency), degrees."""
    from .metrics import EvalConfig, consistency, stability

    ecfg = EvalConfig(K=cfg.val_rotations, seed=cfg.seed, knn_mode=cfg.knn_mode)
    stab, cons = [], []
    for cls, pool in val.items():
        stab.append(np.mean([stability(pc, model, ecfg) for pc in pool]))
        cons.append(consistency(pool, model, ecfg))
    return float(np.mean(stab)), float(np.mean(cons))


def train(dataset: Dataset, cfg: TrainConfig | None = None, log=None) -> TrainResult:
    cfg = cfg or TrainConfig()
    train_ids = {pc.instance_id for pc in dataset.clouds} - dataset.val_ids
    if not train_ids or not dataset.val_ids:
        raise ValueError("dataset needs both training and validation instances")
    if train_ids & dataset.val_ids:
        raise ValueError("training and validation instances overlap")
    model = CharacteristicOrientationPredictor(cfg.predictor_config(), seed=cfg.seed)
    params = model.parameters()
    opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    by_class = dataset.by_class("train")
    val = _validation_subset(dataset, cfg)
    history: list[HistoryRow] = []
    best_state, best_sum = None, math.inf

    for epoch in range(1, cfg.epochs + 1):
        batch_seed = int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0])
        rng = np.random.default_rng(batch_seed)
        pairs = [sample_pair(by_class, cfg, rng) for _ in range(cfg.batch_size)]
        model.zero_grad()
        total = 0.0
        for pair in pairs:
            f1 = model.forward(pair.p1.points).rotation
            f2 = model.forward(pair.p2.points).rotation
            loss = pair_loss(f1, f2, pair.r1, pair.r2)
            if not np.isfinite(loss.item()):
                raise NonFiniteLossError(epoch, batch_seed, [p.source_ids for p in pairs])
            total += loss.item()
            ad.backward(ad.scale(loss, 1.0 / len(pairs)))
        for p in params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteLossError(epoch, batch_seed, [p.source_ids for p in pairs])
        opt.step()
        row = HistoryRow(epoch, total / len(pairs))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            row.val_stability_deg, row.val_consistency_deg = validate(model, val, cfg)
            score = row.val_stability_deg + row.val_consistency_deg
            if score < best_sum:
                best_sum, best_state = score, {k: v.copy() for k, v in model.state_dict().items()}
        history.append(row)
        if log is not None:
            log(row)

    selected = select_checkpoint(history)
    for row in history:
        row.selected_flag = int(row.epoch == selected)
    model.load_state_dict(best_state)
    return TrainResult(model, history, selected, cfg)


def save_run(result: TrainResult, out_dir, meta: dict[str, float] | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.model.save(out_dir / "model.ckpt", {"selected_epoch": result.selected_epoch,
                                               "seed": result.config.seed, **(meta or {})})
    write_history(result.history, out_dir / "history.csv")
    return out_dir
