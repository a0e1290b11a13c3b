"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line. The training studies behind
criteria 7 and 8 are cached under ``results/study`` (keyed by their full
configuration); ``scripts/run_study.py`` fills the cache, and a cold run here
trains whatever is missing.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from choir import so3
from choir.cli import main
from choir.experiments import run_study
from choir.metrics import EvalConfig, evaluate
from choir.residual import CharacteristicOrientationPredictor, PredictorConfig
from choir.selfcheck import equivariance_errors, rotation_mean_errors, suite_gradcheck
from choir.synthetic import SyntheticCorpus, generate_synthetic_corpus
from choir.training import TrainConfig, pair_loss, sample_pair, simplified_pair_loss

ROOT = Path(__file__).resolve().parents[1]
STUDY_DIR = ROOT / "results" / "study"


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(SyntheticCorpus())


@pytest.fixture(scope="module")
def study():
    return run_study(STUDY_DIR)


def by_variant(rows, variant):
    return sorted((r for r in rows if r["variant"] == variant), key=lambda r: r["seed"])


def test_criterion_01_equivariance(capsys):
    t0 = time.perf_counter()
    eq, _ = equivariance_errors(trials=100, n_points=1024, seed=0)
    dt = time.perf_counter() - t0
    report(capsys, 1, eq.max() < 1e-6 and dt < 120,
           f"max angle(f(PR), f(P)R) = {eq.max():.2e} rad over 100 trials (< 1e-6), {dt:.0f}s (< 120s)")


def test_criterion_02_residual_invariance(capsys):
    _, inv = equivariance_errors(trials=100, n_points=1024, seed=1)
    report(capsys, 2, inv.max() < 1e-6, f"max angle(g(PR), g(P)) = {inv.max():.2e} rad over 100 trials (< 1e-6)")


def test_criterion_03_gradcheck(capsys):
    res = suite_gradcheck(seed=0, points=20, tol=1e-3)
    report(capsys, 3, res.passed and res.seconds < 600,
           f"worst relative error {res.value:.2e} (< 1e-3), {res.seconds:.0f}s (< 600s); {res.detail}")


def test_criterion_04_rotation_mean(capsys):
    angles, dets = rotation_mean_errors(sets=50, seed=0)
    det_err = float(dets.max())
    report(capsys, 4, angles.max() < 0.1 and det_err < 1e-9,
           f"max angle to brute-force mean {angles.max():.2e} deg (< 0.1), max |det - 1| {det_err:.1e} (< 1e-9)")


def test_criterion_05_stability_by_construction(capsys, corpus, study):
    trained = CharacteristicOrientationPredictor.load(
        STUDY_DIR / f"full_seed0_{by_variant(study, 'full')[0]['key']}" / "model.ckpt")
    untrained = CharacteristicOrientationPredictor(PredictorConfig(), seed=0)
    frozen = EvalConfig(K=10, knn_mode="frozen")
    worst_frozen = max(c.stability_deg for m in (untrained, trained) for c in evaluate(corpus, m, frozen).classes)
    adaptive = evaluate(corpus, trained, EvalConfig(K=10, knn_mode="adaptive", precision="single"))
    worst_adaptive = max(c.stability_deg for c in adaptive.classes)
    report(capsys, 5, worst_frozen < 0.1 and worst_adaptive < 2.0,
           f"frozen kNN worst per-class stability {worst_frozen:.2e} deg (< 0.1); "
           f"adaptive single precision {worst_adaptive:.3f} deg (< 2)")


def test_criterion_06_knn_precision_ordering(capsys, tmp_path):
    data, out = tmp_path / "corpus", tmp_path / "audit"
    assert main(["gen-data", "--out", str(data)]) == 0
    assert main(["knn-audit", "--data", str(data), "--out", str(out), "--k", "20", "--n", "1024",
                 "--trials", "10"]) == 0
    rows = list(csv.DictReader((out / "knn_audit_per_cloud.csv").open()))
    ok_frac = np.mean([float(r["double"]) <= float(r["single"]) for r in rows])
    means = {cls: (np.mean([float(r["single"]) for r in rows if r["class_id"] == cls]),
                   np.mean([float(r["double"]) for r in rows if r["class_id"] == cls]))
             for cls in sorted({r["class_id"] for r in rows})}
    detail = ", ".join(f"{c} {s:.2f}/{d:.2f}" for c, (s, d) in means.items())
    report(capsys, 6, ok_frac >= 0.9,
           f"double <= single on {100 * ok_frac:.1f}% of {len(rows)} clouds (>= 90%); single/double means: {detail}")


def test_criterion_07_training_effect(capsys, study):
    full, h_only = by_variant(study, "full"), by_variant(study, "h-only")
    worst_cons = max(max(r["consistency_deg"].values()) for r in full)
    worst_stab = max(max(r["stability_deg"].values()) for r in full)
    wins = sum(h["mean_consistency_deg"] > f["mean_consistency_deg"] for f, h in zip(full, h_only))
    runtime = sum(r["train_seconds"] + r["eval_seconds"] for r in full + h_only)
    per_seed = "; ".join(f"seed {f['seed']}: full {f['mean_consistency_deg']:.1f} vs h-only "
                         f"{h['mean_consistency_deg']:.1f}" for f, h in zip(full, h_only))
    report(capsys, 7, worst_cons < 15 and worst_stab < 1 and wins >= 2 and runtime < 7200,
           f"worst per-class consistency {worst_cons:.2f} deg (< 15), stability {worst_stab:.2e} deg (< 1), "
           f"h-only worse on {wins}/3 seeds (>= 2), {runtime / 60:.0f} min (< 120); {per_seed}")


def test_criterion_08_pair_mode_tradeoff(capsys, study):
    cross, same = by_variant(study, "full"), by_variant(study, "same-instance")
    stab_c, stab_s = (np.mean([r["mean_stability_deg"] for r in rows]) for rows in (cross, same))
    cons_c, cons_s = (np.mean([r["mean_consistency_deg"] for r in rows]) for rows in (cross, same))
    report(capsys, 8, stab_s <= stab_c and cons_s >= cons_c,
           f"same-instance stability {stab_s:.2e} <= cross {stab_c:.2e} deg; "
           f"consistency {cons_s:.2f} >= {cons_c:.2f} deg")


def test_criterion_09_loss_form_equivalence(capsys, corpus):
    model = CharacteristicOrientationPredictor(PredictorConfig(knn_mode="frozen", precision="double"), seed=0)
    cfg = TrainConfig(train_points=256)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        pair = sample_pair(corpus, cfg, rng)
        a, b = pair.p1.points @ pair.r1.T, pair.p2.points @ pair.r2.T
        ga, gb = model.graph_for(a), model.graph_for(b)
        full = pair_loss(model.predict(pair.p1.points, ga), model.predict(pair.p2.points, gb), pair.r1, pair.r2)
        simple = simplified_pair_loss(model.predict(a, ga), model.predict(b, gb))
        worst = max(worst, abs(full.item() - simple))
    report(capsys, 9, worst < 1e-9, f"max |full - simplified| = {worst:.2e} over 100 pairs (< 1e-9)")


def test_criterion_10_gauge_invariance(capsys):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        f1, f2, r1, r2, q = so3.sample_many(rng, 5)
        base = pair_loss(f1, f2, r1, r2).item()
        worst = max(worst, abs(pair_loss(f1 @ q, f2 @ q, r1 @ q, r2 @ q).item() - base))
    report(capsys, 10, worst < 1e-12, f"max change of pair_loss under a common right rotation {worst:.1e} (< 1e-12)")
