import math

import numpy as np
import pytest

from choir import so3
from choir.metrics import EvalConfig, EvalReport, consistency, evaluate, parse_perturbation, stability
from choir.pointcloud import PointCloud
from choir.residual import CharacteristicOrientationPredictor, PredictorConfig
from choir.selfcheck import brute_force_chordal_mean


class ConstantModel:
    """Ignores its input: every prediction is the identity."""

    def __call__(self, points):
        return np.eye(3)


class MomentFrame:
    """Exactly equivariant: rows built from radially weighted sums of points."""

    def __init__(self, left=None):
        self.left = np.eye(3) if left is None else left

    def __call__(self, points):
        r2 = (points ** 2).sum(axis=1, keepdims=True)
        u, v = (points * r2).sum(axis=0), (points * r2 ** 2).sum(axis=0)
        return self.left @ so3.gram_schmidt_frame(u, v).T


def lumpy_cloud(seed, n=200):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, 3)) * [1.0, 0.6, 0.3]
    pts[:20] += [1.5, 0.5, 0.2]
    return PointCloud(pts - pts.mean(axis=0), f"lump_{seed:04d}", "lump")


def test_constant_model_stability_is_the_spread_of_the_sampled_rotations():
    pc = lumpy_cloud(0)
    cfg = EvalConfig(K=10, seed=4)
    from choir.metrics import net_rotations

    rots, nets = net_rotations(pc, ConstantModel(), cfg)
    np.testing.assert_allclose(nets, rots, atol=0)
    # independent route: brute-force mean, then RMS of angles to it
    ref = brute_force_chordal_mean(rots, seed=1)
    rms = math.degrees(math.sqrt(np.mean(so3.angles_between(rots, ref[None]) ** 2)))
    assert stability(pc, ConstantModel(), cfg) == pytest.approx(rms, abs=0.1)
    # ten Haar rotations scatter widely
    assert rms > 60


def test_exactly_equivariant_model_is_perfectly_stable():
    for seed in range(3):
        assert stability(lumpy_cloud(seed), MomentFrame(), EvalConfig(K=10)) < 1e-5


def test_identical_instances_are_perfectly_consistent():
    base = lumpy_cloud(5)
    copies = [PointCloud(base.points.copy(), f"copy_{i}", "lump") for i in range(4)]
    assert consistency(copies, MomentFrame()) < 1e-5


def test_metrics_ignore_a_fixed_redefinition_of_the_canonical_frame():
    q = so3.sample_uniform(np.random.default_rng(9))
    clouds = [lumpy_cloud(s) for s in range(4)]
    plain = MomentFrame()
    shifted = MomentFrame(left=q)
    cfg = EvalConfig(K=6)
    assert consistency(clouds, shifted, cfg) == pytest.approx(consistency(clouds, plain, cfg), abs=1e-6)
    assert stability(clouds[0], shifted, cfg) == pytest.approx(stability(clouds[0], plain, cfg), abs=1e-6)


def test_rotated_consistency_protocol_agrees_for_an_equivariant_model():
    clouds = [lumpy_cloud(s) for s in range(4)]
    a = consistency(clouds, MomentFrame(), EvalConfig(consistency_protocol="aligned"))
    b = consistency(clouds, MomentFrame(), EvalConfig(consistency_protocol="rotated"))
    assert a == pytest.approx(b, abs=1e-5)
    assert a > 1.0


def test_consistency_needs_two_instances():
    with pytest.raises(ValueError):
        consistency([lumpy_cloud(0)], MomentFrame())


def test_frozen_graph_stability_of_an_untrained_network(small_corpus):
    model = CharacteristicOrientationPredictor(PredictorConfig(), seed=0)
    report = evaluate(small_corpus, model, EvalConfig(K=4, knn_mode="frozen", precision="double"))
    assert all(c.stability_deg < 0.1 for c in report.classes)


def test_evaluation_is_deterministic_and_serializes(small_corpus, tmp_path):
    model = CharacteristicOrientationPredictor(PredictorConfig(), seed=1)
    cfg = EvalConfig(K=3, seed=2, perturbation="resample:128")
    a = evaluate(small_corpus, model, cfg, checkpoint_id="abc")
    b = evaluate(small_corpus, model, cfg, checkpoint_id="abc")
    assert a.to_json() == b.to_json()
    assert EvalReport.from_json(a.to_json()) == a
    csv_path, json_path = a.write(tmp_path)
    lines = csv_path.read_text().splitlines()
    assert "# checkpoint: abc" in lines
    header = next(line for line in lines if not line.startswith("#"))
    assert header == "class_id,stability_deg,consistency_deg,n_instances,degenerate_means"
    assert sorted(c.class_id for c in a.classes) == ["chair", "plane"]
    assert a.metadata["consistency_split"] == "val"


def test_classes_with_one_instance_are_omitted_with_a_warning():
    groups = {"lump": [lumpy_cloud(0), lumpy_cloud(1)], "solo": [lumpy_cloud(2)]}
    report = evaluate(groups, MomentFrame(), EvalConfig(K=2))
    assert [c.class_id for c in report.classes] == ["lump"]
    assert any("solo" in w for w in report.warnings)


def test_noise_does_not_make_an_equivariant_model_more_stable():
    pc = lumpy_cloud(3)
    clean = stability(pc, MomentFrame(), EvalConfig(K=8))
    noisy = stability(pc, MomentFrame(), EvalConfig(K=8, perturbation="gaussian:0.05"))
    assert noisy >= clean


@pytest.mark.parametrize("text, expected", [("none", ("none", 0.0)), (None, ("none", 0.0)),
                                            ("gaussian:0.01", ("gaussian", 0.01)),
                                            ("resample:512", ("resample", 512.0))])
def test_parse_perturbation(text, expected):
    assert parse_perturbation(text) == expected


@pytest.mark.parametrize("text", ["gaussian", "blur:1", "resample:1.5", "gaussian:-1"])
def test_bad_perturbations_are_rejected(text):
    with pytest.raises(ValueError):
        parse_perturbation(text)


@pytest.mark.parametrize("kwargs", [{"K": 1}, {"knn_mode": "exact"}, {"split": "train"},
                                    {"consistency_protocol": "x"}])
def test_bad_eval_configs_are_rejected(kwargs):
    with pytest.raises(ValueError):
        EvalConfig(**kwargs)
