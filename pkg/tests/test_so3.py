import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from choir import autodiff as ad
from choir import so3
from choir.selfcheck import brute_force_chordal_mean

seeds = st.integers(0, 2**32 - 1)


def haar_mean_angle_deg():
    """Mean of the Haar rotation-angle density (1 - cos t) / pi on [0, pi]."""
    val, _ = integrate.quad(lambda t: t * (1 - math.cos(t)) / math.pi, 0, math.pi)
    return math.degrees(val)


def test_haar_mean_angle_oracle_value():
    # frozen from the quadrature above; the closed form is pi/2 + 2/pi
    assert haar_mean_angle_deg() == pytest.approx(126.4756, abs=1e-4)
    assert haar_mean_angle_deg() == pytest.approx(math.degrees(math.pi / 2 + 2 / math.pi), abs=1e-9)


def test_uniform_samples_match_haar_angle_distribution():
    rng = np.random.default_rng(0)
    rs = so3.sample_many(rng, 10_000)
    ang = np.degrees(so3.angles_between(rs, np.eye(3)[None]))
    assert abs(ang.mean() - haar_mean_angle_deg()) < 2.0
    # Kolmogorov-Smirnov against the CDF (t - sin t) / pi
    from scipy import stats

    cdf = lambda t: (np.radians(t) - np.sin(np.radians(t))) / np.pi  # noqa: E731
    assert stats.kstest(ang, cdf).pvalue > 1e-3


@given(seeds)
def test_samples_are_rotations_and_reproducible(seed):
    a = so3.sample_uniform(np.random.default_rng(seed))
    b = so3.sample_uniform(np.random.default_rng(seed))
    assert so3.is_rotation(a)
    np.testing.assert_array_equal(a, b)


def test_angle_between_known_values():
    r = so3.sample_uniform(np.random.default_rng(1))
    assert so3.angle_between(r, r) == pytest.approx(0.0, abs=1e-7)
    assert so3.angle_between(np.eye(3), so3.rot_z(np.pi / 2)) == pytest.approx(np.pi / 2, abs=1e-12)


@given(seeds)
def test_angle_is_symmetric_and_bi_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b, q = so3.sample_many(rng, 3)
    d = so3.angle_between(a, b)
    assert so3.angle_between(b, a) == pytest.approx(d, abs=1e-9)
    assert so3.angle_between(q @ a, q @ b) == pytest.approx(d, abs=1e-9)
    assert so3.angle_between(a @ q, b @ q) == pytest.approx(d, abs=1e-9)
    assert 0.0 <= d <= np.pi


def test_angle_clamps_roundoff():
    assert so3.angle_between(np.eye(3) * (1 + 1e-15), np.eye(3)) == 0.0


def test_chordal_mean_simple_cases():
    r = so3.sample_uniform(np.random.default_rng(2))
    np.testing.assert_allclose(so3.chordal_mean([r]), r, atol=1e-12)
    t = np.radians(30)
    np.testing.assert_allclose(so3.chordal_mean([so3.rot_z(t), so3.rot_z(-t)]), np.eye(3), atol=1e-12)


def test_chordal_mean_matches_brute_force_minimizer():
    rng = np.random.default_rng(3)
    for _ in range(10):
        rs = so3.sample_many(rng, 5)
        mean = so3.chordal_mean(rs)
        ref = brute_force_chordal_mean(rs, seed=int(rng.integers(1 << 30)))
        assert math.degrees(so3.angle_between(mean, ref)) < 0.1
        assert abs(np.linalg.det(mean) - 1) < 1e-9


@given(seeds)
def test_chordal_mean_is_left_equivariant(seed):
    rng = np.random.default_rng(seed)
    rs = so3.sample_many(rng, 4)
    q = so3.sample_uniform(rng)
    mean, flag = so3.chordal_mean(rs, return_flag=True)
    if flag:
        return
    np.testing.assert_allclose(so3.chordal_mean(q @ rs), q @ mean, atol=1e-8)


def test_degenerate_mean_is_flagged():
    # pi-turns about the three axes average to -I/3: singular values tie
    rs = [so3.axis_angle(e, np.pi) for e in np.eye(3)] + [np.eye(3)]
    _, flag = so3.chordal_mean(rs, return_flag=True)
    assert flag


def test_project_to_so3():
    r = so3.sample_uniform(np.random.default_rng(4))
    np.testing.assert_allclose(so3.project_to_so3(r), r, atol=1e-12)
    np.testing.assert_allclose(so3.project_to_so3(2 * np.eye(3)), np.eye(3), atol=1e-12)
    rng = np.random.default_rng(5)
    for _ in range(100):
        r = so3.sample_uniform(rng)
        p = so3.project_to_so3(r + 0.01 * rng.standard_normal((3, 3)))
        assert so3.is_rotation(p)
        assert math.degrees(so3.angle_between(p, r)) < 2.0


def test_project_rejects_non_finite():
    with pytest.raises(ValueError):
        so3.project_to_so3(np.full((3, 3), np.nan))


def test_gram_schmidt_frame_cases():
    x, y = np.eye(3)[0], np.eye(3)[1]
    np.testing.assert_allclose(so3.gram_schmidt_frame(x, y), np.eye(3), atol=1e-15)
    np.testing.assert_allclose(so3.gram_schmidt_frame(2 * x, y + 0.5 * x), np.eye(3), atol=1e-15)
    rng = np.random.default_rng(6)
    for _ in range(1000):
        assert so3.is_rotation(so3.gram_schmidt_frame(rng.standard_normal(3), rng.standard_normal(3)))


@given(seeds, st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-5, 5))
def test_gram_schmidt_scale_and_shear_invariance(seed, s, t, c):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal(3), rng.standard_normal(3)
    if np.linalg.norm(np.cross(u, v)) < 1e-3:
        return
    np.testing.assert_allclose(so3.gram_schmidt_frame(s * u, t * v + c * u), so3.gram_schmidt_frame(u, v),
                               atol=1e-9)


def test_gram_schmidt_degenerate_raises():
    with pytest.raises(so3.DegenerateFrameError):
        so3.gram_schmidt_frame(np.zeros(3), np.ones(3))
    with pytest.raises(so3.DegenerateFrameError):
        so3.gram_schmidt_frame(np.ones(3), 2 * np.ones(3))


def test_gram_schmidt_tensor_matches_eager_and_is_regularized(rng):
    u, v = rng.standard_normal(3), rng.standard_normal(3)
    np.testing.assert_allclose(so3.gram_schmidt_tensor(ad.Tensor(u), ad.Tensor(v)).data,
                               so3.gram_schmidt_frame(u, v), atol=1e-14)
    zu = ad.Tensor(np.zeros(3), requires_grad=True)
    out = so3.gram_schmidt_tensor(zu, ad.Tensor(v))
    ad.backward(ad.reduce_sum(out))
    assert np.all(np.isfinite(zu.grad))
    with pytest.raises(so3.DegenerateFrameError):
        so3.gram_schmidt_tensor(zu, ad.Tensor(v), strict=True)


def test_gram_schmidt_tensor_gradient(rng):
    u = ad.Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
    v = ad.Tensor(rng.uniform(-1, 1, 3), requires_grad=True)
    w = rng.standard_normal((3, 3))
    res = ad.gradcheck(lambda: ad.reduce_sum(so3.gram_schmidt_tensor(u, v) * w), [u, v], coords_per_tensor=None)
    assert res.passed(1e-6)


@given(seeds)
def test_rms_angle_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    rs = so3.sample_many(rng, 6)
    a, _ = so3.rms_angle_to_mean(rs)
    b, _ = so3.rms_angle_to_mean(rs[rng.permutation(6)])
    assert a == pytest.approx(b, abs=1e-12)
