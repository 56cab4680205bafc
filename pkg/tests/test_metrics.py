import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pulsediff.metrics import (FrameEmbedder, GaussianStats, NotPSDError, VideoEmbedder, clip_ssim, fid,
                               frechet_distance, fvd, metrics_report, ssim, ssim_components)

from conftest import phantom_set


def _img(seed, shape=(24, 24)):
    return np.random.default_rng(seed).uniform(0, 1, shape)


def test_ssim_identity_exact():
    a = _img(0)
    assert ssim(a, a) == 1.0


def test_ssim_constant_closed_form(oracles):
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(oracles["ssim_constant_0_1"], rel=1e-9)


def test_ssim_symmetric_and_bounded():
    a, b = _img(1), _img(2)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert -1 <= ssim(a, b) <= 1


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), c=st.floats(-0.5, 0.5))
def test_ssim_shift_leaves_structure_term(seed, c):
    a, b = 0.5 * _img(seed), 0.5 * _img(seed + 1)
    _, cs0 = ssim_components(a, b)
    _, cs1 = ssim_components(a + c, b + c)
    np.testing.assert_allclose(cs1, cs0, atol=1e-9)


def test_frechet_closed_forms():
    p = GaussianStats(np.zeros(1), np.eye(1))
    assert frechet_distance(p, p) < 1e-9
    assert frechet_distance(p, GaussianStats(np.array([2.0]), np.eye(1))) == pytest.approx(4.0, abs=1e-9)
    assert frechet_distance(p, GaussianStats(np.zeros(1), 4 * np.eye(1))) == pytest.approx(1.0, abs=1e-9)


def _random_stats(rng, d):
    a = rng.normal(size=(d, d))
    return GaussianStats(rng.normal(size=d), a @ a.T + 0.1 * np.eye(d))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 6))
def test_frechet_symmetric_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    p, q = _random_stats(rng, d), _random_stats(rng, d)
    a, b = frechet_distance(p, q), frechet_distance(q, p)
    assert a >= 0 and abs(a - b) <= 1e-9 * max(1.0, a)
    assert frechet_distance(p, p) < 1e-9


def test_frechet_not_psd():
    bad = GaussianStats(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(NotPSDError):
        frechet_distance(bad, GaussianStats(np.zeros(2), np.eye(2)))


def test_stats_symmetrized():
    s = GaussianStats(np.zeros(2), np.array([[1.0, 0.2], [0.0, 1.0]]))
    assert np.array_equal(s.sigma, s.sigma.T)


def test_fid_monte_carlo_matches_analytic():
    rng = np.random.default_rng(0)
    mu = np.array([0.5, -1.0, 0.0])
    cov = np.diag([1.0, 2.0, 0.5])
    x = rng.normal(size=(40_000, 3))
    y = rng.multivariate_normal(mu, cov, size=40_000)
    analytic = frechet_distance(GaussianStats(np.zeros(3), np.eye(3)), GaussianStats(mu, cov))
    est = fid(x, y, embedder=lambda v: v)
    assert est == pytest.approx(analytic, abs=0.05)


def test_fid_self_and_permutation():
    frames = np.concatenate([r.frames for r in phantom_set(6)])
    other = np.concatenate([r.frames for r in phantom_set(6, seed=1)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert fid(frames, frames) < 1e-6
        perm = np.random.default_rng(0).permutation(len(other))
        assert fid(frames, other) == pytest.approx(fid(frames, other[perm]), rel=1e-9)


def test_small_sample_warning():
    with pytest.warns(RuntimeWarning, match="rank deficient"):
        GaussianStats.from_features(np.zeros((3, 8)))


def test_fvd_self_zero_and_temporal_sensitivity(pinned):
    real = np.stack([r.frames for r in phantom_set(16, seed=2)])
    fake = np.stack([r.frames for r in phantom_set(16, seed=3)])
    rng = np.random.default_rng(0)
    shuffled = np.stack([c[rng.permutation(c.shape[0])] for c in fake])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert fvd(real, real) < 1e-6
        base = fvd(real, fake)
        assert fvd(real, shuffled) > pinned["fvd_shuffle_ratio"] * base


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fvd_single_frame_collapses_to_fid():
    real = np.stack([r.frames[:1] for r in phantom_set(40, seed=2, frames=2)])
    fake = np.stack([r.frames[:1] for r in phantom_set(40, seed=3, frames=2)])
    emb = FrameEmbedder()
    a = fvd(real, fake, VideoEmbedder(emb))
    b = fid(real[:, 0], fake[:, 0], emb)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_embedders_deterministic():
    x = np.stack([r.frames for r in phantom_set(2)])
    assert np.array_equal(VideoEmbedder()(x), VideoEmbedder()(x))


def test_report_fields():
    clips = [r.frames for r in phantom_set(3)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = metrics_report(clips, clips, [("c0", clips[0], clips[0])], seed=4)
    assert set(rep) == {"fid", "fvd", "ssim_mean", "ssim_per_case", "n_real", "n_fake", "embedder_id", "seed"}
    assert rep["ssim_mean"] == 1.0 and rep["n_real"] == 3 and rep["seed"] == 4
    assert rep["fid"] < 1e-6 and rep["fvd"] < 1e-6
    assert clip_ssim(clips[0], clips[1]) < 1.0
