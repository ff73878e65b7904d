"""Dropout regularization: mask statistics, identities, ensemble behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatdrop.gaussians import prune
from splatdrop.metrics import dssim, l1
from splatdrop.rasterizer import render
from splatdrop.rdr import (
    DropoutMask, RdrConfig, RdrError, ensemble_render, rdr_loss, sample_mask,
    sub_model_render,
)

from conftest import ORACLE, micro_scene, random_cloud, simple_camera


def test_config_validation():
    RdrConfig(rate=0.0, weight=0.0)
    RdrConfig(rate=1.0, weight=5.0)
    with pytest.raises(RdrError):
        RdrConfig(rate=-0.1)
    with pytest.raises(RdrError):
        RdrConfig(rate=1.1)
    with pytest.raises(RdrError):
        RdrConfig(weight=-1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2 ** 31), st.integers(0, 10_000))
def test_mask_bits_are_boolean_and_replayable(rate, seed, iteration):
    m1 = sample_mask(64, rate, seed, iteration=iteration)
    m2 = sample_mask(64, rate, seed, iteration=iteration)
    assert m1.bits.dtype == bool and len(m1) == 64
    assert np.array_equal(m1.bits, m2.bits)


def test_mask_rate_zero_and_one():
    assert np.all(sample_mask(100, 0.0, 7).bits)
    assert not np.any(sample_mask(100, 1.0, 7).bits)
    with pytest.raises(RdrError):
        sample_mask(10, 1.5, 0)


def test_mask_keep_fraction_matches_rate():
    hits = np.mean([sample_mask(1000, 0.4, s).bits.mean() for s in range(50)])
    assert abs(hits - 0.6) < 5e-3


def test_masks_differ_across_iterations():
    a = sample_mask(200, 0.5, 3, iteration=1)
    b = sample_mask(200, 0.5, 3, iteration=2)
    assert not np.array_equal(a.bits, b.bits)


def test_sub_model_equals_pruned_cloud_render():
    """Dropping via mask is exactly rendering the surviving primitives:
    no opacity compensation is applied."""
    cloud, cam = micro_scene(0, n=6)
    mask = sample_mask(6, 0.4, seed=5)
    sub = sub_model_render(cloud, cam, mask, settings=ORACLE)
    pruned = render(prune(cloud, mask.bits), cam, settings=ORACLE)
    assert np.array_equal(sub.color, pruned.color)
    assert np.array_equal(sub.depth, pruned.depth)


def test_zero_rate_sub_model_is_bitwise_identical_to_full():
    cloud, cam = micro_scene(1, n=6)
    mask = sample_mask(6, 0.0, seed=0)
    sub = sub_model_render(cloud, cam, mask, settings=ORACLE)
    full = render(cloud, cam, settings=ORACLE)
    assert np.array_equal(sub.color, full.color)
    assert np.array_equal(sub.final_transmittance, full.final_transmittance)


def test_rdr_loss_value_and_identity():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 1, (16, 16, 3))
    b = rng.uniform(0, 1, (16, 16, 3))
    assert np.isclose(rdr_loss(a, b), l1(b, a) + dssim(b, a), atol=1e-14)
    assert np.isclose(rdr_loss(a, a), 0.0, atol=1e-12)
    with pytest.raises(RdrError):
        rdr_loss(a, b[:8])


def test_rdr_loss_gradient_is_wrt_sub_image_only():
    rng = np.random.default_rng(1)
    full = rng.uniform(0, 1, (12, 12, 3))
    sub = rng.uniform(0, 1, (12, 12, 3))
    v, g = rdr_loss(full, sub, grad=True)
    assert g.shape == sub.shape
    h = 1e-6
    for idx in [(0, 0, 0), (5, 7, 1), (11, 11, 2)]:
        sp = sub.copy()
        sp[idx] += h
        sm = sub.copy()
        sm[idx] -= h
        fd = (rdr_loss(full, sp) - rdr_loss(full, sm)) / (2 * h)
        assert abs(g[idx] - fd) <= 1e-7


def test_ensemble_k1_equals_single_sub_render():
    cloud, cam = micro_scene(2, n=6)
    img = ensemble_render(cloud, cam, k=1, rate=0.3, seed=4, settings=ORACLE)
    mask = sample_mask(6, 0.3, 4, iteration=0, purpose="ensemble")
    single = render(cloud, cam, mask=mask, settings=ORACLE)
    assert np.allclose(img, single.color, atol=1e-15)
    with pytest.raises(RdrError):
        ensemble_render(cloud, cam, k=0, rate=0.3, seed=4)


def test_ensemble_zero_rate_is_full_render():
    cloud, cam = micro_scene(3, n=6)
    img = ensemble_render(cloud, cam, k=4, rate=0.0, seed=0, settings=ORACLE)
    full = render(cloud, cam, settings=ORACLE)
    assert np.allclose(img, full.color, atol=1e-12)


def test_ensemble_variance_shrinks_like_one_over_k():
    """Across ensemble seeds, the pixel variance of a K-average decays as
    1/K (independent sub-renders)."""
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 40, opacity=(0.2, 0.5))
    cam = simple_camera(size=16)

    def batch(k):
        imgs = [ensemble_render(cloud, cam, k=k, rate=0.4, seed=s,
                                settings=ORACLE) for s in range(40)]
        return np.var(np.stack(imgs), axis=0).mean()

    v1, v4 = batch(1), batch(4)
    assert v1 > 0
    assert abs(v4 / v1 - 0.25) < 0.1


def test_ensemble_mean_approaches_expectation():
    """Larger K drives the ensemble toward the expected sub-model image,
    so the fluctuation between two independent ensembles shrinks."""
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 30)
    cam = simple_camera(size=16)
    d_small = np.abs(ensemble_render(cloud, cam, 2, 0.4, seed=0, settings=ORACLE)
                     - ensemble_render(cloud, cam, 2, 0.4, seed=1, settings=ORACLE)).mean()
    d_big = np.abs(ensemble_render(cloud, cam, 32, 0.4, seed=0, settings=ORACLE)
                   - ensemble_render(cloud, cam, 32, 0.4, seed=1, settings=ORACLE)).mean()
    assert d_big < d_small
