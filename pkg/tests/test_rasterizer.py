"""Forward rasterizer: tiled vs reference, compositing oracle, records."""

import numpy as np
import pytest

from splatdrop.gaussians import GaussianCloud, empty_cloud, inverse_sigmoid
from splatdrop.projection import project_cloud
from splatdrop.rasterizer import (
    ALPHA_MIN, ORACLE_SETTINGS, RasterSettings, RenderError, evaluate_alpha,
    gradient_map, render, render_reference,
)

from conftest import ORACLE, micro_scene, random_cloud, simple_camera


def _single_gaussian(opacity=0.8, color=(1.0, 0.4, 0.1)):
    from splatdrop.sh import C0
    sh = np.zeros((1, 3, 1))
    sh[0, :, 0] = (np.asarray(color) - 0.5) / C0
    return GaussianCloud(means=np.zeros((1, 3)),
                         log_scales=np.log(np.full((1, 3), 0.15)),
                         rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
                         opacity_logits=np.array([inverse_sigmoid(opacity)]),
                         sh_coeffs=sh, scene_extent=1.0)


def test_evaluate_alpha_gaussian_falloff():
    inv_cov = (0.5, 0.0, 0.5)           # isotropic Sigma = 2 I
    alpha, skip = evaluate_alpha(inv_cov, (4.0, 4.0), (4.0, 4.0), 0.6)
    assert np.isclose(alpha, 0.6) and not skip
    alpha2, _ = evaluate_alpha(inv_cov, (4.0, 4.0), (6.0, 4.0), 0.6)
    assert np.isclose(alpha2, 0.6 * np.exp(-0.5 * 0.5 * 4.0))


def test_evaluate_alpha_cap_and_skip():
    inv_cov = (0.5, 0.0, 0.5)
    alpha, skip = evaluate_alpha(inv_cov, (0.0, 0.0), (0.0, 0.0), 0.9999)
    assert alpha == 0.99 and not skip
    alpha, skip = evaluate_alpha(inv_cov, (0.0, 0.0), (20.0, 0.0), 0.9)
    assert skip


def test_single_gaussian_center_pixel_oracle():
    """Closed-form compositing over one primitive at a known pixel."""
    cloud = _single_gaussian()
    cam = simple_camera(size=16)
    out = render(cloud, cam, settings=ORACLE)
    proj = project_cloud(cloud, cam)
    px, py = 8, 8                      # the mean lands exactly on cx, cy
    assert np.allclose(proj.mean2d[0], [8.0, 8.0], atol=1e-12)
    alpha = proj.opacity[0]            # q = 0 at the mean
    want_rgb = alpha * proj.color[0]   # black background
    assert np.allclose(out.color[py, px], want_rgb, atol=1e-12)
    assert np.isclose(out.final_transmittance[py, px], 1.0 - alpha)
    want_depth = alpha * proj.depth[0] + (1.0 - alpha) * cam.far
    assert np.isclose(out.depth[py, px], want_depth)


def test_background_fills_empty_pixels():
    cam = simple_camera(size=16)
    out = render(empty_cloud(sh_degree=0), cam, background=(0.2, 0.4, 0.6),
                 settings=ORACLE)
    assert np.allclose(out.color, np.array([0.2, 0.4, 0.6]), atol=1e-15)
    assert np.all(out.final_transmittance == 1.0)
    assert np.allclose(out.depth, cam.far)
    assert np.all(out.contributor_count == 0)


@pytest.mark.parametrize("seed", range(8))
def test_tiled_matches_reference(seed):
    cloud, cam = micro_scene(seed, n=6)
    tiled = render(cloud, cam, settings=ORACLE)
    ref = render_reference(cloud, cam, settings=ORACLE)
    assert np.max(np.abs(tiled.color - ref.color)) <= 1e-12
    assert np.max(np.abs(tiled.depth - ref.depth)) <= 1e-12
    assert np.max(np.abs(tiled.final_transmittance
                         - ref.final_transmittance)) <= 1e-12


def test_tiled_matches_reference_with_mask():
    cloud, cam = micro_scene(3, n=6)
    bits = np.array([True, False, True, True, False, True])
    tiled = render(cloud, cam, mask=bits, settings=ORACLE)
    ref = render_reference(cloud, cam, mask=bits, settings=ORACLE)
    assert np.max(np.abs(tiled.color - ref.color)) <= 1e-12


def test_mask_length_mismatch_raises():
    cloud, cam = micro_scene(0)
    with pytest.raises(RenderError):
        render(cloud, cam, mask=np.ones(cloud.count + 1, dtype=bool))


def test_record_matches_forward_bitwise():
    cloud, cam = micro_scene(1, n=6)
    plain = render(cloud, cam, settings=ORACLE)
    out, record = render(cloud, cam, settings=ORACLE, want_record=True)
    assert np.array_equal(plain.color, out.color)
    assert np.array_equal(plain.depth, out.depth)
    # per-pixel recomposition from the record reproduces the image
    H, W = cam.height, cam.width
    bg = np.zeros(3)
    proj = record.proj
    for py in range(H):
        for px in range(W):
            t = 1.0
            rgb = np.zeros(3)
            lo = record.pixel_offsets[py * W + px]
            hi = record.pixel_offsets[py * W + px + 1]
            for slot, alpha, t_before in zip(record.slot[lo:hi],
                                            record.alpha[lo:hi],
                                            record.t_before[lo:hi]):
                assert np.isclose(t_before, t, atol=1e-14)
                rgb += alpha * t * proj.color[slot]
                t *= 1.0 - alpha
            rgb += t * bg
            assert np.allclose(rgb, out.color[py, px], atol=1e-12)
            assert np.isclose(t, out.final_transmittance[py, px], atol=1e-14)
    assert np.array_equal(record.pixel_offsets[1:] - record.pixel_offsets[:-1],
                          out.contributor_count.ravel())


def test_record_alphas_respect_thresholds():
    cloud, cam = micro_scene(2, n=6)
    _, record = render(cloud, cam, settings=ORACLE, want_record=True)
    assert np.all(record.alpha >= ALPHA_MIN)
    assert np.all(record.alpha <= ORACLE.alpha_max)
    assert np.all(record.t_before <= 1.0)
    assert record.weights.shape == record.alpha.shape


def test_early_stop_only_skips_invisible_tail():
    """Early termination changes nothing above its transmittance cutoff."""
    rng = np.random.default_rng(9)
    cloud = random_cloud(rng, 40, opacity=(0.7, 0.95))
    cam = simple_camera(size=16)
    full = render(cloud, cam, settings=ORACLE)
    stopped = render(cloud, cam, settings=ORACLE.with_(early_stop_t=1e-4))
    # any pixel that never reached the cutoff must agree exactly
    same = full.final_transmittance >= 1e-4
    assert np.allclose(stopped.color[same], full.color[same], atol=1e-12)
    # stopped pixels differ by at most the residual transmittance
    assert np.max(np.abs(stopped.color - full.color)) <= 2e-4


def test_dtype_setting_controls_output_storage():
    cloud, cam = micro_scene(4)
    out32 = render(cloud, cam)     # default settings store float32
    out64 = render(cloud, cam, settings=ORACLE)
    assert out32.color.dtype == np.float32
    assert out64.color.dtype == np.float64


def test_depth_output_composites_far_plane():
    cloud, cam = micro_scene(5, n=6)
    out, record = render(cloud, cam, settings=ORACLE, want_record=True)
    proj = record.proj
    W = cam.width
    for py in range(cam.height):
        for px in range(W):
            lo = record.pixel_offsets[py * W + px]
            hi = record.pixel_offsets[py * W + px + 1]
            w = record.alpha[lo:hi] * record.t_before[lo:hi]
            want = float(w @ proj.depth[record.slot[lo:hi]])
            want += out.final_transmittance[py, px] * cam.far
            assert np.isclose(out.depth[py, px], want, atol=1e-10)


def test_gradient_map_sums_weighted_magnitudes():
    cloud, cam = micro_scene(6, n=5)
    _, record = render(cloud, cam, settings=ORACLE, want_record=True)
    mags = np.arange(1.0, cloud.count + 1.0)
    gmap = gradient_map(record, mags)
    assert gmap.shape == (cam.height, cam.width)
    W = cam.width
    src = record.proj.source_index[record.slot]
    raw = np.zeros((cam.height, W))
    for py in range(cam.height):
        for px in range(W):
            lo = record.pixel_offsets[py * W + px]
            hi = record.pixel_offsets[py * W + px + 1]
            raw[py, px] = np.sum(record.weights[lo:hi] * mags[src[lo:hi]])
    # the map is the weighted splat normalized by its own peak
    assert np.allclose(gmap, raw / raw.max(), atol=1e-12)
    assert np.isclose(gmap.max(), 1.0)
