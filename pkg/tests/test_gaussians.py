"""Primitive container, quaternion math, covariance, densify ops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splatdrop.gaussians import (
    SPLIT_SCALE_FACTOR, GaussianCloud, InvalidParameterError, clone_primitives,
    covariance3d, empty_cloud, init_random_cloud, inverse_sigmoid,
    normalize_quaternions, prune, quat_rot_grad, quat_to_rot, sigmoid,
    split_primitives,
)

from conftest import random_cloud


finite_quats = arrays(np.float64, (3, 4),
                      elements=st.floats(-2, 2)).filter(
                          lambda q: np.all(np.linalg.norm(q, axis=1) > 1e-3))


def test_sigmoid_inverse_roundtrip():
    y = np.linspace(0.01, 0.99, 25)
    assert np.allclose(sigmoid(inverse_sigmoid(y)), y, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(finite_quats)
def test_quat_to_rot_is_rotation(q):
    R = quat_to_rot(normalize_quaternions(q))
    eye = np.einsum("nij,nkj->nik", R, R)
    assert np.allclose(eye, np.broadcast_to(np.eye(3), (3, 3, 3)), atol=1e-9)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_quat_to_rot_known_values():
    # identity, and a 90-degree turn about z
    ident = quat_to_rot(np.array([[1.0, 0.0, 0.0, 0.0]]))[0]
    assert np.allclose(ident, np.eye(3), atol=1e-15)
    s = np.sqrt(0.5)
    Rz = quat_to_rot(np.array([[s, 0.0, 0.0, s]]))[0]
    assert np.allclose(Rz @ np.array([1.0, 0.0, 0.0]),
                       np.array([0.0, 1.0, 0.0]), atol=1e-12)


def test_quat_rot_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((4, 4))
    G = quat_rot_grad(q)
    h = 1e-6
    for k in range(4):
        qp = q.copy()
        qp[:, k] += h
        qm = q.copy()
        qm[:, k] -= h
        fd = (quat_to_rot(qp) - quat_to_rot(qm)) / (2 * h)
        assert np.allclose(G[:, k], fd, atol=1e-6)


def test_covariance3d_is_spd_with_expected_eigenvalues():
    rng = np.random.default_rng(1)
    log_s = rng.uniform(-2, 0, size=(5, 3))
    q = normalize_quaternions(rng.standard_normal((5, 4)))
    cov = covariance3d(log_s, q)
    assert np.allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-14)
    eig = np.sort(np.linalg.eigvalsh(cov), axis=1)
    want = np.sort(np.exp(2.0 * log_s), axis=1)
    assert np.allclose(eig, want, atol=1e-12)


def test_cloud_shape_validation():
    with pytest.raises(InvalidParameterError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 4)),
                      np.zeros(2), np.zeros((2, 3, 1)))
    with pytest.raises(ValueError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)),
                      np.zeros(2), np.zeros((2, 3, 2)))   # 2 is not (l+1)^2


def test_init_random_cloud_statistics():
    rng = np.random.default_rng(2)
    bbox = (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
    cloud = init_random_cloud(bbox, 500, rng, sh_degree=1)
    assert cloud.count == 500
    assert np.all(cloud.means >= -1) and np.all(cloud.means <= 1)
    assert np.allclose(cloud.opacities(), 0.1, atol=1e-12)
    # isotropic scales equal to the mean nearest-neighbor distance
    assert np.ptp(cloud.log_scales) < 1e-12
    assert np.all(cloud.sh_coeffs[:, :, 1:] == 0.0)
    assert cloud.scene_extent > 0


def test_init_random_cloud_empty_and_degenerate():
    rng = np.random.default_rng(0)
    bbox = (np.zeros(3), np.ones(3))
    assert init_random_cloud(bbox, 0, rng).count == 0
    with pytest.raises(InvalidParameterError):
        init_random_cloud((np.ones(3), np.zeros(3)), 5, rng)


def test_split_keeps_survivors_then_two_children_per_parent():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 6)
    mask = np.array([False, True, False, False, True, False])
    out = split_primitives(cloud, mask, np.random.default_rng(0))
    assert out.count == 4 + 4
    # survivors carried bit-exactly in order
    keep = ~mask
    assert np.array_equal(out.means[:4], cloud.means[keep])
    assert np.array_equal(out.sh_coeffs[:4], cloud.sh_coeffs[keep])
    # children scales shrink by exactly the split factor
    child_ls = out.log_scales[4:]
    parent_ls = np.repeat(cloud.log_scales[mask], 2, axis=0)
    assert np.allclose(child_ls, parent_ls - np.log(SPLIT_SCALE_FACTOR),
                       atol=1e-15)
    # children inherit rotation/opacity/color unchanged
    assert np.array_equal(out.rotations[4:], np.repeat(cloud.rotations[mask], 2, axis=0))
    assert np.array_equal(out.opacity_logits[4:], np.repeat(cloud.opacity_logits[mask], 2))


def test_split_children_sampled_from_parent_density():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 1)
    mask = np.array([True])
    samples = []
    for s in range(2000):
        out = split_primitives(cloud, mask, np.random.default_rng(s))
        samples.append(out.means)
    sam = np.concatenate(samples) - cloud.means[0]
    cov_emp = np.cov(sam.T)
    cov_true = covariance3d(cloud.log_scales,
                            normalize_quaternions(cloud.rotations))[0]
    assert np.allclose(cov_emp, cov_true, rtol=0.15, atol=3e-3)


def test_clone_appends_exact_copies():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 4)
    mask = np.array([True, False, True, False])
    out = clone_primitives(cloud, mask)
    assert out.count == 6
    assert np.array_equal(out.means[:4], cloud.means)
    assert np.array_equal(out.means[4:], cloud.means[[0, 2]])


def test_prune_keeps_masked_rows():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng, 5)
    keep = np.array([True, False, True, True, False])
    out = prune(cloud, keep)
    assert out.count == 3
    assert np.array_equal(out.means, cloud.means[keep])


def test_empty_cloud_and_mask_length_checks():
    assert empty_cloud(sh_degree=1).count == 0
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 3)
    for op in (lambda: split_primitives(cloud, np.ones(4, bool), rng),
               lambda: clone_primitives(cloud, np.ones(2, bool)),
               lambda: prune(cloud, np.ones(5, bool))):
        with pytest.raises(InvalidParameterError):
            op()
