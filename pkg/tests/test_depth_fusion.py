import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occuslam.depth_fusion import (
    TAG_A_ONLY,
    TAG_B_ONLY,
    TAG_FUSED,
    TAG_INVALID,
    fuse_images,
    fuse_pixel,
)
from occuslam.depth_oracle import DepthImage
from occuslam.geometry import PinholeCamera, Pose

CAM = PinholeCamera(50.0, 50.0, 7.5, 5.5, 16, 12, near=0.1, far=10.0)


def make_image(depth, sigma, valid=None):
    depth = np.full((12, 16), depth) if np.isscalar(depth) else depth
    sigma = np.full((12, 16), sigma) if np.isscalar(sigma) else sigma
    valid = np.ones((12, 16), dtype=bool) if valid is None else valid
    return DepthImage(depth, sigma, valid, CAM, Pose.identity())


def test_fuse_pixel_known_value():
    # [DERIVED] equal sigmas: mean depth, sigma / sqrt(2)
    d, s = fuse_pixel(2.0, 0.1, 4.0, 0.1)
    assert np.isclose(d, 3.0)
    assert np.isclose(s, 0.1 / np.sqrt(2.0))
    # [DERIVED] d = (2/0.01 + 4/0.04) / (1/0.01 + 1/0.04) = 2.4, var = 0.008
    d, s = fuse_pixel(2.0, 0.1, 4.0, 0.2)
    assert np.isclose(d, 2.4)
    assert np.isclose(s, np.sqrt(0.008))


def test_fuse_pixel_rejects_bad_sigma():
    with pytest.raises(ValueError):
        fuse_pixel(1.0, 0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        fuse_pixel(1.0, 0.1, 1.0, -1.0)


@given(
    st.floats(0.5, 9.0), st.floats(0.01, 1.0), st.floats(0.5, 9.0), st.floats(0.01, 1.0)
)
@settings(deadline=None, max_examples=100)
def test_fuse_pixel_properties(d1, s1, d2, s2):
    d, s = fuse_pixel(d1, s1, d2, s2)
    # fused estimate lies between the inputs; fused sigma below both
    assert min(d1, d2) - 1e-12 <= d <= max(d1, d2) + 1e-12
    assert s <= min(s1, s2) + 1e-12
    # symmetric in its arguments
    d_swap, s_swap = fuse_pixel(d2, s2, d1, s1)
    assert np.isclose(d, d_swap) and np.isclose(s, s_swap)


def test_fuse_images_pass_through_and_tags():
    va = np.zeros((12, 16), dtype=bool)
    vb = np.zeros((12, 16), dtype=bool)
    va[:6] = True  # top half from a
    vb[3:9] = True  # middle band from b, overlapping rows 3..5
    a = make_image(2.0, 0.1, va)
    b = make_image(4.0, 0.1, vb)
    out = fuse_images(a, b, outlier_kappa=None)
    assert (out.tag[:3] == TAG_A_ONLY).all()
    assert (out.tag[3:6] == TAG_FUSED).all()
    assert (out.tag[6:9] == TAG_B_ONLY).all()
    assert (out.tag[9:] == TAG_INVALID).all()
    assert np.allclose(out.image.depth[:3], 2.0)
    assert np.allclose(out.image.depth[3:6], 3.0)
    assert np.allclose(out.image.depth[6:9], 4.0)
    assert np.array_equal(out.image.valid, va | vb)


def test_fuse_images_outlier_gate_keeps_lower_sigma():
    a = make_image(2.0, 0.05)
    b = make_image(4.0, 0.1)
    # disagreement 2 m >> 5 * sqrt(0.05^2 + 0.1^2): keep a everywhere
    out = fuse_images(a, b, outlier_kappa=5.0)
    assert (out.tag == TAG_A_ONLY).all()
    assert np.allclose(out.image.depth, 2.0)
    assert np.allclose(out.image.sigma, 0.05)
    # swapped sigmas keep b
    out = fuse_images(make_image(2.0, 0.1), make_image(4.0, 0.05), outlier_kappa=5.0)
    assert (out.tag == TAG_B_ONLY).all()
    assert np.allclose(out.image.depth, 4.0)


def test_fuse_images_agreeing_sources_fuse_despite_gate():
    a = make_image(3.0, 0.1)
    b = make_image(3.05, 0.1)
    out = fuse_images(a, b, outlier_kappa=5.0)
    assert (out.tag == TAG_FUSED).all()
    assert np.allclose(out.image.sigma, 0.1 / np.sqrt(2.0))


def test_fuse_images_input_validation():
    a = make_image(2.0, 0.1)
    other_cam = PinholeCamera(40.0, 40.0, 7.5, 5.5, 16, 12)
    b = DepthImage(a.depth, a.sigma, a.valid, other_cam, Pose.identity())
    with pytest.raises(ValueError):
        fuse_images(a, b)
    c = DepthImage(a.depth, a.sigma, a.valid, CAM, Pose(t=np.array([1.0, 0.0, 0.0])))
    with pytest.raises(ValueError):
        fuse_images(a, c)
    d = DepthImage(np.zeros((6, 8)), np.ones((6, 8)), np.ones((6, 8), bool), CAM, Pose.identity())
    with pytest.raises(ValueError):
        fuse_images(a, d)


def test_fused_variance_reduction_monte_carlo():
    rng = np.random.default_rng(11)
    n = 20000
    d_true = 3.0
    s1, s2 = 0.2, 0.3
    d1 = d_true + rng.normal(0.0, s1, n)
    d2 = d_true + rng.normal(0.0, s2, n)
    fused = np.array([fuse_pixel(a, s1, b, s2)[0] for a, b in zip(d1, d2)])
    # [DERIVED] fused std = sqrt(1 / (1/s1^2 + 1/s2^2)) = 0.1664
    expect = np.sqrt(1.0 / (1.0 / s1**2 + 1.0 / s2**2))
    assert abs(np.std(fused) - expect) < 0.01
    assert np.std(fused) < min(np.std(d1), np.std(d2))
