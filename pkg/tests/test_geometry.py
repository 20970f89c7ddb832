import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spstitch import geometry
from spstitch.errors import DegenerateConfiguration, PointAtInfinity, SingularHomography

from conftest import random_homography


def homog_oracle(H, p):
    v = H @ np.array([p[0], p[1], 1.0])
    return v[:2] / v[2]


def test_apply_identity_and_translation():
    assert np.allclose(geometry.apply(np.eye(3), [3, 7]), [3, 7])
    assert np.allclose(geometry.apply(geometry.translation(5, -2), [0, 0]), [5, -2])


def test_apply_matches_homogeneous_oracle(rng):
    for _ in range(50):
        H = random_homography(rng)
        p = rng.uniform(0, 400, 2)
        assert np.allclose(geometry.apply(H, p), homog_oracle(H, p), atol=1e-12, rtol=0)


def test_apply_keeps_shape():
    pts = np.zeros((3, 4, 2))
    assert geometry.apply(np.eye(3), pts).shape == (3, 4, 2)


def test_apply_point_at_infinity():
    H = np.eye(3)
    H[2] = [1.0, 0.0, 1.0]
    with pytest.raises(PointAtInfinity):
        geometry.apply(H, [-1.0, 5.0])


def test_jacobian_identity_and_affine():
    assert np.allclose(geometry.jacobian(np.eye(3), [12.0, -4.0]), [1, 0, 0, 1])
    A = np.array([[1.2, 0.3, 5.0], [-0.1, 0.9, 2.0], [0, 0, 1]])
    for p in ([0, 0], [100, 50], [-30, 7]):
        assert np.allclose(geometry.jacobian(A, p), [1.2, 0.3, -0.1, 0.9])


def test_jacobian_finite_difference(rng):
    for _ in range(20):
        H = random_homography(rng)
        p = np.array([10.0, 20.0])
        h = 1e-5
        fd = np.concatenate([
            (geometry.apply(H, p + [h, 0]) - geometry.apply(H, p - [h, 0])) / (2 * h),
            (geometry.apply(H, p + [0, h]) - geometry.apply(H, p - [0, h])) / (2 * h),
        ])
        fd = fd[[0, 2, 1, 3]]
        J = geometry.jacobian(H, p)
        assert np.allclose(J, fd, rtol=1e-6, atol=1e-9)


def test_normalize_homography_scale_invariance(rng):
    H = random_homography(rng)
    assert np.allclose(geometry.normalize_homography(-7.5 * H), geometry.normalize_homography(H))
    with pytest.raises(DegenerateConfiguration):
        geometry.normalize_homography(np.zeros((3, 3)))


def test_invert_singular():
    with pytest.raises(SingularHomography):
        geometry.invert(np.array([[1, 2, 3], [2, 4, 6], [0, 0, 1.0]]))


def test_transfer_line_examples(rng):
    assert np.allclose(geometry.transfer_line(np.eye(3), [1, 0, -5]), [1, 0, -5])
    for _ in range(30):
        H = random_homography(rng)
        p, q = rng.uniform(0, 300, (2, 2))
        l = geometry.line_through(p, q)
        lp = geometry.transfer_line(H, l)
        for s in (p, q, 0.3 * p + 0.7 * q):
            x = geometry.apply(H, s)
            assert abs(lp[0] * x[0] + lp[1] * x[1] + lp[2]) < 1e-9
        assert np.isclose(np.hypot(lp[0], lp[1]), 1.0)


def test_transfer_line_singular():
    with pytest.raises(SingularHomography):
        geometry.transfer_line(np.diag([1.0, 0.0, 1.0]), [1, 0, 0])


def test_dlt_identity_from_four_points():
    pts = np.array([[0, 0], [100, 0], [100, 80], [0, 80.0]])
    assert np.allclose(geometry.estimate_dlt(pts, pts), np.eye(3), atol=1e-9)


def _lines_from(H, segs):
    return geometry.segment_line(geometry.apply(H, segs))


def test_dlt_points_and_lines_recover_known_h(rng):
    for _ in range(20):
        H = geometry.normalize_homography(random_homography(rng))
        pts = rng.uniform(0, 400, (6, 2))
        segs = rng.uniform(0, 400, (2, 2, 2))
        est = geometry.estimate_dlt(pts, geometry.apply(H, pts), segs, _lines_from(H, segs))
        assert np.allclose(est, H, atol=1e-8)


def test_dlt_lines_only(rng):
    for _ in range(20):
        H = geometry.normalize_homography(random_homography(rng))
        segs = rng.uniform(0, 400, (4, 2, 2))
        est = geometry.estimate_dlt(None, None, segs, _lines_from(H, segs))
        assert np.allclose(est, H, atol=1e-8)


def test_dlt_degenerate():
    with pytest.raises(DegenerateConfiguration):
        geometry.estimate_dlt([[0, 0], [1, 1], [2, 2]], [[0, 0], [1, 1], [2, 2]])
    collinear = np.array([[0, 0], [1, 1], [2, 2], [3, 3], [4, 4.0]])
    with pytest.raises(DegenerateConfiguration):
        geometry.estimate_dlt(collinear, collinear)


def test_dlt_line_rows_are_the_endpoint_equation(rng):
    # each endpoint row dotted with h is a*num_x + b*num_y + c*den in normalised coordinates
    H = random_homography(rng)
    segs = rng.uniform(0, 300, (3, 2, 2))
    system = geometry.dlt_system(None, None, segs, _lines_from(H, segs))
    Hn = system.T_ref @ H @ np.linalg.inv(system.T_target)
    r = system.A @ (Hn.ravel() / np.linalg.norm(Hn))
    assert np.max(np.abs(r)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-0.3, 0.3), min_size=4, max_size=4),
    st.lists(st.floats(-5e-4, 5e-4), min_size=2, max_size=2),
)
def test_apply_inverse_roundtrip(a, p):
    H = np.array([[1 + a[0], a[1], 10.0], [a[2], 1 + a[3], -4.0], [p[0], p[1], 1.0]])
    pts = np.array([[5.0, 7.0], [120.0, 60.0], [300.0, 10.0]])
    back = geometry.apply(geometry.invert(H), geometry.apply(H, pts))
    assert np.allclose(back, pts, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0.1, 10))
def test_hartley_transform_normalises(cx, cy, spread):
    rng = np.random.default_rng(0)
    pts = rng.normal([cx, cy], spread, (20, 2))
    T = geometry.hartley_transform(pts)
    q = pts @ T[:2, :2].T + T[:2, 2]
    assert np.allclose(q.mean(axis=0), 0, atol=1e-9)
    assert np.isclose(np.mean(np.linalg.norm(q, axis=1)), np.sqrt(2))
