import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spstitch import apap, geometry
from spstitch import quasihomography as qh
from spstitch.errors import AffineWarp, NoNonOverlap
from spstitch.synthetic import SceneSpec, generate_scene

from conftest import random_homography

RECT = geometry.Rect(0, 0, 399, 299)


def projective(seed, strength=1e-3):
    return geometry.normalize_homography(random_homography(np.random.default_rng(seed), strength))


def secant_direction(H, p, d, eps=1e-4):
    a = geometry.apply(H, p - eps * d)
    b = geometry.apply(H, p + eps * d)
    return qh.direction(b - a)


def test_direction_canonical_sign():
    assert np.allclose(qh.direction(np.inf), [0, 1])
    assert np.allclose(qh.direction(np.array([-1.0, -1.0])), np.array([1, 1]) / np.sqrt(2))
    assert qh.slope_value(qh.direction(np.inf)) == np.inf
    assert qh.slope_value(qh.direction(0.7)) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        qh.direction(np.zeros(2))


def test_slope_transfer_identity_and_rotation():
    p = np.array([10.0, 20.0])
    assert qh.slope_value(qh.slope_transfer(np.eye(3), p, 0.7)) == pytest.approx(0.7, abs=1e-12)
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(qh.slope_transfer(rot, p, 0.0), [0, 1])


def test_slope_transfer_matches_secant(rng):
    for seed in range(20):
        H = projective(seed)
        p = rng.uniform([0, 0], [399, 299])
        k = rng.normal()
        d = qh.slope_transfer(H, p, k)
        assert np.abs(d - secant_direction(H, p, qh.direction(k))).max() < 1e-4


def test_slope_transfer_vectorised(rng):
    H = projective(3)
    pts = rng.uniform([0, 0], [399, 299], (5, 2))
    stacked = qh.slope_transfer(H, pts, 0.3)
    assert stacked.shape == (5, 2)
    for p, d in zip(pts, stacked):
        assert np.allclose(d, qh.slope_transfer(H, p, 0.3))


def test_invariant_slopes_example():
    H = np.eye(3)
    H[2, :2] = [0.1, 0.2]
    k1, s1 = qh.invariant_slopes(H)
    assert qh.slope_value(k1) == pytest.approx(-0.5)
    assert qh.slope_value(s1) == pytest.approx(-0.5)
    H[2, :2] = [0.1, 0.0]
    k1, _ = qh.invariant_slopes(H)
    assert np.allclose(k1, [0, 1])


def test_invariant_slopes_affine_raises():
    with pytest.raises(AffineWarp):
        qh.invariant_slopes(np.diag([2.0, 3.0, 1.0]))


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_invariant_slope_is_location_independent(seed):
    H = projective(seed)
    k1, s1 = qh.invariant_slopes(H)
    pts = np.random.default_rng(seed).uniform([0, 0], [399, 299], (50, 2))
    dirs = qh.slope_transfer(H, pts, k1)
    dirs *= np.sign(dirs @ s1)[:, None]
    assert np.abs(dirs - s1).max() < 1e-9


def test_frame_invariants(rng):
    for seed in range(20):
        H = projective(seed)
        anchor = rng.uniform([0, 0], [399, 299])
        f = qh.make_frame(H, anchor)
        assert abs(f.d1 @ f.d2) < 1e-12
        assert abs(f.e1 @ f.e2) < 1e-12
        if np.isfinite(f.k1) and np.isfinite(f.k2) and f.k1 != 0:
            assert f.k1 * f.k2 == pytest.approx(-1, abs=1e-9)
        if np.isfinite(f.s1) and np.isfinite(f.s2) and f.s1 != 0:
            assert f.s1 * f.s2 == pytest.approx(-1, abs=1e-9)
        a = np.append(f.anchor, 1.0)
        assert abs(f.l_u @ a) < 1e-9 and abs(f.l_v @ a) < 1e-9


def vertical_family():
    # h8 = 0: the invariant family is vertical
    H = np.eye(3)
    H[0, 2] = -150.0
    H[2, 0] = 4e-4
    return H


def test_select_frame_vertical_partition():
    H = vertical_family()
    overlap = np.array([[0, 0], [199, 0], [199, 299], [0, 299]], float)
    f = qh.select_frame(H, RECT, overlap)
    assert np.allclose(np.abs(f.d1), [0, 1])
    assert f.anchor == pytest.approx([199.0, 149.5])
    assert np.allclose(np.abs(f.d2), [1, 0])


def test_select_frame_horizontal_partition():
    H = np.eye(3)
    H[2, 1] = 4e-4
    overlap = np.array([[0, 0], [399, 0], [399, 149], [0, 149]], float)
    f = qh.select_frame(H, RECT, overlap)
    assert np.allclose(np.abs(f.d1), [1, 0])
    assert f.anchor == pytest.approx([199.5, 149.0])


def test_select_frame_tangency_oracle(rng):
    for seed in range(30):
        H = projective(seed)
        x0, y0 = rng.uniform([0, 0], [150, 100])
        x1, y1 = rng.uniform([x0 + 50, y0 + 50], [399, 299])
        overlap = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        try:
            f = qh.select_frame(H, RECT, overlap)
        except NoNonOverlap:
            continue
        n = np.array([-f.d1[1], f.d1[0]])
        signed = (overlap - f.anchor) @ n
        # every hull vertex on one side, at least one on the line
        assert signed.max() < 1e-9 or signed.min() > -1e-9
        assert np.abs(signed).min() < 1e-9


def test_select_frame_full_overlap_raises():
    with pytest.raises(NoNonOverlap):
        qh.select_frame(vertical_family(), RECT, RECT.corners())


def test_overlap_polygon_translation():
    H = geometry.translation(200.0, 0.0)
    poly = qh.overlap_polygon(H, RECT, RECT)
    assert poly[:, 0].min() == pytest.approx(0.0)
    assert poly[:, 0].max() == pytest.approx(199.0)
    assert qh.overlap_polygon(geometry.translation(1000.0, 0.0), RECT, RECT).shape == (0, 2)


def frame_for(seed):
    H = projective(seed)
    anchor = np.random.default_rng(seed + 1).uniform([50, 50], [350, 250])
    return H, qh.make_frame(H, anchor)


def test_qh_anchor_is_exact():
    for seed in range(20):
        H, f = frame_for(seed)
        assert np.array_equal(qh.qh_warp(H, f, f.anchor), geometry.apply(H, f.anchor))


def test_qh_residuals_vanish(rng):
    for seed in range(20):
        H, f = frame_for(seed)
        p = rng.uniform([0, 0], [399, 299], (50, 2))
        q = qh.qh_warp(H, f, p)
        assert np.abs(qh.qh_residuals(H, f, p, q)).max() < 1e-9


def test_qh_second_difference_along_invariant_lines(rng):
    for seed in range(20):
        H, f = frame_for(seed)
        p = rng.uniform([0, 0], [399, 299], (20, 2))
        d = 7.3 * f.d1
        q0, q1, q2 = (qh.qh_warp(H, f, p + i * d) for i in range(3))
        assert np.linalg.norm(q0 + q2 - 2 * q1, axis=1).max() < 1e-8


def test_qh_equals_h_on_partition_line():
    for seed in range(10):
        H, f = frame_for(seed)
        p = f.anchor + np.linspace(-100, 100, 11)[:, None] * f.d1
        assert np.abs(qh.qh_warp(H, f, p) - geometry.apply(H, p)).max() < 1e-8


def test_qh_tangent_at_orthogonal_anchor():
    for seed in range(10):
        H = projective(seed)
        anchor = qh.orthogonal_anchor(H, np.array([200.0, 150.0]))
        f = qh.make_frame(H, anchor)
        s2 = qh.slope_transfer(H, anchor, f.d2)
        assert abs(s2 @ f.e1) < 1e-9
        u = np.array([0.6, 0.8])
        ratios = []
        for r in (8.0, 4.0, 2.0, 1.0):
            p = anchor + r * u
            ratios.append(np.linalg.norm(qh.qh_warp(H, f, p) - geometry.apply(H, p)) / r)
        # o(r): halving r halves the error over r
        assert all(b < 0.55 * a for a, b in zip(ratios, ratios[1:]))


def test_qh_preserves_length_ratios(rng):
    H, f = frame_for(4)
    p = rng.uniform([0, 0], [399, 299], (10, 2))
    q = [qh.qh_warp(H, f, p + t * f.d1) for t in (0.0, 10.0, 20.0)]
    assert np.abs(np.linalg.norm(q[1] - q[0], axis=1) - np.linalg.norm(q[2] - q[1], axis=1)).max() < 1e-8


def test_composite_planar_equals_qh(rng):
    H = projective(5)
    pa = rng.uniform([0, 0], [399, 299], (60, 2))
    field = apap.fit_moving_dlt(pa, geometry.apply(H, pa), rect=RECT)
    f = qh.make_frame(H, np.array([200.0, 150.0]))
    p = rng.uniform([0, 0], [399, 299], (30, 2))
    assert np.abs(qh.composite_warp(field, H, f, p) - qh.qh_warp(H, f, p)).max() < 1e-6


def test_composite_far_from_data_equals_qh():
    scene = generate_scene(SceneSpec(seed=2, render=False))
    c = scene.corr
    # only points from the left part: cells on the right are floored to the global fit
    keep = c.pts_a[:, 0] < 120
    field = apap.fit_moving_dlt(c.pts_a[keep], c.pts_b[keep], rect=RECT, cfg=apap.MovingDltConfig(sigma=20.0))
    H = field.global_h
    assert field.floored[:, -1].all()
    f = qh.make_frame(H, np.array([200.0, 150.0]))
    p = np.array([[380.0, 40.0], [390.0, 280.0]])
    assert np.abs(qh.composite_warp(field, H, f, p) - qh.qh_warp(H, f, p)).max() < 1e-6


def test_composite_matches_step_by_step():
    scene = generate_scene(SceneSpec(seed=1, render=False))
    c = scene.corr
    H = geometry.estimate_dlt(c.pts_a, c.pts_b)
    field = apap.fit_moving_dlt(c.pts_a, c.pts_b, rect=RECT)
    f = qh.make_frame(H, np.array([250.0, 150.0]))
    p = c.pts_a[:20]
    expected = []
    for x in p:
        # locate the cell by hand, then apply the three maps in turn
        c_ = int(np.searchsorted(field.x_edges, x[0], side="right") - 1)
        r_ = int(np.searchsorted(field.y_edges, x[1], side="right") - 1)
        Hl = field.homographies[min(r_, len(field.y_edges) - 2), min(c_, len(field.x_edges) - 2)]
        y = Hl @ np.append(x, 1.0)
        z = np.linalg.solve(H, y)
        expected.append(qh.qh_warp(H, f, z[:2] / z[2]))
    assert np.abs(qh.composite_warp(field, H, f, p) - np.array(expected)).max() < 1e-9
