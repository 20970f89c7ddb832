import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spstitch import geometry, linework, meshwarp
from spstitch import quasihomography as qh
from spstitch.errors import FoldOverWarning, OutOfBounds, RankDeficientWarning, TooFewSamples

from conftest import random_homography

# random row sets leave some vertices to the prior on purpose
pytestmark = pytest.mark.filterwarnings("ignore::spstitch.errors.RankDeficientWarning")


def test_build_grid_examples():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 80, 80), 40)
    assert (g.cols, g.rows, g.n) == (3, 3, 9)
    g = meshwarp.build_grid(geometry.Rect(0, 0, 100, 40), 40)
    assert (g.cols, g.rows, g.n) == (4, 2, 8)
    g = meshwarp.build_grid(geometry.Rect(0, 0, 1000, 800), 40)
    assert (g.cols, g.rows) == (26, 21)
    assert g.xs[0] == 0 and g.xs[-1] == 1000 and np.diff(g.xs).max() <= 40 + 1e-12
    assert g.V.shape == (2 * g.n,)


def test_anchor_examples(rng):
    g = meshwarp.build_grid(geometry.Rect(0, 0, 120, 80), 40)
    a = meshwarp.anchor(g, np.array([40.0, 40.0]))
    w = np.zeros(g.n)
    np.add.at(w, a.idx, a.w)
    assert w[g.cols + 1] == pytest.approx(1.0) and w.sum() == pytest.approx(1.0)
    a = meshwarp.anchor(g, np.array([60.0, 20.0]))
    assert np.allclose(a.w, 0.25)
    p = rng.uniform([0, 0], [120, 80], (100, 2))
    a = meshwarp.anchor(g, p)
    assert np.allclose(a.w.sum(axis=1), 1.0) and a.w.min() >= 0
    assert np.abs(meshwarp.interpolate(g, g.V, p) - p).max() < 1e-12
    with pytest.raises(OutOfBounds):
        meshwarp.anchor(g, np.array([121.0, 0.0]))


def test_alignment_rows():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 120, 80), 40)
    v = g.vertices[5]
    b = meshwarp.assemble_alignment(g, v[None], v[None])
    assert len(b) == 2
    assert np.abs(b.residual(g.V)).max() < 1e-12
    pts = np.random.default_rng(0).uniform([0, 0], [120, 80], (7, 2))
    b = meshwarp.assemble_alignment(g, pts, pts + 1)
    assert len(b) == 14
    assert np.all(np.count_nonzero(b.vals, axis=1) <= 8)


def test_alignment_skips_outside_pairs():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 120, 80), 40)
    with pytest.warns(UserWarning):
        b = meshwarp.assemble_alignment(g, np.array([[10.0, 10], [500, 10]]), np.zeros((2, 2)))
    assert len(b) == 2


def test_alignment_recovers_homography():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 200, 160), 40)
    H = random_homography(np.random.default_rng(1))
    target = geometry.apply(H, g.vertices)
    system = meshwarp.mesh_system(g, target).add(meshwarp.assemble_alignment(g, g.vertices, target))
    sol = meshwarp.solve(system, g)
    assert np.abs(sol.vertices - target).max() < 1e-6


def test_naturalness_rows():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 120, 80), 40)
    seg = np.array([[[0.0, 5.0], [100.0, 5.0]]])
    b = meshwarp.assemble_naturalness(g, seg, np.array([[0.0, 1.0, -5.0]]))
    assert len(b) == 2
    assert np.abs(b.residual(g.V)).max() < 1e-12
    # only y coordinates appear
    assert np.all(b.cols[b.vals != 0] % 2 == 1)


def test_naturalness_forward_generated():
    rng = np.random.default_rng(2)
    g = meshwarp.build_grid(geometry.Rect(0, 0, 160, 160), 40)
    H = random_homography(rng)
    # endpoints on vertices so the bilinear image of H(V) is exact
    idx = rng.integers(0, g.n, (6, 2))
    segs = g.vertices[idx]
    segs = segs[idx[:, 0] != idx[:, 1]]
    lines = geometry.transfer_line(H, geometry.segment_line(segs))
    b = meshwarp.assemble_naturalness(g, segs, lines)
    assert np.abs(b.residual(geometry.apply(H, g.vertices).ravel())).max() < 1e-9


def lattice_problem(H, omega_all=True):
    """Samples on mesh vertices so that H(V) reproduces H exactly at every sample."""
    rect = geometry.Rect(0, 0, 400, 400)
    g = meshwarp.build_grid(rect, 40)
    frame = qh.make_frame(H, np.array([200.0, 200.0]))
    samples = linework.generate_cross_lines(frame, rect, None, 40.0, H)
    for line in samples.u_lines:
        line.in_omega = np.full(len(line.points), omega_all)
    return g, rect, samples


def test_cross_line_row_counts():
    H = np.eye(3)
    H[2, 0] = 5e-4
    g, rect, samples = lattice_problem(H)
    assert len(samples.u_lines) == 11 and len(samples.v_lines) == 11
    b = meshwarp.assemble_perspective(g, samples)
    L = [len(l.points) for l in samples.u_lines]
    K = [len(l.points) for l in samples.v_lines]
    assert len(b) == sum(n - 1 for n in L) + sum(3 * k - 5 for k in K)
    assert b.cols.shape[1] <= 24
    pj = meshwarp.assemble_projective(g, samples)
    assert len(pj) == sum(2 * (n - 2) for n in L)


def test_projective_rows_follow_omega_runs():
    H = np.eye(3)
    H[2, 0] = 5e-4
    g, rect, samples = lattice_problem(H)
    line = samples.u_lines[0]
    line.in_omega = np.zeros(len(line.points), bool)
    line.in_omega[2:7] = True
    line.in_omega[8:10] = True
    for other in samples.u_lines[1:]:
        other.in_omega[:] = False
    # one run of 5 samples gives 3 second differences; a run of 2 gives none
    assert len(meshwarp.assemble_projective(g, samples)) == 6


def test_perspective_residuals_vanish_at_prior():
    H = np.eye(3)
    H[:2, :2] += [[0.05, 0.02], [-0.03, 0.04]]
    H[:2, 2] = [12.0, -7.0]
    H[2, 0] = 6e-4
    g, rect, samples = lattice_problem(H)
    x = geometry.apply(H, g.vertices).ravel()
    assert np.abs(meshwarp.assemble_perspective(g, samples).residual(x)).max() < 1e-9
    pj = meshwarp.assemble_projective(g, samples).residual(x)
    assert np.sum(pj**2) > 1e-6
    # direct summation of second differences along u-lines
    direct = 0.0
    for line in samples.u_lines:
        q = geometry.apply(H, line.points)
        direct += np.sum((q[:-2] - 2 * q[1:-1] + q[2:]) ** 2)
    assert np.sum(pj**2) == pytest.approx(direct, rel=1e-9)


def test_projective_residuals_zero_for_similarity():
    H = np.array([[0.9, -0.2, 30.0], [0.2, 0.9, -10.0], [0.0, 0.0, 1.0]])
    frame_h = np.eye(3)
    frame_h[2, 0] = 1e-4
    g, rect, samples = lattice_problem(frame_h)
    x = geometry.apply(H, g.vertices).ravel()
    assert np.abs(meshwarp.assemble_projective(g, samples).residual(x)).max() < 1e-9


def test_saliency_rows():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 160, 160), 40)
    pts = linework.sample_segment(np.array([[0.0, 0.0], [120.0, 120.0]]), 40)
    n = np.array([1.0, -1.0]) / np.sqrt(2)
    b = meshwarp.assemble_saliency(g, [linework.SampledLine(pts, n)])
    assert len(b) == len(pts) - 1
    assert np.abs(b.residual(g.V)).max() < 1e-12
    with pytest.raises(TooFewSamples):
        meshwarp.assemble_saliency(g, [linework.SampledLine(pts[:1], n)])


def test_tikhonov_only_is_fixed_point():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 120, 80), 40)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        sol = meshwarp.solve(meshwarp.mesh_system(g), g)
    assert np.array_equal(sol.V_hat, g.V) or np.abs(sol.V_hat - g.V).max() < 1e-12


def test_untouched_vertices_warn():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 120, 80), 40)
    system = meshwarp.mesh_system(g).add(meshwarp.assemble_alignment(g, g.vertices[:1], g.vertices[:1]))
    with pytest.warns(RankDeficientWarning):
        meshwarp.solve_linear(system)


def random_system(rng, rows, cols):
    g = meshwarp.build_grid(geometry.Rect(0, 0, 40 * (cols - 1), 40 * (rows - 1)), 40)
    H = random_homography(rng)
    pts = rng.uniform([0, 0], g.vertices.max(axis=0), (rng.integers(4, 12), 2))
    system = meshwarp.mesh_system(g, geometry.apply(H, g.vertices), meshwarp.Lambdas(*rng.uniform(0.5, 50, 4)))
    system.add(meshwarp.assemble_alignment(g, pts, geometry.apply(H, pts) + rng.normal(0, 1, pts.shape)))
    segs = rng.uniform([0, 0], g.vertices.max(axis=0), (3, 2, 2))
    system.add(meshwarp.assemble_naturalness(g, segs, rng.normal(size=(3, 3))))
    lines = []
    for _ in range(3):
        seg = rng.uniform([0, 0], g.vertices.max(axis=0), (2, 2))
        lines.append(linework.SampledLine(linework.sample_segment(seg, 15.0), rng.normal(size=2)))
    system.add(meshwarp.assemble_saliency(g, lines))
    return g, system


def dense_rows(system):
    """Dense weighted rows built straight from the blocks, without the sparse path."""
    m = sum(len(b) for b in system.blocks) + system.size
    A = np.zeros((m, system.size))
    b = np.zeros(m)
    r = 0
    for blk in system.blocks:
        s = np.sqrt(system.block_weight(blk))
        for cols, vals, rhs in zip(blk.cols, blk.vals, blk.rhs):
            np.add.at(A[r], cols, s * vals)
            b[r] = s * rhs
            r += 1
    A[r:, :] = system.tikhonov * np.eye(system.size)
    b[r:] = system.tikhonov * system.prior_vector()
    return A, b


def dense_oracle(system):
    A, b = dense_rows(system)
    N = A.T @ A
    x = np.linalg.solve(N, A.T @ b)
    for _ in range(2):
        x += np.linalg.solve(N, A.T @ (b - A @ x))
    return x


def extended_precision_oracle(system, digits=40):
    import mpmath

    A, b = dense_rows(system)
    with mpmath.workdps(digits):
        Am = mpmath.matrix(A.tolist())
        x = mpmath.lu_solve(Am.T * Am, Am.T * mpmath.matrix(b.tolist()))
        return np.array([float(v) for v in x])


@given(st.integers(0, 10_000), st.integers(2, 5), st.integers(2, 5))
@settings(max_examples=30, deadline=None)
def test_solve_matches_dense_oracle(seed, rows, cols):
    g, system = random_system(np.random.default_rng(seed), rows, cols)
    x = meshwarp.solve_linear(system)
    ref = dense_oracle(system)
    assert np.linalg.norm(x - ref) <= 1e-8 * np.linalg.norm(ref)


@pytest.mark.parametrize("seed", [0, 9, 96])
def test_solve_matches_extended_precision(seed):
    # these seeds give normal matrices with condition numbers near 1e10
    g, system = random_system(np.random.default_rng(seed), 5, 5)
    x = meshwarp.solve_linear(system)
    ref = extended_precision_oracle(system)
    assert np.linalg.norm(x - ref) <= 1e-9 * np.linalg.norm(ref)


def test_solution_is_optimal(rng):
    g, system = random_system(rng, 4, 4)
    x = meshwarp.solve_linear(system)
    e0 = system.total_energy(x, include_tikhonov=True)
    for _ in range(50):
        d = rng.normal(size=x.shape)
        d *= 1e-3 / np.linalg.norm(d)
        assert system.total_energy(x + d, include_tikhonov=True) >= e0


def test_energy_decomposition(rng):
    g, system = random_system(rng, 4, 5)
    x = meshwarp.solve_linear(system)
    A, b = system.matrix(include_tikhonov=False)
    stacked = float(np.sum((A @ x - b) ** 2))
    terms = system.term_energies(x)
    direct = sum(system.lambdas.weight(t) * e for t, e in terms.items())
    assert direct == pytest.approx(stacked, rel=1e-9)


def test_row_width_and_bandwidth(rng):
    g, system = random_system(rng, 5, 5)
    A, _ = system.matrix()
    assert np.diff(A.indptr).max() <= 24
    N = (A.T @ A).tocoo()
    assert np.abs(N.row - N.col).max() <= 2 * (2 * g.cols + 4)


def test_foldover_warns():
    g = meshwarp.build_grid(geometry.Rect(0, 0, 80, 40), 40)
    V = g.vertices.copy()
    V[[0, 1]] = V[[1, 0]]
    with pytest.warns(FoldOverWarning):
        sol = meshwarp.make_solution(g, V.ravel())
    assert len(sol.folded) >= 1
    with pytest.raises(ValueError):
        meshwarp.make_solution(g, np.full(2 * g.n, np.nan))
