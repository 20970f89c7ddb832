"""Mesh deformation as a sparse linear least-squares problem.

Every energy term is a block of linear rows over the deformed vertex vector
``V_hat = [x1, y1, x2, y2, ...]``.  Sample points enter through fixed bilinear
weights of their enclosing cell, so each term stays quadratic in ``V_hat``.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry
from .errors import FoldOverWarning, OutOfBounds, RankDeficientWarning, TooFewSamples

log = logging.getLogger(__name__)

TIKHONOV = 1e-4
ITERATIVE_ABOVE = 200_000

TERMS = ("alignment", "naturalness", "perspective", "projective", "saliency")


@dataclass(frozen=True)
class Lambdas:
    line: float = 5.0
    perspective: float = 50.0
    projective: float = 5.0
    saliency: float = 5.0

    def weight(self, term):
        return {
            "alignment": 1.0,
            "naturalness": self.line,
            "perspective": self.perspective,
            "projective": self.projective,
            "saliency": self.saliency,
        }[term]


@dataclass
class MeshGrid:
    xs: np.ndarray
    ys: np.ndarray

    @property
    def cols(self):
        return len(self.xs)

    @property
    def rows(self):
        return len(self.ys)

    @property
    def n(self):
        return self.rows * self.cols

    @property
    def vertices(self):
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    @property
    def V(self):
        return self.vertices.ravel()

    @property
    def rect(self):
        return geometry.Rect(self.xs[0], self.ys[0], self.xs[-1], self.ys[-1])

    def quads(self):
        """Vertex indices of each cell, counter-clockwise in image coordinates."""
        r, c = np.meshgrid(np.arange(self.rows - 1), np.arange(self.cols - 1), indexing="ij")
        v00 = (r * self.cols + c).ravel()
        return np.stack([v00, v00 + 1, v00 + self.cols + 1, v00 + self.cols], axis=1)


def build_grid(rect, cell=40.0):
    nx = max(1, int(np.ceil(rect.width / cell - 1e-9)))
    ny = max(1, int(np.ceil(rect.height / cell - 1e-9)))
    return MeshGrid(np.linspace(rect.x0, rect.x1, nx + 1), np.linspace(rect.y0, rect.y1, ny + 1))


@dataclass
class BilinearAnchor:
    idx: np.ndarray  # (..., 4) vertex indices
    w: np.ndarray  # (..., 4) weights summing to 1


def anchor(grid, p, tol=1e-9):
    p = np.asarray(p, dtype=float)
    pts = p.reshape(-1, 2)
    if not np.all(grid.rect.contains(pts, tol)):
        raise OutOfBounds("sample point outside the mesh")
    xs, ys = grid.xs, grid.ys
    ci = np.clip(np.searchsorted(xs, pts[:, 0], side="right") - 1, 0, grid.cols - 2)
    ri = np.clip(np.searchsorted(ys, pts[:, 1], side="right") - 1, 0, grid.rows - 2)
    u = np.clip((pts[:, 0] - xs[ci]) / (xs[ci + 1] - xs[ci]), 0.0, 1.0)
    v = np.clip((pts[:, 1] - ys[ri]) / (ys[ri + 1] - ys[ri]), 0.0, 1.0)
    v00 = ri * grid.cols + ci
    idx = np.stack([v00, v00 + 1, v00 + grid.cols, v00 + grid.cols + 1], axis=1)
    w = np.stack([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v], axis=1)
    shape = p.shape[:-1] + (4,)
    return BilinearAnchor(idx.reshape(shape), w.reshape(shape))


def interpolate(grid, V_hat, p):
    """Bilinear image of sample points under a deformed vertex vector."""
    a = anchor(grid, p)
    verts = np.asarray(V_hat).reshape(-1, 2)
    return np.einsum("...k,...kd->...d", a.w, verts[a.idx])


@dataclass
class RowBlock:
    """Rows ``sum(vals * x[cols]) - rhs`` for one energy term."""

    term: str
    cols: np.ndarray  # (R, K) int
    vals: np.ndarray  # (R, K)
    rhs: np.ndarray  # (R,)
    weight: float | None = None  # overrides the term lambda when set

    def __len__(self):
        return len(self.rhs)

    def shifted(self, offset):
        return RowBlock(self.term, self.cols + offset, self.vals, self.rhs, self.weight)

    def residual(self, x):
        return np.sum(self.vals * np.asarray(x)[self.cols], axis=1) - self.rhs

    @classmethod
    def empty(cls, term):
        return cls(term, np.zeros((0, 1), int), np.zeros((0, 1)), np.zeros(0))


def _functional(anchors, alphas, bx, by):
    """Coefficients of ``sum_m alpha_m * (bx, by) . phi(p_m)`` per row."""
    cols, vals = [], []
    for a, alpha in zip(anchors, alphas):
        s = np.asarray(alpha, float)[:, None] * a.w
        cols += [2 * a.idx, 2 * a.idx + 1]
        vals += [s * np.asarray(bx, float)[:, None], s * np.asarray(by, float)[:, None]]
    return np.concatenate(cols, axis=1), np.concatenate(vals, axis=1)


def assemble_alignment(grid, pts_a, pts_b):
    """Two rows per pair pulling the interpolated sample onto its match.

    Pairs outside the mesh are skipped with a warning.
    """
    pts_a = np.asarray(pts_a, float).reshape(-1, 2)
    pts_b = np.asarray(pts_b, float).reshape(-1, 2)
    keep = grid.rect.contains(pts_a, 1e-9)
    if not np.all(keep):
        warnings.warn(f"{np.sum(~keep)} point pairs outside the mesh skipped", stacklevel=2)
    pts_a, pts_b = pts_a[keep], pts_b[keep]
    if len(pts_a) == 0:
        return RowBlock.empty("alignment")
    a = anchor(grid, pts_a)
    one, zero = np.ones(len(pts_a)), np.zeros(len(pts_a))
    cx, vx = _functional([a], [one], one, zero)
    cy, vy = _functional([a], [one], zero, one)
    cols = np.stack([cx, cy], axis=1).reshape(-1, cx.shape[1])
    vals = np.stack([vx, vy], axis=1).reshape(-1, vx.shape[1])
    return RowBlock("alignment", cols, vals, pts_b.ravel())


def assemble_naturalness(grid, segs_a, lines_b):
    """One row per segment endpoint: signed distance to the reference line."""
    segs_a = np.asarray(segs_a, float).reshape(-1, 2, 2)
    lines_b = np.asarray(lines_b, float).reshape(-1, 3)
    if len(segs_a) == 0:
        return RowBlock.empty("naturalness")
    a = anchor(grid, segs_a.reshape(-1, 2))
    L = np.repeat(lines_b, 2, axis=0)
    cols, vals = _functional([a], [np.ones(len(L))], L[:, 0], L[:, 1])
    return RowBlock("naturalness", cols, vals, -L[:, 2])


def _slope_rows(grid, pts, normal):
    a = anchor(grid, pts)
    m = len(pts) - 1
    nx, ny = np.full(m, normal[0]), np.full(m, normal[1])
    first = BilinearAnchor(a.idx[1:], a.w[1:])
    second = BilinearAnchor(a.idx[:-1], a.w[:-1])
    return _functional([first, second], [np.ones(m), -np.ones(m)], nx, ny)


def _second_difference_rows(grid, pts):
    a = anchor(grid, pts)
    m = len(pts) - 2
    parts = [BilinearAnchor(a.idx[k : k + m], a.w[k : k + m]) for k in range(3)]
    alphas = [np.ones(m), -2 * np.ones(m), np.ones(m)]
    one, zero = np.ones(m), np.zeros(m)
    cx, vx = _functional(parts, alphas, one, zero)
    cy, vy = _functional(parts, alphas, zero, one)
    cols = np.stack([cx, cy], axis=1).reshape(-1, cx.shape[1])
    vals = np.stack([vx, vy], axis=1).reshape(-1, vx.shape[1])
    return cols, vals


def _stack(term, parts):
    parts = [p for p in parts if len(p[0])]
    if not parts:
        return RowBlock.empty(term)
    width = max(c.shape[1] for c, _ in parts)
    cols = np.concatenate([np.pad(c, ((0, 0), (0, width - c.shape[1]))) for c, _ in parts])
    vals = np.concatenate([np.pad(v, ((0, 0), (0, width - v.shape[1]))) for _, v in parts])
    return RowBlock(term, cols, vals, np.zeros(len(cols)))


def assemble_perspective(grid, samples):
    """Slope rows on both cross-line families and ratio rows on v-lines."""
    parts = []
    for line in samples.u_lines:
        if len(line.points) < 2:
            log.debug("u-line with %d samples skipped", len(line.points))
            continue
        parts.append(_slope_rows(grid, line.points, line.normal))
    for line in samples.v_lines:
        if len(line.points) < 2:
            log.debug("v-line with %d samples skipped", len(line.points))
            continue
        parts.append(_slope_rows(grid, line.points, line.normal))
        if len(line.points) >= 3:
            parts.append(_second_difference_rows(grid, line.points))
    return _stack("perspective", parts)


def _runs(mask):
    """Maximal runs of consecutive True entries as (start, stop) pairs."""
    edges = np.diff(np.concatenate([[0], mask.astype(int), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def assemble_projective(grid, samples):
    """Second differences along u-lines, restricted to samples inside omega."""
    parts = []
    for line in samples.u_lines:
        for start, stop in _runs(np.asarray(line.in_omega, bool)):
            if stop - start >= 3:
                parts.append(_second_difference_rows(grid, line.points[start:stop]))
    return _stack("projective", parts)


def assemble_saliency(grid, segments):
    """Slope rows along each sampled salient segment (``points``, ``normal``)."""
    parts = []
    for seg in segments:
        if len(seg.points) < 2:
            raise TooFewSamples("salient segment needs at least two samples")
        parts.append(_slope_rows(grid, seg.points, seg.normal))
    return _stack("saliency", parts)


@dataclass
class EnergySystem:
    size: int  # number of unknowns
    blocks: list = field(default_factory=list)
    lambdas: Lambdas = field(default_factory=Lambdas)
    prior: np.ndarray | None = None  # Tikhonov target; rest positions if None
    tikhonov: float = TIKHONOV

    def add(self, block):
        if len(block):
            self.blocks.append(block)
        return self

    def block_weight(self, block):
        return self.lambdas.weight(block.term) if block.weight is None else block.weight

    def matrix(self, include_tikhonov=True):
        """Stacked ``sqrt(lambda)``-scaled sparse matrix and right-hand side."""
        rows, cols, vals, rhs = [], [], [], []
        offset = 0
        for b in self.blocks:
            s = np.sqrt(self.block_weight(b))
            R, K = b.cols.shape
            rows.append(np.repeat(np.arange(offset, offset + R), K))
            cols.append(b.cols.ravel())
            vals.append(s * b.vals.ravel())
            rhs.append(s * b.rhs)
            offset += R
        if include_tikhonov and self.tikhonov > 0:
            rows.append(np.arange(offset, offset + self.size))
            cols.append(np.arange(self.size))
            vals.append(np.full(self.size, self.tikhonov))
            rhs.append(self.tikhonov * self.prior_vector())
            offset += self.size
        if not rows:
            return sp.csr_matrix((0, self.size)), np.zeros(0)
        A = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(offset, self.size),
        ).tocsr()
        return A, np.concatenate(rhs)

    def prior_vector(self):
        if self.prior is None:
            raise ValueError("energy system needs a Tikhonov prior vector")
        return np.asarray(self.prior, float)

    def term_energies(self, x):
        """Unweighted energy of each term at ``x``."""
        out = dict.fromkeys(TERMS, 0.0)
        for b in self.blocks:
            out[b.term] = out.get(b.term, 0.0) + float(np.sum(b.residual(x) ** 2))
        return out

    def total_energy(self, x, include_tikhonov=False):
        e = sum(self.block_weight(b) * float(np.sum(b.residual(x) ** 2)) for b in self.blocks)
        if include_tikhonov:
            e += self.tikhonov**2 * float(np.sum((np.asarray(x) - self.prior_vector()) ** 2))
        return e


def mesh_system(grid, prior_vertices=None, lambdas=None):
    """Empty system over one mesh, Tikhonov-anchored at ``prior_vertices``."""
    prior = grid.V if prior_vertices is None else np.asarray(prior_vertices, float).ravel()
    return EnergySystem(2 * grid.n, [], lambdas or Lambdas(), prior)


def solve_linear(system):
    """Minimise the stacked quadratic; returns the unknown vector."""
    A0, _ = system.matrix(include_tikhonov=False)
    touched = np.asarray(abs(A0).sum(axis=0)).ravel() > 0
    if not np.all(touched):
        warnings.warn(
            f"{np.sum(~touched)} unknowns have no energy rows; held by the prior",
            RankDeficientWarning,
            stacklevel=3,
        )
    A, b = system.matrix()
    N = (A.T @ A).tocsc()
    rhs = A.T @ b
    if system.size <= ITERATIVE_ABOVE:
        lu = spla.splu(N)
        x = lu.solve(rhs)
        # corrected semi-normal equations: refine with the residual of A itself,
        # which recovers the accuracy lost by squaring the condition number
        for _ in range(2):
            x += lu.solve(A.T @ (b - A @ x))
    else:
        x, info = spla.cg(N, rhs, x0=system.prior_vector(), rtol=1e-12, maxiter=10 * system.size)
        if info:
            log.warning("conjugate gradient stopped early (info=%d)", info)
    return x


@dataclass
class WarpSolution:
    grid: MeshGrid
    V_hat: np.ndarray
    folded: np.ndarray  # indices of quads with non-positive signed area

    @property
    def vertices(self):
        return self.V_hat.reshape(-1, 2)

    def warp_points(self, p):
        return interpolate(self.grid, self.V_hat, p)


def signed_areas(grid, V_hat):
    q = np.asarray(V_hat).reshape(-1, 2)[grid.quads()]
    x, y = q[..., 0], q[..., 1]
    return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)


def make_solution(grid, V_hat):
    V_hat = np.asarray(V_hat, float)
    if not np.all(np.isfinite(V_hat)):
        raise ValueError("non-finite vertex positions")
    folded = np.flatnonzero(signed_areas(grid, V_hat) <= 0)
    if len(folded):
        warnings.warn(f"{len(folded)} mesh cells fold over", FoldOverWarning, stacklevel=2)
    return WarpSolution(grid, V_hat, folded)


def solve(system, grid):
    return make_solution(grid, solve_linear(system)[: 2 * grid.n])
