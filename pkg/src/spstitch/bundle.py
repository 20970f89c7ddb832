"""Point + line bundle adjustment over homographies, and the joint mesh system.

Each non-reference image ``k`` carries a homography ``H_k`` mapping
reference-frame coordinates into image ``k``; the reference stays at the
identity.  Latent features live in the reference frame.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import dijkstra

from . import geometry, meshwarp
from .errors import DegenerateConfiguration, DisconnectedGraph, NonConvergenceWarning

log = logging.getLogger(__name__)

SENTINEL = 1e6


@dataclass
class MultiViewFeatures:
    """Observations keyed by feature identity: ``{id: {image: coords}}``.

    Point coords are ``(2,)``; line coords are ``(2, 2)`` segments.
    """

    n_images: int
    points: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)

    def match_counts(self):
        C = np.zeros((self.n_images, self.n_images), int)
        for obs in list(self.points.values()) + list(self.lines.values()):
            ks = sorted(obs)
            for a in ks:
                for b in ks:
                    if a != b:
                        C[a, b] += 1
        return C

    def shared(self, a, b):
        pa = [self.points[i][a] for i in self.points if a in self.points[i] and b in self.points[i]]
        pb = [self.points[i][b] for i in self.points if a in self.points[i] and b in self.points[i]]
        la = [self.lines[j][a] for j in self.lines if a in self.lines[j] and b in self.lines[j]]
        lb = [self.lines[j][b] for j in self.lines if a in self.lines[j] and b in self.lines[j]]
        return (
            np.asarray(pa, float).reshape(-1, 2),
            np.asarray(pb, float).reshape(-1, 2),
            np.asarray(la, float).reshape(-1, 2, 2),
            np.asarray(lb, float).reshape(-1, 2, 2),
        )


@dataclass
class BundleProblem:
    n_images: int
    ref: int
    point_ids: list
    line_ids: list
    # one row per observation
    pt_feature: np.ndarray  # (P,) latent point index
    pt_image: np.ndarray  # (P,)
    pt_xy: np.ndarray  # (P, 2)
    ln_feature: np.ndarray  # (Q,)
    ln_image: np.ndarray  # (Q,)
    ln_eq: np.ndarray  # (Q, 3) observed line in its image, a^2 + b^2 = 1
    ln_seg: np.ndarray  # (Q, 2, 2) observed segment
    lengths: np.ndarray  # (M,) anti-collapse length per latent line
    theta0: np.ndarray

    @property
    def free_images(self):
        return [k for k in range(self.n_images) if k != self.ref]

    @property
    def n_points(self):
        return len(self.point_ids)

    @property
    def n_lines(self):
        return len(self.line_ids)

    @property
    def pt_counts(self):
        return np.bincount(self.pt_feature, minlength=self.n_points)

    @property
    def ln_counts(self):
        return np.bincount(self.ln_feature, minlength=self.n_lines)

    def unpack(self, theta):
        """Homographies ``(K, 3, 3)``, latent points ``(N, 2)``, endpoints ``(M, 2, 2)``."""
        theta = np.asarray(theta, float)
        K = self.n_images
        Hs = np.tile(np.eye(3), (K, 1, 1))
        nh = 8 * (K - 1)
        for slot, k in enumerate(self.free_images):
            Hs[k] = np.append(theta[8 * slot : 8 * slot + 8], 1.0).reshape(3, 3)
        X = theta[nh : nh + 2 * self.n_points].reshape(-1, 2)
        Y = theta[nh + 2 * self.n_points :].reshape(-1, 2, 2)
        return Hs, X, Y

    def pack(self, Hs, X, Y):
        hs = [geometry.normalize_homography(Hs[k]).ravel()[:8] for k in self.free_images]
        return np.concatenate(hs + [np.asarray(X, float).ravel(), np.asarray(Y, float).ravel()])


def _pairwise(features, a, b):
    pa, pb, la, lb = features.shared(a, b)
    lines_b = geometry.segment_line(lb) if len(lb) else np.zeros((0, 3))
    return geometry.estimate_dlt(pa, pb, la, lines_b)


def chain_homographies(features, ref):
    """Reference-to-image homographies composed along strongest match paths."""
    C = features.match_counts()
    K = features.n_images
    pair_h = {}
    W = np.zeros((K, K))
    for a in range(K):
        for b in range(a + 1, K):
            if C[a, b] == 0:
                continue
            try:
                pair_h[a, b] = _pairwise(features, a, b)
                pair_h[b, a] = geometry.invert(pair_h[a, b])
            except DegenerateConfiguration:
                continue
            W[a, b] = W[b, a] = 1.0 / C[a, b]
    dist, pred = dijkstra(sp.csr_matrix(W), directed=False, indices=ref, return_predecessors=True)
    unreachable = [k for k in range(K) if not np.isfinite(dist[k])]
    if unreachable:
        raise DisconnectedGraph(unreachable)
    Hs = np.tile(np.eye(3), (K, 1, 1))
    for k in range(K):
        H = np.eye(3)
        node = k
        while node != ref:
            prev = pred[node]
            H = H @ pair_h[prev, node]
            node = prev
        Hs[k] = geometry.normalize_homography(H)
    return Hs


def build_problem(features, ref):
    if not 0 <= ref < features.n_images:
        raise IndexError(f"reference index {ref} out of range")
    Hs = chain_homographies(features, ref)
    Hinv = [geometry.invert(H) for H in Hs]

    point_ids = sorted(features.points)
    pt_f, pt_k, pt_xy, X = [], [], [], []
    for i, pid in enumerate(point_ids):
        proj = []
        for k, xy in sorted(features.points[pid].items()):
            pt_f.append(i)
            pt_k.append(k)
            pt_xy.append(xy)
            proj.append(geometry.apply(Hinv[k], np.asarray(xy, float)))
        X.append(np.mean(proj, axis=0))

    line_ids = sorted(features.lines)
    ln_f, ln_k, ln_seg, Y = [], [], [], []
    for j, lid in enumerate(line_ids):
        ends = []
        for k, seg in sorted(features.lines[lid].items()):
            seg = np.asarray(seg, float)
            ln_f.append(j)
            ln_k.append(k)
            ln_seg.append(seg)
            q = geometry.apply(Hinv[k], seg)
            if ends and np.linalg.norm(q[0] - ends[0][1]) < np.linalg.norm(q[0] - ends[0][0]):
                q = q[::-1]
            ends.append(q)
        Y.append(np.mean(ends, axis=0))
    Y = np.asarray(Y, float).reshape(-1, 2, 2)
    ln_seg = np.asarray(ln_seg, float).reshape(-1, 2, 2)

    proto = BundleProblem(
        n_images=features.n_images,
        ref=ref,
        point_ids=point_ids,
        line_ids=line_ids,
        pt_feature=np.asarray(pt_f, int),
        pt_image=np.asarray(pt_k, int),
        pt_xy=np.asarray(pt_xy, float).reshape(-1, 2),
        ln_feature=np.asarray(ln_f, int),
        ln_image=np.asarray(ln_k, int),
        ln_eq=geometry.segment_line(ln_seg) if len(ln_seg) else np.zeros((0, 3)),
        ln_seg=ln_seg,
        lengths=np.linalg.norm(Y[:, 0] - Y[:, 1], axis=1),
        theta0=np.zeros(0),
    )
    proto.theta0 = proto.pack(Hs, np.asarray(X, float).reshape(-1, 2), Y)
    return proto


def _project(Hs, k, pts):
    """Map points through per-observation homographies; flags points at infinity."""
    H = Hs[k]
    x, y = pts[:, 0], pts[:, 1]
    u = H[:, 0, 0] * x + H[:, 0, 1] * y + H[:, 0, 2]
    v = H[:, 1, 0] * x + H[:, 1, 1] * y + H[:, 1, 2]
    w = H[:, 2, 0] * x + H[:, 2, 1] * y + H[:, 2, 2]
    bad = np.abs(w) <= geometry.DENOM_TOL
    w = np.where(bad, 1.0, w)
    return u, v, w, bad


def residuals(problem, theta):
    """Stacked residuals whose squared norm is the bundle energy."""
    Hs, X, Y = problem.unpack(theta)
    out = []

    u, v, w, bad = _project(Hs, problem.pt_image, X[problem.pt_feature])
    hit = bool(np.any(bad))
    s = np.sqrt(problem.pt_counts[problem.pt_feature])
    r = (problem.pt_xy - np.stack([u / w, v / w], axis=1)) / s[:, None]
    r[bad] = SENTINEL
    out.append(r.ravel())

    s = np.sqrt(problem.ln_counts[problem.ln_feature])
    for end in (0, 1):
        u, v, w, bad = _project(Hs, problem.ln_image, Y[problem.ln_feature, end])
        n = problem.ln_eq
        r = (n[:, 0] * u / w + n[:, 1] * v / w + n[:, 2]) / s
        r[bad] = SENTINEL
        hit |= bool(np.any(bad))
        out.append(r)
    rl = np.stack(out[1:], axis=1).ravel()

    length = np.linalg.norm(Y[:, 0] - Y[:, 1], axis=1) - problem.lengths
    if hit:
        log.warning("bundle residual hit a point at infinity")
    return np.concatenate([out[0], rl, length])


def jacobian(problem, theta):
    """Analytic sparse Jacobian of :func:`residuals`."""
    Hs, X, Y = problem.unpack(theta)
    free = {k: slot for slot, k in enumerate(problem.free_images)}
    nh = 8 * len(free)
    rows, cols, vals = [], [], []

    def h_block(row_ids, k, x, y, u, v, w, cx, cy):
        # d(cx * f + cy * g)/dh for observations in images other than the reference
        slot = np.array([free.get(kk, -1) for kk in k])
        m = slot >= 0
        if not np.any(m):
            return
        w2 = w * w
        dh = np.stack(
            [
                cx * x / w, cx * y / w, cx / w,
                cy * x / w, cy * y / w, cy / w,
                -(cx * u + cy * v) * x / w2, -(cx * u + cy * v) * y / w2,
            ],
            axis=1,
        )
        rows.append(np.repeat(row_ids[m], 8))
        cols.append((8 * slot[m, None] + np.arange(8)).ravel())
        vals.append(dh[m].ravel())

    def xy_block(row_ids, k, u, v, w, cx, cy, col0):
        H = Hs[k]
        w2 = w * w
        dfx = (H[:, 0, 0] * w - u * H[:, 2, 0]) / w2
        dfy = (H[:, 0, 1] * w - u * H[:, 2, 1]) / w2
        dgx = (H[:, 1, 0] * w - v * H[:, 2, 0]) / w2
        dgy = (H[:, 1, 1] * w - v * H[:, 2, 1]) / w2
        rows.append(np.repeat(row_ids, 2))
        cols.append(np.stack([col0, col0 + 1], axis=1).ravel())
        vals.append(np.stack([cx * dfx + cy * dgx, cx * dfy + cy * dgy], axis=1).ravel())

    P = len(problem.pt_feature)
    i = problem.pt_feature
    k = problem.pt_image
    pts = X[i]
    u, v, w, _ = _project(Hs, k, pts)
    s = np.sqrt(problem.pt_counts[i])
    for axis in (0, 1):
        row_ids = 2 * np.arange(P) + axis
        cx = -(1.0 - axis) / s
        cy = -float(axis) / s
        h_block(row_ids, k, pts[:, 0], pts[:, 1], u, v, w, cx, cy)
        xy_block(row_ids, k, u, v, w, cx, cy, nh + 2 * i)

    base = 2 * P
    Q = len(problem.ln_feature)
    j = problem.ln_feature
    k = problem.ln_image
    s = np.sqrt(problem.ln_counts[j])
    for end in (0, 1):
        pts = Y[j, end]
        u, v, w, _ = _project(Hs, k, pts)
        row_ids = base + 2 * np.arange(Q) + end
        cx = problem.ln_eq[:, 0] / s
        cy = problem.ln_eq[:, 1] / s
        h_block(row_ids, k, pts[:, 0], pts[:, 1], u, v, w, cx, cy)
        xy_block(row_ids, k, u, v, w, cx, cy, nh + 2 * problem.n_points + 4 * j + 2 * end)

    base += 2 * Q
    M = problem.n_lines
    diff = Y[:, 0] - Y[:, 1]
    norm = np.linalg.norm(diff, axis=1).clip(1e-12)
    g = diff / norm[:, None]
    col0 = nh + 2 * problem.n_points + 4 * np.arange(M)
    rows.append(np.repeat(base + np.arange(M), 4))
    cols.append((col0[:, None] + np.arange(4)).ravel())
    vals.append(np.concatenate([g, -g], axis=1).ravel())

    n_rows = base + M
    if not rows:
        return sp.csr_matrix((n_rows, len(theta)))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rows, len(theta)),
    ).tocsr()


def numeric_jacobian(problem, theta, step=1e-6):
    """Central differences, for verifying :func:`jacobian`."""
    theta = np.asarray(theta, float)
    cols = []
    for c in range(len(theta)):
        h = step * max(1.0, abs(theta[c]))
        tp, tm = theta.copy(), theta.copy()
        tp[c] += h
        tm[c] -= h
        cols.append((residuals(problem, tp) - residuals(problem, tm)) / (2 * h))
    return np.stack(cols, axis=1)


def energy(problem, theta):
    r = residuals(problem, theta)
    return float(r @ r)


@dataclass(frozen=True)
class LmConfig:
    initial_damping: float = 1e-3  # scales the normal-matrix diagonal
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_iterations: int = 200
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    energy_tol: float = 1e-6  # relative decrease of an accepted step

    def __post_init__(self):
        if self.initial_damping <= 0:
            raise ValueError("damping must be positive")


@dataclass
class LmResult:
    theta: np.ndarray
    energies: list  # energy after each accepted step, starting from the initial value
    iterations: int
    converged: bool
    reason: str


def lm_solve(problem, cfg=LmConfig(), theta0=None):
    theta = np.array(problem.theta0 if theta0 is None else theta0, dtype=float)
    r = residuals(problem, theta)
    E = float(r @ r)
    energies = [E]
    J = jacobian(problem, theta)
    JtJ = (J.T @ J).tocsc()
    mu = cfg.initial_damping
    reason = "max_iterations"
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) < cfg.gradient_tol:
            reason = "gradient"
            break
        accepted = False
        small_step = False
        while mu < 1e30:
            # Marquardt scaling; the floor keeps columns with no rows solvable
            D = sp.diags(np.maximum(JtJ.diagonal(), 1e-12 * (1.0 + JtJ.diagonal().max())))
            delta = spla.spsolve((JtJ + mu * D).tocsc(), -g)
            if np.linalg.norm(delta) < cfg.step_tol * (np.linalg.norm(theta) + cfg.step_tol):
                small_step = True
                break
            cand = theta + delta
            rc = residuals(problem, cand)
            Ec = float(rc @ rc)
            if Ec < E:
                small_step = E - Ec <= cfg.energy_tol * E
                theta, r, E = cand, rc, Ec
                mu /= cfg.damping_down
                accepted = True
                break
            mu *= cfg.damping_up
        if small_step and accepted:
            energies.append(E)
            reason = "energy"
            break
        if small_step:
            reason = "step"
            break
        if not accepted:
            reason = "damping"
            break
        energies.append(E)
        J = jacobian(problem, theta)
        JtJ = (J.T @ J).tocsc()
    # "damping": no step decreases the energy at any damping, i.e. stationary
    # to rounding
    converged = reason in ("gradient", "step", "energy", "damping")
    if not converged:
        warnings.warn(f"bundle adjustment stopped on {reason}", NonConvergenceWarning, stacklevel=2)
    return LmResult(theta, energies, it, converged, reason)


@dataclass
class JointLayout:
    """Column offsets of each mesh and of the shared intermediates."""

    mesh_offset: dict  # image -> offset (only for free meshes)
    point_offset: int | None
    line_offset: int | None
    size: int


def joint_layout(grids, problem, freeze_ref=True, freeze_intermediates=False):
    offsets = {}
    size = 0
    for k, grid in enumerate(grids):
        if freeze_ref and k == problem.ref:
            continue
        offsets[k] = size
        size += 2 * grid.n
    p_off = l_off = None
    if not freeze_intermediates:
        p_off = size
        size += 2 * problem.n_points
        l_off = size
        size += problem.n_lines
    return JointLayout(offsets, p_off, l_off, size)


def reference_lines(Y):
    """Normalised lines through optimised reference-frame endpoints."""
    return geometry.segment_line(Y) if len(Y) else np.zeros((0, 3))


def assemble_multi_alignment(grids, problem, theta, layout):
    """Alignment and naturalness rows coupling meshes to shared intermediates.

    Returns the row blocks and the Tikhonov prior of the intermediate unknowns.
    """
    _, X, Y = problem.unpack(theta)
    ref_lines = reference_lines(Y)
    blocks = []
    skipped = 0

    def outside(k, p):
        return k in layout.mesh_offset and not np.all(grids[k].rect.contains(np.reshape(p, (-1, 2)), 1e-9))

    cols, vals, rhs = [], [], []
    counts = problem.pt_counts
    for obs in range(len(problem.pt_feature)):
        i, k = problem.pt_feature[obs], problem.pt_image[obs]
        p = problem.pt_xy[obs]
        if outside(k, p):
            skipped += 1
            continue
        s = 1.0 / np.sqrt(counts[i])
        for axis in (0, 1):
            c, v, b = [], [], 0.0
            if k in layout.mesh_offset:
                a = meshwarp.anchor(grids[k], p)
                c += list(layout.mesh_offset[k] + 2 * a.idx + axis)
                v += list(a.w)
            else:
                b -= p[axis]
            if layout.point_offset is not None:
                c.append(layout.point_offset + 2 * i + axis)
                v.append(-1.0)
            else:
                b += X[i, axis]
            cols.append(c)
            vals.append(np.asarray(v) * s)
            rhs.append(b * s)
    blocks.append(_ragged("alignment", cols, vals, rhs))

    cols, vals, rhs = [], [], []
    counts = problem.ln_counts
    for obs in range(len(problem.ln_feature)):
        j, k = problem.ln_feature[obs], problem.ln_image[obs]
        n = ref_lines[j]
        if outside(k, problem.ln_seg[obs]):
            skipped += 1
            continue
        s = 1.0 / np.sqrt(counts[j])
        for end in problem.ln_seg[obs]:
            c, v, b = [], [], 0.0
            if k in layout.mesh_offset:
                a = meshwarp.anchor(grids[k], end)
                off = layout.mesh_offset[k]
                c += list(off + 2 * a.idx) + list(off + 2 * a.idx + 1)
                v += list(n[0] * a.w) + list(n[1] * a.w)
            else:
                b -= n[:2] @ end
            if layout.line_offset is not None:
                c.append(layout.line_offset + j)
                v.append(1.0)
            else:
                b -= n[2]
            cols.append(c)
            vals.append(np.asarray(v) * s)
            rhs.append(b * s)
    blocks.append(_ragged("naturalness", cols, vals, rhs))
    if skipped:
        warnings.warn(f"{skipped} observations outside their mesh skipped", stacklevel=2)

    prior = np.concatenate([X.ravel(), ref_lines[:, 2]]) if layout.point_offset is not None else None
    return [b for b in blocks if len(b)], prior


def _ragged(term, cols, vals, rhs):
    if not cols:
        return meshwarp.RowBlock.empty(term)
    width = max(len(c) for c in cols)
    C = np.zeros((len(cols), width), int)
    V = np.zeros((len(cols), width))
    for r, (c, v) in enumerate(zip(cols, vals)):
        C[r, : len(c)] = c
        V[r, : len(v)] = v
    return meshwarp.RowBlock(term, C, V, np.asarray(rhs, float))


def joint_solve(grids, layout, blocks, mesh_priors, intermediate_prior=None, lambdas=None):
    """Single sparse solve over every free mesh plus intermediates.

    ``mesh_priors`` maps image index to its prior vertex positions; frozen
    meshes come back at rest.
    """
    prior = np.zeros(layout.size)
    for k, off in layout.mesh_offset.items():
        prior[off : off + 2 * grids[k].n] = np.asarray(mesh_priors[k], float).ravel()
    if layout.point_offset is not None:
        prior[layout.point_offset :] = intermediate_prior
    system = meshwarp.EnergySystem(layout.size, list(blocks), lambdas or meshwarp.Lambdas(), prior)
    x = meshwarp.solve_linear(system)
    sols = []
    for k, grid in enumerate(grids):
        if k in layout.mesh_offset:
            off = layout.mesh_offset[k]
            sols.append(meshwarp.make_solution(grid, x[off : off + 2 * grid.n]))
        else:
            sols.append(meshwarp.make_solution(grid, grid.V))
    return sols, x, system
