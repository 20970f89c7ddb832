"""Planar projective geometry: homographies, lines and dual-feature DLT.

Conventions used throughout the package:

* points are ``(x, y)`` pairs, stacked as ``(N, 2)`` arrays;
* a homography is a 3x3 array normalised so that ``H[2, 2] == 1``;
* a line is ``(a, b, c)`` with ``a*x + b*y + c = 0`` and ``a**2 + b**2 == 1``;
* a segment is a ``(2, 2)`` array holding its start and end point.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, PointAtInfinity, SingularHomography

DENOM_TOL = 1e-12


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle ``[x0, x1] x [y0, y1]``."""

    x0: float
    y0: float
    x1: float
    y1: float

    @classmethod
    def from_image(cls, width, height):
        # pixel centres sit on integer coordinates
        return cls(0.0, 0.0, float(width - 1), float(height - 1))

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    def corners(self):
        return np.array(
            [[self.x0, self.y0], [self.x1, self.y0], [self.x1, self.y1], [self.x0, self.y1]]
        )

    def contains(self, pts, tol=0.0):
        pts = np.atleast_2d(pts)
        return (
            (pts[:, 0] >= self.x0 - tol)
            & (pts[:, 0] <= self.x1 + tol)
            & (pts[:, 1] >= self.y0 - tol)
            & (pts[:, 1] <= self.y1 + tol)
        )


def _points(p):
    p = np.asarray(p, dtype=float)
    return p.reshape(-1, 2), p.shape


def normalize_homography(M):
    """Scale a 3x3 matrix so that its bottom-right entry is 1."""
    M = np.asarray(M, dtype=float)
    big = np.max(np.abs(M))
    if big == 0 or not np.isfinite(big):
        raise DegenerateConfiguration("homography matrix is zero or non-finite")
    M = M / big
    if abs(M[2, 2]) < 1e-12:
        raise DegenerateConfiguration("h9 vanishes; origin maps to infinity")
    return M / M[2, 2]


def translation(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def apply(H, p):
    """Map points through ``H``; keeps the input shape."""
    pts, shape = _points(p)
    H = np.asarray(H, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if np.any(np.abs(w) <= DENOM_TOL):
        raise PointAtInfinity("point maps to infinity")
    u = H[0, 0] * x + H[0, 1] * y + H[0, 2]
    v = H[1, 0] * x + H[1, 1] * y + H[1, 2]
    return np.stack([u / w, v / w], axis=1).reshape(shape)


def jacobian(H, p):
    """Partial derivatives ``(f_x, f_y, g_x, g_y)`` of the homography map.

    Returns an ``(N, 4)`` array for stacked points, a length-4 array for one point.
    """
    pts, shape = _points(p)
    H = np.asarray(H, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    if np.any(np.abs(w) <= DENOM_TOL):
        raise PointAtInfinity("point maps to infinity")
    u = H[0, 0] * x + H[0, 1] * y + H[0, 2]
    v = H[1, 0] * x + H[1, 1] * y + H[1, 2]
    w2 = w * w
    J = np.stack(
        [
            (H[0, 0] * w - u * H[2, 0]) / w2,
            (H[0, 1] * w - u * H[2, 1]) / w2,
            (H[1, 0] * w - v * H[2, 0]) / w2,
            (H[1, 1] * w - v * H[2, 1]) / w2,
        ],
        axis=1,
    )
    return J[0] if len(shape) == 1 else J


def invert(H):
    H = np.asarray(H, dtype=float)
    if abs(np.linalg.det(H / np.max(np.abs(H)))) < 1e-12:
        raise SingularHomography("homography is singular")
    return normalize_homography(np.linalg.inv(H))


def normalize_line(l):
    l = np.asarray(l, dtype=float)
    n = np.hypot(l[..., 0], l[..., 1])
    if np.any(n < 1e-15):
        raise DegenerateConfiguration("line has no direction")
    return l / n[..., None]


def line_through(p, q):
    """Normalised line through two points (or stacked pairs)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    ph = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    qh = np.concatenate([q, np.ones(q.shape[:-1] + (1,))], axis=-1)
    return normalize_line(np.cross(ph, qh))


def segment_line(seg):
    """Line equation(s) supporting a ``(2, 2)`` segment or ``(M, 2, 2)`` stack."""
    seg = np.asarray(seg, dtype=float)
    return line_through(seg[..., 0, :], seg[..., 1, :])


def transfer_line(H, l):
    """Image of a line under ``H``: ``H^-T l``, renormalised."""
    H = np.asarray(H, dtype=float)
    if abs(np.linalg.det(H / np.max(np.abs(H)))) < 1e-12:
        raise SingularHomography("homography is singular")
    l = np.asarray(l, dtype=float)
    out = np.linalg.solve(H.T, l.reshape(-1, 3).T).T
    return normalize_line(out).reshape(l.shape)


def hartley_transform(pts):
    """Similarity taking ``pts`` to zero centroid and mean radius sqrt(2)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.eye(3)
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


@dataclass
class DltSystem:
    """Hartley-normalised design matrix plus what is needed to undo it.

    ``row_sites`` holds, for each row, two image locations in the target frame;
    moving-DLT weights use the nearer of the two.
    """

    A: np.ndarray
    T_target: np.ndarray
    T_ref: np.ndarray
    row_sites: np.ndarray


def dlt_system(pts_a=None, pts_b=None, segs_a=None, lines_b=None):
    """Stack point rows and endpoint-on-line rows for the 9 entries of ``H``.

    ``pts_a -> pts_b`` are target/reference points; each target segment in
    ``segs_a`` must land on the matching reference line in ``lines_b``.
    """
    pts_a = np.zeros((0, 2)) if pts_a is None else np.asarray(pts_a, float).reshape(-1, 2)
    pts_b = np.zeros((0, 2)) if pts_b is None else np.asarray(pts_b, float).reshape(-1, 2)
    segs_a = np.zeros((0, 2, 2)) if segs_a is None else np.asarray(segs_a, float).reshape(-1, 2, 2)
    lines_b = np.zeros((0, 3)) if lines_b is None else np.asarray(lines_b, float).reshape(-1, 3)
    if len(pts_a) != len(pts_b) or len(segs_a) != len(lines_b):
        raise ValueError("correspondence arrays have mismatched lengths")

    T1 = hartley_transform(np.concatenate([pts_a, segs_a.reshape(-1, 2)]))
    if len(pts_b) > 0:
        T2 = hartley_transform(pts_b)
    else:
        # lines only: condition on the feet of the perpendiculars from the origin
        T2 = hartley_transform(-lines_b[:, :2] * lines_b[:, 2:3])

    def to_norm(T, p):
        return p @ T[:2, :2].T + T[:2, 2]

    a = to_norm(T1, pts_a)
    b = to_norm(T2, pts_b)
    rows = []
    for (x, y), (u, v) in zip(a, b):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])

    ln = np.linalg.solve(T2.T, lines_b.T).T if len(lines_b) else lines_b
    if len(ln):
        ln = normalize_line(ln)
    ends = to_norm(T1, segs_a.reshape(-1, 2)).reshape(-1, 2, 2)
    for seg, (la, lb, lc) in zip(ends, ln):
        for x, y in seg:
            rows.append([la * x, la * y, la, lb * x, lb * y, lb, lc * x, lc * y, lc])

    sites = [np.stack([p, p]) for p in pts_a for _ in range(2)]
    sites += [s for s in segs_a for _ in range(2)]
    A = np.asarray(rows, dtype=float).reshape(-1, 9)
    return DltSystem(A, T1, T2, np.asarray(sites, dtype=float).reshape(-1, 2, 2))


def solve_dlt(system, weights=None):
    """Smallest right singular vector of the (row-weighted) design matrix."""
    A = system.A if weights is None else system.A * np.asarray(weights)[:, None]
    if A.shape[0] < 8:
        raise DegenerateConfiguration(f"need 8 constraint rows, got {A.shape[0]}")
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    s = np.concatenate([s, np.zeros(9 - len(s))]) if len(s) < 9 else s
    if s[7] < 1e-10 * s[0]:
        raise DegenerateConfiguration("design matrix has a multi-dimensional null space")
    Hn = Vt[-1].reshape(3, 3)
    return normalize_homography(np.linalg.inv(system.T_ref) @ Hn @ system.T_target)


def estimate_dlt(pts_a=None, pts_b=None, segs_a=None, lines_b=None):
    """Dual-feature DLT: least algebraic error over point and line rows."""
    return solve_dlt(dlt_system(pts_a, pts_b, segs_a, lines_b))


def transfer_errors(H, pts_a, pts_b):
    return np.linalg.norm(apply(H, pts_a) - np.asarray(pts_b, float), axis=-1)
