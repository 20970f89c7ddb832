"""Quasi-homography warp built on the invariant-slope cross-line frame.

Slopes are carried as direction vectors ``(dx, dy)`` so that vertical lines
need no special casing; :func:`slope_value` converts to a real slope.
"""

from dataclasses import dataclass

import numpy as np
from shapely.geometry import MultiPoint, Polygon, box

from . import apap, geometry
from .errors import AffineWarp, NoNonOverlap, ParallelConstraintLines


def direction(k):
    """Unit direction for a slope given as a real, ``inf`` or a 2-vector."""
    if np.ndim(k) == 0:
        d = np.array([0.0, 1.0]) if np.isinf(k) else np.array([1.0, float(k)])
    else:
        d = np.asarray(k, dtype=float)
    n = np.linalg.norm(d)
    if n == 0:
        raise ValueError("zero direction")
    d = d / n
    # canonical sign: dx > 0, or pointing down for vertical
    if d[0] < 0 or (d[0] == 0 and d[1] < 0):
        d = -d
    return d


def slope_value(d):
    d = np.asarray(d, dtype=float)
    return np.inf if d[0] == 0 else d[1] / d[0]


def perpendicular(d):
    return direction(np.array([-d[1], d[0]]))


def slope_transfer(H, p, k):
    """Direction in the reference of the line through ``p`` with slope ``k``."""
    d = direction(k)
    J = geometry.jacobian(H, p)
    if J.ndim == 1:
        fx, fy, gx, gy = J
        return direction(np.array([fx * d[0] + fy * d[1], gx * d[0] + gy * d[1]]))
    return np.array([direction(j[:2] @ d * np.array([1, 0]) + j[2:] @ d * np.array([0, 1])) for j in J])


def invariant_slopes(H):
    """The slope family kept parallel by ``H`` and its image slope.

    Lines parallel to the horizon ``h7 x + h8 y + 1 = 0`` stay parallel; their
    image direction is the same everywhere.
    """
    H = geometry.normalize_homography(H)
    h1, h2, _, h4, h5, _, h7, h8, _ = H.ravel()
    if h7 == 0 and h8 == 0:
        raise AffineWarp("homography has no projective component")
    k1 = direction(np.array([h8, -h7]))
    s1 = direction(np.array([h1 * h8 - h2 * h7, h4 * h8 - h5 * h7]))
    return k1, s1


@dataclass(frozen=True)
class CrossLineFrame:
    """Cross lines ``l_u`` (slope k2) and ``l_v`` (slope k1) meeting at ``anchor``.

    ``d1``/``d2`` are target-side directions of slopes k1/k2, ``e1``/``e2``
    their reference-side counterparts s1/s2 with ``e2`` orthogonal to ``e1``.
    """

    d1: np.ndarray
    d2: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    anchor: np.ndarray

    @property
    def k1(self):
        return slope_value(self.d1)

    @property
    def k2(self):
        return slope_value(self.d2)

    @property
    def s1(self):
        return slope_value(self.e1)

    @property
    def s2(self):
        return slope_value(self.e2)

    @property
    def l_v(self):
        return _line(self.anchor, self.d1)

    @property
    def l_u(self):
        return _line(self.anchor, self.d2)


def _line(p, d):
    n = np.array([-d[1], d[0]])
    return np.array([n[0], n[1], -n @ p])


def make_frame(H, anchor, k1=None):
    """Frame anchored at ``anchor``; ``k1`` defaults to the invariant slope of ``H``."""
    if k1 is None:
        d1, e1 = invariant_slopes(H)
    else:
        d1 = direction(k1)
        e1 = slope_transfer(H, anchor, d1)
    d2 = perpendicular(d1)
    e2 = perpendicular(e1)
    return CrossLineFrame(d1, d2, e1, e2, np.asarray(anchor, dtype=float))


def orthogonal_anchor(H, p):
    """Point of the invariant-slope line through ``p`` where ``H`` keeps the cross lines orthogonal.

    Along that line the Jacobian varies linearly, so the orthogonality
    condition has a single root. At that anchor ``qh_warp`` is tangent to
    ``H`` in every direction.
    """
    d1 = invariant_slopes(H)[0]
    d2 = perpendicular(d1)
    p = np.asarray(p, dtype=float)

    def g(t):
        J = geometry.jacobian(H, p + t * d1).reshape(2, 2)
        return (J @ d1) @ (J @ d2)

    g0, g1 = g(0.0), g(1.0)
    if g1 == g0:
        return p
    return p - g0 / (g1 - g0) * d1


def _clip_line(p, d, rect):
    """Parameter interval of ``p + t d`` inside ``rect``."""
    lo, hi = -np.inf, np.inf
    for axis, (a, b) in enumerate(((rect.x0, rect.x1), (rect.y0, rect.y1))):
        if abs(d[axis]) < 1e-15:
            if not a - 1e-9 <= p[axis] <= b + 1e-9:
                return None
            continue
        t0, t1 = sorted(((a - p[axis]) / d[axis], (b - p[axis]) / d[axis]))
        lo, hi = max(lo, t0), min(hi, t1)
    return (lo, hi) if lo <= hi + 1e-12 else None


def select_frame(H, rect, overlap):
    """Pick ``l_v`` tangent to the overlap hull on the non-overlapping side.

    ``overlap`` is any point set (e.g. polygon vertices) whose convex hull is
    the overlap region inside ``rect``.
    """
    d1, _ = invariant_slopes(H)
    pts = np.asarray(overlap, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("overlap region is empty")
    hull = MultiPoint([tuple(p) for p in pts]).convex_hull
    target = box(rect.x0, rect.y0, rect.x1, rect.y1)
    rest = target.difference(hull)
    if rest.area <= 1e-9 * target.area:
        raise NoNonOverlap("overlap covers the whole target")
    n = np.array([-d1[1], d1[0]])
    proj = pts @ n
    side = np.sign(np.array(rest.centroid.coords[0]) @ n - np.mean(proj))
    offset = proj.max() if side >= 0 else proj.min()
    # any point on l_v, then the midpoint of its chord through rect
    base = offset * n
    span = _clip_line(base, d1, rect)
    if span is None:
        raise NoNonOverlap("partition line misses the target rectangle")
    anchor = base + 0.5 * (span[0] + span[1]) * d1
    return make_frame(H, anchor)


def overlap_polygon(H, rect, ref_rect):
    """Vertices of ``rect`` intersected with the preimage of ``ref_rect``.

    Returns ``None`` when the preimage is unbounded inside the reference.
    """
    Hinv = geometry.invert(H)
    corners = ref_rect.corners()
    w = corners @ Hinv[2, :2] + Hinv[2, 2]
    if np.any(w <= 1e-9):
        return None
    quad = Polygon(geometry.apply(Hinv, corners))
    inter = box(rect.x0, rect.y0, rect.x1, rect.y1).intersection(quad.buffer(0))
    if inter.is_empty or inter.area == 0:
        return np.zeros((0, 2))
    return np.asarray(inter.convex_hull.exterior.coords)[:-1]


def _taylor(H, anchor):
    return geometry.apply(H, anchor), geometry.jacobian(H, anchor).reshape(2, 2)


def qh_warp(H, frame, p):
    """Intersect the slope-s1 line through ``H(Pi1(p))`` with the slope-s2 line
    through the linearised ``H(Pi2(p))``."""
    p = np.asarray(p, dtype=float)
    pts = p.reshape(-1, 2)
    rel = pts - frame.anchor
    a = rel @ frame.d2
    b = rel @ frame.d1
    pi1 = frame.anchor + a[:, None] * frame.d2
    pi2 = frame.anchor + b[:, None] * frame.d1
    A = geometry.apply(H, pi1)
    h0, J = _taylor(H, frame.anchor)
    B = h0 + (pi2 - frame.anchor) @ J.T
    e1, e2 = frame.e1, frame.e2
    cross = e1[0] * e2[1] - e1[1] * e2[0]
    if abs(cross) < 1e-12:
        raise ParallelConstraintLines("reference-side cross lines are parallel")
    # A + t e1 = B + s e2
    t = ((B[:, 0] - A[:, 0]) * e2[1] - (B[:, 1] - A[:, 1]) * e2[0]) / cross
    out = A + t[:, None] * e1
    return out.reshape(p.shape)


def qh_residuals(H, frame, p, q):
    """Cross-product residuals of both defining line equations at output ``q``."""
    pts = np.asarray(p, float).reshape(-1, 2)
    q = np.asarray(q, float).reshape(-1, 2)
    rel = pts - frame.anchor
    pi1 = frame.anchor + (rel @ frame.d2)[:, None] * frame.d2
    pi2 = frame.anchor + (rel @ frame.d1)[:, None] * frame.d1
    h0, J = _taylor(H, frame.anchor)
    r1 = q - geometry.apply(H, pi1)
    r2 = q - (h0 + (pi2 - frame.anchor) @ J.T)
    c1 = r1[:, 0] * frame.e1[1] - r1[:, 1] * frame.e1[0]
    c2 = r2[:, 0] * frame.e2[1] - r2[:, 1] * frame.e2[0]
    return np.stack([c1, c2], axis=1)


def composite_warp(field, H, frame, p):
    """APAP field, undone by the global homography, then quasi-homography."""
    local = apap.eval_field(field, p)
    return qh_warp(H, frame, geometry.apply(geometry.invert(H), local))
