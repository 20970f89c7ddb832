"""Line features: segment detection and matching, cross-line sampling, omega."""

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry
from .quasihomography import _clip_line


@dataclass
class SampledLine:
    points: np.ndarray  # (L, 2) equally spaced, collinear
    normal: np.ndarray  # unit normal of the line's image in the reference
    in_omega: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.in_omega is None:
            self.in_omega = np.zeros(len(self.points), bool)


@dataclass
class CrossLineSamples:
    u_lines: list
    v_lines: list


@dataclass
class OverlapMask:
    """Pixel mask over the target; True marks omega (maps outside every other image)."""

    omega: np.ndarray

    def query(self, pts):
        pts = np.atleast_2d(pts)
        h, w = self.omega.shape
        ix = np.clip(np.rint(pts[:, 0]).astype(int), 0, w - 1)
        iy = np.clip(np.rint(pts[:, 1]).astype(int), 0, h - 1)
        return self.omega[iy, ix]

    @property
    def overlap_pixels(self):
        iy, ix = np.nonzero(~self.omega)
        return np.stack([ix, iy], axis=1).astype(float)


@dataclass(frozen=True)
class SegmentConfig:
    percentile: float = 80.0
    smoothing: float = 0.8  # Gaussian sigma applied before the gradient; 0 disables
    angle_tol: float = np.deg2rad(22.5)
    min_length: float = 20.0
    max_width: float = 3.0


def _gray(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img


def detect_segments(image, cfg=SegmentConfig()):
    """Grow 8-connected regions of consistent gradient orientation and fit
    one segment per region along its principal axis.

    A pixel joins a region when its gradient angle is within ``angle_tol`` of
    the region's running mean angle.

    Regions are seeded in order of decreasing gradient magnitude (ties by
    raster position), so the output is deterministic.
    """
    img = _gray(image)
    if cfg.smoothing > 0:
        # removes staircase aliasing that would split straight edges
        img = ndimage.gaussian_filter(img, cfg.smoothing, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    if mag.max() <= 1e-9:
        return []
    thresh = max(np.percentile(mag, cfg.percentile), 1e-9 * mag.max())
    active = mag > thresh
    angle = np.arctan2(gy, gx)
    h, w = img.shape
    used = ~active
    ang = angle.tolist()
    order = np.argsort(-mag.ravel(), kind="stable")
    order = order[active.ravel()[order]]
    segments = []
    for flat in order:
        y0, x0 = divmod(int(flat), w)
        if used[y0, x0]:
            continue
        region_angle = ang[y0][x0]
        sx, sy = np.cos(region_angle), np.sin(region_angle)
        region = [(y0, x0)]
        used[y0, x0] = True
        queue = deque(region)
        while queue:
            y, x = queue.popleft()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and not used[yy, xx]:
                        a = ang[yy][xx]
                        diff = (a - region_angle + np.pi) % (2 * np.pi) - np.pi
                        if abs(diff) < cfg.angle_tol:
                            used[yy, xx] = True
                            region.append((yy, xx))
                            queue.append((yy, xx))
                            # the region angle follows the mean orientation of its pixels
                            sx += np.cos(a)
                            sy += np.sin(a)
                            region_angle = np.arctan2(sy, sx)
        seg = _fit_segment(np.array(region), mag, region_angle, cfg)
        if seg is not None:
            # the fitted axis can overshoot the raster by a fraction of a pixel
            seg[:, 0] = np.clip(seg[:, 0], 0, w - 1)
            seg[:, 1] = np.clip(seg[:, 1], 0, h - 1)
            segments.append(seg)
    return segments


def _fit_segment(region, mag, region_angle, cfg):
    """Principal-axis segment through the region's inlier pixels.

    Inliers are the pixels with at least half the region's peak magnitude,
    which drops the faint flanks of a smoothed edge.
    """
    if len(region) < 2:
        return None
    wts = mag[region[:, 0], region[:, 1]]
    keep = wts >= 0.5 * wts.max()
    if keep.sum() < 2:
        return None
    pts = region[keep, ::-1].astype(float)
    wts = wts[keep]
    c = np.average(pts, axis=0, weights=wts)
    cov = np.cov((pts - c).T, aweights=wts)
    evals, evecs = np.linalg.eigh(cov)
    d = evecs[:, 1]
    # orient along the level line: gradient rotated by +90 degrees
    level = np.array([-np.sin(region_angle), np.cos(region_angle)])
    if d @ level < 0:
        d = -d
    t = (pts - c) @ d
    r = (pts - c) @ np.array([-d[1], d[0]])
    if t.max() - t.min() < cfg.min_length or r.max() - r.min() > cfg.max_width:
        return None
    return np.array([c + t.min() * d, c + t.max() * d])


@dataclass(frozen=True)
class MatchConfig:
    max_distance: float = 3.0
    max_angle: float = np.deg2rad(5.0)
    min_overlap: float = 0.5


def match_segments(segs_a, segs_b, H, cfg=MatchConfig()):
    """Match target segments to reference segments under a prior homography.

    Returns ``(i, j)`` index pairs; a target segment takes the closest
    reference segment among those passing the angle and overlap gates.
    """
    pairs = []
    if len(segs_a) == 0 or len(segs_b) == 0:
        return pairs
    segs_b = np.asarray(segs_b, float).reshape(-1, 2, 2)
    lines_b = geometry.segment_line(segs_b)
    dirs_b = segs_b[:, 1] - segs_b[:, 0]
    len_b = np.linalg.norm(dirs_b, axis=1)
    dirs_b = dirs_b / len_b[:, None]
    for i, seg in enumerate(np.asarray(segs_a, float).reshape(-1, 2, 2)):
        m = geometry.apply(H, seg)
        d = m[1] - m[0]
        length = np.linalg.norm(d)
        if length == 0:
            continue
        d /= length
        dist = np.abs(m @ lines_b[:, :2].T + lines_b[:, 2]).mean(axis=0)
        ang = np.arccos(np.clip(np.abs(dirs_b @ d), 0.0, 1.0))
        # overlap of the projections onto each reference segment's axis
        t0 = np.einsum("kd,kd->k", m[0] - segs_b[:, 0], dirs_b)
        t1 = np.einsum("kd,kd->k", m[1] - segs_b[:, 0], dirs_b)
        lo, hi = np.minimum(t0, t1), np.maximum(t0, t1)
        inter = np.clip(np.minimum(hi, len_b) - np.maximum(lo, 0.0), 0.0, None)
        ratio = inter / np.minimum(hi - lo, len_b).clip(1e-12)
        ok = (ang < cfg.max_angle) & (ratio > cfg.min_overlap)
        if not ok.any():
            continue
        cand = np.flatnonzero(ok)
        j = cand[np.argmin(dist[cand])]
        if dist[j] < cfg.max_distance:
            pairs.append((i, int(j)))
    return pairs


def _family(direction, anchor, rect, spacing, H, omega):
    """Lines of one direction through the lattice ``anchor + spacing * Z^2``."""
    normal = np.array([-direction[1], direction[0]])
    offs = rect.corners() @ normal
    base = anchor @ normal
    k_lo = int(np.ceil((offs.min() - base) / spacing - 1e-9))
    k_hi = int(np.floor((offs.max() - base) / spacing + 1e-9))
    lines = []
    for k in range(k_lo, k_hi + 1):
        p0 = anchor + k * spacing * normal
        span = _clip_line(p0, direction, rect)
        if span is None:
            continue
        # samples keep the lattice phase of the anchor along the line
        m_lo = int(np.ceil(span[0] / spacing - 1e-9))
        m_hi = int(np.floor(span[1] / spacing + 1e-9))
        if m_hi < m_lo:
            continue
        t = np.arange(m_lo, m_hi + 1) * spacing
        pts = p0 + t[:, None] * direction
        pts[:, 0] = np.clip(pts[:, 0], rect.x0, rect.x1)
        pts[:, 1] = np.clip(pts[:, 1], rect.y0, rect.y1)
        line = np.array([normal[0], normal[1], -normal @ p0])
        ref_line = geometry.transfer_line(H, line)
        in_omega = omega.query(pts) if omega is not None else None
        lines.append(SampledLine(pts, ref_line[:2], in_omega))
    return lines


def generate_cross_lines(frame, rect, omega, spacing, H):
    """Uniformly sampled u-lines (parallel to ``l_u``) and v-lines (parallel to ``l_v``)."""
    return CrossLineSamples(
        u_lines=_family(frame.d2, frame.anchor, rect, spacing, H, omega),
        v_lines=_family(frame.d1, frame.anchor, rect, spacing, H, omega),
    )


def sample_segment(seg, spacing):
    """Equally spaced samples including both endpoints, at most ``spacing`` apart."""
    seg = np.asarray(seg, float)
    n = max(2, int(np.ceil(np.linalg.norm(seg[1] - seg[0]) / spacing)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return seg[0] + t * (seg[1] - seg[0])


def salient_samples(segments, H, spacing):
    """Sample salient segments; normals come from their images under ``H``."""
    out = []
    for seg in segments:
        ref = geometry.transfer_line(H, geometry.segment_line(seg))
        out.append(SampledLine(sample_segment(seg, spacing), ref[:2]))
    return out


def compute_omega(transforms, shape):
    """Omega over a ``(height, width)`` target.

    ``transforms`` is a list of ``(H, rect)``: ``H`` maps target pixels into an
    image whose extent is ``rect``.  A pixel is in omega when it lands inside
    none of them (points beyond a horizon never land).
    """
    h, w = shape
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    covered = np.zeros(len(pts), bool)
    for H, rect in transforms:
        H = geometry.normalize_homography(H)
        geometry.invert(H)  # raises on singular input
        den = pts @ H[2, :2] + H[2, 2]
        ok = den > geometry.DENOM_TOL
        mapped = np.full_like(pts, np.inf)
        mapped[ok] = (pts[ok] @ H[:2, :2].T + H[:2, 2]) / den[ok, None]
        covered |= ok & rect.contains(mapped)
    return OverlapMask((~covered).reshape(h, w))
