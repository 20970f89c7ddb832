"""Desk-scale point features: Harris corners, NCC matching, RANSAC."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry
from .errors import DegenerateConfiguration, InsufficientInliers, SingularHomography


@dataclass
class Correspondences:
    """Point and line matches between a target (``a``) and a reference (``b``)."""

    pts_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    pts_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    segs_a: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    segs_b: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    point_ids: list = field(default_factory=list)
    line_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.pts_a = np.asarray(self.pts_a, float).reshape(-1, 2)
        self.pts_b = np.asarray(self.pts_b, float).reshape(-1, 2)
        self.segs_a = np.asarray(self.segs_a, float).reshape(-1, 2, 2)
        self.segs_b = np.asarray(self.segs_b, float).reshape(-1, 2, 2)
        if not self.point_ids:
            self.point_ids = [f"p{i}" for i in range(len(self.pts_a))]
        if not self.line_ids:
            self.line_ids = [f"l{j}" for j in range(len(self.segs_a))]
        if len(self.pts_a) != len(self.pts_b) or len(self.segs_a) != len(self.segs_b):
            raise ValueError("mismatched correspondence arrays")

    @property
    def lines_b(self):
        return geometry.segment_line(self.segs_b) if len(self.segs_b) else np.zeros((0, 3))

    def subset_points(self, idx):
        idx = np.asarray(idx, int)
        return Correspondences(
            self.pts_a[idx], self.pts_b[idx], self.segs_a, self.segs_b,
            [self.point_ids[i] for i in idx], list(self.line_ids),
        )

    def to_json(self):
        return {
            "points": [
                {"id": i, "a": a.tolist(), "b": b.tolist()}
                for i, a, b in zip(self.point_ids, self.pts_a, self.pts_b)
            ],
            "lines": [
                {"id": i, "a": a.tolist(), "b": b.tolist()}
                for i, a, b in zip(self.line_ids, self.segs_a, self.segs_b)
            ],
        }

    @classmethod
    def from_json(cls, data):
        pts = data.get("points", [])
        lines = data.get("lines", [])
        return cls(
            [p["a"] for p in pts], [p["b"] for p in pts],
            [l["a"] for l in lines], [l["b"] for l in lines],
            [str(p["id"]) for p in pts], [str(l["id"]) for l in lines],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class CornerConfig:
    k: float = 0.04
    sigma: float = 1.5
    nms_radius: int = 5
    max_corners: int = 500
    rel_threshold: float = 0.01


def _gray(img):
    img = np.asarray(img, float)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img


def harris_response(img, cfg=CornerConfig()):
    img = _gray(img)
    ix = ndimage.sobel(img, axis=1, mode="reflect")
    iy = ndimage.sobel(img, axis=0, mode="reflect")
    sxx = ndimage.gaussian_filter(ix * ix, cfg.sigma)
    syy = ndimage.gaussian_filter(iy * iy, cfg.sigma)
    sxy = ndimage.gaussian_filter(ix * iy, cfg.sigma)
    return sxx * syy - sxy * sxy - cfg.k * (sxx + syy) ** 2


def detect_corners(img, cfg=CornerConfig()):
    """Harris maxima after non-maximum suppression, strongest first, subpixel refined."""
    R = harris_response(img, cfg)
    top = R.max()
    if top <= 1e-9:
        return np.zeros((0, 2))
    size = 2 * cfg.nms_radius + 1
    peaks = (R == ndimage.maximum_filter(R, size=size, mode="constant", cval=-np.inf))
    peaks &= R > cfg.rel_threshold * top
    iy, ix = np.nonzero(peaks)
    order = np.lexsort((ix, iy, -R[iy, ix]))
    iy, ix = iy[order], ix[order]
    # plateaus pass the max-filter test at several pixels: keep the first of each
    keep = []
    for n in range(len(ix)):
        if len(keep) >= cfg.max_corners:
            break
        k = np.asarray(keep, int)
        if not np.any(np.maximum(np.abs(ix[k] - ix[n]), np.abs(iy[k] - iy[n])) <= cfg.nms_radius):
            keep.append(n)
    iy, ix = iy[keep], ix[keep]
    # quadratic peak refinement along each axis
    h, w = R.shape
    out = np.stack([ix, iy], axis=1).astype(float)
    for axis, (lim, idx) in enumerate(((w, ix), (h, iy))):
        ok = (idx > 0) & (idx < lim - 1)
        if axis == 0:
            l, c, r = R[iy[ok], ix[ok] - 1], R[iy[ok], ix[ok]], R[iy[ok], ix[ok] + 1]
        else:
            l, c, r = R[iy[ok] - 1, ix[ok]], R[iy[ok], ix[ok]], R[iy[ok] + 1, ix[ok]]
        den = l - 2 * c + r
        off = np.where(np.abs(den) > 1e-12, 0.5 * (l - r) / np.where(den == 0, 1, den), 0.0)
        out[ok, axis] += np.clip(off, -0.5, 0.5)
    return out


@dataclass(frozen=True)
class NccConfig:
    patch: int = 11
    min_score: float = 0.8


def _patches(img, pts, size):
    r = size // 2
    padded = np.pad(_gray(img), r, mode="reflect")
    ij = np.rint(pts).astype(int)
    out = np.empty((len(pts), size * size))
    for n, (x, y) in enumerate(ij):
        out[n] = padded[y : y + size, x : x + size].ravel()
    out -= out.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    return np.where(norm > 1e-9, out / np.where(norm > 1e-9, norm, 1.0), 0.0)


def match_corners(img_a, corners_a, img_b, corners_b, cfg=NccConfig()):
    """Mutual-best NCC matches; returns index pairs ``(i, j)`` and scores."""
    corners_a = np.asarray(corners_a, float).reshape(-1, 2)
    corners_b = np.asarray(corners_b, float).reshape(-1, 2)
    if len(corners_a) == 0 or len(corners_b) == 0:
        return np.zeros((0, 2), int), np.zeros(0)
    S = _patches(img_a, corners_a, cfg.patch) @ _patches(img_b, corners_b, cfg.patch).T
    best_b = np.argmax(S, axis=1)
    best_a = np.argmax(S, axis=0)
    i = np.arange(len(corners_a))
    keep = (best_a[best_b] == i) & (S[i, best_b] >= cfg.min_score)
    return np.stack([i[keep], best_b[keep]], axis=1), S[i[keep], best_b[keep]]


def symmetric_transfer_error(H, pts_a, pts_b):
    """``sqrt(|H a - b|^2 + |H^-1 b - a|^2)`` per pair."""
    Hinv = geometry.invert(H)
    fwd = np.sum((geometry.apply(H, pts_a) - pts_b) ** 2, axis=1)
    bwd = np.sum((geometry.apply(Hinv, pts_b) - pts_a) ** 2, axis=1)
    return np.sqrt(fwd + bwd)


def _safe_errors(H, pts_a, pts_b):
    try:
        return symmetric_transfer_error(H, pts_a, pts_b)
    except Exception:
        return np.full(len(pts_a), np.inf)


@dataclass
class RansacResult:
    H: np.ndarray
    inliers: np.ndarray  # boolean mask


def ransac_homography(pts_a, pts_b, threshold=2.0, iterations=1000, seed=0):
    """Max-inlier 4-point model, refit on its inliers.

    The refit is kept only if it does not raise the inliers' total symmetric
    transfer error above the minimal model's.
    """
    pts_a = np.asarray(pts_a, float).reshape(-1, 2)
    pts_b = np.asarray(pts_b, float).reshape(-1, 2)
    n = len(pts_a)
    if n < 4:
        raise InsufficientInliers(f"need 4 pairs, got {n}")
    rng = np.random.default_rng(seed)
    best = None
    for it in range(iterations):
        idx = rng.choice(n, 4, replace=False)
        try:
            H = geometry.estimate_dlt(pts_a[idx], pts_b[idx])
        except (DegenerateConfiguration, SingularHomography):
            continue
        err = _safe_errors(H, pts_a, pts_b)
        inl = err < threshold
        score = (int(inl.sum()), -float(np.sum(err[inl])))
        if best is None or score > best[0]:
            best = (score, H, inl)
    if best is None or best[0][0] < 4:
        raise InsufficientInliers("no model with 4 inliers")
    _, H, inl = best
    base = np.sum(_safe_errors(H, pts_a[inl], pts_b[inl]))
    try:
        H_refit = geometry.estimate_dlt(pts_a[inl], pts_b[inl])
        if np.sum(_safe_errors(H_refit, pts_a[inl], pts_b[inl])) <= base:
            H = H_refit
    except DegenerateConfiguration:
        pass
    return RansacResult(H, inl)
