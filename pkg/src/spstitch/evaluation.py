"""Alignment metrics and the train/test protocol."""

import numpy as np

from .errors import EmptyOverlap, EmptySet, TooFew

OUTLIER_RADIUS = 4
OUTLIER_LEVELS = 10


def rmse(warp, pts_a, pts_b):
    """Root mean squared transfer error of ``warp`` over point pairs."""
    pts_a = np.asarray(pts_a, float).reshape(-1, 2)
    pts_b = np.asarray(pts_b, float).reshape(-1, 2)
    if len(pts_a) == 0:
        raise EmptySet("no point pairs")
    d = np.asarray(warp(pts_a), float).reshape(-1, 2) - pts_b
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def _gray(img):
    img = np.asarray(img, float)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img


def outlier_pct(warp, img_a, img_b, overlap):
    """Percentage of overlap pixels of ``img_a`` with no similar pixel near their image.

    A pixel is an inlier when some ``img_b`` pixel within Chebyshev distance
    4 of its warped position differs from it by less than 10 gray levels.
    ``overlap`` is a boolean mask over ``img_a``.
    """
    a = _gray(img_a)
    b = _gray(img_b)
    iy, ix = np.nonzero(np.asarray(overlap, bool))
    if len(ix) == 0:
        raise EmptyOverlap("overlap region is empty")
    src = np.stack([ix, iy], axis=1).astype(float)
    tgt = np.rint(np.asarray(warp(src), float).reshape(-1, 2))
    tgt = np.where(np.isfinite(tgt), tgt, -10 * OUTLIER_RADIUS - max(b.shape)).astype(int)
    vals = a[iy, ix]
    h, w = b.shape
    found = np.zeros(len(vals), bool)
    r = OUTLIER_RADIUS
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            x = tgt[:, 0] + dx
            y = tgt[:, 1] + dy
            ok = (x >= 0) & (x < w) & (y >= 0) & (y < h) & ~found
            found[ok] = np.abs(b[y[ok], x[ok]] - vals[ok]) < OUTLIER_LEVELS
    return 100.0 * float(np.mean(~found))


def split_indices(n, seed=0):
    """Seeded disjoint halves of ``range(n)``; the training half gets the odd one."""
    if n < 2:
        raise TooFew(f"need at least 2 pairs, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    k = (n + 1) // 2
    return np.sort(perm[:k]), np.sort(perm[k:])


def split_train_test(corr, seed=0):
    """Split the point pairs of a correspondence set; lines all go to training."""
    train, test = split_indices(len(corr.pts_a), seed)
    return corr.subset_points(train), corr.subset_points(test)
