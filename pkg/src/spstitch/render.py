"""Canvas layout, inverse texture mapping of deformed meshes, feather blending."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

NEWTON_ITERS = 8
NEWTON_TOL = 1e-6
INSIDE_TOL = 1e-9


@dataclass(frozen=True)
class Canvas:
    """Integer pixel grid; canvas pixel ``(0, 0)`` sits at ``(x0, y0)``."""

    x0: int
    y0: int
    width: int
    height: int

    def pixel_coords(self):
        gx, gy = np.meshgrid(
            np.arange(self.width, dtype=float) + self.x0,
            np.arange(self.height, dtype=float) + self.y0,
        )
        return gx, gy


def compute_canvas(ref_rect, meshes=()):
    """Bounding pixel grid of the reference rectangle and all deformed vertices."""
    pts = [ref_rect.corners()] + [np.asarray(m, float).reshape(-1, 2) for m in meshes]
    pts = np.concatenate(pts)
    lo = np.floor(pts.min(axis=0) + 1e-9).astype(int)
    hi = np.ceil(pts.max(axis=0) - 1e-9).astype(int)
    return Canvas(int(lo[0]), int(lo[1]), int(hi[0] - lo[0] + 1), int(hi[1] - lo[1] + 1))


def sample_bilinear(img, x, y):
    """Bilinear lookup with clamp-to-edge; returns float samples."""
    img = np.asarray(img, float)
    coords = np.stack([y.ravel(), x.ravel()])
    if img.ndim == 2:
        out = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
        return out.reshape(x.shape)
    chans = [ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest") for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).reshape(x.shape + (img.shape[2],))


def _invert_quad(q, px, py):
    """Newton inversion of the bilinear map of quad ``q`` (v00, v10, v11, v01)."""
    a = q[0]
    b = q[1] - q[0]
    c = q[3] - q[0]
    d = q[0] - q[1] + q[2] - q[3]
    u = np.full(px.shape, 0.5)
    v = np.full(px.shape, 0.5)
    conv = np.zeros(px.shape, bool)
    for _ in range(NEWTON_ITERS):
        fx = a[0] + b[0] * u + c[0] * v + d[0] * u * v - px
        fy = a[1] + b[1] * u + c[1] * v + d[1] * u * v - py
        j11 = b[0] + d[0] * v
        j12 = c[0] + d[0] * u
        j21 = b[1] + d[1] * v
        j22 = c[1] + d[1] * u
        det = j11 * j22 - j12 * j21
        det = np.where(np.abs(det) < 1e-15, 1e-15, det)
        du = (j22 * fx - j12 * fy) / det
        dv = (-j21 * fx + j11 * fy) / det
        u -= du
        v -= dv
        conv = np.maximum(np.abs(du), np.abs(dv)) < NEWTON_TOL
        if conv.all():
            break
    return u, v, conv


def warp_image(img, grid, V_hat, canvas):
    """Render ``img`` through its deformed mesh onto ``canvas``.

    Returns ``(warped, mask)``; pixels outside every deformed quad are invalid.
    """
    img = np.asarray(img)
    verts = np.asarray(V_hat, float).reshape(-1, 2)
    quads = grid.quads()
    shape = (canvas.height, canvas.width)
    src_x = np.zeros(shape)
    src_y = np.zeros(shape)
    best = np.full(shape, np.inf)
    ambiguous = 0
    cw = np.diff(grid.xs)
    ch = np.diff(grid.ys)
    for qi, quad in enumerate(quads):
        q = verts[quad]
        lo = np.floor(q.min(axis=0)).astype(int) - np.array([canvas.x0, canvas.y0])
        hi = np.ceil(q.max(axis=0)).astype(int) - np.array([canvas.x0, canvas.y0])
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, [canvas.width - 1, canvas.height - 1])
        if np.any(hi < lo):
            continue
        ys, xs = np.mgrid[lo[1] : hi[1] + 1, lo[0] : hi[0] + 1]
        px = xs + canvas.x0
        py = ys + canvas.y0
        u, v, conv = _invert_quad(q, px.astype(float), py.astype(float))
        # distance of the parameter from the unit square; 0 inside
        out = np.maximum.reduce([-u, u - 1, -v, v - 1, np.zeros_like(u)])
        hit = conv & (out <= INSIDE_TOL)
        if not hit.any():
            continue
        yy, xx = ys[hit], xs[hit]
        interior = np.minimum.reduce([u, 1 - u, v, 1 - v])[hit] > 1e-6
        ambiguous += int(np.sum(interior & (best[yy, xx] == 0)))
        better = out[hit] < best[yy, xx]
        yy, xx = yy[better], xx[better]
        r, c = divmod(qi, grid.cols - 1)
        src_x[yy, xx] = grid.xs[c] + u[hit][better] * cw[c]
        src_y[yy, xx] = grid.ys[r] + v[hit][better] * ch[r]
        best[yy, xx] = out[hit][better]
    if ambiguous:
        log.info("%d canvas pixels covered by several quads (fold-over)", ambiguous)
    mask = np.isfinite(best)
    vals = sample_bilinear(img, src_x, src_y)
    out = np.zeros(shape + img.shape[2:], dtype=img.dtype)
    out[mask] = _to_dtype(vals[mask], img.dtype)
    return out, mask


def _to_dtype(vals, dtype):
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        return np.clip(np.rint(vals), info.min, info.max).astype(dtype)
    return vals.astype(dtype)


def place_image(img, canvas, x0=0, y0=0):
    """Paste an unwarped image whose pixel (0, 0) sits at ``(x0, y0)``."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    out = np.zeros((canvas.height, canvas.width) + img.shape[2:], dtype=img.dtype)
    mask = np.zeros((canvas.height, canvas.width), bool)
    ox, oy = x0 - canvas.x0, y0 - canvas.y0
    out[oy : oy + h, ox : ox + w] = img
    mask[oy : oy + h, ox : ox + w] = True
    return out, mask


def blend_weights(masks):
    """Feather weights: distance to the nearest invalid pixel, normalised.

    The canvas border counts as invalid so that layers fade toward their edges.
    """
    raw = []
    for m in masks:
        padded = np.pad(np.asarray(m, bool), 1, constant_values=False)
        raw.append(ndimage.distance_transform_edt(padded)[1:-1, 1:-1])
    raw = np.stack(raw)
    total = raw.sum(axis=0)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, raw / safe, 0.0)


def blend(layers, masks):
    """Linear (feathered) blend; returns ``(image, mask)``."""
    layers = [np.asarray(l) for l in layers]
    dtype = layers[0].dtype
    weights = blend_weights(masks)
    acc = np.zeros(layers[0].shape, float)
    for img, w in zip(layers, weights):
        acc += img.astype(float) * (w if img.ndim == 2 else w[..., None])
    valid = weights.sum(axis=0) > 0
    return _to_dtype(acc, dtype), valid
