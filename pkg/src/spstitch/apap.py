"""Moving DLT: a grid of locally weighted homographies."""

import logging
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import DegenerateConfiguration, OutOfBounds

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MovingDltConfig:
    cell_size: float = 40.0
    sigma: float | None = None  # pixels; defaults to 8.5 cell widths
    gamma: float = 0.0025
    use_lines: bool = True

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")
        # gamma = 1 is allowed: every weight saturates and the field is the global fit
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    @property
    def bandwidth(self):
        return 8.5 * self.cell_size if self.sigma is None else self.sigma


@dataclass
class LocalWarpField:
    x_edges: np.ndarray
    y_edges: np.ndarray
    homographies: np.ndarray  # (rows, cols, 3, 3)
    global_h: np.ndarray
    floored: np.ndarray  # (rows, cols) True where every weight sat at gamma

    @property
    def centers(self):
        cx = 0.5 * (self.x_edges[:-1] + self.x_edges[1:])
        cy = 0.5 * (self.y_edges[:-1] + self.y_edges[1:])
        return np.stack(np.meshgrid(cx, cy), axis=-1)

    def cell_index(self, p):
        pts = np.atleast_2d(np.asarray(p, float))
        xe, ye = self.x_edges, self.y_edges
        cw = xe[1] - xe[0]
        ch = ye[1] - ye[0]
        if np.any(
            (pts[:, 0] < xe[0] - cw) | (pts[:, 0] > xe[-1] + cw)
            | (pts[:, 1] < ye[0] - ch) | (pts[:, 1] > ye[-1] + ch)
        ):
            raise OutOfBounds("point outside the field by more than one cell")
        ci = np.clip(np.searchsorted(xe, pts[:, 0], side="right") - 1, 0, len(xe) - 2)
        ri = np.clip(np.searchsorted(ye, pts[:, 1], side="right") - 1, 0, len(ye) - 2)
        return ri, ci


def _edges(lo, hi, cell):
    n = max(1, int(np.ceil((hi - lo) / cell - 1e-9)))
    return np.linspace(lo, hi, n + 1)


def moving_dlt_weights(sites, center, sigma, gamma):
    """Per-row Gaussian weight of the nearer site, floored at ``gamma``."""
    d2 = np.sum((sites - center) ** 2, axis=-1).min(axis=1)
    return np.maximum(np.exp(-d2 / sigma**2), gamma)


def fit_moving_dlt(pts_a, pts_b, segs_a=None, lines_b=None, rect=None, cfg=MovingDltConfig()):
    """Fit one weighted DLT per cell of ``rect``.

    Cells whose weighted system is degenerate keep the unweighted global fit.
    """
    if not cfg.use_lines:
        segs_a = lines_b = None
    system = geometry.dlt_system(pts_a, pts_b, segs_a, lines_b)
    global_h = geometry.solve_dlt(system)
    xe = _edges(rect.x0, rect.x1, cfg.cell_size)
    ye = _edges(rect.y0, rect.y1, cfg.cell_size)
    rows, cols = len(ye) - 1, len(xe) - 1
    hs = np.empty((rows, cols, 3, 3))
    floored = np.zeros((rows, cols), bool)
    sigma = cfg.bandwidth
    for r in range(rows):
        cy = 0.5 * (ye[r] + ye[r + 1])
        for c in range(cols):
            cx = 0.5 * (xe[c] + xe[c + 1])
            w = moving_dlt_weights(system.row_sites, np.array([cx, cy]), sigma, cfg.gamma)
            if np.all(w == cfg.gamma):
                hs[r, c] = global_h
                floored[r, c] = True
                continue
            try:
                hs[r, c] = geometry.solve_dlt(system, w)
            except DegenerateConfiguration:
                log.debug("cell (%d, %d) degenerate, using global homography", r, c)
                hs[r, c] = global_h
    return LocalWarpField(xe, ye, hs, global_h, floored)


def eval_field(field, p):
    """Warp points with the homography of their enclosing cell."""
    p = np.asarray(p, dtype=float)
    pts = p.reshape(-1, 2)
    ri, ci = field.cell_index(pts)
    out = np.empty_like(pts)
    # group by cell so each homography is applied once
    keys = ri * field.homographies.shape[1] + ci
    for key in np.unique(keys):
        sel = keys == key
        r, c = divmod(int(key), field.homographies.shape[1])
        out[sel] = geometry.apply(field.homographies[r, c], pts[sel])
    return out.reshape(p.shape)
