"""Two-image and multi-image stitching flows."""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import apap, bundle, evaluation, features, geometry, linework, meshwarp, render
from . import quasihomography as qh
from .errors import AffineWarp, NoNonOverlap, PipelineError, StitchError

log = logging.getLogger(__name__)

MODES = ("homography", "apap", "composite", "mesh")


@dataclass(frozen=True)
class StitchConfig:
    mode: str = "mesh"
    cell: float = 40.0
    lambdas: meshwarp.Lambdas = field(default_factory=meshwarp.Lambdas)
    apap_sigma: float | None = None
    apap_gamma: float = 0.0025
    apap_lines: bool = True
    spacing: float | None = None  # cross-line and salient sampling; defaults to half a cell
    ransac_threshold: float = 2.0
    ransac_iterations: int = 1000
    seed: int = 0
    freeze_intermediates: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        lam = self.lambdas
        if min(lam.line, lam.perspective, lam.projective, lam.saliency) < 0:
            raise ValueError("energy weights must be non-negative")

    @property
    def sample_spacing(self):
        # at a full cell the lattice can miss a border strip, leaving vertices
        # held only by tiny bilinear weights
        return 0.5 * self.cell if self.spacing is None else self.spacing

    @property
    def apap_config(self):
        return apap.MovingDltConfig(self.cell, self.apap_sigma, self.apap_gamma, self.apap_lines)


@contextmanager
def _step(name, timings=None):
    t0 = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except (StitchError, ValueError, np.linalg.LinAlgError) as exc:
        raise PipelineError(name, exc) from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def rect_of(img):
    h, w = np.asarray(img).shape[:2]
    return geometry.Rect.from_image(w, h)


def fallback_frame(H, rect):
    """Axis-aligned frame through the rectangle centre (affine or fully overlapping)."""
    center = np.array([(rect.x0 + rect.x1) / 2, (rect.y0 + rect.y1) / 2])
    return qh.make_frame(H, center, k1=np.inf)


def choose_frame(H, rect, ref_rect):
    poly = qh.overlap_polygon(H, rect, ref_rect)
    try:
        if poly is None or len(poly) == 0:
            raise NoNonOverlap("no bounded overlap")
        return qh.select_frame(H, rect, poly)
    except (AffineWarp, NoNonOverlap) as exc:
        log.info("frame fallback: %s", exc)
        return fallback_frame(H, rect)


@dataclass
class PairModel:
    """A fitted target-to-reference warp plus everything used to build it."""

    mode: str
    rect: geometry.Rect
    H: np.ndarray
    grid: meshwarp.MeshGrid
    apap_field: apap.LocalWarpField | None = None
    frame: qh.CrossLineFrame | None = None
    samples: linework.CrossLineSamples | None = None
    salient: list = field(default_factory=list)
    system: meshwarp.EnergySystem | None = None
    solution: meshwarp.WarpSolution | None = None

    def warp(self, p):
        if self.mode == "homography":
            return geometry.apply(self.H, p)
        if self.mode == "apap":
            return apap.eval_field(self.apap_field, p)
        if self.mode == "composite":
            return qh.composite_warp(self.apap_field, self.H, self.frame, p)
        return self.solution.warp_points(p)

    def deformed_vertices(self):
        if self.solution is not None:
            return self.solution.V_hat
        return np.asarray(self.warp(self.grid.vertices)).ravel()

    def energies(self):
        if self.system is None:
            return {}
        return self.system.term_energies(self.solution.V_hat)


def fit_pair(corr, rect, ref_rect, cfg=StitchConfig(), salient_segments=None, timings=None):
    """Fit the configured warp from correspondences alone.

    ``salient_segments`` are target segments kept straight by the saliency
    term; the target sides of the line matches are used when omitted.
    """
    grid = meshwarp.build_grid(rect, cfg.cell)
    with _step("prior", timings):
        H = geometry.estimate_dlt(corr.pts_a, corr.pts_b, corr.segs_a, corr.lines_b)
    model = PairModel(cfg.mode, rect, H, grid)
    if cfg.mode == "homography":
        return model
    if cfg.mode in ("apap", "composite"):
        with _step("apap", timings):
            model.apap_field = apap.fit_moving_dlt(
                corr.pts_a, corr.pts_b, corr.segs_a, corr.lines_b, rect, cfg.apap_config
            )
    if cfg.mode == "apap":
        return model
    with _step("frame", timings):
        model.frame = choose_frame(H, rect, ref_rect)
    if cfg.mode == "composite":
        return model

    spacing = cfg.sample_spacing
    with _step("sampling", timings):
        shape = (int(round(rect.y1)) + 1, int(round(rect.x1)) + 1)
        omega = linework.compute_omega([(H, ref_rect)], shape)
        model.samples = linework.generate_cross_lines(model.frame, rect, omega, spacing, H)
        segs = corr.segs_a if salient_segments is None else salient_segments
        segs = [s for s in np.asarray(segs, float).reshape(-1, 2, 2) if np.all(rect.contains(s, 1e-9))]
        model.salient = linework.salient_samples(segs, H, spacing)
    with _step("solve", timings):
        prior = geometry.apply(H, grid.vertices)
        system = meshwarp.mesh_system(grid, prior, cfg.lambdas)
        system.add(meshwarp.assemble_alignment(grid, corr.pts_a, corr.pts_b))
        segs_in = [i for i, s in enumerate(corr.segs_a) if np.all(rect.contains(s, 1e-9))]
        system.add(meshwarp.assemble_naturalness(grid, corr.segs_a[segs_in], corr.lines_b[segs_in]))
        system.add(meshwarp.assemble_perspective(grid, model.samples))
        system.add(meshwarp.assemble_projective(grid, model.samples))
        system.add(meshwarp.assemble_saliency(grid, model.salient))
        model.system = system
        model.solution = meshwarp.solve(system, grid)
    return model


def match_pair(target, reference, cfg=StitchConfig(), timings=None):
    """Corners, NCC, RANSAC, then line matching under the corner homography."""
    with _step("match", timings):
        ca = features.detect_corners(target)
        cb = features.detect_corners(reference)
        pairs, _ = features.match_corners(target, ca, reference, cb)
        pa, pb = ca[pairs[:, 0]], cb[pairs[:, 1]]
        res = features.ransac_homography(pa, pb, cfg.ransac_threshold, cfg.ransac_iterations, cfg.seed)
        pa, pb = pa[res.inliers], pb[res.inliers]
    with _step("lines", timings):
        segs_a = linework.detect_segments(target)
        segs_b = linework.detect_segments(reference)
        lp = linework.match_segments(segs_a, segs_b, res.H)
        la = np.array([segs_a[i] for i, _ in lp]).reshape(-1, 2, 2)
        lb = np.array([segs_b[j] for _, j in lp]).reshape(-1, 2, 2)
    return features.Correspondences(pa, pb, la, lb), segs_a


@dataclass
class StitchResult:
    image: np.ndarray
    mask: np.ndarray
    canvas: render.Canvas
    diagnostics: dict
    models: list


def _layers(images, grids, vertex_sets, canvas):
    layers, masks = [], []
    for img, grid, V in zip(images, grids, vertex_sets):
        out, m = render.warp_image(img, grid, V, canvas)
        layers.append(out)
        masks.append(m)
    return layers, masks


def stitch_two(target, reference, corr=None, cfg=StitchConfig()):
    """Align ``target`` onto ``reference`` and blend both on one canvas."""
    timings = {}
    rect, ref_rect = rect_of(target), rect_of(reference)
    if corr is None:
        corr, salient = match_pair(target, reference, cfg, timings)
    else:
        # salient lines come from the target itself, matched or not
        with _step("lines", timings):
            salient = linework.detect_segments(target)
    model = fit_pair(corr, rect, ref_rect, cfg, salient, timings)
    with _step("render", timings):
        V_hat = model.deformed_vertices()
        canvas = render.compute_canvas(ref_rect, [V_hat])
        warped, wmask = render.warp_image(target, model.grid, V_hat, canvas)
        ref_layer, rmask = render.place_image(reference, canvas, 0, 0)
        image, mask = render.blend([ref_layer, warped], [rmask, wmask])
    diag = {
        "mode": cfg.mode,
        "homography": model.H.tolist(),
        "energies": model.energies(),
        "rmse": evaluation.rmse(model.warp, corr.pts_a, corr.pts_b) if len(corr.pts_a) else None,
        "n_points": int(len(corr.pts_a)),
        "n_lines": int(len(corr.segs_a)),
        "canvas": [canvas.x0, canvas.y0, canvas.width, canvas.height],
        "timings": timings,
    }
    return StitchResult(image, mask, canvas, diag, [model])


# multi-image ---------------------------------------------------------------


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def match_multi(images, cfg=StitchConfig()):
    """Pairwise matching merged into feature tracks (one observation per image)."""
    corners = [features.detect_corners(img) for img in images]
    segments = [linework.detect_segments(img) for img in images]
    pts, lns = _UnionFind(), _UnionFind()
    for a in range(len(images)):
        for b in range(a + 1, len(images)):
            pairs, _ = features.match_corners(images[a], corners[a], images[b], corners[b])
            if len(pairs) < 4:
                continue
            try:
                res = features.ransac_homography(
                    corners[a][pairs[:, 0]], corners[b][pairs[:, 1]],
                    cfg.ransac_threshold, cfg.ransac_iterations, cfg.seed,
                )
            except StitchError:
                continue
            for i, j in pairs[res.inliers]:
                pts.union((a, int(i)), (b, int(j)))
            for i, j in linework.match_segments(segments[a], segments[b], res.H):
                lns.union((a, i), (b, j))
    return features_from_tracks(len(images), pts, lns, corners, segments)


def features_from_tracks(n, pts, lns, corners, segments):
    def tracks(uf):
        groups = {}
        for node in sorted(uf.parent):
            groups.setdefault(uf.find(node), []).append(node)
        for root in sorted(groups):
            members = groups[root]
            images = [k for k, _ in members]
            # inconsistent tracks (two observations in one image) are dropped
            if len(set(images)) == len(images) and len(images) >= 2:
                yield root, members

    points = {f"p{k}_{i}": {m: corners[m][j] for m, j in mem} for (k, i), mem in tracks(pts)}
    lines = {f"l{k}_{i}": {m: segments[m][j] for m, j in mem} for (k, i), mem in tracks(lns)}
    return bundle.MultiViewFeatures(n, points, lines)


def default_reference(mv):
    return int(np.argmax(mv.match_counts().sum(axis=1)))


def _image_terms(k, grids, Hs, rects, spacing, salient):
    """Distortion and saliency rows of image ``k`` against its bundle-adjusted prior."""
    grid = grids[k]
    to_ref = geometry.invert(Hs[k])
    shape = (int(round(rects[k].y1)) + 1, int(round(rects[k].x1)) + 1)
    others = [(Hs[j] @ to_ref, rects[j]) for j in range(len(grids)) if j != k]
    omega = linework.compute_omega(others, shape)
    try:
        frame = qh.select_frame(to_ref, rects[k], omega.overlap_pixels) if (~omega.omega).any() else None
        if frame is None:
            raise NoNonOverlap("no overlap pixels")
    except (AffineWarp, NoNonOverlap, ValueError) as exc:
        log.info("image %d frame fallback: %s", k, exc)
        frame = fallback_frame(to_ref, rects[k])
    samples = linework.generate_cross_lines(frame, rects[k], omega, spacing, to_ref)
    sal = linework.salient_samples(salient, to_ref, spacing)
    blocks = [
        meshwarp.assemble_perspective(grid, samples),
        meshwarp.assemble_projective(grid, samples),
        meshwarp.assemble_saliency(grid, sal),
    ]
    return [b for b in blocks if len(b)], frame, samples


def stitch_multi(images, ref=None, cfg=StitchConfig(), mv=None, salient=None):
    """Bundle-adjust homographies to a reference, jointly solve every mesh, blend."""
    timings = {}
    if ref is not None and not 0 <= ref < len(images):
        raise PipelineError("reference", IndexError(f"reference index {ref} out of range"))
    rects = [rect_of(img) for img in images]
    if mv is None:
        with _step("match", timings):
            mv = match_multi(images, cfg)
    if ref is None:
        ref = default_reference(mv)
    with _step("bundle", timings):
        problem = bundle.build_problem(mv, ref)
        lm = bundle.lm_solve(problem)
        Hs, _, _ = problem.unpack(lm.theta)
    grids = [meshwarp.build_grid(r, cfg.cell) for r in rects]
    with _step("solve", timings):
        layout = bundle.joint_layout(grids, problem, freeze_intermediates=cfg.freeze_intermediates)
        blocks, iprior = bundle.assemble_multi_alignment(grids, problem, lm.theta, layout)
        priors, frames = {}, {}
        for k, off in layout.mesh_offset.items():
            priors[k] = geometry.apply(geometry.invert(Hs[k]), grids[k].vertices)
            segs = [] if salient is None else salient[k]
            extra, frames[k], _ = _image_terms(k, grids, Hs, rects, cfg.sample_spacing, segs)
            blocks += [b.shifted(off) for b in extra]
        sols, x, system = bundle.joint_solve(grids, layout, blocks, priors, iprior, cfg.lambdas)
    with _step("render", timings):
        verts = [s.V_hat for s in sols]
        canvas = render.compute_canvas(rects[ref], [v for k, v in enumerate(verts) if k != ref])
        layers, masks = _layers(images, grids, verts, canvas)
        image, mask = render.blend(layers, masks)
    diag = {
        "reference": ref,
        "homographies": [H.tolist() for H in Hs],
        "bundle_energies": lm.energies,
        "bundle_converged": lm.converged,
        "energies": system.term_energies(x),
        "canvas": [canvas.x0, canvas.y0, canvas.width, canvas.height],
        "timings": timings,
    }
    return StitchResult(image, mask, canvas, diag, sols)


def evaluate_pair(corr, rect, ref_rect, cfg=StitchConfig(), seed=0):
    """Train on a seeded half of the point pairs; RMSE on both halves."""
    train, test = evaluation.split_train_test(corr, seed)
    model = fit_pair(train, rect, ref_rect, cfg)
    return {
        "train": evaluation.rmse(model.warp, train.pts_a, train.pts_b),
        "test": evaluation.rmse(model.warp, test.pts_a, test.pts_b),
    }


def with_mode(cfg, mode):
    return replace(cfg, mode=mode)
