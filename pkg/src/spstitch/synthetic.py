"""Procedural multi-plane scenes seen by pinhole cameras.

The reference camera (image 0) sits at the origin looking down +z.  Plane
``i`` is ``n_i . X = d_i`` and owns the world points whose reference
projection falls in the ``i``-th vertical strip of image 0, so the reference
view is gap-free.  Other views are ray-cast with nearest-hit visibility.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .bundle import MultiViewFeatures
from .features import Correspondences

BACKGROUND = 40


@dataclass(frozen=True)
class SceneSpec:
    planes: int = 2
    depth: float = 10.0
    depth_offsets: tuple = (0.0, 0.0)  # depth of plane 0; depth step at each later crease
    tilts: tuple = (0.0, -0.8)  # radians about the y axis
    baseline: float = 1.5
    yaw: float = np.deg2rad(6.0)
    noise: float = 0.5
    seed: int = 0
    n_images: int = 2
    width: int = 400
    height: int = 300
    focal: float = 400.0
    n_points: int = 300
    n_lines: int = 20
    texture_cell: float = 0.5
    render: bool = True

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        for key in ("depth_offsets", "tilts"):
            if key in data:
                data[key] = tuple(data[key])
        if "yaw_deg" in data:
            data["yaw"] = np.deg2rad(data.pop("yaw_deg"))
        return cls(**data)


@dataclass
class Camera:
    R: np.ndarray
    center: np.ndarray


@dataclass
class SyntheticScene:
    spec: SceneSpec
    K: np.ndarray
    cameras: list
    normals: np.ndarray  # (P, 3)
    offsets: np.ndarray  # (P,)
    strips: np.ndarray  # (P + 1,) reference column boundaries
    images: list = field(default_factory=list)
    plane_masks: list = field(default_factory=list)
    corr: Correspondences | None = None  # image 1 (target) against image 0 (reference)
    point_planes: np.ndarray | None = None
    multi: MultiViewFeatures | None = None

    @property
    def rect(self):
        return geometry.Rect.from_image(self.spec.width, self.spec.height)

    def homography(self, k, plane, ref=0):
        """Ground-truth homography taking image ``k`` pixels on ``plane`` to image ``ref``."""
        return geometry.normalize_homography(
            self._from_ref(ref, plane) @ np.linalg.inv(self._from_ref(k, plane))
        )

    def _from_ref(self, k, plane):
        cam = self.cameras[k]
        n, d = self.normals[plane], self.offsets[plane]
        M = cam.R @ (np.eye(3) - np.outer(cam.center, n) / d)
        return self.K @ M @ np.linalg.inv(self.K)

    def ground_truth(self, plane=0):
        """Target-to-reference homography of one plane for the two-image pair."""
        return self.homography(1, plane, 0)

    # ray casting -----------------------------------------------------------

    def _project(self, k, X):
        cam = self.cameras[k]
        x = (X - cam.center) @ cam.R.T @ self.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            return x[:, :2] / x[:, 2:3], x[:, 2]

    def _owner(self, X):
        """Plane whose strip contains each world point's reference projection."""
        uv, z = self._project(0, X)
        idx = np.searchsorted(self.strips, uv[:, 0], side="right") - 1
        return np.where(z > 0, np.clip(idx, 0, len(self.normals) - 1), -1)

    def cast(self, k, pix):
        """Visible world point and plane index for pixels of image ``k`` (-1 = background)."""
        cam = self.cameras[k]
        rays = np.c_[pix, np.ones(len(pix))] @ np.linalg.inv(self.K).T @ cam.R
        best_t = np.full(len(pix), np.inf)
        label = np.full(len(pix), -1)
        for i, (n, d) in enumerate(zip(self.normals, self.offsets)):
            den = rays @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (d - n @ cam.center) / den
            X = cam.center + t[:, None] * rays
            ok = (t > 0) & np.isfinite(t) & (self._owner(X) == i) & (t < best_t)
            best_t[ok] = t[ok]
            label[ok] = i
        X = cam.center + np.where(np.isfinite(best_t), best_t, 0.0)[:, None] * rays
        return X, label

    def visible(self, k, X, plane):
        """True where world points on ``plane`` are seen unoccluded inside image ``k``."""
        uv, z = self._project(k, X)
        inside = (z > 0) & self.rect.contains(np.nan_to_num(uv, nan=-1e9, posinf=-1e9, neginf=-1e9))
        out = np.zeros(len(X), bool)
        if inside.any():
            _, lab = self.cast(k, uv[inside])
            out[inside] = lab == plane
        return out

    def _plane_coords(self, i, X):
        n = self.normals[i]
        e1 = np.array([n[2], 0.0, -n[0]])
        e2 = np.array([0.0, 1.0, 0.0])
        return X @ e1, X @ e2


def _camera(k, spec):
    c, s = np.cos(k * spec.yaw), np.sin(k * spec.yaw)
    R = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return Camera(R, np.array([k * spec.baseline, 0.0, 0.0]))


def _texture(scene, rng):
    table = rng.uniform(30, 230, size=(len(scene.normals), 64, 64))
    tint = rng.uniform(0.8, 1.0, size=(len(scene.normals), 3))
    cell = scene.spec.texture_cell

    def shade(X, label):
        out = np.full((len(X), 3), float(BACKGROUND))
        for i in range(len(scene.normals)):
            m = label == i
            if not m.any():
                continue
            a, b = scene._plane_coords(i, X[m])
            ia = np.floor(a / cell).astype(int) % 64
            ib = np.floor(b / cell).astype(int) % 64
            g = table[i, ib, ia] + 12 * np.sin(2.1 * a) * np.cos(1.7 * b)
            out[m] = g[:, None] * tint[i]
        return out

    return shade


def _render(scene, shade, k, ss=2):
    w, h = scene.spec.width, scene.spec.height
    acc = np.zeros((h * w, 3))
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    base = np.stack([gx.ravel(), gy.ravel()], axis=1)
    for oy in offs:
        for ox in offs:
            X, lab = scene.cast(k, base + [ox, oy])
            acc += shade(X, lab)
    _, lab = scene.cast(k, base)
    img = np.clip(np.rint(acc / ss**2), 0, 255).astype(np.uint8).reshape(h, w, 3)
    return img, lab.reshape(h, w)


def _pair_features(scene, rng):
    spec = scene.spec
    rect = scene.rect
    margin = 2.0
    pa, pb, planes = [], [], []
    tries = 0
    while len(pa) < spec.n_points and tries < 50:
        tries += 1
        cand = rng.uniform([margin, margin], [rect.x1 - margin, rect.y1 - margin], size=(spec.n_points, 2))
        X, lab = scene.cast(0, cand)
        for i in range(len(scene.normals)):
            m = (lab == i) & scene.visible(1, X, i)
            if not m.any():
                continue
            q = geometry.apply(scene.homography(0, i, 1), cand[m])
            pa.append(q)
            pb.append(cand[m])
            planes.append(np.full(len(q), i))
        got = sum(len(p) for p in pa)
        if got >= spec.n_points:
            break
    pa = np.concatenate(pa)[: spec.n_points]
    pb = np.concatenate(pb)[: spec.n_points]
    planes = np.concatenate(planes)[: spec.n_points]
    pb = pb + rng.normal(0.0, spec.noise, pb.shape) if spec.noise > 0 else pb

    sa, sb = [], []
    for _ in range(50 * spec.n_lines):
        if len(sa) >= spec.n_lines:
            break
        c = rng.uniform([margin, margin], [rect.x1 - margin, rect.y1 - margin])
        ang = rng.uniform(0, np.pi)
        L = rng.uniform(40, 120)
        seg = c + 0.5 * L * np.array([[-1.0], [1.0]]) * [np.cos(ang), np.sin(ang)]
        if not np.all(rect.contains(seg)):
            continue
        probe = np.array([seg[0], 0.5 * (seg[0] + seg[1]), seg[1]])
        X, lab = scene.cast(0, probe)
        if lab[0] < 0 or np.any(lab != lab[0]) or not np.all(scene.visible(1, X, lab[0])):
            continue
        sa.append(geometry.apply(scene.homography(0, lab[0], 1), seg))
        sb.append(seg)
    sb = np.array(sb).reshape(-1, 2, 2)
    if spec.noise > 0 and len(sb):
        sb = sb + rng.normal(0.0, spec.noise, sb.shape)
    return Correspondences(pa, pb, np.array(sa).reshape(-1, 2, 2), sb), planes


def _multi_features(scene, rng):
    """Points and segments sampled in every view, observed wherever visible."""
    spec = scene.spec
    rect = scene.rect
    K = spec.n_images
    per = max(1, spec.n_points // K)
    points, lines = {}, {}
    for k in range(K):
        cand = rng.uniform([2.0, 2.0], [rect.x1 - 2, rect.y1 - 2], size=(per, 2))
        X, lab = scene.cast(k, cand)
        for n in np.flatnonzero(lab >= 0):
            obs = {}
            for j in range(K):
                if scene.visible(j, X[n : n + 1], lab[n])[0]:
                    obs[j] = scene._project(j, X[n : n + 1])[0][0]
            if len(obs) >= 2:
                points[f"p{k}_{n}"] = obs
        made = 0
        for _ in range(50 * max(1, spec.n_lines // K)):
            if made >= max(1, spec.n_lines // K):
                break
            c = rng.uniform([2.0, 2.0], [rect.x1 - 2, rect.y1 - 2])
            ang = rng.uniform(0, np.pi)
            L = rng.uniform(40, 120)
            seg = c + 0.5 * L * np.array([[-1.0], [1.0]]) * [np.cos(ang), np.sin(ang)]
            if not np.all(rect.contains(seg)):
                continue
            Xs, lab = scene.cast(k, seg)
            if lab[0] < 0 or lab[1] != lab[0]:
                continue
            obs = {}
            for j in range(K):
                if np.all(scene.visible(j, Xs, lab[0])):
                    obs[j] = scene._project(j, Xs)[0]
            if len(obs) >= 2:
                lines[f"l{k}_{made}"] = obs
                made += 1
    if spec.noise > 0:
        for obs in list(points.values()) + list(lines.values()):
            for j in obs:
                obs[j] = obs[j] + rng.normal(0.0, spec.noise, np.shape(obs[j]))
    return MultiViewFeatures(K, points, lines)


def generate_scene(spec=SceneSpec()):
    """Build cameras and planes, render every view, and sample correspondences."""
    rng = np.random.default_rng(spec.seed)
    P = spec.planes
    offsets_in = tuple(spec.depth_offsets) + (0.0,) * P
    tilts_in = tuple(spec.tilts) + (0.0,) * P
    Kmat = np.array([[spec.focal, 0, spec.width / 2], [0, spec.focal, spec.height / 2], [0, 0, 1.0]])
    strips = np.linspace(0, spec.width, P + 1)
    strips[0], strips[-1] = -np.inf, np.inf
    bounds = np.linspace(0, spec.width, P + 1)
    Kinv = np.linalg.inv(Kmat)
    normals, offsets = [], []
    for i in range(P):
        t = tilts_in[i]
        n = np.array([np.sin(t), 0.0, np.cos(t)])
        if i == 0:
            # through the centre ray of the first strip at the base depth
            ray = Kinv @ np.array([(bounds[0] + bounds[1]) / 2, spec.height / 2, 1.0])
            X0 = ray * (spec.depth + offsets_in[0]) / ray[2]
        else:
            # continue the previous plane across the strip boundary, then step in depth
            ray = Kinv @ np.array([bounds[i], spec.height / 2, 1.0])
            X0 = ray * offsets[-1] / (normals[-1] @ ray)
            X0 = X0 * (X0[2] + offsets_in[i]) / X0[2]
        normals.append(n)
        offsets.append(float(n @ X0))
    cams = [_camera(k, spec) for k in range(spec.n_images)]
    scene = SyntheticScene(spec, Kmat, cams, np.array(normals), np.array(offsets), strips)
    shade = _texture(scene, rng)
    if spec.render:
        for k in range(spec.n_images):
            img, lab = _render(scene, shade, k)
            scene.images.append(img)
            scene.plane_masks.append(lab)
    if spec.n_images >= 2:
        scene.corr, scene.point_planes = _pair_features(scene, rng)
    if spec.n_images >= 3:
        scene.multi = _multi_features(scene, rng)
    return scene
