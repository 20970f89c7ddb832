"""Raster, correspondence, mesh-dump and report files."""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .bundle import MultiViewFeatures


def read_image(path):
    """8-bit PNG or binary PPM as ``(H, W)`` or ``(H, W, 3)`` uint8."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.array(im, dtype=np.uint8)


def write_image(path, img):
    """Write uint8 data; the format follows the suffix (``.png`` or ``.ppm``)."""
    path = Path(path)
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    if fmt == "PPM" and img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    # no timestamps or text chunks, so equal arrays give equal bytes
    Image.fromarray(img).save(path, format=fmt)


def read_multi(path, n_images=None):
    """Multi-image correspondences: ``{"points": [{"id", "obs": {"k": [x, y]}}], "lines": [...]}``."""
    data = json.loads(Path(path).read_text())
    points = {str(p["id"]): {int(k): np.asarray(v, float) for k, v in p["obs"].items()} for p in data.get("points", [])}
    lines = {str(l["id"]): {int(k): np.asarray(v, float) for k, v in l["obs"].items()} for l in data.get("lines", [])}
    seen = [k for obs in list(points.values()) + list(lines.values()) for k in obs]
    n = n_images if n_images is not None else (max(seen) + 1 if seen else 0)
    return MultiViewFeatures(n, points, lines)


def write_multi(path, mv):
    def dump(items):
        return [{"id": i, "obs": {str(k): np.asarray(v).tolist() for k, v in sorted(obs.items())}} for i, obs in sorted(items.items())]

    Path(path).write_text(json.dumps({"points": dump(mv.points), "lines": dump(mv.lines)}, indent=1))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_report(path, report):
    Path(path).write_text(json.dumps(_jsonable(report), indent=1, sort_keys=True))


def _polyline(pts, color, width=1.0):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
    return f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}"/>'


def _grid_lines(grid, verts):
    V = np.asarray(verts, float).reshape(grid.rows, grid.cols, 2)
    return [V[r] for r in range(grid.rows)] + [V[:, c] for c in range(grid.cols)]


def mesh_svg(model):
    """SVG of one fitted pair: rest grid, deformed grid, cross-line and salient samples.

    Cross-line samples are drawn in the reference frame, red inside the
    overlap and green in the non-overlapping part.
    """
    grid = model.grid
    deformed = model.deformed_vertices().reshape(-1, 2)
    allpts = np.concatenate([grid.vertices, deformed])
    lo = np.floor(allpts.min(axis=0)) - 5
    hi = np.ceil(allpts.max(axis=0)) + 5
    size = hi - lo
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{lo[0]:.0f} {lo[1]:.0f} {size[0]:.0f} {size[1]:.0f}" '
        f'width="{size[0]:.0f}" height="{size[1]:.0f}">'
    ]
    out += [_polyline(l, "gray", 0.8) for l in _grid_lines(grid, grid.vertices)]
    out += [_polyline(l, "blue", 0.8) for l in _grid_lines(grid, deformed)]
    if model.samples is not None:
        for line in model.samples.u_lines + model.samples.v_lines:
            pts = model.warp(line.points)
            for p, om in zip(np.atleast_2d(pts), line.in_omega):
                color = "green" if om else "red"
                out.append(f'<circle cx="{p[0]:.2f}" cy="{p[1]:.2f}" r="1.5" fill="{color}"/>')
    for seg in model.salient:
        out.append(_polyline(np.atleast_2d(model.warp(seg.points)), "orange", 1.5))
    out.append("</svg>")
    return "\n".join(out) + "\n"
