"""Command-line entry point: ``spstitch {stitch2,stitchn,eval,synth}``."""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, geometry, io, meshwarp, pipeline
from .errors import StitchError
from .features import Correspondences
from .synthetic import SceneSpec, generate_scene

log = logging.getLogger("spstitch")


def _add_common(p):
    p.add_argument("--mode", choices=pipeline.MODES, default="mesh")
    p.add_argument("--cell", type=float, default=40.0, help="mesh cell size in pixels")
    p.add_argument("--spacing", type=float, default=None, help="sampling spacing (default: half a cell)")
    p.add_argument("--lambda-l", type=float, default=5.0)
    p.add_argument("--lambda-ps", type=float, default=50.0)
    p.add_argument("--lambda-pj", type=float, default=5.0)
    p.add_argument("--lambda-s", type=float, default=5.0)
    p.add_argument("--apap-sigma", type=float, default=None)
    p.add_argument("--apap-gamma", type=float, default=0.0025)
    p.add_argument("--ransac-threshold", type=float, default=2.0)
    p.add_argument("--ransac-iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)


def _config(args):
    return pipeline.StitchConfig(
        mode=args.mode,
        cell=args.cell,
        lambdas=meshwarp.Lambdas(args.lambda_l, args.lambda_ps, args.lambda_pj, args.lambda_s),
        apap_sigma=args.apap_sigma,
        apap_gamma=args.apap_gamma,
        spacing=args.spacing,
        ransac_threshold=args.ransac_threshold,
        ransac_iterations=args.ransac_iterations,
        seed=args.seed,
    )


def cmd_stitch2(args):
    cfg = _config(args)
    target = io.read_image(args.target)
    reference = io.read_image(args.reference)
    corr = Correspondences.load(args.corr) if args.corr else None
    res = pipeline.stitch_two(target, reference, corr, cfg)
    io.write_image(args.output, res.image)
    if args.dump_mesh:
        Path(args.dump_mesh).write_text(io.mesh_svg(res.models[0]))
    if args.report:
        io.write_report(args.report, res.diagnostics)
    log.info("wrote %s (%dx%d), rmse %s", args.output, res.canvas.width, res.canvas.height, res.diagnostics["rmse"])


def cmd_stitchn(args):
    cfg = _config(args)
    images = [io.read_image(p) for p in args.images]
    mv = io.read_multi(args.corr, len(images)) if args.corr else None
    res = pipeline.stitch_multi(images, args.ref_index, cfg, mv)
    io.write_image(args.output, res.image)
    if args.report:
        io.write_report(args.report, res.diagnostics)
    log.info("wrote %s with reference %d", args.output, res.diagnostics["reference"])


def _outliers(model, scene):
    tgt, ref = scene.images[1], scene.images[0]
    h, w = tgt.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    overlap = scene.rect.contains(geometry.apply(model.H, pts)).reshape(h, w)
    return evaluation.outlier_pct(model.warp, tgt, ref, overlap)


def run_eval(spec, reps, cfg, outliers=True):
    """Per-mode train/test RMSE (and %outliers) averaged over seeded repetitions."""
    modes = pipeline.MODES
    rows = {m: {"train": [], "test": [], "outliers": []} for m in modes}
    for rep in range(reps):
        scene = generate_scene(SceneSpec(**{**spec.__dict__, "seed": spec.seed + rep, "render": outliers}))
        train, test = evaluation.split_train_test(scene.corr, spec.seed + rep)
        for m in modes:
            model = pipeline.fit_pair(train, scene.rect, scene.rect, pipeline.with_mode(cfg, m))
            rows[m]["train"].append(evaluation.rmse(model.warp, train.pts_a, train.pts_b))
            rows[m]["test"].append(evaluation.rmse(model.warp, test.pts_a, test.pts_b))
            if outliers:
                rows[m]["outliers"].append(_outliers(model, scene))
    return {
        m: {k: (float(np.mean(v)) if v else None) for k, v in r.items()} | {"per_rep": r}
        for m, r in rows.items()
    }


def cmd_eval(args):
    data = json.loads(Path(args.scene).read_text()) if args.scene else {}
    spec = SceneSpec.from_json(data)
    report = run_eval(spec, args.reps, _config(args), outliers=not args.no_outliers)
    for m, r in report.items():
        extra = "" if r["outliers"] is None else f"  outliers {r['outliers']:.2f}%"
        print(f"{m:>11}: train {r['train']:.4f}  test {r['test']:.4f}{extra}")
    if args.output:
        io.write_report(args.output, report)


def cmd_synth(args):
    spec = SceneSpec(
        planes=args.planes,
        noise=args.noise,
        seed=args.seed,
        n_images=args.images,
        width=args.width,
        height=args.height,
    )
    scene = generate_scene(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(scene.images):
        io.write_image(out / f"img{k}.png", img)
    scene.corr.save(out / "corr.json")
    if scene.multi is not None:
        io.write_multi(out / "multi.json", scene.multi)
    truth = {
        f"H_{k}_to_0": [scene.homography(k, i, 0).tolist() for i in range(spec.planes)]
        for k in range(1, spec.n_images)
    }
    io.write_report(out / "truth.json", truth)
    log.info("scene written to %s", out)


def build_parser():
    parser = argparse.ArgumentParser(prog="spstitch", description="Single-perspective image stitching.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stitch2", help="stitch a target image onto a reference")
    p.add_argument("target")
    p.add_argument("reference")
    p.add_argument("--corr", help="correspondence JSON (skips detection)")
    p.add_argument("--dump-mesh", metavar="SVG")
    p.add_argument("--report", metavar="JSON")
    p.add_argument("-o", "--output", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_stitch2)

    p = sub.add_parser("stitchn", help="stitch several images into one panorama")
    p.add_argument("images", nargs="+")
    p.add_argument("--ref-index", type=int, default=None)
    p.add_argument("--corr", help="multi-image correspondence JSON")
    p.add_argument("--report", metavar="JSON")
    p.add_argument("-o", "--output", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_stitchn)

    p = sub.add_parser("eval", help="train/test RMSE of every warp on synthetic scenes")
    p.add_argument("--scene", help="scene parameters as JSON (SceneSpec fields)")
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--no-outliers", action="store_true", help="skip rendering and %%outliers")
    p.add_argument("-o", "--output", metavar="JSON")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    p.add_argument("--planes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--images", type=int, default=2)
    p.add_argument("--width", type=int, default=400)
    p.add_argument("--height", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (StitchError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
