"""Command-line interface: ``regsynth {generate,register,sweep,predict}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .deformation import write_field
from .evaluation import (
    METHODS,
    SweepGrid,
    final_registration,
    load_config,
    merge_config,
    registration_error,
    run_sweep_dir,
    vem_config,
)
from .forest import ForestModel, predict
from .imagecore import gaussian_derivative_features, read_image, write_raster
from .synthgen import SynthConfig, generate_dataset, read_landmarks_csv
from .vem import run_vem

log = logging.getLogger("regsynth")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _config(args) -> dict:
    cfg = load_config(args.config)
    if getattr(args, "shift_step", None) is not None:
        cfg = merge_config(cfg, {"vem": {"shift_step_mm": args.shift_step}})
    if getattr(args, "trees", None) is not None:
        cfg = merge_config(cfg, {"forest": {"n_trees": args.trees}})
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    syn = dict(cfg["synthesis"])
    for key in ("sigma_v", "size", "spacing", "n_landmarks", "seed", "sigma_k"):
        val = getattr(args, key)
        if val is not None:
            syn[key] = val
    sc = SynthConfig(**syn)
    paths = generate_dataset(args.out, args.n_pairs, sc)
    log.info("wrote %d pair(s) to %s", len(paths), args.out)
    return 0


def cmd_register(args) -> int:
    cfg = _config(args)
    ref = read_image(args.ref)
    flo = read_image(args.float)
    if ref.shape != flo.shape:
        raise ValueError("reference and floating images must share a grid")
    lm = None
    if args.landmarks:
        lm = read_landmarks_csv(args.landmarks, cfg["synthesis"]["sigma_k"])
        if args.n_landmarks is not None:
            lm = lm.subset(args.n_landmarks)
    t0 = time.perf_counter()
    prediction, vem_info, catalog = None, None, None
    if args.method != "mi":
        # with a single pair, joint and independent training coincide
        vc = vem_config(cfg, args.seed)
        catalog = vc.catalog
        res = run_vem([(ref, flo)], [lm], vc)
        prediction = res.predictions[0]
        vem_info = {"iterations": res.iterations, "converged": res.converged, "history": res.history}
        if args.model_out:
            res.model.save(args.model_out)
        if args.posterior_out:
            q = res.posteriors[0]
            stem = Path(args.posterior_out)
            shift = q.argmax_shift(catalog)
            write_raster(f"{stem}_argmax_x.raw", shift[0], ref.spacing)
            write_raster(f"{stem}_argmax_y.raw", shift[1], ref.spacing)
            write_raster(f"{stem}_entropy.raw", q.entropy(), ref.spacing)
    field, report = final_registration(ref, flo, prediction, lm, args.method, args.spacing_mm, cfg, args.final,
                                       catalog)
    runtime = time.perf_counter() - t0
    if args.out_field:
        write_field(args.out_field, field)
    report = {"method": args.method, "final": args.final, "spacing_mm": args.spacing_mm,
              "n_landmarks": 0 if lm is None else len(lm), "runtime_s": runtime, "registration": report,
              "vem": vem_info}
    if args.truth:
        from .deformation import read_field

        mask = None
        if args.mask:
            mask = read_image(args.mask).data > 127
        mean, mx = registration_error(field, read_field(args.truth), mask)
        report["error"] = {"mean_mm": mean, "max_mm": mx}
        log.info("registration error: mean %.3f mm, max %.3f mm", mean, mx)
    text = json.dumps(report, indent=2, default=_json_default)
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text + "\n")
    return 0


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = SweepGrid(args.spacings, args.n_landmarks, tuple(args.methods.split(",")), args.final)
    report = run_sweep_dir(args.dataset, grid, args.out, cfg, args.seed, args.workers,
                           record_runtime=not args.omit_runtime)
    log.info("wrote %d row(s) to %s", len(report.rows), args.out)
    return 0


def cmd_predict(args) -> int:
    model = ForestModel.load(args.model)
    img = read_image(args.image)
    cfg = _config(args)
    feats = gaussian_derivative_features(img, tuple(cfg["vem"]["scales_mm"]), int(cfg["vem"]["max_order"]))
    if feats.n_features != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, image yields {feats.n_features}")
    pred = predict(model, feats)
    write_raster(args.out_mean, pred.mean, img.spacing)
    if args.out_var:
        write_raster(args.out_var, pred.var, img.spacing)
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(json.dumps(_config(args), indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regsynth", description="Joint synthesis and registration of 2D image pairs.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration overriding the defaults")
        sp.add_argument("--shift-step", type=float, help="shift catalog step in mm (coarser is faster)")
        sp.add_argument("--trees", type=int, help="number of trees in the forest")

    g = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-pairs", type=int, default=20)
    g.add_argument("--sigma-v", type=float)
    g.add_argument("--size", type=int)
    g.add_argument("--spacing", type=float)
    g.add_argument("--n-landmarks", type=int)
    g.add_argument("--sigma-k", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("register", help="register one image pair")
    common(r)
    r.add_argument("--ref", required=True, help="reference image M (PNG or PGM)")
    r.add_argument("--float", required=True, help="floating image H (PNG or PGM)")
    r.add_argument("--method", choices=METHODS, default="joint")
    r.add_argument("--spacing-mm", type=float, default=6.0, help="FFD control-point spacing")
    r.add_argument("--landmarks", help="landmark CSV (id,kx_px,ky_px,khx_px,khy_px)")
    r.add_argument("--n-landmarks", type=int, help="use only the first N landmarks")
    r.add_argument("--final", choices=("graphcut", "ffd"), default="ffd")
    r.add_argument("--out-field", help="write the estimated displacement field (float32 raw + JSON)")
    r.add_argument("--report", help="write the JSON report here instead of stdout")
    r.add_argument("--model-out", help="save the trained forest")
    r.add_argument("--posterior-out", help="prefix for argmax-shift and entropy rasters")
    r.add_argument("--truth", help="ground-truth field, to report the registration error")
    r.add_argument("--mask", help="evaluation mask image (nonzero = inside)")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_register)

    s = sub.add_parser("sweep", help="error sweep over spacings, landmark counts and methods")
    common(s)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="CSV output path")
    s.add_argument("--spacings", type=_floats, default=(3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0))
    s.add_argument("--n-landmarks", type=_ints, default=(0,))
    s.add_argument("--methods", default=",".join(METHODS))
    s.add_argument("--final", choices=("graphcut", "ffd"), default="ffd")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--omit-runtime", action="store_true", help="write runtime_s as 0 for reproducible CSVs")
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("predict", help="apply a saved forest to an image")
    common(pr)
    pr.add_argument("--model", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out-mean", required=True)
    pr.add_argument("--out-var")
    pr.set_defaults(func=cmd_predict)

    c = sub.add_parser("config", help="print the effective configuration")
    common(c)
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
