"""Command-line interface: learn-prior, estimate-pose, adjust-shape, eval, synth."""
from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as fio
from . import plotting
from .category import Category, car_category
from .geometry import DegenerateInputError, QuatPose, project_points, rotation_angle
from .metrics import (DEFAULT_THRESHOLDS, MetricReport, UndefinedMetricError, ViewRecord,
                      angle_diff, aop_table, apk, box_iou, hausdorff, mean_abs_angle_error)
from .pose import TooFewPointsError, irls_pose
from .shape_adjust import shape_adjust
from .shape_prior import RankDeficiencyWarning, nrsfm_fit, variance_explained
from .synth import GenerationError, azimuth_of, bbox_of, default_car_prior, synth_generate

log = logging.getLogger("carshape")


class CommandError(RuntimeError):
    """A command failed as a whole (reported, exit status 1)."""


def _write_csv(path, header, rows) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    fio.atomic_write_text(path, buf.getvalue())


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and not np.isfinite(x)) else repr(float(x))


# --------------------------------------------------------------------------
# Commands (also usable from Python).

def cmd_learn_prior(annotations_path, basis_size: int, out_dir, config=None,
                    category: Category | None = None, out=None):
    """Fit a prior to an annotation file; write prior.json and the variance report."""
    out = out or sys.stdout
    config = config or fio.PipelineConfig()
    if basis_size < 1:
        raise ValueError("basis_size must be at least 1")
    data = fio.read_annotations(annotations_path)
    category = category or car_category()
    if tuple(data.keypoint_names) != tuple(category.keypoint_names):
        raise fio.FormatError(f"{annotations_path}: keypoint_names do not match the category")
    if data.n_instances < 2:
        raise CommandError("need at least 2 annotated instances")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RankDeficiencyWarning)
        res = nrsfm_fit(data, basis_size, config.em, category)
    for w in caught:
        log.warning("%s", w.message)
    out_dir = Path(out_dir)
    fio.write_prior(out_dir / "prior.json", res.prior)
    fr = [variance_explained(res.prior, n) for n in range(1, res.prior.n_basis + 1)]
    rows = [(n, f) for n, f in enumerate(fr, 1)]
    _write_csv(out_dir / "variance.csv", ["basis_size", "variance_explained"], [(n, repr(f)) for n, f in rows])
    text = "basis_size  variance_explained\n" + "".join(f"{n:>10}  {f:.8f}\n" for n, f in rows)
    text += f"\nEM iterations: {res.iterations}  converged: {res.converged}\n"
    if res.rejected:
        text += "rejected instances:\n" + "".join(f"  {k}: {v}\n" for k, v in sorted(res.rejected.items()))
    fio.atomic_write_text(out_dir / "variance.txt", text)
    plotting.plot_variance(fr, out_dir / "variance.png")
    out.write(text)
    return res


def _load_inputs(prior_path, keypoints_path, intrinsics_path):
    prior = fio.read_prior(prior_path)
    det = fio.read_detections(keypoints_path, prior.keypoint_names)
    K_cam = fio.read_intrinsics(intrinsics_path)
    return prior, det, K_cam


def cmd_estimate_pose(prior_path, keypoints_path, intrinsics_path, out_dir, config=None,
                      init_path=None, ground_truth_path=None, out=None):
    """Robust pose for every instance; writes poses.json.  Returns the records."""
    out = out or sys.stdout
    config = config or fio.PipelineConfig()
    prior, det, K_cam = _load_inputs(prior_path, keypoints_path, intrinsics_path)
    inits = fio.read_poses(init_path) if init_path else {}
    gt = fio.read_ground_truth(ground_truth_path) if ground_truth_path else {}
    records, errors = [], []
    for iid, obs in det.instances.items():
        init = fio.pose_from_dict(inits[iid], f"init[{iid}]") if iid in inits else None
        try:
            res = irls_pose(prior, obs, K_cam, config.irls, init)
        except TooFewPointsError:
            records.append(fio.failure_record(iid, "insufficient keypoints"))
            continue
        except DegenerateInputError:
            records.append(fio.failure_record(iid, "degenerate configuration"))
            continue
        rec = fio.pose_record(iid, res)
        rec["projected"] = project_points(prior.mean, res.pose, K_cam)
        records.append(rec)
        if iid in gt:
            errors.append(np.degrees(rotation_angle(res.pose.R, fio.pose_from_dict(gt[iid]).R)))
    fio.write_poses(Path(out_dir) / "poses.json", records)
    ok = sum(r["status"] == "ok" for r in records)
    out.write(f"poses: {ok} ok, {len(records) - ok} failed\n")
    if errors:
        e = np.array(errors)
        out.write(f"rotation error vs ground truth: median {np.median(e):.3f} deg, "
                  f"within 5 deg {np.mean(e < 5):.3f}\n")
    if records and ok == 0:
        raise CommandError("pose estimation failed for every instance")
    return records


def cmd_adjust_shape(prior_path, keypoints_path, intrinsics_path, poses_path, out_dir,
                     config=None, out=None):
    """Shape adjustment at the estimated poses; writes reconstructions.json and OBJ files."""
    out = out or sys.stdout
    config = config or fio.PipelineConfig()
    prior, det, K_cam = _load_inputs(prior_path, keypoints_path, intrinsics_path)
    poses = fio.read_poses(poses_path)
    out_dir = Path(out_dir)
    records = []
    for iid, obs in det.instances.items():
        prec = poses.get(iid)
        if prec is None or prec.get("status") != "ok":
            records.append(fio.failure_record(iid, "no pose"))
            continue
        pres = fio.pose_result_from_record(prec, f"poses[{iid}]")
        w = np.nan_to_num(pres.weights, nan=0.0)
        rec = shape_adjust(prior, obs, pres.pose, K_cam, config.energy, weights=w, irls=config.irls)
        if rec.diverged:
            log.warning("instance %s: shape solver diverged; writing best state", iid)
        d = fio.reconstruction_record(iid, rec)
        d["q"], d["t"] = list(pres.pose.q), list(pres.pose.t)
        d["projected"] = project_points(rec.keypoints3d, pres.pose, K_cam)
        records.append(d)
        fio.write_obj(out_dir / "obj" / f"{iid}.obj", rec.keypoints3d, prior.topology, iid)
        b, a = rec.initial_breakdown, rec.energy_breakdown
        out.write(f"{iid}: " + "  ".join(f"{k} {b[k]:.6g} -> {a[k]:.6g}" for k in a) + "\n")
    fio.write_reconstructions(out_dir / "reconstructions.json", records)
    if records and not any(r["status"] == "ok" for r in records):
        raise CommandError("shape adjustment failed for every instance")
    return records


def cmd_eval(pred_dir, gt_dir, out_dir, thresholds=DEFAULT_THRESHOLDS, alpha: float = 0.1,
             iou_threshold: float = 0.7, out=None) -> MetricReport:
    """Compare predictions (poses.json, optional reconstructions.json) with ground truth."""
    out = out or sys.stdout
    pred_dir, gt_dir, out_dir = Path(pred_dir), Path(gt_dir), Path(out_dir)
    gt = fio.read_ground_truth(gt_dir / "ground_truth.json")
    K_cam = fio.read_intrinsics(gt_dir / "intrinsics.json")
    rec_path = pred_dir / "reconstructions.json"
    recs = fio.read_reconstructions(rec_path) if rec_path.exists() else {}
    preds = {k: v for k, v in fio.read_poses(pred_dir / "poses.json").items() if v.get("status") == "ok"}
    for k, v in recs.items():
        if v.get("status") == "ok":
            preds[k] = v
    ids = sorted(set(preds) & set(gt))
    excluded = sorted(set(preds) ^ set(gt))
    if excluded:
        log.warning("excluding %d unmatched instance ids: %s", len(excluded), ", ".join(excluded[:10]))
    if not ids:
        raise UndefinedMetricError("no instance ids in common between predictions and ground truth")
    pv, gv, pkp, gkp, boxes, rot, haus, rows = [], [], [], [], [], [], [], []
    for iid in ids:
        p, g = preds[iid], gt[iid]
        pose = fio.pose_from_dict(p)
        gpose = fio.pose_from_dict(g)
        gshape = np.array(g["keypoints3d"], dtype=float)
        guv = project_points(gshape, gpose, K_cam)
        puv = np.array(p["projected"], dtype=float)
        pr = ViewRecord(bbox_of(puv), azimuth_of(pose.R))
        gr = ViewRecord(tuple(g["bbox"]), float(g["azimuth"]))
        pv.append(pr)
        gv.append(gr)
        pkp.append(puv)
        gkp.append(guv)
        boxes.append(gr.bbox)
        rot.append(np.degrees(rotation_angle(pose.R, gpose.R)))
        h = hausdorff(np.array(p["keypoints3d"]), gshape) if "keypoints3d" in p else None
        haus.append(h)
        rows.append((iid, _fmt(angle_diff(pr.azimuth, gr.azimuth)), _fmt(rot[-1]),
                     _fmt(box_iou(pr.bbox, gr.bbox)), _fmt(h)))
    ap = apk(np.array(pkp), np.array(gkp), np.array(boxes), alpha)
    hv = [h for h in haus if h is not None]
    report = MetricReport(
        aop=aop_table(pv, gv, thresholds, iou_threshold),
        mean_abs_angle_error=mean_abs_angle_error([p.azimuth for p in pv], [g.azimuth for g in gv]),
        apk_per_keypoint=list(ap.per_keypoint),
        apk_mean=ap.mean,
        hausdorff=float(np.mean(hv)) if hv else float("nan"),
        mean_rotation_error=float(np.mean(rot)),
        count=len(ids),
        excluded=excluded,
    )
    fio.write_json(out_dir / "metrics.json", "carshape.metrics", report.to_dict())
    names = None
    try:
        names = fio.read_prior(gt_dir / "generator_prior.json").keypoint_names
    except fio.FormatError:
        names = [f"kp{k}" for k in range(len(ap.per_keypoint))]
    table = report.table(names)
    fio.atomic_write_text(out_dir / "metrics.txt", table)
    _write_csv(out_dir / "per_instance.csv",
               ["id", "azimuth_error_deg", "rotation_error_deg", "iou", "hausdorff_m"], rows)
    plotting.plot_aop_curve([angle_diff(p.azimuth, g.azimuth) for p, g in zip(pv, gv)],
                            [box_iou(p.bbox, g.bbox) for p, g in zip(pv, gv)],
                            out_dir / "aop.png", iou_threshold, thresholds)
    plotting.plot_apk(ap.per_keypoint, names, out_dir / "apk.png")
    out.write(table)
    return report


def cmd_synth(config, out_dir, out=None):
    """Write a synthetic dataset generated from the default car prior."""
    out = out or sys.stdout
    out_dir = Path(out_dir)
    prior = default_car_prior()
    ds = synth_generate(prior, config.synth, config.intrinsics)
    fio.write_prior(out_dir / "generator_prior.json", prior)
    fio.write_intrinsics(out_dir / "intrinsics.json", ds.intrinsics)
    fio.write_annotations(out_dir / "annotations.json", ds.annotations(prior.category))
    det = fio.DetectionSet(prior.keypoint_names, {i.id: i.observations for i in ds.instances})
    fio.write_detections(out_dir / "keypoints.json", det)
    fio.write_ground_truth(out_dir / "ground_truth.json", ds)
    fio.write_poses(out_dir / "init_poses.json",
                    [{"id": i.id, "status": "ok", **fio.pose_to_dict(i.init_pose)} for i in ds.instances])
    out.write(f"synth: {len(ds.instances)} instances written to {out_dir}\n")
    return ds


# --------------------------------------------------------------------------
# Argument parsing.

def _common(p):
    p.add_argument("--config", help="pipeline config JSON (default: $%s if set)" % fio.CONFIG_ENV)
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="carshape", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-prior", help="fit a shape prior to 2D annotations")
    _common(p)
    p.add_argument("--annotations", help="annotation JSON")
    p.add_argument("--basis-size", type=_positive_int, help="number of basis modes (default 5)")
    p.add_argument("--category", help="category definition JSON (default: built-in car)")

    p = sub.add_parser("estimate-pose", help="robust pose from keypoints")
    _common(p)
    p.add_argument("--prior")
    p.add_argument("--keypoints")
    p.add_argument("--intrinsics")
    p.add_argument("--init", help="initial poses JSON")
    p.add_argument("--ground-truth", help="ground-truth JSON for a summary of rotation errors")
    p.add_argument("--max-iters", type=_positive_int, help="IRLS iterations (default 5)")

    p = sub.add_parser("adjust-shape", help="shape adjustment at fixed poses")
    _common(p)
    p.add_argument("--prior")
    p.add_argument("--keypoints")
    p.add_argument("--intrinsics")
    p.add_argument("--poses", required=True)
    p.add_argument("--eta", type=float, nargs=5, metavar=("REPROJ", "PLANAR", "SYM", "DIM", "LAP"))
    p.add_argument("--irls-rounds", type=int)

    p = sub.add_parser("eval", help="metrics of predictions against ground truth")
    _common(p)
    p.add_argument("--pred", required=True, help="directory with poses.json [reconstructions.json]")
    p.add_argument("--gt", required=True, help="synthetic dataset directory")
    p.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--iou", type=float, default=0.7)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--noise", type=float, help="pixel noise sigma")
    p.add_argument("--outliers", type=float, help="outlier fraction")
    p.add_argument("--outlier-magnitude", type=float)
    p.add_argument("--occlusion", type=float, help="occlusion fraction")
    return ap


def _load_config(args) -> fio.PipelineConfig:
    path = args.config or os.environ.get(fio.CONFIG_ENV)
    cfg = fio.read_config(path) if path else fio.PipelineConfig()
    if path:
        cfg.check_paths(Path(path).parent)
    if args.seed is not None:
        cfg.synth = replace(cfg.synth, seed=args.seed)
    if args.log_level:
        cfg.log_level = args.log_level
    return cfg


def _need(value, name, parser):
    if value is None:
        parser.error(f"--{name} is required (or set it in the config)")
    return value


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except (fio.FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        if args.command == "learn-prior":
            cmd_learn_prior(_need(args.annotations or cfg.annotations, "annotations", parser),
                            args.basis_size or cfg.basis_size, args.out, cfg,
                            Category.from_dict(fio.read_json(args.category, "carshape.category"))
                            if args.category else None)
        elif args.command == "estimate-pose":
            if args.max_iters:
                cfg.irls = replace(cfg.irls, max_iters=args.max_iters)
            cmd_estimate_pose(_need(args.prior or cfg.prior, "prior", parser),
                              _need(args.keypoints or cfg.keypoints, "keypoints", parser),
                              _need(args.intrinsics or cfg.intrinsics_path, "intrinsics", parser),
                              args.out, cfg, args.init, args.ground_truth)
        elif args.command == "adjust-shape":
            if args.eta:
                cfg.energy = replace(cfg.energy, eta=tuple(args.eta))
            if args.irls_rounds is not None:
                cfg.energy = replace(cfg.energy, irls_rounds=args.irls_rounds)
            cmd_adjust_shape(_need(args.prior or cfg.prior, "prior", parser),
                             _need(args.keypoints or cfg.keypoints, "keypoints", parser),
                             _need(args.intrinsics or cfg.intrinsics_path, "intrinsics", parser),
                             args.poses, args.out, cfg)
        elif args.command == "eval":
            cmd_eval(args.pred, args.gt, args.out, tuple(args.thresholds), args.alpha, args.iou)
        elif args.command == "synth":
            s = cfg.synth
            over = {k: v for k, v in (("instance_count", args.count), ("pixel_noise_sigma", args.noise),
                                      ("outlier_fraction", args.outliers),
                                      ("outlier_magnitude", args.outlier_magnitude),
                                      ("occlusion_fraction", args.occlusion)) if v is not None}
            cfg.synth = replace(s, **over)
            cmd_synth(cfg, args.out)
    except (fio.FormatError, UndefinedMetricError, GenerationError, CommandError, ValueError,
            OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
