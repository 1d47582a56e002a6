"""``mvkc`` command line.

Exit codes: 0 success, 2 usage, 3 degenerate input, 4 format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io, plotting
from .correspondence import fuse_views, multi_view_set
from .descriptor import LinearDescriptorHead, TrainingExample, dataset_loss, train_head
from .estimator import PoseHypothesisGrid, search_estimate
from .evaluation import metric_report
from .geometry import (
    DegeneratePoseError,
    EulerPose,
    PoseRangeError,
    euler_to_rotation,
    pose_error_deg,
    project_points,
    viewpoint_schedule,
)
from .skeleton import (
    CorrespondencePairBatch,
    DenseKeypoints,
    EmptyBatchError,
    PruneConfig,
    densify,
    has_required,
    make_pairs,
    occluded_mask,
)
from .synth import (
    CHAIR,
    DEFAULT_CAMERA,
    HarnessConfig,
    annotation_row,
    closed_loop_views,
    dense_template,
    head_dataset,
    render_oracle,
    subset_ids,
)

logger = logging.getLogger("mvkc")

EXIT_USAGE = 2
EXIT_DEGENERATE = 3
EXIT_FORMAT = 4


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    """Settings shared by the subcommands; any of them may come from ``--config``."""

    template: str | None = None
    camera: str | None = None
    views: int = 3
    samples_per_edge: int = 0
    margin: float = 1.0
    sigma: float = 5.0
    bins: int = 360
    azimuth_step: float = 5.0
    elevations: tuple[float, ...] = (10.0,)
    tilts: tuple[float, ...] = (0.0,)
    seed: int = 0

    def validate(self) -> None:
        for name in ("template", "camera"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise UsageError(f"{name} file {path} does not exist")
        if self.views < 1 or self.samples_per_edge < 0 or self.bins < 2:
            raise UsageError("views >= 1, samples_per_edge >= 0 and bins >= 2 are required")
        if not (self.margin > 0 and self.sigma > 0 and self.azimuth_step > 0):
            raise UsageError("margin, sigma and azimuth_step must be positive")


def load_config(path) -> dict:
    doc = json.loads(Path(path).read_text())
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _template(path):
    return CHAIR if path is None else io.load_template(path)


def _camera(path):
    return DEFAULT_CAMERA if path is None else io.load_camera(path)


def _pose(values) -> EulerPose:
    try:
        return EulerPose(*values)
    except PoseRangeError as err:
        raise UsageError(str(err)) from None


def cmd_schedule(args):
    for p in viewpoint_schedule(args.views):
        print(f"{p.azimuth:g} {p.elevation:g} {p.tilt:g}")


def cmd_synth(args):
    template, cam = _template(args.template), _camera(args.camera)
    pose = _pose(args.pose)
    render = render_oracle(template, cam, pose, args.seed, dim=args.dim,
                           samples_per_edge=args.render_samples, codebook_seed=args.codebook_seed,
                           noise=args.noise, prune_config=None if args.no_prune else PruneConfig())
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    io.write_fgrd(prefix.with_suffix(".fgrd"), render.descriptors)
    io.write_dmap(prefix.with_suffix(".dmap"), render.descriptors)
    io.write_jsonl(prefix.with_suffix(".jsonl"), [annotation_row(prefix.name, template, render)])
    print(prefix.with_suffix(".dmap"))


def _dense_rows(row):
    return [k for k in row["keypoints"] if "dense_id" in k]


def _dense_from_row(row) -> DenseKeypoints:
    kps = _dense_rows(row)
    if not kps:
        raise io.FormatError(f"annotation for {row.get('image')!r} has no dense ids")
    return DenseKeypoints([k["dense_id"] for k in kps], [k["xy"] for k in kps],
                          [k.get("visible", True) for k in kps])


def cmd_densify(args):
    template = _template(args.template)
    out = []
    for row in io.read_jsonl(args.annotations):
        dense = densify(io.annotation_keypoints(row), template.skeleton, args.samples_per_edge,
                        order=template.names)
        names = template.names
        kps = []
        for i, p, v in zip(dense.ids, dense.xy, dense.visible):
            entry = {"dense_id": int(i), "xy": [float(p[0]), float(p[1])], "visible": bool(v)}
            if i < len(names):
                entry["name"] = names[i]
            kps.append(entry)
        out.append({**row, "keypoints": kps})
    io.write_jsonl(args.out, out)


def cmd_pairs(args):
    rows = {r["image"]: r for r in io.read_jsonl(args.annotations)}
    try:
        r1, r2 = rows[args.image1], rows[args.image2]
    except KeyError as err:
        raise UsageError(f"image {err} not in {args.annotations}") from None
    if args.template is not None:
        required = io.load_template(args.template).required_visible
        for r in (r1, r2):
            if not has_required(io.annotation_keypoints(r), required):
                print(f"skipping: {r['image']} lacks required keypoints", file=sys.stderr)
                return EXIT_DEGENERATE
    batch = make_pairs(_dense_from_row(r1), _dense_from_row(r2), args.negatives, args.seed,
                       (args.height, args.width), args.negative_radius)
    Path(args.out).write_text(json.dumps(_batch_to_json(batch)) + "\n")


def _batch_to_json(b: CorrespondencePairBatch) -> dict:
    return {"xy1": b.xy1.tolist(), "xy2": b.xy2.tolist(), "labels": b.labels.tolist(), "ids": b.ids.tolist()}


def _batch_from_json(doc) -> CorrespondencePairBatch:
    return CorrespondencePairBatch(doc["xy1"], doc["xy2"], doc["labels"], doc.get("ids"))


def cmd_train_head(args):
    if args.dataset:
        data = []
        base = Path(args.dataset).parent
        for row in io.read_jsonl(args.dataset):
            pairs = _batch_from_json(json.loads((base / row["pairs"]).read_text()))
            data.append(TrainingExample(io.read_fgrd(base / row["features1"]),
                                        io.read_fgrd(base / row["features2"]), pairs))
        head = LinearDescriptorHead.random(data[0].features1.shape[2], args.dim, args.seed)
    else:
        _, data = head_dataset(seed=args.seed)
        head = LinearDescriptorHead.random(data[0].features1.shape[2], args.dim, args.seed)
    trained, trace = train_head(head, data, args.steps, args.learning_rate, args.margin,
                                args.seed, args.batch_size)
    Path(args.out).write_text(json.dumps({"weight": trained.weight.tolist(), "bias": trained.bias.tolist()}) + "\n")
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows((i + 1, f"{v:.9g}") for i, v in enumerate(trace))
        plotting.loss_trace(trace, Path(args.trace).with_suffix(".png"))
    print(f"initial {trace[0]:.6g} final {dataset_loss(trained, data, args.margin):.6g}")


def _view_keypoints(template, cam, schedule, samples, view_annotations):
    kp3d = dense_template(template, samples)
    n = len(template.keypoints)
    per_view = []
    if view_annotations:
        if len(view_annotations) != len(schedule):
            raise UsageError("one view annotation per view descriptor map is required")
        for path in view_annotations:
            rows = io.read_jsonl(path)
            if len(rows) != 1:
                raise io.FormatError(f"{path}: expected a single annotation row")
            dense = _dense_from_row(rows[0])
            rendered = len(dense) - n
            if len(template.skeleton) == 0:
                s_render = 0
            elif rendered % len(template.skeleton):
                raise io.FormatError(f"{path}: dense id count does not fit the template skeleton")
            else:
                s_render = rendered // len(template.skeleton)
            ids = subset_ids(template, samples, s_render)
            lookup = {int(i): (float(p[0]), float(p[1]))
                      for i, p, v in zip(dense.ids, dense.xy, dense.visible) if v}
            per_view.append([(k, lookup.get(i)) for k, i in enumerate(ids)])
        return kp3d, per_view
    pts = np.array([k.position for k in kp3d])
    for pose in schedule:
        xy, depth, vis = project_points(pts, euler_to_rotation(pose), cam)
        vis = vis & ~occluded_mask(np.nan_to_num(xy), depth, vis)
        per_view.append([(k, (float(xy[k, 0]), float(xy[k, 1])) if vis[k] else None) for k in range(len(pts))])
    return kp3d, per_view


def cmd_corrmap(args):
    template, cam = _template(args.template), _camera(args.camera)
    query = io.read_dmap(args.query)
    views = [io.read_dmap(p) for p in args.views]
    schedule = viewpoint_schedule(len(views))
    _, per_view = _view_keypoints(template, cam, schedule, args.samples_per_edge, args.view_annotations)
    mvk = multi_view_set(views, per_view, query)
    io.write_cset(args.out, mvk)
    print(f"m={mvk.m} N={mvk.n} h={mvk.shape[0]} w={mvk.shape[1]}")
    if args.figure:
        titles = [f"v{v + 1} k{k}" for v in range(mvk.m) for k in range(mvk.n)]
        plotting.correspondence_grid(mvk.channels, args.figure, titles, cols=mvk.n)


def cmd_fuse(args):
    sets = [io.read_cset(p) for p in args.inputs]
    fused = fuse_views([v for s in sets for v in s.maps])
    io.write_cset(args.out, fused)


def cmd_estimate(args):
    template, cam = _template(args.template), _camera(args.camera)
    mvk = io.read_cset(args.cset)
    kp3d = dense_template(template, args.samples_per_edge)
    grid = PoseHypothesisGrid.regular(args.azimuth_step, args.elevations, args.tilts)
    try:
        result = search_estimate(mvk, kp3d, cam, grid, viewpoint_schedule(mvk.m), args.bins)
    except ValueError as err:
        raise io.FormatError(str(err)) from None
    p = result.pose
    print(f"{p.azimuth:g} {p.elevation:g} {p.tilt:g}")
    if args.scores:
        io.write_scored_grid(args.scores, result)
    if args.distributions:
        io.write_distributions(args.distributions, result)


def cmd_eval(args):
    preds = io.read_jsonl(args.predictions)
    if not preds:
        raise UsageError("no predictions")
    gt_rows = io.read_jsonl(args.ground_truth)
    if args.mode == "pose":
        records = io.load_pose_records(preds, gt_rows)
        report = metric_report(records=records)
        errors = [r.error_deg for r in records]
    else:
        report = metric_report(detections=io.load_detections(preds),
                               ground_truth=io.load_ground_truth_objects(gt_rows),
                               avp_views=args.avp_views)
        errors = None
    text = json.dumps(report, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.figures and errors is not None:
        out = Path(args.figures)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "error_deg"])
            w.writerows((r.image, f"{e:.6f}") for r, e in zip(records, errors))
        plotting.acc_curve(errors, out / "acc_theta.png")


def cmd_heatmap(args):
    mvk = io.read_cset(args.cset)
    ch = mvk.channels
    if not 0 <= args.channel < len(ch):
        raise UsageError(f"channel {args.channel} out of range 0..{len(ch) - 1}")
    io.write_heatmap(args.out, ch[args.channel], color=args.color)


def cmd_ablate(args):
    rng = np.random.default_rng(args.seed)
    views = sorted(set(args.views_list))
    cfg = HarnessConfig(noise=args.noise, samples_per_edge=args.render_samples,
                        azimuth_step=args.azimuth_step, prune=not args.no_prune)
    errors = {m: [] for m in views}
    for trial in range(args.trials):
        gt = EulerPose(float(rng.uniform(0.0, 360.0)), 10.0, 0.0)
        for m, (res, _) in closed_loop_views(gt, args.seed * 100003 + trial, views, cfg).items():
            errors[m].append(pose_error_deg(res.pose, gt))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for m in views:
        e = np.sort(errors[m])
        rows.append({"views": m, "med_err": float(e[(len(e) - 1) // 2]), "mean_err": float(e.mean()),
                     "acc_pi_6": float(np.mean(e < 30.0))})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    plotting.view_ablation(views, [r["med_err"] for r in rows], [r["acc_pi_6"] for r in rows],
                           out / "ablation.png")
    for r in rows:
        print(f"{r['views']}\t{r['med_err']:.3f}\t{r['mean_err']:.3f}\t{r['acc_pi_6']:.3f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvkc", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    def geometry_flags(sp):
        sp.add_argument("--template", help="template JSON (default: built-in chair)")
        sp.add_argument("--camera", help="camera JSON (default: built-in 128x128 camera)")

    s = add("schedule", cmd_schedule, "print the fixed render viewpoints")
    s.add_argument("-m", "--views", type=int, required=True)

    s = add("synth", cmd_synth, "render oracle descriptors for a pose")
    geometry_flags(s)
    s.add_argument("--pose", type=float, nargs=3, required=True, metavar=("AZ", "EL", "TI"))
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--render-samples", type=int, default=3, help="skeleton samples per edge to stamp")
    s.add_argument("--codebook-seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--no-prune", action="store_true")

    s = add("densify", cmd_densify, "add skeleton samples to sparse annotations")
    geometry_flags(s)
    s.add_argument("--annotations", required=True)
    s.add_argument("--samples-per-edge", type=int, default=3)
    s.add_argument("--out", required=True)

    s = add("pairs", cmd_pairs, "positive/negative pairs between two annotated images")
    s.add_argument("--template", help="template JSON carrying required_visible")
    s.add_argument("--annotations", required=True)
    s.add_argument("--image1", required=True)
    s.add_argument("--image2", required=True)
    s.add_argument("--negatives", type=int, default=3)
    s.add_argument("--negative-radius", type=float, default=8.0)
    s.add_argument("--height", type=int, required=True)
    s.add_argument("--width", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("train-head", cmd_train_head, "fit the 1x1 descriptor head with Adam")
    s.add_argument("--dataset", help="JSON lines of {features1, features2, pairs}; default synthetic")
    s.add_argument("--dim", type=int, default=8)
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--learning-rate", type=float, default=0.001)
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="CSV loss trace; a PNG plot is written beside it")

    s = add("corrmap", cmd_corrmap, "multi-view correspondence set for a query map")
    geometry_flags(s)
    s.add_argument("--query", required=True)
    s.add_argument("--views", nargs="+", required=True, help="view DMAPs in schedule order")
    s.add_argument("--view-annotations", nargs="+")
    s.add_argument("--samples-per-edge", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--figure", help="PNG grid of all channels")

    s = add("fuse", cmd_fuse, "concatenate CSET files view-major")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--out", required=True)

    s = add("estimate", cmd_estimate, "exhaustive pose search over a CSET")
    geometry_flags(s)
    s.add_argument("--cset", required=True)
    s.add_argument("--samples-per-edge", type=int, default=0)
    s.add_argument("--azimuth-step", type=float, default=5.0)
    s.add_argument("--elevations", type=float, nargs="+", default=[10.0])
    s.add_argument("--tilts", type=float, nargs="+", default=[0.0])
    s.add_argument("--bins", type=int, default=360)
    s.add_argument("--scores", help="write 'az el ti score' lines")
    s.add_argument("--distributions", help="write per-angle distributions JSON")

    s = add("eval", cmd_eval, "MedErr / Acc_theta or AVP report")
    s.add_argument("--predictions", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--mode", choices=("pose", "detection"), default="pose")
    s.add_argument("--avp-views", type=int, nargs="+", default=[4])
    s.add_argument("--out")
    s.add_argument("--figures", help="directory for errors.csv and acc_theta.png")

    s = add("heatmap", cmd_heatmap, "write one CSET channel as PGM/PPM")
    s.add_argument("--cset", required=True)
    s.add_argument("--channel", type=int, required=True)
    s.add_argument("--color", action="store_true")
    s.add_argument("--out", required=True)

    s = add("ablate", cmd_ablate, "closed-loop error against number of views")
    s.add_argument("--views-list", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6, 7])
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--noise", type=float, default=3.0)
    s.add_argument("--render-samples", type=int, default=3)
    s.add_argument("--azimuth-step", type=float, default=5.0)
    s.add_argument("--no-prune", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="directory for ablation.csv and ablation.png")
    return p


_CONFIG_FLAGS = {"template", "camera", "samples_per_edge", "margin", "azimuth_step",
                 "elevations", "tilts", "bins", "seed"}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            cfg = load_config(args.config)
            explicit = {a.dest for a in _explicit_actions(parser, argv)}
            for key, value in cfg.items():
                if key in _CONFIG_FLAGS and hasattr(args, key) and key not in explicit:
                    setattr(args, key, value)
            PipelineConfig(**cfg).validate()
        return args.func(args) or 0
    except UsageError as err:
        print(f"mvkc: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, json.JSONDecodeError, KeyError) as err:
        print(f"mvkc: format error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except (DegeneratePoseError, EmptyBatchError) as err:
        print(f"mvkc: degenerate input: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValueError, FileNotFoundError) as err:
        print(f"mvkc: error: {err}", file=sys.stderr)
        return EXIT_USAGE


def _explicit_actions(parser, argv):
    """Actions of the chosen subcommand whose option strings appear in ``argv``."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    words = set(argv)
    for sp in sub.choices.values():
        for action in sp._actions:
            if any(o in words or any(w.startswith(o + "=") for w in words) for o in action.option_strings):
                yield action


if __name__ == "__main__":
    sys.exit(main())
