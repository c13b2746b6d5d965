"""Command-line entry point: ``sesaseg <subcommand> ...``.

Every subcommand writes machine-readable artifacts (MVOL, CSV, JSON, PGM,
PLY). Failures print one line, ``error: <category>: <message>``, on stderr
and exit with the code listed in ``EXIT_CODES``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .distance import DPM_VARIANTS, DistanceProbabilityMap, dpm_from_labels, signed_edt
from .errors import DivergenceError, SesaError
from .experiments import PRESETS, median_of, median_shift_drop, run_points, split_cases
from .losses import ARMS, Weights, total_loss
from .metrics import CSV_COLUMNS, evaluate_case, otsu_scar_labels
from .model import (
    KINDS,
    T_LA,
    TrainConfig,
    TrainLog,
    case_targets,
    forward,
    infer_from_outputs,
    init_model,
    save_checkpoint,
    train,
)
from .phantom import generate_suite, scaled_spec, load_case, load_suite
from .surface import classify_surface, export_labeled_surface_ply, hard_boundary_mask, project_volume_labels
from .volume import Volume3, export_slice_pgm, load, save

EXIT_CODES = {
    "usage": 2,
    "empty-class": 3,
    "invalid-input": 4,
    "io": 5,
    "grid-mismatch": 6,
    "divergence": 7,
    "degenerate-input": 8,
    "bad-mvol": 9,
    "bad-header": 10,
    "payload-length": 11,
    "non-finite": 12,
    "unknown-kind": 13,
}

OUT_ENV = "SESASEG_OUT_DIR"
PRED_FILES = {"la_prob": "la_prob.mvol", "p_normal": "p_normal.mvol", "p_scar": "p_scar.mvol"}


class _Parser(argparse.ArgumentParser):
    """Reports usage errors on a single line."""

    def error(self, message):
        sys.stderr.write(f"error: usage: {message}\n")
        sys.exit(EXIT_CODES["usage"])


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=88, max_help_position=32)


def _out(path):
    """Output path; relative paths land under ``$SESASEG_OUT_DIR`` when it is set."""
    p = Path(path)
    base = os.environ.get(OUT_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _outfile(path):
    p = _out(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _triple(text, cast=float):
    parts = [cast(v) for v in str(text).split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise SesaError(f"expected one or three comma-separated values, got {text!r}")
    return tuple(parts)


def _window(text):
    lo, _, hi = text.partition(",")
    try:
        return float(lo), float(hi)
    except ValueError:
        raise SesaError(f"window must be 'lo,hi', got {text!r}") from None


def _write_csv(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _is_suite(path):
    return (Path(path) / "manifest.json").is_file()


def _load_predictions(directory):
    d = Path(directory)
    la = load(d / PRED_FILES["la_prob"])
    pn = load(d / PRED_FILES["p_normal"])
    ps = load(d / PRED_FILES["p_scar"])

    return la, DistanceProbabilityMap(pn.data, ps.data, "model")


def _save_predictions(directory, state, spacing):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for key, arr in (("la_prob", state.y_hat), ("p_normal", state.p_normal), ("p_scar", state.p_scar)):
        save(d / PRED_FILES[key], Volume3(np.asarray(arr, dtype=np.float64), spacing), "probability")


# ---------------------------------------------------------------- subcommands

def cmd_gen_phantom(args):
    n_train = args.train if args.train is not None else round(args.cases * 2 / 3)
    n_test = args.cases - n_train
    spec = scaled_spec(_triple(args.dims, int), _triple(args.spacing))
    manifest, _ = generate_suite(n_train, n_test, spec, seed=args.seed, out_dir=_out(args.out))
    print(json.dumps({"cases": len(manifest["cases"]), "out": str(_out(args.out))}))


def cmd_dtm(args):
    label = load(args.input)
    phi = signed_edt(label, args.beta, args.clip, spacing_aware=args.spacing_aware)
    save(_outfile(args.out), Volume3(phi.values, label.spacing), "distance")


def cmd_dpm(args):
    labels = load(args.input)
    dpm = dpm_from_labels(labels, args.variant, args.beta, args.clip, args.spacing_aware)
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save(out / PRED_FILES["p_normal"], Volume3(dpm.p_normal, labels.spacing), "probability")
    save(out / PRED_FILES["p_scar"], Volume3(dpm.p_scar, labels.spacing), "probability")
    if dpm.p_background is not None:
        save(out / "p_background.mvol", Volume3(dpm.p_background, labels.spacing), "probability")


def cmd_loss_eval(args):
    la_prob = load(args.pred_la)
    d = Path(args.pred_dpm)
    dpm = DistanceProbabilityMap(load(d / PRED_FILES["p_normal"]).data,
                                 load(d / PRED_FILES["p_scar"]).data, "model")
    case = load_case(args.gt)
    targets = case_targets(case, args.beta, args.clip, args.variant)
    weights = Weights.parse(args.weights)
    report = total_loss(la_prob.data, dpm, targets, weights, args.m2_mode, args.arm, args.metric,
                        mean=args.mean)
    _write_json(_out(args.out), {
        "terms": report.terms(),
        "weights": report.weights,
        "arm": args.arm,
        "m2_mode": args.m2_mode,
        "metric": args.metric,
        "reduction": "mean" if args.mean else "sum",
    })


def _train_config(args):
    cfg = TrainConfig(
        iterations=args.iters,
        lr=args.lr,
        lr_step=args.lr_step,
        weights=Weights.parse(args.weights),
        arm=args.arm,
        m2_mode=args.m2_mode,
        metric=args.metric,
        variant=args.variant,
        beta=args.beta,
        reduction="sum" if args.sum else "mean",
        dtype=args.dtype,
        seed=args.seed,
    )
    return cfg.paper_schedule() if args.paper_schedule else cfg


def cmd_train(args):
    _, cases, splits = load_suite(args.suite)
    train_cases, test_cases = split_cases(cases, splits)
    cfg = _train_config(args)
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(args.kind, train_cases[0].intensity.dims, seed=args.seed)
    log = TrainLog()
    _write_json(out / "config.json", {"kind": args.kind, "suite": str(args.suite),
                                      "version": __version__, **cfg.to_dict()})
    try:
        model, log = train(model, train_cases, cfg, log=log)
    except DivergenceError as err:
        log.write(out / "trainlog.csv")
        save_checkpoint(err.checkpoint, out / "checkpoint")
        raise
    log.write(out / "trainlog.csv")
    save_checkpoint(model, out / "checkpoint")
    chosen = {"test": test_cases, "train": train_cases, "all": train_cases + test_cases,
              "none": []}[args.predict]
    for case in chosen:
        _save_predictions(out / "predictions" / case.case_id, forward(model, case.intensity),
                          case.intensity.spacing)
    print(json.dumps({"iterations": cfg.iterations, "log_checksum": log.checksum(),
                      "final_total": log.rows[-1]["total"] if log.rows else None}))


def _gt_cases(gt, split):
    if _is_suite(gt):
        _, cases, splits = load_suite(gt)
        keep = sorted(k for k in cases if split == "all" or splits[k] == split)
        return [cases[k] for k in keep]
    return [load_case(gt)]


def cmd_evaluate(args):
    cases = _gt_cases(args.gt, args.split)
    rows = []
    for case in cases:
        gt_la = case.la_label.data
        gt_labels = case.wall_scar_label.data
        spacing = case.la_label.spacing
        if args.otsu:
            pred_la, pred_labels = gt_la, otsu_scar_labels(case.intensity, gt_la)
        else:
            if args.pred is None:
                raise SesaError("evaluate needs --pred unless --otsu is given")
            pred_dir = Path(args.pred)
            if (pred_dir / "predictions").is_dir():
                pred_dir = pred_dir / "predictions"
            if (pred_dir / case.case_id).is_dir():
                pred_dir = pred_dir / case.case_id
            la_prob, dpm = _load_predictions(pred_dir)
            pred_la = (la_prob.data > args.t_la).astype(np.float64)
            if pred_la.any():
                inf = infer_from_outputs(la_prob.data, dpm, spacing, args.t_la)
                pred_labels = inf.scar_label_volume()
            else:
                pred_labels = np.zeros_like(gt_la)
        rep = evaluate_case(case.case_id, pred_la, pred_labels, gt_la, gt_labels, spacing,
                            args.radius, args.percentile, args.surface_from)
        rows.append(rep.row())
    _write_csv(_out(args.out), CSV_COLUMNS, rows)


def cmd_project(args):
    scar = load(args.scar)
    la = load(args.surface_from)
    surface = project_volume_labels(scar, hard_boundary_mask(la.data).mask, args.radius)
    export_labeled_surface_ply(surface, _outfile(args.out))


def cmd_export_slice(args):
    vol = load(args.input)
    _outfile(args.out).write_bytes(export_slice_pgm(vol, args.axis, args.index,
                                                           _window(args.window)))


def cmd_export_mesh(args):
    if (args.pred is None) == (args.gt is None):
        raise SesaError("give exactly one of --pred or --gt")
    if args.pred is not None:
        la_prob, dpm = _load_predictions(args.pred)
        surface = infer_from_outputs(la_prob.data, dpm, la_prob.spacing, args.t_la).surface
    else:
        case = load_case(args.gt)
        dpm = dpm_from_labels(case.wall_scar_label)
        surface = classify_surface(dpm, hard_boundary_mask(case.la_label.data), case.la_label.spacing)
    export_labeled_surface_ply(surface, _outfile(args.out))


def _seed_list(args):
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return list(range(args.seed, args.seed + args.n_seeds))


def cmd_sweep(args):
    preset = PRESETS[args.preset]
    points = preset.expand(_seed_list(args))
    out = _out(args.out)
    commands = [{"arm": p.arm, "seed": p.seed, "beta": p.beta, "variant": p.variant,
                 "metric": p.metric, "tag": p.tag} for p in points]
    if args.dry_run:
        print(json.dumps({"preset": preset.name, "runs": commands}, indent=2))
        return
    _write_json(out / "commands.json", {"preset": preset.name, "kind": args.kind,
                                        "iterations": args.iters, "runs": commands})
    _, cases, splits = load_suite(args.suite)
    train_cases, test_cases = split_cases(cases, splits)
    base = TrainConfig(iterations=args.iters)
    results = run_points(points, train_cases, test_cases, base, args.kind, shift=preset.shift,
                         jobs=args.jobs)
    extra = ("arm", "seed", "beta", "variant", "metric")
    rows = [[p.arm, p.seed, repr(p.beta), p.variant, p.metric, *rep.row()]
            for p, res in zip(points, results) for rep in res.reports]
    _write_csv(out / "metrics.csv", extra + CSV_COLUMNS, rows)
    # one file per value of the preset's own axis
    axis = {"beta_sweep": "beta", "dpm_variant_sweep": "variant"}.get(preset.name)
    if axis is not None:
        col = extra.index(axis)
        for value in dict.fromkeys(r[col] for r in rows):
            _write_csv(out / f"{axis}_{value}" / "metrics.csv", extra + CSV_COLUMNS,
                       [r for r in rows if r[col] == value])
    summary = {"preset": preset.name, "runs": [
        {"tag": p.tag, "log_checksum": r.log_checksum, "final_total": r.final_total}
        for p, r in zip(points, results)]}
    if preset.shift:
        _write_csv(out / "shift.csv", ("arm", "seed", "case_id", "dice_s", "dice_s_shifted",
                                       "relative_drop"),
                   [[p.arm, p.seed, s.case_id, repr(s.dice_s), repr(s.dice_s_shifted),
                     repr(s.relative_drop)] for p, r in zip(points, results) for s in r.shift])
        summary["medians"] = {
            arm: {m: median_of(results, arm, m) for m in CSV_COLUMNS[1:]}
            | {"shift_drop": median_shift_drop(results, arm)}
            for arm in preset.arms
        }
    _write_json(out / "summary.json", summary)


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--arm", choices=ARMS, default="sesa", help="loss-term set (default: sesa)")
    p.add_argument("--iters", type=int, default=500, help="SGD iterations (default: 500)")
    p.add_argument("--lr", type=float, default=0.05, help="base learning rate (default: 0.05)")
    p.add_argument("--lr-step", type=int, default=400,
                   help="divide the rate by 10 every N iterations (default: 400)")
    p.add_argument("--paper-schedule", action="store_true",
                   help="use base rate 1e-3 and a 4000-iteration step instead")
    p.add_argument("--weights", default="la=0.01,scar=10,m1=0.01,m2=0.001",
                   help="initial loss weights (default: %(default)s)")
    p.add_argument("--m2-mode", choices=("differentiable", "stop_gradient"),
                   default="differentiable", help="gradient flow through the predicted mask")
    p.add_argument("--metric", choices=("l2", "hellinger"), default="l2",
                   help="scar discrepancy (default: l2)")
    p.add_argument("--variant", choices=DPM_VARIANTS, default="exp", help="DPM target variant")
    p.add_argument("--beta", type=float, default=1.0, help="DTM exponent (default: 1)")
    p.add_argument("--sum", action="store_true", help="sum losses over voxels instead of averaging")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="training precision (default: float32)")


def build_parser():
    parser = _Parser(prog="sesaseg", formatter_class=_formatter,
                     description="Joint LA segmentation and surface scar quantification on phantoms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_formatter)
        p.set_defaults(func=fn)
        return p

    p = add("gen-phantom", cmd_gen_phantom, "Generate a seeded phantom suite with a manifest.")
    p.add_argument("--dims", default="32", help="grid size, N or NX,NY,NZ (default: 32)")
    p.add_argument("--spacing", default="1", help="voxel spacing in mm, S or SX,SY,SZ (default: 1)")
    p.add_argument("--cases", type=int, default=15, help="total number of cases (default: 15)")
    p.add_argument("--train", type=int, default=None,
                   help="training cases; the rest are test (default: two thirds)")
    p.add_argument("--seed", type=int, default=7, help="suite seed (default: 7)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("dtm", cmd_dtm, "Signed distance map of a binary label volume.")
    p.add_argument("--in", dest="input", required=True, help="binary label MVOL")
    p.add_argument("--beta", type=float, default=1.0, help="distance exponent (default: 1)")
    p.add_argument("--clip", type=float, default=50.0, help="distance clip (default: 50)")
    p.add_argument("--spacing-aware", action="store_true", help="measure in mm instead of voxels")
    p.add_argument("--out", required=True, help="output MVOL (kind distance)")

    p = add("dpm", cmd_dpm, "Distance probability maps of a {0,1,2} wall/scar label volume.")
    p.add_argument("--in", dest="input", required=True, help="wall/scar label MVOL")
    p.add_argument("--variant", choices=DPM_VARIANTS + ("exp-norm", "expit-norm"), default="exp",
                   help="probability mapping (default: exp)")
    p.add_argument("--beta", type=float, default=1.0, help="distance exponent (default: 1)")
    p.add_argument("--clip", type=float, default=50.0, help="distance clip (default: 50)")
    p.add_argument("--spacing-aware", action="store_true", help="measure in mm instead of voxels")
    p.add_argument("--out", required=True, help="output directory for p_normal/p_scar MVOLs")

    p = add("loss-eval", cmd_loss_eval, "Evaluate every loss term for a prediction against a case.")
    p.add_argument("--pred-la", required=True, help="predicted LA probability MVOL")
    p.add_argument("--pred-dpm", required=True, help="directory with p_normal.mvol and p_scar.mvol")
    p.add_argument("--gt", required=True, help="ground-truth case directory")
    p.add_argument("--weights", default="la=0.01,scar=10,m1=0.01,m2=0.001",
                   help="loss weights (default: %(default)s)")
    p.add_argument("--arm", choices=ARMS, default="sesa", help="loss-term set (default: sesa)")
    p.add_argument("--m2-mode", choices=("differentiable", "stop_gradient"),
                   default="differentiable", help="gradient flow through the predicted mask")
    p.add_argument("--metric", choices=("l2", "hellinger"), default="l2",
                   help="scar discrepancy (default: l2)")
    p.add_argument("--variant", choices=DPM_VARIANTS, default="exp", help="DPM target variant")
    p.add_argument("--beta", type=float, default=1.0, help="DTM exponent (default: 1)")
    p.add_argument("--clip", type=float, default=50.0, help="distance clip (default: 50)")
    p.add_argument("--mean", action="store_true", help="divide every term by the voxel count")
    p.add_argument("--out", required=True, help="output JSON report")

    p = add("train", cmd_train, "Train a model on the train split of a suite.")
    p.add_argument("--suite", required=True, help="suite directory (with manifest.json)")
    p.add_argument("--kind", choices=KINDS, default="conv", help="model kind (default: conv)")
    p.add_argument("--seed", type=int, default=0, help="initialisation seed (default: 0)")
    _add_train_flags(p)
    p.add_argument("--predict", choices=("test", "train", "all", "none"), default="test",
                   help="cases to write predictions for (default: test)")
    p.add_argument("--out", required=True, help="run directory")

    p = add("project", cmd_project, "Project a volumetric scar label onto an LA surface (PLY).")
    p.add_argument("--scar", required=True, help="{0,1,2} wall/scar label MVOL")
    p.add_argument("--surface-from", required=True, help="binary LA label MVOL defining the surface")
    p.add_argument("--radius", type=float, default=3.0, help="search radius in voxels (default: 3)")
    p.add_argument("--out", required=True, help="output PLY")

    p = add("evaluate", cmd_evaluate, "Score predictions against ground truth (9-column CSV).")
    p.add_argument("--pred", default=None,
                   help="run directory, predictions directory or one case's prediction directory")
    p.add_argument("--gt", required=True, help="suite directory or one case directory")
    p.add_argument("--split", choices=("test", "train", "all"), default="test",
                   help="suite split to score (default: test)")
    p.add_argument("--surface-from", choices=("gt", "pred"), default="gt",
                   help="LA surface both labelings are projected onto (default: gt)")
    p.add_argument("--otsu", action="store_true",
                   help="score the Otsu baseline on the true LA instead of --pred")
    p.add_argument("--t-la", type=float, default=T_LA, help="LA threshold (default: 0.5)")
    p.add_argument("--radius", type=float, default=3.0, help="projection radius (default: 3)")
    p.add_argument("--percentile", type=float, default=100.0,
                   help="Hausdorff percentile (default: 100)")
    p.add_argument("--out", required=True, help="output CSV")

    p = add("export-slice", cmd_export_slice, "Write one axis-aligned slice as a PGM image.")
    p.add_argument("--in", dest="input", required=True, help="input MVOL")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z", help="slice normal (default: z)")
    p.add_argument("--index", type=int, required=True, help="slice index")
    p.add_argument("--window", default="0,1", help="intensity window lo,hi (default: 0,1)")
    p.add_argument("--out", required=True, help="output PGM")

    p = add("export-mesh", cmd_export_mesh, "Write the labelled LA surface as a PLY point cloud.")
    p.add_argument("--pred", default=None, help="prediction directory (la_prob, p_normal, p_scar)")
    p.add_argument("--gt", default=None, help="case directory; uses the exact DPM of its labels")
    p.add_argument("--t-la", type=float, default=T_LA, help="LA threshold (default: 0.5)")
    p.add_argument("--out", required=True, help="output PLY")

    p = add("sweep", cmd_sweep, "Run an experiment preset over seeds on a suite.")
    p.add_argument("--preset", choices=sorted(PRESETS), required=True, help="experiment preset")
    p.add_argument("--suite", required=True, help="suite directory (with manifest.json)")
    p.add_argument("--kind", choices=KINDS, default="conv", help="model kind (default: conv)")
    p.add_argument("--iters", type=int, default=500, help="SGD iterations per run (default: 500)")
    p.add_argument("--seed", type=int, default=0, help="first seed (default: 0)")
    p.add_argument("--n-seeds", type=int, default=5, help="number of seeds (default: 5)")
    p.add_argument("--seeds", default=None, help="explicit comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (default: 1)")
    p.add_argument("--dry-run", action="store_true", help="print the run list and exit")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except SesaError as err:
        category = getattr(err, "category", "invalid-input")
        message = " ".join(str(err).split())
        sys.stderr.write(f"error: {category}: {message}\n")
        return EXIT_CODES.get(category, EXIT_CODES["invalid-input"])
    except OSError as err:
        sys.stderr.write(f"error: io: {' '.join(str(err).split())}\n")
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
