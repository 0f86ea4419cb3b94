"""Command-line pipeline driver: simulate, train, label, evaluate, bench.

Commands stream drives one file at a time so full datasets never have to
fit in memory; only the compact derived artifacts (feature rows, cropped
windows, label vectors) are held across drives.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (
    BelowCriticalSpeed,
    ConfigError,
    FileFormatError,
    NumericError,
    SchemaError,
    UnusableDataset,
)
from .fileio import read_drive, read_json, read_labels, write_drive, write_labels
from .metrics import (
    EvalReport,
    bench,
    first_detection_range,
    r_scores,
    render_table,
    score_detections,
)
from .sim import DriveSpec, generate_drive
from .student import (
    build_input,
    crop_azimuth,
    default_architecture,
    load_student,
    save_student,
    student_forward_batch,
)
from .teacher import (
    CfarConfig,
    TeacherParams,
    default_teacher_params,
    drive_teacher_features,
    frame_features,
    label_from_features,
    load_teacher,
    postprocess_scores,
    save_teacher,
    teacher_label,
    teacher_score,
    train_teacher_mlp,
)
from .train import (
    LabeledSample,
    TrainConfig,
    positive_weight,
    selective_filter,
    split_drives,
    train_student,
    write_history,
)

DRIVE_SUFFIX = ".rad"
LABEL_SUFFIX = ".lab"
_TEACHER_CONFIG_KEYS = {"accumulation_depth", "min_speed", "decision_threshold",
                        "guard_cells", "train_cells", "offset_db"}


class _Parser(argparse.ArgumentParser):
    """argparse that reports problems through our error channel instead of
    printing multi-line usage and exiting by itself."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="radarkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render synthetic drives to files")
    p.add_argument("--spec", required=True, help="drive spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", default="0..0", help="inclusive seed range a..b")

    p = sub.add_parser("train-teacher", help="fit the teacher MLP on simulator truth")
    p.add_argument("--drives", required=True)
    p.add_argument("--config", default=None, help="JSON with train/teacher sections")
    p.add_argument("--out", required=True, help="teacher weights file")

    p = sub.add_parser("label", help="teacher auto-labels every drive")
    p.add_argument("--drives", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True, help="label output directory")

    p = sub.add_parser("train-student", help="train the student on teacher labels")
    p.add_argument("--drives", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="student weights file")

    p = sub.add_parser("eval", help="score the student against labels and truth")
    p.add_argument("--drives", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", default=None)
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--config", default=None, help="training config (split recovery)")
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("bench", help="latency comparison teacher vs student")
    p.add_argument("--drives", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", default="bench.json")

    p = sub.add_parser("infer", help="student detections for one drive")
    p.add_argument("--drive", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--out", required=True, help="detections CSV")
    p.add_argument("--threshold", type=float, default=0.5)
    return parser


def _parse_seeds(text):
    lo, _, hi = text.partition("..")
    hi = hi or lo
    try:
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"seeds must be integers like 3..12, got {text!r}") from None
    if hi < lo:
        raise ConfigError(f"empty seed range {text!r}")
    return range(lo, hi + 1)


def _drive_paths(directory):
    root = Path(directory)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {directory}")
    paths = sorted(root.glob(f"*{DRIVE_SUFFIX}"))
    if not paths:
        raise SchemaError(f"no drive files (*{DRIVE_SUFFIX}) in {directory}")
    return paths


def _load_config_file(path):
    if path is None:
        return {}
    data = read_json(path)
    if not isinstance(data, dict):
        raise ConfigError("config JSON must be an object")
    unknown = set(data) - {"train", "teacher"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


def _teacher_from_config(section, geometry, rng_seed):
    params = default_teacher_params(geometry, rng_seed=rng_seed)
    if not section:
        return params
    unknown = set(section) - _TEACHER_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown teacher config fields: {sorted(unknown)}")
    cfar = CfarConfig(
        guard_cells=int(section.get("guard_cells", params.cfar.guard_cells)),
        train_cells=int(section.get("train_cells", params.cfar.train_cells)),
        offset_db=float(section.get("offset_db", params.cfar.offset_db)))
    return TeacherParams(
        geometry=geometry,
        accumulation_depth=int(section.get("accumulation_depth",
                                           params.accumulation_depth)),
        min_speed=float(section.get("min_speed", params.min_speed)),
        cfar=cfar, mlp=params.mlp,
        decision_threshold=float(section.get("decision_threshold",
                                             params.decision_threshold)))


def _check_geometry(drive, geometry, path):
    if drive.geometry != geometry:
        raise SchemaError(f"{path}: geometry differs from the rest of the dataset")


def _split_indices(n_drives, config, split):
    if split == "all":
        return list(range(n_drives))
    train, val, test = split_drives(n_drives, config.split_fractions,
                                    config.rng_seed)
    return {"train": train, "val": val, "test": test}[split]


def _student_predictions(drive, model, threshold):
    """Thresholded, run-merged student detections for every frame."""
    windows = np.stack([build_input(f.map, model.crop_offset) for f in drive.frames])
    probs = student_forward_batch(windows, model)
    return [postprocess_scores(p, threshold) for p in probs]


def cmd_simulate(args):
    spec = DriveSpec.from_dict(read_json(args.spec))
    seeds = _parse_seeds(args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        drive = generate_drive(spec, rng_seed=seed)
        path = out / f"drive-{seed:05d}{DRIVE_SUFFIX}"
        write_drive(path, drive)
        positives = sum(int(f.ground_truth.sum()) for f in drive.frames)
        print(f"{path.name}: frames={len(drive.frames)} "
              f"host_speed={drive.frames[0].host_speed:.2f} "
              f"positive_bins={positives}")
    return 0


def cmd_train_teacher(args):
    paths = _drive_paths(args.drives)
    config_data = _load_config_file(args.config)
    train_cfg = TrainConfig.from_dict(config_data.get("train", {}))
    train_idx, val_idx, _ = split_drives(len(paths), train_cfg.split_fractions,
                                         train_cfg.rng_seed)
    params = None
    geometry = None
    features = {i: [] for i in (*train_idx, *val_idx)}
    targets = {i: [] for i in (*train_idx, *val_idx)}
    for i, path in enumerate(paths):
        if i not in features:
            continue
        drive = read_drive(path)
        if params is None:
            geometry = drive.geometry
            params = _teacher_from_config(config_data.get("teacher"), geometry,
                                          train_cfg.rng_seed)
        _check_geometry(drive, geometry, path)
        for frame_idx, feats in drive_teacher_features(drive, params):
            features[i].append(feats)
            targets[i].append(drive.frames[frame_idx].ground_truth)
    train_feats = [f for i in train_idx for f in features[i]]
    train_targets = [t for i in train_idx for t in targets[i]]
    val_feats = [f for i in val_idx for f in features[i]]
    val_targets = [t for i in val_idx for t in targets[i]]
    if not train_feats or not val_feats:
        raise UnusableDataset("teacher found no frames it could process")

    trained, history = train_teacher_mlp(train_feats, train_targets, val_feats,
                                         val_targets, params, train_cfg)
    save_teacher(args.out, trained)
    history_path = Path(args.out).with_suffix(".history.csv")
    write_history(history_path, history)

    preds = np.stack([teacher_score(f, trained) >= trained.decision_threshold
                      for f in val_feats])
    r0, r1 = r_scores(np.stack(val_targets), preds)
    print(f"teacher: train_frames={len(train_feats)} val_frames={len(val_feats)} "
          f"epochs={len(history)}")
    print(f"teacher: val_r0={_fmt_metric(r0)} val_r1={_fmt_metric(r1)}")
    print(f"wrote {args.out} and {history_path}")
    return 0


def cmd_label(args):
    paths = _drive_paths(args.drives)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = None
    total = 0
    abstained = 0
    for path in paths:
        drive = read_drive(path)
        if params is None:
            params = load_teacher(args.teacher, drive.geometry)
        _check_geometry(drive, params.geometry, path)
        labels = teacher_label(drive, params)
        label_path = out / (path.stem + LABEL_SUFFIX)
        write_labels(label_path, labels, drive.geometry.n_range)
        skipped = sum(1 for lab in labels if lab is None)
        total += len(labels)
        abstained += skipped
        print(f"{label_path.name}: frames={len(labels)} "
              f"labeled={len(labels) - skipped} abstained={skipped}")
    print(f"abstention_fraction={abstained / total:.4f}")
    return 0


def _collect_windows(paths, indices, labels_dir, crop_offset):
    """Cropped windows + targets for the selected drives, one drive in
    memory at a time."""
    windows, targets = [], []
    geometry = None
    for i in indices:
        path = paths[i]
        drive = read_drive(path)
        if geometry is None:
            geometry = drive.geometry
        _check_geometry(drive, geometry, path)
        labels = read_labels(Path(labels_dir) / (path.stem + LABEL_SUFFIX),
                             expect_frames=len(drive.frames))
        for frame_idx in selective_filter(labels):
            windows.append(crop_azimuth(drive.frames[frame_idx].map, crop_offset))
            targets.append(np.asarray(labels[frame_idx], dtype=np.uint8))
    return windows, targets


def cmd_train_student(args):
    paths = _drive_paths(args.drives)
    config_data = _load_config_file(args.config)
    train_cfg = TrainConfig.from_dict(config_data.get("train", {}))
    train_idx, val_idx, _ = split_drives(len(paths), train_cfg.split_fractions,
                                         train_cfg.rng_seed)
    model = default_architecture(train_cfg.rng_seed)
    crop = model.crop_offset
    train_windows, train_targets = _collect_windows(paths, train_idx, args.labels, crop)
    val_windows, val_targets = _collect_windows(paths, val_idx, args.labels, crop)
    if not train_windows or not val_windows:
        raise UnusableDataset("selective filtering left an empty split")

    if train_cfg.per_frame_weight:
        train_samples = [LabeledSample(w, t, positive_weight([t]))
                         for w, t in zip(train_windows, train_targets)]
        val_samples = [LabeledSample(w, t, positive_weight([t]))
                       for w, t in zip(val_windows, val_targets)]
    else:
        weight = positive_weight(train_targets)
        train_samples = [LabeledSample(w, t, weight)
                         for w, t in zip(train_windows, train_targets)]
        val_samples = [LabeledSample(w, t, weight)
                       for w, t in zip(val_windows, val_targets)]

    trained, history = train_student(train_samples, val_samples, model, train_cfg)
    save_student(args.out, trained)
    history_path = Path(args.out).with_suffix(".history.csv")
    write_history(history_path, history)
    # report the checkpoint that was actually saved, not the last epoch
    best = min(history, key=lambda row: row["val_loss"])
    print(f"student: train_frames={len(train_samples)} val_frames={len(val_samples)} "
          f"epochs={len(history)} best_epoch={best['epoch']}")
    print(f"student: val_r0={_fmt_metric(best['val_r0'])} "
          f"val_r1={_fmt_metric(best['val_r1'])}")
    print(f"wrote {args.out} and {history_path}")
    return 0


def _fmt_metric(value):
    return "n/a" if value is None else f"{value:.4f}"


def cmd_eval(args):
    paths = _drive_paths(args.drives)
    config_data = _load_config_file(args.config)
    train_cfg = TrainConfig.from_dict(config_data.get("train", {}))
    indices = _split_indices(len(paths), train_cfg, args.split)
    if not indices:
        raise UnusableDataset(f"split {args.split!r} selects no drives")
    model = load_student(args.student)
    teacher = None

    teacher_labels, student_preds, truths = [], [], []
    drive_rows = []
    csv_rows = []
    for i in indices:
        path = paths[i]
        drive = read_drive(path)
        if teacher is None and args.teacher is not None:
            teacher = load_teacher(args.teacher, drive.geometry)
        labels = read_labels(Path(args.labels) / (path.stem + LABEL_SUFFIX),
                             expect_frames=len(drive.frames))
        preds = _student_predictions(drive, model, args.threshold)
        gts = [f.ground_truth for f in drive.frames]
        teacher_labels += labels
        student_preds += preds
        truths += gts
        if any(gt.any() for gt in gts):
            drive_rows.append({
                "drive": path.name,
                "student_range": first_detection_range(gts, preds, drive.geometry),
                "teacher_range": first_detection_range(gts, labels, drive.geometry),
            })
        for j, (gt, lab, pred) in enumerate(zip(gts, labels, preds)):
            csv_rows.append((path.name, j, _bins(gt),
                             "abstain" if lab is None else _bins(lab), _bins(pred)))

    vs_teacher = EvalReport(**score_detections(teacher_labels, student_preds))
    gt_scores = score_detections(truths, student_preds)
    student_ranges = [row["student_range"] for row in drive_rows]
    teacher_ranges = [row["teacher_range"] for row in drive_rows]
    vs_truth = EvalReport(
        **gt_scores,
        student_max_range=float(np.mean(student_ranges)) if student_ranges else None,
        teacher_max_range=(float(np.mean(teacher_ranges))
                           if teacher_ranges and args.teacher else None))
    report = {
        "split": args.split,
        "threshold": args.threshold,
        "frames": len(student_preds),
        "drives": [paths[i].name for i in indices],
        "student_vs_teacher": vs_teacher.to_dict(),
        "student_vs_ground_truth": vs_truth.to_dict(),
        "first_detection": drive_rows,
        "note": ("ground-truth sections exist because the data is simulated; "
                 "real spectra carry no per-bin truth"),
    }
    if args.teacher is not None:
        labeled = [lab is not None for lab in teacher_labels]
        vs_gt_teacher = EvalReport(**score_detections(
            [t for t, ok in zip(truths, labeled) if ok],
            [lab for lab in teacher_labels if lab is not None]))
        report["teacher_vs_ground_truth"] = vs_gt_teacher.to_dict()
        report["teacher_threshold"] = teacher.decision_threshold

    Path(args.report).write_text(json.dumps(report, indent=2))
    csv_path = Path(args.report).with_suffix(".csv")
    with open(csv_path, "w") as fh:
        fh.write("drive,frame,truth_bins,teacher_bins,student_bins\n")
        for row in csv_rows:
            fh.write(",".join(str(v) for v in row) + "\n")

    print(render_table(vs_teacher, title=f"student vs teacher ({args.split})"))
    print(render_table(vs_truth, title=f"student vs ground truth ({args.split}, "
                                       "simulation-only)"))
    if args.teacher is not None:
        print(render_table(vs_gt_teacher,
                           title=f"teacher vs ground truth ({args.split}, "
                                 "simulation-only)"))
    print(f"wrote {args.report} and {csv_path}")
    return 0


def _bins(vector):
    return ";".join(str(int(b)) for b in np.flatnonzero(vector))


def cmd_bench(args):
    paths = _drive_paths(args.drives)
    drive = read_drive(paths[0])
    model = load_student(args.student)
    params = load_teacher(args.teacher, drive.geometry)
    k = params.accumulation_depth

    histories = []
    for end in range(k, len(drive.frames) + 1):
        frame = drive.frames[end - 1]
        if frame.host_speed < params.min_speed:
            continue
        histories.append(([f.map for f in drive.frames[end - k:end]],
                          frame.host_speed))
    if not histories:
        raise UnusableDataset("no frames eligible for teacher benchmarking")

    def teacher_call(item):
        history, speed = item
        feats = frame_features(history, drive.geometry, speed,
                               drive.frame_interval, params)
        return label_from_features(feats, params)

    def student_call(map_):
        probs = student_forward_batch(build_input(map_, model.crop_offset)[None],
                                      model)[0]
        return postprocess_scores(probs, 0.5)

    teacher_stats = bench(teacher_call, histories, repetitions=args.reps)
    student_stats = bench(student_call, [f.map for f in drive.frames],
                          repetitions=args.reps)
    speedup = teacher_stats.mean_ms / student_stats.mean_ms
    result = {
        "drive": paths[0].name,
        "repetitions": args.reps,
        "accumulation_depth": k,
        "teacher": dataclasses.asdict(teacher_stats),
        "student": dataclasses.asdict(student_stats),
        "speedup_factor": speedup,
    }
    Path(args.out).write_text(json.dumps(result, indent=2))
    print(f"teacher_mean_ms={teacher_stats.mean_ms:.3f} "
          f"student_mean_ms={student_stats.mean_ms:.3f} "
          f"speedup_factor={speedup:.2f}")
    print(f"wrote {args.out}")
    return 0


def cmd_infer(args):
    drive = read_drive(args.drive)
    model = load_student(args.student)
    n_range = drive.geometry.n_range
    # One whole-drive batch, same granularity as eval, so the two commands
    # emit bitwise-identical probabilities.
    windows = np.stack([build_input(f.map, model.crop_offset) for f in drive.frames])
    probs = student_forward_batch(windows, model)
    with open(args.out, "w") as fh:
        header = ["frame", "host_speed", "detections"]
        header += [f"p{j:03d}" for j in range(n_range)]
        fh.write(",".join(header) + "\n")
        for i, frame in enumerate(drive.frames):
            detections = postprocess_scores(probs[i], args.threshold)
            cells = [str(i), f"{frame.host_speed:.9g}", _bins(detections)]
            cells += [f"{float(p):.9g}" for p in probs[i]]
            fh.write(",".join(cells) + "\n")
    print(f"wrote {args.out} ({len(drive.frames)} frames)")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "train-teacher": cmd_train_teacher,
    "label": cmd_label,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "infer": cmd_infer,
}


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("usage", exc, 2)
    except (FileFormatError, UnusableDataset, BelowCriticalSpeed) as exc:
        return _fail("data", exc, 3)
    except NumericError as exc:
        return _fail("numeric", exc, 4)


def _fail(category, exc, code):
    print(f"radarkd: error: {category}: {exc}", file=sys.stderr)
    return code


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
