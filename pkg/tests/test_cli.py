"""End-to-end runs of the command-line pipeline on a miniature dataset.

A module-scoped workspace simulates six short drives on a reduced grid
(96 range bins so the per-bin teacher loops stay fast), then trains the
teacher, labels, and trains the student once; the tests check each
command's outputs, exit codes, and cross-command consistency.
"""

import contextlib
import io
import json
import re
import shutil

import numpy as np
import pytest

from radarkd.cli import main
from radarkd.fileio import read_drive, read_labels, write_drive
from radarkd.metrics import postprocess_scores, r_scores, score_detections
from radarkd.student import build_input, load_student, student_forward_batch
from radarkd.teacher import (
    default_teacher_params,
    drive_teacher_features,
    load_teacher,
    save_teacher,
    teacher_score,
)
from radarkd.train import split_drives

SPEC = {
    "geometry": {"n_range": 96, "n_azimuth": 160},
    "n_frames": 24,
    "host_speed": [10.0, 14.0],
    "slow_fraction": 0.0,
    "debris_start_range": [30.0, 48.0],
    "debris_cross": [-0.8, 0.8],
    "debris_rcs": [25.0, 40.0],
    "n_signposts": 1,
    "noise": {"rayleigh_sigma": 0.5},
}

CONFIG = {
    "train": {"lr": 3e-3, "batch_size": 32, "max_epochs": 12,
              "early_stop_patience": 4, "split_fractions": [0.5, 0.25, 0.25],
              "rng_seed": 0},
    "teacher": {"accumulation_depth": 4},
}
N_DRIVES = 6
WARMUP = CONFIG["teacher"]["accumulation_depth"] - 1


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def drive_files(directory):
    return sorted(directory.glob("*.rad"))


def splits(n_drives=N_DRIVES):
    cfg = CONFIG["train"]
    return split_drives(n_drives, tuple(cfg["split_fractions"]), cfg["rng_seed"])


def student_probabilities(drive, model):
    windows = np.stack([build_input(f.map, model.crop_offset) for f in drive.frames])
    return student_forward_batch(windows, model)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    spec = root / "spec.json"
    config = root / "config.json"
    spec.write_text(json.dumps(SPEC))
    config.write_text(json.dumps(CONFIG))
    drives = root / "drives"
    labels = root / "labels"
    teacher = root / "teacher.w"
    student = root / "student.w"
    stdout = {}
    steps = (
        ("simulate", ["simulate", "--spec", str(spec), "--out", str(drives),
                      "--seeds", f"0..{N_DRIVES - 1}"]),
        ("train-teacher", ["train-teacher", "--drives", str(drives),
                           "--config", str(config), "--out", str(teacher)]),
        ("label", ["label", "--drives", str(drives), "--teacher", str(teacher),
                   "--out", str(labels)]),
        ("train-student", ["train-student", "--drives", str(drives),
                           "--labels", str(labels), "--config", str(config),
                           "--out", str(student)]),
    )
    for name, argv in steps:
        code, out, err = run_cli(*argv)
        assert code == 0, f"{name} exited {code}: {err}"
        stdout[name] = out
    return {"root": root, "spec": spec, "config": config, "drives": drives,
            "labels": labels, "teacher": teacher, "student": student,
            "stdout": stdout}


class TestArgumentHandling:
    def test_no_command(self):
        code, out, err = run_cli()
        assert code == 2
        assert err.startswith("radarkd: error: usage:")
        assert err.count("\n") == 1

    def test_unknown_flag(self):
        code, _, err = run_cli("simulate", "--spec", "s", "--out", "o", "--bogus")
        assert code == 2
        assert "usage" in err

    def test_bad_seed_text(self, tmp_path, workspace):
        code, _, err = run_cli("simulate", "--spec", str(workspace["spec"]),
                               "--out", str(tmp_path), "--seeds", "a..b")
        assert code == 2
        assert "seeds" in err

    def test_empty_seed_range(self, tmp_path, workspace):
        code, _, err = run_cli("simulate", "--spec", str(workspace["spec"]),
                               "--out", str(tmp_path), "--seeds", "5..3")
        assert code == 2
        assert "empty seed range" in err

    def test_missing_spec_file(self, tmp_path):
        code, _, err = run_cli("simulate", "--spec", str(tmp_path / "nope.json"),
                               "--out", str(tmp_path / "out"))
        assert code == 2
        assert err.startswith("radarkd: error: usage:")

    def test_drives_not_a_directory(self, tmp_path):
        code, _, err = run_cli("train-teacher", "--drives",
                               str(tmp_path / "missing"), "--out",
                               str(tmp_path / "t.w"))
        assert code == 2
        assert "not a directory" in err

    def test_empty_drives_directory(self, tmp_path):
        code, _, err = run_cli("train-teacher", "--drives", str(tmp_path),
                               "--out", str(tmp_path / "t.w"))
        assert code == 3
        assert err.startswith("radarkd: error: data:")

    def test_unknown_config_section(self, tmp_path, workspace):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"bogus": {}}))
        code, _, err = run_cli("train-teacher", "--drives",
                               str(workspace["drives"]), "--config", str(config),
                               "--out", str(tmp_path / "t.w"))
        assert code == 2
        assert "unknown config sections" in err


class TestSimulate:
    def test_summary_matches_files(self, workspace):
        lines = workspace["stdout"]["simulate"].strip().splitlines()
        assert len(lines) == N_DRIVES
        for line in lines:
            m = re.fullmatch(
                r"(drive-\d{5}\.rad): frames=(\d+) host_speed=([\d.]+) "
                r"positive_bins=(\d+)", line)
            assert m, line
            drive = read_drive(workspace["drives"] / m.group(1))
            assert len(drive.frames) == int(m.group(2))
            assert float(m.group(3)) == pytest.approx(drive.frames[0].host_speed,
                                                      abs=5e-3)
            positives = sum(int(f.ground_truth.sum()) for f in drive.frames)
            assert positives == int(m.group(4))

    def test_rerun_is_byte_identical(self, tmp_path, workspace):
        code, _, _ = run_cli("simulate", "--spec", str(workspace["spec"]),
                             "--out", str(tmp_path), "--seeds", "0..0")
        assert code == 0
        first = (workspace["drives"] / "drive-00000.rad").read_bytes()
        assert (tmp_path / "drive-00000.rad").read_bytes() == first


class TestTrainTeacher:
    def test_printed_metrics_reproducible_from_artifacts(self, workspace):
        out = workspace["stdout"]["train-teacher"]
        m = re.search(r"teacher: val_r0=([\d.]+) val_r1=([\d.]+)", out)
        assert m, out
        paths = drive_files(workspace["drives"])
        _, val_idx, _ = splits()
        geometry = read_drive(paths[val_idx[0]]).geometry
        params = load_teacher(workspace["teacher"], geometry)
        feats, targets = [], []
        for i in val_idx:
            drive = read_drive(paths[i])
            for frame_idx, f in drive_teacher_features(drive, params):
                feats.append(f)
                targets.append(drive.frames[frame_idx].ground_truth)
        assert f"val_frames={len(feats)}" in out
        preds = np.stack([teacher_score(f, params) >= params.decision_threshold
                          for f in feats])
        r0, r1 = r_scores(np.stack(targets), preds)
        assert m.group(1) == f"{r0:.4f}"
        assert m.group(2) == f"{r1:.4f}"

    def test_history_schema(self, workspace):
        lines = workspace["teacher"].with_suffix(".history.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_r0,val_r1"
        assert len(lines) >= 2
        for line in lines[1:]:
            epoch, train_loss, val_loss, _, _ = line.split(",")
            assert int(epoch) >= 0
            assert np.isfinite(float(train_loss))
            assert np.isfinite(float(val_loss))


class TestLabel:
    def test_pairing_and_warmup_abstention(self, workspace):
        paths = drive_files(workspace["drives"])
        out = workspace["stdout"]["label"]
        for path in paths:
            label_path = workspace["labels"] / (path.stem + ".lab")
            assert label_path.exists()
            labels = read_labels(label_path, expect_frames=SPEC["n_frames"])
            for i, label in enumerate(labels):
                assert (label is None) == (i < WARMUP)
        assert out.strip().endswith("abstention_fraction=0.1250")

    def test_relabeling_is_byte_identical(self, tmp_path, workspace):
        code, _, _ = run_cli("label", "--drives", str(workspace["drives"]),
                             "--teacher", str(workspace["teacher"]),
                             "--out", str(tmp_path))
        assert code == 0
        for path in drive_files(workspace["drives"]):
            name = path.stem + ".lab"
            assert (tmp_path / name).read_bytes() == \
                (workspace["labels"] / name).read_bytes()

    def test_mixed_geometry_dataset_rejected(self, tmp_path, workspace):
        other_spec = dict(SPEC, geometry={"n_range": 80, "n_azimuth": 160})
        spec_path = tmp_path / "other.json"
        spec_path.write_text(json.dumps(other_spec))
        drives = tmp_path / "drives"
        assert run_cli("simulate", "--spec", str(workspace["spec"]), "--out",
                       str(drives), "--seeds", "7")[0] == 0
        assert run_cli("simulate", "--spec", str(spec_path), "--out",
                       str(drives), "--seeds", "8")[0] == 0
        code, _, err = run_cli("label", "--drives", str(drives), "--teacher",
                               str(workspace["teacher"]), "--out",
                               str(tmp_path / "labels"))
        assert code == 3
        assert "geometry" in err


@pytest.fixture(scope="module")
def slow(tmp_path_factory, workspace):
    """Drives that never exceed the teacher's minimum speed."""
    root = tmp_path_factory.mktemp("slow")
    spec = root / "spec.json"
    spec.write_text(json.dumps(dict(SPEC, host_speed=[3.0, 3.0])))
    drives = root / "drives"
    labels = root / "labels"
    code, out, err = run_cli("simulate", "--spec", str(spec), "--out",
                             str(drives), "--seeds", "0..3")
    assert code == 0, err
    code, out, err = run_cli("label", "--drives", str(drives), "--teacher",
                             str(workspace["teacher"]), "--out", str(labels))
    assert code == 0, err
    return {"drives": drives, "labels": labels, "label_stdout": out}


class TestBelowCriticalSpeedDataset:
    """A dataset the teacher abstains on entirely is unusable downstream."""

    def test_everything_abstained(self, slow):
        assert slow["label_stdout"].strip().endswith("abstention_fraction=1.0000")

    def test_teacher_training_rejected(self, tmp_path, slow, workspace):
        code, _, err = run_cli("train-teacher", "--drives", str(slow["drives"]),
                               "--config", str(workspace["config"]),
                               "--out", str(tmp_path / "t.w"))
        assert code == 3
        assert err.startswith("radarkd: error: data:")

    def test_student_training_rejected(self, tmp_path, slow, workspace):
        code, _, err = run_cli("train-student", "--drives", str(slow["drives"]),
                               "--labels", str(slow["labels"]),
                               "--config", str(workspace["config"]),
                               "--out", str(tmp_path / "s.w"))
        assert code == 3
        assert "empty split" in err


class TestTrainStudent:
    def test_retraining_is_byte_identical(self, tmp_path, workspace):
        out_path = tmp_path / "student.w"
        code, _, err = run_cli("train-student", "--drives",
                               str(workspace["drives"]), "--labels",
                               str(workspace["labels"]), "--config",
                               str(workspace["config"]), "--out", str(out_path))
        assert code == 0, err
        assert out_path.read_bytes() == workspace["student"].read_bytes()

    def test_reports_the_saved_checkpoint(self, workspace):
        out = workspace["stdout"]["train-student"]
        m = re.search(r"epochs=(\d+) best_epoch=(\d+)", out)
        assert m, out
        history = _read_history(workspace["student"].with_suffix(".history.csv"))
        assert len(history) == int(m.group(1))
        best = min(history, key=lambda row: row["val_loss"])
        assert best["epoch"] == int(m.group(2))
        printed = re.search(r"student: val_r0=([\d.]+) val_r1=([\d.]+)", out)
        assert printed, out
        assert printed.group(1) == f"{best['val_r0']:.4f}"
        assert printed.group(2) == f"{best['val_r1']:.4f}"


def _read_history(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        row = dict(zip(header, line.split(",")))
        rows.append({"epoch": int(row["epoch"]),
                     "train_loss": float(row["train_loss"]),
                     "val_loss": float(row["val_loss"]),
                     "val_r0": float(row["val_r0"]),
                     "val_r1": float(row["val_r1"])})
    return rows


@pytest.fixture(scope="module")
def evaluation(tmp_path_factory, workspace):
    report_path = tmp_path_factory.mktemp("eval") / "report.json"
    code, out, err = run_cli(
        "eval", "--drives", str(workspace["drives"]), "--labels",
        str(workspace["labels"]), "--student", str(workspace["student"]),
        "--teacher", str(workspace["teacher"]), "--config",
        str(workspace["config"]), "--split", "val", "--report",
        str(report_path))
    assert code == 0, err
    report = json.loads(report_path.read_text())
    csv_lines = report_path.with_suffix(".csv").read_text().splitlines()
    return {"report": report, "csv": csv_lines, "stdout": out}


class TestEval:
    def test_report_structure(self, evaluation):
        report = evaluation["report"]
        paths = drive_files_from_report(report)
        _, val_idx, _ = splits()
        assert report["split"] == "val"
        assert report["threshold"] == 0.5
        assert report["frames"] == len(val_idx) * SPEC["n_frames"]
        assert len(paths) == len(val_idx)
        assert report["teacher_threshold"] == 0.5
        assert "simulated" in report["note"]
        for section in ("student_vs_teacher", "student_vs_ground_truth",
                        "teacher_vs_ground_truth"):
            assert set(report[section]) >= {"r0", "r1", "p0", "p1",
                                            "specificity", "frames_evaluated"}

    def test_csv_covers_every_frame(self, evaluation):
        lines = evaluation["csv"]
        assert lines[0] == "drive,frame,truth_bins,teacher_bins,student_bins"
        assert len(lines) == 1 + evaluation["report"]["frames"]
        warmup_rows = [line for line in lines[1:]
                       if int(line.split(",")[1]) < WARMUP]
        assert warmup_rows
        assert all(line.split(",")[3] == "abstain" for line in warmup_rows)

    def test_scores_match_direct_recomputation(self, evaluation, workspace):
        paths = drive_files(workspace["drives"])
        _, val_idx, _ = splits()
        model = load_student(workspace["student"])
        labels, preds = [], []
        for i in val_idx:
            drive = read_drive(paths[i])
            labels += read_labels(workspace["labels"] / (paths[i].stem + ".lab"),
                                  expect_frames=len(drive.frames))
            probs = student_probabilities(drive, model)
            preds += [postprocess_scores(p, 0.5) for p in probs]
        expected = score_detections(labels, preds)
        section = evaluation["report"]["student_vs_teacher"]
        for key, value in expected.items():
            assert section[key] == value
        assert section["frames_skipped"] == len(val_idx) * WARMUP

    def test_matches_training_history_checkpoint(self, evaluation, workspace):
        history = _read_history(workspace["student"].with_suffix(".history.csv"))
        best = min(history, key=lambda row: row["val_loss"])
        section = evaluation["report"]["student_vs_teacher"]
        assert section["r0"] == pytest.approx(best["val_r0"], abs=1e-9)
        assert section["r1"] == pytest.approx(best["val_r1"], abs=1e-9)

    def test_tables_printed(self, evaluation):
        out = evaluation["stdout"]
        assert "student vs teacher (val)" in out
        assert "student vs ground truth (val, simulation-only)" in out
        assert "teacher vs ground truth (val, simulation-only)" in out

    def test_teacher_weights_optional(self, tmp_path, workspace):
        report_path = tmp_path / "report.json"
        code, _, err = run_cli(
            "eval", "--drives", str(workspace["drives"]), "--labels",
            str(workspace["labels"]), "--student", str(workspace["student"]),
            "--config", str(workspace["config"]), "--split", "test",
            "--report", str(report_path))
        assert code == 0, err
        report = json.loads(report_path.read_text())
        assert "teacher_vs_ground_truth" not in report
        assert "teacher_threshold" not in report
        assert report["student_vs_ground_truth"]["teacher_max_range"] is None


def drive_files_from_report(report):
    return report["drives"]


class TestBench:
    def test_latency_report(self, tmp_path, workspace):
        out_path = tmp_path / "bench.json"
        code, out, err = run_cli("bench", "--drives", str(workspace["drives"]),
                                 "--student", str(workspace["student"]),
                                 "--teacher", str(workspace["teacher"]),
                                 "--reps", "1", "--out", str(out_path))
        assert code == 0, err
        result = json.loads(out_path.read_text())
        assert result["drive"] == "drive-00000.rad"
        assert result["repetitions"] == 1
        k = CONFIG["teacher"]["accumulation_depth"]
        assert result["accumulation_depth"] == k
        assert result["teacher"]["calls"] == SPEC["n_frames"] - k + 1
        assert result["student"]["calls"] == SPEC["n_frames"]
        for side in ("teacher", "student"):
            assert result[side]["mean_ms"] > 0
            assert result[side]["p95_ms"] >= result[side]["median_ms"]
        ratio = result["teacher"]["mean_ms"] / result["student"]["mean_ms"]
        assert result["speedup_factor"] == pytest.approx(ratio)
        assert f"speedup_factor={ratio:.2f}" in out

    def test_zero_repetitions_rejected(self, tmp_path, workspace):
        code, _, err = run_cli("bench", "--drives", str(workspace["drives"]),
                               "--student", str(workspace["student"]),
                               "--teacher", str(workspace["teacher"]),
                               "--reps", "0", "--out", str(tmp_path / "b.json"))
        assert code == 2
        assert "repetitions" in err

    def test_deeper_accumulation_costs_more(self, tmp_path, workspace):
        geometry = read_drive(drive_files(workspace["drives"])[0]).geometry
        deep = tmp_path / "deep.w"
        save_teacher(deep, default_teacher_params(geometry))  # depth 8
        means = {}
        for name, teacher in (("k4", workspace["teacher"]), ("k8", deep)):
            out_path = tmp_path / f"{name}.json"
            code, _, err = run_cli("bench", "--drives", str(workspace["drives"]),
                                   "--student", str(workspace["student"]),
                                   "--teacher", str(teacher), "--reps", "1",
                                   "--out", str(out_path))
            assert code == 0, err
            means[name] = json.loads(out_path.read_text())["teacher"]["mean_ms"]
        assert means["k8"] > means["k4"]


class TestInfer:
    def test_probabilities_round_trip(self, tmp_path, workspace):
        paths = drive_files(workspace["drives"])
        _, val_idx, _ = splits()
        drive_path = paths[val_idx[0]]
        out_path = tmp_path / "detections.csv"
        code, out, err = run_cli("infer", "--drive", str(drive_path),
                                 "--student", str(workspace["student"]),
                                 "--out", str(out_path))
        assert code == 0, err
        assert f"({SPEC['n_frames']} frames)" in out
        drive = read_drive(drive_path)
        model = load_student(workspace["student"])
        probs = student_probabilities(drive, model)
        lines = out_path.read_text().splitlines()
        n_range = drive.geometry.n_range
        assert lines[0].split(",")[:3] == ["frame", "host_speed", "detections"]
        assert lines[0].split(",")[3:] == [f"p{j:03d}" for j in range(n_range)]
        assert len(lines) == 1 + len(drive.frames)
        for i, line in enumerate(lines[1:]):
            cells = line.split(",")
            assert int(cells[0]) == i
            parsed = np.array([np.float32(c) for c in cells[3:]])
            assert np.array_equal(parsed, probs[i])
            assert 0.0 < parsed.min() and parsed.max() < 1.0
            expected = ";".join(
                str(b) for b in np.flatnonzero(postprocess_scores(probs[i], 0.5)))
            assert cells[2] == expected

    def test_threshold_above_one_detects_nothing(self, tmp_path, workspace):
        drive_path = drive_files(workspace["drives"])[0]
        out_path = tmp_path / "detections.csv"
        code, _, err = run_cli("infer", "--drive", str(drive_path),
                               "--student", str(workspace["student"]),
                               "--out", str(out_path), "--threshold", "1.1")
        assert code == 0, err
        for line in out_path.read_text().splitlines()[1:]:
            assert line.split(",")[2] == ""


class TestCorruptInputs:
    def test_flipped_byte_is_a_data_error(self, tmp_path, workspace):
        source = drive_files(workspace["drives"])[0]
        bad = tmp_path / "bad.rad"
        shutil.copy(source, bad)
        data = bytearray(bad.read_bytes())
        data[len(data) // 2] ^= 0x40
        bad.write_bytes(bytes(data))
        code, _, err = run_cli("infer", "--drive", str(bad), "--student",
                               str(workspace["student"]), "--out",
                               str(tmp_path / "out.csv"))
        assert code == 3
        assert err.startswith("radarkd: error: data:")
        assert err.count("\n") == 1

    def test_non_finite_map_is_a_numeric_error(self, tmp_path, workspace):
        drive = read_drive(drive_files(workspace["drives"])[0])
        model = load_student(workspace["student"])
        drive.frames[0].map[5, model.crop_offset + 5] = np.nan
        bad = tmp_path / "nan.rad"
        write_drive(bad, drive)
        code, _, err = run_cli("infer", "--drive", str(bad), "--student",
                               str(workspace["student"]), "--out",
                               str(tmp_path / "out.csv"))
        assert code == 4
        assert err.startswith("radarkd: error: numeric:")
