import json

import numpy as np
import pytest

from conftest import make_phantom
from core.output_writer import read_case
from core.schemas import LabelVolume
from core.volume_io import read_labels, write_labels, write_volume
from src.cli import EXIT_IO, EXIT_OK, EXIT_VALIDATION, run

TINY_CONFIG = """\
# three-level network for fast tests
levels = 3
widths = 8, 16, 16
wide_levels = 2
input_shape = 16x32x32
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "tiny.cfg").write_text(TINY_CONFIG)
    ct, cylinder = make_phantom(shape=(20, 36, 30))
    write_volume(ct, tmp_path / "ct.nii.gz")
    labels = np.zeros(ct.shape, np.uint8)
    labels[6:14, 12:24, 10:20] = 1
    labels[8:12, 14:18, 12:16] = 3
    write_labels(LabelVolume(data=labels, class_count=5, spacing=ct.spacing), tmp_path / "gold.nii.gz")
    return tmp_path


def test_no_arguments_is_usage_error(capsys):
    assert run([]) == EXIT_VALIDATION
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand():
    assert run(["segment-everything"]) == EXIT_VALIDATION


def test_missing_required_flag():
    assert run(["infer", "--model", "m.cbr"]) == EXIT_VALIDATION


def test_analyze_reference(capsys):
    assert run(["analyze"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("parameters: 433,148")
    assert lines[1].startswith("flops:") and "96x192x192" in lines[1]
    assert lines[2].startswith("serialized size:")


def test_analyze_other_shape(workspace, capsys):
    assert run(["analyze", "--config", str(workspace / "tiny.cfg"), "--input-shape", "32x64x64"]) == EXIT_OK
    assert "32x64x64" in capsys.readouterr().out


def test_random_weights_need_seed(workspace):
    assert run(["build-model", "--config", str(workspace / "tiny.cfg"), "--out", str(workspace / "m.cbr"),
                "--random-weights"]) == EXIT_VALIDATION
    assert not (workspace / "m.cbr").exists()


def test_build_optimize_infer_evaluate(workspace, capsys):
    model, fast = workspace / "m.cbr", workspace / "fast.cbr"
    seg, report = workspace / "seg.nii.gz", workspace / "scores.json"
    assert run(["build-model", "--config", str(workspace / "tiny.cfg"), "--out", str(model),
                "--random-weights", "--seed", "4"]) == EXIT_OK
    assert run(["optimize", "--in", str(model), "--out", str(fast)]) == EXIT_OK
    assert run(["infer", "--model", str(fast), "--in", str(workspace / "ct.nii.gz"), "--out", str(seg),
                "--threads", "2"]) == EXIT_OK

    result = read_labels(seg)
    assert result.shape == (20, 36, 30)
    assert result.spacing == pytest.approx((2.0, 1.5, 1.5))
    assert result.labels() <= {0, 1, 2, 3, 4}

    assert run(["evaluate", "--pred", str(seg), "--gold", str(seg), "--report", str(report)]) == EXIT_OK
    body = json.loads(report.read_text())
    assert body["mean"] == {"dsc": 1.0, "nsd": 1.0}
    assert [c["label"] for c in body["classes"]] == [1, 2, 3, 4]
    assert "liver" in capsys.readouterr().out


def test_evaluate_against_gold(workspace, capsys):
    gold = workspace / "gold.nii.gz"
    assert run(["evaluate", "--pred", str(gold), "--gold", str(gold), "--classes", "1,3",
                "--nsd-tol", "2.0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "liver" in out and "spleen" in out and "kidney" not in out


def test_evaluate_several_cases(workspace, capsys):
    gold = workspace / "gold.nii.gz"
    empty = workspace / "empty.nii.gz"
    lv = read_labels(gold)
    write_labels(LabelVolume(data=np.zeros(lv.shape, np.uint8), class_count=5, spacing=lv.spacing), empty)
    report = workspace / "cases.json"
    assert run(["evaluate", "--pred", str(gold), str(empty), str(gold), "--gold", str(gold), str(gold), str(gold),
                "--classes", "1", "--report", str(report)]) == EXIT_OK
    body = json.loads(report.read_text())
    assert len(body["cases"]) == 3
    (liver,) = body["classes"]
    assert liver["cases"] == 3
    assert liver["dsc_mean"] == pytest.approx(2 / 3)
    assert liver["dsc_median"] == 1.0
    assert liver["dsc_std"] == pytest.approx(np.std([1.0, 0.0, 1.0]))
    assert "3 case(s)" in capsys.readouterr().out


def test_evaluate_unpaired_cases(workspace):
    gold = str(workspace / "gold.nii.gz")
    assert run(["evaluate", "--pred", gold, gold, "--gold", gold]) == EXIT_VALIDATION


def test_evaluate_bad_tolerance(workspace):
    gold = str(workspace / "gold.nii.gz")
    assert run(["evaluate", "--pred", gold, "--gold", gold, "--nsd-tol", "0"]) == EXIT_VALIDATION


def test_bench_writes_report(workspace):
    model, report = workspace / "m.cbr", workspace / "bench.json"
    assert run(["build-model", "--config", str(workspace / "tiny.cfg"), "--out", str(model)]) == EXIT_OK
    assert run(["bench", "--model", str(model), "--runs", "3", "--ct", str(workspace / "ct.nii.gz"),
                "--report", str(report)]) == EXIT_OK
    body = json.loads(report.read_text())
    assert len(body["samples"]) == 2
    assert len(body["end_to_end_samples"]) == 2
    assert body["peak_bytes"] < body["naive_bytes"]


def test_bench_needs_three_runs(workspace):
    model = workspace / "m.cbr"
    run(["build-model", "--config", str(workspace / "tiny.cfg"), "--out", str(model)])
    assert run(["bench", "--model", str(model), "--runs", "2"]) == EXIT_VALIDATION


def test_preprocess_writes_case(workspace):
    out_dir = workspace / "case"
    assert run(["preprocess", "--in", str(workspace / "ct.nii.gz"), "--labels", str(workspace / "gold.nii.gz"),
                "--out-dir", str(out_dir), "--shape", "8x16x16"]) == EXIT_OK
    x, targets, meta = read_case(out_dir)
    assert x.shape == (2, 8, 16, 16)
    assert targets.shape == (8, 16, 16)
    assert set(np.unique(targets).tolist()) <= {0, 1, 2, 4}
    assert meta["original_shape"] == "20, 36, 30"


def test_unknown_pass(workspace):
    model = workspace / "m.cbr"
    run(["build-model", "--config", str(workspace / "tiny.cfg"), "--out", str(model)])
    assert run(["optimize", "--in", str(model), "--out", str(workspace / "o.cbr"),
                "--passes", "fold,inline"]) == EXIT_VALIDATION


def test_missing_model_is_io_error(workspace):
    assert run(["infer", "--model", str(workspace / "absent.cbr"), "--in", str(workspace / "ct.nii.gz"),
                "--out", str(workspace / "seg.nii.gz")]) == EXIT_IO


def test_unwritable_output_is_io_error(workspace):
    assert run(["build-model", "--config", str(workspace / "tiny.cfg"),
                "--out", str(workspace / "no" / "such" / "m.cbr")]) == EXIT_IO


def test_threads_from_environment(workspace, monkeypatch):
    model = workspace / "m.cbr"
    run(["build-model", "--config", str(workspace / "tiny.cfg"), "--out", str(model)])
    monkeypatch.setenv("COBRA_THREADS", "0")
    assert run(["infer", "--model", str(model), "--in", str(workspace / "ct.nii.gz"),
                "--out", str(workspace / "seg.nii.gz")]) == EXIT_VALIDATION
    monkeypatch.setenv("COBRA_THREADS", "2")
    assert run(["infer", "--model", str(model), "--in", str(workspace / "ct.nii.gz"),
                "--out", str(workspace / "seg.nii.gz")]) == EXIT_OK


def _infer_across_threads(tmp_path, model, ct_path):
    results = {}
    for threads in (1, 4, 8):
        out = tmp_path / f"seg-{threads}.nii.gz"
        assert run(["infer", "--model", str(model), "--in", str(ct_path), "--out", str(out),
                    "--threads", str(threads)]) == EXIT_OK
        results[threads] = read_labels(out)
    return results


@pytest.mark.parametrize("config", [
    "tiny",
    pytest.param("reference", marks=pytest.mark.slow),
])
def test_infer_is_identical_across_threads(tmp_path, config):
    ct, _ = make_phantom(shape=(64, 128, 128), radius=40.0, z_margin=8)
    ct_path = tmp_path / "ct.nii.gz"
    write_volume(ct, ct_path)
    model = tmp_path / "m.cbr"
    argv = ["build-model", "--out", str(model), "--random-weights", "--seed", "9"]
    if config == "tiny":
        (tmp_path / "tiny.cfg").write_text(TINY_CONFIG)
        argv += ["--config", str(tmp_path / "tiny.cfg")]
    assert run(argv) == EXIT_OK

    results = _infer_across_threads(tmp_path, model, ct_path)
    first = results[1]
    assert first.shape == (64, 128, 128)
    assert first.spacing == pytest.approx(ct.spacing)
    assert first.origin == pytest.approx(ct.origin)
    assert first.labels() <= {0, 1, 2, 3, 4}
    for threads in (4, 8):
        assert results[threads].data.tobytes() == first.data.tobytes()
