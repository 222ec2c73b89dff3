from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from fpss.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_PIPELINE, main
from fpss.synthetic import write_suite
from fpss.tensor_core import load_mask

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    root = tmp_path_factory.mktemp("suite")
    manifests = write_suite(root, datasets=2, images=3, classes=2, seed=5)
    return [str(p) for p in manifests]


def _run(argv):
    return main(argv)


# ---------------------------------------------------------------------------
# segment
# ---------------------------------------------------------------------------

def test_segment_writes_mask_and_diagnostics(suite, tmp_path, capsys):
    out = tmp_path / "seg"
    code = _run([
        "segment", "--manifest", suite[0], "--image", "img0", "--class-id", "1",
        "--seed", "7", "--out", str(out),
    ])
    assert code == EXIT_OK
    printed = capsys.readouterr().out.strip()
    mask_path = out / "img0_1.mask.pgm"
    assert printed.endswith(str(mask_path))
    assert mask_path.exists()
    assert (out / "img0_1.mask.fpss").exists()
    diag = json.loads((out / "img0_1.diagnostics.json").read_text())
    assert diag["strategy"] == "VisualOnly"
    assert diag["counters"]["accepted"] >= 1
    # both mask formats hold the same pixels
    pgm = load_mask(mask_path)
    raw = load_mask(out / "img0_1.mask.fpss")
    assert np.array_equal(pgm.data, raw.data)


def test_segment_with_explicit_reference(suite, tmp_path):
    out = tmp_path / "seg"
    code = _run([
        "segment", "--manifest", suite[0], "--image", "img0", "--class-id", "1",
        "--reference", "img2", "--out", str(out),
    ])
    assert code == EXIT_OK


def test_segment_strategy_flags(suite, tmp_path):
    out = tmp_path / "seg"
    code = _run([
        "segment", "--manifest", suite[0], "--image", "img1", "--class-id", "2",
        "--strategy", "promptmatcher", "--seed", "3", "--out", str(out),
    ])
    assert code == EXIT_OK
    diag = json.loads((out / "img1_2.diagnostics.json").read_text())
    assert diag["strategy"] == "PromptMatcher"


def test_segment_bad_threshold_is_config_error(suite, tmp_path):
    code = _run([
        "segment", "--manifest", suite[0], "--image", "img0", "--class-id", "1",
        "--theta", "1.5", "--out", str(tmp_path),
    ])
    assert code == EXIT_CONFIG


def test_segment_unknown_image_is_config_error(suite, tmp_path):
    code = _run([
        "segment", "--manifest", suite[0], "--image", "nope", "--class-id", "1",
        "--out", str(tmp_path),
    ])
    assert code == EXIT_CONFIG


def test_segment_missing_manifest_is_missing_error(tmp_path):
    code = _run([
        "segment", "--manifest", str(tmp_path / "absent.json"), "--image", "a",
        "--class-id", "c", "--out", str(tmp_path),
    ])
    assert code == EXIT_MISSING


def test_segment_missing_feature_file(tmp_path):
    manifests = write_suite(tmp_path, datasets=1, images=2, classes=1, seed=1)
    entry = json.loads(Path(manifests[0]).read_text())
    victim = tmp_path / "synth0" / entry["images"][0]["feature_path"]
    victim.unlink()
    code = _run([
        "segment", "--manifest", str(manifests[0]), "--image", "img0",
        "--class-id", "1", "--out", str(tmp_path / "out"),
    ])
    assert code == EXIT_MISSING


def test_unknown_strategy_exits_two(suite, tmp_path):
    with pytest.raises(SystemExit) as err:
        _run([
            "segment", "--manifest", suite[0], "--image", "img0", "--class-id", "1",
            "--strategy", "psychic", "--out", str(tmp_path),
        ])
    assert err.value.code == EXIT_CONFIG


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_evaluate_runs_and_is_deterministic(suite, tmp_path, capsys):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        code = _run(["evaluate", "--manifest", *suite, "--seed", "11", "--out", str(out)])
        assert code == EXIT_OK
    capsys.readouterr()
    assert (out_a / "records.csv").read_bytes() == (out_b / "records.csv").read_bytes()
    assert (out_a / "report.csv").read_bytes() == (out_b / "report.csv").read_bytes()
    assert not (out_a / "failures.json").exists()  # synthetic suite never fails
    lines = (out_a / "records.csv").read_text().strip().splitlines()
    assert lines[0] == "dataset,domain,class,image,method,intersection,union"
    assert len(lines) == 1 + 2 * 3 * 2  # datasets x images x classes


def test_evaluate_different_seeds_may_pick_other_references(suite, tmp_path):
    # same suite, different seed: still exit 0 and a fully populated file
    out = tmp_path / "c"
    assert _run(["evaluate", "--manifest", *suite, "--seed", "12", "--out", str(out)]) == EXIT_OK
    assert (out / "records.csv").exists()


def test_evaluate_strategy_without_declared_logits_is_config_error(suite, tmp_path):
    # the suite is written with tp_masks and tp_logits, so drop the logits
    manifest = json.loads(Path(suite[0]).read_text())
    for image in manifest["images"]:
        image.pop("tp_logits", None)
    stripped = Path(suite[0]).parent / "stripped.json"
    stripped.write_text(json.dumps(manifest))
    code = _run([
        "evaluate", "--manifest", str(stripped), "--seed", "1",
        "--strategy", "prob-merge", "--out", str(tmp_path / "p"),
    ])
    assert code == EXIT_CONFIG


def test_evaluate_parallel_matches_serial(suite, tmp_path):
    serial = tmp_path / "serial"
    parallel = tmp_path / "parallel"
    assert _run(["evaluate", "--manifest", *suite, "--seed", "4", "--out", str(serial)]) == EXIT_OK
    assert _run([
        "evaluate", "--manifest", *suite, "--seed", "4", "--workers", "2", "--out", str(parallel),
    ]) == EXIT_OK
    assert (serial / "records.csv").read_bytes() == (parallel / "records.csv").read_bytes()


@pytest.mark.parametrize("strategy", ["promptmatcher", "prob-merge", "cluster-merge", "select"])
def test_evaluate_all_fusion_strategies(suite, tmp_path, strategy):
    out = tmp_path / strategy
    code = _run([
        "evaluate", "--manifest", *suite, "--seed", "2",
        "--strategy", strategy, "--out", str(out),
    ])
    assert code == EXIT_OK
    assert (out / "records.csv").exists()


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def test_oracle_dataset_mode_reproduces_the_upper_bound(tmp_path, capsys):
    code = _run([
        "oracle",
        str(DATA / "benchmark_tp_records.csv"),
        str(DATA / "benchmark_vp_records.csv"),
        "--mode", "dataset",
        "--out", str(tmp_path / "oracle.csv"),
    ])
    assert code == EXIT_OK
    table = capsys.readouterr().out
    assert "60.9" in table and "48.6" in table
    text = (tmp_path / "oracle.csv").read_text()
    assert "overall,oracle(tp|vp)" in text


def test_oracle_image_mode(tmp_path, capsys):
    code = _run([
        "oracle",
        str(DATA / "benchmark_tp_records.csv"),
        str(DATA / "benchmark_vp_records.csv"),
        "--mode", "image",
    ])
    assert code == EXIT_OK
    # single image per dataset-class: the per-image oracle equals the dataset one
    assert "48.6" in capsys.readouterr().out


def test_oracle_misaligned_records_exit_three(tmp_path):
    (tmp_path / "short.csv").write_text(
        "dataset,domain,class,image,method,intersection,union\n"
        "ATLANTIS,General,all,img0,tp,5,10\n"
    )
    code = _run([
        "oracle",
        str(tmp_path / "short.csv"),
        str(DATA / "benchmark_vp_records.csv"),
        "--mode", "image",
    ])
    assert code == EXIT_MISSING


def test_oracle_missing_file_exits_three(tmp_path):
    code = _run([
        "oracle", str(tmp_path / "nope.csv"), str(DATA / "benchmark_vp_records.csv"),
    ])
    assert code == EXIT_MISSING


# ---------------------------------------------------------------------------
# diff
# ---------------------------------------------------------------------------

def test_diff_prints_ranked_rows(capsys):
    code = _run([
        "diff",
        str(DATA / "vp_favored_tp_records.csv"),
        str(DATA / "vp_favored_vp_records.csv"),
        "--top-n", "2",
    ])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "rank,class,iou_tp,iou_vp,diff,abs_diff"
    assert lines[1].startswith("1,Worm-eating Warbler,1.4,82.2,80.8,80.8")
    assert len(lines) == 3


def test_diff_disambiguates_repeated_class_names(capsys):
    code = _run([
        "diff",
        str(DATA / "tp_favored_tp_records.csv"),
        str(DATA / "tp_favored_vp_records.csv"),
        "--top-n", "1",
    ])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[1] == "1,Pole (BDD100K),41.71,7.64,-34.07,34.07"


def test_diff_top_n_zero_prints_header_only(capsys):
    code = _run([
        "diff",
        str(DATA / "vp_favored_tp_records.csv"),
        str(DATA / "vp_favored_vp_records.csv"),
        "--top-n", "0",
    ])
    assert code == EXIT_OK
    assert capsys.readouterr().out.strip() == "rank,class,iou_tp,iou_vp,diff,abs_diff"


def test_diff_negative_top_n_is_config_error():
    code = _run([
        "diff",
        str(DATA / "vp_favored_tp_records.csv"),
        str(DATA / "vp_favored_vp_records.csv"),
        "--top-n", "-1",
    ])
    assert code == EXIT_CONFIG


def test_diff_out_file(tmp_path):
    path = tmp_path / "gaps.csv"
    code = _run([
        "diff",
        str(DATA / "tp_favored_tp_records.csv"),
        str(DATA / "tp_favored_vp_records.csv"),
        "--top-n", "10",
        "--out", str(path),
    ])
    assert code == EXIT_OK
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 11
    assert lines[1].startswith("1,Pole (BDD100K)")


def test_exit_codes_are_distinct():
    assert len({EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_PIPELINE}) == 4
