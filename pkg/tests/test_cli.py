import hashlib
import json
import subprocess
import sys

import pytest

from protodistill import cli, synthdata

TINY = [
    "train.teacher_epochs=2", "train.student_epochs=3", "train.distill_epochs=3",
    "data.n_train=12", "data.n_val=4", "data.n_test=8",
    "data.n_train_volumes=2", "data.n_val_volumes=1", "sweep.sizes=[6, 12]",
    "phantom.volume_shape=[12, 24, 24]", "phantom.slice_shape=[24, 24]",
]
ORDER = ["gen-data", "train-teacher", "extract-proto", "pretrain-student", "distill", "compare", "sweep"]


def args(command, out, *extra):
    argv = [command, "--out", str(out)]
    for item in TINY:
        argv += ["--set", item]
    return argv + list(extra)


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for command in ORDER[:5]:
        assert cli.main(args(command, out)) == 0, command
    return out


def test_full_pipeline_writes_every_artifact(run_dir):
    for command in ORDER[5:]:
        assert cli.main(args(command, run_dir)) == 0
    for name in ("teacher.ckpt", "prototype.proto", "student.ckpt", "distilled.ckpt", "comparison.txt",
                 "comparison.json", "eval_student.json", "eval_distilled.json", "sweep.tsv", "sweep.txt",
                 "teacher.jsonl", "student.jsonl", "distill.jsonl", "data/index.json"):
        assert (run_dir / name).exists(), name
    rows = (run_dir / "sweep.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["n_train", "baseline_dsc", "distilled_dsc"] and len(rows) == 3


def test_metrics_logs_carry_the_config_hash(run_dir):
    hashes = {json.loads(line)["config_hash"] for line in (run_dir / "distill.jsonl").read_text().splitlines()}
    assert len(hashes) == 1 and len(hashes.pop()) == 64


def test_distill_without_prototype_names_extract_proto(tmp_path, capsys):
    assert cli.main(args("gen-data", tmp_path)) == 0
    assert cli.main(args("distill", tmp_path)) != 0
    err = last_error(capsys)
    assert err["error"] == "missing_artifact" and err["producer"] == "extract-proto"
    assert err["path"].endswith("prototype.proto")


def test_stage_before_gen_data_names_gen_data(tmp_path, capsys):
    assert cli.main(args("train-teacher", tmp_path)) != 0
    assert last_error(capsys)["producer"] == "gen-data"


def test_mismatched_config_refused_unless_forced(run_dir, capsys):
    assert cli.main(args("eval", run_dir, "--set", "loss.beta=0.25")) != 0
    err = last_error(capsys)
    assert err["error"] == "config_mismatch" and err["found"] != err["expected"]
    assert cli.main(args("eval", run_dir, "--set", "loss.beta=0.25", "--force")) == 0
    cli.main(args("eval", run_dir))  # restore reports under the original config


def test_bad_config_reports_field_path(tmp_path, capsys):
    assert cli.main(args("gen-data", tmp_path, "--set", "train.nope=1")) != 0
    err = last_error(capsys)
    assert err["error"] == "config" and err["path"] == "train.nope"


def test_distill_reads_no_volumes_and_leaves_teacher_untouched(run_dir):
    before = sha(run_dir / "teacher.ckpt")
    reads = []
    synthdata.READ_HOOKS.append(lambda path, kind: reads.append(kind))
    try:
        assert cli.main(args("distill", run_dir)) == 0
    finally:
        synthdata.READ_HOOKS.pop()
    assert reads and "volume" not in reads
    assert sha(run_dir / "teacher.ckpt") == before


def test_rerunning_a_stage_is_byte_identical(run_dir):
    before = sha(run_dir / "distilled.ckpt")
    assert cli.main(args("distill", run_dir)) == 0
    assert sha(run_dir / "distilled.ckpt") == before


def test_output_directory_does_not_change_artifacts(run_dir, tmp_path):
    for command in ORDER[:3]:
        assert cli.main(args(command, tmp_path)) == 0
    assert sha(tmp_path / "prototype.proto") == sha(run_dir / "prototype.proto")


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "protodistill.cli", "distill", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    assert json.loads(proc.stderr.strip())["producer"] == "extract-proto"


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)
