"""Pipeline stages over an output directory, plus multi-run experiments.

Each stage reads the artifacts of earlier stages, checks that they were
produced under the same configuration hash, and writes its own artifacts.

Layout of ``out``::

    data/index.json, data/*.phnt     gen-data
    teacher.ckpt, teacher.jsonl      train-teacher
    prototype.proto                  extract-proto
    student.ckpt, student.jsonl      pretrain-student
    distilled.ckpt, distill.jsonl    distill
    eval_<model>.json                eval (also run by compare)
    comparison.txt, comparison.json  compare
    sweep.tsv, sweep.txt             sweep
"""

import json
import logging
import os
from dataclasses import dataclass

from .evaluation import compare_runs, evaluate
from .models import load_checkpoint, save_checkpoint
from .prototype import dataset_prototype, load_prototype, save_prototype
from .synthdata import load_split, make_splits, make_volume_splits, read_index, write_dataset
from .trainer import distill, pretrain_student, train_teacher, write_metrics

log = logging.getLogger(__name__)

DATA_DIR = "data"
ARTIFACTS = {
    "data": (os.path.join(DATA_DIR, "index.json"), "gen-data"),
    "teacher": ("teacher.ckpt", "train-teacher"),
    "prototype": ("prototype.proto", "extract-proto"),
    "student": ("student.ckpt", "pretrain-student"),
    "distilled": ("distilled.ckpt", "distill"),
}


class StageError(Exception):
    """A stage cannot run; carries a machine-readable code."""

    def __init__(self, code, message, **fields):
        super().__init__(message)
        self.code = code
        self.fields = fields

    def as_json(self):
        return json.dumps({"error": self.code, "message": str(self), **self.fields}, sort_keys=True)


def artifact_path(out, name):
    return os.path.join(out, ARTIFACTS[name][0])


def _require(out, name):
    path = artifact_path(out, name)
    if not os.path.exists(path):
        producer = ARTIFACTS[name][1]
        raise StageError(
            "missing_artifact",
            f"{path} not found; run `protodistill {producer}` first",
            path=path,
            producer=producer,
        )
    return path


def _check_hash(found, cfg, path, force):
    expected = cfg.config_hash()
    if found != expected and not force:
        raise StageError(
            "config_mismatch",
            f"{path} was produced by config {found[:12] or '<none>'}, current is {expected[:12]} "
            "(use --force to override)",
            path=path,
            found=found,
            expected=expected,
        )


def _load_params(out, name, cfg, force):
    path = _require(out, name)
    params = load_checkpoint(path)
    _check_hash(params.config_hash, cfg, path, force)
    return params


def _data(out, cfg, force, kind, split):
    path = _require(out, "data")
    _check_hash(read_index(os.path.dirname(path)).get("config_hash", ""), cfg, path, force)
    return load_split(os.path.join(out, DATA_DIR), kind, split)


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# stages


def gen_data(cfg, out, force=False):
    d = cfg.data
    slices = make_splits(cfg.phantom_spec("plain"), d.n_train, d.n_val, d.n_test, cfg.seed)
    volumes = make_volume_splits(cfg.teacher_spec(), d.n_train_volumes, d.n_val_volumes, cfg.seed)
    groups = {("slice", k): (cfg.phantom_spec("plain"), v) for k, v in slices.items()}
    groups.update({("volume", k): (cfg.teacher_spec(), v) for k, v in volumes.items()})
    write_dataset(os.path.join(out, DATA_DIR), groups, cfg.config_hash())
    return groups


def stage_train_teacher(cfg, out, force=False):
    train = _data(out, cfg, force, "volume", "train")
    val = _data(out, cfg, force, "volume", "val")
    result = train_teacher(cfg.train_config(), train, val, n_classes=cfg.phantom.n_classes)
    result.params.config_hash = cfg.config_hash()
    save_checkpoint(result.params, artifact_path(out, "teacher"))
    write_metrics(_stamp(result.history, cfg), os.path.join(out, "teacher.jsonl"))
    return result


def stage_extract_proto(cfg, out, force=False):
    teacher = _load_params(out, "teacher", cfg, force)
    volumes = _data(out, cfg, force, "volume", "train")
    proto = dataset_prototype(teacher, volumes, cfg.prototype.window, source=f"teacher3d/{cfg.data.teacher_contrast}")
    proto.config_hash = cfg.config_hash()
    save_prototype(proto, artifact_path(out, "prototype"))
    return proto


def stage_pretrain_student(cfg, out, force=False):
    train = _data(out, cfg, force, "slice", "train")
    val = _data(out, cfg, force, "slice", "val")
    result = pretrain_student(cfg.train_config(), train, val, n_classes=cfg.phantom.n_classes)
    result.params.config_hash = cfg.config_hash()
    save_checkpoint(result.params, artifact_path(out, "student"))
    write_metrics(_stamp(result.history, cfg), os.path.join(out, "student.jsonl"))
    return result


def stage_distill(cfg, out, force=False):
    proto_path = _require(out, "prototype")
    proto = load_prototype(proto_path)
    _check_hash(proto.config_hash, cfg, proto_path, force)
    student = _load_params(out, "student", cfg, force)
    train = _data(out, cfg, force, "slice", "train")
    val = _data(out, cfg, force, "slice", "val")
    result = distill(cfg.train_config(), student, proto, train, val)
    result.params.config_hash = cfg.config_hash()
    save_checkpoint(result.params, artifact_path(out, "distilled"))
    write_metrics(_stamp(result.history, cfg), os.path.join(out, "distill.jsonl"))
    return result


def stage_eval(cfg, out, force=False):
    """Score every available model: the teacher on validation volumes, students on test slices."""
    reports = {}
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    test = None
    for name in ("student", "distilled"):
        if not os.path.exists(artifact_path(out, name)):
            continue
        params = _load_params(out, name, cfg, force)
        if test is None:
            test = _data(out, cfg, force, "slice", "test")
        reports[name] = evaluate(params, test, dict(meta, model=name, split="test"))
    if os.path.exists(artifact_path(out, "teacher")):
        teacher = _load_params(out, "teacher", cfg, force)
        reports["teacher"] = evaluate(teacher, _data(out, cfg, force, "volume", "val"),
                                      dict(meta, model="teacher", split="val"))
    if not reports:
        _require(out, "student")
    for name, report in reports.items():
        report.save(os.path.join(out, f"eval_{name}.json"))
    return reports


def stage_compare(cfg, out, force=False):
    """Evaluate the pretrained and distilled students on the test split and compare them."""
    _require(out, "student")
    _require(out, "distilled")
    reports = stage_eval(cfg, out, force)
    comp = compare_runs(reports["student"], reports["distilled"])
    text = comp.table(("Baseline", "Distilled"))
    with open(os.path.join(out, "comparison.txt"), "w") as fh:
        fh.write(text)
    _write_json(dict(comp.to_dict(), config_hash=cfg.config_hash()), os.path.join(out, "comparison.json"))
    return comp, text


def stage_sweep(cfg, out, force=False):
    proto_path = _require(out, "prototype")
    proto = load_prototype(proto_path)
    _check_hash(proto.config_hash, cfg, proto_path, force)
    train = _data(out, cfg, force, "slice", "train")
    val = _data(out, cfg, force, "slice", "val")
    test = _data(out, cfg, force, "slice", "test")
    points = lowdata_sweep(cfg.train_config(), train, val, test, proto, cfg.sweep.sizes, cfg.phantom.n_classes)
    write_sweep(points, out)
    return points


def _stamp(history, cfg):
    h = cfg.config_hash()
    return [dict(rec, config_hash=h) for rec in history]


# --------------------------------------------------------------------------
# experiments


@dataclass
class SweepPoint:
    n_train: int
    baseline_dsc: float
    distilled_dsc: float


def lowdata_sweep(train_config, train, val, test, prototype, sizes, n_classes):
    """Pretrain on the first ``n`` slices, distill, and score both on ``test``."""
    sizes = list(sizes)
    if sizes != sorted(sizes) or not sizes or sizes[-1] > len(train):
        raise ValueError(f"sizes must ascend and stay within {len(train)} training items")
    points = []
    for n in sizes:
        base = pretrain_student(train_config, train[:n], val, n_classes=n_classes)
        dist = distill(train_config, base.params, prototype, train[:n], val)
        points.append(SweepPoint(n, evaluate(base.params, test).mean_dsc(), evaluate(dist.params, test).mean_dsc()))
        log.info("sweep n=%d baseline %.4f distilled %.4f", n, points[-1].baseline_dsc, points[-1].distilled_dsc)
    return points


def write_sweep(points, out):
    with open(os.path.join(out, "sweep.tsv"), "w") as fh:
        fh.write("n_train\tbaseline_dsc\tdistilled_dsc\n")
        for p in points:
            fh.write(f"{p.n_train}\t{p.baseline_dsc:.6f}\t{p.distilled_dsc:.6f}\n")
    with open(os.path.join(out, "sweep.txt"), "w") as fh:
        fh.write(f"{'n_train':>8} {'baseline':>10} {'distilled':>10} {'delta':>9}\n")
        for p in points:
            fh.write(f"{p.n_train:>8} {p.baseline_dsc:>10.4f} {p.distilled_dsc:>10.4f} "
                     f"{p.distilled_dsc - p.baseline_dsc:>+9.4f}\n")


def student_benchmark(cfg, prototype, seed):
    """Baseline vs distilled test reports for one student-side seed.

    The slice data and the student initialization are derived from ``seed``;
    the teacher side is fixed through ``prototype``.
    """
    run = cfg.replace(seed=seed)
    d = run.data
    splits = make_splits(run.phantom_spec("plain"), d.n_train, d.n_val, d.n_test, seed)
    tc = run.train_config()
    base = pretrain_student(tc, splits["train"], splits["val"], n_classes=run.phantom.n_classes)
    dist = distill(tc, base.params, prototype, splits["train"], splits["val"])
    return evaluate(base.params, splits["test"]), evaluate(dist.params, splits["test"]), base, dist, splits


def teacher_prototype(cfg, contrast=None):
    """Train a teacher on the configured volumes and return ``(prototype, fit, volumes)``."""
    if contrast is not None:
        cfg = cfg.replace(**{"data.teacher_contrast": contrast})
    d = cfg.data
    vols = make_volume_splits(cfg.teacher_spec(), d.n_train_volumes, d.n_val_volumes, cfg.seed)
    fit = train_teacher(cfg.train_config(), vols["train"], vols["val"], n_classes=cfg.phantom.n_classes)
    proto = dataset_prototype(fit.params, vols["train"], cfg.prototype.window,
                              source=f"teacher3d/{cfg.data.teacher_contrast}")
    return proto, fit, vols
