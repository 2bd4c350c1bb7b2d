"""Batch pipeline stages: ingest, prepare, train, eval, detect-eval.

Each stage reads its inputs from the configured paths (or from earlier
stages' outputs under the output directory) and returns a StageResult that
the runner folds into ``manifest.json``.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import SUBMISSION_LABELS, __version__
from ._util import atomic_write, canonical_json, sha256_file, stage_seed
from .boxes import annotation_agreement, average_precision, read_box_csv
from .features import read_features
from .head import (
    Checkpoint,
    Dataset,
    TrainConfig,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    predict,
    select_best,
    train,
)
from .imageops import (
    AugmentConfig,
    BoxOutsideImage,
    augment,
    crop_bbox,
    load_png,
    normalize,
    resize,
    save_buffer,
)
from .labels import (
    EmptyTable,
    LabelTable,
    SplitSpec,
    distribution,
    parse_labels,
    serialize_labels,
    split,
    target_arrays,
)
from .metrics import build_report, load_thresholds, save_thresholds

log = logging.getLogger("xraykit")

THRESHOLD_MODES = ("auto-youden", "fixed", "file")


class PipelineError(RuntimeError):
    pass


class ConfigError(PipelineError):
    pass


class MissingScores(PipelineError):
    pass


@dataclass
class PipelineConfig:
    base_dir: Path = Path(".")
    labels: str | None = None
    test_labels: str | None = None
    boxes: str | None = None
    images: str | None = None
    features: str | None = None
    scores: str | None = None
    predicted_boxes: str | None = None
    ground_truth_boxes: str | None = None
    second_annotation: str | None = None
    thresholds_file: str | None = None
    output: str = "out"
    seed: int = 0
    threads: int = 1
    threshold_mode: str = "auto-youden"
    iou_threshold: float = 0.5
    observations: tuple[str, ...] = SUBMISSION_LABELS
    split_ratio: float = 0.8
    group_by_patient: bool = False
    prepare_size: tuple[int, int] = (476, 476)
    augment_train: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def path(self, name: str) -> Path | None:
        value = getattr(self, name)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.path("output")

    def validate(self) -> None:
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ConfigError(f"threshold_mode must be one of {THRESHOLD_MODES}, got {self.threshold_mode!r}")
        if self.threshold_mode == "file" and not self.thresholds_file:
            raise ConfigError("threshold_mode = file needs paths.thresholds")
        if self.features and self.scores:
            raise ConfigError("configure exactly one score source: features or scores, not both")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError("iou_threshold must be in (0, 1)")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for name in ("labels", "test_labels", "boxes", "images", "features", "scores",
                     "predicted_boxes", "ground_truth_boxes", "second_annotation", "thresholds_file"):
            p = self.path(name)
            if p is not None and not p.exists():
                raise ConfigError(f"{name}: path {p} does not exist")

    def hashable(self) -> dict:
        """Everything that affects results; the output location is excluded."""
        d = {}
        for f in fields(self):
            if f.name in ("base_dir", "output", "threads"):
                continue
            v = getattr(self, f.name)
            if isinstance(v, (TrainConfig, AugmentConfig)):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return json.loads(json.dumps(d))

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.hashable()).encode()).hexdigest()


def _getbool(section, key, default):
    return section.getboolean(key, fallback=default)


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read an INI config; keyword overrides (e.g. from CLI flags) win."""
    cp = configparser.ConfigParser()
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        cp.read(path, encoding="utf-8")
        base = path.parent
    for sec in ("paths", "run", "split", "prepare", "train", "augment"):
        if not cp.has_section(sec):
            cp.add_section(sec)
    P, R, S, PR, T, A = (cp[s] for s in ("paths", "run", "split", "prepare", "train", "augment"))
    try:
        tdef = TrainConfig()
        tc = TrainConfig(
            lr0=T.getfloat("lr0", tdef.lr0),
            schedule=T.get("schedule", tdef.schedule),
            step_period=T.getint("step_period", tdef.step_period),
            step_factor=T.getfloat("step_factor", tdef.step_factor),
            t_max=T.getint("t_max", None) if "t_max" in T else None,
            eta_min=T.getfloat("eta_min", tdef.eta_min),
            batch_size=T.getint("batch_size", tdef.batch_size),
            epochs=T.getint("epochs", tdef.epochs),
            n_hidden=T.getint("n_hidden", tdef.n_hidden),
            bn_momentum=T.getfloat("bn_momentum", tdef.bn_momentum),
            bn_eps=T.getfloat("bn_eps", tdef.bn_eps),
        )
        p_all = A.getfloat("p", 0.5)
        size = (PR.getint("width", 476), PR.getint("height", 476))
        ac = AugmentConfig(
            resize=_getbool(A, "resize", True),
            hflip=_getbool(A, "hflip", True),
            vflip=_getbool(A, "vflip", True),
            rotate=_getbool(A, "rotate", True),
            center_crop=_getbool(A, "center_crop", True),
            p_resize=A.getfloat("p_resize", p_all),
            p_hflip=A.getfloat("p_hflip", p_all),
            p_vflip=A.getfloat("p_vflip", p_all),
            p_rotate=A.getfloat("p_rotate", p_all),
            p_center_crop=A.getfloat("p_center_crop", p_all),
            rotation_range=(A.getfloat("rotation_lo", -15.0), A.getfloat("rotation_hi", 15.0)),
            crop_fraction=A.getfloat("crop_fraction", 0.9),
            target_size=size,
        )
        obs = R.get("observations")
        cfg = PipelineConfig(
            base_dir=base,
            labels=P.get("labels"),
            test_labels=P.get("test_labels"),
            boxes=P.get("boxes"),
            images=P.get("images"),
            features=P.get("features"),
            scores=P.get("scores"),
            predicted_boxes=P.get("predicted_boxes"),
            ground_truth_boxes=P.get("ground_truth_boxes"),
            second_annotation=P.get("second_annotation"),
            thresholds_file=P.get("thresholds"),
            output=P.get("output", "out"),
            seed=R.getint("seed", 0),
            threads=R.getint("threads", 1),
            threshold_mode=R.get("threshold_mode", "auto-youden"),
            iou_threshold=R.getfloat("iou_threshold", 0.5),
            observations=tuple(s.strip() for s in obs.split(",")) if obs else SUBMISSION_LABELS,
            split_ratio=S.getfloat("ratio", 0.8),
            group_by_patient=_getbool(S, "group_by_patient", False),
            prepare_size=size,
            augment_train=_getbool(PR, "augment_train", True),
            train=tc,
            augment=ac,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for k, v in overrides.items():
        if v is None:
            continue
        if k == "output":
            # --out is taken relative to the working directory, not the config file
            v = str(Path(v).resolve())
        cfg = replace(cfg, **{k: v})
    return cfg


@dataclass
class StageResult:
    stage: str
    inputs: int = 0
    outputs: int = 0
    skipped: int = 0
    files: list[Path] = field(default_factory=list)
    notes: dict = field(default_factory=dict)


def _write(path: Path, data, result: StageResult) -> None:
    atomic_write(path, data)
    result.files.append(path)


def _read_table(path: Path, cfg: PipelineConfig) -> LabelTable:
    return parse_labels(path.read_text(encoding="utf-8"), cfg.observations)


def _split_paths(cfg: PipelineConfig) -> tuple[Path, Path]:
    d = cfg.out_dir / "labels"
    return d / "train.csv", d / "val.csv"


def _load_splits(cfg: PipelineConfig) -> tuple[LabelTable, LabelTable]:
    tr, va = _split_paths(cfg)
    if not (tr.exists() and va.exists()):
        raise PipelineError(f"split label files not found under {tr.parent}; run `ingest` first")
    return _read_table(tr, cfg), _read_table(va, cfg)


# --- ingest ----------------------------------------------------------------


def cmd_ingest(cfg: PipelineConfig) -> StageResult:
    res = StageResult("ingest")
    src = cfg.path("labels")
    if src is None:
        raise PipelineError("paths.labels is not configured")
    table = _read_table(src, cfg)
    res.inputs = len(table)
    if len(table) == 0:
        raise EmptyTable(f"{src} holds no label records")
    spec = SplitSpec(cfg.split_ratio, stage_seed(cfg.seed, "split"), cfg.group_by_patient)
    tr, va = split(table, spec)
    tr_path, va_path = _split_paths(cfg)
    _write(tr_path, serialize_labels(tr), res)
    _write(va_path, serialize_labels(va), res)
    dist = {
        "n_records": len(table),
        "splits": {"train": len(tr), "val": len(va)},
        "observations": [d.to_json() for d in distribution(table)],
    }
    _write(cfg.out_dir / "distribution.json", canonical_json(dist), res)
    res.outputs = len(tr) + len(va)
    return res


# --- prepare ---------------------------------------------------------------


def _safe_name(image_path: str) -> str:
    return image_path.replace("\\", "/").strip("/").replace("/", "__") + ".cxib"


def _prepare_one(cfg: PipelineConfig, image_path: str, box, out: Path, aug: AugmentConfig | None, index: int):
    img = load_png(cfg.path("images") / image_path)
    img = normalize(crop_bbox(img, box))
    img = resize(img, *cfg.prepare_size)
    if aug is not None:
        img = augment(img, aug, index)
        if (img.width, img.height) != cfg.prepare_size:
            img = resize(img, *cfg.prepare_size)
    save_buffer(img, out)
    return out


def cmd_prepare(cfg: PipelineConfig, train_augment: bool | None = None) -> StageResult:
    """Crop, normalize and resize every labelled image; augment the train split."""
    res = StageResult("prepare")
    if cfg.path("boxes") is None or cfg.path("images") is None:
        raise PipelineError("prepare needs paths.boxes and paths.images")
    boxes = {}
    for image_path, box in read_box_csv(cfg.path("boxes").read_text(encoding="utf-8"), with_score=False):
        boxes.setdefault(image_path, box)
    tr, va = _load_splits(cfg)
    do_aug = cfg.augment_train if train_augment is None else train_augment
    aug = replace(cfg.augment, seed=stage_seed(cfg.seed, "augment"), target_size=cfg.prepare_size)

    jobs = []
    for split_name, table in (("train", tr), ("val", va)):
        for index, p in enumerate(table.paths):
            jobs.append((split_name, index, p))
    res.inputs = len(jobs)

    def run(job):
        split_name, index, p = job
        if p not in boxes:
            return job, None, "no box for image"
        src = cfg.path("images") / p
        if not src.exists():
            return job, None, "image file missing"
        out = cfg.out_dir / "prepared" / split_name / _safe_name(p)
        out.parent.mkdir(parents=True, exist_ok=True)
        try:
            _prepare_one(cfg, p, boxes[p], out, aug if (do_aug and split_name == "train") else None, index)
        except BoxOutsideImage as exc:
            return job, None, str(exc)
        return job, out, None

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        results = list(pool.map(run, jobs))
    skipped = []
    for (split_name, _, p), out, why in results:
        if out is None:
            log.warning("prepare: skipping %s (%s)", p, why)
            skipped.append({"split": split_name, "image_path": p, "reason": why})
        else:
            res.files.append(out)
    res.outputs = len(res.files)
    res.skipped = len(skipped)
    res.notes["skipped"] = skipped
    return res


# --- train -----------------------------------------------------------------


def _feature_index(cfg: PipelineConfig) -> tuple[dict[str, int], np.ndarray]:
    src = cfg.path("features")
    if src is None:
        raise PipelineError("paths.features is not configured")
    paths, X = read_features(src)
    return {p: i for i, p in enumerate(paths)}, X


def _dataset(table: LabelTable, index: dict[str, int], X: np.ndarray) -> Dataset:
    missing = [p for p in table.paths if p not in index]
    if missing:
        raise PipelineError(f"no feature vector for {missing[0]!r} ({len(missing)} missing)")
    rows = [index[p] for p in table.paths]
    target, mask = target_arrays(table)
    return Dataset(X[rows], target, mask, list(table.paths))


def _ckpt_dir(cfg: PipelineConfig) -> Path:
    return cfg.out_dir / "checkpoints"


def cmd_train(cfg: PipelineConfig) -> StageResult:
    res = StageResult("train")
    tr, va = _load_splits(cfg)
    index, X = _feature_index(cfg)
    train_set, val_set = _dataset(tr, index, X), _dataset(va, index, X)
    res.inputs = len(train_set) + len(val_set)
    tc = replace(cfg.train, seed=stage_seed(cfg.seed, "train"))
    checkpoints = train(train_set, val_set, tc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_mean_auc", "lr"])
    for c in checkpoints:
        _write(_ckpt_dir(cfg) / f"epoch_{c.epoch:03d}.ckpt", checkpoint_to_bytes(c), res)
        w.writerow([c.epoch, repr(c.train_loss), repr(c.mean_auc), repr(c.lr)])
    _write(cfg.out_dir / "train_log.csv", buf.getvalue(), res)
    best = select_best(checkpoints)
    pointer = {"epoch": best.epoch, "file": f"checkpoints/epoch_{best.epoch:03d}.ckpt", "val_mean_auc": best.mean_auc}
    _write(cfg.out_dir / "best_checkpoint.json", canonical_json(pointer), res)
    res.outputs = res.inputs
    res.notes["epochs"] = len(checkpoints)
    res.notes["best"] = pointer
    return res


def load_best(cfg: PipelineConfig) -> Checkpoint:
    ptr = cfg.out_dir / "best_checkpoint.json"
    if not ptr.exists():
        raise PipelineError(f"{ptr} not found; run `train` first")
    info = json.loads(ptr.read_text())
    return checkpoint_from_bytes((cfg.out_dir / info["file"]).read_bytes())


# --- eval ------------------------------------------------------------------


def read_scores_csv(text: str, names) -> dict[str, np.ndarray]:
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    if not header or header[0] != "image_path":
        raise PipelineError("scores CSV must start with an image_path column")
    missing = [n for n in names if n not in header]
    if missing:
        raise PipelineError(f"scores CSV lacks columns {missing}")
    cols = [header.index(n) for n in names]
    out = {}
    for row in reader:
        if not row:
            continue
        vals = np.array([float(row[j]) for j in cols])
        if np.any((vals < 0) | (vals > 1)) or not np.all(np.isfinite(vals)):
            raise PipelineError(f"scores for {row[0]!r} are not probabilities")
        out[row[0].strip()] = vals
    return out


def write_scores_csv(paths, S: np.ndarray, names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_path", *names])
    for p, row in zip(paths, S):
        w.writerow([p, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def _scores_for(table: LabelTable, lookup: dict[str, np.ndarray]) -> np.ndarray:
    for p in table.paths:
        if p not in lookup:
            raise MissingScores(f"no scores for image {p!r}")
    return np.stack([lookup[p] for p in table.paths]) if len(table) else np.empty((0, table.n_observations))


def cmd_eval(cfg: PipelineConfig) -> StageResult:
    res = StageResult("eval")
    if bool(cfg.features) == bool(cfg.scores):
        raise PipelineError("eval needs exactly one score source: paths.features or paths.scores")
    names = cfg.observations
    need_val = cfg.threshold_mode == "auto-youden" or cfg.path("test_labels") is None
    val = _load_splits(cfg)[1] if need_val else None
    if cfg.path("test_labels") is not None:
        test = _read_table(cfg.path("test_labels"), cfg)
    else:
        log.warning("eval: no paths.test_labels; reporting on the validation split")
        test = val

    if cfg.scores:
        lookup = read_scores_csv(cfg.path("scores").read_text(encoding="utf-8"), names)
    else:
        index, X = _feature_index(cfg)
        ckpt = load_best(cfg)
        wanted = list(dict.fromkeys([*(val.paths if val is not None else ()), *test.paths]))
        missing = [p for p in wanted if p not in index]
        if missing:
            raise MissingScores(f"no feature vector (hence no scores) for image {missing[0]!r}")
        S = predict(ckpt.params, X[[index[p] for p in wanted]], cfg.train.bn_eps)
        lookup = dict(zip(wanted, S))
        _write(cfg.out_dir / "scores.csv", write_scores_csv(wanted, S, names), res)

    test_scores = _scores_for(test, lookup)
    if cfg.threshold_mode == "auto-youden":
        vt, vm = target_arrays(val)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            tuned = build_report(_scores_for(val, lookup), vt.astype(int), names, None, vm)
        for wmsg in caught:
            log.warning("eval (validation): %s", wmsg.message)
        thresholds = tuned.thresholds
    elif cfg.threshold_mode == "fixed":
        thresholds = {n: 0.5 for n in names}
    else:
        thresholds = load_thresholds(cfg.path("thresholds_file"))
        absent = [n for n in names if n not in thresholds]
        if absent:
            raise PipelineError(f"threshold file lacks labels {absent}")

    tt, tm = target_arrays(test)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = build_report(test_scores, tt.astype(int), names, thresholds, tm)
    for wmsg in caught:
        log.warning("eval (test): %s", wmsg.message)
    res.inputs = res.outputs = len(test)

    tpath = cfg.out_dir / "thresholds.json"
    save_thresholds({n: thresholds[n] for n in names}, tpath)
    res.files.append(tpath)
    payload = report.to_json()
    payload["threshold_mode"] = cfg.threshold_mode
    payload["n_test"] = len(test)
    _write(cfg.out_dir / "report.json", canonical_json(payload), res)
    _write(cfg.out_dir / "report.txt", report.render(), res)
    res.notes["mean_auc"] = report.mean_auc
    res.notes["mean_f1"] = report.mean_f1
    return res


# --- detect-eval -----------------------------------------------------------


def cmd_detect_eval(cfg: PipelineConfig) -> StageResult:
    res = StageResult("detect-eval")
    gt_path = cfg.path("ground_truth_boxes") or cfg.path("boxes")
    pred_path = cfg.path("predicted_boxes")
    if gt_path is None or not gt_path.exists():
        raise PipelineError(f"ground-truth box file not found: {gt_path}")
    if pred_path is None or not pred_path.exists():
        raise PipelineError(f"predicted box file not found: {pred_path}")
    gt = read_box_csv(gt_path.read_text(encoding="utf-8"), with_score=False)
    preds = read_box_csv(pred_path.read_text(encoding="utf-8"), with_score=True)
    res.inputs = len(gt) + len(preds)
    ap = average_precision(preds, gt, cfg.iou_threshold)
    out = {"ap": ap, "iou_threshold": cfg.iou_threshold, "n_ground_truth": len(gt), "n_predictions": len(preds)}
    if cfg.path("second_annotation") is not None:
        second = read_box_csv(cfg.path("second_annotation").read_text(encoding="utf-8"), with_score=False)
        out["annotator_agreement"] = annotation_agreement(gt, second, cfg.iou_threshold).to_json()
    out["prediction_agreement"] = annotation_agreement(
        gt, [(p.image_id, p.box) for p in preds], cfg.iou_threshold
    ).to_json()
    _write(cfg.out_dir / "detection.json", canonical_json(out), res)
    res.outputs = res.inputs
    return res


STAGES = {
    "ingest": cmd_ingest,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect-eval": cmd_detect_eval,
}


def run_stages(cfg: PipelineConfig) -> list[str]:
    """Stages `run` executes for this config, in order."""
    stages = ["ingest"]
    if cfg.boxes and cfg.images:
        stages.append("prepare")
    if cfg.features:
        stages.append("train")
    if cfg.features or cfg.scores:
        stages.append("eval")
    if cfg.predicted_boxes:
        stages.append("detect-eval")
    return stages


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins timestamps for reproducible reruns
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(cfg: PipelineConfig, command: str, results: list[StageResult], started: str) -> Path:
    out = cfg.out_dir
    files = sorted({p for r in results for p in r.files})
    manifest = {
        "command": command,
        "tool": "xraykit",
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "started_at": started,
        "finished_at": _timestamp(),
        "stages": [
            {
                "stage": r.stage,
                "inputs": r.inputs,
                "outputs": r.outputs,
                "skipped": r.skipped,
                **({"notes": r.notes} if r.notes else {}),
            }
            for r in results
        ],
        "files": [{"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p)} for p in files],
    }
    path = out / "manifest.json"
    atomic_write(path, canonical_json(manifest))
    return path


def execute(cfg: PipelineConfig, command: str) -> list[StageResult]:
    """Run one subcommand (or `run`) and write the manifest; raises on the first failing stage."""
    cfg.validate()
    names = run_stages(cfg) if command == "run" else [command]
    started = _timestamp()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for name in names:
        try:
            results.append(STAGES[name](cfg))
        except Exception as exc:
            raise StageFailed(name, exc) from exc
    write_manifest(cfg, command, results, started)
    return results


class StageFailed(PipelineError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
