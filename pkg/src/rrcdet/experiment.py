"""Training, validation, file inference, and report emission.

The training loop follows the standard recipe: sample a batch of synthetic
scenes, augment (HSV jitter, flip, constrained crop), forward through the
backbone and the rolling iterations, sum the per-output losses, backprop,
and take an SGD-with-momentum step under the stepwise learning-rate decay.
Every step appends one row to the loss log; checkpoints are written
periodically and at the end. Everything is deterministic for a fixed
config in the 64-bit profile.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from rrcdet import autograd as ag
from rrcdet.anchors import match
from rrcdet.autograd import sgd_momentum_step
from rrcdet.checkpoint import (
    CheckpointError,
    apply_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from rrcdet.config import RunConfig
from rrcdet.data import (
    Sample,
    hsv_jitter,
    read_ppm,
    resize_bilinear,
    split,
    ssd_augment,
    synth_scene,
)
from rrcdet.evaluation import (
    GroundTruthRecord,
    format_detection_line,
    map_sweep,
)
from rrcdet.inference import Detection, decode_output, nms
from rrcdet.losses import attach_labels, total_loss
from rrcdet.model import Detector, build_detector

THREADS_ENV = "RRCDET_EVAL_THREADS"


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; carries the step and the breakdown."""

    def __init__(self, step, report):
        self.step = step
        self.report = report
        parts = ", ".join(f"out{i + 1}={v}"
                          for i, v in enumerate(report.per_output))
        super().__init__(f"non-finite loss at step {step}: {parts}")


def corpus_indices(config: RunConfig):
    """Deterministic (train, validation) scene indices for a config."""
    n_train = config["data.train_scenes"]
    n_val = config["data.val_scenes"]
    total = n_train + n_val
    return split(total, n_val / total, seed=config["data.seed"])


def _augment(sample: Sample, config: RunConfig,
             rng: np.random.Generator) -> Sample:
    jittered = hsv_jitter(sample.image, config["augment.hsv_factor"], rng)
    sample = Sample(image=jittered, boxes=sample.boxes, labels=sample.labels,
                    occluded_fraction=sample.occluded_fraction)
    return ssd_augment(sample, rng,
                       min_visible_iou=config["augment.min_visible_iou"],
                       flip_prob=config["augment.flip_prob"],
                       crop_prob=config["augment.crop_prob"])


def _match_sample(detector: Detector, sample: Sample):
    result = match(detector.anchors, sample.boxes,
                   threshold=detector.config["anchors.match_threshold"])
    return attach_labels(result, sample.labels)


def format_log_row(step: int, lr: float, report) -> str:
    outs = " ".join(f"out{i + 1}={v!r}"
                    for i, v in enumerate(report.per_output))
    return (f"step={step} lr={lr!r} {outs} total={report.total!r} "
            f"zero_pos={report.images_without_positives}")


def parse_log_row(line: str) -> dict:
    row = {}
    for token in line.split():
        key, _, value = token.partition("=")
        row[key] = float(value) if "." in value or "e" in value else int(value)
    return row


@dataclass
class TrainResult:
    log_path: str
    checkpoint_path: str
    steps: int
    seconds: float
    rows: list[str] = field(default_factory=list)


def train(config: RunConfig, out_dir: str, resume: str | None = None,
          progress=None) -> TrainResult:
    """Run the configured training; returns paths to log and checkpoint."""
    os.makedirs(out_dir, exist_ok=True)
    detector = build_detector(config)
    config_hash = config.config_hash()
    start_step = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.config_hash != config_hash:
            raise CheckpointError(
                f"{resume}: checkpoint was written by a different config")
        apply_checkpoint(detector.store, ck)
        start_step = ck.step

    train_idx, _ = corpus_indices(config)
    scene_spec = config.scene_spec()
    seed = config["train.seed"] & 0xFFFFFFFF
    sample_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, 1, start_step])))
    aug_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, 2, start_step])))

    batch = config["train.batch_size"]
    steps = config["train.steps"]
    every = config["train.checkpoint_every"]
    augment = config["augment.enabled"]
    momentum = config["optimizer.momentum"]
    decay = config["optimizer.weight_decay"]

    log_path = os.path.join(out_dir, "train_log.txt")
    log_mode = "a" if start_step else "w"
    rows = []
    started = time.perf_counter()
    final_path = os.path.join(out_dir, "final.ckpt")
    with open(log_path, log_mode, encoding="utf-8") as log:
        for step in range(start_step, steps):
            lr = config.learning_rate(step)
            picked = sample_rng.choice(train_idx, size=batch,
                                       replace=len(train_idx) < batch)
            samples = []
            for index in picked:
                sample = synth_scene(scene_spec, int(index))
                if augment:
                    sample = _augment(sample, config, aug_rng)
                samples.append(sample)
            images = np.stack([s.image for s in samples])
            matches = [_match_sample(detector, s) for s in samples]
            outputs = detector.forward(images)
            loss, report = total_loss(outputs, matches,
                                      neg_ratio=config["train.neg_ratio"])
            if not np.isfinite(report.total):
                raise TrainingDiverged(step, report)
            loss.backward()
            sgd_momentum_step(detector.store, lr, momentum, decay)
            row = format_log_row(step, lr, report)
            rows.append(row)
            log.write(row + "\n")
            if progress is not None:
                progress(step, report)
            done = step + 1
            if done % every == 0 or done == steps:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{done:06d}.ckpt"),
                                detector.store, config_hash, done)
    save_checkpoint(final_path, detector.store, config_hash, steps)
    return TrainResult(log_path=log_path, checkpoint_path=final_path,
                       steps=steps, seconds=time.perf_counter() - started,
                       rows=rows)


def load_detector(config: RunConfig, ckpt_path: str) -> Detector:
    """Rebuild a detector and load checkpoint values, verifying the hash."""
    ck = load_checkpoint(ckpt_path)
    if ck.config_hash != config.config_hash():
        raise CheckpointError(
            f"{ckpt_path}: checkpoint was written by a different config")
    detector = build_detector(config)
    apply_checkpoint(detector.store, ck)
    return detector


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    n_images: int
    per_output_loss: list[float]
    tables: dict                       # select tuple -> SweepTable
    pr_curves: dict                    # (select, class, thr) -> PRCurve

    def loss_table_text(self) -> str:
        lines = ["output  mean validation loss"]
        for i, v in enumerate(self.per_output_loss):
            lines.append(f"{i + 1:>6}  {v:.6f}")
        return "\n".join(lines)


def _sample_records(sample: Sample, class_names) -> list[GroundTruthRecord]:
    _, h, w = sample.image.shape
    scale = np.array([w, h, w, h], dtype=np.float64)
    records = []
    for i, box in enumerate(sample.boxes):
        occ = (sample.occluded_fraction[i]
               if len(sample.occluded_fraction) else 0.0)
        records.append(GroundTruthRecord(
            class_name=class_names[sample.labels[i] - 1],
            box=box * scale, truncation=0.0,
            occlusion=0 if occ < 0.01 else (1 if occ < 0.4 else 2)))
    return records


def validate(detector: Detector, selects=None, thresholds=None,
             max_images: int | None = None, batch_size: int = 8,
             mode: str = "kitti40", compute_losses: bool = True,
             score_threshold: float | None = None) -> ValidationReport:
    """Validation losses per output plus AP sweeps per fusion selection.

    One forward pass per image serves every selection; detections are in
    pixel coordinates against the synthetic groundtruth. Thread count for
    batch-parallel evaluation comes from RRCDET_EVAL_THREADS (default 1).
    """
    config = detector.config
    class_names = config["data.classes"]
    if selects is None:
        selects = [tuple(config["fusion.select"])]
    selects = [tuple(sorted(s)) for s in selects]
    if thresholds is None:
        thresholds = config["eval.thresholds"]
    if score_threshold is None:
        score_threshold = config["fusion.score_threshold"]
    nms_threshold = config["fusion.nms_threshold"]
    needed = sorted(set().union(*selects))

    _, val_idx = corpus_indices(config)
    if max_images is not None:
        val_idx = val_idx[:max_images]
    scene_spec = config.scene_spec()
    size = config["data.image_size"]
    scale = np.array([size, size, size, size], dtype=np.float64)

    batches = [val_idx[i:i + batch_size]
               for i in range(0, len(val_idx), batch_size)]

    def run_batch(indices):
        samples = [synth_scene(scene_spec, int(i)) for i in indices]
        images = np.stack([s.image for s in samples])
        outputs = detector.predict(images)
        losses = None
        if compute_losses:
            matches = [_match_sample(detector, s) for s in samples]
            with ag.no_grad():
                _, report = total_loss(outputs, matches,
                                       neg_ratio=config["train.neg_ratio"])
            losses = report.per_output
        gts = [_sample_records(s, class_names) for s in samples]
        dets = []
        for b in range(len(samples)):
            decoded = {t: decode_output(outputs[t - 1], detector.anchors,
                                        score_threshold, image=b)
                       for t in needed}
            per_select = {}
            for sel in selects:
                pool = [d for t in sel for d in decoded[t]]
                # copy on scale: decoded detections are shared across selects
                per_select[sel] = [
                    Detection(box=d.box * scale, class_id=d.class_id,
                              score=d.score, source=d.source)
                    for d in nms(pool, nms_threshold)]
            dets.append(per_select)
        return losses, gts, dets

    n_threads = max(1, int(os.environ.get(THREADS_ENV, "1")))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(run_batch, batches))
    else:
        results = [run_batch(b) for b in batches]

    loss_sum = None
    n_images = 0
    gts_all = []
    dets_all = {sel: [] for sel in selects}
    for (losses, gts, dets), indices in zip(results, batches):
        n = len(indices)
        n_images += n
        if losses is not None:
            arr = np.array(losses) * n
            loss_sum = arr if loss_sum is None else loss_sum + arr
        gts_all.extend(gts)
        for per_select in dets:
            for sel in selects:
                dets_all[sel].append(per_select[sel])

    pr_curves = {}
    tables = {}
    for sel in selects:
        curves = {}
        tables[sel] = map_sweep(dets_all[sel], gts_all, thresholds,
                                class_names, mode=mode, pr_curves=curves)
        for (name, thr), curve in curves.items():
            pr_curves[(sel, name, thr)] = curve
    return ValidationReport(
        n_images=n_images,
        per_output_loss=(list(loss_sum / n_images)
                         if loss_sum is not None else []),
        tables=tables, pr_curves=pr_curves)


def write_validation_reports(report: ValidationReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    if report.per_output_loss:
        with open(os.path.join(out_dir, "val_losses.txt"), "w") as fh:
            fh.write(report.loss_table_text() + "\n")
    for sel, table in report.tables.items():
        tag = "-".join(str(t) for t in sel)
        with open(os.path.join(out_dir, f"iou_sweep_{tag}.txt"), "w") as fh:
            fh.write(f"fusion over outputs {list(sel)}\n")
            fh.write(table.to_text() + "\n")
        with open(os.path.join(out_dir, f"iou_sweep_{tag}.csv"), "w") as fh:
            fh.write(table.to_csv() + "\n")
    for (sel, name, thr), curve in report.pr_curves.items():
        tag = "-".join(str(t) for t in sel)
        path = os.path.join(out_dir, f"pr_{tag}_{name}_{thr:.2f}.csv")
        with open(path, "w") as fh:
            fh.write("recall,precision\n")
            for r, p in curve.points:
                fh.write(f"{r:.9f},{p:.9f}\n")


# ---------------------------------------------------------------------------
# file inference
# ---------------------------------------------------------------------------

def infer_files(detector: Detector, files, out_dir: str,
                score_threshold: float | None = None):
    """Detect on PPM images, one KITTI result file per input.

    Unreadable inputs are reported and skipped. Returns (written, errors).
    """
    config = detector.config
    os.makedirs(out_dir, exist_ok=True)
    if score_threshold is None:
        score_threshold = config["fusion.demo_score_threshold"]
    select = tuple(config["fusion.select"])
    nms_threshold = config["fusion.nms_threshold"]
    size = config["data.image_size"]
    class_names = config["data.classes"]
    written, errors = [], []
    for path in files:
        try:
            image = read_ppm(path)
        except (OSError, ValueError) as exc:
            errors.append((path, str(exc)))
            continue
        _, orig_h, orig_w = image.shape
        if (orig_h, orig_w) != (size, size):
            image = resize_bilinear(image, size, size)
        outputs = detector.predict(image[None])
        decoded = {t: decode_output(outputs[t - 1], detector.anchors,
                                    score_threshold) for t in select}
        kept = nms([d for t in select for d in decoded[t]], nms_threshold)
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(out_dir, stem + ".txt")
        with open(out_path, "w") as fh:
            for d in kept:
                box = d.box * np.array([orig_w, orig_h, orig_w, orig_h])
                fh.write(format_detection_line(class_names[d.class_id - 1],
                                               box, d.score) + "\n")
        written.append(out_path)
    return written, errors


# ---------------------------------------------------------------------------
# loss-log reports
# ---------------------------------------------------------------------------

def read_log_rows(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [parse_log_row(line) for line in fh if line.strip()]


def per_output_means(rows: list[dict], tail: int = 0) -> list[float]:
    """Mean per-output training loss over the last ``tail`` rows (0 = all)."""
    if tail:
        rows = rows[-tail:]
    outs = sorted(k for k in rows[0] if k.startswith("out"))
    return [float(np.mean([row[k] for row in rows])) for k in outs]


def write_loss_report(log_path: str, out_dir: str, tail: int = 0) -> str:
    rows = read_log_rows(log_path)
    means = per_output_means(rows, tail)
    os.makedirs(out_dir, exist_ok=True)
    window = f"last {tail}" if tail else "all"
    text_lines = [f"mean training loss per output ({window} steps)"]
    text_lines += [f"output {i + 1}: {v:.6f}" for i, v in enumerate(means)]
    text = "\n".join(text_lines)
    with open(os.path.join(out_dir, "loss_table.txt"), "w") as fh:
        fh.write(text + "\n")
    with open(os.path.join(out_dir, "loss_table.csv"), "w") as fh:
        fh.write("output,mean_loss\n")
        for i, v in enumerate(means):
            fh.write(f"{i + 1},{v:.9f}\n")
    return text
