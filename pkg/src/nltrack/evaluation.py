"""One-pass evaluation: success / precision / normalized precision curves and
recovery statistics around full occlusions and target loss.

Sequence directories follow the OTB layout: ``img/`` frames,
``groundtruth_rect.txt`` with one ``x,y,w,h`` per line, optional
``full_occlusion.txt`` (0/1 per line) and ``nlp.txt`` (one line).
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from nltrack.geometry import BBox, iou

SUCCESS_THRESHOLDS = np.round(np.arange(101) * 0.01, 10)
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
NORM_PRECISION_THRESHOLDS = np.round(np.arange(51) * 0.01, 10)
RECOVERY_WINDOW = 100
PRED_HEADER = ["frame_idx", "x", "y", "w", "h", "score", "state", "branch"]
_SPLIT = re.compile(r"[,\t ]+")


class FormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass
class SequenceAnnotation:
    name: str
    boxes: list[Optional[BBox]]
    occluded: list[bool]
    description: str | None = None

    def __post_init__(self):
        if len(self.occluded) != len(self.boxes):
            raise ValueError(f"{self.name}: {len(self.boxes)} boxes but {len(self.occluded)} occlusion flags")

    def __len__(self) -> int:
        return len(self.boxes)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(float(v))


def parse_groundtruth(path) -> list[Optional[BBox]]:
    """Boxes per line; zero/negative extents (LaSOT absent-target rows) become ``None``."""
    boxes = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = _SPLIT.split(line)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise FormatError(path, n, f"non-numeric box {line!r}") from None
        if len(vals) != 4:
            raise FormatError(path, n, f"expected 4 values, got {len(vals)}")
        x, y, w, h = vals
        if not all(math.isfinite(v) for v in vals) or w <= 0 or h <= 0:
            boxes.append(None)
        else:
            boxes.append(BBox.from_xywh(x, y, w, h))
    return boxes


def write_groundtruth(path, boxes: Sequence[Optional[BBox]]) -> None:
    lines = []
    for b in boxes:
        vals = (0, 0, 0, 0) if b is None else b.xywh()
        lines.append(",".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_flags(path, n_expected: int | None = None) -> list[bool]:
    flags = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line not in ("0", "1"):
            raise FormatError(path, n, f"expected 0 or 1, got {line!r}")
        flags.append(line == "1")
    if n_expected is not None and len(flags) != n_expected:
        raise ValueError(f"{path}: {len(flags)} flags for {n_expected} frames")
    return flags


def ingest_sequence(directory):
    """Frame paths and annotation of one sequence directory."""
    from nltrack.imaging import list_frames

    root = Path(directory)
    gt_path = root / "groundtruth_rect.txt"
    if not gt_path.is_file():
        raise FileNotFoundError(f"{root}: missing groundtruth_rect.txt")
    boxes = parse_groundtruth(gt_path)
    frames = list_frames(root)
    if len(frames) != len(boxes):
        raise ValueError(f"{root}: {len(frames)} frames but {len(boxes)} ground-truth boxes")
    occ_path = root / "full_occlusion.txt"
    occluded = parse_flags(occ_path, len(boxes)) if occ_path.is_file() else [False] * len(boxes)
    nlp = root / "nlp.txt"
    desc = nlp.read_text().strip() or None if nlp.is_file() else None
    return frames, SequenceAnnotation(root.name, boxes, occluded, desc)


@dataclass
class PredictionRecord:
    frame_idx: int
    box: BBox
    score: float
    state: str
    branch: str

    def row(self) -> list[str]:
        x, y, w, h = self.box.xywh()
        return [str(self.frame_idx), repr(x), repr(y), repr(w), repr(h), repr(self.score), self.state, self.branch]


def write_predictions(path, records: Sequence[PredictionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for r in records:
            w.writerow(r.row())


def read_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), start=1):
            if not row or (n == 1 and row[0] == PRED_HEADER[0]):
                continue
            if len(row) != len(PRED_HEADER):
                raise FormatError(path, n, f"expected {len(PRED_HEADER)} fields, got {len(row)}")
            try:
                x, y, w, h = (float(v) for v in row[1:5])
                out.append(PredictionRecord(int(row[0]), BBox.from_xywh(x, y, w, h), float(row[5]), row[6], row[7]))
            except ValueError as exc:
                raise FormatError(path, n, str(exc)) from None
    return out


def _valid_pairs(preds, gts):
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    return [(p, g) for p, g in zip(preds, gts) if g is not None]


def frame_ious(preds: Sequence[Optional[BBox]], gts: Sequence[Optional[BBox]]) -> np.ndarray:
    """Per-frame IoU; NaN where the target is absent, 0 where no prediction exists."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    return np.array([np.nan if g is None else (0.0 if p is None else iou(p, g)) for p, g in zip(preds, gts)])


def success_curve(preds, gts):
    """Fraction of (present-target) frames whose IoU exceeds each threshold, and its mean."""
    ious = frame_ious(preds, gts)
    ious = ious[~np.isnan(ious)]
    if ious.size == 0:
        curve = np.zeros_like(SUCCESS_THRESHOLDS)
    else:
        curve = (ious[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return SUCCESS_THRESHOLDS, curve, float(curve.mean())


def center_errors(preds, gts):
    pairs = _valid_pairs(preds, gts)
    plain, norm = [], []
    for p, g in pairs:
        if p is None:
            plain.append(np.inf)
            norm.append(np.inf)
            continue
        dx, dy = p.cx - g.cx, p.cy - g.cy
        plain.append(math.hypot(dx, dy))
        norm.append(math.hypot(dx / g.w, dy / g.h))
    return np.asarray(plain), np.asarray(norm)


def precision_curves(preds, gts):
    """Plain (pixel) and normalized (per-axis by GT size) center-error precision curves."""
    plain, norm = center_errors(preds, gts)

    def curve(err, thr):
        if err.size == 0:
            return np.zeros_like(thr)
        return (err[None, :] <= thr[:, None] + 1e-12).mean(axis=1)

    p = curve(plain, PRECISION_THRESHOLDS)
    n = curve(norm, NORM_PRECISION_THRESHOLDS)
    return {
        "precision": (PRECISION_THRESHOLDS, p, float(p.mean())),
        "norm_precision": (NORM_PRECISION_THRESHOLDS, n, float(n.mean())),
    }


@dataclass
class RecoveryStats:
    iou_after_occlusion: Optional[float]
    frames_to_recover_after_occlusion: Optional[float]
    frames_to_recover_after_loss: Optional[float]
    occlusion_events: int = 0
    loss_events: int = 0
    positive_frames_after_occlusion: int = 0


def occlusion_ends(occluded: Sequence[bool]) -> list[int]:
    return [t for t in range(1, len(occluded)) if occluded[t - 1] and not occluded[t]]


def recovery_stats(preds, gts, occluded: Sequence[bool], window: int = RECOVERY_WINDOW) -> RecoveryStats:
    """Recovery around occlusions and losses.

    * mean IoU over the ``window`` frames starting at each occlusion end
      (re-occluded frames included, truncated at the sequence end);
    * frames from each occlusion end up to and including the first frame with
      IoU > 0 (never recovering counts the remaining frames);
    * frames from each loss onset (IoU = 0 with the target visible) up to and
      including the first frame with IoU > 0, censored the same way.
    """
    ious = frame_ious(preds, gts)
    n = len(ious)
    if len(occluded) != n:
        raise ValueError(f"{len(occluded)} occlusion flags for {n} frames")
    hit = np.nan_to_num(ious, nan=0.0) > 0
    ends = occlusion_ends(occluded)
    avg_iou, recover, positives = [], [], 0
    for e in ends:
        seg = ious[e:e + window]
        seg = seg[~np.isnan(seg)]
        avg_iou.append(float(seg.mean()) if seg.size else 0.0)
        positives += int((seg > 0).sum())
        later = np.flatnonzero(hit[e:])
        recover.append(float(later[0] + 1) if later.size else float(n - e))
    losses = []
    in_loss = False
    for t in range(n):
        visible = gts[t] is not None and not occluded[t]
        if hit[t]:
            in_loss = False
        elif visible and not in_loss:
            in_loss = True
            later = np.flatnonzero(hit[t:])
            losses.append(float(later[0] + 1) if later.size else float(n - t))
    return RecoveryStats(
        float(np.mean(avg_iou)) if ends else None,
        float(np.mean(recover)) if ends else None,
        float(np.mean(losses)) if losses else None,
        len(ends), len(losses), positives,
    )


@dataclass
class MetricReport:
    name: str
    frames: int
    success_auc: float
    precision_auc: float
    norm_precision_auc: float
    precision_at_20: float
    success: list[float]
    precision: list[float]
    norm_precision: list[float]
    recovery: RecoveryStats
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = {"success": SUCCESS_THRESHOLDS.tolist(), "precision": PRECISION_THRESHOLDS.tolist(),
                           "norm_precision": NORM_PRECISION_THRESHOLDS.tolist()}
        return d

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{self.name}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        for key, thr in (("success", SUCCESS_THRESHOLDS), ("precision", PRECISION_THRESHOLDS),
                         ("norm_precision", NORM_PRECISION_THRESHOLDS)):
            with open(out / f"{self.name}_{key}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["threshold", key])
                w.writerows(zip(thr.tolist(), getattr(self, key)))
        return out


def evaluate(name: str, preds, annotation: SequenceAnnotation, meta: dict | None = None) -> MetricReport:
    _, s, s_auc = success_curve(preds, annotation.boxes)
    pc = precision_curves(preds, annotation.boxes)
    p = pc["precision"][1]
    meta = dict(meta or {})
    meta.setdefault("reoccluded_frames_in_recovery_window", "included")
    return MetricReport(name, len(preds), s_auc, pc["precision"][2], pc["norm_precision"][2], float(p[20]),
                        s.tolist(), p.tolist(), pc["norm_precision"][1].tolist(),
                        recovery_stats(preds, annotation.boxes, annotation.occluded), meta)


def evaluate_many(results: dict[str, tuple[list, SequenceAnnotation]], name: str = "overall",
                  meta: dict | None = None) -> MetricReport:
    """Pool frames of several sequences (processed in sorted-name order)."""
    preds, boxes, occ = [], [], []
    per_seq = []
    for seq in sorted(results):
        p, ann = results[seq]
        per_seq.append(recovery_stats(p, ann.boxes, ann.occluded))
        preds.extend(p)
        boxes.extend(ann.boxes)
        occ.extend(ann.occluded)
    report = evaluate(name, preds, SequenceAnnotation(name, boxes, occ), meta)
    report.recovery = _merge_recovery(per_seq)
    return report


def _merge_recovery(stats: list[RecoveryStats]) -> RecoveryStats:
    def wmean(attr, count):
        pairs = [(getattr(s, attr), getattr(s, count)) for s in stats if getattr(s, attr) is not None]
        total = sum(c for _, c in pairs)
        return sum(v * c for v, c in pairs) / total if total else None

    return RecoveryStats(wmean("iou_after_occlusion", "occlusion_events"),
                         wmean("frames_to_recover_after_occlusion", "occlusion_events"),
                         wmean("frames_to_recover_after_loss", "loss_events"),
                         sum(s.occlusion_events for s in stats), sum(s.loss_events for s in stats),
                         sum(s.positive_frames_after_occlusion for s in stats))
