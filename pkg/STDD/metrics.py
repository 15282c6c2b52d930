# encoding: utf-8
"""
Evaluation: greedy IoU matching, precision/recall curves, 11-point
interpolated AP, best-F1 operating point, false positives per image and the
encounter-detection rate.
"""

import os
import csv
import json
import logging
from collections import namedtuple, defaultdict
from dataclasses import dataclass

import cv2
import numpy as np

from .boxes import iou
from .shared import (check, MATCH_IOU_THRESH, EVAL_STRIDE, ENCOUNTER_SECONDS, FRAME_FORMAT,
                     NMS_IOU_THRESH, NMS_CONF_THRESH, SPLITS, TEST, sort_video_ids)

logger = logging.getLogger(__name__)

GT_COLOUR = (0, 255, 0)
PREDICTION_COLOUR = (0, 0, 255)


@dataclass
class EvalConfig:
    eval_stride: int = EVAL_STRIDE
    iou_thresh: float = MATCH_IOU_THRESH
    nms_iou_thresh: float = NMS_IOU_THRESH
    conf_thresh: float = NMS_CONF_THRESH
    encounter_seconds: float = ENCOUNTER_SECONDS
    split: str = TEST
    overlays: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        check(self.eval_stride >= 1, "eval.eval_stride must be at least 1 (was {})", self.eval_stride)
        check(0.0 < self.iou_thresh <= 1.0, "eval.iou_thresh must be in (0, 1]")
        check(0.0 < self.nms_iou_thresh <= 1.0, "eval.nms_iou_thresh must be in (0, 1]")
        check(0.0 <= self.conf_thresh <= 1.0, "eval.conf_thresh must be in [0, 1]")
        check(self.encounter_seconds > 0, "eval.encounter_seconds must be positive")
        check(self.split in SPLITS, "eval.split must be one of {} (was {})", SPLITS, self.split)


class UnknownReference(ValueError):
    def __init__(self, offenders):
        self.offenders = offenders
        shown = ", ".join("{}:{}".format(v, f) for v, f in offenders[:10])
        more = "" if len(offenders) <= 10 else " (and {} more)".format(len(offenders) - 10)
        super().__init__("Detections reference unknown videos or frames: {}{}".format(shown, more))


class MatchResult(namedtuple('MatchResult', ('detections', 'tp', 'matched_gt', 'gt_matched'))):
    """
    detections: the detections, highest confidence first
    tp: per detection, whether it is a true positive
    matched_gt: per detection, index of the ground truth it matched (or None)
    gt_matched: per ground truth, whether anything matched it
    """
    __slots__ = ()

    @property
    def num_tp(self):
        return sum(self.tp)

    @property
    def num_fp(self):
        return len(self.tp) - sum(self.tp)

    @property
    def total_gt(self):
        return len(self.gt_matched)

    def merged(self, other):
        """
        Concatenate with the result of another video; ground-truth indices of
        other are offset past ours
        """
        offset = len(self.gt_matched)
        return MatchResult(self.detections + other.detections,
                           self.tp + other.tp,
                           self.matched_gt + [None if m is None else m + offset for m in other.matched_gt],
                           self.gt_matched + other.gt_matched)


PRPoint = namedtuple('PRPoint', ('recall', 'precision', 'confidence'))
PRCurve = namedtuple('PRCurve', ('points',))
BestF1 = namedtuple('BestF1', ('precision', 'recall', 'f1', 'confidence'))


def _confidence_order(detections):
    return sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))


def match(detections, gts, iou_thresh=MATCH_IOU_THRESH):
    """
    Greedy matching, highest confidence first: each detection takes the
    unmatched ground truth of the same frame and class with the highest
    IoU >= iou_thresh, otherwise it is a false positive.
    """
    by_key = defaultdict(list)
    for j, gt in enumerate(gts):
        by_key[(gt.box.frame_index, gt.class_id)].append(j)

    gt_matched = [False] * len(gts)
    ordered = [detections[i] for i in _confidence_order(detections)]
    tp = []
    matched_gt = []
    for d in ordered:
        best, best_iou = None, iou_thresh
        for j in by_key.get((d.box.frame_index, d.class_id), ()):
            if gt_matched[j]:
                continue
            o = iou(d.box, gts[j].box)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = j, o
        if best is None:
            tp.append(False)
            matched_gt.append(None)
        else:
            gt_matched[best] = True
            tp.append(True)
            matched_gt.append(best)
    return MatchResult(ordered, tp, matched_gt, gt_matched)


def pr_curve(matches, total_gt=None):
    """
    One point per distinct confidence: precision and recall of every
    detection at or above that confidence.
    """
    if total_gt is None:
        total_gt = matches.total_gt
    order = _confidence_order(matches.detections)
    points = []
    tp = fp = 0
    for k, i in enumerate(order):
        if matches.tp[i]:
            tp += 1
        else:
            fp += 1
        c = matches.detections[i].confidence
        if k + 1 < len(order) and matches.detections[order[k + 1]].confidence == c:
            continue
        recall = tp / total_gt if total_gt else 0.0
        points.append(PRPoint(recall, tp / (tp + fp), c))
    return PRCurve(points)


def interpolated_precision(curve, r):
    return max([p.precision for p in curve.points if p.recall >= r], default=0.0)


def average_precision_11pt(matches, total_gt=None):
    """
    Mean over recall levels 0.0, 0.1, ..., 1.0 of the best precision at that
    recall or above. With no ground truth: 1 if there are no detections either,
    otherwise 0.
    """
    if total_gt is None:
        total_gt = matches.total_gt
    if total_gt == 0:
        return 1.0 if not matches.detections else 0.0
    curve = pr_curve(matches, total_gt)
    return sum(interpolated_precision(curve, i / 10) for i in range(11)) / 11.0


def f1_score(precision, recall):
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def best_f1_point(curve):
    """
    The curve point with the highest F1; ties go to the higher recall.
    """
    if not curve.points:
        raise ValueError("Can't take the best F1 of an empty curve")
    best = max(curve.points, key=lambda p: (f1_score(p.precision, p.recall), p.recall))
    return BestF1(best.precision, best.recall, f1_score(best.precision, best.recall), best.confidence)


def fppi(num_false_positives, num_frames):
    if num_frames < 1:
        raise ValueError("Need at least one frame for FPPI (was {})".format(num_frames))
    return num_false_positives / float(num_frames)


def encounter_detected(hits, fps, window_seconds=ENCOUNTER_SECONDS, eval_stride=EVAL_STRIDE):
    """
    Is there a run of consecutive evaluated frames, every one with a hit,
    spanning at least window_seconds * fps frame indices?

    @param hits: (frame_index, hit) pairs for the evaluated frames of one flight
    """
    if not fps > 0:
        raise ValueError("fps must be positive (was {})".format(fps))
    need = window_seconds * fps
    start = prev = None
    for frame, hit in sorted(hits):
        if not hit:
            start = prev = None
            continue
        if start is None or frame - prev != eval_stride:
            start = frame
        prev = frame
        if prev - start + 1 >= need:
            return True
    return False


def encounter_rate(flights, fps, window_seconds=ENCOUNTER_SECONDS, eval_stride=EVAL_STRIDE):
    """
    Fraction of flights detected continuously for window_seconds.

    @param flights: list of per-flight (frame_index, hit) sequences
    @param fps: frame rate, or a list with one per flight
    """
    if not flights:
        return 0.0
    rates = fps if isinstance(fps, (list, tuple)) else [fps] * len(flights)
    detected = sum(1 for hits, f in zip(flights, rates) if encounter_detected(hits, f, window_seconds, eval_stride))
    return detected / float(len(flights))


MetricsReport = namedtuple('MetricsReport', (
    'ap', 'best_f1', 'precision_at_best_f1', 'recall_at_best_f1', 'confidence_at_best_f1',
    'fppi', 'encounter_rate', 'per_class_ap', 'num_frames', 'num_gt', 'num_detections',
    'true_positives', 'false_positives', 'eval_stride', 'fps'))


def evaluated_frames(frame_count, eval_stride):
    return list(range(0, frame_count, eval_stride))


def _check_references(records, metas):
    offenders = []
    for video_id, d in records:
        meta = metas.get(video_id)
        if meta is None or not 0 <= d.frame_index < meta.frame_count:
            offenders.append((video_id, d.frame_index))
    if offenders:
        raise UnknownReference(sorted(set(offenders)))


def evaluate(records, annotations, metas, eval_stride=EVAL_STRIDE, iou_thresh=MATCH_IOU_THRESH,
             window_seconds=ENCOUNTER_SECONDS, fps=None):
    """
    Score detections over every eval_stride-th frame of each video.

    @param records: DetectionRecords (video_id, Detection)
    @param annotations: video_id -> per-frame GroundTruth lists
    @param metas: video_id -> VideoMeta
    @param fps: optional measured throughput to carry into the report
    @return: (MetricsReport, PRCurve)
    """
    if eval_stride < 1:
        raise ValueError("eval_stride must be at least 1 (was {})".format(eval_stride))
    _check_references(records, metas)
    video_ids = sort_video_ids(metas)

    dets_by_video = defaultdict(list)
    for video_id, d in records:
        if d.frame_index % eval_stride == 0:
            dets_by_video[video_id].append(d)

    per_video = {}
    num_frames = 0
    classes = set()
    for video_id in video_ids:
        meta = metas[video_id]
        frames = evaluated_frames(meta.frame_count, eval_stride)
        num_frames += len(frames)
        per_frame = annotations.get(video_id, [])
        gts = [gt for f in frames if f < len(per_frame) for gt in per_frame[f]]
        per_video[video_id] = match(dets_by_video[video_id], gts, iou_thresh)
        classes.update(gt.class_id for gt in gts)
        classes.update(d.class_id for d in dets_by_video[video_id])

    pooled = MatchResult([], [], [], [])
    for video_id in video_ids:
        pooled = pooled.merged(per_video[video_id])

    gt_classes = []
    for video_id in video_ids:
        per_frame = annotations.get(video_id, [])
        frames = evaluated_frames(metas[video_id].frame_count, eval_stride)
        gt_classes.extend(gt.class_id for f in frames if f < len(per_frame) for gt in per_frame[f])

    per_class_ap = {}
    for c in sorted(classes):
        idx = [i for i, d in enumerate(pooled.detections) if d.class_id == c]
        sub = MatchResult([pooled.detections[i] for i in idx], [pooled.tp[i] for i in idx],
                          [pooled.matched_gt[i] for i in idx], [])
        per_class_ap[c] = average_precision_11pt(sub, gt_classes.count(c))
    ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 1.0

    curve = pr_curve(pooled)
    if curve.points:
        best = best_f1_point(curve)
    else:
        best = BestF1(0.0, 0.0, 0.0, None)

    threshold = best.confidence if best.confidence is not None else float('inf')
    operating = [tp for d, tp in zip(pooled.detections, pooled.tp) if d.confidence >= threshold]
    false_positives = len(operating) - sum(operating)
    true_positives = sum(operating)

    flights = []
    flight_fps = []
    for video_id in video_ids:
        per_frame = annotations.get(video_id, [])
        if not any(per_frame):
            continue
        m = per_video[video_id]
        hit_frames = {d.frame_index for d, tp in zip(m.detections, m.tp) if tp and d.confidence >= threshold}
        frames = evaluated_frames(metas[video_id].frame_count, eval_stride)
        flights.append([(f, f in hit_frames) for f in frames])
        flight_fps.append(metas[video_id].fps)
    encounters = encounter_rate(flights, flight_fps, window_seconds, eval_stride)

    report = MetricsReport(
        ap=ap,
        best_f1=best.f1,
        precision_at_best_f1=best.precision,
        recall_at_best_f1=best.recall,
        confidence_at_best_f1=best.confidence,
        fppi=fppi(false_positives, num_frames) if num_frames else 0.0,
        encounter_rate=encounters,
        per_class_ap={str(k): v for k, v in per_class_ap.items()},
        num_frames=num_frames,
        num_gt=len(gt_classes),
        num_detections=len(pooled.detections),
        true_positives=true_positives,
        false_positives=false_positives,
        eval_stride=eval_stride,
        fps=fps,
    )
    logger.info("AP %.4f, P %.4f, R %.4f over %s frames", report.ap, report.precision_at_best_f1,
                report.recall_at_best_f1, num_frames)
    return report, curve


def write_report(path, report):
    with open(path, 'w') as f:
        json.dump(report._asdict(), f, indent=1, sort_keys=True)
        f.write('\n')


def read_report(path):
    with open(path) as f:
        return MetricsReport(**json.load(f))


def write_pr_curve(path, curve):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['confidence', 'precision', 'recall'])
        for p in curve.points:
            writer.writerow([float(p.confidence), float(p.precision), float(p.recall)])


def draw_overlay(frame, gts, detections, thickness=1):
    """
    Burn boxes into a copy of an RGB float frame: ground truth in green,
    predictions in red.

    @return: uint8 BGR image ready for cv2.imwrite
    """
    img = cv2.cvtColor(np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8), cv2.COLOR_RGB2BGR)
    for gt in gts:
        b = gt.box
        cv2.rectangle(img, (int(round(b.x1)), int(round(b.y1))), (int(round(b.x2)) - 1, int(round(b.y2)) - 1),
                      GT_COLOUR, thickness)
    for d in detections:
        b = d.box
        cv2.rectangle(img, (int(round(b.x1)), int(round(b.y1))), (int(round(b.x2)) - 1, int(round(b.y2)) - 1),
                      PREDICTION_COLOUR, thickness)
    return img


def write_overlays(out_dir, video, annotations, detections, eval_stride=EVAL_STRIDE, min_confidence=0.0):
    """
    One overlay PNG per evaluated frame of a video
    """
    os.makedirs(out_dir, exist_ok=True)
    by_frame = defaultdict(list)
    for d in detections:
        if d.confidence >= min_confidence:
            by_frame[d.frame_index].append(d)
    frames = evaluated_frames(video.frame_count, eval_stride)
    written = []
    for frame_index in frames:
        frame = video.read([frame_index])[0]
        path = os.path.join(out_dir, FRAME_FORMAT.format(frame_index))
        gts = annotations[frame_index] if annotations else []
        cv2.imwrite(path, draw_overlay(frame, gts, by_frame[frame_index]))
        written.append(path)
    return written
