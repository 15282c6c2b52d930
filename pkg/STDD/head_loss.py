# encoding: utf-8
"""
Grid decoding, target assignment, the objectness/classification/localization
losses, and non-maximum suppression.

Raw grid predictions are (N, S_h, S_w, B, 5 + C) tensors holding
(tx, ty, tw, th, obj_logit, class_logits...) per predictor, where N counts
frames. Centres are cell-relative: cx = (col + sigmoid(tx)) * stride, and
sizes are in stride units: w = stride * exp(clamp(tw, -4, 4)).
"""

import json
import math
import logging
from collections import namedtuple, defaultdict
from dataclasses import dataclass

import numpy as np
import torch

from .boxes import Box, Detection, to_center_form
from .shared import check, LAMBDA_NOOBJ, LAMBDA_COORD, NMS_IOU_THRESH, NMS_CONF_THRESH

logger = logging.getLogger(__name__)

SIZE_CLAMP = 4.0


class NegativeSize(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_noobj: float = LAMBDA_NOOBJ
    lambda_coord: float = LAMBDA_COORD

    def __post_init__(self):
        self.validate()

    def validate(self):
        check(self.lambda_noobj >= 0, "loss.lambda_noobj must be non-negative (was {})", self.lambda_noobj)
        check(self.lambda_coord >= 0, "loss.lambda_coord must be non-negative (was {})", self.lambda_coord)


GridPrediction = namedtuple('GridPrediction', ('raw', 'stride'))

# Activated predictions: xy cell offsets in (0, 1), wh in stride units,
# obj and cls probabilities
ActivatedGrid = namedtuple('ActivatedGrid', ('xy', 'wh', 'obj', 'cls'))

# obj: (N, S_h, S_w, B) {0, 1} mask; xy/wh/cls targets in the ActivatedGrid units
TargetMap = namedtuple('TargetMap', ('obj', 'xy', 'wh', 'cls', 'collisions'))


def activate(raw):
    """
    Raw grid -> ActivatedGrid
    """
    return ActivatedGrid(torch.sigmoid(raw[..., 0:2]),
                         torch.exp(torch.clamp(raw[..., 2:4], -SIZE_CLAMP, SIZE_CLAMP)),
                         torch.sigmoid(raw[..., 4]),
                         torch.sigmoid(raw[..., 5:]))


def decode(grid, image_size=None, frame_indices=None, conf_thresh=0.0):
    """
    Decode a grid into pixel-space detections, clamped to the frame.

    @param grid: GridPrediction
    @param image_size: (width, height) to clamp to (default: the grid extent)
    @param frame_indices: frame index of each of the N grid slices (default 0..N-1)
    @param conf_thresh: skip predictions below this confidence
    @return: flat list of Detection
    """
    raw = grid.raw.detach()
    n, sh, sw, nb = raw.shape[:4]
    stride = grid.stride
    if image_size is None:
        image_size = (sw * stride, sh * stride)
    width, height = image_size
    if frame_indices is None:
        frame_indices = range(n)

    act = activate(raw.double())
    cols = torch.arange(sw, dtype=torch.float64).view(1, 1, sw, 1)
    rows = torch.arange(sh, dtype=torch.float64).view(1, sh, 1, 1)
    cx = ((cols + act.xy[..., 0]) * stride).numpy()
    cy = ((rows + act.xy[..., 1]) * stride).numpy()
    w = (act.wh[..., 0] * stride).numpy()
    h = (act.wh[..., 1] * stride).numpy()
    cls_prob, cls_id = act.cls.max(dim=-1)
    conf = (act.obj * cls_prob).numpy()
    cls_id = cls_id.numpy()

    x1 = np.clip(cx - w / 2.0, 0.0, width)
    y1 = np.clip(cy - h / 2.0, 0.0, height)
    x2 = np.clip(cx + w / 2.0, 0.0, width)
    y2 = np.clip(cy + h / 2.0, 0.0, height)
    keep = (conf >= conf_thresh) & (x2 > x1) & (y2 > y1)

    ret = []
    for i, r, c, b in zip(*np.nonzero(keep)):
        ret.append(Detection(Box(x1[i, r, c, b], y1[i, r, c, b], x2[i, r, c, b], y2[i, r, c, b],
                                 frame_indices[i]),
                             min(1.0, max(0.0, float(conf[i, r, c, b]))),
                             int(cls_id[i, r, c, b])))
    return ret


def empty_targets(n, grid_shape, num_boxes, num_classes, dtype=torch.float32):
    sh, sw = grid_shape
    return TargetMap(torch.zeros((n, sh, sw, num_boxes), dtype=dtype),
                     torch.zeros((n, sh, sw, num_boxes, 2), dtype=dtype),
                     torch.zeros((n, sh, sw, num_boxes, 2), dtype=dtype),
                     torch.zeros((n, sh, sw, num_boxes, num_classes), dtype=dtype),
                     0)


def assign_targets(gts, grid_shape, stride, num_boxes=1, num_classes=1, dtype=torch.float32):
    """
    Assign each ground truth of one frame to the cell containing its centre.
    When two objects share a cell the larger one keeps it and the collision
    is counted.

    @param gts: list of GroundTruth
    @param grid_shape: (S_h, S_w)
    @return: TargetMap with N = 1
    """
    sh, sw = grid_shape
    owners = {}
    collisions = 0
    for gt in gts:
        cx, cy, w, h = to_center_form(gt.box)
        if w < 0 or h < 0:
            raise NegativeSize("Ground truth {} has negative size".format(gt))
        if gt.class_id >= num_classes:
            raise ValueError("Class {} outside the {} configured classes".format(gt.class_id, num_classes))
        col = min(max(int(math.floor(cx / stride)), 0), sw - 1)
        row = min(max(int(math.floor(cy / stride)), 0), sh - 1)
        if (row, col) in owners:
            collisions += 1
            if owners[(row, col)].box.area >= gt.box.area:
                continue
        owners[(row, col)] = gt

    t = empty_targets(1, grid_shape, num_boxes, num_classes, dtype)
    for (row, col), gt in owners.items():
        cx, cy, w, h = to_center_form(gt.box)
        # Every predictor of the cell is responsible
        t.obj[0, row, col, :] = 1.0
        t.xy[0, row, col, :, 0] = min(max(cx / stride - col, 0.0), 1.0)
        t.xy[0, row, col, :, 1] = min(max(cy / stride - row, 0.0), 1.0)
        t.wh[0, row, col, :, 0] = w / stride
        t.wh[0, row, col, :, 1] = h / stride
        t.cls[0, row, col, :, gt.class_id] = 1.0
    return t._replace(collisions=collisions)


def build_targets(per_frame_gts, grid_shapes, strides, num_boxes=1, num_classes=1, dtype=torch.float32):
    """
    Batched targets for N frames at every scale.

    @param per_frame_gts: N lists of GroundTruth
    @param grid_shapes: (S_h, S_w) per scale
    @return: one TargetMap per scale
    """
    ret = []
    for shape, stride in zip(grid_shapes, strides):
        maps = [assign_targets(gts, shape, stride, num_boxes, num_classes, dtype) for gts in per_frame_gts]
        collisions = sum(m.collisions for m in maps)
        if collisions:
            logger.warning("%s target collisions at stride %s", collisions, stride)
        ret.append(TargetMap(torch.cat([m.obj for m in maps]),
                             torch.cat([m.xy for m in maps]),
                             torch.cat([m.wh for m in maps]),
                             torch.cat([m.cls for m in maps]),
                             collisions))
    return ret


def objectness_loss(pred, targets, weights):
    """
    Sum over object predictors of (1 - C^)^2, plus lambda_noobj times the sum
    over the rest of C^^2.
    """
    mask = targets.obj.to(pred.obj.dtype)
    pos = (mask * (1.0 - pred.obj) ** 2).sum()
    neg = ((1.0 - mask) * pred.obj ** 2).sum()
    return pos + weights.lambda_noobj * neg


def classification_loss(pred, targets):
    mask = targets.obj.to(pred.cls.dtype).unsqueeze(-1)
    return (mask * (targets.cls.to(pred.cls.dtype) - pred.cls) ** 2).sum()


def localization_loss(pred, targets, weights):
    """
    Centre error plus lambda_coord times the error of the square-rooted sizes,
    over object predictors only.
    """
    if (pred.wh < 0).any() or (targets.wh < 0).any():
        raise NegativeSize("Widths and heights must be non-negative")
    mask = targets.obj.to(pred.xy.dtype).unsqueeze(-1)
    xy = (mask * (targets.xy.to(pred.xy.dtype) - pred.xy) ** 2).sum()
    wh = (mask * (torch.sqrt(targets.wh.to(pred.wh.dtype)) - torch.sqrt(pred.wh)) ** 2).sum()
    return xy + weights.lambda_coord * wh


LossBreakdown = namedtuple('LossBreakdown', ('obj', 'cls', 'loc', 'total'))


def total_loss(preds, targets, weights):
    """
    Mean over scales of the per-frame average of all three losses.

    @param preds: one GridPrediction per scale
    @param targets: one TargetMap per scale
    @return: LossBreakdown of scalar tensors
    """
    assert len(preds) == len(targets), (len(preds), len(targets))
    obj = cls = loc = 0.0
    for grid, t in zip(preds, targets):
        n = grid.raw.shape[0]
        act = activate(grid.raw)
        obj = obj + objectness_loss(act, t, weights) / n
        cls = cls + classification_loss(act, t) / n
        loc = loc + localization_loss(act, t, weights) / n
    k = float(len(preds))
    obj, cls, loc = obj / k, cls / k, loc / k
    return LossBreakdown(obj, cls, loc, obj + cls + loc)


def _nms_group(boxes, scores, iou_thresh):
    """
    Greedy suppression on one (frame, class) group; returns kept indices
    """
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        w = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        h = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = w * h
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_thresh]
    return keep


def nms(detections, iou_thresh=NMS_IOU_THRESH, conf_thresh=NMS_CONF_THRESH):
    """
    Per-frame, per-class greedy non-maximum suppression.

    @return: kept detections, highest confidence first
    """
    groups = defaultdict(list)
    for i, d in enumerate(detections):
        if d.confidence >= conf_thresh:
            groups[(d.frame_index, d.class_id)].append(i)

    kept = []
    for key in sorted(groups):
        idx = groups[key]
        boxes = np.array([detections[i].box[:4] for i in idx], dtype=np.float64)
        scores = np.array([detections[i].confidence for i in idx], dtype=np.float64)
        kept.extend(idx[k] for k in _nms_group(boxes, scores, iou_thresh))

    kept.sort(key=lambda i: (-detections[i].confidence, i))
    return [detections[i] for i in kept]


DetectionRecord = namedtuple('DetectionRecord', ('video_id', 'detection'))


def write_detections(path, records):
    """
    JSON lines, one detection per line
    """
    with open(path, 'w') as f:
        for video_id, d in records:
            f.write(json.dumps({
                'video_id': video_id,
                'frame_index': d.box.frame_index,
                'x1': d.box.x1, 'y1': d.box.y1, 'x2': d.box.x2, 'y2': d.box.y2,
                'confidence': d.confidence,
                'class_id': d.class_id,
            }, sort_keys=True) + '\n')
    logger.debug("Wrote %s detections to %s", len(records), path)


def read_detections(path):
    ret = []
    with open(path) as f:
        for line_number, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                r = json.loads(line)
                box = Box(r['x1'], r['y1'], r['x2'], r['y2'], r['frame_index'])
                ret.append(DetectionRecord(str(r['video_id']), Detection(box, r['confidence'], r['class_id'])))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError("{}:{}: bad detection record: {}".format(path, line_number, e))
    return ret
