# encoding: utf-8
"""
Domain types shared by every module, plus box geometry.

Boxes are always stored corner-form (x1, y1, x2, y2) in pixel units; anything
arriving as (x, y, w, h) is converted at ingestion.
"""

import math
import logging
from collections import namedtuple

logger = logging.getLogger(__name__)


class InvalidBox(ValueError):
    pass


class BoxOutsideFrame(ValueError):
    pass


class Box(namedtuple('Box', ('x1', 'y1', 'x2', 'y2', 'frame_index'))):
    """
    Axis-aligned box in pixel coordinates. Zero-area boxes are invalid.
    """
    __slots__ = ()

    def __new__(cls, x1, y1, x2, y2, frame_index=0):
        x1, y1, x2, y2 = float(x1), float(y1), float(x2), float(y2)
        if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
            raise InvalidBox("Non-finite coordinates: {}".format((x1, y1, x2, y2)))
        if not x2 > x1 or not y2 > y1:
            raise InvalidBox("Box needs positive width and height: {}".format((x1, y1, x2, y2)))
        if int(frame_index) < 0:
            raise InvalidBox("Negative frame index {}".format(frame_index))
        return super().__new__(cls, x1, y1, x2, y2, int(frame_index))

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height


class Detection(namedtuple('Detection', ('box', 'confidence', 'class_id'))):
    __slots__ = ()

    def __new__(cls, box, confidence, class_id=0):
        confidence = float(confidence)
        if not 0.0 <= confidence <= 1.0:
            raise ValueError("Confidence {} is outside [0, 1]".format(confidence))
        if int(class_id) < 0:
            raise ValueError("Negative class id {}".format(class_id))
        return super().__new__(cls, box, confidence, int(class_id))

    @property
    def frame_index(self):
        return self.box.frame_index


class GroundTruth(namedtuple('GroundTruth', ('box', 'class_id'))):
    __slots__ = ()

    def __new__(cls, box, class_id=0):
        if int(class_id) < 0:
            raise ValueError("Negative class id {}".format(class_id))
        return super().__new__(cls, box, int(class_id))

    @property
    def frame_index(self):
        return self.box.frame_index


class VideoMeta(namedtuple('VideoMeta', ('video_id', 'frame_count', 'width', 'height', 'fps'))):
    __slots__ = ()

    def __new__(cls, video_id, frame_count, width, height, fps):
        if not fps > 0:
            raise ValueError("fps must be positive (was {})".format(fps))
        if int(frame_count) < 1:
            raise ValueError("Video {} needs at least one frame".format(video_id))
        if int(width) < 1 or int(height) < 1:
            raise ValueError("Video {} has no pixels ({}x{})".format(video_id, width, height))
        return super().__new__(cls, str(video_id), int(frame_count), int(width), int(height), float(fps))


def iou(a, b):
    """
    Intersection over union of two boxes; 0 when disjoint.
    """
    if a.area <= 0 or b.area <= 0:
        # Degenerate boxes never overlap anything
        return 0.0
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def to_center_form(b):
    """
    (x1, y1, x2, y2) -> (cx, cy, w, h)
    """
    return ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0, b.x2 - b.x1, b.y2 - b.y1)


def from_center_form(cx, cy, w, h, frame_index=0):
    """
    (cx, cy, w, h) -> Box
    """
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, frame_index)


def scale_box(b, sx, sy):
    return Box(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy, b.frame_index)


def clamp_to_frame(b, meta):
    """
    Clip a box to [0, width] x [0, height] of the video.

    @param b: Box
    @param meta: VideoMeta (or anything with width and height)
    """
    x1 = min(max(b.x1, 0.0), float(meta.width))
    y1 = min(max(b.y1, 0.0), float(meta.height))
    x2 = min(max(b.x2, 0.0), float(meta.width))
    y2 = min(max(b.y2, 0.0), float(meta.height))
    if not x2 > x1 or not y2 > y1:
        raise BoxOutsideFrame("Box {} lies outside the {}x{} frame".format(
            tuple(b[:4]), meta.width, meta.height))
    if (x1, y1, x2, y2) == (b.x1, b.y1, b.x2, b.y2):
        return b
    return Box(x1, y1, x2, y2, b.frame_index)
