# encoding: utf-8
"""
Temporally-consistent augmentation: one parameter set per clip, applied
identically to every frame and its boxes. The inconsistent mode samples
parameters per frame and exists for comparison only.

Geometry is expressed in frame-normalized coordinates ([0, 1] on both axes)
so the same parameters apply at any resolution.
"""

import logging
from collections import namedtuple
from dataclasses import dataclass

import cv2
import numpy as np

from .boxes import Box, GroundTruth, BoxOutsideFrame, clamp_to_frame
from .shared import check

logger = logging.getLogger(__name__)

FILL_VALUE = 0.5
IDENTITY_HOMOGRAPHY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

_Size = namedtuple('_Size', ('width', 'height'))


@dataclass
class AugmentConfig:
    enabled: bool = True
    consistent: bool = True
    perspective: bool = True
    perspective_strength: float = 0.001
    translate: float = 0.1
    scale: float = 0.1
    cutout: bool = True
    cutout_max_count: int = 2
    cutout_max_area: float = 0.05
    color: bool = True
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    flip: bool = True
    flip_probability: float = 0.5
    min_box_area: float = 4.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ('perspective_strength', 'translate', 'scale', 'cutout_max_area',
                     'brightness', 'contrast', 'saturation', 'min_box_area'):
            check(getattr(self, name) >= 0, "augment.{} must be non-negative (was {})", name, getattr(self, name))
        check(self.scale < 1, "augment.scale must be below 1 (was {})", self.scale)
        check(self.brightness < 1 and self.contrast < 1 and self.saturation < 1,
              "colour jitter strengths must be below 1")
        check(self.cutout_max_area <= 1, "augment.cutout_max_area must be at most 1")
        check(self.cutout_max_count >= 0, "augment.cutout_max_count must be non-negative")
        check(0.0 <= self.flip_probability <= 1.0, "augment.flip_probability must be in [0, 1]")

    @classmethod
    def disabled(cls):
        return cls(enabled=False)


class AugmentParams(namedtuple('AugmentParams', ('perspective', 'cutout_rects', 'color_jitter', 'flip_horizontal'))):
    """
    perspective: normalized 3x3 homography (tuple of row tuples)
    cutout_rects: tuple of (x1, y1, x2, y2) in frame-relative units
    color_jitter: (brightness_scale, contrast_scale, saturation_scale)
    flip_horizontal: mirror after warping
    """
    __slots__ = ()

    def __new__(cls, perspective, cutout_rects, color_jitter, flip_horizontal):
        perspective = tuple(tuple(float(v) for v in row) for row in perspective)
        m = np.array(perspective, dtype=np.float64)
        if m.shape != (3, 3) or abs(np.linalg.det(m)) < 1e-12:
            raise ValueError("Perspective must be an invertible 3x3 matrix: {}".format(perspective))
        cutout_rects = tuple(tuple(float(v) for v in r) for r in cutout_rects)
        for r in cutout_rects:
            if not (0.0 <= r[0] < r[2] <= 1.0 and 0.0 <= r[1] < r[3] <= 1.0):
                raise ValueError("Cutout {} isn't inside the frame".format(r))
        color_jitter = tuple(float(v) for v in color_jitter)
        if len(color_jitter) != 3 or min(color_jitter) <= 0:
            raise ValueError("Colour jitter scales must be three positive numbers: {}".format(color_jitter))
        return super().__new__(cls, perspective, cutout_rects, color_jitter, bool(flip_horizontal))

    @classmethod
    def identity(cls):
        return cls(IDENTITY_HOMOGRAPHY, (), (1.0, 1.0, 1.0), False)

    @property
    def is_identity(self):
        return self == AugmentParams.identity()

    def pixel_homography(self, width, height):
        """
        The homography in pixel units for a width x height frame
        """
        s = np.diag([float(width), float(height), 1.0])
        return s @ np.array(self.perspective, dtype=np.float64) @ np.linalg.inv(s)


def translation_params(dx, dy, size):
    """
    Params translating a frame of size (width, height) by (dx, dy) pixels.
    """
    width, height = size
    return AugmentParams(((1.0, 0.0, dx / float(width)), (0.0, 1.0, dy / float(height)), (0.0, 0.0, 1.0)),
                         (), (1.0, 1.0, 1.0), False)


def _uniform_scale(rng, strength):
    if strength <= 0:
        return 1.0
    return float(rng.uniform(1.0 - strength, 1.0 + strength))


def _sample_homography(config, rng):
    jitter = np.eye(3)
    if config.perspective_strength > 0:
        e = rng.uniform(-config.perspective_strength, config.perspective_strength, size=8)
        jitter = jitter + np.append(e, 0.0).reshape(3, 3)

    tx = ty = 0.0
    if config.translate > 0:
        tx, ty = rng.uniform(-config.translate, config.translate, size=2)
    s = _uniform_scale(rng, config.scale)

    # Scale and jitter about the frame centre, then translate
    centre = np.array([[1, 0, -0.5], [0, 1, -0.5], [0, 0, 1]], dtype=np.float64)
    uncentre = np.array([[1, 0, 0.5 + tx], [0, 1, 0.5 + ty], [0, 0, 1]], dtype=np.float64)
    m = uncentre @ jitter @ np.diag([s, s, 1.0]) @ centre
    m = m / m[2, 2]
    return tuple(tuple(float(v) for v in row) for row in m)


def _sample_cutouts(config, rng):
    count = int(rng.integers(0, config.cutout_max_count + 1))
    rects = []
    for _ in range(count):
        area = rng.uniform(0.0, config.cutout_max_area)
        aspect = rng.uniform(0.5, 2.0)
        w = min(float(np.sqrt(area * aspect)), 1.0)
        h = min(float(np.sqrt(area / aspect)), 1.0)
        if w <= 0 or h <= 0:
            continue
        x1 = float(rng.uniform(0.0, 1.0 - w))
        y1 = float(rng.uniform(0.0, 1.0 - h))
        rects.append((x1, y1, min(x1 + w, 1.0), min(y1 + h, 1.0)))
    return tuple(rects)


def sample_params(config, rng):
    """
    Draw one parameter set from the configured ranges. With every strength at
    zero this returns the identity.
    """
    if not config.enabled:
        return AugmentParams.identity()

    perspective = IDENTITY_HOMOGRAPHY
    if config.perspective and (config.perspective_strength > 0 or config.translate > 0 or config.scale > 0):
        perspective = _sample_homography(config, rng)

    cutouts = ()
    if config.cutout and config.cutout_max_count > 0 and config.cutout_max_area > 0:
        cutouts = _sample_cutouts(config, rng)

    jitter = (1.0, 1.0, 1.0)
    if config.color:
        jitter = (_uniform_scale(rng, config.brightness),
                  _uniform_scale(rng, config.contrast),
                  _uniform_scale(rng, config.saturation))

    flip = False
    if config.flip and config.flip_probability > 0:
        flip = bool(rng.random() < config.flip_probability)

    return AugmentParams(perspective, cutouts, jitter, flip)


def _color(frame, jitter):
    brightness, contrast, saturation = jitter
    out = frame * brightness
    if contrast != 1.0:
        out = (out - FILL_VALUE) * contrast + FILL_VALUE
    if saturation != 1.0:
        grey = cv2.cvtColor(np.clip(out, 0.0, 1.0).astype(np.float32), cv2.COLOR_RGB2GRAY)[:, :, None]
        out = grey + (out - grey) * saturation
    return np.clip(out, 0.0, 1.0)


def transform_box(box, hp, flip, width, height):
    """
    Axis-aligned hull of the four warped corners, mirrored if flip, clamped.
    Raises BoxOutsideFrame if nothing is left.
    """
    corners = np.array([[box.x1, box.y1, 1.0], [box.x2, box.y1, 1.0],
                        [box.x1, box.y2, 1.0], [box.x2, box.y2, 1.0]]).T
    warped = hp @ corners
    xs = warped[0] / warped[2]
    ys = warped[1] / warped[2]
    x1, x2 = float(xs.min()), float(xs.max())
    y1, y2 = float(ys.min()), float(ys.max())
    if flip:
        x1, x2 = width - x2, width - x1
    if not x2 > x1 or not y2 > y1:
        raise BoxOutsideFrame("Box {} collapsed under the warp".format(tuple(box[:4])))
    return clamp_to_frame(Box(x1, y1, x2, y2, box.frame_index), _Size(width, height))


def _apply_frame(frame, gts, params, min_box_area):
    """
    Returns (frame, gts, dropped)
    """
    if params.is_identity:
        return frame, list(gts), 0

    height, width = frame.shape[:2]
    warp = params.perspective != IDENTITY_HOMOGRAPHY
    hp = params.pixel_homography(width, height)

    out = frame
    if warp:
        out = cv2.warpPerspective(frame, hp, (width, height), flags=cv2.INTER_LINEAR,
                                  borderMode=cv2.BORDER_CONSTANT,
                                  borderValue=(FILL_VALUE, FILL_VALUE, FILL_VALUE))
    if params.flip_horizontal:
        out = out[:, ::-1]
    if params.color_jitter != (1.0, 1.0, 1.0):
        out = _color(out, params.color_jitter)
    out = np.array(out, dtype=np.float32)
    for x1, y1, x2, y2 in params.cutout_rects:
        # Cutouts hide pixels, never boxes
        out[int(round(y1 * height)):int(round(y2 * height)), int(round(x1 * width)):int(round(x2 * width))] = FILL_VALUE

    if not warp and not params.flip_horizontal:
        return out, list(gts), 0

    ret = []
    dropped = 0
    for gt in gts:
        try:
            box = transform_box(gt.box, hp, params.flip_horizontal, width, height)
        except BoxOutsideFrame:
            dropped += 1
            continue
        if box.area < min_box_area:
            dropped += 1
            continue
        ret.append(GroundTruth(box, gt.class_id))
    return out, ret, dropped


def _apply_per_frame(clip, per_frame, min_box_area):
    frames = []
    annotations = []
    dropped = 0
    for frame, gts, params in zip(clip.frames, clip.annotations, per_frame):
        f, g, d = _apply_frame(frame, gts, params, min_box_area)
        frames.append(f)
        annotations.append(g)
        dropped += d
    if dropped:
        logger.warning("Augmentation dropped %s boxes from %s", dropped, clip)
    ret = clip.replace(frames=np.stack(frames), annotations=annotations)
    ret.dropped_boxes = dropped
    ret.augment_params = list(per_frame)
    return ret


def apply(clip, params, min_box_area=4.0):
    """
    Apply one parameter set to every frame of the clip and to its boxes.
    Boxes are dropped when the warp takes them out of the frame or shrinks
    them below min_box_area square pixels; cutout never removes boxes.
    """
    return _apply_per_frame(clip, [params] * clip.tau, min_box_area)


def augment_clip(clip, config, rng):
    """
    Augment a clip: one parameter draw for the whole clip when
    config.consistent, otherwise one draw per frame.
    """
    if not config.enabled:
        return _apply_per_frame(clip, [AugmentParams.identity()] * clip.tau, config.min_box_area)
    if config.consistent:
        per_frame = [sample_params(config, rng)] * clip.tau
    else:
        per_frame = [sample_params(config, rng) for _ in range(clip.tau)]
    logger.debug("Augmenting %s (consistent=%s)", clip, config.consistent)
    return _apply_per_frame(clip, per_frame, config.min_box_area)
