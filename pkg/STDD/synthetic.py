# encoding: utf-8
"""
Deterministic synthetic drone-video generator.

Each video is a textured background drifting under global ego-motion with one
or more small dark blob targets flying smooth trajectories. Everything about a
video is drawn from numpy.random.default_rng([seed, video_index]), so the same
config always produces byte-identical frames and annotations.
"""

import os
import json
import math
import shutil
import logging
from dataclasses import dataclass, asdict

import cv2
import numpy as np

from .boxes import Box, GroundTruth, VideoMeta
from .dataio import IndexEntry, write_annotations, write_index, load_index
from .shared import ConfigError, check, SPLITS, FRAME_FORMAT

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"
CONFIG_FILE = "synthetic_config.json"

# Intensity ranges; targets are always darker than the background
BACKGROUND_RANGE = (0.3, 0.85)
SKY_RANGE = (0.7, 0.95)
TARGET_RANGE = (0.0, 0.15)
BLINK_ALPHA = 0.3
NOISE_SIGMA = 0.01


class SyntheticConfigError(ConfigError):
    pass


@dataclass
class SyntheticConfig:
    num_videos: int = 10
    frames_per_video: int = 60
    resolution: tuple = (64, 64)
    target_size_range: tuple = ((2, 2), (5, 4))
    ego_motion_amplitude: float = 0.5
    blur_probability: float = 0.1
    occlusion_probability: float = 0.02
    seed: int = 0
    fps: float = 30.0
    split_fractions: tuple = (0.6, 0.2, 0.2)
    grayscale: bool = False
    illumination_change_probability: float = 0.0
    horizon: bool = False
    blink_probability: float = 0.0
    max_targets: int = 1

    def __post_init__(self):
        self.resolution = tuple(int(x) for x in self.resolution)
        self.target_size_range = tuple(tuple(int(v) for v in x) for x in self.target_size_range)
        self.split_fractions = tuple(float(x) for x in self.split_fractions)
        self.validate()

    @property
    def height(self):
        return self.resolution[0]

    @property
    def width(self):
        return self.resolution[1]

    def validate(self):
        err = SyntheticConfigError
        check(self.num_videos >= 1, "num_videos must be at least 1 (was {})", self.num_videos, error=err)
        check(self.frames_per_video >= 1, "frames_per_video must be at least 1 (was {})",
              self.frames_per_video, error=err)
        check(len(self.resolution) == 2 and min(self.resolution) >= 1,
              "resolution must be (H, W) (was {})", self.resolution, error=err)
        check(len(self.target_size_range) == 2 and all(len(x) == 2 for x in self.target_size_range),
              "target_size_range must be ((min_w, min_h), (max_w, max_h)) (was {})",
              self.target_size_range, error=err)
        (min_w, min_h), (max_w, max_h) = self.target_size_range
        check(min_w >= 1 and min_h >= 1, "target sizes must be positive (was {})",
              self.target_size_range, error=err)
        check(min_w <= max_w and min_h <= max_h, "target size range is empty: {}",
              self.target_size_range, error=err)
        check(max_w <= self.width and max_h <= self.height,
              "target size {}x{} exceeds the {}x{} resolution", max_w, max_h, self.width, self.height, error=err)
        check(self.ego_motion_amplitude >= 0, "ego_motion_amplitude must be non-negative", error=err)
        for name in ('blur_probability', 'occlusion_probability',
                     'illumination_change_probability', 'blink_probability'):
            p = getattr(self, name)
            check(0.0 <= p <= 1.0, "{} must be in [0, 1] (was {})", name, p, error=err)
        check(self.fps > 0, "fps must be positive (was {})", self.fps, error=err)
        check(len(self.split_fractions) == 3 and all(x >= 0 for x in self.split_fractions)
              and sum(self.split_fractions) <= 1.0 + 1e-9,
              "split_fractions must be three non-negative fractions summing to at most 1 (was {})",
              self.split_fractions, error=err)
        check(self.max_targets >= 1, "max_targets must be at least 1 (was {})", self.max_targets, error=err)


def assign_splits(num_videos, fractions):
    """
    Contiguous video-id ranges: the first videos train, then validation, then test.
    """
    n_train = int(round(fractions[0] * num_videos))
    n_val = min(num_videos - n_train, int(round(fractions[1] * num_videos)))
    ret = []
    for i in range(num_videos):
        if i < n_train:
            ret.append(SPLITS[0])
        elif i < n_train + n_val:
            ret.append(SPLITS[1])
        else:
            ret.append(SPLITS[2])
    return ret


def video_id(i):
    return "video_{:03d}".format(i)


def _fold(x, lo, hi):
    """
    Reflect x back into [lo, hi] (triangle wave)
    """
    span = hi - lo
    if span <= 0:
        return lo
    y = (x - lo) % (2 * span)
    return lo + (y if y <= span else 2 * span - y)


def _events(rng, n, probability, min_len, max_len):
    """
    Start an event of random length with the given per-frame probability.
    Returns a list of (start, length).
    """
    ret = []
    t = 0
    while t < n:
        if probability > 0 and rng.random() < probability:
            length = int(rng.integers(min_len, max_len + 1))
            ret.append((t, length))
            t += length
        else:
            t += 1
    return ret


def line_kernel(length, angle):
    """
    Normalised motion-blur kernel: a line through the centre, symmetric so
    it doesn't move the centroid of what it blurs.
    """
    k = np.zeros((length, length), dtype=np.float32)
    c = length // 2
    dx = int(round(c * math.cos(angle)))
    dy = int(round(c * math.sin(angle)))
    cv2.line(k, (c - dx, c - dy), (c + dx, c + dy), 1.0, 1)
    return k / k.sum()


class Target(object):
    def __init__(self, boxes, visible, blink, intensity):
        """
        @param boxes: per-frame integer (x1, y1, x2, y2)
        @param visible: per-frame bool (False inside occlusion gaps)
        @param blink: per-frame bool (rendered at low contrast, still annotated)
        @param intensity: grey level of the blob
        """
        self.boxes = boxes
        self.visible = visible
        self.blink = blink
        self.intensity = intensity

    def __repr__(self):
        return "<Target: {} frames, {} visible>".format(len(self.boxes), int(np.sum(self.visible)))


class SyntheticScene(object):
    """
    All random choices for one video, drawn up front.
    """
    def __init__(self, config, video_index):
        self.config = config
        self.video_index = video_index
        self.video_id = video_id(video_index)
        rng = np.random.default_rng([config.seed, video_index])
        H, W = config.resolution
        n = config.frames_per_video

        coarse = rng.uniform(BACKGROUND_RANGE[0], BACKGROUND_RANGE[1],
                             size=(max(2, H // 8), max(2, W // 8), 3)).astype(np.float32)
        texture = cv2.resize(coarse, (W, H), interpolation=cv2.INTER_CUBIC)
        texture += rng.normal(0.0, 0.03, size=(H, W, 3)).astype(np.float32)
        self.texture = np.clip(texture, *BACKGROUND_RANGE).astype(np.float32)

        a = config.ego_motion_amplitude
        velocity = rng.uniform(-a, a, size=2)
        steps = velocity + rng.normal(0.0, 0.25 * a, size=(n, 2)) if a > 0 else np.zeros((n, 2))
        steps[0] = 0.0
        self.ego_offsets = np.cumsum(steps, axis=0)

        self.sky = rng.uniform(*SKY_RANGE, size=3).astype(np.float32)
        self.horizon_row = rng.uniform(0.3, 0.7) * H
        self.horizon_drift = rng.uniform(-0.05, 0.05)

        self.targets = [self._make_target(rng) for _ in range(int(rng.integers(1, config.max_targets + 1)))]

        self.blur = {}
        for t in range(n):
            if config.blur_probability > 0 and rng.random() < config.blur_probability:
                self.blur[t] = line_kernel(int(rng.choice([3, 5, 7])), rng.uniform(0, math.pi))

        self.illumination = np.ones(n, dtype=np.float32)
        for start, length in _events(rng, n, config.illumination_change_probability, 2, 5):
            self.illumination[start:start + length] = rng.uniform(0.6, 1.4)

        logger.debug("Scene %s: %s targets, %s blurred frames", self.video_id, len(self.targets), len(self.blur))

    def _make_target(self, rng):
        config = self.config
        H, W = config.resolution
        n = config.frames_per_video
        (min_w, min_h), (max_w, max_h) = config.target_size_range
        w = int(rng.integers(min_w, max_w + 1))
        h = int(rng.integers(min_h, max_h + 1))

        x0 = rng.uniform(w / 2.0, W - w / 2.0)
        y0 = rng.uniform(h / 2.0, H - h / 2.0)
        vx, vy = rng.uniform(-1.5, 1.5, size=2)
        ax, ay = rng.uniform(0.0, 3.0, size=2)
        period = rng.uniform(15.0, 60.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        intensity = float(rng.uniform(*TARGET_RANGE))

        boxes = []
        for t in range(n):
            s = math.sin(2 * math.pi * t / period + phase)
            cx = _fold(x0 + vx * t + ax * s, w / 2.0, W - w / 2.0)
            cy = _fold(y0 + vy * t + ay * s, h / 2.0, H - h / 2.0)
            x1 = min(max(int(math.floor(cx - w / 2.0 + 0.5)), 0), W - w)
            y1 = min(max(int(math.floor(cy - h / 2.0 + 0.5)), 0), H - h)
            boxes.append((x1, y1, x1 + w, y1 + h))

        visible = np.ones(n, dtype=bool)
        for start, length in _events(rng, n, config.occlusion_probability, 1, 3):
            visible[start:start + length] = False
        blink = rng.random(n) < config.blink_probability

        return Target(boxes, visible, blink, intensity)

    def background(self, t):
        H, W = self.config.resolution
        ox, oy = self.ego_offsets[t]
        if ox or oy:
            M = np.float32([[1, 0, ox], [0, 1, oy]])
            frame = cv2.warpAffine(self.texture, M, (W, H), flags=cv2.INTER_LINEAR,
                                   borderMode=cv2.BORDER_REFLECT)
        else:
            frame = self.texture.copy()
        if self.config.horizon:
            row = int(round(self.horizon_row + self.horizon_drift * t))
            row = min(max(row, 0), H)
            gradient = np.linspace(1.0, 0.9, max(row, 1), dtype=np.float32)[:row, None, None]
            frame[:row] = self.sky[None, None, :] * gradient
        return frame

    def _paint(self, frame, target, t):
        x1, y1, x2, y2 = target.boxes[t]
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
        ys = np.arange(y1, y2) + 0.5
        xs = np.arange(x1, x2) + 0.5
        inside = ((xs[None, :] - cx) / rx) ** 2 + ((ys[:, None] - cy) / ry) ** 2 <= 1.0
        alpha = BLINK_ALPHA if target.blink[t] else 1.0
        region = frame[y1:y2, x1:x2]
        region[inside] = (1.0 - alpha) * region[inside] + alpha * target.intensity

    def render(self, t, with_targets=True):
        """
        Render frame t as float32 RGB in [0, 1].
        """
        frame = self.background(t)
        if with_targets:
            for target in self.targets:
                if target.visible[t]:
                    self._paint(frame, target, t)
        frame *= self.illumination[t]
        if t in self.blur:
            frame = cv2.filter2D(frame, -1, self.blur[t], borderType=cv2.BORDER_REFLECT)
        noise_rng = np.random.default_rng([self.config.seed, self.video_index, t])
        frame = frame + noise_rng.normal(0.0, NOISE_SIGMA, size=frame.shape).astype(np.float32)
        frame = np.clip(frame, 0.0, 1.0)
        if self.config.grayscale:
            grey = cv2.cvtColor(frame, cv2.COLOR_RGB2GRAY)
            frame = np.repeat(grey[:, :, None], 3, axis=2)
        return frame.astype(np.float32)

    def annotations(self):
        """
        Per-frame GroundTruth for every visible target
        """
        ret = []
        for t in range(self.config.frames_per_video):
            frame_gts = []
            for target in self.targets:
                if target.visible[t]:
                    x1, y1, x2, y2 = target.boxes[t]
                    frame_gts.append(GroundTruth(Box(x1, y1, x2, y2, t), 0))
            ret.append(frame_gts)
        return ret

    def meta(self):
        H, W = self.config.resolution
        return VideoMeta(self.video_id, self.config.frames_per_video, W, H, self.config.fps)

    def write_frames(self, path):
        os.makedirs(path, exist_ok=True)
        for t in range(self.config.frames_per_video):
            u8 = np.round(self.render(t) * 255.0).astype(np.uint8)
            if self.config.grayscale:
                img = u8[:, :, 0]
            else:
                img = cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)
            filename = os.path.join(path, FRAME_FORMAT.format(t))
            if not cv2.imwrite(filename, img):
                raise IOError("Can't write frame {}".format(filename))


def generate_synthetic(config, out_dir, force=False):
    """
    Write a synthetic dataset: frame directories, annotation CSVs and an index.

    @param config: SyntheticConfig
    @param out_dir: output directory
    @param force: overwrite an existing dataset
    @return: summary dictionary
    """
    logger.info("Will generate %s synthetic videos in %s", config.num_videos, out_dir)
    index_path = os.path.join(out_dir, INDEX_FILE)
    if os.path.exists(index_path):
        if force:
            for sub in ('videos', 'annotations'):
                shutil.rmtree(os.path.join(out_dir, sub), ignore_errors=True)
            os.unlink(index_path)
        else:
            raise ValueError("Dataset {} already exists".format(index_path))

    os.makedirs(os.path.join(out_dir, 'annotations'), exist_ok=True)
    splits = assign_splits(config.num_videos, config.split_fractions)

    entries = []
    num_objects = 0
    per_split = {s: 0 for s in SPLITS}
    for i in range(config.num_videos):
        scene = SyntheticScene(config, i)
        frames_dir = os.path.join(out_dir, 'videos', scene.video_id)
        annotation_path = os.path.join(out_dir, 'annotations', scene.video_id + '.csv')
        scene.write_frames(frames_dir)
        num_objects += write_annotations(annotation_path, scene.annotations())
        entries.append(IndexEntry(scene.video_id, frames_dir, annotation_path, scene.meta(), splits[i]))
        per_split[splits[i]] += 1
        logger.debug("Wrote %s (%s)", scene.video_id, splits[i])

    write_index(index_path, entries)
    with open(os.path.join(out_dir, CONFIG_FILE), 'w') as f:
        json.dump(asdict(config), f, indent=1, sort_keys=True)
        f.write('\n')

    summary = {
        'index': index_path,
        'num_videos': config.num_videos,
        'num_frames': config.num_videos * config.frames_per_video,
        'num_objects': num_objects,
        'splits': per_split,
    }
    logger.info("Generated %s videos with %s annotated objects", config.num_videos, num_objects)
    return summary


def load_synthetic(out_dir, split=None):
    """
    Load the index of a generated dataset
    """
    return load_index(os.path.join(out_dir, INDEX_FILE), split)
