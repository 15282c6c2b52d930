# encoding: utf-8
"""
Canonical annotation format, dataset index, frame storage and clip sampling.

Annotation files are CSV, one row per object, with a required header:

    frame_index,x1,y1,x2,y2,class_id

Videos are directories of numbered, lossless PNG frames (000000.png, ...).
"""

import os
import csv
import json
import logging
from collections import namedtuple

import cv2
import numpy as np

from .boxes import Box, GroundTruth, VideoMeta, InvalidBox, BoxOutsideFrame, clamp_to_frame, scale_box
from .shared import ANNOTATION_HEADER, FRAME_FORMAT, SPLITS, naturalise

logger = logging.getLogger(__name__)


class AnnotationError(ValueError):
    def __init__(self, path, line_number, msg):
        self.path = path
        self.line_number = line_number
        super().__init__("{}:{}: {}".format(path, line_number, msg))


class NoAnnotatedFrames(ValueError):
    pass


class IndexFileError(ValueError):
    pass


class Clip(object):
    """
    tau consecutive frames (tau x H x W x 3, float32 in [0, 1]) with their
    per-frame ground truth.
    """
    def __init__(self, frames, frame_indices, annotations, meta):
        frames = np.asarray(frames, dtype=np.float32)
        assert frames.ndim == 4 and frames.shape[-1] == 3, frames.shape
        assert len(frame_indices) == frames.shape[0], (len(frame_indices), frames.shape)
        assert len(annotations) == frames.shape[0], (len(annotations), frames.shape)
        self.frames = frames
        self.frame_indices = [int(x) for x in frame_indices]
        self.annotations = [list(x) for x in annotations]
        self.meta = meta
        # Book-keeping filled in by augmentation
        self.dropped_boxes = 0
        self.augment_params = None

    @property
    def tau(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def replace(self, *, frames=None, annotations=None, meta=None):
        """
        Return a new clip sharing whatever isn't replaced
        """
        return Clip(self.frames if frames is None else frames,
                    self.frame_indices,
                    self.annotations if annotations is None else annotations,
                    self.meta if meta is None else meta)

    def __repr__(self):
        return "<Clip: video={}, frames={}, size={}x{}, objects={}>".format(
            self.meta.video_id, self.frame_indices, self.width, self.height,
            sum(len(x) for x in self.annotations))


IndexEntry = namedtuple('IndexEntry', ('video_id', 'path', 'annotation_path', 'meta', 'split'))


class DatasetIndex(object):
    def __init__(self, entries, split=None):
        """
        @param entries: list of IndexEntry
        @param split: the split these entries belong to (None = all splits)
        """
        seen = set()
        for e in entries:
            key = (e.split, e.video_id)
            if key in seen:
                raise IndexFileError("Video id {} appears twice in split {}".format(e.video_id, e.split))
            seen.add(key)
        self.entries = sorted(entries, key=lambda e: (SPLITS.index(e.split), naturalise(e.video_id)))
        self.split = split

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def video_ids(self):
        return [e.video_id for e in self.entries]


def write_index(path, entries):
    """
    Write the JSON dataset index. Paths are stored relative to the index file.
    """
    base = os.path.dirname(os.path.abspath(path))
    videos = []
    for e in entries:
        videos.append({
            'video_id': e.video_id,
            'path': os.path.relpath(e.path, base),
            'annotation_path': os.path.relpath(e.annotation_path, base),
            'fps': e.meta.fps,
            'width': e.meta.width,
            'height': e.meta.height,
            'frame_count': e.meta.frame_count,
            'split': e.split,
        })
    with open(path, 'w') as f:
        json.dump({'videos': videos}, f, indent=1, sort_keys=True)
        f.write('\n')
    logger.debug("Wrote index of %s videos to %s", len(videos), path)


def load_index(path, split=None):
    """
    Load a dataset index, optionally restricted to one split.
    """
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as f:
            data = json.load(f)
        videos = data['videos']
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise IndexFileError("Can't read dataset index {}: {}".format(path, e))

    if split is not None and split not in SPLITS:
        raise IndexFileError("Unknown split {} (expected one of {})".format(split, SPLITS))

    entries = []
    for v in videos:
        try:
            if v['split'] not in SPLITS:
                raise IndexFileError("Video {} has unknown split {}".format(v['video_id'], v['split']))
            if split is not None and v['split'] != split:
                continue
            meta = VideoMeta(v['video_id'], v['frame_count'], v['width'], v['height'], v['fps'])
            entries.append(IndexEntry(meta.video_id,
                                      os.path.join(base, v['path']),
                                      os.path.join(base, v['annotation_path']),
                                      meta,
                                      v['split']))
        except KeyError as e:
            raise IndexFileError("Index {} entry {} is missing {}".format(path, v, e))

    return DatasetIndex(entries, split)


class VideoFrames(object):
    """
    A video stored as a directory of numbered PNG frames.
    """
    def __init__(self, path, meta):
        self.path = path
        self.meta = meta

    @classmethod
    def from_entry(cls, entry):
        return cls(entry.path, entry.meta)

    @property
    def frame_count(self):
        return self.meta.frame_count

    def frame_path(self, i):
        return os.path.join(self.path, FRAME_FORMAT.format(i))

    def read(self, indices):
        """
        Read frames as float32 RGB in [0, 1], shape (len(indices), H, W, 3).
        Grayscale frames come back with the intensity on all three channels.
        """
        frames = []
        for i in indices:
            if not 0 <= i < self.meta.frame_count:
                raise IndexError("Frame {} outside video {} ({} frames)".format(
                    i, self.meta.video_id, self.meta.frame_count))
            img = cv2.imread(self.frame_path(i), cv2.IMREAD_COLOR)
            if img is None:
                raise IOError("Can't read frame {}".format(self.frame_path(i)))
            frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
        return np.stack(frames).astype(np.float32) / 255.0

    def __repr__(self):
        return "<VideoFrames: {} ({} frames)>".format(self.meta.video_id, self.meta.frame_count)


class AnnotationList(list):
    """
    Per-frame lists of GroundTruth, plus what had to be fixed on the way in.
    """
    def __init__(self, frame_count):
        super().__init__([] for _ in range(frame_count))
        self.duplicates = 0
        self.clamped = 0
        self.dropped = 0


def load_annotations(path, meta):
    """
    Load an annotation CSV into per-frame GroundTruth lists.

    Frames absent from the file have empty lists. Out-of-bounds boxes are
    clamped (with a warning). Rows repeating the frame and box of an earlier
    row are dropped and counted, whatever their class: the first row wins.

    @param path: CSV file
    @param meta: VideoMeta of the video the annotations belong to
    """
    ret = AnnotationList(meta.frame_count)
    seen = set()
    header_seen = False
    with open(path, newline='') as f:
        reader = csv.reader(f)
        for bits in reader:
            line_number = reader.line_num
            bits = [x.strip() for x in bits]
            if not any(bits):
                continue
            if not header_seen:
                if ','.join(bits) != ANNOTATION_HEADER:
                    raise AnnotationError(path, line_number, "expected header '{}'".format(ANNOTATION_HEADER))
                header_seen = True
                continue

            if len(bits) != 6:
                raise AnnotationError(path, line_number, "expected 6 fields, found {}".format(len(bits)))
            try:
                frame = int(bits[0])
                x1, y1, x2, y2 = (float(x) for x in bits[1:5])
                class_id = int(bits[5])
            except ValueError as e:
                raise AnnotationError(path, line_number, str(e))

            if not 0 <= frame < meta.frame_count:
                raise AnnotationError(path, line_number, "frame {} outside video of {} frames".format(
                    frame, meta.frame_count))
            if class_id < 0:
                raise AnnotationError(path, line_number, "negative class id {}".format(class_id))
            try:
                box = Box(x1, y1, x2, y2, frame)
            except InvalidBox as e:
                raise AnnotationError(path, line_number, str(e))

            try:
                clamped = clamp_to_frame(box, meta)
            except BoxOutsideFrame:
                logger.warning("%s:%s: box %s is outside the frame - dropping it", path, line_number,
                               tuple(box[:4]))
                ret.dropped += 1
                continue
            if clamped != box:
                logger.warning("%s:%s: box %s clamped to %s", path, line_number, tuple(box[:4]),
                               tuple(clamped[:4]))
                ret.clamped += 1

            # Box carries the frame index
            if clamped in seen:
                ret.duplicates += 1
                continue
            seen.add(clamped)
            ret[frame].append(GroundTruth(clamped, class_id))

    if ret.duplicates:
        logger.warning("Dropped %s duplicate rows from %s", ret.duplicates, path)

    return ret


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def write_annotations(path, per_frame):
    """
    Write per-frame GroundTruth lists in the canonical CSV form. Rows are
    sorted so the output only depends on the set of objects.
    """
    rows = []
    for frame_gts in per_frame:
        for gt in frame_gts:
            b = gt.box
            rows.append((b.frame_index, b.x1, b.y1, b.x2, b.y2, gt.class_id))
    rows.sort()
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(ANNOTATION_HEADER.split(','))
        for frame, x1, y1, x2, y2, class_id in rows:
            writer.writerow([frame, _fmt(x1), _fmt(y1), _fmt(x2), _fmt(y2), class_id])
    return len(rows)


def window_indices(start, tau, frame_count):
    """
    tau consecutive indices from start, replicating the last frame past the end.
    """
    return [min(start + k, frame_count - 1) for k in range(tau)]


def sliding_windows(frame_count, tau):
    """
    Non-overlapping windows of length tau covering every frame; the final
    partial window is padded by replicating the last frame.
    """
    assert frame_count >= 1, frame_count
    assert tau >= 1, tau
    return [window_indices(start, tau, frame_count) for start in range(0, frame_count, tau)]


def _clip_annotations(annotations, indices):
    ret = []
    for i in indices:
        ret.append([GroundTruth(gt.box, gt.class_id) for gt in annotations[i]])
    return ret


def sample_train_clip(video, annotations, tau, rng):
    """
    Sample a training clip from a random temporal location. The clip always
    contains at least one annotated frame; unannotated frames inside it are
    background.

    @param video: VideoFrames (anything with meta, frame_count and read())
    @param annotations: per-frame GroundTruth lists for the video
    @param tau: temporal window
    @param rng: numpy Generator
    """
    n = video.frame_count
    annotated = np.array([1 if a else 0 for a in annotations[:n]], dtype=np.int64)
    if not annotated.any():
        raise NoAnnotatedFrames("Video {} has no annotated frames".format(video.meta.video_id))

    prefix = np.concatenate([[0], np.cumsum(annotated)])
    starts = np.arange(0, max(0, n - tau) + 1)
    ends = np.minimum(starts + tau, n)
    valid = starts[(prefix[ends] - prefix[starts]) > 0]

    start = int(valid[rng.integers(len(valid))])
    indices = window_indices(start, tau, n)
    logger.debug("Sampled clip %s from %s (%s valid starts)", indices, video.meta.video_id, len(valid))
    return Clip(video.read(indices), indices, _clip_annotations(annotations, indices), video.meta)


def read_window(video, annotations, indices):
    """
    Build an inference clip for the given frame indices.
    """
    if annotations is None:
        anns = [[] for _ in indices]
    else:
        anns = _clip_annotations(annotations, indices)
    return Clip(video.read(indices), indices, anns, video.meta)


def resize_clip(clip, resolution):
    """
    Resize every frame to resolution x resolution and rescale the boxes.
    """
    if clip.width == resolution and clip.height == resolution:
        return clip
    sx = resolution / float(clip.width)
    sy = resolution / float(clip.height)
    frames = np.stack([cv2.resize(f, (resolution, resolution), interpolation=cv2.INTER_LINEAR)
                       for f in clip.frames])
    annotations = [[GroundTruth(scale_box(gt.box, sx, sy), gt.class_id) for gt in frame_gts]
                   for frame_gts in clip.annotations]
    meta = clip.meta._replace(width=resolution, height=resolution)
    return Clip(frames, clip.frame_indices, annotations, meta)
