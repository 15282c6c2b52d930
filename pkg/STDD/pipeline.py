# encoding: utf-8
"""
Training loop, sliding-window inference, checkpoints, gradient checking and
throughput benchmarking.

Functions taking a run configuration only need the attributes they use
(config.train, config.augment, config.loss, config.backbone,
config.attention, config.head and config.to_dict()).
"""

import os
import csv
import math
import json
import time
import struct
import logging
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import Dataset, DataLoader

from .boxes import Detection, BoxOutsideFrame, clamp_to_frame, scale_box
from .dataio import (VideoFrames, NoAnnotatedFrames, load_annotations, sample_train_clip,
                     sliding_windows, read_window, resize_clip)
from .detector import Detector
from .head_loss import GridPrediction, build_targets, total_loss, decode, nms, DetectionRecord
from .tca import augment_clip
from .shared import check, config_hash, set_seed, LR0, MOMENTUM, DEFAULT_TAU, NMS_IOU_THRESH, NMS_CONF_THRESH

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STDD-CHECKPOINT 1\n"
CHECKPOINT_FILE = "checkpoint.stdd"
LOSS_HISTORY_FILE = "loss_history.csv"
LOSS_HISTORY_HEADER = "step,lr,loss_obj,loss_cls,loss_loc,loss_total"


class NonFiniteLoss(RuntimeError):
    def __init__(self, step, value):
        self.step = step
        super().__init__("Loss became {} at step {}".format(value, step))


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = LR0
    lr_min: float = 0.0
    momentum: float = MOMENTUM
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 1000
    warmup_steps: int = 0
    tau: int = DEFAULT_TAU
    resolution: int = 640
    batch_size: int = 4
    accumulation_steps: int = 1
    seed: int = 0
    single_threaded: bool = True
    workers: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self):
        check(self.lr0 > 0, "train.lr0 must be positive (was {})", self.lr0)
        check(0 <= self.lr_min <= self.lr0, "train.lr_min must be in [0, lr0] (was {})", self.lr_min)
        check(0 <= self.momentum < 1 and 0 <= self.beta2 < 1, "train.momentum and train.beta2 must be in [0, 1)")
        check(self.total_steps >= 1, "train.total_steps must be at least 1")
        check(0 <= self.warmup_steps <= self.total_steps, "train.warmup_steps must be in [0, total_steps]")
        check(self.tau >= 1, "train.tau must be at least 1 (was {})", self.tau)
        check(self.resolution >= 32 and self.resolution % 32 == 0,
              "train.resolution must be a positive multiple of 32 (was {})", self.resolution)
        check(self.batch_size >= 1 and self.accumulation_steps >= 1,
              "train.batch_size and train.accumulation_steps must be at least 1")
        check(self.workers >= 0 and self.checkpoint_interval >= 0 and self.log_interval >= 1,
              "train.workers and train.checkpoint_interval must be non-negative, log_interval positive")


def cosine_lr(step, total_steps, lr0, lr_min=0.0, warmup_steps=0):
    """
    Cosine decay from lr0 at step 0 to lr_min at total_steps, with an
    optional linear warmup. Steps past the end stay at lr_min.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive (was {})".format(total_steps))
    if step < 0:
        raise ValueError("step must be non-negative (was {})".format(step))
    if step >= total_steps:
        return lr_min
    if step < warmup_steps:
        return lr0 * (step + 1) / float(warmup_steps)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


VideoData = namedtuple('VideoData', ('video', 'annotations'))


def load_videos(index):
    """
    Frames and annotations for every entry of a DatasetIndex
    """
    ret = []
    for entry in index:
        ret.append(VideoData(VideoFrames.from_entry(entry), load_annotations(entry.annotation_path, entry.meta)))
    return ret


class ClipDataset(Dataset):
    """
    Item i is a training clip drawn with numpy.random.default_rng([seed, i]),
    so the sequence of batches depends only on the seed, whatever the number
    of loader workers.
    """
    def __init__(self, videos, length, tau, resolution, augment, seed):
        self.videos = []
        for v in videos:
            if any(v.annotations):
                self.videos.append(v)
            else:
                logger.warning("Video %s has no annotated frames - not used for training", v.video.meta.video_id)
        if not self.videos:
            raise NoAnnotatedFrames("No training video has any annotated frame")
        self.length = length
        self.tau = tau
        self.resolution = resolution
        self.augment = augment
        self.seed = seed

    def __len__(self):
        return self.length

    def __getitem__(self, i):
        rng = np.random.default_rng([self.seed, i])
        while True:
            v = self.videos[int(rng.integers(len(self.videos)))]
            try:
                clip = sample_train_clip(v.video, v.annotations, self.tau, rng)
                break
            except NoAnnotatedFrames:
                continue
        clip = augment_clip(clip, self.augment, rng)
        clip = resize_clip(clip, self.resolution)
        frames = torch.from_numpy(np.ascontiguousarray(clip.frames.transpose(0, 3, 1, 2)))
        return frames, clip.annotations


def collate_clips(batch):
    frames = torch.stack([b[0] for b in batch])
    annotations = [b[1] for b in batch]
    return frames, annotations


def build_model(config):
    return Detector(config.train.tau, config.backbone, config.attention, config.head)


LossRecord = namedtuple('LossRecord', ('step', 'lr', 'loss_obj', 'loss_cls', 'loss_loc', 'loss_total'))

TrainResult = namedtuple('TrainResult', ('model', 'history', 'checkpoint'))


def _loss_for_batch(model, frames, annotations, config):
    preds = model(frames)
    per_frame = [gts for clip in annotations for gts in clip]
    grid_shapes = [tuple(g.raw.shape[1:3]) for g in preds]
    targets = build_targets(per_frame, grid_shapes, [g.stride for g in preds],
                            config.head.num_boxes, config.head.num_classes, dtype=preds[0].raw.dtype)
    return total_loss(preds, targets, config.loss)


def train(config, videos, out_dir=None, force=False):
    """
    Train a detector on the given videos.

    @param config: run configuration
    @param videos: list of VideoData (see load_videos)
    @param out_dir: where the checkpoint and loss history go (None = keep in memory)
    @param force: overwrite an existing checkpoint
    @return: TrainResult
    """
    tc = config.train
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        existing = os.path.join(out_dir, CHECKPOINT_FILE)
        if os.path.exists(existing) and not force:
            raise ValueError("File {} already exists".format(existing))

    set_seed(tc.seed, tc.single_threaded)
    model = build_model(config)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr0, betas=(tc.momentum, tc.beta2), eps=tc.eps)

    micro_batches = tc.total_steps * tc.accumulation_steps
    dataset = ClipDataset(videos, micro_batches * tc.batch_size, tc.tau, tc.resolution, config.augment, tc.seed)
    loader = DataLoader(dataset, batch_size=tc.batch_size, shuffle=False, num_workers=tc.workers,
                        collate_fn=collate_clips)
    batches = iter(loader)

    logger.info("Training %s parameters for %s steps (tau=%s, resolution=%s)",
                model.num_parameters(), tc.total_steps, tc.tau, tc.resolution)
    history = []
    checkpoint_path = None
    for step in range(tc.total_steps):
        lr = cosine_lr(step, tc.total_steps, tc.lr0, tc.lr_min, tc.warmup_steps)
        for group in optimizer.param_groups:
            group['lr'] = lr

        optimizer.zero_grad()
        parts = np.zeros(4)
        for _ in range(tc.accumulation_steps):
            frames, annotations = next(batches)
            loss = _loss_for_batch(model, frames, annotations, config)
            value = float(loss.total.detach())
            if not math.isfinite(value):
                raise NonFiniteLoss(step, value)
            (loss.total / tc.accumulation_steps).backward()
            parts += [float(loss.obj), float(loss.cls), float(loss.loc), value]
        optimizer.step()

        parts /= tc.accumulation_steps
        history.append(LossRecord(step, lr, *parts.tolist()))
        if step % tc.log_interval == 0:
            logger.info("Step %s: lr=%.3g loss=%.5f (obj %.5f, cls %.5f, loc %.5f)",
                        step, lr, parts[3], parts[0], parts[1], parts[2])

        if out_dir is not None and tc.checkpoint_interval and (step + 1) % tc.checkpoint_interval == 0:
            checkpoint_path = save_checkpoint(os.path.join(out_dir, CHECKPOINT_FILE), model, config, step + 1,
                                              force=True)

    if out_dir is not None:
        checkpoint_path = save_checkpoint(os.path.join(out_dir, CHECKPOINT_FILE), model, config,
                                          tc.total_steps, force=True)
        write_loss_history(os.path.join(out_dir, LOSS_HISTORY_FILE), history)

    return TrainResult(model, history, checkpoint_path)


def write_loss_history(path, history):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(LOSS_HISTORY_HEADER.split(','))
        for r in history:
            writer.writerow([r.step, float(r.lr), float(r.loss_obj), float(r.loss_cls), float(r.loss_loc),
                             float(r.loss_total)])


def read_loss_history(path):
    ret = []
    with open(path, newline='') as f:
        reader = csv.reader(f)
        if next(reader, None) != LOSS_HISTORY_HEADER.split(','):
            raise ValueError("{} isn't a loss history".format(path))
        for bits in reader:
            if len(bits) == 6:
                ret.append(LossRecord(int(bits[0]), *(float(x) for x in bits[1:])))
    return ret


Checkpoint = namedtuple('Checkpoint', ('state', 'config', 'config_hash', 'step', 'rng_state'))


def save_checkpoint(path, model, config, step, force=False):
    """
    Self-describing container: magic line, 8-byte little-endian header
    length, JSON header (parameter names, shapes and offsets, config, config
    hash, step, torch rng state), then little-endian float32 payloads.
    """
    if os.path.exists(path) and not force:
        raise ValueError("File {} already exists".format(path))
    config_dict = config.to_dict()
    params = []
    payloads = []
    offset = 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().cpu().numpy().astype('<f4')
        params.append({'name': name, 'shape': list(data.shape), 'offset': offset, 'count': int(data.size)})
        payloads.append(data.tobytes())
        offset += data.nbytes

    header = json.dumps({
        'params': params,
        'config': config_dict,
        'config_hash': config_hash(config_dict),
        'step': int(step),
        'rng_state': torch.get_rng_state().numpy().tobytes().hex(),
    }, sort_keys=True).encode('utf-8')

    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)
    os.replace(tmp, path)
    logger.debug("Saved checkpoint at step %s to %s", step, path)
    return path


def load_checkpoint(path):
    """
    @return: Checkpoint with state as an ordered dict of float32 tensors
    """
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError("Can't read checkpoint {}: {}".format(path, e))

    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("{} isn't a checkpoint".format(path))
    pos = len(CHECKPOINT_MAGIC)
    try:
        (length,) = struct.unpack('<Q', data[pos:pos + 8])
        header = json.loads(data[pos + 8:pos + 8 + length].decode('utf-8'))
    except (struct.error, ValueError) as e:
        raise CheckpointError("Corrupt checkpoint header in {}: {}".format(path, e))

    if config_hash(header['config']) != header['config_hash']:
        raise CheckpointError("Config hash mismatch in {}".format(path))

    base = pos + 8 + length
    state = {}
    for p in header['params']:
        start = base + p['offset']
        end = start + 4 * p['count']
        if end > len(data):
            raise CheckpointError("Checkpoint {} is truncated at {}".format(path, p['name']))
        array = np.frombuffer(data[start:end], dtype='<f4').reshape(p['shape'])
        state[p['name']] = torch.from_numpy(array.astype(np.float32))

    rng = torch.from_numpy(np.frombuffer(bytes.fromhex(header['rng_state']), dtype=np.uint8).copy())
    return Checkpoint(state, header['config'], header['config_hash'], header['step'], rng)


def restore_model(checkpoint, config):
    """
    Build the model described by config and load the checkpoint into it
    """
    model = build_model(config)
    try:
        model.load_state_dict(checkpoint.state)
    except RuntimeError as e:
        raise CheckpointError("Checkpoint doesn't match its config: {}".format(e))
    model.eval()
    return model


def _rescale(detection, sx, sy, meta):
    box = clamp_to_frame(scale_box(detection.box, sx, sy), meta)
    return Detection(box, detection.confidence, detection.class_id)


def infer_video(model, video, tau, resolution, iou_thresh=NMS_IOU_THRESH, conf_thresh=NMS_CONF_THRESH):
    """
    Predict every frame of a video exactly once with non-overlapping tau-frame
    windows (the last padded by repeating the final frame).

    @param model: Detector
    @param video: VideoFrames
    @return: detections in original pixel coordinates, ordered by frame then confidence
    """
    meta = video.meta
    sx = meta.width / float(resolution)
    sy = meta.height / float(resolution)
    model.eval()
    done = set()
    ret = []
    with torch.no_grad():
        for indices in sliding_windows(meta.frame_count, tau):
            clip = resize_clip(read_window(video, None, indices), resolution)
            grids = model.predict_clip(clip.frames)
            for t, frame_index in enumerate(indices):
                if frame_index in done:
                    continue
                done.add(frame_index)
                dets = []
                for g in grids:
                    dets.extend(decode(GridPrediction(g.raw[t:t + 1], g.stride), (resolution, resolution),
                                       [frame_index], conf_thresh))
                for d in nms(dets, iou_thresh, conf_thresh):
                    try:
                        ret.append(_rescale(d, sx, sy, meta))
                    except BoxOutsideFrame:
                        continue
    logger.debug("Predicted %s frames of %s: %s detections", len(done), meta.video_id, len(ret))
    ret.sort(key=lambda d: (d.frame_index, -d.confidence))
    return ret


def infer_index(model, index, tau, resolution, iou_thresh=NMS_IOU_THRESH, conf_thresh=NMS_CONF_THRESH):
    """
    DetectionRecords for every video of a DatasetIndex
    """
    ret = []
    for entry in index:
        for d in infer_video(model, VideoFrames.from_entry(entry), tau, resolution, iou_thresh, conf_thresh):
            ret.append(DetectionRecord(entry.video_id, d))
    return ret


def grad_check(function, point, epsilon=1e-6, floor=1e-3):
    """
    Compare autograd against central finite differences, coordinate by
    coordinate.

    @param function: maps the point (a tensor, or a sequence of tensors passed
                     as separate arguments) to a scalar tensor
    @param point: double precision tensor(s)
    @param floor: smallest denominator; coordinates whose gradients are both
                  below it are held to an absolute error of err * floor
    @return: max |a - n| / max(|a|, |n|, floor) over every coordinate
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive (was {})".format(epsilon))
    if not floor > 0:
        raise ValueError("floor must be positive (was {})".format(floor))
    single = torch.is_tensor(point)
    points = [point] if single else list(point)
    points = [p.detach().clone().requires_grad_(True) for p in points]

    value = function(*points)
    analytic = torch.autograd.grad(value, points, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(points, analytic)]

    worst = 0.0
    with torch.no_grad():
        for p, a in zip(points, analytic):
            flat = p.view(-1)
            a = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                plus = float(function(*points))
                flat[i] = orig - epsilon
                minus = float(function(*points))
                flat[i] = orig
                numeric = (plus - minus) / (2.0 * epsilon)
                analytic_i = float(a[i])
                err = abs(analytic_i - numeric) / max(abs(analytic_i), abs(numeric), floor)
                worst = max(worst, err)
    return worst


BenchResult = namedtuple('BenchResult', ('fps', 'trials', 'resolution', 'tau', 'num_frames'))


def benchmark_fps(model, resolution, num_frames=200, trials=3, warmup=2, tau=None, seed=0):
    """
    Median frames/second of the forward pass over num_frames frames, fed in
    tau-frame clips. Warmup passes aren't timed.
    """
    if resolution % 32:
        raise ValueError("Resolution {} isn't a multiple of 32".format(resolution))
    if num_frames < 1 or trials < 1:
        raise ValueError("Need at least one frame and one trial")
    if num_frames < 200:
        logger.warning("Benchmarking only %s frames; timings will be noisy", num_frames)
    tau = tau or model.tau
    clips = int(math.ceil(num_frames / float(tau)))
    gen = torch.Generator().manual_seed(seed)
    param = next(model.parameters())
    x = torch.rand((1, tau, 3, resolution, resolution), generator=gen).to(dtype=param.dtype, device=param.device)

    model.eval()
    times = []
    with torch.no_grad():
        for _ in range(warmup):
            model(x)
        for _ in range(trials):
            start = time.perf_counter()
            for _ in range(clips):
                model(x)
            times.append(time.perf_counter() - start)

    frames = clips * tau
    fps = [frames / t for t in times]
    median = float(np.median(fps))
    logger.info("%s fps at %sx%s (tau=%s, %s trials)", median, resolution, resolution, tau, trials)
    return BenchResult(median, fps, resolution, tau, frames)
