# encoding: utf-8

import re
import json
import random
import hashlib
import logging

import numpy as np
import torch
from decorator import decorator

logger = logging.getLogger(__name__)

# Defaults stated for the detection framework (used by every config section)
DEFAULT_TAU = 5
LAMBDA_NOOBJ = 5.0
LAMBDA_COORD = 5.0
NMS_IOU_THRESH = 0.6
NMS_CONF_THRESH = 0.001
MATCH_IOU_THRESH = 0.5
EVAL_STRIDE = 4
LR0 = 3e-5
MOMENTUM = 0.843
ENCOUNTER_SECONDS = 3.0
STRIDES = (8, 16, 32)
SPP_KERNELS = (5, 9, 13)

# Splits of a dataset index
TRAIN = "train"
VAL = "val"
TEST = "test"
SPLITS = (TRAIN, VAL, TEST)

# Environment variable naming the default run directory
RUN_DIR_ENV = "STDD_RUN_DIR"

ANNOTATION_HEADER = "frame_index,x1,y1,x2,y2,class_id"
FRAME_FORMAT = "{:06d}.png"

re_number = re.compile("([0-9]+)")


def _memoize(f, *args, **kwargs):
    key = (args, tuple(sorted(kwargs.items())))
    memo = f.__dict__.setdefault('_memo', {})
    if key not in memo:
        memo[key] = f(*args, **kwargs)
    return memo[key]


def memoize(f):
    """
    Signature-preserving memoization for pure functions of hashable arguments.

    WARNING - this can cause effective memory leaks in long running processes
    """
    return decorator(_memoize, f)


def naturalise(x):
    # return a sortable tuple representing this identifier
    bits = re_number.split(x)
    return tuple(int(b) if b.isdigit() else b for b in bits)


def sort_video_ids(video_ids):
    """
    Return a sorted list of video ids - numbers inside names sort numerically
    (video_2 before video_10).
    """
    return sorted(video_ids, key=naturalise)


def canonical_json(data):
    return json.dumps(data, sort_keys=True, separators=(',', ':'))


def config_hash(data):
    """
    SHA-256 of the canonical JSON form of a config dictionary
    """
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def set_seed(seed, single_threaded=False):
    """
    Seed python, numpy and torch. In single-threaded mode torch also runs
    deterministic kernels on one thread, which makes reruns bitwise equal.
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if single_threaded:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
    logger.debug("Seeded everything with %s (single_threaded=%s)", seed, single_threaded)


class ConfigError(ValueError):
    """
    Unknown keys or invalid values in a configuration section
    """
    pass


def check(condition, msg, *args, error=ConfigError):
    """
    Raise error(msg.format(*args)) unless condition holds
    """
    if not condition:
        raise error(msg.format(*args))
