# encoding: utf-8
"""
The run configuration: every configuration section in one JSON document.

Loading is strict. Unknown sections or keys raise ConfigError, as does any
value a section rejects. Overrides of the form "section.key=value" are
applied to the raw document before validation, values being parsed as JSON
where possible and kept as strings otherwise.
"""

import json
import logging
import dataclasses
from collections import OrderedDict
from dataclasses import dataclass

from .backbone import BackboneConfig
from .detector import HeadConfig
from .head_loss import LossWeights
from .metrics import EvalConfig
from .pipeline import TrainConfig, load_checkpoint, restore_model
from .shared import check, canonical_json, config_hash, ConfigError, TRAIN, SPLITS
from .st_attention import AttentionBranchConfig
from .synthetic import SyntheticConfig
from .tca import AugmentConfig

logger = logging.getLogger(__name__)

ABLATION_AXES = ('tau', 'resolution', 'tca', 'attention')


@dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2)
    taus: tuple = (1, 3, 5)
    resolutions: tuple = (64, 96, 128)
    # (depth, (shift_h, shift_w, shift_t)) per attention row
    attention: tuple = ((3, (4, 4, 2)), (5, (4, 4, 0)))
    bench_frames: int = 200
    bench_trials: int = 3

    def __post_init__(self):
        check(len(self.seeds) >= 1, "ablation.seeds can't be empty")
        check(all(t >= 1 for t in self.taus), "ablation.taus must all be at least 1 (was {})", self.taus)
        check(all(r >= 32 and r % 32 == 0 for r in self.resolutions),
              "ablation.resolutions must be positive multiples of 32 (was {})", self.resolutions)
        for row in self.attention:
            check(len(row) == 2 and len(row[1]) == 3,
                  "ablation.attention rows are [depth, [shift_h, shift_w, shift_t]] (was {})", row)
        check(self.bench_frames >= 1 and self.bench_trials >= 1,
              "ablation.bench_frames and ablation.bench_trials must be at least 1")


@dataclass
class DataConfig:
    # Dataset index; empty means "generate from the synthetic section"
    index: str = ""
    train_split: str = TRAIN

    def __post_init__(self):
        check(self.train_split in SPLITS, "data.train_split must be one of {} (was {})", SPLITS, self.train_split)


SECTIONS = OrderedDict([
    ('train', TrainConfig),
    ('augment', AugmentConfig),
    ('loss', LossWeights),
    ('backbone', BackboneConfig),
    ('attention', AttentionBranchConfig),
    ('head', HeadConfig),
    ('synthetic', SyntheticConfig),
    ('eval', EvalConfig),
    ('ablation', AblationConfig),
    ('data', DataConfig),
])


def _tuplify(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuplify(v) for v in value)
    return value


def _listify(value):
    if isinstance(value, (list, tuple)):
        return [_listify(v) for v in value]
    if isinstance(value, dict):
        return {k: _listify(v) for k, v in value.items()}
    return value


def _build_section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError("Section {} must be an object (was {!r})".format(name, values))
    known = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError("Unknown key(s) in section {}: {} (known: {})".format(
            name, ', '.join(unknown), ', '.join(known)))
    try:
        return cls(**{k: _tuplify(v) for k, v in values.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError("Invalid section {}: {}".format(name, e))


class RunConfig(object):
    """
    A complete run configuration, one attribute per section
    """
    def __init__(self, **sections):
        unknown = sorted(set(sections) - set(SECTIONS))
        if unknown:
            raise ConfigError("Unknown section(s): {}".format(', '.join(unknown)))
        for name, cls in SECTIONS.items():
            section = sections.get(name)
            setattr(self, name, cls() if section is None else section)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("A run configuration must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError("Unknown section(s): {} (known: {})".format(
                ', '.join(unknown), ', '.join(SECTIONS)))
        return cls(**{name: _build_section(name, SECTIONS[name], values) for name, values in data.items()})

    def to_dict(self):
        return OrderedDict((name, _listify(dataclasses.asdict(getattr(self, name)))) for name in SECTIONS)

    def replace(self, section, **changes):
        """
        A copy with some keys of one section changed (and re-validated)
        """
        if section not in SECTIONS:
            raise ConfigError("Unknown section {}".format(section))
        data = self.to_dict()
        data[section].update(_listify(changes))
        return RunConfig.from_dict(data)

    @property
    def hash(self):
        return config_hash(self.to_dict())

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "RunConfig({})".format(canonical_json(self.to_dict()))


def parse_override(text):
    """
    "train.lr0=1e-4" -> ('train', 'lr0', 0.0001)
    """
    key, sep, raw = text.partition('=')
    section, dot, name = key.strip().partition('.')
    if not sep or not dot or not section or not name:
        raise ConfigError("Override {!r} isn't of the form section.key=value".format(text))
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return section, name, value


def apply_overrides(data, overrides):
    """
    Apply "section.key=value" overrides to a raw config document (in place)
    """
    for text in overrides:
        section, name, value = parse_override(text)
        if section not in SECTIONS:
            raise ConfigError("Unknown section {} in override {!r}".format(section, text))
        data.setdefault(section, {})[name] = value
        logger.debug("Override %s.%s = %r", section, name, value)
    return data


def load_config(path=None, overrides=()):
    """
    Load a run configuration from a JSON file (or the defaults when path is
    None) and apply the overrides.
    """
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError("Can't read config {}: {}".format(path, e))
        except ValueError as e:
            raise ConfigError("Config {} isn't valid JSON: {}".format(path, e))
    if not isinstance(data, dict):
        raise ConfigError("Config {} must hold a JSON object".format(path))
    apply_overrides(data, overrides)
    config = RunConfig.from_dict(data)
    logger.debug("Loaded config %s (hash %s)", path, config.hash)
    return config


def write_config(path, config):
    with open(path, 'w') as f:
        json.dump(config.to_dict(), f, indent=1, sort_keys=True)
        f.write('\n')
    return path


def load_model(checkpoint_path):
    """
    @return: (model, RunConfig) rebuilt from a checkpoint alone
    """
    checkpoint = load_checkpoint(checkpoint_path)
    config = RunConfig.from_dict(checkpoint.config)
    return restore_model(checkpoint, config), config
