# encoding: utf-8
"""
Command line interface: generate-data, train, eval, bench and ablate.

Every command writes its outputs under one run directory (--out, or
$STDD_RUN_DIR/<command> when omitted) together with the resolved
config.json and a manifest.json of SHA-256 hashes.
"""

import os
import csv
import sys
import json
import logging
import argparse
from collections import OrderedDict

import numpy as np

from .config import load_config, load_model, write_config, parse_override, ABLATION_AXES
from .dataio import VideoFrames, load_index, load_annotations
from .head_loss import write_detections, read_detections
from .metrics import evaluate, write_report, write_pr_curve, write_overlays
from .pipeline import train, load_videos, infer_index, benchmark_fps
from .synthetic import generate_synthetic, load_synthetic
from .shared import file_sha256, canonical_json, RUN_DIR_ENV, SPLITS

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
LOG_FILE = "stdd.log"
DETECTIONS_FILE = "detections.jsonl"
REPORT_FILE = "metrics.json"
PR_CURVE_FILE = "pr_curve.csv"
ABLATION_FILE = "ablation.csv"
ABLATION_RUNS_FILE = "ablation_runs.csv"
ABLATION_METRICS = ('ap', 'best_f1', 'precision_at_best_f1', 'recall_at_best_f1', 'fppi', 'encounter_rate')

_HANDLERS = []


class UsageError(ValueError):
    pass


def setup_logging(run_dir=None, verbose=False):
    """
    Warnings and above to stderr (everything with verbose), and everything
    to a debug log in the run directory. Calling it again replaces the
    handlers of the previous call.
    """
    root = logging.getLogger()
    for h in _HANDLERS:
        root.removeHandler(h)
        h.close()
    del _HANDLERS[:]
    root.setLevel(logging.DEBUG)

    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setLevel(logging.DEBUG if verbose else logging.WARNING)
    stderr_handler.setFormatter(logging.Formatter('[%(levelname)s] %(message)s'))
    _HANDLERS.append(stderr_handler)

    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(run_dir, LOG_FILE))
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(
            '[%(asctime)s] [%(process)s] [%(filename)s:%(lineno)s] [%(levelname)s] %(message)s'))
        _HANDLERS.append(file_handler)

    for h in _HANDLERS:
        root.addHandler(h)


def run_dir(out, command):
    if out:
        return out
    base = os.environ.get(RUN_DIR_ENV)
    if not base:
        raise UsageError("No --out given and {} isn't set".format(RUN_DIR_ENV))
    return os.path.join(base, command)


def write_manifest(out_dir, command, config=None):
    """
    List every file under out_dir (bar the log and the manifest itself) with
    its SHA-256
    """
    artifacts = OrderedDict()
    for dirpath, dirnames, filenames in os.walk(out_dir):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, out_dir).replace(os.sep, '/')
            if rel in (MANIFEST_FILE, LOG_FILE):
                continue
            artifacts[rel] = file_sha256(path)
    manifest = OrderedDict([
        ('command', command),
        ('config_hash', config.hash if config is not None else None),
        ('artifacts', artifacts),
    ])
    path = os.path.join(out_dir, MANIFEST_FILE)
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=1)
        f.write('\n')
    logger.debug("Manifest of %s artifacts written to %s", len(artifacts), path)
    return path


def _training_index(config, out_dir, force):
    if config.data.index:
        return load_index(config.data.index, config.data.train_split)
    data_dir = os.path.join(out_dir, "data")
    generate_synthetic(config.synthetic, data_dir, force=force)
    return load_synthetic(data_dir, config.data.train_split)


def _ground_truth(index):
    annotations = {}
    metas = {}
    for entry in index:
        annotations[entry.video_id] = load_annotations(entry.annotation_path, entry.meta)
        metas[entry.video_id] = entry.meta
    return annotations, metas


def evaluate_index(model, config, index, eval_stride=None, fps=None):
    """
    Infer every video of an index and score the detections
    @return: (records, MetricsReport, PRCurve)
    """
    e = config.eval
    records = infer_index(model, index, config.train.tau, config.train.resolution, e.nms_iou_thresh, e.conf_thresh)
    annotations, metas = _ground_truth(index)
    report, curve = evaluate(records, annotations, metas, eval_stride or e.eval_stride, e.iou_thresh,
                             e.encounter_seconds, fps)
    return records, report, curve


def generate_data_command(args):
    out = run_dir(args.out, 'generate-data')
    config = load_config(args.config, args.set)
    summary = generate_synthetic(config.synthetic, out, force=args.force)
    write_config(os.path.join(out, CONFIG_FILE), config)
    write_manifest(out, 'generate-data', config)
    print(canonical_json(summary))
    return 0


def train_command(args):
    out = run_dir(args.out, 'train')
    config = load_config(args.config, args.set)
    index = _training_index(config, out, args.force)
    result = train(config, load_videos(index), out, force=args.force)
    write_config(os.path.join(out, CONFIG_FILE), config)
    write_manifest(out, 'train', config)
    last = result.history[-1]
    print("Trained {} steps, final loss {:.5f}, checkpoint {}".format(
        len(result.history), last.loss_total, result.checkpoint))
    return 0


def eval_command(args):
    out = run_dir(args.out, 'eval')
    if args.checkpoint is None and args.detections is None:
        raise UsageError("eval needs --checkpoint or --detections")
    if args.checkpoint is not None:
        if not os.path.exists(args.checkpoint):
            raise UsageError("Checkpoint {} doesn't exist".format(args.checkpoint))
        model, config = load_model(args.checkpoint)
        for text in args.set:
            section, name, value = parse_override(text)
            if section != 'eval':
                raise UsageError("Only eval.* keys can be overridden when evaluating a checkpoint (got {})".format(text))
            config = config.replace('eval', **{name: value})
    else:
        model, config = None, load_config(args.config, args.set)
    split = args.split or config.eval.split
    index = load_index(args.data, split)
    stride = args.stride or config.eval.eval_stride
    os.makedirs(out, exist_ok=True)

    report_path = os.path.join(out, REPORT_FILE)
    if os.path.exists(report_path) and not args.force:
        raise ValueError("File {} already exists".format(report_path))

    if model is not None:
        records, report, curve = evaluate_index(model, config, index, stride)
        write_detections(os.path.join(out, DETECTIONS_FILE), records)
    else:
        records = read_detections(args.detections)
        annotations, metas = _ground_truth(index)
        e = config.eval
        report, curve = evaluate(records, annotations, metas, stride, e.iou_thresh, e.encounter_seconds)

    write_report(report_path, report)
    write_pr_curve(os.path.join(out, PR_CURVE_FILE), curve)

    if args.overlays or config.eval.overlays:
        by_video = {}
        for video_id, d in records:
            by_video.setdefault(video_id, []).append(d)
        threshold = report.confidence_at_best_f1 or 0.0
        annotations, _ = _ground_truth(index)
        for entry in index:
            write_overlays(os.path.join(out, "overlays", entry.video_id), VideoFrames.from_entry(entry),
                           annotations[entry.video_id], by_video.get(entry.video_id, []), stride, threshold)

    write_config(os.path.join(out, CONFIG_FILE), config)
    write_manifest(out, 'eval', config)
    print(canonical_json(report._asdict()))
    return 0


def bench_command(args):
    if not os.path.exists(args.checkpoint):
        raise UsageError("Checkpoint {} doesn't exist".format(args.checkpoint))
    model, config = load_model(args.checkpoint)
    result = benchmark_fps(model, args.resolution, args.frames, args.trials, seed=config.train.seed)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.json"), 'w') as f:
            json.dump(result._asdict(), f, indent=1, sort_keys=True)
            f.write('\n')
        write_manifest(args.out, 'bench', config)
    print("{:.2f} fps at {}x{} (median of {} trials)".format(result.fps, args.resolution, args.resolution,
                                                          len(result.trials)))
    return 0


def ablation_variants(config, axis):
    """
    @return: list of (variant name, RunConfig) for one ablation axis
    """
    a = config.ablation
    if axis == 'tau':
        return [("tau={}".format(t), config.replace('train', tau=t)) for t in a.taus]
    if axis == 'resolution':
        return [("resolution={}".format(r), config.replace('train', resolution=r)) for r in a.resolutions]
    if axis == 'tca':
        return [(name, config.replace('augment', enabled=True, consistent=consistent))
                for name, consistent in (("consistent", True), ("inconsistent", False))]
    if axis == 'attention':
        return [("depth={} shift={}".format(depth, "/".join(str(s) for s in shift)),
                 config.replace('attention', depth=depth, shift=shift))
                for depth, shift in a.attention]
    raise UsageError("Unknown ablation axis {} (expected one of {})".format(axis, ', '.join(ABLATION_AXES)))


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def run_ablation(config, axis, out_dir, force=False):
    """
    Train and evaluate every variant of an axis once per seed.

    @return: (per-run rows, per-variant rows averaged over seeds)
    """
    variants = ablation_variants(config, axis)
    train_videos = load_videos(_training_index(config, out_dir, force))
    if config.data.index:
        test_index = load_index(config.data.index, config.eval.split)
    else:
        test_index = load_synthetic(os.path.join(out_dir, "data"), config.eval.split)

    runs = []
    for name, variant in variants:
        for seed in config.ablation.seeds:
            seeded = variant.replace('train', seed=seed)
            dir_name = "".join(c if c.isalnum() else '_' for c in name)
            run_out = os.path.join(out_dir, "runs", dir_name, "seed_{}".format(seed))
            logger.info("Ablation %s: %s, seed %s", axis, name, seed)
            result = train(seeded, train_videos, run_out, force=force)
            fps = None
            if axis == 'resolution':
                fps = benchmark_fps(result.model, seeded.train.resolution, config.ablation.bench_frames,
                                    config.ablation.bench_trials, seed=seed).fps
            _, report, _ = evaluate_index(result.model, seeded, test_index, fps=fps)
            write_report(os.path.join(run_out, REPORT_FILE), report)
            write_config(os.path.join(run_out, CONFIG_FILE), seeded)
            row = OrderedDict([('axis', axis), ('variant', name), ('seed', seed)])
            for m in ABLATION_METRICS:
                row[m] = getattr(report, m)
            row['fps'] = fps
            runs.append(row)

    summary = []
    for name, _ in variants:
        rows = [r for r in runs if r['variant'] == name]
        row = OrderedDict([('axis', axis), ('variant', name), ('seeds', len(rows))])
        for m in ABLATION_METRICS + ('fps',):
            row[m] = _mean(r[m] for r in rows)
        summary.append(row)
    return runs, summary


def write_rows(path, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator='\n')
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ('' if v is None else v) for k, v in r.items()})
    return path


def ablate_command(args):
    out = run_dir(args.out, 'ablate')
    config = load_config(args.config, args.set)
    runs, summary = run_ablation(config, args.axis, out, force=args.force)
    write_rows(os.path.join(out, ABLATION_RUNS_FILE), runs)
    write_rows(os.path.join(out, ABLATION_FILE), summary)
    write_config(os.path.join(out, CONFIG_FILE), config)
    write_manifest(out, 'ablate', config)
    for row in summary:
        print("{variant}: AP {ap:.4f}, F1 {best_f1:.4f}".format(**row))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='stdd', description="Spatio-temporal drone detection experiments")
    parser.add_argument('-v', '--verbose', action='store_true', help="Debug logging to stderr")
    subparsers = parser.add_subparsers(dest='command')

    def add(name, func, help_text, config=True, out=True):
        p = subparsers.add_parser(name, help=help_text)
        if config:
            p.add_argument('--config', help="JSON run configuration (defaults if omitted)")
            p.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                           help="Override a configuration key (repeatable)")
        if out:
            p.add_argument('--out', help="Run directory (default ${}/{})".format(RUN_DIR_ENV, name))
            p.add_argument('--force', action='store_true', help="Overwrite existing outputs")
        p.set_defaults(func=func)
        return p

    add('generate-data', generate_data_command, "Generate a synthetic dataset")
    add('train', train_command, "Train a detector")

    p = add('eval', eval_command, "Evaluate a checkpoint (or a detection file) on a dataset")
    p.add_argument('--checkpoint', help="Checkpoint to evaluate")
    p.add_argument('--data', required=True, help="Dataset index JSON")
    p.add_argument('--split', choices=SPLITS, help="Split to evaluate (default eval.split)")
    p.add_argument('--stride', type=int, help="Evaluate every Nth frame (default eval.eval_stride)")
    p.add_argument('--detections', help="Score this detection JSONL file instead of running a model")
    p.add_argument('--overlays', action='store_true', help="Write overlay images of evaluated frames")

    p = add('bench', bench_command, "Measure forward-pass throughput", config=False, out=False)
    p.add_argument('--checkpoint', required=True, help="Checkpoint to benchmark")
    p.add_argument('--resolution', type=int, required=True, help="Square input size in pixels")
    p.add_argument('--frames', type=int, default=200, help="Frames per trial")
    p.add_argument('--trials', type=int, default=3, help="Number of timed trials")
    p.add_argument('--out', help="Optionally write bench.json here")

    p = add('ablate', ablate_command, "Run an ablation over synthetic data")
    p.add_argument('--axis', required=True, choices=ABLATION_AXES, help="What to vary")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2

    setup_logging(None, args.verbose)
    try:
        if args.command != 'bench':
            args.out = run_dir(args.out, args.command)
            setup_logging(args.out, args.verbose)
        logger.debug("Running %s with %s", args.command, vars(args))
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
