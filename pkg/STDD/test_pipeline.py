import os
import math
import shutil
import tempfile
from unittest import TestCase

import torch

from STDD.dataio import load_index, VideoFrames, NoAnnotatedFrames
from STDD.pipeline import (TrainConfig, ClipDataset, cosine_lr, load_videos, build_model, train, grad_check,
                           save_checkpoint, load_checkpoint, restore_model, infer_video, infer_index,
                           benchmark_fps, read_loss_history, CheckpointError, CHECKPOINT_FILE,
                           LOSS_HISTORY_FILE)
from STDD.shared import ConfigError, TRAIN, TEST
from STDD.test_data import TestDataset, tiny_config
from STDD.test_logging import default_logging

default_logging()


class TestCosine(TestCase):
    def test_schedule(self):
        self.assertEqual(cosine_lr(0, 100, 0.01), 0.01)
        self.assertAlmostEqual(cosine_lr(50, 100, 0.01, 0.001), 0.0055)
        self.assertEqual(cosine_lr(100, 100, 0.01, 0.001), 0.001)
        self.assertEqual(cosine_lr(500, 100, 0.01), 0.0)
        self.assertAlmostEqual(cosine_lr(50, 100, 3e-5), 1.5e-5, places=15)

    def test_monotonic(self):
        lrs = [cosine_lr(s, 20, 1.0) for s in range(21)]
        self.assertEqual(lrs, sorted(lrs, reverse=True))

    def test_warmup(self):
        self.assertAlmostEqual(cosine_lr(0, 100, 0.01, warmup_steps=4), 0.0025)
        self.assertAlmostEqual(cosine_lr(3, 100, 0.01, warmup_steps=4), 0.01)

    def test_invalid(self):
        with self.assertRaises(ValueError):
            cosine_lr(0, 0, 0.01)
        with self.assertRaises(ValueError):
            cosine_lr(-1, 10, 0.01)


class TestTrainConfig(TestCase):
    def test_defaults(self):
        c = TrainConfig()
        self.assertEqual((c.lr0, c.momentum, c.tau, c.resolution), (3e-5, 0.843, 5, 640))

    def test_invalid(self):
        for bad in ({'lr0': 0}, {'tau': 0}, {'resolution': 100}, {'total_steps': 0},
                    {'warmup_steps': 5, 'total_steps': 4}, {'lr_min': 1.0}):
            with self.assertRaises(ConfigError):
                TrainConfig(**bad)


class PipelineTestCase(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.config = tiny_config()
        cls.data = TestDataset(cls.config)
        cls.videos = load_videos(load_index(cls.data.index_path, TRAIN))

    @classmethod
    def tearDownClass(cls):
        cls.data.cleanup()

    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix='stdd_test_')

    def tearDown(self):
        shutil.rmtree(self.dir)


class TestClipDataset(PipelineTestCase):
    def test_items(self):
        dataset = ClipDataset(self.videos, 4, 3, 64, self.config.augment, seed=7)
        self.assertEqual(len(dataset), 4)
        frames, annotations = dataset[2]
        self.assertEqual(tuple(frames.shape), (3, 3, 64, 64))
        self.assertEqual(len(annotations), 3)
        again, _ = dataset[2]
        self.assertTrue(torch.equal(frames, again))
        other, _ = ClipDataset(self.videos, 4, 3, 64, self.config.augment, seed=8)[2]
        self.assertFalse(torch.equal(frames, other))

    def test_needs_annotations(self):
        empty = [v._replace(annotations=[[] for _ in v.annotations]) for v in self.videos]
        with self.assertRaises(NoAnnotatedFrames):
            ClipDataset(empty, 1, 3, 64, self.config.augment, 0)


class TestTrain(PipelineTestCase):
    def test_deterministic(self):
        a = train(self.config, self.videos)
        b = train(self.config, self.videos)
        self.assertEqual(len(a.history), 3)
        self.assertEqual(a.history, b.history)
        self.assertIsNone(a.checkpoint)
        for r in a.history:
            self.assertTrue(math.isfinite(r.loss_total))
            self.assertAlmostEqual(r.loss_total, r.loss_obj + r.loss_cls + r.loss_loc, places=4)
        self.assertEqual([r.lr for r in a.history], [cosine_lr(s, 3, 1e-3) for s in range(3)])

    def test_seed_changes_run(self):
        a = train(self.config, self.videos)
        b = train(self.config.replace('train', seed=1), self.videos)
        self.assertNotEqual(a.history, b.history)

    def test_accumulation(self):
        config = self.config.replace('train', accumulation_steps=2, total_steps=2)
        self.assertEqual(len(train(config, self.videos).history), 2)

    def test_outputs(self):
        result = train(self.config, self.videos, self.dir)
        self.assertEqual(result.checkpoint, os.path.join(self.dir, CHECKPOINT_FILE))
        self.assertEqual(read_loss_history(os.path.join(self.dir, LOSS_HISTORY_FILE)), result.history)
        with self.assertRaises(ValueError):
            train(self.config, self.videos, self.dir)
        train(self.config, self.videos, self.dir, force=True)


class TestCheckpoint(PipelineTestCase):
    def test_round_trip(self):
        torch.manual_seed(3)
        model = build_model(self.config).eval()
        path = save_checkpoint(os.path.join(self.dir, CHECKPOINT_FILE), model, self.config, 12)
        checkpoint = load_checkpoint(path)
        self.assertEqual(checkpoint.step, 12)
        self.assertEqual(checkpoint.config_hash, self.config.hash)
        restored = restore_model(checkpoint, self.config)
        x = torch.rand(1, 3, 3, 64, 64)
        with torch.no_grad():
            for a, b in zip(model(x), restored(x)):
                self.assertTrue(torch.equal(a.raw, b.raw))

    def test_force(self):
        model = build_model(self.config)
        path = save_checkpoint(os.path.join(self.dir, 'c'), model, self.config, 1)
        with self.assertRaises(ValueError):
            save_checkpoint(path, model, self.config, 2)
        save_checkpoint(path, model, self.config, 2, force=True)
        self.assertEqual(load_checkpoint(path).step, 2)

    def test_corrupt(self):
        path = save_checkpoint(os.path.join(self.dir, 'c'), build_model(self.config), self.config, 1)
        with open(path, 'rb') as f:
            data = f.read()
        truncated = os.path.join(self.dir, 'truncated')
        with open(truncated, 'wb') as f:
            f.write(data[:-16])
        with self.assertRaises(CheckpointError):
            load_checkpoint(truncated)

        garbage = os.path.join(self.dir, 'garbage')
        with open(garbage, 'wb') as f:
            f.write(b"not a checkpoint")
        with self.assertRaises(CheckpointError):
            load_checkpoint(garbage)

        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.dir, 'missing'))

    def test_wrong_config(self):
        path = save_checkpoint(os.path.join(self.dir, 'c'), build_model(self.config), self.config, 1)
        other = self.config.replace('head', neck_channels=16)
        with self.assertRaises(CheckpointError):
            restore_model(load_checkpoint(path), other)


class TestInference(PipelineTestCase):
    def setUp(self):
        super().setUp()
        torch.manual_seed(0)
        self.model = build_model(self.config)
        self.entry = load_index(self.data.index_path, TEST).entries[0]

    def test_every_frame_once(self):
        video = VideoFrames.from_entry(self.entry)
        dets = infer_video(self.model, video, 3, 64, conf_thresh=0.0)
        self.assertEqual(sorted(set(d.frame_index for d in dets)), list(range(12)))
        keys = [(d.frame_index, -d.confidence) for d in dets]
        self.assertEqual(keys, sorted(keys))
        for d in dets:
            self.assertTrue(0 <= d.box.x1 < d.box.x2 <= video.meta.width)
            self.assertTrue(0 <= d.box.y1 < d.box.y2 <= video.meta.height)

    def test_padded_last_window(self):
        meta = self.entry.meta._replace(frame_count=11)
        dets = infer_video(self.model, VideoFrames(self.entry.path, meta), 3, 64, conf_thresh=0.0)
        self.assertEqual(sorted(set(d.frame_index for d in dets)), list(range(11)))

    def test_infer_index(self):
        index = load_index(self.data.index_path, TEST)
        records = infer_index(self.model, index, 3, 64, conf_thresh=0.5)
        self.assertTrue(all(r.video_id == self.entry.video_id for r in records))


class TestBenchmark(TestCase):
    def test_benchmark(self):
        model = build_model(tiny_config())
        result = benchmark_fps(model, 64, num_frames=7, trials=2, warmup=1)
        self.assertEqual(result.num_frames, 9)
        self.assertEqual(len(result.trials), 2)
        self.assertGreater(result.fps, 0)
        self.assertEqual((result.resolution, result.tau), (64, 3))

    def test_bad_arguments(self):
        model = build_model(tiny_config())
        with self.assertRaises(ValueError):
            benchmark_fps(model, 100)
        with self.assertRaises(ValueError):
            benchmark_fps(model, 64, trials=0)


class TestGradCheck(TestCase):
    def test_linear(self):
        a = torch.tensor([0.5, -2.0, 3.0], dtype=torch.float64)
        self.assertLess(grad_check(lambda x: (a * x).sum(), torch.randn(3, dtype=torch.float64)), 1e-8)

    def test_quadratic(self):
        torch.manual_seed(0)
        self.assertLess(grad_check(lambda x: (x ** 2).sum(), torch.randn(5, dtype=torch.float64)), 1e-6)

    def test_correct_gradient(self):
        point = torch.tensor([0.5, -1.5, 2.0], dtype=torch.float64)
        self.assertLess(grad_check(lambda x: (x ** 3).sum(), point), 1e-6)

    def test_several_arguments(self):
        a = torch.tensor([1.0, 2.0], dtype=torch.float64)
        b = torch.tensor([3.0, -1.0], dtype=torch.float64)
        self.assertLess(grad_check(lambda x, y: (x * y).sum() + (x ** 2).sum(), (a, b)), 1e-6)

    def test_wrong_gradient(self):
        point = torch.tensor([1.0, 2.0], dtype=torch.float64)
        self.assertGreater(grad_check(lambda x: (x * x.detach()).sum(), point), 0.4)

    def test_epsilon(self):
        with self.assertRaises(ValueError):
            grad_check(lambda x: x.sum(), torch.zeros(1, dtype=torch.float64), epsilon=0)

    def test_floor(self):
        # Analytic 1e-6 against numeric 2e-6: both under the default floor
        def f(x):
            return 1e-6 * (x * x.detach()).sum()

        point = torch.tensor([1.0], dtype=torch.float64)
        self.assertLess(grad_check(f, point), 1e-2)
        self.assertGreater(grad_check(f, point, floor=1e-12), 0.4)
        with self.assertRaises(ValueError):
            grad_check(f, point, floor=0)
