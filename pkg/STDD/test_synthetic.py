import os
import shutil
import tempfile
from unittest import TestCase

import numpy as np

from STDD.boxes import to_center_form
from STDD.dataio import load_annotations, VideoFrames
from STDD.shared import TRAIN, VAL, TEST
from STDD.synthetic import (SyntheticConfig, SyntheticConfigError, SyntheticScene, generate_synthetic,
                            load_synthetic, assign_splits, video_id)
from STDD.test_logging import default_logging

default_logging()


def clean_config(**kwargs):
    defaults = dict(num_videos=3, frames_per_video=20, blur_probability=0.0, occlusion_probability=0.0)
    defaults.update(kwargs)
    return SyntheticConfig(**defaults)


class TestSyntheticConfig(TestCase):
    def test_target_too_big(self):
        with self.assertRaises(SyntheticConfigError):
            SyntheticConfig(resolution=(16, 16), target_size_range=((4, 3), (20, 8)))

    def test_default_targets_are_tiny(self):
        config = SyntheticConfig()
        frame_area = float(config.width * config.height)
        (min_w, min_h), (max_w, max_h) = config.target_size_range
        self.assertGreaterEqual(min_w * min_h / frame_area, 0.0005)
        self.assertLessEqual(max_w * max_h / frame_area, 0.005)

    def test_bad_probability(self):
        with self.assertRaises(SyntheticConfigError):
            SyntheticConfig(blur_probability=1.5)

    def test_bad_sizes(self):
        with self.assertRaises(SyntheticConfigError):
            SyntheticConfig(target_size_range=((8, 3), (4, 8)))
        with self.assertRaises(SyntheticConfigError):
            SyntheticConfig(target_size_range=((0, 3), (4, 8)))

    def test_splits(self):
        self.assertEqual(assign_splits(5, (0.6, 0.2, 0.2)), [TRAIN, TRAIN, TRAIN, VAL, TEST])
        self.assertEqual(assign_splits(2, (1.0, 0.0, 0.0)), [TRAIN, TRAIN])
        self.assertEqual(video_id(7), "video_007")


class TestSyntheticScene(TestCase):
    def test_every_frame_annotated(self):
        config = clean_config()
        for i in range(config.num_videos):
            anns = SyntheticScene(config, i).annotations()
            self.assertEqual(len(anns), config.frames_per_video)
            self.assertTrue(all(len(a) == 1 for a in anns))

    def test_sizes_within_range(self):
        config = clean_config(num_videos=10)
        (min_w, min_h), (max_w, max_h) = config.target_size_range
        for i in range(config.num_videos):
            for frame in SyntheticScene(config, i).annotations():
                for gt in frame:
                    self.assertTrue(min_w <= gt.box.width <= max_w)
                    self.assertTrue(min_h <= gt.box.height <= max_h)
                    self.assertTrue(0 <= gt.box.x1 and gt.box.x2 <= config.width)
                    self.assertTrue(0 <= gt.box.y1 and gt.box.y2 <= config.height)

    def test_centroid_matches_annotation(self):
        """
        The darkened pixels of each frame are centred on the annotated box
        """
        config = clean_config(num_videos=2)
        for i in range(config.num_videos):
            scene = SyntheticScene(config, i)
            for t, frame_gts in enumerate(scene.annotations()):
                diff = (scene.render(t, with_targets=False) - scene.render(t)).mean(axis=2)
                ys, xs = np.nonzero(diff > 0.05)
                self.assertTrue(len(xs) > 0)
                cx, cy, _, _ = to_center_form(frame_gts[0].box)
                self.assertLessEqual(abs(xs.mean() + 0.5 - cx), 1.0)
                self.assertLessEqual(abs(ys.mean() + 0.5 - cy), 1.0)

    def test_occlusion_gaps(self):
        config = clean_config(num_videos=4, frames_per_video=60, occlusion_probability=0.3)
        empty = sum(1 for i in range(4) for a in SyntheticScene(config, i).annotations() if not a)
        self.assertGreater(empty, 0)

    def test_blink_keeps_annotation(self):
        config = clean_config(num_videos=1, blink_probability=1.0)
        scene = SyntheticScene(config, 0)
        self.assertTrue(all(scene.annotations()))
        diff = (scene.render(0, with_targets=False) - scene.render(0)).mean(axis=2)
        self.assertLess(diff.max(), 0.3)

    def test_grayscale(self):
        frame = SyntheticScene(clean_config(grayscale=True, horizon=True), 0).render(3)
        self.assertEqual(frame.shape, (64, 64, 3))
        self.assertTrue(np.array_equal(frame[..., 0], frame[..., 2]))
        self.assertTrue(0.0 <= frame.min() and frame.max() <= 1.0)


class TestGenerateSynthetic(TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_generate(self):
        config = clean_config(num_videos=5, frames_per_video=6)
        out = os.path.join(self.dir, "a")
        summary = generate_synthetic(config, out)
        self.assertEqual(summary['num_videos'], 5)
        self.assertEqual(summary['splits'], {TRAIN: 3, VAL: 1, TEST: 1})

        index = load_synthetic(out)
        self.assertEqual(len(index), 5)
        recount = 0
        for entry in index:
            anns = load_annotations(entry.annotation_path, entry.meta)
            recount += sum(len(a) for a in anns)
            frames = VideoFrames.from_entry(entry).read([0, 5])
            self.assertEqual(frames.shape, (2, 64, 64, 3))
        self.assertEqual(recount, summary['num_objects'])
        self.assertEqual(load_synthetic(out, TEST).video_ids(), ["video_004"])

    def test_deterministic(self):
        config = clean_config(num_videos=2, frames_per_video=4, blur_probability=0.5)
        a = os.path.join(self.dir, "a")
        b = os.path.join(self.dir, "b")
        generate_synthetic(config, a)
        generate_synthetic(config, b)
        for sub in ("annotations/video_000.csv", "annotations/video_001.csv", "videos/video_001/000003.png"):
            with open(os.path.join(a, sub), 'rb') as f1, open(os.path.join(b, sub), 'rb') as f2:
                self.assertEqual(f1.read(), f2.read())

    def test_force(self):
        config = clean_config(num_videos=1, frames_per_video=2)
        generate_synthetic(config, self.dir)
        with self.assertRaises(ValueError):
            generate_synthetic(config, self.dir)
        generate_synthetic(config, self.dir, force=True)
