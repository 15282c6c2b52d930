import os
import shutil
import tempfile
from unittest import TestCase

import cv2
import numpy as np

from STDD.boxes import Box, GroundTruth, VideoMeta
from STDD.dataio import (Clip, DatasetIndex, IndexEntry, IndexFileError, AnnotationError, NoAnnotatedFrames,
                         VideoFrames, load_annotations, write_annotations, load_index, write_index,
                         sliding_windows, window_indices, sample_train_clip, read_window, resize_clip)
from STDD.shared import ANNOTATION_HEADER
from STDD.test_logging import default_logging

default_logging()


class FakeVideo(object):
    """
    In-memory video: frame i is filled with the value i / 255
    """
    def __init__(self, frame_count, size=8):
        self.meta = VideoMeta("fake", frame_count, size, size, 30)
        self.size = size

    @property
    def frame_count(self):
        return self.meta.frame_count

    def read(self, indices):
        return np.stack([np.full((self.size, self.size, 3), i / 255.0, dtype=np.float32) for i in indices])


def gts_on(frame_count, annotated):
    return [[GroundTruth(Box(1, 1, 3, 3, i))] if i in annotated else [] for i in range(frame_count)]


class TestWindows(TestCase):
    def test_sliding_windows(self):
        self.assertEqual(sliding_windows(10, 5), [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]])
        self.assertEqual(sliding_windows(5, 5), [[0, 1, 2, 3, 4]])
        self.assertEqual(sliding_windows(7, 5), [[0, 1, 2, 3, 4], [5, 6, 6, 6, 6]])

    def test_partition(self):
        for n in range(1, 30):
            for tau in range(1, 8):
                windows = sliding_windows(n, tau)
                self.assertTrue(all(len(w) == tau for w in windows))
                starts = [i for w in windows for i in sorted(set(w))]
                self.assertEqual(starts, list(range(n)))

    def test_window_indices_pad(self):
        self.assertEqual(window_indices(0, 5, 3), [0, 1, 2, 2, 2])


class TestSampleTrainClip(TestCase):
    def test_tau_1(self):
        video = FakeVideo(10)
        anns = gts_on(10, {4})
        clip = sample_train_clip(video, anns, 1, np.random.default_rng(0))
        self.assertEqual(clip.frame_indices, [4])
        self.assertEqual(len(clip.annotations[0]), 1)

    def test_deterministic(self):
        video = FakeVideo(10)
        anns = gts_on(10, set(range(10)))
        a = sample_train_clip(video, anns, 5, np.random.default_rng(3))
        b = sample_train_clip(video, anns, 5, np.random.default_rng(3))
        self.assertEqual(a.frame_indices, b.frame_indices)
        self.assertTrue(np.array_equal(a.frames, b.frames))

    def test_short_video_padded(self):
        video = FakeVideo(3)
        clip = sample_train_clip(video, gts_on(3, {0}), 5, np.random.default_rng(0))
        self.assertEqual(clip.frame_indices, [0, 1, 2, 2, 2])
        self.assertEqual(clip.tau, 5)

    def test_always_annotated(self):
        video = FakeVideo(20)
        anns = gts_on(20, {17})
        rng = np.random.default_rng(1)
        starts = set()
        for _ in range(50):
            clip = sample_train_clip(video, anns, 4, rng)
            self.assertIn(17, clip.frame_indices)
            starts.add(clip.frame_indices[0])
        self.assertEqual(starts, {14, 15, 16})

    def test_no_annotations(self):
        with self.assertRaises(NoAnnotatedFrames):
            sample_train_clip(FakeVideo(5), gts_on(5, set()), 3, np.random.default_rng(0))

    def test_read_window_and_resize(self):
        video = FakeVideo(4, size=16)
        clip = read_window(video, gts_on(4, {1}), [0, 1])
        small = resize_clip(clip, 8)
        self.assertEqual(small.frames.shape, (2, 8, 8, 3))
        self.assertEqual(small.annotations[1][0].box, Box(0.5, 0.5, 1.5, 1.5, 1))
        self.assertEqual((small.meta.width, small.meta.height), (8, 8))
        self.assertIs(resize_clip(clip, 16), clip)


class TestAnnotations(TestCase):
    meta = VideoMeta("v", 5, 640, 640, 30)

    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def write(self, text):
        path = os.path.join(self.dir, "a.csv")
        with open(path, 'w') as f:
            f.write(text)
        return path

    def test_empty_file(self):
        anns = load_annotations(self.write(""), self.meta)
        self.assertEqual(list(anns), [[]] * 5)

    def test_row(self):
        anns = load_annotations(self.write(ANNOTATION_HEADER + "\n0,10,20,30,40,0\n"), self.meta)
        self.assertEqual(anns[0], [GroundTruth(Box(10, 20, 30, 40, 0), 0)])
        self.assertEqual(anns[1:], [[]] * 4)

    def test_duplicates(self):
        text = ANNOTATION_HEADER + "\n0,10,20,30,40,0\n0,10,20,30,40,0\n2,1,1,5,5,0\n"
        anns = load_annotations(self.write(text), self.meta)
        self.assertEqual(len(anns[0]), 1)
        self.assertEqual(anns.duplicates, 1)

    def test_duplicate_box_other_class(self):
        text = ANNOTATION_HEADER + "\n0,10,20,30,40,1\n0,10,20,30,40,0\n1,10,20,30,40,0\n"
        anns = load_annotations(self.write(text), self.meta)
        self.assertEqual(anns[0], [GroundTruth(Box(10, 20, 30, 40, 0), 1)])
        self.assertEqual(len(anns[1]), 1)
        self.assertEqual(anns.duplicates, 1)

    def test_blank_lines_before_header(self):
        anns = load_annotations(self.write("\n  \n" + ANNOTATION_HEADER + "\n\n0,10,20,30,40,0\n"), self.meta)
        self.assertEqual(anns[0], [GroundTruth(Box(10, 20, 30, 40, 0), 0)])
        with self.assertRaises(AnnotationError) as cm:
            load_annotations(self.write("\n0,10,20,30,40,0\n"), self.meta)
        self.assertEqual(cm.exception.line_number, 2)

    def test_clamped_and_dropped(self):
        text = ANNOTATION_HEADER + "\n0,630,0,700,10,0\n1,700,700,800,800,0\n"
        anns = load_annotations(self.write(text), self.meta)
        self.assertEqual(anns[0][0].box, Box(630, 0, 640, 10, 0))
        self.assertEqual(anns[1], [])
        self.assertEqual((anns.clamped, anns.dropped), (1, 1))

    def test_malformed(self):
        with self.assertRaises(AnnotationError) as cm:
            load_annotations(self.write(ANNOTATION_HEADER + "\n0,10,20,30,40,0\n1,2,3\n"), self.meta)
        self.assertEqual(cm.exception.line_number, 3)
        with self.assertRaises(AnnotationError):
            load_annotations(self.write("0,10,20,30,40,0\n"), self.meta)
        with self.assertRaises(AnnotationError):
            load_annotations(self.write(ANNOTATION_HEADER + "\n9,10,20,30,40,0\n"), self.meta)
        with self.assertRaises(AnnotationError):
            load_annotations(self.write(ANNOTATION_HEADER + "\n0,10,20,10,40,0\n"), self.meta)

    def test_write_sorted(self):
        per_frame = [[GroundTruth(Box(5, 5, 6.5, 7, 0))], [], [GroundTruth(Box(1, 1, 2, 2, 2), 1)]]
        path = os.path.join(self.dir, "b.csv")
        self.assertEqual(write_annotations(path, [per_frame[2], per_frame[0]]), 2)
        with open(path) as f:
            self.assertEqual(f.read(), ANNOTATION_HEADER + "\n0,5,5,6.5,7,0\n2,1,1,2,2,1\n")
        anns = load_annotations(path, VideoMeta("v", 3, 10, 10, 30))
        self.assertEqual(list(anns), per_frame)


class TestIndex(TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def entry(self, video_id, split):
        return IndexEntry(video_id, os.path.join(self.dir, video_id), os.path.join(self.dir, video_id + ".csv"),
                          VideoMeta(video_id, 3, 4, 4, 25), split)

    def test_round_trip(self):
        entries = [self.entry("v10", "test"), self.entry("v2", "train"), self.entry("v1", "train")]
        path = os.path.join(self.dir, "index.json")
        write_index(path, entries)
        index = load_index(path)
        self.assertEqual(index.video_ids(), ["v1", "v2", "v10"])
        self.assertEqual(load_index(path, "train").video_ids(), ["v1", "v2"])
        self.assertEqual(list(load_index(path, "test"))[0], entries[0])

    def test_duplicate_ids(self):
        with self.assertRaises(IndexFileError):
            DatasetIndex([self.entry("a", "train"), self.entry("a", "train")])
        DatasetIndex([self.entry("a", "train"), self.entry("a", "test")])

    def test_bad_index(self):
        path = os.path.join(self.dir, "index.json")
        with open(path, 'w') as f:
            f.write("{}")
        with self.assertRaises(IndexFileError):
            load_index(path)
        write_index(path, [self.entry("a", "train")])
        with self.assertRaises(IndexFileError):
            load_index(path, "holdout")


class TestVideoFrames(TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def test_read(self):
        rgb = np.zeros((4, 6, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        cv2.imwrite(os.path.join(self.dir, "000000.png"), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
        cv2.imwrite(os.path.join(self.dir, "000001.png"), np.full((4, 6), 51, dtype=np.uint8))
        video = VideoFrames(self.dir, VideoMeta("v", 2, 6, 4, 30))
        frames = video.read([0, 1])
        self.assertEqual(frames.shape, (2, 4, 6, 3))
        self.assertEqual(frames.dtype, np.float32)
        self.assertTrue(np.all(frames[0, ..., 0] == 1.0))
        self.assertTrue(np.all(frames[0, ..., 1:] == 0.0))
        self.assertTrue(np.allclose(frames[1], 0.2))
        with self.assertRaises(IndexError):
            video.read([2])

    def test_clip_shape(self):
        clip = Clip(np.zeros((3, 4, 5, 3)), [0, 1, 2], [[], [], []], VideoMeta("v", 3, 5, 4, 30))
        self.assertEqual((clip.tau, clip.height, clip.width), (3, 4, 5))
