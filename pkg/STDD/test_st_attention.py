from unittest import TestCase

import torch
import torch.nn as nn
from torch.func import functional_call

from STDD.pipeline import grad_check
from STDD.st_attention import (WindowGeometry, AttentionBranchConfig, GeometryError, NonFiniteInput,
                               WindowAttention3d, STBranch, cyclic_shift, reverse_cyclic_shift,
                               window_partition, window_merge, shifted_window_mask, relative_position_index,
                               window_msa, st_branch)
from STDD.backbone import FeaturePyramid, PaddingRequired
from STDD.shared import ConfigError
from STDD.test_logging import default_logging

default_logging()


class TestGeometry(TestCase):
    def test_defaults(self):
        g = WindowGeometry()
        self.assertEqual(g.patch, (8, 8, 5))
        self.assertEqual(g.shift, (4, 4, 0))
        self.assertEqual(g.tau, 5)
        self.assertEqual(g.window_size(5), (8, 8, 5))

    def test_invalid(self):
        with self.assertRaises(GeometryError):
            WindowGeometry(shift=(8, 4, 0))
        with self.assertRaises(GeometryError):
            WindowGeometry(window=3)
        with self.assertRaises(GeometryError):
            WindowGeometry(depth=0)
        with self.assertRaises(GeometryError):
            WindowGeometry(patch=(8, 8, 0))

    def test_both_depth_rows(self):
        a = AttentionBranchConfig(depth=3, shift=(4, 4, 2)).geometry(5)
        b = AttentionBranchConfig(depth=5, shift=(4, 4, 0)).geometry(5)
        self.assertEqual((a.depth, a.shift), (3, (4, 4, 2)))
        self.assertEqual((b.depth, b.shift), (5, (4, 4, 0)))

    def test_temporal_shift_dropped_for_short_clips(self):
        g = AttentionBranchConfig(shift=(4, 4, 2)).geometry(1)
        self.assertEqual(g.shift, (4, 4, 0))
        self.assertEqual(WindowGeometry((8, 8, 3), 8, (4, 4, 2)).shift_size(2), (4, 4, 0))

    def test_config_heads(self):
        with self.assertRaises(ConfigError):
            AttentionBranchConfig(embed_dims=(32, 30, 32), num_heads=4)


class TestWindows(TestCase):
    def test_partition_round_trip(self):
        x = torch.randn(2, 4, 8, 12, 3)
        windows = window_partition(x, (4, 4, 2))
        self.assertEqual(windows.shape, (2 * 2 * 2 * 3, 32, 3))
        self.assertTrue(torch.equal(window_merge(windows, (4, 4, 2), tuple(x.shape)), x))

    def test_partition_order(self):
        x = torch.arange(16, dtype=torch.float32).view(1, 1, 4, 4, 1)
        windows = window_partition(x, (2, 2, 1))
        self.assertEqual(windows[0, :, 0].tolist(), [0, 1, 4, 5])
        self.assertEqual(windows[1, :, 0].tolist(), [2, 3, 6, 7])

    def test_partition_needs_padding(self):
        with self.assertRaises(PaddingRequired):
            window_partition(torch.zeros(1, 1, 6, 8, 1), (4, 4, 1))

    def test_shift_round_trip(self):
        x = torch.randn(1, 3, 8, 8, 2)
        for shift in ((4, 4, 0), (1, 2, 1), (0, 0, 0)):
            self.assertTrue(torch.equal(reverse_cyclic_shift(cyclic_shift(x, shift), shift), x))

    def test_shift_direction(self):
        x = torch.zeros(1, 1, 8, 8, 1)
        x[0, 0, 0, 0, 0] = 1.0
        self.assertEqual(cyclic_shift(x, (4, 4, 0))[0, 0, 4, 4, 0].item(), 1.0)

    def test_mask(self):
        mask = shifted_window_mask((1, 8, 8), (4, 4, 1), (2, 2, 0))
        self.assertEqual(mask.shape, (4, 16, 16))
        self.assertTrue(torch.all(mask[3] == 0))
        self.assertTrue(torch.isinf(mask[0]).any())
        self.assertTrue(torch.all(mask.diagonal(dim1=1, dim2=2) == 0))
        self.assertIs(shifted_window_mask((1, 8, 8), (4, 4, 1), (2, 2, 0)), mask)

    def test_relative_position_index(self):
        index = relative_position_index((2, 3, 2))
        self.assertEqual(index.shape, (12, 12))
        self.assertEqual(int(index.max()), 3 * 3 * 5 - 1)
        self.assertEqual(int(index.min()), 0)
        self.assertEqual(len(set(index.diagonal().tolist())), 1)


class TestWindowAttention(TestCase):
    def setUp(self):
        torch.manual_seed(0)

    def test_rows_sum_to_one(self):
        attn = WindowAttention3d(8, 2, (4, 4, 2))
        x = torch.randn(2, 2, 8, 8, 8)
        for shift in ((0, 0, 0), (2, 2, 1)):
            out, weights = attn(x, shift, return_weights=True)
            self.assertEqual(out.shape, x.shape)
            self.assertTrue(torch.allclose(weights.sum(-1), torch.ones_like(weights.sum(-1)), atol=1e-6))

    def test_equals_dense_attention(self):
        """
        With a single window, window attention is plain multi-head attention
        """
        dim, heads = 8, 2
        mha = nn.MultiheadAttention(dim, heads, batch_first=True).double()
        x = torch.randn(3, 20, dim, dtype=torch.float64)
        dense, _ = mha(x, x, x)
        ours = window_msa(x, mha.in_proj_weight, mha.in_proj_bias, mha.out_proj.weight, mha.out_proj.bias, heads)
        self.assertTrue(torch.allclose(ours, dense, atol=1e-6))

    def test_windows_are_independent(self):
        attn = WindowAttention3d(4, 1, (4, 4, 1), relative_position_bias=False)
        x = torch.randn(1, 1, 4, 8, 4)
        with torch.no_grad():
            whole = attn(x)
            left = attn(x[:, :, :, :4].contiguous())
        self.assertTrue(torch.allclose(whole[:, :, :, :4], left, atol=1e-6))

    def test_mask_blocks_wrapped_tokens(self):
        attn = WindowAttention3d(8, 2, (4, 4, 1))
        x = torch.randn(1, 1, 8, 8, 8)
        _, weights = attn(x, (2, 2, 0), return_weights=True)
        mask = shifted_window_mask((1, 8, 8), (4, 4, 1), (2, 2, 0))
        blocked = torch.isinf(mask).unsqueeze(1).expand_as(weights)
        self.assertTrue(blocked.any())
        self.assertLessEqual(float(weights[blocked].abs().max()), 1e-8)

    def test_non_finite(self):
        attn = WindowAttention3d(4, 1, (2, 2, 1))
        x = torch.zeros(1, 1, 2, 2, 4)
        x[0, 0, 0, 0, 0] = float('nan')
        with self.assertRaises(NonFiniteInput):
            attn(x)


class TestSTBranch(TestCase):
    def setUp(self):
        torch.manual_seed(0)

    def test_shape_and_identity_at_init(self):
        geometry = WindowGeometry((4, 4, 3), 2, (2, 2, 1), depth=1)
        branch = STBranch(6, 8, geometry)
        x = torch.randn(2, 3, 6, 5, 7)
        y = branch(x)
        self.assertEqual(y.shape, x.shape)
        self.assertTrue(torch.equal(y, x))

    def test_wrong_tau(self):
        branch = STBranch(4, 4, WindowGeometry((4, 4, 3), 4, (2, 2, 0), depth=1))
        with self.assertRaises(GeometryError):
            branch(torch.zeros(1, 2, 4, 4, 4))

    def test_mixes_time(self):
        branch = STBranch(4, 4, WindowGeometry((4, 4, 2), 4, (2, 2, 0), depth=1))
        nn.init.normal_(branch.out_proj.weight)
        x = torch.randn(1, 2, 4, 4, 4)
        x2 = x.clone()
        x2[0, 1] = torch.randn(4, 4, 4)
        with torch.no_grad():
            a = branch(x)
            b = branch(x2)
        self.assertFalse(torch.allclose(a[0, 0], b[0, 0]))

    def test_st_branch_over_pyramids(self):
        branch = STBranch(4, 4, WindowGeometry((4, 4, 2), 4, (2, 2, 0), depth=1))
        pyramids = [FeaturePyramid(torch.randn(4, 4, 4), None, None) for _ in range(2)]
        out = st_branch(pyramids, 'p3', branch)
        self.assertEqual(out.shape, (2, 4, 4, 4))

    def test_gradient(self):
        geometry = WindowGeometry((4, 4, 2), 2, (1, 1, 1), depth=1)
        branch = STBranch(2, 4, geometry).double()
        nn.init.normal_(branch.out_proj.weight)
        weights = torch.randn(1, 2, 2, 4, 4, dtype=torch.float64)
        err = grad_check(lambda x: (branch(x) * weights).sum(), torch.randn(1, 2, 2, 4, 4, dtype=torch.float64))
        self.assertLess(err, 1e-4)

    def test_gradient_inputs_and_parameters(self):
        torch.manual_seed(3)
        branch = STBranch(4, 4, WindowGeometry((8, 8, 2), 4, (2, 2, 1), depth=1)).double()
        nn.init.normal_(branch.out_proj.weight)
        names = [name for name, _ in branch.named_parameters()]
        params = [p.detach() for _, p in branch.named_parameters()]
        weights = torch.randn(1, 2, 4, 8, 8, dtype=torch.float64)

        def loss(x, *values):
            return (functional_call(branch, dict(zip(names, values)), (x,)) * weights).sum()

        x = torch.randn(1, 2, 4, 8, 8, dtype=torch.float64)
        self.assertLess(grad_check(loss, [x] + params), 1e-4)
