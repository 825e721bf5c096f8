"""Residual block and attention module tests, including the recomposition
oracles and the (1 + S) * F algebra."""

import numpy as np
import pytest

from voxseg import autodiff as ad
from voxseg.autodiff import Tape, Tensor, backward, sum_all
from voxseg.blocks import (
    AttentionModule,
    AttentionModuleSpec,
    ResidualBlock,
    ResidualBlockSpec,
    SoftMask,
)
from voxseg.errors import ShapeError
from voxseg.gradcheck import check_gradients


def rand(shape, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


def zero_residual_path(block):
    for conv in (block.conv1, block.conv2, block.conv3):
        conv.w.data[:] = 0.0
        conv.b.data[:] = 0.0


class TestResidualBlock:
    def test_zero_residual_path_is_identity(self):
        rng = np.random.default_rng(0)
        block = ResidualBlock(ResidualBlockSpec(4, 4), ndim=2, rng=rng)
        zero_residual_path(block)
        x = Tensor(rand((1, 4, 8, 8), seed=1))
        out = block.forward(x, mode="train")
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_input_zero_biases_gives_zero(self):
        rng = np.random.default_rng(2)
        for in_ch, out_ch in [(4, 4), (3, 5)]:
            block = ResidualBlock(ResidualBlockSpec(in_ch, out_ch), ndim=2, rng=rng)
            x = Tensor(np.zeros((1, in_ch, 6, 6), dtype=np.float32))
            out = block.forward(x, mode="train")
            np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_projection_only_when_channels_differ(self):
        rng = np.random.default_rng(3)
        assert ResidualBlock(ResidualBlockSpec(4, 4), 2, rng).proj is None
        assert ResidualBlock(ResidualBlockSpec(4, 8), 2, rng).proj is not None

    def test_output_shape(self):
        rng = np.random.default_rng(4)
        block = ResidualBlock(ResidualBlockSpec(3, 7), ndim=3, rng=rng)
        out = block.forward(Tensor(rand((1, 3, 4, 6, 6), seed=5)))
        assert out.shape == (1, 7, 4, 6, 6)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        block = ResidualBlock(ResidualBlockSpec(4, 4), ndim=2, rng=rng)
        with pytest.raises(ShapeError):
            block.forward(Tensor(rand((1, 3, 8, 8))))

    def test_recomposition_oracle(self):
        # the block must equal its constituent operators applied one by one
        rng = np.random.default_rng(6)
        block = ResidualBlock(ResidualBlockSpec(1, 3), ndim=2, rng=rng)
        x = Tensor(rand((1, 1, 8, 8), seed=7))
        out = block.forward(x, mode="train")

        h = ad.batch_norm(x, block.bn1.gamma, block.bn1.beta, block.bn1.state, "train")
        h = ad.conv(ad.relu(h), block.conv1.w, block.conv1.b)
        h = ad.batch_norm(h, block.bn2.gamma, block.bn2.beta, block.bn2.state, "train")
        h = ad.conv(ad.relu(h), block.conv2.w, block.conv2.b)
        h = ad.batch_norm(h, block.bn3.gamma, block.bn3.beta, block.bn3.state, "train")
        h = ad.conv(ad.relu(h), block.conv3.w, block.conv3.b)
        expected = ad.add(ad.conv(x, block.proj.w, block.proj.b), h)
        np.testing.assert_array_equal(out.data, expected.data)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        block = ResidualBlock(ResidualBlockSpec(2, 3), ndim=2, rng=rng, dtype=np.float64)
        x = Tensor(rand((1, 2, 4, 4), seed=9, dtype=np.float64), requires_grad=True)
        params = dict(block.parameters(), x=x)
        check_gradients(
            lambda: sum_all(ad.sigmoid(block.forward(x, mode="train"))),
            params,
            max_coords=6,
            seed=1,
        )


class TestSoftMask:
    def test_depth_zero_is_tail_only(self):
        rng = np.random.default_rng(10)
        mask = SoftMask(3, depth=0, ndim=2, rng=rng)
        x = Tensor(rand((1, 3, 5, 5), seed=11))
        out = mask.forward(x)
        expected = ad.sigmoid(mask.tail2.forward(mask.tail1.forward(x)))
        np.testing.assert_array_equal(out.data, expected.data)
        assert out.shape == x.shape

    def test_zero_tail_gives_half(self):
        rng = np.random.default_rng(12)
        mask = SoftMask(2, depth=1, ndim=2, rng=rng)
        for conv in (mask.tail1, mask.tail2):
            conv.w.data[:] = 0.0
            conv.b.data[:] = 0.0
        out = mask.forward(Tensor(rand((1, 2, 8, 8), seed=13)))
        np.testing.assert_array_equal(out.data, np.full_like(out.data, 0.5))

    def test_depth_two_resolution_trace(self):
        rng = np.random.default_rng(14)
        mask = SoftMask(2, depth=2, ndim=2, rng=rng)
        assert mask.trace((16, 16)) == [(8, 8), (4, 4), (16, 16)]
        # executed shapes agree with the trace
        x = Tensor(rand((1, 2, 16, 16), seed=15))
        h = x
        seen = []
        for block in mask.encoder:
            h = block.forward(ad.max_pool(h, window=2), "train")
            seen.append(h.shape[2:])
        out = mask.forward(x)
        seen.append(out.shape[2:])
        assert seen == [(8, 8), (4, 4), (16, 16)]

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(16)
        mask = SoftMask(2, depth=1, ndim=3, rng=rng)
        for seed in range(3):
            out = mask.forward(Tensor(rand((1, 2, 4, 4, 4), seed=seed) * 10.0))
            assert out.data.min() >= 0.0
            assert out.data.max() <= 1.0

    def test_indivisible_extent_rejected(self):
        rng = np.random.default_rng(17)
        mask = SoftMask(2, depth=2, ndim=2, rng=rng)
        with pytest.raises(ShapeError, match="divisible by 4"):
            mask.forward(Tensor(rand((1, 2, 6, 6), seed=18)))


class TestAttentionModule:
    def test_injected_zero_mask_equals_trunk_bitwise(self):
        rng = np.random.default_rng(19)
        module = AttentionModule(AttentionModuleSpec(3, depth=1), ndim=2, rng=rng)
        x = Tensor(rand((1, 3, 8, 8), seed=20))
        trunk = module.trunk_forward(x, "train")
        out = module.forward(x, "train", mask_override=0.0)
        np.testing.assert_array_equal(out.data, trunk.data)

    def test_injected_unit_mask_doubles_trunk(self):
        rng = np.random.default_rng(21)
        module = AttentionModule(AttentionModuleSpec(3, depth=1), ndim=2, rng=rng)
        x = Tensor(rand((1, 3, 8, 8), seed=22))
        trunk = module.trunk_forward(x, "train")
        out = module.forward(x, "train", mask_override=1.0)
        np.testing.assert_array_equal(out.data, 2.0 * trunk.data)

    def test_recomposition_oracle(self):
        rng = np.random.default_rng(23)
        module = AttentionModule(AttentionModuleSpec(2, depth=1), ndim=3, rng=rng)
        x = Tensor(rand((1, 2, 4, 4, 4), seed=24))
        out = module.forward(x, "train")
        trunk = module.trunk_forward(x, "train")
        gate = module.mask.forward(x, "train")
        expected = (1.0 + gate.data) * trunk.data
        np.testing.assert_array_equal(out.data, expected)

    def test_bounded_by_twice_trunk_and_sign_preserved(self):
        rng = np.random.default_rng(25)
        module = AttentionModule(AttentionModuleSpec(2, depth=1), ndim=2, rng=rng)
        for seed in range(3):
            x = Tensor(rand((1, 2, 8, 8), seed=seed))
            out = module.forward(x, "train").data
            trunk = module.trunk_forward(x, "train").data
            assert np.all(np.abs(out) <= 2.0 * np.abs(trunk) + 1e-6)
            nz = trunk != 0
            assert np.all(np.sign(out[nz]) == np.sign(trunk[nz]))

    def test_gradient_flows_through_both_branches(self):
        rng = np.random.default_rng(26)
        module = AttentionModule(AttentionModuleSpec(2, depth=1), ndim=2, rng=rng)
        x = Tensor(rand((1, 2, 4, 4), seed=27), requires_grad=True)
        with Tape():
            loss = sum_all(module.forward(x, "train"))
        backward(loss)
        params = module.parameters()
        trunk_norm = sum(
            np.abs(p.grad).sum() for n, p in params.items() if n.startswith("trunk")
        )
        mask_norm = sum(
            np.abs(p.grad).sum() for n, p in params.items() if n.startswith("mask")
        )
        assert trunk_norm > 0.0
        assert mask_norm > 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(28)
        module = AttentionModule(
            AttentionModuleSpec(2, depth=1), ndim=2, rng=rng, dtype=np.float64
        )
        x = Tensor(rand((1, 2, 4, 4), seed=29, dtype=np.float64), requires_grad=True)
        params = dict(module.parameters(), x=x)
        check_gradients(
            lambda: sum_all(ad.sigmoid(module.forward(x, "train"))),
            params,
            max_coords=4,
            seed=2,
        )

    def test_parameter_names_stable_and_unique(self):
        rng = np.random.default_rng(30)
        module = AttentionModule(AttentionModuleSpec(2, depth=2), ndim=2, rng=rng)
        names = list(module.parameters())
        assert len(names) == len(set(names))
        assert "trunk1.conv2.w" in names
        assert "mask.enc1.bn1.gamma" in names
        assert "mask.tail2.b" in names
