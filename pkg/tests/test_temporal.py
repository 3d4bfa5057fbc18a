import numpy as np
import pytest
import torch

from crossview_reid.errors import ConfigError
from crossview_reid.temporal import (
    MotionGate,
    TemporalPyramid,
    frame_diff,
    temporal_stream,
)

from helpers import (
    finite_difference_check,
    oracle_motion_gate,
    oracle_stream,
    oracle_temporal_pyramid,
)


def rand_tokens(t=3, n=2, d=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(t, n, d, dtype=torch.float64, generator=gen)


def make_motion_gate(d=4, seed=0, randomize=False, bias=10.0):
    gen = torch.Generator().manual_seed(seed)
    mod = MotionGate(d, motion_rank=3, gate_rank=3, gate_bias_init=bias,
                     gen=gen, dtype=torch.float64)
    if randomize:
        with torch.no_grad():
            for p in mod.parameters():
                p.normal_(0.0, 0.6, generator=gen)
    return mod


def make_pyramid(d=4, seed=0, randomize=False, injection="residual-on-tokens"):
    gen = torch.Generator().manual_seed(seed)
    mod = TemporalPyramid(d, proj_rank=3, fusion_hidden=3, injection=injection,
                          gen=gen, dtype=torch.float64)
    if randomize:
        with torch.no_grad():
            for p in mod.parameters():
                p.normal_(0.0, 0.6, generator=gen)
    return mod


class TestFrameDiff:
    def test_constant_sequence_is_zero(self):
        tokens = torch.ones(4, 2, 3, dtype=torch.float64)
        assert torch.equal(frame_diff(tokens), torch.zeros_like(tokens))

    def test_single_frame_boundary(self):
        tokens = rand_tokens(t=1)
        assert torch.equal(frame_diff(tokens), torch.zeros_like(tokens))

    def test_scalar_sequence(self):
        tokens = torch.tensor([1.0, 4.0, 9.0], dtype=torch.float64).reshape(3, 1, 1)
        expected = torch.tensor([0.0, 3.0, 5.0], dtype=torch.float64).reshape(3, 1, 1)
        assert torch.equal(frame_diff(tokens), expected)

    def test_shift_equivariance(self):
        tokens = rand_tokens(t=4)
        shift = rand_tokens(t=1, seed=5)[0]
        shifted = tokens + shift
        assert torch.allclose(
            frame_diff(tokens)[1:], frame_diff(shifted)[1:], atol=1e-12
        )


class TestMotionGate:
    def test_identity_at_init(self):
        mod = make_motion_gate()
        tokens = rand_tokens()
        assert (mod(tokens) - tokens).abs().max() < 1e-3

    def test_forced_zero_gate_returns_motion(self):
        mod = make_motion_gate(bias=-500.0)
        with torch.no_grad():
            mod.motion_enc.up.weight.normal_(0, 1, generator=torch.Generator().manual_seed(1))
        tokens = rand_tokens()
        out = mod(tokens)
        delta = frame_diff(tokens)
        motion = mod.motion_enc(delta)
        assert torch.allclose(out, motion, atol=1e-12)

    def test_matches_straight_line_oracle(self):
        for trial in range(20):
            mod = make_motion_gate(seed=trial, randomize=True)
            tokens = rand_tokens(seed=trial + 30)
            out = mod(tokens)
            expected = oracle_motion_gate(tokens.numpy(), mod)
            np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-9)

    def test_gradients(self):
        mod = make_motion_gate(randomize=True)
        tokens = rand_tokens()
        probe = rand_tokens(seed=77)

        def fn():
            return (mod(tokens) * probe).sum()

        finite_difference_check(fn, list(mod.parameters()))


class TestTemporalStream:
    def test_scale_one_is_identity(self):
        seq = torch.randn(8, 4, dtype=torch.float64)
        assert torch.equal(temporal_stream(seq, 1), seq)

    def test_whole_clip_mean_broadcast(self):
        seq = torch.arange(1.0, 9.0, dtype=torch.float64).unsqueeze(-1)
        out = temporal_stream(seq, 8)
        assert torch.allclose(out, torch.full_like(out, 4.5))

    def test_golden_vector_scale_two(self):
        # Hand evaluation of the block-center interpolation rule.
        seq = torch.arange(1.0, 9.0, dtype=torch.float64).unsqueeze(-1)
        expected = torch.tensor(
            [1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 7.5], dtype=torch.float64
        ).unsqueeze(-1)
        assert torch.allclose(temporal_stream(seq, 2), expected, atol=1e-12)

    def test_constant_input_fixed_point(self):
        seq = torch.full((8, 3), 2.5, dtype=torch.float64)
        for s in (1, 2, 4, 8):
            assert torch.allclose(temporal_stream(seq, s), seq, atol=1e-12)

    def test_invalid_scale(self):
        with pytest.raises(ConfigError):
            temporal_stream(torch.zeros(8, 2, dtype=torch.float64), 3)

    @pytest.mark.parametrize("t", [1, 3, 5, 8, 11])
    @pytest.mark.parametrize("scale", [2, 4, 8])
    def test_matches_loop_oracle_on_ragged_lengths(self, t, scale):
        gen = torch.Generator().manual_seed(t * 10 + scale)
        seq = torch.randn(t, 3, dtype=torch.float64, generator=gen)
        out = temporal_stream(seq, scale)
        np.testing.assert_allclose(out.numpy(), oracle_stream(seq.numpy(), scale), atol=1e-12)


class TestTemporalPyramid:
    def test_identity_at_init(self):
        mod = make_pyramid()
        tokens = rand_tokens(t=8)
        out, _, _ = mod(tokens)
        assert (out - tokens).abs().max() < 1e-6

    def test_constant_clip_collapses_streams(self):
        mod = make_pyramid(randomize=True)
        frame = rand_tokens(t=1, seed=4)[0]
        tokens = frame.expand(8, *frame.shape).clone()
        per_frame = tokens.mean(dim=-2)
        base = temporal_stream(per_frame, 1)
        for s in (2, 4, 8):
            assert torch.allclose(temporal_stream(per_frame, s), base, atol=1e-12)
        out, _, _ = mod(tokens)
        residual = out - tokens
        # identical residual broadcast to every frame and token
        assert torch.allclose(residual, residual[0, 0].expand_as(residual), atol=1e-9)

    def test_matches_straight_line_oracle(self):
        for trial in range(20):
            mod = make_pyramid(seed=trial, randomize=True)
            tokens = rand_tokens(t=8, seed=trial + 60)
            out, descs, _ = mod(tokens)
            exp_out, exp_descs = oracle_temporal_pyramid(tokens.numpy(), mod)
            np.testing.assert_allclose(out.detach().numpy(), exp_out, atol=1e-9)
            np.testing.assert_allclose(descs.detach().numpy(), exp_descs, atol=1e-9)

    def test_concat_mode_keeps_tokens_and_merges_descriptor(self):
        mod = make_pyramid(injection="concat-to-descriptor")
        tokens = rand_tokens(t=8)
        out, _, clip_vec = mod(tokens)
        assert torch.equal(out, tokens)
        pooled = tokens.mean(dim=(0, 1))
        merged = mod.merge_descriptor(pooled, clip_vec)
        assert torch.allclose(merged, pooled, atol=1e-12)  # identity at init

    def test_gradients(self):
        mod = make_pyramid(randomize=True)
        tokens = rand_tokens(t=4)
        probe = rand_tokens(t=4, seed=99)

        def fn():
            out, descs, _ = mod(tokens)
            return (out * probe).sum() + descs.sum()

        finite_difference_check(fn, list(mod.parameters()))
