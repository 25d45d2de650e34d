import dataclasses

import numpy as np
import pytest
import torch

from latentdepth.core_types import ModelConfig, RgbImage
from latentdepth.param_init import seeded_init_
from latentdepth.semantic_encoder import (
    DilatedConvEnhance,
    ImageSemanticEncoder,
    PyramidDecoder,
    SpatialAttentionGate,
    _window_merge,
    _window_partition,
    spatial_attention,
)


def _build(cfg, seed=0):
    enc = ImageSemanticEncoder(cfg)
    seeded_init_(enc, torch.Generator().manual_seed(seed))
    return enc.eval()


def _image(h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    return RgbImage(rng.uniform(0, 1, size=(3, h, w)).astype(np.float32))


class TestEncoderShapes:
    def test_pyramid_shapes(self, toy_config):
        enc = _build(toy_config)
        pyr = enc.backbone_forward(_image())
        shapes = [tuple(f.shape) for f in pyr.levels]
        assert shapes == [(32, 16, 16), (64, 8, 8), (128, 4, 4)]

    def test_embedding_shape_toy(self, toy_config):
        emb = _build(toy_config).embed(_image())
        assert emb.shape == (20, 64)

    def test_embedding_rows_full_scale(self):
        cfg = ModelConfig(d_sem=768, n_local=144, n_global=4, n_heads=4)
        enc = ImageSemanticEncoder(cfg).eval()  # default init, shapes only
        emb = enc.embed(_image(32, 32))
        assert emb.shape == (148, 768)

    def test_rows_independent_of_resolution(self, toy_config):
        enc = _build(toy_config)
        a = enc.embed(_image(64, 64))
        b = enc.embed(_image(64, 96, seed=1))
        assert a.shape == b.shape == (20, 64)

    def test_embed_pure(self, toy_config):
        enc = _build(toy_config)
        img = _image(seed=3)
        assert torch.equal(enc.embed(img), enc.embed(img))

    def test_odd_head_split_rejected(self):
        # first-stage width d_sem // 2 = 3 is not divisible by 4 heads
        with pytest.raises(ValueError):
            ImageSemanticEncoder(ModelConfig(d_sem=6, n_heads=4))


class TestEnhancementToggles:
    def _pair(self, seed=0):
        base = ModelConfig()
        on = _build(base, seed)
        off_cfg = dataclasses.replace(base, use_dilated_conv=False, use_spatial_attention=False)
        off = _build(off_cfg, seed)
        return on, off

    def test_identity_at_init_bitwise(self):
        on, off = self._pair()
        img = _image(seed=5)
        assert torch.equal(on.embed(img), off.embed(img))

    def test_disabled_build_has_no_enhancement_state(self):
        _, off = self._pair()
        for key in off.state_dict():
            assert "dilated" not in key and "spatial_gate" not in key
        assert off.enhancement_parameter_names() == set()

    def test_enabled_build_names_both_kinds(self, toy_config):
        names = _build(toy_config).enhancement_parameter_names()
        assert any("dilated" in n for n in names)
        assert any("spatial_gate" in n for n in names)
        # one DC conv (weight+bias) and one SA conv (weight) per stage
        assert len(names) == toy_config.sem_levels * 3

    def test_randomized_dilated_changes_output(self, toy_config):
        enc = _build(toy_config)
        img = _image(seed=6)
        ref = enc.embed(img)
        with torch.no_grad():
            enc.stages[0].dilated.conv.weight.normal_(
                std=0.1, generator=torch.Generator().manual_seed(9))
        assert not torch.equal(ref, enc.embed(img))

    def test_randomized_gate_changes_output(self, toy_config):
        enc = _build(toy_config)
        img = _image(seed=6)
        ref = enc.embed(img)
        with torch.no_grad():
            enc.stages[1].spatial_gate.conv.weight.normal_(
                std=0.1, generator=torch.Generator().manual_seed(9))
        assert not torch.equal(ref, enc.embed(img))


class TestSpatialAttentionGate:
    def test_map_is_half_at_init(self):
        gate = SpatialAttentionGate()
        x = torch.randn(8, 12, 12, generator=torch.Generator().manual_seed(0))
        attn = spatial_attention(x, gate)
        assert attn.shape == (1, 12, 12)
        assert torch.equal(attn, torch.full_like(attn, 0.5))

    def test_forward_is_identity_at_init(self):
        gate = SpatialAttentionGate()
        x = torch.randn(4, 9, 9, generator=torch.Generator().manual_seed(1))
        assert torch.equal(gate(x), x)

    def test_constant_input_constant_interior(self):
        gate = SpatialAttentionGate()
        with torch.no_grad():
            gate.conv.weight.normal_(std=0.5, generator=torch.Generator().manual_seed(2))
            x = torch.full((8, 16, 16), 0.7)
            attn = spatial_attention(x, gate)[0]
        interior = attn[3:-3, 3:-3]
        assert float(interior.max() - interior.min()) < 1e-6

    def test_map_in_open_interval(self):
        # moderate weights: sigmoid would round to exactly 0/1 in float32
        # once pre-activations pass ~17
        gate = SpatialAttentionGate()
        with torch.no_grad():
            gate.conv.weight.normal_(std=0.2, generator=torch.Generator().manual_seed(3))
        x = torch.randn(8, 10, 10, generator=torch.Generator().manual_seed(4))
        attn = spatial_attention(x, gate)
        assert (attn > 0).all() and (attn < 1).all()

    def test_batched_map_shape(self):
        gate = SpatialAttentionGate()
        assert gate.attention_map(torch.zeros(2, 8, 6, 6)).shape == (2, 1, 6, 6)

    def test_rank_errors(self):
        gate = SpatialAttentionGate()
        with pytest.raises(ValueError):
            spatial_attention(torch.zeros(6, 6), gate)
        with pytest.raises(ValueError):
            gate.attention_map(torch.zeros(1, 2, 8, 6, 6))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            SpatialAttentionGate(kernel_size=4)

    def test_gate_rescales_by_two_map(self):
        gate = SpatialAttentionGate()
        with torch.no_grad():
            gate.conv.weight.normal_(std=0.5, generator=torch.Generator().manual_seed(5))
        x = torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(6))
        expected = x * (2.0 * gate.attention_map(x))
        assert torch.equal(gate(x), expected)


class TestDilatedConvEnhance:
    def test_identity_at_init(self):
        dc = DilatedConvEnhance(8)
        x = torch.randn(1, 8, 16, 16, generator=torch.Generator().manual_seed(0))
        assert torch.equal(dc(x), x)

    def test_receptive_field_is_5x5(self):
        dc = DilatedConvEnhance(3)
        with torch.no_grad():
            dc.conv.weight.normal_(generator=torch.Generator().manual_seed(1))
        x = torch.zeros(1, 3, 17, 17)
        c = 8
        x[0, 0, c, c] = 1.0
        diff = (dc(x) - x).abs().sum(dim=1)[0]
        nz = diff > 1e-9
        rows = torch.nonzero(nz.any(dim=1)).flatten()
        cols = torch.nonzero(nz.any(dim=0)).flatten()
        assert rows.min() == c - 2 and rows.max() == c + 2
        assert cols.min() == c - 2 and cols.max() == c + 2
        # dilation-2 taps only touch even offsets
        assert not nz[c - 1, c - 1] and not nz[c + 1, c]


class TestWindows:
    def test_partition_merge_round_trip(self):
        x = torch.randn(2, 3, 5, 7, generator=torch.Generator().manual_seed(0))
        tokens, hw, padded = _window_partition(x, 4)
        assert tokens.shape[1] == 16
        back = _window_merge(tokens, 4, hw, padded)
        assert torch.equal(back, x)


class TestPyramidDecoder:
    def _levels(self, widths, base=16, seed=0):
        gen = torch.Generator().manual_seed(seed)
        return [
            torch.randn(1, w, base // 2 ** i, base // 2 ** i, generator=gen)
            for i, w in enumerate(widths)
        ]

    def test_shapes_preserved(self):
        widths = [8, 16, 32]
        dec = PyramidDecoder(widths)
        seeded_init_(dec, torch.Generator().manual_seed(0))
        levels = self._levels(widths)
        outs = dec(levels)
        assert [tuple(o.shape) for o in outs] == [tuple(l.shape) for l in levels]

    def test_single_level_rejected(self):
        dec = PyramidDecoder([8, 16])
        with pytest.raises(ValueError):
            dec([torch.zeros(1, 8, 4, 4)])

    def test_zero_in_zero_out(self):
        dec = PyramidDecoder([8, 16])
        seeded_init_(dec, torch.Generator().manual_seed(0))  # biases land at zero
        outs = dec([torch.zeros(1, 8, 8, 8), torch.zeros(1, 16, 4, 4)])
        for o in outs:
            assert torch.equal(o, torch.zeros_like(o))

    def test_coarse_information_reaches_fine_level(self):
        widths = [8, 16]
        dec = PyramidDecoder(widths)
        seeded_init_(dec, torch.Generator().manual_seed(0))
        levels = self._levels(widths, base=8)
        bumped = [levels[0], levels[1] + 1.0]
        assert not torch.equal(dec(levels)[0], dec(bumped)[0])


class TestQueryTransformer:
    def test_token_permutation_invariance(self, toy_config):
        enc = _build(toy_config)
        qt = enc.query_transformer
        pyr = enc.backbone_forward(_image(seed=8))
        with torch.no_grad():
            decoded = enc.pyramid_decoder([f.unsqueeze(0) for f in pyr.levels])
            tokens = qt.tokens_from_pyramid(decoded)
            out1 = qt.attend(tokens)
            perm = torch.randperm(tokens.shape[1], generator=torch.Generator().manual_seed(0))
            out2 = qt.attend(tokens[:, perm])
        assert torch.allclose(out1, out2, atol=1e-5)

    def test_wrong_level_count_rejected(self, toy_config):
        enc = _build(toy_config)
        with pytest.raises(ValueError):
            enc.query_transformer.tokens_from_pyramid([torch.zeros(1, 32, 4, 4)])
