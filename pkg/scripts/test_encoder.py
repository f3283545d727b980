"""Encoder pieces: displacement indexing, biased attention, blocks and the full encoder."""

import numpy as np
import pytest

from conftest import tiny_encoder
from src.levit_unet import functional as F
from src.levit_unet.encoder import (
    AttentionLayer,
    DownsampleBlock,
    LeViTEncoder,
    StageConfig,
    Stem,
    StemConfig,
    TransformerBlock,
    build_offset_index,
    map_to_tokens,
    subsample_tokens,
    subsampled,
    tokens_to_map,
    variant_config,
)
from src.levit_unet.errors import ConfigurationError
from src.levit_unet.gradcheck import grad_check
from src.levit_unet.tensor import Tensor, no_grad


def _tokens(n, count, width, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(n, count, width)).astype(np.float32), requires_grad=True)


@pytest.mark.parametrize("h,w,stride", [(3, 4, 1), (4, 4, 2), (5, 3, 2), (1, 1, 1)])
def test_offset_index_is_a_function_of_displacement_only(h, w, stride):
    h_q, w_q = (h, w) if stride == 1 else subsampled((h, w))
    index, n_offsets = build_offset_index(h, w, h_q, w_q)
    assert index.shape == (h_q * w_q, h * w)
    assert index.min() >= 0 and index.max() < n_offsets
    slot_of = {}
    for qi in range(h_q * w_q):
        qr, qc = divmod(qi, w_q)
        for ki in range(h * w):
            kr, kc = divmod(ki, w)
            d = (qr * stride - kr, qc * stride - kc)
            slot = int(index[qi, ki])
            assert slot_of.setdefault(d, slot) == slot
    assert len(set(slot_of.values())) == len(slot_of)
    assert len(slot_of) <= n_offsets


def test_offset_count_for_same_grid():
    _, n_offsets = build_offset_index(7, 7, 7, 7)
    assert n_offsets == 13 * 13


def test_offset_index_rejects_unrelated_query_grid():
    with pytest.raises(ConfigurationError):
        build_offset_index(4, 4, 3, 3)


def test_token_helpers_round_trip_and_subsample():
    x = Tensor(np.arange(2 * 3 * 5 * 4, dtype=np.float32).reshape(2, 3, 5, 4))
    tokens = map_to_tokens(x)
    assert tokens.shape == (2, 20, 3)
    np.testing.assert_array_equal(tokens_to_map(tokens, (5, 4)).data, x.data)
    sub = subsample_tokens(tokens, (5, 4))
    assert sub.shape == (2, 3 * 2, 3)
    np.testing.assert_array_equal(tokens_to_map(sub, (3, 2)).data, x.data[:, :, ::2, ::2])


def _attention_oracle(layer: AttentionLayer, tokens: np.ndarray) -> np.ndarray:
    """Per-head loops straight from the definition."""
    h, w = layer.key_grid
    hq, wq = layer.query_grid
    s = layer.stride
    d, dv = layer.key_dim, layer.value_dim
    table = layer.bias_table.data
    index = layer.offset_index

    def proj(p, x):
        return x @ p.weight.data.T + p.bias.data

    n = tokens.shape[0]
    grid = tokens.reshape(n, h, w, -1)
    queries = grid[:, ::s, ::s, :].reshape(n, hq * wq, -1)
    out = np.zeros((n, hq * wq, layer.heads * dv))
    for b in range(n):
        q = proj(layer.q_proj, queries[b])
        k = proj(layer.k_proj, tokens[b])
        v = proj(layer.v_proj, tokens[b])
        for head in range(layer.heads):
            qh = q[:, head * d:(head + 1) * d]
            kh = k[:, head * d:(head + 1) * d]
            vh = v[:, head * dv:(head + 1) * dv]
            scores = qh @ kh.T / np.sqrt(d)
            for i in range(hq * wq):
                for j in range(h * w):
                    scores[i, j] += table[head, index[i, j]]
            weights = np.exp(scores - scores.max(axis=1, keepdims=True))
            weights /= weights.sum(axis=1, keepdims=True)
            out[b, :, head * dv:(head + 1) * dv] = weights @ vh
    mixed = out * np.clip(out + 3.0, 0.0, 6.0) / 6.0
    return proj(layer.out_proj, mixed)


@pytest.mark.parametrize("stride,grid", [(1, (3, 3)), (2, (4, 3))])
def test_attention_matches_reference_loops(stride, grid):
    rng = np.random.default_rng(0)
    layer = AttentionLayer(8, 6, 2, 4, 2, grid, rng, stride=stride)
    layer.bias_table.data = rng.normal(size=layer.bias_table.shape).astype(np.float32)
    tokens = rng.normal(size=(2, grid[0] * grid[1], 8)).astype(np.float32)
    with no_grad():
        out = layer(Tensor(tokens), grid).data
    np.testing.assert_allclose(out, _attention_oracle(layer, tokens.astype(np.float64)), rtol=1e-4, atol=1e-5)


def test_attention_weights_are_distributions():
    rng = np.random.default_rng(1)
    layer = AttentionLayer(8, 8, 2, 4, 2, (3, 3), rng)
    layer.bias_table.data = rng.normal(scale=5.0, size=layer.bias_table.shape).astype(np.float32)
    with no_grad():
        weights, _ = layer.attention_weights(Tensor(rng.normal(size=(3, 9, 8)).astype(np.float32)), (3, 3))
    assert weights.shape == (3, 2, 9, 9)
    assert (weights.data >= 0).all()
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-5)


def test_attention_bias_starts_at_zero_and_rejects_other_grids():
    layer = AttentionLayer(8, 8, 2, 4, 2, (3, 3), np.random.default_rng(0))
    assert not layer.bias_table.data.any()
    with pytest.raises(ConfigurationError, match="bias table"):
        layer(_tokens(1, 16, 8), (4, 4))


def test_attention_gradients_reach_bias_table():
    rng = np.random.default_rng(2)
    layer = AttentionLayer(4, 4, 2, 2, 2, (2, 3), rng, stride=2)
    layer.bias_table.data = rng.normal(size=layer.bias_table.shape).astype(np.float32)
    x = _tokens(2, 6, 4)
    weights = rng.normal(size=(2, 2, 4))
    inputs = [x, layer.bias_table, layer.q_proj.weight, layer.v_proj.weight, layer.out_proj.bias]
    report = grad_check(lambda: layer(x, (2, 3)) * weights, inputs, tol=1e-4)
    assert report.passed, report.summary()


def test_attention_records_mixing_macs():
    layer = AttentionLayer(8, 8, 2, 4, 2, (4, 4), np.random.default_rng(0), stride=2, name="a")
    with no_grad(), F.recording_macs() as recorder:
        layer(Tensor(np.zeros((0, 16, 8), dtype=np.float32)), (4, 4))
    by_layer = recorder.by_layer()
    assert by_layer["a.mix"] == 2 * 4 * 16 * (4 + 8)
    assert by_layer["a.q"] == 4 * 8 * 8
    assert by_layer["a.k"] == 16 * 8 * 8


def test_transformer_block_is_mlp_then_attention_with_residuals():
    rng = np.random.default_rng(3)
    block = TransformerBlock(StageConfig(8, 1, 2, 4), (2, 2), rng)
    block.attn.bias_table.data = rng.normal(size=block.attn.bias_table.shape).astype(np.float32)
    block.eval()
    z = Tensor(rng.normal(size=(2, 4, 8)).astype(np.float32))
    with no_grad():
        z_hat = block.mlp(z).data + z.data
        expected = block.attn(block.attn_norm(Tensor(z_hat)), (2, 2)).data + z_hat
        out = block(z, (2, 2)).data
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)


def test_downsample_block_shrinks_grid_and_changes_width():
    rng = np.random.default_rng(4)
    down = DownsampleBlock(8, 12, 4, 4, 2, (5, 4), rng)
    assert down.out_grid == (3, 2)
    assert down.attn.heads == 2
    assert down.attn.value_dim == 16
    out = down(_tokens(2, 20, 8), (5, 4))
    assert out.shape == (2, 6, 12)


def test_stem_shapes_and_input_checks():
    stem = Stem(StemConfig(in_channels=1, widths=(2, 3, 4, 5)), np.random.default_rng(0))
    outs = stem(Tensor(np.zeros((1, 1, 32, 48), dtype=np.float32)))
    assert [o.shape for o in outs] == [(1, 2, 16, 24), (1, 3, 8, 12), (1, 4, 4, 6), (1, 5, 2, 3)]
    with pytest.raises(ConfigurationError, match="divisible by 16"):
        stem(Tensor(np.zeros((1, 1, 40, 32), dtype=np.float32)))
    with pytest.raises(ConfigurationError, match="channels"):
        stem(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))


def test_encoder_fuses_all_stages_at_one_sixteenth():
    config = tiny_encoder()
    encoder = LeViTEncoder(config, 64, np.random.default_rng(0))
    assert encoder.stage_grids == [(4, 4), (2, 2), (1, 1)]
    out = encoder(Tensor(np.random.default_rng(1).random((2, 3, 64, 64), dtype=np.float32)))
    assert out.skip_half.shape == (2, 4, 32, 32)
    assert out.skip_quarter.shape == (2, 4, 16, 16)
    assert out.skip_eighth.shape == (2, 8, 8, 8)
    assert out.stem_sixteenth.shape == (2, 8, 4, 4)
    assert out.fused_sixteenth.shape == (2, config.fused_channels, 4, 4)
    assert config.fused_channels == 8 + 8 + 8 + 8


def test_conv_only_encoder_has_no_transformer_parameters():
    config = variant_config("128s", conv_only=True)
    encoder = LeViTEncoder(config, 64, np.random.default_rng(0))
    names = [n for n, _ in encoder.named_parameters()]
    assert names and all(n.startswith("stem.") for n in names)
    assert config.fused_channels == 128


def test_variant_fused_channels():
    assert variant_config("128s").fused_channels == 128 + 128 + 256 + 384
    assert variant_config("192").fused_channels == 192 + 192 + 288 + 384
    assert variant_config("384").fused_channels == 384 + 384 + 512 + 768


def test_encoder_rejects_img_size_not_multiple_of_16():
    with pytest.raises(ConfigurationError):
        LeViTEncoder(tiny_encoder(), 40, np.random.default_rng(0))
