import struct

import numpy as np
import pytest

from dmtkit.config import ModelConfig
from dmtkit.masking import MaskError, gen_mask_sequence, grid_to_tokens, tokens_to_grid
from dmtkit.numerics import Tensor, finite_diff_check, param
from dmtkit.pipeline import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    compose_output,
    decode,
    encode,
    forward,
    init_model_params,
    inverse_tokenize,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from dmtkit.training import l1_loss


@pytest.fixture
def clip(rng):
    frames = rng.random((2, 3, 16, 16))
    masks = gen_mask_sequence("freeform", 2, 16, 16, 0.4, seed=5)
    return frames, masks


class TestEncoder:
    def test_output_shape(self, tiny_model, clip):
        params = init_model_params(tiny_model)
        assert encode(*clip, params.encoder).shape == (2, tiny_model.C, 4, 4)

    def test_zero_weights_give_bias(self, tiny_model, clip):
        enc = init_model_params(tiny_model).encoder
        for k in enc:
            enc[k].data = np.zeros_like(enc[k].data)
        enc["conv2_b"].data = np.arange(tiny_model.C, dtype=float)
        out = encode(*clip, enc).data
        np.testing.assert_array_equal(out, np.broadcast_to(np.arange(tiny_model.C)[None, :, None, None], out.shape))

    def test_hole_pixels_are_never_read(self, tiny_model, clip, rng):
        frames, masks = clip
        enc = init_model_params(tiny_model, seed=3).encoder
        base = encode(frames, masks, enc).data
        for _ in range(5):
            scrambled = np.where(masks > 0, frames, rng.random(frames.shape))
            np.testing.assert_array_equal(encode(scrambled, masks, enc).data, base)

    def test_non_divisible(self, tiny_model, rng):
        with pytest.raises(MaskError):
            encode(rng.random((1, 3, 10, 12)), np.ones((1, 1, 10, 12)), init_model_params(tiny_model).encoder)

    def test_mask_shape_mismatch(self, tiny_model, rng):
        with pytest.raises(MaskError):
            encode(rng.random((2, 3, 8, 8)), np.ones((1, 1, 8, 8)), init_model_params(tiny_model).encoder)


class TestTokenize:
    def test_identity_linear(self, rng):
        feats = Tensor(rng.normal(size=(2, 5, 3, 4)))
        ident = {"w": Tensor(np.eye(5)), "b": Tensor(np.zeros(5))}
        np.testing.assert_array_equal(tokenize(feats, ident).data, grid_to_tokens(feats).data)

    def test_token_count_scales_with_frames(self, tiny_model, rng):
        tok = init_model_params(tiny_model).tokenizer
        one = tokenize(Tensor(rng.normal(size=(1, 8, 3, 3))), tok)
        two = tokenize(Tensor(rng.normal(size=(2, 8, 3, 3))), tok)
        assert two.shape[0] == 2 * one.shape[0] == 18

    def test_inverse_layout_round_trip(self, rng):
        feats = Tensor(rng.normal(size=(3, 4, 2, 5)))
        ident = {"w": Tensor(np.eye(4)), "b": Tensor(np.zeros(4))}
        back = inverse_tokenize(grid_to_tokens(feats), ident, (3, 2, 5))
        np.testing.assert_array_equal(back.data, feats.data)
        np.testing.assert_array_equal(tokens_to_grid(grid_to_tokens(feats), (3, 2, 5)).data, feats.data)


class TestDecoder:
    def test_shape_and_range(self, tiny_model, rng):
        out = decode(Tensor(rng.normal(size=(2, 8, 4, 4))), init_model_params(tiny_model).decoder).data
        assert out.shape == (2, 3, 16, 16)
        assert (out > 0).all() and (out < 1).all()

    def test_zero_final_layer_is_half(self, tiny_model, rng):
        dec = init_model_params(tiny_model).decoder
        dec["conv2_w"].data[:] = 0
        out = decode(Tensor(rng.normal(size=(1, 8, 2, 3))), dec).data
        np.testing.assert_array_equal(out, np.full((1, 3, 8, 12), 0.5))

    def test_gradcheck(self, tiny_model, rng):
        dec = init_model_params(tiny_model, seed=2).decoder
        grid = param(rng.normal(size=(1, 8, 2, 2)), name="grid")
        target = rng.random((1, 3, 8, 8))
        params = dict(dec, grid=grid)
        assert finite_diff_check(lambda: l1_loss(decode(grid, dec), target), params, max_coords=30) < 1e-4


class TestCompose:
    def test_all_valid_and_all_invalid(self, rng):
        raw, frames = rng.random((2, 1, 3, 4, 4))
        np.testing.assert_array_equal(compose_output(raw, frames, np.ones((1, 1, 4, 4))).data, frames)
        np.testing.assert_array_equal(compose_output(raw, frames, np.zeros((1, 1, 4, 4))).data, raw)

    def test_checkerboard(self, rng):
        raw, frames = rng.random((2, 1, 3, 4, 4))
        board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)[None, None]
        out = compose_output(raw, frames, board).data
        np.testing.assert_array_equal(out, np.where(board > 0, frames, raw))


class TestForward:
    def test_all_valid_composed_is_input(self, tiny_model, rng):
        frames = rng.random((2, 3, 16, 16))
        res = forward(frames, np.ones((2, 1, 16, 16)), init_model_params(tiny_model, seed=1), tiny_model)
        np.testing.assert_array_equal(res.composed.data, frames)

    def test_valid_pixels_copied_bitwise(self, tiny_model, clip):
        frames, masks = clip
        res = forward(frames, masks, init_model_params(tiny_model, zero_residual=False), tiny_model)
        keep = np.broadcast_to(masks > 0, frames.shape)
        np.testing.assert_array_equal(res.composed.data[keep], frames[keep])

    def test_smoke_on_random_params(self, tiny_model, clip):
        frames, masks = clip
        res = forward(frames, masks, init_model_params(tiny_model, seed=4, zero_residual=False), tiny_model)
        raw = res.raw.data
        holes = np.broadcast_to(masks == 0, raw.shape)
        assert np.isfinite(raw).all() and (raw >= 0).all() and (raw <= 1).all()
        assert raw[holes].std() > 1e-4

    def test_deterministic(self, tiny_model, clip):
        params = init_model_params(tiny_model, zero_residual=False)
        a = forward(*clip, params, tiny_model).raw.data
        b = forward(*clip, params, tiny_model).raw.data
        np.testing.assert_array_equal(a, b)

    def test_single_frame_matches_first_frame_of_independent_run(self, tiny_model, clip):
        frames, masks = clip
        params = init_model_params(tiny_model, zero_residual=False)
        one = forward(frames[:1], masks[:1], params, tiny_model)
        again = forward(frames[:1].copy(), masks[:1].copy(), params, tiny_model)
        assert one.raw.shape == (1, 3, 16, 16)
        np.testing.assert_array_equal(one.raw.data, again.raw.data)

    def test_trace_and_masks(self, tiny_model, clip):
        res = forward(*clip, init_model_params(tiny_model), tiny_model, record_trace=True)
        assert len(res.trace) == len(res.masks) == tiny_model.L
        assert res.grid_mask.shape == (2, 1, 4, 4)
        assert res.trace.grids[0].shape == (2, tiny_model.d, 4, 4)
        assert len(forward(*clip, init_model_params(tiny_model), tiny_model).trace) == 0

    def test_frames_are_clamped(self, tiny_model, rng):
        frames = rng.normal(size=(1, 3, 8, 8)) * 3
        res = forward(frames, np.ones((1, 1, 8, 8)), init_model_params(tiny_model), tiny_model)
        np.testing.assert_array_equal(res.composed.data, np.clip(frames, 0, 1))

    def test_end_to_end_gradcheck(self, rng):
        cfg = ModelConfig(L=1, d=8, heads=2, ffn_hidden=8, K=3, C=4)
        params = init_model_params(cfg, seed=5, zero_residual=False)
        frames = rng.random((2, 3, 16, 16))
        masks = gen_mask_sequence("freeform", 2, 16, 16, 0.3, seed=2)

        def loss():
            return l1_loss(forward(frames, masks, params, cfg).raw, frames)

        assert finite_diff_check(loss, params.named(), max_coords=12) < 1e-4


class TestCheckpoint:
    def test_round_trip_is_byte_identical(self, tiny_model, tmp_path):
        params = init_model_params(tiny_model, seed=9, zero_residual=False)
        a, b = tmp_path / "a.dmtc", tmp_path / "b.dmtc"
        save_checkpoint(params, tiny_model, a)
        loaded, cfg = load_checkpoint(a)
        assert cfg == tiny_model
        save_checkpoint(loaded, cfg, b)
        assert a.read_bytes() == b.read_bytes()
        for k, v in params.named().items():
            np.testing.assert_array_equal(loaded.named()[k].data, v.data)

    def test_header_layout(self, tiny_model, tmp_path):
        path = tmp_path / "c.dmtc"
        save_checkpoint(init_model_params(tiny_model), tiny_model, path)
        blob = path.read_bytes()
        assert blob[:4] == b"DMTC"
        version, cfg_len = struct.unpack("<II", blob[4:12])
        assert version == 1
        assert b"L=2" in blob[12 : 12 + cfg_len]

    @pytest.fixture
    def saved(self, tiny_model, tmp_path):
        path = tmp_path / "m.dmtc"
        save_checkpoint(init_model_params(tiny_model), tiny_model, path)
        return path

    def test_bad_magic(self, saved):
        saved.write_bytes(b"XXXX" + saved.read_bytes()[4:])
        with pytest.raises(CheckpointMagicError):
            load_checkpoint(saved)

    def test_bad_version(self, saved):
        blob = bytearray(saved.read_bytes())
        blob[4:8] = struct.pack("<I", 7)
        saved.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(saved)

    def test_truncated(self, saved):
        saved.write_bytes(saved.read_bytes()[:-5])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(saved)

    def test_config_mismatch_names_tensor(self, saved, tiny_model):
        blob = saved.read_bytes()
        _, cfg_len = struct.unpack("<II", blob[4:12])
        text = blob[12 : 12 + cfg_len].replace(b"ffn_hidden=24", b"ffn_hidden=20")
        saved.write_bytes(blob[:8] + struct.pack("<I", len(text)) + text + blob[12 + cfg_len :])
        with pytest.raises(CheckpointShapeError, match="ffn_w1"):
            load_checkpoint(saved)

    def test_trailing_bytes(self, saved):
        saved.write_bytes(saved.read_bytes() + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(saved)

    def test_errors_are_distinct(self):
        kinds = {CheckpointMagicError, CheckpointVersionError, CheckpointTruncatedError, CheckpointShapeError}
        assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)
