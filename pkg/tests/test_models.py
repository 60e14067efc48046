"""Tests for the model zoo: construction, forward contracts, attention
semantics, gradient sanity and checkpoint serialization."""

import math

import numpy as np
import pytest

from mammoxai import engine
from mammoxai.models import (
    MODEL_KINDS,
    CheckpointError,
    InputShapeError,
    _shift_region_ids,
    _swin_mask,
    create_model,
    load_checkpoint,
    save_checkpoint,
    scaled_dot_attention,
)

from gradcheck import check_model_input_grad, smooth_values

ALL_KINDS = sorted(MODEL_KINDS)
ATTENTION_KINDS = ("vit_lite", "swin_lite", "dense_transformer")


def small_side(kind: str) -> int:
    # swin needs two window-divisible grids, which 16 cannot give
    return 32 if kind == "swin_lite" else 16


def batch_input(rng, b, side):
    return engine.tensor(smooth_values(rng, (b, 1, side, side), low=0.3, high=1.5))


class TestConstruction:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_same_seed_identical_params(self, kind):
        a = create_model(kind, seed=5)
        b = create_model(kind, seed=5)
        assert sorted(a.params) == sorted(b.params)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_seed_changes_params(self):
        a = create_model("base_cnn", seed=1)
        b = create_model("base_cnn", seed=2)
        assert any(not np.array_equal(a.params[k].data, b.params[k].data)
                   for k in a.params)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown model kind"):
            create_model("mlp_mixer")

    def test_incompatible_sides_rejected(self):
        with pytest.raises(InputShapeError):
            create_model("base_cnn", side=60)
        with pytest.raises(InputShapeError):
            create_model("vit_lite", side=60)
        with pytest.raises(InputShapeError):
            create_model("swin_lite", side=16)

    def test_init_conventions(self):
        m = create_model("vit_lite", seed=0)
        np.testing.assert_array_equal(m.params["head.b"].data, 0.0)
        np.testing.assert_array_equal(m.params["blk0.ln1.g"].data, 1.0)
        np.testing.assert_array_equal(m.params["blk0.ln1.b"].data, 0.0)
        pos = m.params["pos"].data
        assert np.abs(pos).max() <= 0.04 + 1e-7  # two deviations of 0.02
        assert pos.std() > 0.005

    def test_kaiming_bound_respected(self):
        m = create_model("base_cnn", seed=3)
        w = m.params["conv1.w"].data
        bound = math.sqrt(6.0 / 9.0)
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.5 * bound

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_param_counts_positive_and_stable(self, kind):
        m = create_model(kind, seed=0)
        assert m.param_count() == create_model(kind, seed=9).param_count()
        assert m.param_count() > 1000


class TestForward:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_output_shape_and_determinism(self, kind):
        side = small_side(kind)
        m = create_model(kind, seed=1, side=side)
        x = batch_input(np.random.default_rng(0), 3, side)
        a = m.forward(x)
        b = m.forward(x)
        assert a.shape == (3, 2)
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_gradcam_trace_receives_gradient(self, kind):
        side = small_side(kind)
        m = create_model(kind, seed=1, side=side)
        x = batch_input(np.random.default_rng(1), 2, side)
        trace = {}
        logits = m.forward(x, trace)
        fmap = trace["gradcam"]
        assert fmap.ndim == 4 and fmap.shape[0] == 2
        loss = engine.cross_entropy_logits(logits, np.array([0, 1]))
        engine.backward(loss)
        assert fmap.grad is not None
        assert np.abs(fmap.grad).sum() > 0

    def test_input_shape_validated(self):
        m = create_model("base_cnn", side=64)
        bad_side = engine.tensor(np.zeros((1, 1, 32, 32), dtype=np.float32))
        bad_chan = engine.tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        with pytest.raises(InputShapeError):
            m.forward(bad_side)
        with pytest.raises(InputShapeError):
            m.forward(bad_chan)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_batch_matches_single(self, kind):
        side = small_side(kind)
        m = create_model(kind, seed=2, side=side)
        x = smooth_values(np.random.default_rng(2), (2, 1, side, side))
        both = m.forward(engine.tensor(x)).data
        one = m.forward(engine.tensor(x[:1])).data
        two = m.forward(engine.tensor(x[1:])).data
        np.testing.assert_allclose(both, np.concatenate([one, two]), atol=1e-4)

    def test_predict_proba_rows_sum_to_one(self):
        m = create_model("base_cnn", seed=0, side=16)
        x = batch_input(np.random.default_rng(3), 4, 16)
        p = m.predict_proba(x)
        assert p.shape == (4, 2)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_params_all_reachable(self, kind):
        # every parameter must influence the loss: check grads arrive
        side = small_side(kind)
        m = create_model(kind, seed=1, side=side)
        x = batch_input(np.random.default_rng(4), 2, side)
        loss = engine.cross_entropy_logits(m.forward(x), np.array([0, 1]))
        engine.backward(loss)
        missing = [n for n, p in m.params.items() if p.grad is None]
        assert missing == []


class TestAttention:
    def test_scaled_dot_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        q = engine.tensor(rng.standard_normal((2, 2, 5, 4)).astype(np.float32))
        k = engine.tensor(rng.standard_normal((2, 2, 5, 4)).astype(np.float32))
        v = engine.tensor(rng.standard_normal((2, 2, 5, 4)).astype(np.float32))
        out, probs = scaled_dot_attention(q, k, v)
        assert out.shape == (2, 2, 5, 4)
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-5)

    def test_zero_query_attends_uniformly(self):
        rng = np.random.default_rng(1)
        q = engine.tensor(np.zeros((1, 1, 3, 4), dtype=np.float32))
        k = engine.tensor(rng.standard_normal((1, 1, 3, 4)).astype(np.float32))
        v = engine.tensor(rng.standard_normal((1, 1, 3, 4)).astype(np.float32))
        _, probs = scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(probs.data, 1.0 / 3.0, atol=1e-6)

    def test_mask_blocks_pairs(self):
        rng = np.random.default_rng(2)
        q = engine.tensor(rng.standard_normal((1, 1, 3, 4)).astype(np.float32))
        k = engine.tensor(rng.standard_normal((1, 1, 3, 4)).astype(np.float32))
        v = engine.tensor(rng.standard_normal((1, 1, 3, 4)).astype(np.float32))
        mask = np.zeros((1, 1, 3, 3), dtype=np.float32)
        mask[..., 0, 2] = -1e9
        _, probs = scaled_dot_attention(q, k, v, engine.constant(mask))
        assert probs.data[0, 0, 0, 2] < 1e-12
        np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-5)

    def test_shift_mask_matches_wrap_oracle(self):
        # independent oracle: after rolling by -shift, positions may attend
        # iff their wrap status agrees on both axes
        g, w, s = 8, 4, 2

        def group(r):
            wrapped = r >= g - s
            boundary = r >= g - w
            return (wrapped, boundary and not wrapped)

        ids = _shift_region_ids(g, w, s)
        mask = _swin_mask(g, w, s)
        m = g // w
        for wy in range(m):
            for wx in range(m):
                widx = wy * m + wx
                cells = [(wy * w + a, wx * w + b)
                         for a in range(w) for b in range(w)]
                for i, (y1, x1) in enumerate(cells):
                    for j, (y2, x2) in enumerate(cells):
                        allowed = mask[widx, i, j] == 0.0
                        oracle = (group(y1) == group(y2)) and (group(x1) == group(x2))
                        assert allowed == oracle
                        assert allowed == (ids[y1, x1] == ids[y2, x2])

    def test_swin_blocked_pairs_get_zero_probability(self):
        m = create_model("swin_lite", seed=0, side=32)
        x = batch_input(np.random.default_rng(3), 1, 32)
        trace = {}
        m.forward(x, trace)
        probs = trace["attn"][-1].data
        mask = _swin_mask(trace["attn_meta"]["g"], m.window, m.shift)
        for widx in range(mask.shape[0]):
            blocked = mask[widx] < -1e8
            if blocked.any():
                assert probs[widx][:, blocked].max() < 1e-10

    @pytest.mark.parametrize("kind", ATTENTION_KINDS)
    def test_attention_grid_is_distribution(self, kind):
        side = small_side(kind)
        m = create_model(kind, seed=1, side=side)
        x = batch_input(np.random.default_rng(4), 2, side)
        trace = {}
        m.forward(x, trace)
        grid = m.attention_grid(trace)
        assert grid.ndim == 3 and grid.shape[0] == 2
        assert (grid >= 0).all()
        np.testing.assert_allclose(grid.reshape(2, -1).sum(axis=1), 1.0, atol=1e-5)

    def test_vit_rollout_differs_from_final_block(self):
        m = create_model("vit_lite", seed=1, side=32)
        x = batch_input(np.random.default_rng(5), 1, 32)
        trace = {}
        m.forward(x, trace)
        last = m.attention_grid(trace, rollout=False)
        rolled = m.attention_grid(trace, rollout=True)
        assert last.shape == rolled.shape
        np.testing.assert_allclose(rolled.sum(), 1.0, atol=1e-5)
        assert not np.allclose(last, rolled)

    def test_swin_rollout_unsupported(self):
        m = create_model("swin_lite", seed=0, side=32)
        x = batch_input(np.random.default_rng(6), 1, 32)
        trace = {}
        m.forward(x, trace)
        with pytest.raises(NotImplementedError):
            m.attention_grid(trace, rollout=True)

    def test_cnn_has_no_attention(self):
        m = create_model("base_cnn", side=16)
        with pytest.raises(NotImplementedError):
            m.attention_grid({})


class TestModelGradients:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_input_gradient_matches_directional_secant(self, kind):
        m = create_model(kind, seed=11, side=small_side(kind))
        check_model_input_grad(m, seed=17)


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_roundtrip_bitwise(self, kind, tmp_path):
        side = small_side(kind)
        m = create_model(kind, seed=6, side=side)
        path = tmp_path / f"{kind}.ckpt"
        save_checkpoint(m, path, {"norm_mean": "0.31", "norm_std": "0.12"})
        restored, cfg = load_checkpoint(path)
        assert cfg["norm_mean"] == "0.31"
        assert cfg["side"] == str(side)
        assert restored.kind == kind
        for name in m.params:
            np.testing.assert_array_equal(restored.params[name].data,
                                          m.params[name].data)
        for name in m.buffers:
            np.testing.assert_array_equal(restored.buffers[name].data,
                                          m.buffers[name].data)
        x = batch_input(np.random.default_rng(7), 2, side)
        np.testing.assert_array_equal(m.forward(x).data, restored.forward(x).data)

    def test_expect_kind_mismatch(self, tmp_path):
        m = create_model("base_cnn", side=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        with pytest.raises(CheckpointError, match="expected"):
            load_checkpoint(path, expect_kind="vit_lite")
        load_checkpoint(path, expect_kind="base_cnn")

    def test_bad_magic(self, tmp_path):
        m = create_model("base_cnn", side=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"ZZZZ"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="not a model checkpoint"):
            load_checkpoint(path)

    def test_bad_kind_code(self, tmp_path):
        m = create_model("base_cnn", side=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        raw = bytearray(path.read_bytes())
        raw[8] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="unknown model code"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        m = create_model("base_cnn", side=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        m = create_model("base_cnn", side=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_geometry_mismatch(self, tmp_path):
        m = create_model("vit_lite", seed=0, side=64)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        raw = path.read_bytes()
        # same-length config edit: claim a smaller input side than the
        # saved position table was built for
        assert raw.count(b"side=64") == 1
        path.write_bytes(raw.replace(b"side=64", b"side=48"))
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path)

    def test_restored_model_trains_like_original(self, tmp_path):
        # grads flow identically after a roundtrip
        m = create_model("convmixer_lite", seed=3, side=16)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        restored, _ = load_checkpoint(path)
        x = batch_input(np.random.default_rng(8), 2, 16)
        labels = np.array([1, 0])
        engine.backward(engine.cross_entropy_logits(m.forward(x), labels))
        engine.backward(engine.cross_entropy_logits(restored.forward(x), labels))
        for name in m.params:
            np.testing.assert_array_equal(m.params[name].grad,
                                          restored.params[name].grad)
