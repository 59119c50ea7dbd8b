import math

import numpy as np
import pytest

from eamap.errors import DimensionError, MagicError, TrainingError, TruncationError, VersionError
from eamap.fixing import FixPlan
from eamap.tensor import RngState
from eamap.vit import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    cross_entropy,
    dumps_checkpoint,
    embed,
    forward,
    init_params,
    loads_checkpoint,
    load_checkpoint,
    loss_and_grads,
    mhsa_forward,
    model_forward,
    patchify,
    predict_logits,
    save_checkpoint,
    train,
)
from eamap.vit.model import check_params, parameter_shapes

from oracles import gradient_check, record_attention

GRAD_CFG = ModelConfig(image_size=8, patch_size=4, embed_dim=8, num_layers=1, num_heads=2, num_classes=3)


def _images(cfg, n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)


def _empty_plan(cfg):
    shape = cfg.attention_shape
    return FixPlan(0.0, np.zeros((cfg.num_layers, cfg.num_heads)), np.zeros(shape, bool), np.zeros(shape, np.float32))


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.num_patches, cfg.seq_len, cfg.head_dim) == (16, 17, 16)
        assert cfg.attention_shape == (4, 4, 17, 17)

    @pytest.mark.parametrize("kw", [dict(embed_dim=10, num_heads=4), dict(image_size=30, patch_size=7)])
    def test_invalid(self, kw):
        with pytest.raises((ValueError, DimensionError)):
            ModelConfig(**kw)

    def test_check_params(self, tiny_cfg, tiny_params):
        check_params(tiny_params, tiny_cfg)
        bad = dict(tiny_params)
        bad["pos"] = bad["pos"][:-1]
        with pytest.raises(DimensionError, match="pos"):
            check_params(bad, tiny_cfg)


class TestPatchify:
    def test_shape(self, tiny_cfg, tiny_params):
        x, _ = embed(_images(tiny_cfg, 1), tiny_params, tiny_cfg)
        assert x.shape == (1, 17, tiny_cfg.embed_dim)

    def test_zero_image_gives_bias_rows(self, tiny_cfg, tiny_params):
        params = dict(tiny_params, pos=np.zeros_like(tiny_params["pos"]), **{"patch.b": np.arange(16, dtype=np.float32)})
        x, _ = embed(np.zeros((1, 28, 28, 1), np.float32), params, tiny_cfg)
        np.testing.assert_array_equal(x[0, 1:], np.broadcast_to(params["patch.b"], (16, 16)))

    def test_one_patch_change_is_local(self, tiny_cfg, tiny_params):
        a = _images(tiny_cfg, 1)
        b = a.copy()
        b[0, 7:14, 14:21] += 1.0  # patch (row 1, col 2) -> token 1 + 1*4 + 2
        xa, _ = embed(a, tiny_params, tiny_cfg)
        xb, _ = embed(b, tiny_params, tiny_cfg)
        changed = np.flatnonzero(np.any(xa[0] != xb[0], axis=1))
        assert changed.tolist() == [7]

    def test_patch_layout(self):
        cfg = ModelConfig(image_size=4, patch_size=2, embed_dim=4, num_layers=1, num_heads=1, num_classes=2)
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
        p = patchify(img, cfg)
        assert p[0, 0].tolist() == [0, 1, 4, 5]
        assert p[0, 1].tolist() == [2, 3, 6, 7]
        assert p[0, 3].tolist() == [10, 11, 14, 15]

    def test_dimension_error(self, tiny_cfg):
        with pytest.raises(DimensionError):
            patchify(np.zeros((1, 27, 27, 1), np.float32), tiny_cfg)


class TestAttention:
    def test_rows_stochastic(self, tiny_cfg, tiny_params):
        rec = record_attention(_images(tiny_cfg, 8), tiny_params, tiny_cfg)
        np.testing.assert_allclose(rec.sum(-1), 1.0, atol=1e-5)

    def test_two_token_hand_evaluation(self):
        cfg = ModelConfig(image_size=2, patch_size=2, embed_dim=2, num_layers=1, num_heads=1, num_classes=2)
        x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        eye = np.eye(2)
        params = {"blocks.0.wq": eye, "blocks.0.wk": eye, "blocks.0.wv": np.array([[1.0, 2.0], [3.0, 4.0]]),
                  "blocks.0.wproj": eye}
        got = {}
        out = mhsa_forward(x, 0, params, cfg, tap=lambda l, a: got.setdefault("a", a))
        # scores = x x^T / sqrt(2) = [[1, 0], [0, 4]] / sqrt(2)
        s = np.array([[1.0, 0.0], [0.0, 4.0]]) / math.sqrt(2)
        a = np.exp(s) / np.exp(s).sum(1, keepdims=True)
        v = x[0] @ params["blocks.0.wv"]
        np.testing.assert_allclose(got["a"][0, 0], a, rtol=1e-12)
        np.testing.assert_allclose(out[0], a @ v, rtol=1e-12)

    def test_empty_plan_is_bit_identical(self, tiny_cfg, tiny_params):
        x = _images(tiny_cfg, 5)
        base, _ = forward(x, tiny_params, tiny_cfg)
        fixed, _ = forward(x, tiny_params, tiny_cfg, plan=_empty_plan(tiny_cfg))
        assert base.tobytes() == fixed.tobytes()

    def test_patch_permutation_equivariance(self, tiny_cfg, tiny_params):
        params = dict(tiny_params, pos=np.zeros_like(tiny_params["pos"]))
        img = _images(tiny_cfg, 1)
        swapped = img.copy()
        # swap patch 0 (rows 0-6, cols 0-6) with patch 5 (rows 7-13, cols 7-13)
        swapped[0, 0:7, 0:7], swapped[0, 7:14, 7:14] = img[0, 7:14, 7:14], img[0, 0:7, 0:7]
        a = record_attention(img, params, tiny_cfg)[0]
        b = record_attention(swapped, params, tiny_cfg)[0]
        perm = np.arange(17)
        perm[[1, 6]] = perm[[6, 1]]
        np.testing.assert_allclose(b, a[:, :, perm][:, :, :, perm], atol=1e-5)


class TestModelForward:
    def test_deterministic(self, tiny_cfg, tiny_params):
        x = _images(tiny_cfg, 2)
        assert model_forward(x, tiny_params, tiny_cfg).tobytes() == model_forward(x, tiny_params, tiny_cfg).tobytes()

    def test_chunked_prediction_matches(self, tiny_cfg, tiny_params):
        x = _images(tiny_cfg, 7)
        full, _ = forward(x, tiny_params, tiny_cfg)
        np.testing.assert_allclose(predict_logits(x, tiny_params, tiny_cfg, batch_size=3), full, rtol=1e-5, atol=1e-6)

    def test_chance_level_when_untrained(self):
        cfg = ModelConfig()
        params = init_params(cfg, RngState(5))
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1000, 28, 28, 1)).astype(np.float32)
        y = np.arange(1000) % 10
        acc = np.mean(np.argmax(predict_logits(x, params, cfg), 1) == y)
        assert abs(acc - 0.1) <= 0.05


class TestLossAndGrads:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((4, 7)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(math.log(7))

    def test_gradient_check(self):
        params = init_params(GRAD_CFG, RngState(3), dtype=np.float64)
        # larger init so every path carries signal
        params = {k: (v * 3 if k in ("cls", "pos") else v) for k, v in params.items()}
        x = _images(GRAD_CFG, 6).astype(np.float64)
        y = np.arange(6) % 3
        worst = gradient_check(x, y, params, GRAD_CFG)
        assert set(worst) == set(parameter_shapes(GRAD_CFG))
        bad = {k: v for k, v in worst.items() if not v <= 1e-2}
        assert not bad, bad

    def test_duplicated_batch_same_gradients(self, tiny_cfg, tiny_params):
        x = _images(tiny_cfg, 3)
        y = np.array([0, 1, 2])
        _, g1 = loss_and_grads(x, y, tiny_params, tiny_cfg)
        _, g2 = loss_and_grads(np.concatenate([x, x]), np.concatenate([y, y]), tiny_params, tiny_cfg)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-4, atol=1e-7)

    def test_empty_batch(self, tiny_cfg, tiny_params):
        with pytest.raises(ValueError):
            loss_and_grads(np.zeros((0, 28, 28, 1), np.float32), np.zeros(0, int), tiny_params, tiny_cfg)


class TestTrain:
    def test_zero_lr_keeps_params(self, tiny_cfg, tiny_params):
        x = _images(tiny_cfg, 16)
        y = np.arange(16) % 4
        out, _ = train(x, y, tiny_cfg, TrainConfig(epochs=1, batch_size=8, lr=0.0), params=tiny_params)
        for k in tiny_params:
            assert out[k].tobytes() == tiny_params[k].tobytes()

    def test_needs_two_classes(self, tiny_cfg):
        with pytest.raises(ValueError):
            train(_images(tiny_cfg, 4), np.zeros(4, int), tiny_cfg, TrainConfig(epochs=1))

    def test_divergence_error(self, tiny_cfg):
        x = _images(tiny_cfg, 64)
        y = np.arange(64) % 10
        with pytest.raises(TrainingError, match="learning rate"):
            train(x, y, tiny_cfg, TrainConfig(epochs=3, batch_size=8, lr=50.0))

    def test_deterministic_and_learning(self, tiny_cfg, shapes_small):
        from eamap.data import Normalization

        tr, _ = shapes_small
        x = Normalization.fit(tr).apply(tr.images)
        tc = TrainConfig(epochs=3, batch_size=32, seed=4)
        p1, h1 = train(x, tr.labels, tiny_cfg, tc)
        p2, _ = train(x, tr.labels, tiny_cfg, tc)
        assert dumps_checkpoint(Checkpoint(tiny_cfg, p1)) == dumps_checkpoint(Checkpoint(tiny_cfg, p2))
        assert h1.loss[-1] < h1.loss[0]


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_cfg, tiny_params):
        ck = Checkpoint(tiny_cfg, tiny_params, np.array([0.1], np.float32), np.array([0.3], np.float32))
        digest = save_checkpoint(ck, tmp_path / "m.eamc")
        back = load_checkpoint(tmp_path / "m.eamc")
        assert back.config == tiny_cfg
        for k, v in tiny_params.items():
            assert back.params[k].tobytes() == v.tobytes()
        assert back.norm_mean.tobytes() == ck.norm_mean.tobytes()
        assert len(digest) == 64

    def test_bad_magic(self, tiny_cfg, tiny_params):
        data = bytearray(dumps_checkpoint(Checkpoint(tiny_cfg, tiny_params)))
        data[:4] = b"NOPE"
        with pytest.raises(MagicError):
            loads_checkpoint(bytes(data))

    def test_bad_version(self, tiny_cfg, tiny_params):
        data = bytearray(dumps_checkpoint(Checkpoint(tiny_cfg, tiny_params)))
        data[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(VersionError):
            loads_checkpoint(bytes(data))

    def test_truncated_mid_tensor_names_it(self, tiny_cfg, tiny_params):
        data = dumps_checkpoint(Checkpoint(tiny_cfg, tiny_params))
        with pytest.raises(TruncationError) as err:
            loads_checkpoint(data[: len(data) - 10])
        assert err.value.tensor is not None
        assert err.value.tensor in str(err.value)

    def test_shape_checked_on_load(self, tiny_cfg, tiny_params):
        bigger = ModelConfig(embed_dim=32, num_layers=2, num_heads=2)
        ck = Checkpoint(tiny_cfg, tiny_params)
        data = dumps_checkpoint(ck)
        # rewrite the config so shapes no longer agree
        forged = data.replace((16).to_bytes(8, "little", signed=True), (32).to_bytes(8, "little", signed=True), 1)
        assert bigger.embed_dim == 32
        with pytest.raises(DimensionError):
            loads_checkpoint(forged)
