"""Fusion-model oracles: log-odds identities, fusion contracts, checkpoints."""

import numpy as np
import pytest

from gesturefuse.datamodel import Hand, ModalityPair, SensorType, LabeledWindow, GestureLabel
from gesturefuse.model import (
    ATTENTION,
    LLR,
    CheckpointError,
    FusionModel,
    MissingModalityError,
    ModelConfig,
    fuse_llr,
    llr_per_pair,
    load_checkpoint,
    save_checkpoint,
)
from gesturefuse.nn import cross_entropy, grad_check
from gesturefuse.nn.params import adam_step

PAIRS = {
    "left_acc": ModalityPair(Hand.LEFT, SensorType.ACC),
    "right_acc": ModalityPair(Hand.RIGHT, SensorType.ACC),
    "left_capa": ModalityPair(Hand.LEFT, SensorType.CAPA),
}


def small_config(fusion_kind=LLR, pairs=None, n_classes=20, d=8):
    return ModelConfig(
        feature_dim=d,
        conv_layers=1,
        kernel=3,
        stride=2,
        gru_layers=2,
        n_classes=n_classes,
        fusion_kind=fusion_kind,
        active_pairs=tuple(pairs or [PAIRS["left_acc"], PAIRS["right_acc"]]),
    )


def random_batch(config, batch=3, t=20, rng=None):
    rng = rng or np.random.default_rng(0)
    return {
        p: rng.normal(size=(batch, t if p.sensor is not SensorType.CAPA else t // 2,
                            p.sensor.channel_count))
        for p in config.active_pairs
    }


class TestLlrPerPair:
    def test_two_class_hand_case(self):
        llr = llr_per_pair(np.array([0.8, 0.2]))
        np.testing.assert_allclose(llr, [np.log(4.0), -np.log(4.0)], rtol=1e-12)
        np.testing.assert_allclose(llr, [1.3863, -1.3863], atol=1e-4)

    def test_uniform_over_20(self):
        llr = llr_per_pair(np.full(20, 0.05))
        np.testing.assert_allclose(llr, -np.log(19.0), rtol=1e-12)
        np.testing.assert_allclose(llr, -2.9444, atol=1e-4)

    def test_even_odds_is_zero(self):
        assert llr_per_pair(np.array([0.5, 0.5]))[0] == pytest.approx(0.0, abs=1e-15)

    def test_matches_explicit_denominator_form(self):
        # ln(p_i / sum_{j != i} p_j) computed literally must agree
        rng = np.random.default_rng(42)
        for _ in range(200):
            p = rng.uniform(0.01, 1.0, size=12)
            p /= p.sum()
            fast = llr_per_pair(p)
            explicit = np.array(
                [np.log(p[i] / sum(p[j] for j in range(12) if j != i)) for i in range(12)]
            )
            np.testing.assert_allclose(fast, explicit, atol=1e-12)


class TestFuseLlr:
    def test_single_pair_identity(self):
        llr = np.random.default_rng(0).normal(size=(1, 20))
        np.testing.assert_array_equal(fuse_llr(llr), llr[0])

    def test_two_identical_pairs_double(self):
        row = np.random.default_rng(1).normal(size=20)
        np.testing.assert_array_equal(fuse_llr(np.stack([row, row])), 2 * row)

    def test_eight_uniform_pairs(self):
        llr = np.tile(llr_per_pair(np.full(20, 0.05)), (8, 1))
        np.testing.assert_allclose(fuse_llr(llr), -8 * np.log(19.0), rtol=1e-12)

    def test_permutation_invariance_and_additivity_exact(self):
        # quantized to multiples of 2^-20 with small magnitude, every partial
        # sum is exact in float64, so pure addition must be bit-invariant
        # under row permutation and subset splitting
        rng = np.random.default_rng(2)
        rows = np.round(rng.normal(size=(6, 10)) * 4 * 2**20) / 2**20
        perm = rng.permutation(6)
        np.testing.assert_array_equal(fuse_llr(rows), fuse_llr(rows[perm]))
        np.testing.assert_array_equal(
            fuse_llr(rows), fuse_llr(rows[:2]) + fuse_llr(rows[2:])
        )

    def test_permutation_and_additivity_float_tolerance(self):
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(8, 20)) * 3
        perm = rng.permutation(8)
        np.testing.assert_allclose(fuse_llr(rows), fuse_llr(rows[perm]), rtol=1e-12)
        np.testing.assert_allclose(
            fuse_llr(rows), fuse_llr(rows[:3]) + fuse_llr(rows[3:]), rtol=1e-12
        )


class TestEncoder:
    def test_zero_weights_zero_input_gives_zero_feature(self):
        config = small_config()
        model = FusionModel(config, np.random.default_rng(0))
        for p in model.store.params.values():
            p.value[...] = 0.0
        x = np.zeros((2, 20, 3))
        feat, _ = model.encode_pair(PAIRS["left_acc"], x, training=False)
        np.testing.assert_array_equal(feat, 0.0)

    def test_feature_length_is_d_for_both_rates(self):
        pairs = [PAIRS["left_acc"], PAIRS["left_capa"]]
        config = small_config(pairs=pairs, d=16)
        model = FusionModel(config, np.random.default_rng(0))
        f_acc, _ = model.encode_pair(pairs[0], np.zeros((2, 30, 3)), False)
        f_cap, _ = model.encode_pair(pairs[1], np.zeros((2, 15, 4)), False)
        assert f_acc.shape == f_cap.shape == (2, 16)

    def test_conv_weights_shared_across_hands(self):
        config = small_config()
        model = FusionModel(config, np.random.default_rng(3))
        x = np.random.default_rng(4).normal(size=(2, 20, 3))
        conv_l = model.conv_stacks[SensorType.ACC][0][0]
        # one conv stack per sensor type serves both hands
        assert len(model.conv_stacks) == 1
        out_l, _ = conv_l.forward(x)
        f_l, _ = model.encode_pair(PAIRS["left_acc"], x, False)
        f_r, _ = model.encode_pair(PAIRS["right_acc"], x, False)
        # distinct per-pair GRU weights make the final features differ
        assert not np.allclose(f_l, f_r)

    def test_shape_mismatch_raises(self):
        config = small_config()
        model = FusionModel(config, np.random.default_rng(0))
        with pytest.raises(ValueError):
            model.encode_pair(PAIRS["left_acc"], np.zeros((2, 20, 4)), False)


class TestForward:
    def test_logits_length_for_both_kinds(self):
        for kind in (LLR, ATTENTION):
            config = small_config(kind)
            model = FusionModel(config, np.random.default_rng(0))
            logits, _, extras = model.forward_batch(random_batch(config), training=False)
            assert logits.shape == (3, 20)
            np.testing.assert_allclose(extras["probs"].sum(axis=1), 1.0, atol=1e-12)
            assert np.all(np.isfinite(logits))

    def test_uniform_probs_at_zero_head(self):
        config = small_config(LLR)
        model = FusionModel(config, np.random.default_rng(0))
        for pair in config.active_pairs:
            head = model.pair_heads[pair]
            head.w.value[...] = 0.0
            head.b.value[...] = 0.0
        _, _, extras = model.forward_batch(random_batch(config), training=False)
        np.testing.assert_allclose(extras["per_pair_probs"], 0.05, rtol=1e-12)

    def test_extreme_logit_clamped(self):
        config = small_config(LLR)
        model = FusionModel(config, np.random.default_rng(0))
        head = model.pair_heads[config.active_pairs[0]]
        head.w.value[...] = 0.0
        head.b.value[...] = 0.0
        head.b.value[0] = 1e4
        _, _, extras = model.forward_batch(random_batch(config), training=False)
        probs = extras["per_pair_probs"][:, 0, :]
        assert np.all(probs[:, 0] <= 1.0 - config.llr_clamp + 1e-15)
        assert np.all(probs > 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_identity_final_layer_exposes_fused_llr(self):
        config = small_config(LLR)
        model = FusionModel(config, np.random.default_rng(1))
        model.final.w.value[...] = np.eye(20)
        model.final.b.value[...] = 0.0
        logits, _, extras = model.forward_batch(random_batch(config), training=False)
        np.testing.assert_allclose(logits, extras["fused"], rtol=1e-12)

    def test_argmax_invariant_under_uniform_pair(self):
        # a pair with uniform probs contributes a constant -ln(19) per class
        config = small_config(LLR)
        model = FusionModel(config, np.random.default_rng(2))
        batch = random_batch(config)
        _, _, extras = model.forward_batch(batch, training=False)
        fused = extras["fused"]
        fused_plus = fused + llr_per_pair(np.full(20, 0.05))
        np.testing.assert_array_equal(
            fused.argmax(axis=1), fused_plus.argmax(axis=1)
        )

    def test_missing_pair_raises(self):
        config = small_config(LLR)
        model = FusionModel(config, np.random.default_rng(0))
        batch = random_batch(config)
        del batch[config.active_pairs[0]]
        with pytest.raises(MissingModalityError):
            model.forward_batch(batch)

    def test_attention_rows_sum_to_one(self):
        config = small_config(ATTENTION)
        model = FusionModel(config, np.random.default_rng(5))
        _, _, extras = model.forward_batch(random_batch(config), training=False)
        np.testing.assert_allclose(extras["attention"].sum(axis=-1), 1.0, atol=1e-12)


def _model_loss_fn(model, batch, targets):
    def loss_fn(compute_grads: bool) -> float:
        logits, cache, _ = model.forward_batch(batch, training=True)
        loss, dlogits = cross_entropy(logits, targets)
        if compute_grads:
            model.backward_batch(dlogits, cache)
        return loss

    return loss_fn


def _randomize_params(model, rng):
    # keep every gradient path live: nonzero gates, varied batchnorm params
    for name, p in model.store.params.items():
        if name.endswith(".gate"):
            p.value[...] = rng.uniform(0.5, 1.5)
        elif name.endswith(".gamma"):
            p.value[...] = rng.uniform(0.8, 1.2, size=p.value.shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            p.value[...] = rng.uniform(-0.1, 0.1, size=p.value.shape)
        else:
            p.value[...] = rng.uniform(-0.4, 0.4, size=p.value.shape)


@pytest.mark.parametrize("kind", [LLR, ATTENTION])
def test_full_model_gradients(kind):
    rng = np.random.default_rng(8)
    config = small_config(kind, n_classes=5, d=6)
    model = FusionModel(config, rng)
    _randomize_params(model, rng)
    batch = random_batch(config, batch=2, t=12, rng=rng)
    targets = np.array([1, 3])
    # h and floor sized to float64 finite-difference resolution: sub-1e-5
    # gradients are verified absolutely at the 1e-9 level instead of being
    # drowned in roundoff
    err = grad_check(
        _model_loss_fn(model, batch, targets), model.store,
        coords_per_tensor=6, rng=np.random.default_rng(1),
        h=1e-6, abs_floor=1e-5,
    )
    assert err < 1e-4, f"max rel err {err:.3e}"


class TestCheckpoint:
    def _window(self, config, rng):
        tensors = {
            p: rng.normal(size=(20 if p.sensor is not SensorType.CAPA else 10,
                                p.sensor.channel_count))
            for p in config.active_pairs
        }
        return LabeledWindow(GestureLabel.from_id(3), tensors, "p0", "s0", 0.0)

    def test_roundtrip_forward_bit_identical(self, tmp_path):
        rng = np.random.default_rng(10)
        config = small_config(LLR)
        model = FusionModel(config, rng)
        w = self._window(config, rng)
        before = model.infer(w)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        after = loaded.infer(w)
        assert np.array_equal(before.logits, after.logits)
        assert np.array_equal(before.probs, after.probs)

    def test_adam_step_after_load_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        config = small_config(LLR, d=6)
        model = FusionModel(config, rng)
        batch = random_batch(config, batch=2, t=12, rng=rng)
        targets = np.array([0, 2])
        # а few steps so Adam moments are non-trivial
        for _ in range(3):
            logits, cache, _ = model.forward_batch(batch, training=True)
            _, dlogits = cross_entropy(logits, targets)
            model.backward_batch(dlogits, cache)
            adam_step(model.store, lr=1e-3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)

        def one_step(m):
            logits, cache, _ = m.forward_batch(batch, training=True)
            _, dlogits = cross_entropy(logits, targets)
            m.backward_batch(dlogits, cache)
            adam_step(m.store, lr=1e-3)
            return {k: p.value.copy() for k, p in m.store.params.items()}

        direct = one_step(model)
        resumed = one_step(loaded)
        for k in direct:
            assert np.array_equal(direct[k], resumed[k]), k

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_config_tensor_shape_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(12)
        model = FusionModel(small_config(LLR, d=8), rng)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        # rewrite header claiming a different feature width
        from gesturefuse.model import _read_checkpoint_raw

        header, tensors = _read_checkpoint_raw(path)
        header["config"]["feature_dim"] = 16
        import json as _json
        import struct as _struct

        blob = _json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(b"GFCK")
            fh.write(_struct.pack("<I", 1))
            fh.write(_struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(_struct.pack("<I", len(tensors)))
            from gesturefuse.model import _write_tensor

            for name, arr in tensors.items():
                _write_tensor(fh, name, arr)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
