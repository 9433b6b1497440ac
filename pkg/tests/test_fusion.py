import numpy as np
import pytest

from dubeval.data_model import MODALITY_STREAMS, STREAM_SPECS
from dubeval.errors import ConfigError, DataError, NumericError
from dubeval.fusion import (
    FusionNetwork,
    NetworkConfig,
    batch_from_manifest,
    finetune,
    load_checkpoint,
    parse_modalities,
    save_checkpoint,
    train,
    with_overrides,
)

SMALL = NetworkConfig(shared_dim=8, lora_rank=2, n_layers=1, n_heads=2,
                      ffn_dim=16, dropout=0.1, learning_rate=3e-3,
                      batch_size=8, epochs=10, seed=0)


def _labels(manifest):
    return {r.clip_id: r.mean_rating for r in manifest.rated_records()}


class TestConfig:
    def test_invalid_combinations(self):
        with pytest.raises(ConfigError, match="divisible"):
            NetworkConfig(shared_dim=10, n_heads=4)
        with pytest.raises(ConfigError, match="lora_rank"):
            NetworkConfig(lora_rank=0)
        with pytest.raises(ConfigError, match="smallest stream dim"):
            NetworkConfig(shared_dim=256, lora_rank=200, modalities="A")
        with pytest.raises(ConfigError, match="dropout"):
            NetworkConfig(dropout=1.0)
        with pytest.raises(ConfigError):
            NetworkConfig(n_layers=0)

    def test_parse_modalities(self):
        assert parse_modalities("AVT") == ("audio", "video", "text")
        assert parse_modalities("va") == ("audio", "video")
        assert parse_modalities("T") == ("text",)
        with pytest.raises(ConfigError):
            parse_modalities("x")
        with pytest.raises(ConfigError):
            parse_modalities("AA")

    def test_ffn_default(self):
        assert NetworkConfig(shared_dim=16, n_heads=2).ffn == 64
        assert SMALL.ffn == 16

    def test_with_overrides(self):
        cfg = with_overrides(SMALL, epochs=3, learning_rate=5e-4)
        assert cfg.epochs == 3 and cfg.learning_rate == 5e-4
        assert cfg.shared_dim == SMALL.shared_dim


class TestAdapter:
    def test_zero_init_matches_projection_bitwise(self):
        net = FusionNetwork(SMALL)
        rng = np.random.default_rng(0)
        h = rng.normal(size=(4, STREAM_SPECS["audio_speaker"][1]))
        out = net.adapt_stream("audio_speaker", h)
        assert np.array_equal(out, h @ net.params["P_audio_speaker"].T)

    def test_dense_oracle(self):
        net = FusionNetwork(SMALL)
        rng = np.random.default_rng(1)
        din = STREAM_SPECS["audio_speaker"][1]
        net.params["B_audio_speaker"] = rng.normal(size=(8, 2))
        h = rng.normal(size=(3, din))
        p = net.params
        want = (h @ p["P_audio_speaker"].T
                + SMALL.lora_scale * h @ p["A_audio_speaker"].T @ p["B_audio_speaker"].T)
        assert np.allclose(net.adapt_stream("audio_speaker", h), want, atol=1e-12)

    def test_adapter_delta_low_rank(self):
        net = FusionNetwork(SMALL)
        rng = np.random.default_rng(2)
        din = STREAM_SPECS["audio_speaker"][1]
        net.params["B_audio_speaker"] = rng.normal(size=(8, 2))
        basis = np.eye(din)
        delta = (net.adapt_stream("audio_speaker", basis)
                 - basis @ net.params["P_audio_speaker"].T)
        sv = np.linalg.svd(delta, compute_uv=False)
        assert np.sum(sv > 1e-9 * sv[0]) <= SMALL.lora_rank

    def test_wrong_dimension(self):
        net = FusionNetwork(SMALL)
        with pytest.raises(DataError, match="audio_speaker"):
            net.adapt_stream("audio_speaker", np.zeros((1, 100)))


class TestGating:
    def test_single_stream_modality_passthrough(self):
        net = FusionNetwork(SMALL)
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 8))
        z, alpha = net.intra_modal_fuse("text", [a])
        assert np.allclose(alpha, 1.0, atol=1e-15)
        assert np.allclose(z, a, atol=1e-15)

    def test_equal_scores_uniform_weights(self):
        net = FusionNetwork(SMALL)
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 8))
        z, alpha = net.intra_modal_fuse("video", [a, a.copy()])
        assert np.allclose(alpha, 0.5, atol=1e-12)
        assert np.allclose(z, a, atol=1e-12)

    def test_log_gap_fixture(self):
        net = FusionNetwork(SMALL)
        # scores (ln 2, 0) -> weights (2/3, 1/3)
        net.params["w_intra_video"] = np.eye(8)[0]
        a = np.zeros((1, 8))
        b = np.zeros((1, 8))
        a[0, 0] = np.log(2.0)
        _, alpha = net.intra_modal_fuse("video", [a, b])
        assert alpha[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert alpha[0, 1] == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_stream_order_invariance(self):
        net = FusionNetwork(SMALL)
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(2, 4, 8))
        z1, _ = net.intra_modal_fuse("video", [a, b])
        z2, _ = net.intra_modal_fuse("video", [b, a])
        assert np.allclose(z1, z2, atol=1e-12)

    def test_inter_gate_fixture(self):
        net = FusionNetwork(SMALL)
        # zero inputs, gate biases (1, 0, 0) -> softmax of (1, 0, 0)
        net.params["b_gate_audio"] = np.array([1.0])
        net.params["b_gate_video"] = np.array([0.0])
        net.params["b_gate_text"] = np.array([0.0])
        zs = {m: np.zeros((1, 8)) for m in ("audio", "video", "text")}
        _, g = net.inter_modal_gate(zs)
        assert g[0, 0] == pytest.approx(0.5761168847658291, abs=1e-12)
        assert g[0, 1] == pytest.approx(0.21194155761708544, abs=1e-12)
        assert g[0, 2] == pytest.approx(0.21194155761708544, abs=1e-12)

    def test_weights_normalized_over_random_draws(self):
        net = FusionNetwork(SMALL)
        rng = np.random.default_rng(6)
        for _ in range(50):
            streams = [rng.normal(scale=5.0, size=(7, 8)) for _ in range(3)]
            _, alpha = net.intra_modal_fuse("audio", streams)
            assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(alpha >= 0)
            zs = {m: rng.normal(scale=5.0, size=(7, 8))
                  for m in ("audio", "video", "text")}
            _, g = net.inter_modal_gate(zs)
            assert np.allclose(g.sum(axis=1), 1.0, atol=1e-12)


class TestForwardBackward:
    def _batch(self, manifest, n=3):
        ids = [r.clip_id for r in manifest.records[:n]]
        return batch_from_manifest(manifest, ids, SMALL.active_streams)

    def test_eval_deterministic(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        batch = self._batch(manifest)
        a, _ = net.forward_batch(batch)
        b, _ = net.forward_batch(batch)
        assert np.array_equal(a, b)

    def test_score_in_open_unit_interval(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        ids = [r.clip_id for r in manifest.records]
        preds = net.predict(manifest, ids)
        assert np.all(preds > 1.0) and np.all(preds < 5.0)

    def test_train_mode_needs_rng(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        with pytest.raises(ConfigError, match="rng"):
            net.forward_batch(self._batch(manifest), train=True)

    def test_gradients_match_finite_differences(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        rng = np.random.default_rng(7)
        # push the adapter path off zero so its gradient chain is exercised
        for s in SMALL.active_streams:
            net.params[f"B_{s}"] = 0.1 * rng.normal(size=net.params[f"B_{s}"].shape)
        batch = self._batch(manifest)
        t = np.array([0.3, 0.6, 0.8])

        def loss():
            s_out, cache = net.forward_batch(batch)
            d = s_out - t
            return float(np.mean(d * d)), cache, 2.0 * d / len(d)

        base, cache, d_score = loss()
        grads = net.backward(cache, d_score)
        eps = 1e-4
        for name in ("P_audio_content", "A_video_face", "B_text_semantic",
                     "w_intra_audio", "v_gate_video", "b_gate_text", "pos_embed",
                     "L0_Wq", "L0_Wo", "L0_ln1_g", "L0_W1", "L0_b2",
                     "head_w", "head_b"):
            p = net.params[name]
            flat = p.reshape(-1)
            for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + eps
                up, _, _ = loss()
                flat[idx] = old - eps
                dn, _, _ = loss()
                flat[idx] = old
                fd = (up - dn) / (2 * eps)
                an = grads[name].reshape(-1)[idx]
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom <= 1e-3, f"{name}[{idx}]"

    def test_zero_loss_zero_gradients(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        s_out, cache = net.forward_batch(self._batch(manifest))
        grads = net.backward(cache, np.zeros_like(s_out))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_frozen_parameters_get_zero_gradients(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        net.frozen = {"P_audio_content", "head_w"}
        s_out, cache = net.forward_batch(self._batch(manifest))
        grads = net.backward(cache, np.ones_like(s_out))
        assert np.all(grads["P_audio_content"] == 0.0)
        assert np.all(grads["head_w"] == 0.0)
        assert np.any(grads["head_b"] != 0.0)

    def test_stale_cache_rejected(self):
        net = FusionNetwork(SMALL)
        with pytest.raises(NumericError, match="cache"):
            net.backward({"masks": {}}, np.zeros(1))


class TestTraining:
    def test_loss_decreases(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        trace = train(net, manifest, _labels(manifest))
        assert len(trace) == SMALL.epochs
        assert trace[-1] < trace[0]

    def test_deterministic_trace(self, small_manifest):
        manifest, _ = small_manifest
        labels = _labels(manifest)
        t1 = train(FusionNetwork(SMALL), manifest, labels)
        t2 = train(FusionNetwork(SMALL), manifest, labels)
        assert t1 == t2

    def test_unknown_label_rejected(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        with pytest.raises(DataError, match="unknown clips"):
            train(net, manifest, {"nope": 3.0})

    def test_nan_guard_names_batch(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        net.params["head_w"][:] = np.nan
        with pytest.raises(NumericError, match="epoch 0"):
            train(net, manifest, _labels(manifest))

    def test_finetune_reports_holdout(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        mos = _labels(manifest)
        trace, report = finetune(net, manifest, mos,
                                 with_overrides(SMALL, epochs=3))
        assert len(trace) == 3
        assert report["n_train"] == 10 and report["n_test"] == 2
        assert set(report) >= {"pcc", "srcc", "mse", "r2"}

    def test_finetune_zero_epochs_keeps_params(self, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        before = {k: v.copy() for k, v in net.params.items()}
        finetune(net, manifest, _labels(manifest), with_overrides(SMALL, epochs=0))
        assert all(np.array_equal(before[k], net.params[k]) for k in before)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, small_manifest):
        manifest, _ = small_manifest
        net = FusionNetwork(SMALL)
        train(net, manifest, _labels(manifest), with_overrides(SMALL, epochs=2))
        path = tmp_path / "model.ckpt"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path)
        assert loaded.config == net.config
        for k, v in net.params.items():
            assert np.array_equal(loaded.params[k], v.astype(np.float32).astype(np.float64))
        ids = [r.clip_id for r in manifest.records[:5]]
        assert np.allclose(loaded.predict(manifest, ids), net.predict(manifest, ids),
                           atol=1e-4)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(path)
