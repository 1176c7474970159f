"""Model specs, build, forward, training, checkpoint container."""

import dataclasses

import numpy as np
import pytest

from nnviz import datasets as D
from nnviz import model as M
from nnviz import tensor as T


class TestSpecValidation:
    def test_default_specs_pass(self):
        M.validate_spec(M.camnet_spec(("a", "b", "c")))
        M.validate_spec(M.fcnet_spec(("a", "b", "c")))

    def test_camnet_with_hidden_linear_rejected(self):
        base = M.camnet_spec(("a", "b"))
        layers = list(base.layers)
        # smuggle a hidden linear between gap and the class head
        layers.insert(-2, M.lin(32))
        bad = dataclasses.replace(base, layers=tuple(layers))
        with pytest.raises(M.SpecError, match="camnet"):
            M.validate_spec(bad)

    def test_capture_must_precede_gap(self):
        base = M.camnet_spec(("a", "b"))
        bad = dataclasses.replace(base, capture_layer="relu1")
        with pytest.raises(M.SpecError, match="last conv"):
            M.validate_spec(bad)

    def test_capture_must_exist(self):
        bad = dataclasses.replace(M.camnet_spec(("a",)), capture_layer="relu99")
        with pytest.raises(M.SpecError, match="not in spec"):
            M.validate_spec(bad)

    def test_shape_chain_error_names_layer(self):
        spec = M.ModelSpec(
            name="broken", arch="custom", in_shape=(1, 5, 5),
            layers=(M.conv(4, 3, 1, 1), M.RELU, M.POOL, M.GAP, M.lin(2),
                    M.SIGMOID),
            class_names=("a", "b"), capture_layer="relu1")
        with pytest.raises(M.SpecError, match="layer 2"):
            M.validate_spec(spec)


class TestBuild:
    def test_deterministic(self):
        spec = M.camnet_spec(("a", "b", "c"))
        m1, m2 = M.build(spec, seed=5), M.build(spec, seed=5)
        for name in m1.params:
            assert m1.params[name].tobytes() == m2.params[name].tobytes()

    def test_seed_changes_params(self):
        spec = M.camnet_spec(("a", "b"))
        m1, m2 = M.build(spec, seed=1), M.build(spec, seed=2)
        assert m1.params["conv0.kernel"].tobytes() != \
            m2.params["conv0.kernel"].tobytes()

    def test_head_weight_shape(self):
        m = M.build(M.camnet_spec(("a", "b", "c")), seed=0)
        assert m.params["linear9.weight"].shape == (3, 16)


class TestForward:
    def test_zero_image_zeroed_head_shows_bias(self):
        m = M.build(M.camnet_spec(("a", "b")), seed=0)
        m.params["linear9.weight"][:] = 0
        m.params["linear9.bias"][:] = np.array([0.25, -0.5], np.float32)
        fr = M.forward(m, np.zeros((1, 32, 32), np.float32))
        np.testing.assert_allclose(fr.scores.logits, [0.25, -0.5], atol=1e-6)

    def test_capture_nonnegative(self, small_camnet):
        rng = np.random.default_rng(0)
        for _ in range(5):
            img = rng.random((1, 32, 32), dtype=np.float32)
            fr = M.forward(small_camnet, img)
            assert fr.capture.maps.min() >= 0
            assert fr.capture.z == 64

    def test_multilabel_confidences_unconstrained(self, small_camnet):
        img = np.random.default_rng(1).random((1, 32, 32), dtype=np.float32)
        fr = M.forward(small_camnet, img)
        assert np.all(fr.scores.confidences >= 0)
        assert np.all(fr.scores.confidences <= 1)

    def test_shape_mismatch(self, small_camnet):
        with pytest.raises(T.ShapeError):
            M.forward(small_camnet, np.zeros((1, 16, 16), np.float32))


class TestTopK:
    def _scores(self, confs):
        confs = np.asarray(confs, np.float32)
        return M.ClassScores(logits=confs, confidences=confs,
                             class_names=tuple(f"c{i}" for i in range(len(confs))),
                             head="sigmoid")

    def test_full_k_is_permutation(self):
        out = M.top_k(self._scores([0.3, 0.9, 0.1]), 3)
        assert sorted(n for n, _ in out) == ["c0", "c1", "c2"]

    def test_tie_breaks_by_index(self):
        out = M.top_k(self._scores([0.2, 0.9, 0.9]), 3)
        assert [n for n, _ in out] == ["c1", "c2", "c0"]

    def test_argmax(self):
        assert M.top_k(self._scores([0.1, 0.8, 0.3]), 1)[0][0] == "c1"

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            M.top_k(self._scores([0.5]), 2)


class TestTrain:
    def _tiny(self, n=64, seed=3):
        return D.as_labeled_set(D.gen_shapes(n, seed=seed,
                                             max_shapes_per_image=2))

    def test_zero_lr_keeps_params(self):
        ds = self._tiny()
        m = M.build(M.camnet_spec(D.SHAPE_CLASSES), seed=1)
        before = {k: v.tobytes() for k, v in m.params.items()}
        M.train(m, ds, epochs=1, lr=0.0, batch=16, seed=0)
        assert all(m.params[k].tobytes() == before[k] for k in before)

    def test_loss_decreases_on_separable_subset(self):
        # 200 single-shape images are linearly separable enough for 5 epochs
        ds = D.as_labeled_set(D.gen_shapes(200, seed=5, max_shapes_per_image=1))
        m = M.build(M.camnet_spec(D.SHAPE_CLASSES), seed=2)
        report = M.train(m, ds, epochs=5, lr=0.5, batch=16, seed=0)
        assert report.epochs[-1]["loss"] < report.epochs[0]["loss"]
        assert all(np.isfinite(r["loss"]) for r in report.epochs)

    def test_deterministic_for_seed(self):
        ds = self._tiny(48)
        m1 = M.build(M.camnet_spec(D.SHAPE_CLASSES), seed=4)
        m2 = M.build(M.camnet_spec(D.SHAPE_CLASSES), seed=4)
        r1 = M.train(m1, ds, epochs=2, lr=0.3, batch=16, seed=9)
        r2 = M.train(m2, ds, epochs=2, lr=0.3, batch=16, seed=9)
        assert r1.epochs == r2.epochs
        for k in m1.params:
            assert m1.params[k].tobytes() == m2.params[k].tobytes()

    def test_empty_dataset_rejected(self):
        ds = D.LabeledSet(images=np.zeros((0, 1, 32, 32), np.float32),
                          labels=np.zeros((0, 3), np.float32),
                          class_names=D.SHAPE_CLASSES)
        m = M.build(M.camnet_spec(D.SHAPE_CLASSES), seed=0)
        with pytest.raises(ValueError, match="empty"):
            M.train(m, ds, epochs=1, lr=0.1)

    def test_report_csv_shape(self):
        ds = self._tiny(32)
        m = M.build(M.camnet_spec(D.SHAPE_CLASSES), seed=0)
        rep = M.train(m, ds, epochs=2, lr=0.1, batch=16, seed=0)
        lines = rep.to_csv().strip().split("\n")
        assert lines[0] == "epoch,loss,acc_square,acc_circle,acc_cross"
        assert len(lines) == 3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, small_camnet):
        p = tmp_path / "m.ckpt"
        M.save(small_camnet, p)
        loaded = M.load(p)
        assert loaded.spec == small_camnet.spec
        for k in small_camnet.params:
            assert loaded.params[k].tobytes() == small_camnet.params[k].tobytes()

    def test_bad_magic(self, tmp_path, small_camnet):
        p = tmp_path / "m.ckpt"
        M.save(small_camnet, p)
        data = bytearray(p.read_bytes())
        data[0] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(M.BadMagicError):
            M.load(p)

    def test_version_mismatch(self, tmp_path, small_camnet):
        p = tmp_path / "m.ckpt"
        M.save(small_camnet, p)
        data = bytearray(p.read_bytes())
        data[4] = 9
        # keep the CRC honest so the version check is what fires
        import struct, zlib
        body = bytes(data[:-4])
        p.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
        with pytest.raises(M.VersionError):
            M.load(p)

    def test_truncation_mid_tensor(self, tmp_path, small_camnet):
        p = tmp_path / "m.ckpt"
        M.save(small_camnet, p)
        data = p.read_bytes()
        cut = data[:len(data) // 2]
        import struct, zlib
        p.write_bytes(cut + struct.pack("<I", zlib.crc32(cut) & 0xFFFFFFFF))
        with pytest.raises(M.TruncatedError):
            M.load(p)

    def test_checksum_damage(self, tmp_path, small_camnet):
        p = tmp_path / "m.ckpt"
        M.save(small_camnet, p)
        data = bytearray(p.read_bytes())
        data[len(data) // 2] ^= 0x01
        p.write_bytes(bytes(data))
        with pytest.raises(M.ChecksumError):
            M.load(p)

    def test_crc_helper_matches_trailer(self, tmp_path, small_camnet):
        p = tmp_path / "m.ckpt"
        M.save(small_camnet, p)
        import struct
        trailer = struct.unpack("<I", p.read_bytes()[-4:])[0]
        assert M.checkpoint_crc(p) == trailer
