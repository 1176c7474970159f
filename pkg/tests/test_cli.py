"""CLI exit codes, file outputs, reproducibility."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from nnviz import datasets as D
from nnviz import model as M
from nnviz import render as R
from nnviz.cli import main


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def toy_ckpt(runner, work):
    out = work / "toy.ckpt"
    res = runner.invoke(main, ["train", "--arch", "camnet", "--n", "80",
                               "--epochs", "1", "--lr", "0.3",
                               "--out", str(out), "--json"])
    assert res.exit_code == 0, res.output
    return out


@pytest.fixture(scope="module")
def sample_image(work):
    im = D.gen_shapes(1, seed=70, max_shapes_per_image=1)[0]
    path = work / "sample.png"
    R.save_image(R.gray_to_rgb(im.pixels), path)
    return path


class TestTrain:
    def test_writes_checkpoint_and_csv(self, toy_ckpt):
        assert toy_ckpt.exists()
        csv = toy_ckpt.parent / (toy_ckpt.name + ".train.csv")
        assert csv.exists()
        assert csv.read_text().startswith("epoch,loss,")

    def test_zero_epochs_equals_init(self, runner, work):
        out = work / "zero.ckpt"
        res = runner.invoke(main, ["train", "--n", "40", "--epochs", "0",
                                   "--lr", "0.5", "--seed", "3",
                                   "--out", str(out)])
        assert res.exit_code == 0, res.output
        loaded = M.load(out)
        # rebuild the same init and compare bit-exactly
        ds = D.as_labeled_set(D.gen_shapes(40, seed=3, max_shapes_per_image=2))
        import dataclasses
        spec = dataclasses.replace(
            M.camnet_spec(ds.class_names, name="camnet-shapes"),
            input_mean=float(ds.images.mean()))
        fresh = M.build(spec, seed=3)
        for k in fresh.params:
            assert loaded.params[k].tobytes() == fresh.params[k].tobytes()

    def test_same_flags_byte_identical_checkpoints(self, runner, work):
        outs = []
        for name in ("a.ckpt", "b.ckpt"):
            out = work / name
            res = runner.invoke(main, ["train", "--n", "40", "--epochs", "1",
                                       "--lr", "0.2", "--seed", "11",
                                       "--out", str(out)])
            assert res.exit_code == 0, res.output
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_bad_flag_usage_exit_2(self, runner, work):
        res = runner.invoke(main, ["train", "--arch", "resnet",
                                   "--out", str(work / "x.ckpt")])
        assert res.exit_code == 2

    def test_idx_data_path(self, runner, work):
        # synthesize a tiny IDX digit set: 24 images of 3 "digit" classes
        rng = np.random.default_rng(8)
        images = (rng.random((24, 28, 28)) * 255).astype(np.uint8)
        labels = np.arange(24, dtype=np.uint8) % 3
        img_path = work / "imgs.idx"
        lbl_path = work / "lbls.idx"
        img_path.write_bytes(D.write_idx(images))
        lbl_path.write_bytes(D.write_idx(labels))
        out = work / "idx.ckpt"
        res = runner.invoke(main, ["train", "--arch", "fcnet",
                                   "--data", f"idx:{img_path},{lbl_path}",
                                   "--epochs", "1", "--lr", "0.1",
                                   "--out", str(out)])
        assert res.exit_code == 0, res.output
        loaded = M.load(out)
        assert loaded.spec.in_shape == (1, 28, 28)
        assert loaded.spec.class_names == ("0", "1", "2")


class TestExplain:
    def test_writes_all_artifacts(self, runner, toy_ckpt, sample_image, work):
        out = work / "exp"
        res = runner.invoke(main, ["explain", "--model", str(toy_ckpt),
                                   "--image", str(sample_image),
                                   "--method", "gradcam",
                                   "--out", str(out), "--json"])
        assert res.exit_code == 0, res.output
        assert (out / "overlay.png").exists()
        assert (out / "raw_grid.csv").exists()
        sidecar = json.loads((out / "sidecar.json").read_text())
        assert sidecar["method"] == "gradcam"
        assert len(sidecar["top5"]) == 3
        # --class omitted: explained class is the top-1 prediction
        assert sidecar["class"] == sidecar["top5"][0]["class"]

    def test_cam_on_fcnet_exit_3(self, runner, work, sample_image):
        fc = work / "fc.ckpt"
        res = runner.invoke(main, ["train", "--arch", "fcnet", "--n", "40",
                                   "--epochs", "0", "--lr", "0.1",
                                   "--out", str(fc)])
        assert res.exit_code == 0, res.output
        res = runner.invoke(main, ["explain", "--model", str(fc),
                                   "--image", str(sample_image),
                                   "--method", "cam",
                                   "--out", str(work / "exp_fc")])
        assert res.exit_code == 3
        assert "cam_inapplicable" in res.output

    def test_unknown_class_exit_2_lists_names(self, runner, toy_ckpt,
                                              sample_image, work):
        res = runner.invoke(main, ["explain", "--model", str(toy_ckpt),
                                   "--image", str(sample_image),
                                   "--class", "dragon",
                                   "--out", str(work / "exp2")])
        assert res.exit_code == 2
        assert "square" in res.output

    def test_alpha_zero_overlay_equals_input(self, runner, toy_ckpt,
                                             sample_image, work):
        out = work / "exp_a0"
        res = runner.invoke(main, ["explain", "--model", str(toy_ckpt),
                                   "--image", str(sample_image),
                                   "--method", "gradcam", "--alpha", "0",
                                   "--out", str(out)])
        assert res.exit_code == 0, res.output
        overlay = R.decode_png((out / "overlay.png").read_bytes())
        original = R.decode_png(sample_image.read_bytes())
        assert overlay.pixels.tobytes() == original.pixels.tobytes()


class TestImpress:
    def test_zero_iters_writes_noise(self, runner, toy_ckpt, work):
        out = work / "imp0"
        res = runner.invoke(main, ["impress", "--model", str(toy_ckpt),
                                   "--class", "square", "--iters", "0",
                                   "--out", str(out)])
        assert res.exit_code == 0, res.output
        img = R.decode_png((out / "impression_square.png").read_bytes())
        # init noise lives in [0.4, 0.6] -> bytes in [102, 153]
        assert img.pixels.min() >= 100 and img.pixels.max() <= 155

    def test_trace_rows_equal_iters(self, runner, toy_ckpt, work):
        out = work / "imp5"
        res = runner.invoke(main, ["impress", "--model", str(toy_ckpt),
                                   "--class", "circle", "--iters", "5",
                                   "--out", str(out)])
        assert res.exit_code == 0, res.output
        rows = (out / "trace.csv").read_text().strip().split("\n")
        assert len(rows) == 6

    def test_unknown_class_exit_2(self, runner, toy_ckpt, work):
        res = runner.invoke(main, ["impress", "--model", str(toy_ckpt),
                                   "--class", "unicorn",
                                   "--out", str(work / "impx")])
        assert res.exit_code == 2
        assert "square" in res.output


class TestInspect:
    def test_card_and_crc(self, runner, toy_ckpt):
        res = runner.invoke(main, ["inspect", "--model", str(toy_ckpt),
                                   "--json"])
        assert res.exit_code == 0, res.output
        card = json.loads(res.output)
        assert card["crc32"] == f"{M.checkpoint_crc(toy_ckpt):08x}"
        assert card["capture_layer"] == "relu7"

    def test_crc_matches_service_hash(self, runner, toy_ckpt):
        from fastapi.testclient import TestClient
        from nnviz.service import create_app
        res = runner.invoke(main, ["inspect", "--model", str(toy_ckpt),
                                   "--json"])
        card = json.loads(res.output)
        svc = TestClient(create_app(toy_ckpt)).get("/api/model").json()
        assert card["crc32"] == svc["checkpoint_crc32"]

    def test_corrupted_magic_exit_1(self, runner, toy_ckpt, work):
        bad = work / "bad.ckpt"
        data = bytearray(toy_ckpt.read_bytes())
        data[0] ^= 0xFF
        bad.write_bytes(bytes(data))
        res = runner.invoke(main, ["inspect", "--model", str(bad)])
        assert res.exit_code == 1
        assert "magic" in res.output


class TestMilCommand:
    def test_small_run_writes_artifacts(self, runner, work):
        out = work / "mil"
        res = runner.invoke(main, ["mil", "--bags", "30", "--epochs", "2",
                                   "--lr", "0.05", "--out", str(out),
                                   "--json"])
        assert res.exit_code == 0, res.output
        assert (out / "amil.ckpt").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= metrics["bag_accuracy"] <= 1.0
        assert (out / "highlight_0.png").exists()


class TestDataset:
    def test_export_round_trips(self, runner, work):
        out = work / "ds"
        res = runner.invoke(main, ["dataset", "--n", "5", "--seed", "2",
                                   "--out", str(out)])
        assert res.exit_code == 0, res.output
        back = D.load_shapes_dir(out)
        assert len(back) == 5
