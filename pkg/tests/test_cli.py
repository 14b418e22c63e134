import numpy as np
import pytest
from PIL import Image

from fastscnn.cli import main
from fastscnn.data_io import read_label, read_raw, read_raw_header, synth_dataset, synth_pairs

TOY_FLAGS = ["--classes", "3", "--input", "128x256", "--ppm-bins", "1,2,3,4", "--label-map", "identity"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_dataset(root / "data", "train", n=4, seed=0)
    synth_dataset(root / "data", "val", n=2, seed=1)
    code = main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--epochs", "3",
                 "--augment", "false", "--val-split", "val", "--checkpoint-every", "1", *TOY_FLAGS])
    assert code == 0
    return root


def test_summary_default(capsys):
    assert main(["summary"]) == 0
    out = capsys.readouterr().out
    assert "params_without_aux=1137776" in out and "128x256x64" in out


def test_summary_reflects_input_and_classes(capsys):
    assert main(["summary", "--input", "512x1024", "--classes", "2"]) == 0
    out = capsys.readouterr().out
    assert "64x128x64" in out
    assert "512x1024x2" in out


def test_unknown_flag_is_usage_error(capsys):
    assert main(["summary", "--nonsense", "1"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_bad_value_is_usage_error():
    assert main(["summary", "--input", "12by34"]) == 1
    assert main(["infer", "--mode", "logits"]) == 1


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("classes = 5\ninput = 512x1024\n")
    out_file = tmp_path / "s.txt"
    assert main(["summary", "--config", str(cfg), "--classes", "7", "--out", str(out_file)]) == 0
    text = out_file.read_text()
    assert "# classes=7" in text and "# input=512x1024" in text


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("colour = red\n")
    assert main(["summary", "--config", str(cfg)]) == 1


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ["config.txt", "train.log", "last.fscn", "best.fscn", "epoch0.fscn", "epoch2.fscn"]:
        assert (run / name).exists(), name
    log = (run / "train.log").read_text().splitlines()
    assert log[0].startswith("# ") and any(l.startswith("iter=0 epoch=0 loss=") for l in log)
    assert "classes=3" in (run / "config.txt").read_text()


def test_infer_cls_png(workspace, capsys):
    out = workspace / "pred.png"
    img = workspace / "data" / "val" / "images" / "0000.png"
    assert main(["infer", "--image", str(img), "--weights", str(workspace / "run" / "last.fscn"),
                 "--out", str(out), *TOY_FLAGS]) == 0
    lab = read_label(out)
    assert lab.shape == (128, 256) and lab.max() < 3
    with Image.open(out) as im:
        assert im.mode == "P" and im.text["classes"] == "3"


def test_infer_prob_raw(workspace):
    out = workspace / "prob.raw"
    img = workspace / "data" / "val" / "images" / "0000.png"
    assert main(["infer", "--mode", "prob", "--image", str(img), "--weights", str(workspace / "run" / "last.fscn"),
                 "--out", str(out), *TOY_FLAGS]) == 0
    prob = read_raw(out)
    assert prob.shape == (1, 3, 128, 256)
    np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-5)
    assert read_raw_header(out)["layout"] == "NCHW"


def test_zero_skip_changes_label_map(workspace):
    img = workspace / "data" / "val" / "images" / "0000.png"
    common = ["infer", "--image", str(img), "--weights", str(workspace / "run" / "last.fscn"), *TOY_FLAGS]
    assert main([*common, "--out", str(workspace / "a.png")]) == 0
    assert main([*common, "--zero-skip", "true", "--out", str(workspace / "b.png")]) == 0
    assert not np.array_equal(read_label(workspace / "a.png"), read_label(workspace / "b.png"))


def test_eval_report(workspace, capsys):
    out = workspace / "eval.txt"
    assert main(["eval", "--data", str(workspace / "data"), "--weights", str(workspace / "run" / "best.fscn"),
                 "--out", str(out), *TOY_FLAGS]) == 0
    text = out.read_text()
    assert "miou_class=" in text and "# split=" in text


def test_missing_weights_exit_2_without_output(workspace, tmp_path, capsys):
    img = workspace / "data" / "val" / "images" / "0000.png"
    out = tmp_path / "never.png"
    assert main(["infer", "--image", str(img), "--weights", str(tmp_path / "nope.fscn"),
                 "--out", str(out), *TOY_FLAGS]) == 2
    assert "nope.fscn" in capsys.readouterr().err
    assert not out.exists()


def test_wrong_image_size_exit_2(tmp_path):
    img, _ = synth_pairs(size=(96, 256), n=1)[0]
    Image.fromarray(img).save(tmp_path / "i.png")
    assert main(["infer", "--image", str(tmp_path / "i.png"), "--out", str(tmp_path / "o.png"), *TOY_FLAGS]) == 2


def test_missing_required_option():
    assert main(["train"]) == 1


def test_bench_report(capsys, tmp_path):
    out = tmp_path / "b.txt"
    assert main(["bench", "--burn-in", "1", "--measured", "2", "--out", str(out), *TOY_FLAGS]) == 0
    assert "burn_in=1 measured=2" in out.read_text()


def test_bench_default_protocol(capsys):
    assert main(["bench", "--input", "64x64", "--ppm-bins", "1,2"]) == 0
    assert "burn_in=100 measured=100" in capsys.readouterr().out


def test_selftest_exit_codes(capsys):
    assert main(["selftest"]) == 0
    assert main(["selftest", "--bottlenecks", "6,64,3,2;6,96,3,1;6,128,3,2"]) == 3
    out = capsys.readouterr().out
    assert "FAIL shape_trace" in out and "gfe.bottleneck2" in out
