import json

import pytest

from remake.cli import main, parse_config_text
from remake.errors import ConfigError


def test_parse_json_and_key_value():
    assert parse_config_text('{"epochs": 3}') == {"epochs": 3}
    text = "# run\nepochs = 3\nloss = 'mask'\nmodel.dims = [16, 32]\nmodel.height = 32\n"
    assert parse_config_text(text) == {"epochs": 3, "loss": "mask",
                                       "model": {"dims": [16, 32], "height": 32}}
    with pytest.raises(ConfigError):
        parse_config_text("just words")
    with pytest.raises(ConfigError):
        parse_config_text("{broken")


def test_end_to_end(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert main(["build-dataset", "--out", str(ds), "--count", "10", "--seed", "2"]) == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\nbatch_size = 4\nmodel.dims = [16, 32]\nmodel.depths = [1, 1]\n"
                   "model.heads = [1, 2]\nmodel.decoder_blocks = 1\nmodel.decoder_width = 32\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--dataset", str(ds), "--out-dir", str(run)]) == 0
    ckpt = run / "best.ckpt"
    assert ckpt.exists()
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(ckpt), "--dataset", str(ds),
                 "--out", str(tmp_path / "ev")]) == 0
    assert json.loads(capsys.readouterr().out)["pixel_count"] > 0
    assert main(["infer", "--checkpoint", str(ckpt), "--sample", str(ds / "00009"),
                 "--out", str(tmp_path / "inf")]) == 0
    assert main(["analyze-regions", "--dataset", str(ds), "--out", str(tmp_path / "ar"),
                 "--pred-dir", str(tmp_path)]) == 3  # no predictions there
    assert main(["analyze-regions", "--dataset", str(ds), "--out", str(tmp_path / "ar")]) == 0
    assert (tmp_path / "ar" / "regions.csv").exists()
    assert main(["export-cloud", "--sample", str(ds / "00000"), "--use-gt",
                 "--out", str(tmp_path / "c.ply"), "--csv", str(tmp_path / "c.csv")]) == 0
    assert "element vertex" in (tmp_path / "c.ply").read_text()


def test_exit_codes(tmp_path):
    assert main(["train", "--epochs", "1"]) == 2  # no dataset
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 1\n")
    assert main(["train", "--config", str(bad), "--dataset", "x"]) == 2
    assert main(["evaluate", "--dataset", str(tmp_path / "missing"), "--source", "gt"]) == 3
    assert main(["export-cloud", "--sample", str(tmp_path / "none"), "--out", "x.ply"]) == 3
    with pytest.raises(SystemExit):
        main(["no-such-command"])
