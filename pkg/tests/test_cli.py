import subprocess
import sys

import numpy as np
import pytest

from roicodec.bitstream import decode_image, encode_image
from roicodec.checkpoint import load_checkpoint, save_checkpoint
from roicodec.cli import EXIT_MISMATCH, build_parser, run, validate_config
from roicodec.imageio import read_image, read_mask, to_uint8
from roicodec.model import build_model
from roicodec.synthetic import write_corpus
from roicodec.training import ConfigError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_corpus(root / "corpus", 3, 64, seed=4)
    for seed, omega in ((0, 0.0), (1, 3.0), (2, 5.0)):
        save_checkpoint(root / "models" / f"m{omega:g}.rckp", build_model("toy", seed=seed), {"omega": omega, "alpha": 0.001})
    return root


def _err(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")
    return err[0]


def test_encode_decode_files_match_memory(workspace):
    img, mask = workspace / "corpus/images/0000.png", workspace / "corpus/masks/0000.png"
    model = workspace / "models/m5.rckp"
    assert run(["encode", "--model", str(model), "--input", str(img), "--mask", str(mask), "--omega", "5", "--out", str(workspace / "a.bin")]) == 0
    assert run(["decode", "--model", str(model), "--in", str(workspace / "a.bin"), "--out", str(workspace / "a.png")]) == 0
    m, _ = load_checkpoint(model)
    data, _ = encode_image(read_image(img), read_mask(mask), m)
    assert (workspace / "a.bin").read_bytes() == data
    rec = decode_image(data, m)
    np.testing.assert_array_equal(to_uint8(read_image(workspace / "a.png")), to_uint8(rec))


def test_decode_hash_mismatch(workspace, capsys):
    img, mask = workspace / "corpus/images/0001.png", workspace / "corpus/masks/0001.png"
    out = workspace / "b.bin"
    assert run(["encode", "--model", str(workspace / "models/m0.rckp"), "--input", str(img), "--mask", str(mask), "--out", str(out)]) == 0
    capsys.readouterr()
    code = run(["decode", "--model", str(workspace / "models/m3.rckp"), "--in", str(out), "--out", str(workspace / "b.png")])
    assert code == EXIT_MISMATCH == 2
    assert _err(capsys).startswith("error: hash-mismatch:")


def test_decode_has_no_mask_flag(workspace, capsys):
    parser = build_parser()
    decode = parser._subparsers._group_actions[0].choices["decode"]
    assert not any("mask" in opt for a in decode._actions for opt in a.option_strings)
    code = run(["decode", "--model", "m", "--in", "x", "--out", "y", "--mask", "z"])
    assert code != 0
    assert "unrecognized" in _err(capsys)


def test_eval_directory(workspace):
    csv = workspace / "rd.csv"
    assert run(["eval", "--models", str(workspace / "models"), "--corpus", str(workspace / "corpus"), "--csv", str(csv)]) == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "omega,image_id,bpp,psnr,roi_psnr,bg_psnr"
    assert len(lines) == 1 + 9 + 3
    assert [l.split(",")[0] for l in lines[1:10]] == ["0.000000"] * 3 + ["3.000000"] * 3 + ["5.000000"] * 3


def test_attn_command(workspace):
    out = workspace / "attn"
    args = ["attn", "--model", str(workspace / "models/m0.rckp"), "--input", str(workspace / "corpus/images/0000.png"), "--grid", "3x3", "--out", str(out), "--sites", "encoder.0,decoder.5"]
    assert run(args) == 0
    assert len(list(out.glob("encoder.0_q*_hmean.png"))) == 9
    assert len(list(out.glob("decoder.5_q*_hmean.png"))) == 9


def test_attn_bad_site(workspace, capsys):
    args = ["attn", "--model", str(workspace / "models/m0.rckp"), "--input", str(workspace / "corpus/images/0000.png"), "--out", str(workspace / "x"), "--sites", "encoder.42"]
    assert run(args) == 1
    assert "encoder.42" in _err(capsys)


def test_train_command(workspace, tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(
        f"image_dir = {workspace / 'corpus/images'}\nmask_dir = {workspace / 'corpus/masks'}\n"
        f"steps = 2\nomega = 6.5\ncheckpoint = {tmp_path / 'out.rckp'}\nmetrics_csv = {tmp_path / 'm.csv'}\n"
    )
    assert run(["--seed", "3", "train", "--config", str(cfg)]) == 0
    _, meta = load_checkpoint(tmp_path / "out.rckp")
    assert meta["omega"] == "6.5" and meta["seed"] == "3" and meta["alpha"] == "0.001"
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 3


def test_validate_config(tmp_path, capsys):
    empty = tmp_path / "e.cfg"
    empty.write_text("")
    assert validate_config(empty).alpha == 0.001
    bad = tmp_path / "b.cfg"
    bad.write_text("omega = 6.5\nalpha = -1\n")
    with pytest.raises(ConfigError, match="line 2: alpha"):
        validate_config(bad)
    assert run(["validate", "--config", str(bad)]) == 1
    assert "alpha" in _err(capsys)


@pytest.mark.parametrize(
    "argv,kind",
    [
        (["encode", "--model", "/nonexistent.rckp", "--input", "a", "--mask", "b", "--out", "c"], "io"),
        (["frobnicate"], "usage"),
        (["decode", "--model", "m"], "usage"),
        (["train", "--config", "/nonexistent.cfg"], "io"),
    ],
)
def test_errors_are_single_line(argv, kind, capsys):
    assert run(argv) != 0
    assert _err(capsys).startswith(f"error: {kind}:")


def test_unreadable_image(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"garbage")
    code = run(["encode", "--model", str(workspace / "models/m0.rckp"), "--input", str(bad), "--mask", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1
    assert _err(capsys).startswith("error: image:")


def test_corrupted_checkpoint(workspace, tmp_path, capsys):
    raw = bytearray((workspace / "models/m0.rckp").read_bytes())
    raw[100] ^= 1
    (tmp_path / "c.rckp").write_bytes(bytes(raw))
    code = run(["decode", "--model", str(tmp_path / "c.rckp"), "--in", "x", "--out", "y"])
    assert code == 1
    assert _err(capsys).startswith("error: checkpoint:")


def test_thread_env(workspace, monkeypatch, capsys):
    monkeypatch.setenv("ROICODEC_THREADS", "zero")
    assert run(["validate", "--config", "/dev/null"]) == 1
    assert "ROICODEC_THREADS" in _err(capsys)
    monkeypatch.setenv("ROICODEC_THREADS", "1")
    assert run(["validate", "--config", "/dev/null"]) == 0


def test_console_entry_point(workspace):
    proc = subprocess.run([sys.executable, "-m", "roicodec.cli", "decode", "--model", "x"], capture_output=True, text=True)
    assert proc.returncode != 0
    assert proc.stderr.strip().count("\n") == 0 and proc.stderr.startswith("error: usage:")
