import json
import subprocess
import sys

import pytest

from topdown_hoi.cli import main

TINY = ["--set", "n_train=6", "--set", "n_test=3", "--set", "epochs=2", "--set", "batch_size=3",
        "--set", "C1=16", "--set", "d=32", "--set", "C2=4", "--set", "N_q=4",
        "--set", "ffn_dim=16", "--set", "enc_layers=1"]


def run_all(root, monkeypatch, capsys):
    """Every command once, with identical relative paths; returns stdout and output files."""
    root.mkdir()
    monkeypatch.chdir(root)
    assert main(["gen-data", "--out", "data", *TINY]) == 0
    assert main(["train", "--data", "data", "--out", "m.fhck", "--record", "rec.json", *TINY]) == 0
    assert main(["eval", "--data", "data", "--ckpt", "m.fhck", "--out", "rep.json", *TINY]) == 0
    assert main(["gradcheck", "--scenes", "1", "--max-coords", "2", "--directions", "1", *TINY]) == 0
    assert main(["nominate", "--data", "data", "--scene", "1", *TINY]) == 0
    assert main(["export-attention", "--data", "data", "--ckpt", "m.fhck", "--out", "att", *TINY]) == 0
    assert main(["ablate", "--data", "data", "--out", "abl.csv", "--set", "epochs=1", *TINY[:-2]]) == 0
    out = capsys.readouterr().out
    files = {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return out, files


def test_every_command_is_byte_identical_on_rerun(tmp_path, monkeypatch, capsys):
    out1, files1 = run_all(tmp_path / "a", monkeypatch, capsys)
    out2, files2 = run_all(tmp_path / "b", monkeypatch, capsys)
    assert out1 == out2
    assert files1.keys() == files2.keys()
    for k in files1:
        assert files1[k] == files2[k], k
    assert {"data/scenes.fhds", "data/objects.fheb", "m.fhck", "rep.json", "abl.csv",
            "att/manifest.json"} <= files1.keys()
    rows = files1["abl.csv"].decode().splitlines()
    assert rows[0] == "beta,delta,zeta,omega_one,unseen,seen,full" and len(rows) == 9
    events = [json.loads(line)["event"] for line in out1.splitlines()]
    assert {"dataset", "epoch", "done", "eval", "gradcheck", "nominate", "export", "ablate"} <= set(events)


def test_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 1
    assert main(["gen-data", "--out", "d", "--set", "nope=1"]) == 1
    assert main(["gen-data", "--out", "d", "--set", "epochs=zero"]) == 1
    assert main(["gen-data", "--out", "d", "--set", "d=30"]) == 1
    (tmp_path / "bad.json").write_text("[1]")
    assert main(["gen-data", "--out", "d", "--config", "bad.json"]) == 1
    assert main(["nominate", "--data", "missing"]) == 2
    assert main(["gen-data", "--out", "d", *TINY]) == 0
    assert main(["train", "--data", "d", "--split", "XX", "--out", "m", *TINY]) == 1
    assert main(["nominate", "--data", "d", "--scene", "99", *TINY]) == 2
    (tmp_path / "junk.fhck").write_bytes(b"JUNK")
    assert main(["eval", "--data", "d", "--ckpt", "junk.fhck", *TINY]) == 2
    assert main(["gradcheck", "--tol", "1e-300", "--scenes", "1", "--max-coords", "1",
                 "--directions", "1", *TINY]) == 3
    err = capsys.readouterr().err
    assert "unknown config field" in err and "gradient check failed" in err


def test_config_file_and_profile(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "c.json").write_text(json.dumps({"profile": "toy", "n_train": 3, "n_test": 2}))
    assert main(["gen-data", "--out", "d", "--config", "c.json"]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["train_scenes"] == 3 and ev["test_scenes"] == 2
    (tmp_path / "p.json").write_text(json.dumps({"profile": "huge"}))
    assert main(["gen-data", "--out", "d", "--config", "p.json"]) == 1


def test_console_entry_point_runs():
    r = subprocess.run([sys.executable, "-m", "topdown_hoi.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-data" in r.stdout


def test_numeric_and_shape_failures(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["gen-data", "--out", "d", *TINY]) == 0
    assert main(["train", "--data", "d", "--out", "m.fhck", "--set", "epochs=1", *TINY[:-2]]) == 0
    # checkpoint trained with two encoder layers does not fit a one-layer model
    assert main(["eval", "--data", "d", "--ckpt", "m.fhck", *TINY]) == 2
    assert main(["train", "--data", "d", "--out", "x.fhck", "--set", "lr=1e200", "--set", "grad_clip=0",
                 *TINY]) == 3
    assert main(["gradcheck", "--tol", "0", "--scenes", "1", "--max-coords", "1", "--directions", "1",
                 *TINY]) == 3
    err = capsys.readouterr().err
    assert "mismatched tensors" in err and "epoch" in err
