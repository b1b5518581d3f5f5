import json
import subprocess
import sys

import numpy as np
import pytest

from oafkit import cli, dataio, models


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--data-dir", str(d), "--n-train", "2", "--n-val", "1", "--n-test", "1",
                     "--duration", "1.0", "--seed", "5"]) == 0
    return d


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text("# tiny model for tests\nK = 8\nconv1 = 2\nconv2 = 3\n"
                 "seq_len_samples = 8192\nbatch_size = 1\nmax_iters = 50\neval_every = 2\n")
    return p


def test_synth_layout(corpus):
    for split, n in (("train", 2), ("validation", 1), ("test", 1)):
        assert len(list((corpus / split).glob("*.wav"))) == n
        assert len(list((corpus / split).glob("*.tsv"))) == n
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 5 and manifest["outputs"]


def test_evaluate_identity_and_idempotence(corpus, tmp_path, capsys):
    ref = next((corpus / "test").glob("*.tsv"))
    out1, out2 = tmp_path / "e1", tmp_path / "e2"
    code, text, _ = run(["evaluate", "--ref", ref, "--est", ref, "--out", out1], capsys)
    assert code == 0 and "note F1 = 1.0000" in text
    run(["evaluate", "--ref", ref, "--est", ref, "--out", out2], capsys)
    for name in ("metrics.csv", "metrics.txt"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    assert json.loads((out1 / "manifest.json").read_text())["command"] == "evaluate"


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--variant", "bogus"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["evaluate", "--nope"])
    assert info.value.code == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key = 3\n")
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--config", str(cfg)])
    assert info.value.code == 2
    assert "unknown config key" in capsys.readouterr().err


def test_data_error_exit_1_with_position(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("0.1\t0.2\t60\n")
    code, _, err = run(["evaluate", "--ref", bad, "--est", bad], capsys)
    assert code == 1 and "bad.tsv:1:" in err
    code, _, err = run(["evaluate", "--ref", tmp_path / "missing.tsv", "--est", bad], capsys)
    assert code == 1


def test_gradcheck_command(tmp_path, capsys):
    code, out, _ = run(["gradcheck", "--n-seeds", "1", "--out", tmp_path], capsys)
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 8 and all(line.endswith("ok") for line in lines)
    assert (tmp_path / "gradcheck.csv").read_text().startswith("layer,max_rel_error,ok")
    code, _, _ = run(["gradcheck", "--n-seeds", "1", "--tol", "1e-30"], capsys)
    assert code == 1


def test_train_transcribe_table(corpus, tiny_config, tmp_path, capsys):
    run_dir = tmp_path / "run"
    code, out, _ = run(["train", "--variant", "oaf+h", "--config", tiny_config, "--data-dir", corpus,
                        "--max-iters", "4", "--out", run_dir, "--seed", "1"], capsys)
    assert code == 0 and "OaF+H" in out
    manifest = json.loads((run_dir / "manifest.json").read_text())
    # the flag beats the config file, the file beats the defaults
    assert manifest["config"]["train.max_iters"] == 4
    assert manifest["config"]["train.eval_every"] == 2
    assert manifest["config"]["model.K"] == 8
    assert manifest["config"]["model.variant"] == "oaf_highway"
    history = (run_dir / "history.csv").read_text().splitlines()
    assert len(history) == 3 and history[0].startswith("iteration,loss")

    wav = next((corpus / "test").glob("*.wav"))
    tr_dir = tmp_path / "tr"
    code, _, _ = run(["transcribe", "--checkpoint", run_dir / "model.ckpt", "--out", tr_dir, wav], capsys)
    assert code == 0
    dataio.read_note_labels(tr_dir / (wav.stem + ".tsv"))

    report = tmp_path / "report"
    code, out, _ = run(["table", "--data-dir", corpus, "--out", report, run_dir], capsys)
    assert code == 0
    header, _, row = (report / "table.txt").read_text().splitlines()
    assert header.split()[1:] == ["note", "note-w-o", "note-w-v", "note-w-ov", "frame"]
    assert row.split()[0] == "OaF+H" and len(row.split()) == 6


def test_train_reproducible(corpus, tiny_config, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        run(["train", "--variant", "baseline", "--config", tiny_config, "--data-dir", corpus,
             "--max-iters", "2", "--out", d, "--seed", "3"], capsys)
        outs.append(d)
    assert (outs[0] / "history.csv").read_bytes() == (outs[1] / "history.csv").read_bytes()
    assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()


def test_read_config_comments_and_errors(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 4  # trailing comment\n\nmax-iters=7\n")
    assert cli.read_config(p) == {"seed": "4", "max_iters": "7"}
    p.write_text("justtext\n")
    with pytest.raises(cli.UsageError):
        cli.read_config(p)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "oafkit", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("oafkit ")


def test_variant_aliases_cover_table_labels():
    for alias in ("baseline", "b+o", "oaf", "oaf+h", "oaf+d", "oaf+h+d", "oaf+a", "oaf-l2", "speech"):
        assert models.resolve_variant(alias) in models.VARIANTS


def test_featurize(corpus, tmp_path, capsys):
    code, _, _ = run(["featurize", "--data-dir", corpus / "test", "--out", tmp_path], capsys)
    assert code == 0
    (npy,) = tmp_path.glob("*.npy")
    arr = np.load(npy)
    assert arr.shape == (32, 229)  # 1 s at hop 512
    code, _, _ = run(["featurize", "--data-dir", corpus / "test", "--speech", "--out", tmp_path / "s"], capsys)
    assert code == 0
    speech = json.loads((tmp_path / "s" / "manifest.json").read_text())["config"]
    assert (speech["fmin"], speech["fmax"]) == (30.0, 300.0)
