import json

import pytest

from accent_forge.cli import main

TINY = """
languages = 3
speakers_per_language = 4
native_per_speaker = 4
accented_per_speaker = 5
min_frames = 20
max_frames = 30
feature_dim = 4
components = 4
rank = 3
"""


def _run(*argv):
    return main(["--preset", "desk", *map(str, argv)])


def test_missing_manifest_is_usage_error(tmp_path, capsys):
    code = _run("train-ubm", "--manifest", tmp_path / "nope.jsonl", "--out", tmp_path / "u.aim")
    assert code == 2
    assert "--manifest" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(tmp_path):
    assert _run("train-ubm", "--colour", "red") == 2


def test_bad_value_is_usage_error(tmp_path):
    assert _run("train-ubm", "--manifest", "m", "--components", "0", "--out", "x") == 2


def test_missing_out_directory(tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text("")
    code = _run("train-ubm", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "a" / "b.aim")
    assert code == 2
    assert "--out" in capsys.readouterr().err


def test_bad_manifest_is_data_error(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"utt_id": "u"}\n')
    assert _run("train-ubm", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "u.aim") == 3


def test_bad_config_is_data_error(tmp_path):
    (tmp_path / "c.txt").write_text("colour = red\n")
    assert _run("synth", "--config", tmp_path / "c.txt", "--out", tmp_path / "corpus") == 3


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    w = tmp_path_factory.mktemp("cli")
    (w / "c.txt").write_text(TINY)
    m = w / "corpus" / "manifest.jsonl"
    steps = [
        ("synth", "--config", w / "c.txt", "--out", w / "corpus"),
        ("train-ubm", "--manifest", m, "--components", 4, "--iters", 3, "--out", w / "ubm.aim"),
        ("train-tvm", "--ubm", w / "ubm.aim", "--manifest", m, "--rank", 3, "--iters", 2,
         "--out", w / "tvm.aim"),
        ("extract", "--ubm", w / "ubm.aim", "--tvm", w / "tvm.aim", "--manifest", m,
         "--out", w / "iv.fm01"),
        ("train-siamese", "--ivectors", w / "iv.fm01", "--manifest", m, "--pos", 60, "--neg", 60,
         "--hidden", "8", "--embed", 4, "--epochs", 2, "--head-epochs", 2,
         "--enrollment", w / "enr", "--out", w / "twin.aim"),
        ("train-baseline", "--model", "lda", "--ivectors", w / "iv.fm01", "--manifest", m,
         "--out", w / "lda.aim"),
        ("train-baseline", "--model", "nnet", "--ivectors", w / "iv.fm01", "--manifest", m,
         "--hidden", "8", "--epochs", 2, "--out", w / "nnet.aim"),
        ("predict", "--system", w / "twin.aim", "--strategy", "siamese-4", "--enrollment", w / "enr",
         "--ivectors", w / "iv.fm01", "--manifest", m, "--out", w / "s4.jsonl"),
        ("predict", "--system", w / "lda.aim", "--ivectors", w / "iv.fm01", "--manifest", m,
         "--out", w / "lda.jsonl"),
        ("predict", "--system", w / "nnet.aim", "--ivectors", w / "iv.fm01", "--manifest", m,
         "--out", w / "nnet.jsonl"),
        ("fuse", "--mode", "majority", "--tiebreak", "siamese4", "--preds", w / "lda.jsonl",
         w / "nnet.jsonl", w / "s4.jsonl", "--out", w / "maj.jsonl"),
        ("evaluate", "--preds", w / "lda.jsonl", w / "nnet.jsonl", w / "s4.jsonl", w / "maj.jsonl",
         "--truth", m, "--confusion", "--strength", "--out", w / "report"),
    ]
    codes = [_run(*s) for s in steps]
    return w, codes


def test_tiny_pipeline_exit_codes(tiny_run):
    _, codes = tiny_run
    assert codes == [0] * len(codes)


def test_tiny_pipeline_outputs(tiny_run):
    w, _ = tiny_run
    summary = json.loads((w / "report" / "summary.json").read_text())
    assert summary
    assert (w / "report" / "table.txt").read_text().strip()
    assert list((w / "report").glob("confusion_*.png"))
    first = json.loads((w / "s4.jsonl").read_text().splitlines()[0])
    assert len(first["ranking"]) == 3


def test_weighted_fusion_checks_weights(tiny_run):
    w, _ = tiny_run
    code = _run("fuse", "--mode", "weighted", "--weights", "0.5,0.5", "--preds", w / "lda.jsonl",
                w / "nnet.jsonl", w / "s4.jsonl", "--out", w / "bad.jsonl")
    assert code in (2, 3)


def test_predict_strategy_needs_enrollment(tiny_run):
    w, _ = tiny_run
    m = w / "corpus" / "manifest.jsonl"
    code = _run("predict", "--system", w / "twin.aim", "--strategy", "siamese-2",
                "--ivectors", w / "iv.fm01", "--manifest", m, "--out", w / "x.jsonl")
    assert code == 2
