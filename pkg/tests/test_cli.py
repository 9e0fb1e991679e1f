"""End-to-end command tests: tiny corpora, real training, exit codes."""

import json

import pytest

from hictc import cli
from hictc import data as datamod
from hictc import tokenizer as tok

TINY_SPEC = {
    "n_phones": 8,
    "n_words": 12,
    "word_phones": [1, 2],
    "utt_words": [1, 2],
    "feature_dim": 4,
    "duration_range": [2, 3],
    "noise_sigma": 0.3,
    "seed": 0,
    "train_utts": 16,
    "dev_utts": 6,
    "test_utts": 4,
    "speakers": [3, 2, 1],
    "backchannel_prob": 0.0,
    "n_backchannels": 0,
}


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthetic corpus, vocabulary, config file, one finished training run."""
    root = tmp_path_factory.mktemp("cliwork")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(TINY_SPEC), encoding="utf-8")
    data_dir = root / "data"
    assert run(["synth", "--spec", str(spec_path), "--out", str(data_dir)]) == 0

    vocab_path = root / "vocab.tsv"
    assert run([
        "vocab", "--transcripts", str(data_dir / "train.tsv"),
        "--size", "24", "--out", str(vocab_path),
    ]) == 0

    config = {
        "seed": 0,
        "out_dir": str(root / "run"),
        "data": {
            "train_features": str(data_dir / "train.feats"),
            "train_transcripts": str(data_dir / "train.tsv"),
            "dev_features": str(data_dir / "dev.feats"),
            "dev_transcripts": str(data_dir / "dev.tsv"),
            "batch_sizes": [4, 4, 4, 4, 4],
        },
        "vocab_path": str(vocab_path),
        "lexicon_path": str(data_dir / "lexicon.tsv"),
        "encoder": {
            "input_dim": 4, "num_layers": 2,
            "hidden_per_direction": 6, "dropout_rate": 0.1,
        },
        "multitask": {"regime": "multitask", "lambda": 0.5, "aux_layer": 1},
        "adam": {"warm_updates": 1000},
        "schedule": {
            "checkpoint_interval": 3, "patience": 2,
            "window": 2, "max_checkpoints": 2,
        },
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")
    assert run(["train", "--config", str(config_path)]) == 0
    return {"root": root, "data": data_dir, "config": config_path,
            "run": root / "run", "doc": config}


def test_synth_outputs_and_determinism(workdir, tmp_path):
    data_dir = workdir["data"]
    for name in ("train.feats", "train.tsv", "dev.feats", "dev.tsv",
                 "test.feats", "test.tsv", "lexicon.tsv", "synth.json"):
        assert (data_dir / name).exists(), name
    spec_path = workdir["root"] / "spec.json"
    again = tmp_path / "again"
    assert run(["synth", "--spec", str(spec_path), "--out", str(again)]) == 0
    for name in ("train.feats", "train.tsv", "lexicon.tsv"):
        assert (again / name).read_bytes() == (data_dir / name).read_bytes()


def test_synth_seed_flag_overrides_spec_file(workdir, tmp_path):
    spec_path = workdir["root"] / "spec.json"
    other = tmp_path / "other"
    assert run(["synth", "--spec", str(spec_path), "--seed", "7",
                "--out", str(other)]) == 0
    assert (other / "train.feats").read_bytes() != \
        (workdir["data"] / "train.feats").read_bytes()
    assert json.loads((other / "synth.json").read_text())["seed"] == 7


def test_synth_rejects_unknown_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_phonez": 8}), encoding="utf-8")
    assert run(["synth", "--spec", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "n_phonez" in capsys.readouterr().err


def test_synth_rejects_missing_out_parent(workdir, tmp_path):
    spec_path = workdir["root"] / "spec.json"
    missing = tmp_path / "no" / "such" / "dir"
    assert run(["synth", "--spec", str(spec_path), "--out", str(missing)]) == 2


def test_vocab_roundtrips_and_is_deterministic(workdir, tmp_path):
    vocab = tok.load_vocab(str(workdir["root"] / "vocab.tsv"))
    assert vocab.size <= 24
    assert vocab.piece_to_id
    again = tmp_path / "v.tsv"
    assert run(["vocab", "--transcripts", str(workdir["data"] / "train.tsv"),
                "--size", "24", "--out", str(again)]) == 0
    assert again.read_bytes() == (workdir["root"] / "vocab.tsv").read_bytes()


def test_train_writes_run_artifacts(workdir):
    run_dir = workdir["run"]
    for name in ("metrics.jsonl", "timing.jsonl", "checkpoint.bin",
                 "checkpoint.bin.json", "result.json"):
        assert (run_dir / name).exists(), name
    summary = json.loads((run_dir / "result.json").read_text())
    assert summary["status"] in (
        "converged", "stopped_early", "max_checkpoints", "did_not_converge")
    rows = [json.loads(line) for line in
            (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert any("update_count" in r for r in rows)
    assert rows[-1].get("event") == "end"


def test_train_rejects_unknown_config_key(workdir, tmp_path, capsys):
    doc = dict(workdir["doc"])
    doc["learning_rate"] = 0.5
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc), encoding="utf-8")
    assert run(["train", "--config", str(bad)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_missing_config_file(tmp_path):
    assert run(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_train_flag_overrides_feed_validation(workdir, tmp_path, capsys):
    config = str(workdir["config"])
    # baseline demands the subword weight be 1; the stale 0.5 must be refused
    assert run(["train", "--config", config, "--regime", "baseline",
                "--out", str(tmp_path / "r1")]) == 2
    assert "multitask" in capsys.readouterr().err
    assert run(["train", "--config", config, "--regime", "baseline",
                "--lam", "1.0", "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2" / "metrics.jsonl").exists()


def test_train_pretrain_regime_writes_phase_one_artifacts(workdir, tmp_path):
    assert run(["train", "--config", str(workdir["config"]),
                "--regime", "pretrain_multitask", "--aux-layer", "1",
                "--out", str(tmp_path / "pm")]) == 0
    assert (tmp_path / "pm" / "pretrain_metrics.jsonl").exists()
    assert (tmp_path / "pm" / "pretrain.bin").exists()


def test_eval_reports_both_rates(workdir, capsys):
    assert run(["eval", "--config", str(workdir["config"]),
                "--checkpoint", str(workdir["run"] / "checkpoint.bin")]) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["utterances"] == TINY_SPEC["dev_utts"]
    assert isinstance(report["wer"], float)
    assert isinstance(report["per"], float)  # lambda 0.5 keeps the phone head live


def test_sweep_lambda_grid(workdir, tmp_path):
    out = tmp_path / "sweep.tsv"
    assert run(["sweep", "--config", str(workdir["config"]),
                "--axis", "lambda", "--grid", "0.5,1.0",
                "--seeds", "0", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split("\t")[:3] == ["axis", "value", "seed"]
    assert len(lines) == 3
    for line in lines[1:]:
        cells = line.split("\t")
        assert cells[0] == "lambda"
        assert cells[3] == "multitask"
    assert lines[1].split("\t")[1] == "0.5"
    assert lines[2].split("\t")[1] == "1.0"


def test_sweep_rejects_out_of_range_cell(workdir, tmp_path, capsys):
    assert run(["sweep", "--config", str(workdir["config"]),
                "--axis", "lambda", "--grid", "0.5,1.5",
                "--out", str(tmp_path / "s.tsv")]) == 2
    assert "1.5" in capsys.readouterr().err
    assert not (tmp_path / "s.tsv").exists()


def test_sweep_rejects_layer_beyond_depth(workdir, tmp_path):
    assert run(["sweep", "--config", str(workdir["config"]),
                "--axis", "layer", "--grid", "1,3",
                "--out", str(tmp_path / "s.tsv")]) == 2


def test_align_table_shapes(workdir, tmp_path):
    out = tmp_path / "align.tsv"
    assert run(["align", "--config", str(workdir["config"]),
                "--checkpoint", str(workdir["run"] / "checkpoint.bin"),
                "--limit", "3", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 9  # 3 utterances x (subword, phone, truth)
    by_uid: dict[str, list[list[str]]] = {}
    for line in lines:
        cells = line.split("\t")
        by_uid.setdefault(cells[0], []).append(cells)
    dev = datamod.read_features(str(workdir["data"] / "dev.feats"))
    frames_by_uid = {u.uid: datamod.paired_length(u.num_frames) for u in dev}
    for uid, rows in by_uid.items():
        assert [r[1] for r in rows] == ["subword", "phone", "truth"]
        for r in rows:
            assert len(r) == 2 + frames_by_uid[uid]


def test_align_truth_row_spells_transcript(workdir, tmp_path):
    out = tmp_path / "align2.tsv"
    assert run(["align", "--config", str(workdir["config"]),
                "--checkpoint", str(workdir["run"] / "checkpoint.bin"),
                "--limit", "2", "--out", str(out)]) == 0
    transcripts = datamod.read_transcripts(str(workdir["data"] / "dev.tsv"))
    checked = 0
    for line in out.read_text().splitlines():
        cells = line.split("\t")
        if cells[1] != "truth":
            continue
        truth = transcripts[cells[0]]
        if any(truth[i] == truth[i + 1] for i in range(len(truth) - 1)):
            continue  # adjacent repeats are indistinguishable from one span
        row = cells[2:]
        seen = [w for i, w in enumerate(row) if w != "_"
                and (i == 0 or row[i - 1] != w)]
        assert tuple(seen) == truth
        checked += 1
    assert checked >= 1


def test_unknown_subcommand_exits_nonzero():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
