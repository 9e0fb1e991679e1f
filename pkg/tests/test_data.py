import numpy as np
import pytest

from hictc import data
from hictc import tokenizer as tok
from hictc.util import substream


def _utt(uid, speaker, features, transcript=("w",)):
    return data.Utterance(
        uid=uid, speaker=speaker, features=np.asarray(features, dtype=np.float64),
        transcript=tuple(transcript),
    )


def test_normalize_constant_dim_centers_only():
    feats = np.column_stack([np.full(6, 3.0), np.arange(6, dtype=np.float64)])
    out = data.normalize_per_speaker([_utt("u0", "s0", feats)])
    np.testing.assert_array_equal(out[0].features[:, 0], np.zeros(6))
    col = out[0].features[:, 1]
    assert abs(col.mean()) < 1e-12
    assert abs(col.std() - 1.0) < 1e-12


def test_normalize_per_speaker_stats():
    rng = np.random.default_rng(0)
    utts = [
        _utt(f"u{i}", f"s{i % 3}", rng.standard_normal((rng.integers(4, 9), 3)) * 5 + 2)
        for i in range(9)
    ]
    out = data.normalize_per_speaker(utts)
    for spk in ("s0", "s1", "s2"):
        stacked = np.concatenate([u.features for u in out if u.speaker == spk])
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-10)


def test_normalize_shifted_speakers_coincide():
    rng = np.random.default_rng(1)
    base = [rng.standard_normal((6, 2)), rng.standard_normal((4, 2))]
    utts = [
        _utt("a0", "sa", base[0]), _utt("a1", "sa", base[1]),
        _utt("b0", "sb", base[0] * 2.0 + 7.0), _utt("b1", "sb", base[1] * 2.0 + 7.0),
    ]
    out = data.normalize_per_speaker(utts)
    np.testing.assert_allclose(out[0].features, out[2].features, atol=1e-10)
    np.testing.assert_allclose(out[1].features, out[3].features, atol=1e-10)


def test_dedupe_cap():
    utts = [_utt(f"u{i}", "s", np.zeros((2, 1)), ("uh-huh",)) for i in range(400)]
    assert len(data.dedupe_cap(utts, cap=300)) == 300
    assert data.dedupe_cap(utts, cap=300)[0].uid == "u0"

    distinct = [_utt(f"d{i}", "s", np.zeros((2, 1)), (f"w{i}",)) for i in range(10)]
    assert data.dedupe_cap(distinct, cap=300) == distinct
    mixed = distinct + utts
    capped = data.dedupe_cap(mixed, cap=1)
    assert len(capped) == 11


def test_plan_buckets_percentiles():
    rng = np.random.default_rng(2)
    lengths = rng.permutation(np.arange(1, 101))
    utts = [_utt(f"u{i}", "s", np.zeros((int(t), 1))) for i, t in enumerate(lengths)]
    plan, assignment = data.plan_buckets(utts)
    assert plan.boundaries == (20, 40, 60, 80)
    for u, b in zip(utts, assignment):
        t = u.num_frames
        expected = 0 if t <= 20 else 1 if t <= 40 else 2 if t <= 60 else 3 if t <= 80 else 4
        assert b == expected


def test_plan_buckets_all_equal_lengths():
    utts = [_utt(f"u{i}", "s", np.zeros((7, 1))) for i in range(10)]
    plan, assignment = data.plan_buckets(utts)
    assert np.all(assignment == 0)


def test_batches_never_mix_buckets():
    rng = np.random.default_rng(3)
    utts = [
        _utt(f"u{i}", "s", np.zeros((int(t), 1)), (f"w{i}",))
        for i, t in enumerate(rng.integers(2, 60, size=120))
    ]
    utts = [data.Utterance(u.uid, u.speaker, u.features, u.transcript, (1,), (1,)) for u in utts]
    plan, assignment = data.plan_buckets(utts, batch_sizes=(8, 8, 8, 8, 8))
    by_uid = {u.uid: b for u, b in zip(utts, assignment)}
    batches = data.epoch_batches(utts, plan, assignment, np.random.default_rng(0))
    seen = []
    for batch in batches:
        buckets = {by_uid[uid] for uid in batch.utt_ids}
        assert len(buckets) == 1
        seen.extend(batch.utt_ids)
    assert sorted(seen) == sorted(u.uid for u in utts)


def test_epoch_batches_deterministic():
    utts = [
        data.Utterance(f"u{i}", "s", np.zeros((5 + i % 7, 1)), (f"w{i}",), (1,), (1,))
        for i in range(40)
    ]
    plan, assignment = data.plan_buckets(utts, batch_sizes=(4, 4, 4, 4, 4))
    a = data.epoch_batches(utts, plan, assignment, np.random.default_rng(9))
    b = data.epoch_batches(utts, plan, assignment, np.random.default_rng(9))
    assert [x.utt_ids for x in a] == [x.utt_ids for x in b]


def test_subsample_counts_match_floor():
    sizes = (100, 80, 60, 40, 20)
    utts, assignment = [], []
    n = 0
    for bucket, size in enumerate(sizes):
        for _ in range(size):
            utts.append(_utt(f"u{n}", "s", np.zeros((bucket + 2, 1))))
            assignment.append(bucket)
            n += 1
    kept, kept_assignment = data.subsample_fraction(
        utts, np.array(assignment), 0.5, np.random.default_rng(4)
    )
    counts = np.bincount(kept_assignment, minlength=5)
    assert tuple(counts) == (50, 40, 30, 20, 10)

    all_kept, _ = data.subsample_fraction(utts, np.array(assignment), 1.0, np.random.default_rng(4))
    assert all_kept == utts
    with pytest.raises(data.DataConfigError):
        data.subsample_fraction(utts, np.array(assignment), 0.0, np.random.default_rng(4))
    with pytest.raises(data.DataConfigError):
        data.subsample_fraction(utts, np.array(assignment), 1.2, np.random.default_rng(4))


def _ks_distance(a, b):
    grid = np.unique(np.concatenate([a, b]))
    cdf_a = np.searchsorted(np.sort(a), grid, side="right") / len(a)
    cdf_b = np.searchsorted(np.sort(b), grid, side="right") / len(b)
    return np.abs(cdf_a - cdf_b).max()


def test_subsample_preserves_length_distribution():
    rng = np.random.default_rng(5)
    lengths = rng.integers(3, 120, size=600)
    utts = [_utt(f"u{i}", "s", np.zeros((int(t), 1))) for i, t in enumerate(lengths)]
    plan, assignment = data.plan_buckets(utts)
    kept, _ = data.subsample_fraction(utts, assignment, 0.25, np.random.default_rng(6))
    sub_lengths = np.array([u.num_frames for u in kept])

    stat = _ks_distance(sub_lengths, lengths)
    boot_rng = np.random.default_rng(7)
    baseline = max(
        _ks_distance(boot_rng.choice(lengths, size=len(sub_lengths), replace=False), lengths)
        for _ in range(50)
    )
    assert stat <= baseline


def test_gen_synthetic_noise_free_is_template_concatenation():
    spec = data.SyntheticSpec(
        n_phones=6, n_words=10, feature_dim=4, duration_range=(3, 3),
        noise_sigma=0.0, coarticulation=0.0, speaker_shift=0.0, speaker_scale=(1.0, 1.0),
        train_utts=5, dev_utts=2, test_utts=2, speakers=(2, 1, 1),
        backchannel_prob=0.0, n_backchannels=0, utt_words=(2, 3), word_phones=(2, 2),
    )
    out = data.gen_synthetic(spec)
    # template draws are an isolated substream, so they can be replayed here
    tpl_rng = substream(spec.seed, "synth/templates")
    templates = {p: tpl_rng.standard_normal(4) for p in data.phone_inventory(6)}
    for u in out.train:
        phone_seq = [p for w in u.transcript for p in out.lexicon_entries[w]]
        # every frame is exactly one phone template
        frame_ids = []
        for row in u.features:
            matches = [p for p, t in templates.items() if np.array_equal(row, t)]
            assert len(matches) >= 1
            frame_ids.append(matches[0])
        # collapsed frame identities match the collapsed phone sequence,
        # and every run lasts at least the minimum duration
        runs, run_lengths = [], []
        for p in frame_ids:
            if runs and runs[-1] == p:
                run_lengths[-1] += 1
            else:
                runs.append(p)
                run_lengths.append(1)
        collapsed = [p for i, p in enumerate(phone_seq) if i == 0 or p != phone_seq[i - 1]]
        assert runs == collapsed
        assert all(n >= 3 for n in run_lengths)


def test_gen_synthetic_deterministic():
    spec = data.SyntheticSpec(train_utts=20, dev_utts=5, test_utts=5)
    a = data.gen_synthetic(spec)
    b = data.gen_synthetic(spec)
    for ua, ub in zip(a.train + a.dev + a.test, b.train + b.dev + b.test):
        assert ua.uid == ub.uid and ua.speaker == ub.speaker
        assert ua.transcript == ub.transcript
        np.testing.assert_array_equal(ua.features, ub.features)
    ids = {u.uid for u in a.train} | {u.uid for u in a.dev} | {u.uid for u in a.test}
    assert len(ids) == 30  # splits disjoint by utterance id


def test_gen_synthetic_lexicon_covers_transcripts():
    spec = data.SyntheticSpec(train_utts=30, dev_utts=5, test_utts=5)
    out = data.gen_synthetic(spec)
    inventory = set(data.phone_inventory(spec.n_phones))
    for w, pron in out.lexicon_entries.items():
        assert w == "".join(pron)
        assert set(pron) <= inventory
    for u in out.train:
        assert all(w in out.lexicon_entries for w in u.transcript)


def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    utts = [
        _utt(f"utt-{i}", f"spk{i % 2}", rng.standard_normal((int(rng.integers(1, 9)), 3)),
             (f"w{i}", "x"))
        for i in range(7)
    ]
    fpath = tmp_path / "feats.bin"
    tpath = tmp_path / "trans.tsv"
    data.write_features(fpath, utts)
    data.write_transcripts(tpath, utts)
    loaded = data.load_utterances(fpath, tpath)
    assert len(loaded) == len(utts)
    for orig, got in zip(utts, loaded):
        assert got.uid == orig.uid and got.speaker == orig.speaker
        assert got.transcript == orig.transcript
        np.testing.assert_array_equal(got.features, orig.features)


def test_feature_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 8)
    with pytest.raises(ValueError):
        data.read_features(path)


def test_load_utterances_requires_transcripts(tmp_path):
    utts = [_utt("u0", "s", np.zeros((2, 1)))]
    fpath = tmp_path / "f.bin"
    data.write_features(fpath, utts)
    tpath = tmp_path / "t.tsv"
    tpath.write_text("other\tw\n")
    with pytest.raises(ValueError):
        data.load_utterances(fpath, tpath)


def test_attach_labels_and_filter_feasible():
    corpus = {"baki": 4, "kiba": 4}
    vocab = tok.learn_bpe(corpus, target_size=20)
    lex = tok.build_lexicon({"baki": ["ba", "ki"], "kiba": ["ki", "ba"]})
    long_u = _utt("ok", "s", np.zeros((20, 2)), ("baki", "kiba"))
    short_u = _utt("tiny", "s", np.zeros((1, 2)), ("baki", "kiba"))
    labeled = data.attach_labels([long_u, short_u], vocab, lex)
    assert labeled[0].phone_ids == tuple(
        lex.phone_to_id[p] for p in ("ba", "ki", "ki", "ba")
    )
    kept, skipped = data.filter_feasible(labeled)
    assert [u.uid for u in kept] == ["ok"]
    assert skipped == ["tiny"]


def test_prepare_skips_out_of_lexicon_utterances():
    corpus = {"baki": 4, "kiba": 4}
    vocab = tok.learn_bpe(corpus, target_size=20)
    lex = tok.build_lexicon({"baki": ["ba", "ki"], "kiba": ["ki", "ba"]})
    rng = np.random.default_rng(0)
    good = [_utt(f"good{k}", "s", rng.normal(size=(20 + k, 2)),
                 ("baki", "kiba")) for k in range(5)]
    stray = _utt("stray", "s", np.zeros((20, 2)), ("baki", "kiki"))
    stray_dev = _utt("straydev", "s", np.zeros((20, 2)), ("kiki",))
    prepared = data.prepare(good + [stray], [good[0], stray_dev], vocab, lex,
                            seed=0, batch_sizes=(2,) * 5)
    assert [u.uid for u in prepared.train] == [u.uid for u in good]
    assert [u.uid for u in prepared.dev] == ["good0"]
    assert prepared.oov_skipped == ["stray", "straydev"]


def test_prepare_pipeline_deterministic():
    spec = data.SyntheticSpec(train_utts=60, dev_utts=10, test_utts=5)
    out = data.gen_synthetic(spec)
    corpus = {}
    for u in out.train:
        for w in u.transcript:
            corpus[w] = corpus.get(w, 0) + 1
    vocab = tok.learn_bpe(corpus, target_size=120)
    lex = tok.build_lexicon(out.lexicon_entries)
    a = data.prepare(out.train, out.dev, vocab, lex, seed=3, fraction=0.5,
                     batch_sizes=(8, 8, 8, 8, 8))
    b = data.prepare(out.train, out.dev, vocab, lex, seed=3, fraction=0.5,
                     batch_sizes=(8, 8, 8, 8, 8))
    assert [u.uid for u in a.train] == [u.uid for u in b.train]
    batches_a = data.epoch_batches(a.train, a.plan, a.assignment, np.random.default_rng(1))
    batches_b = data.epoch_batches(b.train, b.plan, b.assignment, np.random.default_rng(1))
    assert [x.utt_ids for x in batches_a] == [x.utt_ids for x in batches_b]


def test_default_task_phone_canary():
    # calibration guard on the shipped default difficulty: a phone-only
    # model on the first three encoder layers must reach dev PER < 15%
    # within 20 epochs, otherwise the task drifted out of reach
    from hictc import encoder as enc
    from hictc import multitask as mt
    from hictc import train as trainmod

    out = data.gen_synthetic(data.SyntheticSpec())
    corpus = {}
    for u in out.train:
        for w in u.transcript:
            corpus[w] = corpus.get(w, 0) + 1
    vocab = tok.learn_bpe(corpus, target_size=200)
    lex = tok.build_lexicon(out.lexicon_entries)
    prepared = data.prepare(out.train, out.dev, vocab, lex, seed=0,
                            batch_sizes=(64,) * 5)
    cfg = enc.EncoderConfig(input_dim=8, num_layers=3, hidden_per_direction=32,
                            dropout_rate=0.1)
    model = mt.build_phone_model(cfg, lex.num_phones, seed=0)
    adam = trainmod.AdamConfig(lr=0.005, warm_updates=192)
    sched = trainmod.ScheduleConfig(checkpoint_interval=48, patience=10,
                                    window=3, max_checkpoints=20)
    result = trainmod.run_training(model, prepared, adam, sched, seed=0,
                                   select_by="per", stream="pretrain")
    assert result.best_score < 15.0, result.best_score
