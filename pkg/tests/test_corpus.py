import filecmp
import wave
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from speechdep.corpus import (CorpusError, NoSegmentError, Response, Session, SyntheticCorpusConfig,
                              corpus_stats, generate_synthetic_corpus, load_manifest,
                              phq8_to_binary, segment_response, split_by_speaker)
from speechdep.dsp import AudioBuffer
from speechdep.metrics import auc

SMALL = SyntheticCorpusConfig(n_speakers=12, seed=3)


def _sessions(n_speakers, per=2):
    return [Session(f"spk{k}", f"spk{k}_s{j}", [Response("x.wav")], 5)
            for k in range(n_speakers) for j in range(per)]


def test_phq8_boundaries():
    assert phq8_to_binary(10) == 1
    assert phq8_to_binary(9) == 0
    assert phq8_to_binary(0) == 0
    for bad in (-1, 25, 3.5, True):
        with pytest.raises(CorpusError):
            phq8_to_binary(bad)


def test_phq8_monotone():
    classes = [phq8_to_binary(s) for s in range(25)]
    assert classes == sorted(classes)


@pytest.mark.parametrize("seconds,expect", [(60, [25, 25, 10]), (25, [25]), (50.5, [25, 25])])
def test_segment_durations(seconds, expect):
    audio = AudioBuffer(np.zeros(int(seconds * 16000)))
    assert [s.duration for s in segment_response(audio)] == expect


def test_segment_too_short():
    with pytest.raises(NoSegmentError):
        segment_response(AudioBuffer(np.zeros(15999)))


@given(n=st.integers(16000, 16000 * 90))
def test_segments_cover_response(n):
    segs = segment_response(AudioBuffer(np.zeros(n)))
    assert all(s.duration <= 25 for s in segs)
    assert segs[0].start == 0
    assert all(a.stop == b.start for a, b in zip(segs, segs[1:]))
    assert n - segs[-1].stop < 16000


def test_split_three_speakers():
    m = split_by_speaker(_sessions(3), (1 / 3, 1 / 3, 1 / 3), seed=0)
    assert all(len(v) == 1 for v in m.speakers.values())


def test_split_disjoint_and_deterministic():
    sess = _sessions(100)
    m = split_by_speaker(sess, (0.8, 0.1, 0.1), seed=5)
    names = list(m.speakers)
    for i in range(3):
        for j in range(i + 1, 3):
            assert not m.speakers[names[i]] & m.speakers[names[j]]
    assert sum(len(v) for v in m.splits.values()) == len(sess)
    assert m == split_by_speaker(sess, (0.8, 0.1, 0.1), seed=5)


def test_split_needs_three_speakers():
    with pytest.raises(CorpusError):
        split_by_speaker(_sessions(2), (0.6, 0.2, 0.2))


def test_unsatisfiable_prevalence():
    with pytest.raises(CorpusError):
        SyntheticCorpusConfig(prevalence=0.7).severity_exponent()


def test_config_rejects_unknown_keys():
    with pytest.raises(CorpusError):
        SyntheticCorpusConfig.from_dict({"n_speakers": 3, "bogus": 1})


def test_generation_is_byte_identical(tmp_path):
    generate_synthetic_corpus(SMALL, tmp_path / "a")
    generate_synthetic_corpus(SMALL, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for f in (tmp_path / "a" / "wav").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "wav" / f.name).read_bytes()


def test_generated_corpus_contract(tmp_path):
    g = generate_synthetic_corpus(SMALL, tmp_path)
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == len(g.sessions)
    for s in g.sessions:
        for r in s.responses:
            assert set(r.transcript) <= set("abcdefghij")
            assert all(a != b for a, b in zip(r.transcript, r.transcript[1:]))
            with wave.open(str(tmp_path / r.wav_path)) as w:
                assert w.getframerate() == 16000 and w.getnchannels() == 1


def test_manifest_withholds_test_labels(tmp_path):
    generate_synthetic_corpus(SMALL, tmp_path)
    hidden = load_manifest(tmp_path / "manifest.jsonl")
    shown = load_manifest(tmp_path / "manifest.jsonl", reveal_test=True)
    assert all(s.phq8 is None for s in hidden if s.split == "test")
    assert all(s.phq8 is not None for s in shown)
    assert any(s.split == "test" for s in shown)


def test_stats_recount(tmp_path):
    g = generate_synthetic_corpus(SMALL, tmp_path)
    stats = corpus_stats(g.sessions)
    for split in ("train", "dev", "test"):
        mine = [s for s in g.sessions if s.split == split]
        assert stats[split]["sessions"] == len(mine)
        assert stats[split]["responses"] == sum(len(s.responses) for s in mine)
        pos = [s for s in mine if s.phq8 >= 10]
        assert stats[split + " +dep"]["sessions"] == len(pos)
        assert stats[split + " +dep"]["sessions"] <= stats[split]["sessions"]
    csv_rows = (tmp_path / "stats.csv").read_text().splitlines()
    assert csv_rows[0].startswith("row,train,train +dep")


def test_empty_split_stats():
    stats = corpus_stats([])
    assert all(v == {"responses": 0, "sessions": 0} for v in stats.values())


def test_default_prevalence():
    cfg = SyntheticCorpusConfig()
    rng = np.random.default_rng(0)
    sev = 24 * rng.uniform(size=200_000) ** cfg.severity_exponent()
    phq = np.clip(np.round(sev + cfg.label_noise_std * rng.normal(size=sev.size)), 0, 24)
    assert 0.2 <= (phq >= 10).mean() <= 0.3


def _token_rates(g, root):
    rates = []
    for s in g.sessions:
        n = sum(len(r.transcript) for r in s.responses)
        secs = 0.0
        for r in s.responses:
            with wave.open(str(Path(root) / r.wav_path)) as w:
                secs += w.getnframes() / w.getframerate()
        rates.append(n / secs)
    return np.array(rates)


def test_oracle_rate_classifier(tmp_path):
    cfg = SyntheticCorpusConfig(n_speakers=80, label_noise_std=0.0, rate_coupling=1.0,
                                speaker_rate_std=0.05, seed=4, response_seconds=(1.5, 2.0))
    g = generate_synthetic_corpus(cfg, tmp_path)
    y = [phq8_to_binary(s.phq8) for s in g.sessions]
    assert auc(-_token_rates(g, tmp_path), y) > 0.9
