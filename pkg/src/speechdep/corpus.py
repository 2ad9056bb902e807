"""Synthetic sessions with PHQ-8 labels, speaker-disjoint splits and segmentation.

The generator stands in for a real labelled speech corpus.  Each speaker has a
latent severity; sessions carry a noisy PHQ-8 score around it.  Audio is a
sequence of tone-chord tokens drawn from a 10-symbol alphabet, and the token
rate and spectral tilt both move monotonically with severity.  The token
string doubles as the transcript for ASR pretraining.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dsp import AudioBuffer, load_wav, write_wav

ALPHABET = "abcdefghij"
SPLITS = ("train", "dev", "test")
PHQ8_MAX = 24
PHQ8_THRESHOLD = 10

# chord partials relative to each symbol's root
_PARTIALS = (1.0, 1.6, 2.7)


class CorpusError(ValueError):
    pass


class NoSegmentError(CorpusError):
    pass


@dataclass
class Response:
    wav_path: str
    transcript: str | None = None


@dataclass
class Session:
    speaker_id: str
    session_id: str
    responses: list[Response]
    phq8: int | None = None           # None when the label is withheld
    split: str | None = None

    def __post_init__(self):
        if not self.responses:
            raise CorpusError(f"session {self.session_id} has no responses")
        if self.phq8 is not None and not 0 <= self.phq8 <= PHQ8_MAX:
            raise CorpusError(f"session {self.session_id}: phq8={self.phq8} outside [0, 24]")


@dataclass(frozen=True)
class Segment:
    session_id: str
    response_index: int
    start: int                        # sample offsets, [start, stop)
    stop: int
    sample_rate: int = 16000

    @property
    def duration(self) -> float:
        return (self.stop - self.start) / self.sample_rate


@dataclass
class SplitManifest:
    splits: dict[str, set[str]]                  # split -> session ids
    speakers: dict[str, set[str]]                # split -> speaker ids

    def split_of(self, session_id: str) -> str:
        for name, ids in self.splits.items():
            if session_id in ids:
                return name
        raise KeyError(session_id)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def phq8_to_binary(score: int) -> int:
    """1 (+dep) when the PHQ-8 score is 10 or above, else 0 (-dep)."""
    if isinstance(score, bool) or int(score) != score or not 0 <= score <= PHQ8_MAX:
        raise CorpusError(f"PHQ-8 score {score!r} outside 0..24")
    return int(score >= PHQ8_THRESHOLD)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def segment_response(audio: AudioBuffer, session_id: str = "", response_index: int = 0,
                     max_seconds: float = 25.0, min_seconds: float = 1.0) -> list[Segment]:
    """Greedy contiguous cuts of ``max_seconds``; a tail shorter than ``min_seconds`` is dropped."""
    sr = audio.sample_rate
    n = audio.samples.size
    step = int(round(max_seconds * sr))
    shortest = int(round(min_seconds * sr))
    if n < shortest:
        raise NoSegmentError(f"{session_id or 'response'}: {n / sr:.3f} s is shorter than {min_seconds} s")
    segs = []
    for start in range(0, n, step):
        stop = min(start + step, n)
        if stop - start < shortest:
            break
        segs.append(Segment(session_id, response_index, start, stop, sr))
    return segs


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _split_counts(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * n for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    # every split gets at least one speaker
    for i in range(len(counts)):
        while counts[i] == 0:
            j = max(range(len(counts)), key=lambda k: counts[k])
            counts[j] -= 1
            counts[i] += 1
    return counts


def split_by_speaker(sessions: Iterable[Session], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitManifest:
    sessions = list(sessions)
    if len(ratios) != len(SPLITS) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios {ratios} must be three fractions summing to 1")
    speakers = sorted({s.speaker_id for s in sessions})
    if len(speakers) < len(SPLITS):
        raise CorpusError(f"{len(speakers)} speakers cannot fill {len(SPLITS)} disjoint splits")
    order = np.random.default_rng(seed).permutation(len(speakers))
    counts = _split_counts(len(speakers), ratios)
    spk_split: dict[str, str] = {}
    pos = 0
    for name, c in zip(SPLITS, counts):
        for i in order[pos:pos + c]:
            spk_split[speakers[i]] = name
        pos += c
    splits = {name: set() for name in SPLITS}
    spk_sets = {name: set() for name in SPLITS}
    for s in sessions:
        name = spk_split[s.speaker_id]
        splits[name].add(s.session_id)
        spk_sets[name].add(s.speaker_id)
    return SplitManifest(splits, spk_sets)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    n_speakers: int = 200
    sessions_per_speaker: tuple[int, int] = (1, 3)
    responses_per_session: tuple[int, int] = (2, 3)
    response_seconds: tuple[float, float] = (2.0, 3.5)
    sample_rate: int = 16000
    seed: int = 0
    rate_coupling: float = 0.5        # 0 disables the severity -> token-rate link
    tilt_coupling: float = 0.3        # 0 disables the severity -> spectral-tilt link
    label_noise_std: float = 2.0
    prevalence: float = 0.25          # target fraction of +dep sessions
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    token_jitter: float = 0.2
    speaker_rate_std: float = 0.2
    speaker_tilt_std: float = 0.3
    noise_level: float = 0.003

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise CorpusError(f"prevalence target {self.prevalence} must lie in (0, 1)")
        if self.n_speakers < len(SPLITS):
            raise CorpusError("need at least three speakers")

    def severity_exponent(self) -> float:
        """Power p of the skewed draw ``s = 24 * u**p`` that hits the prevalence target."""
        cut = (PHQ8_THRESHOLD - 0.5) / PHQ8_MAX
        p = math.log(cut) / math.log(1.0 - self.prevalence)
        if p < 1.0:
            raise CorpusError(
                f"prevalence {self.prevalence} is unsatisfiable with a low-skewed severity draw "
                f"(maximum {1 - cut:.3f})")
        return p

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown corpus config keys: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv)

    def to_dict(self) -> dict:
        return asdict(self)


def symbol_roots(n: int = len(ALPHABET)) -> np.ndarray:
    return 220.0 * 2.0 ** (np.arange(n) * 0.33)


def mean_token_seconds(severity: float, coupling: float) -> float:
    """Mean token duration: 0.15 s at severity 0 up to 0.40 s at 24 with full coupling."""
    return 0.275 + coupling * 0.125 * (2.0 * severity / PHQ8_MAX - 1.0)


def spectral_tilt(severity: float, coupling: float) -> float:
    return 0.5 + coupling * severity / PHQ8_MAX


def synthesize_tokens(tokens: Sequence[int], durations: Sequence[float], tilt: float,
                      pitch: float, rng: np.random.Generator, sample_rate: int = 16000,
                      noise_level: float = 0.003) -> np.ndarray:
    roots = symbol_roots()
    pieces = []
    ramp = int(0.01 * sample_rate)
    for tok, dur in zip(tokens, durations):
        n = int(round(dur * sample_rate))
        t = np.arange(n) / sample_rate
        freqs = roots[tok] * pitch * np.asarray(_PARTIALS)
        amps = (freqs / 1000.0) ** (-tilt)
        amps = 0.2 * amps / np.sqrt((amps ** 2).sum())
        phases = rng.uniform(0, 2 * np.pi, size=len(freqs))
        sig = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
        env = np.ones(n)
        r = min(ramp, n // 2)
        if r:
            fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            env[:r] = fade
            env[n - r:] = fade[::-1]
        pieces.append(sig * env)
    x = np.concatenate(pieces)
    return x + noise_level * rng.standard_normal(x.size)


@dataclass
class GeneratedCorpus:
    root: Path
    sessions: list[Session]
    manifest: SplitManifest
    config: SyntheticCorpusConfig
    severities: dict[str, float] = field(default_factory=dict)     # speaker -> latent severity


def generate_synthetic_corpus(config: SyntheticCorpusConfig, out_dir) -> GeneratedCorpus:
    """Write WAV files, ``manifest.jsonl`` and ``stats.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    expo = config.severity_exponent()
    sessions: list[Session] = []
    severities = {}
    for k in range(config.n_speakers):
        spk = f"spk{k:04d}"
        sev = PHQ8_MAX * rng.uniform() ** expo
        severities[spk] = sev
        rate_factor = math.exp(config.speaker_rate_std * rng.standard_normal())
        tilt = spectral_tilt(sev, config.tilt_coupling) + config.speaker_tilt_std * rng.standard_normal()
        pitch = rng.uniform(0.92, 1.08)
        mean_dur = mean_token_seconds(sev, config.rate_coupling) * rate_factor
        lo, hi = config.sessions_per_speaker
        for j in range(int(rng.integers(lo, hi + 1))):
            sid = f"{spk}_s{j}"
            phq = int(np.clip(round(sev + config.label_noise_std * rng.standard_normal()), 0, PHQ8_MAX))
            responses = []
            rlo, rhi = config.responses_per_session
            for r in range(int(rng.integers(rlo, rhi + 1))):
                target = rng.uniform(*config.response_seconds)
                tokens, durs, total, prev = [], [], 0.0, -1
                while total < target:
                    if prev < 0:
                        tok = int(rng.integers(0, len(ALPHABET)))
                    else:
                        tok = int(rng.integers(0, len(ALPHABET) - 1))
                        tok += tok >= prev        # no immediate repeats
                    d = float(np.clip(mean_dur * rng.uniform(1 - config.token_jitter, 1 + config.token_jitter),
                                      0.15, 0.40))
                    tokens.append(tok)
                    durs.append(d)
                    total += d
                    prev = tok
                audio = synthesize_tokens(tokens, durs, tilt, pitch, rng, config.sample_rate,
                                          config.noise_level)
                rel = f"wav/{sid}_r{r}.wav"
                write_wav(out / rel, AudioBuffer(audio, config.sample_rate))
                responses.append(Response(rel, "".join(ALPHABET[t] for t in tokens)))
            sessions.append(Session(spk, sid, responses, phq))
    manifest = split_by_speaker(sessions, config.split_ratios, config.seed)
    for s in sessions:
        s.split = manifest.split_of(s.session_id)
    write_manifest(out / "manifest.jsonl", sessions)
    (out / "stats.csv").write_text(stats_csv(corpus_stats(sessions)))
    (out / "corpus_config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")
    return GeneratedCorpus(out, sessions, manifest, config, severities)


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------


def write_manifest(path, sessions: Sequence[Session]) -> None:
    lines = []
    for s in sessions:
        lines.append(json.dumps({
            "speaker_id": s.speaker_id,
            "session_id": s.session_id,
            "split": s.split,
            "phq8": s.phq8,
            "responses": [{"wav_path": r.wav_path, "transcript": r.transcript} for r in s.responses],
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path, reveal_test: bool = False) -> list[Session]:
    """Read a manifest; test-split labels are withheld unless ``reveal_test``."""
    sessions = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            responses = [Response(r["wav_path"], r.get("transcript")) for r in d["responses"]]
            split = d.get("split")
            phq = d.get("phq8")
            if split == "test" and not reveal_test:
                phq = None
            sessions.append(Session(d["speaker_id"], d["session_id"], responses, phq, split))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
    return sessions


def manifest_from_sessions(sessions: Sequence[Session]) -> SplitManifest:
    splits = {name: set() for name in SPLITS}
    speakers = {name: set() for name in SPLITS}
    for s in sessions:
        splits[s.split].add(s.session_id)
        speakers[s.split].add(s.speaker_id)
    return SplitManifest(splits, speakers)


def withhold_labels(sessions: Sequence[Session], split: str = "test") -> list[Session]:
    return [replace(s, phq8=None) if s.split == split else s for s in sessions]


def load_response_audio(root, response: Response) -> AudioBuffer:
    return load_wav(Path(root) / response.wav_path)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def corpus_stats(sessions: Sequence[Session]) -> dict[str, dict[str, int]]:
    """Responses and sessions per split, total and +dep (Table-1 layout)."""
    cols = {}
    for name in SPLITS:
        cols[name] = {"responses": 0, "sessions": 0}
        cols[name + " +dep"] = {"responses": 0, "sessions": 0}
    for s in sessions:
        if s.split not in SPLITS:
            continue
        cols[s.split]["sessions"] += 1
        cols[s.split]["responses"] += len(s.responses)
        if s.phq8 is not None and phq8_to_binary(s.phq8):
            cols[s.split + " +dep"]["sessions"] += 1
            cols[s.split + " +dep"]["responses"] += len(s.responses)
    return cols


def stats_csv(stats: dict[str, dict[str, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(stats)
    w.writerow(["row"] + names)
    for row in ("responses", "sessions"):
        w.writerow([row] + [stats[n][row] for n in names])
    return buf.getvalue()
