"""Log-mel filter-bank features: 25 ms Hamming windows every 10 ms.

WAV ingestion is mono PCM16 only.  Features can be cached in a small binary
block format (magic ``EHFB``).
"""

from __future__ import annotations

import hashlib
import json
import struct
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class WavFormatError(ValueError):
    """The WAV header is unsupported or malformed; message names the field."""


class EmptyFeatureError(ValueError):
    """Audio is shorter than one analysis window."""


class FeatureFormatError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("audio buffer must be a non-empty 1-D sequence")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.clip(s, -1.0, 1.0)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40
    f_min: float = 0.0
    f_max: float | None = None
    log_floor: float = 1e-10
    pre_emphasis: float = 0.0

    def __post_init__(self):
        if self.hop_ms > self.window_ms:
            raise ValueError("hop_ms must not exceed window_ms")
        if self.n_fft & (self.n_fft - 1) or self.n_fft < self.window_samples:
            raise ValueError(f"n_fft={self.n_fft} must be a power of two >= {self.window_samples}")
        if not (self.f_min < self.upper_hz <= self.sample_rate / 2):
            raise ValueError("need f_min < f_max <= sample_rate / 2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def upper_hz(self) -> float:
        return self.sample_rate / 2 if self.f_max is None else self.f_max

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FeatureMatrix:
    values: np.ndarray                # frames x n_mels
    fingerprint: str = ""

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def load_wav(path) -> AudioBuffer:
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        # the stdlib reports compressed formats as "unknown format: N"
        raise WavFormatError(f"{path}: audio_format/header rejected ({exc})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: channels={channels}, only mono is supported")
    if width != 2:
        raise WavFormatError(f"{path}: bits_per_sample={8 * width}, only 16-bit PCM is supported")
    if rate <= 0:
        raise WavFormatError(f"{path}: sample_rate={rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise WavFormatError(f"{path}: data chunk holds no samples")
    return AudioBuffer(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# spectral analysis
# ---------------------------------------------------------------------------


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 FFT along the last axis (length must be a power of two)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError(f"fft length {n} is not a power of two")
    lead = x.shape[:-1]
    x = x[..., _bit_reverse(n)]
    m = 1
    while m < n:
        tw = np.exp(-2j * np.pi * np.arange(m) / (2 * m))
        blocks = x.reshape(lead + (n // (2 * m), 2, m))
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * tw
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return x


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    padded = np.zeros(frames.shape[:-1] + (n_fft,))
    padded[..., :frames.shape[-1]] = frames
    spec = fft(padded)[..., : n_fft // 2 + 1]
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(config: FeatureConfig) -> np.ndarray:
    pts = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.upper_hz), config.n_mels + 2)
    return mel_to_hz(pts[1:-1])


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape (n_mels, n_fft//2 + 1)."""
    pts = mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.upper_hz),
                                config.n_mels + 2))
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def frames_count(n_samples: int, config: FeatureConfig = FeatureConfig()) -> int:
    win, hop = config.window_samples, config.hop_samples
    if n_samples < win:
        raise EmptyFeatureError(f"{n_samples} samples is shorter than one {win}-sample window")
    return (n_samples - win) // hop + 1


def log_mel(buffer: AudioBuffer, config: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    if buffer.sample_rate != config.sample_rate:
        raise ValueError(f"expected {config.sample_rate} Hz audio, got {buffer.sample_rate}")
    x = buffer.samples
    if config.pre_emphasis:
        x = np.concatenate([x[:1], x[1:] - config.pre_emphasis * x[:-1]])
    n = frames_count(x.size, config)
    win, hop = config.window_samples, config.hop_samples
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]
    frames = frames * np.hamming(win)
    energies = power_spectrum(frames, config.n_fft) @ mel_filterbank(config).T
    return FeatureMatrix(np.log(np.maximum(energies, config.log_floor)), config.fingerprint())


def per_utterance_normalize(features: FeatureMatrix) -> FeatureMatrix:
    v = features.values
    return FeatureMatrix(v - v.mean(axis=0, keepdims=True), features.fingerprint)


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------

_EHFB_MAGIC = b"EHFB"
_EHFB_VERSION = 1
_EHFB_HEADER = struct.Struct("<4sIII")


def write_features(path, features: FeatureMatrix) -> None:
    v = np.ascontiguousarray(features.values, dtype="<f8")
    Path(path).write_bytes(_EHFB_HEADER.pack(_EHFB_MAGIC, _EHFB_VERSION, *v.shape) + v.tobytes())


def read_features(path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < _EHFB_HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header")
    magic, version, frames, mels = _EHFB_HEADER.unpack_from(blob)
    if magic != _EHFB_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != _EHFB_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    payload = blob[_EHFB_HEADER.size:]
    if len(payload) != frames * mels * 8:
        raise FeatureFormatError(f"{path}: payload holds {len(payload)} bytes, expected {frames * mels * 8}")
    return FeatureMatrix(np.frombuffer(payload, dtype="<f8").reshape(frames, mels).astype(np.float64))
