"""Networks: CNN+LSTM encoder, attention ASR decoder with CTC projection,
RCNN segment head, and the max-pool segment-fusion MLP.

Parameter names are namespaced by owner (``encoder.``, ``decoder.``,
``ctc_head.``, ``head.``, ``fusion.``); encoder-only transfer relies on it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .corpus import ALPHABET
from .nn import Linear, Module, ModuleList, Parameter, xavier_uniform
from .tensor import Tensor, ShapeError

NAMESPACES = ("encoder.", "decoder.", "ctc_head.", "head.", "fusion.")


class TaskKind(str, Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


class TooShortError(ValueError):
    pass


class AlphabetError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 40
    conv_channels: tuple[int, ...] = (16, 32)
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (2, 2)          # (time, frequency) per conv layer
    lstm_layers: int = 2
    hidden: int = 64

    def conv_out(self, frames: int, bins: int) -> tuple[int, int]:
        for _ in self.conv_channels:
            frames = T.conv_out_len(frames, self.kernel[0], self.stride[0])
            bins = T.conv_out_len(bins, self.kernel[1], self.stride[1])
        return frames, bins

    def out_frames(self, frames: np.ndarray | int):
        f = np.asarray(frames)
        for _ in self.conv_channels:
            f = (f - self.kernel[0]) // self.stride[0] + 1
        return f

    @property
    def min_frames(self) -> int:
        n = 1
        for _ in self.conv_channels:
            n = (n - 1) * self.stride[0] + self.kernel[0]
        return n


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    alphabet: str = ALPHABET
    decoder_hidden: int = 64
    embed_dim: int = 32
    attention_dim: int = 64
    head_kind: str = "rcnn"                   # "rcnn" or "pool_mlp"
    rcnn_hidden: int = 32
    rcnn_proj: int = 64
    segment_embedding: int = 32
    fusion_hidden: int = 32
    task: TaskKind = TaskKind.CLASSIFICATION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = TaskKind(self.task).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", {})
        enc = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()})
        d["task"] = TaskKind(d.get("task", "classification"))
        return cls(encoder=enc, **d)


def _lstm_params(mod: Module, d_in: int, hidden: int, rng, dtype):
    mod.w_ih = Parameter(xavier_uniform(rng, (d_in, 4 * hidden), d_in, 4 * hidden, dtype))
    mod.w_hh = Parameter(xavier_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden, dtype))
    b = np.zeros(4 * hidden, dtype=dtype)
    b[hidden:2 * hidden] = 1.0       # forget-gate bias
    mod.bias = Parameter(b)


class LSTMLayer(Module):
    def __init__(self, d_in: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        self.hidden = hidden
        _lstm_params(self, d_in, hidden, rng, dtype)

    def __call__(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        return T.lstm_sequence(x @ self.w_ih + self.bias, self.w_hh, lengths)


class LSTMCell(Module):
    def __init__(self, d_in: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        self.hidden = hidden
        _lstm_params(self, d_in, hidden, rng, dtype)

    def __call__(self, x: Tensor, state):
        return T.lstm_step(x, state, self.w_ih, self.w_hh, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride, rng, dtype=np.float64):
        super().__init__()
        kh, kw = kernel
        fan_in, fan_out = c_in * kh * kw, c_out * kh * kw
        self.weight = Parameter(xavier_uniform(rng, (c_out, c_in, kh, kw), fan_in, fan_out, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.stride = tuple(stride)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


def _reverse_index(lengths: np.ndarray, steps: int):
    """Index arrays that reverse each row within its own length (an involution)."""
    t = np.arange(steps)[None, :]
    ln = np.asarray(lengths)[:, None]
    rev = np.where(t < ln, ln - 1 - t, t)
    rows = np.broadcast_to(np.arange(len(lengths))[:, None], rev.shape)
    return rows, rev


def time_mask(lengths: np.ndarray, steps: int) -> np.ndarray:
    return np.arange(steps)[None, :] < np.asarray(lengths)[:, None]


class Encoder(Module):
    """Conv stack over (time, mel) followed by stacked LSTMs."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.config = config
        self.conv = ModuleList()
        c_in = 1
        for c_out in config.conv_channels:
            self.conv.append(Conv2d(c_in, c_out, config.kernel, config.stride, rng, dtype))
            c_in = c_out
        _, bins = config.conv_out(config.min_frames, config.n_mels)
        d_in = c_in * bins if config.conv_channels else config.n_mels
        self.lstm = ModuleList()
        for _ in range(config.lstm_layers):
            self.lstm.append(LSTMLayer(d_in, config.hidden, rng, dtype))
            d_in = config.hidden

    @property
    def output_dim(self) -> int:
        return self.config.hidden

    def __call__(self, feats, lengths=None) -> tuple[Tensor, np.ndarray]:
        """``feats`` is (B, frames, n_mels) (or a single frames x n_mels matrix).

        Returns hidden states (B, T', hidden) and the per-row valid lengths T'.
        """
        x = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        B, frames, bins = x.shape
        if bins != self.config.n_mels:
            raise ShapeError(f"encoder expects {self.config.n_mels} mel bins, got {bins}")
        lengths = np.full(B, frames) if lengths is None else np.asarray(lengths)
        short = lengths < self.config.min_frames
        if short.any():
            raise TooShortError(
                f"{int(lengths[short].min())} frames is below the encoder minimum of {self.config.min_frames}")
        if self.config.conv_channels:
            h = x.reshape(B, 1, frames, bins)
            for conv in self.conv:
                h = T.relu(conv(h))
            _, C, Tp, F = h.shape
            h = h.transpose(0, 2, 1, 3).reshape(B, Tp, C * F)
            lengths = self.config.out_frames(lengths)
        else:
            h = x
        for layer in self.lstm:
            h = layer(h, lengths)
        return h, lengths


class CtcHead(Module):
    def __init__(self, d_in: int, n_symbols: int, rng, dtype=np.float64):
        super().__init__()
        self.proj = Linear(d_in, n_symbols + 1, rng, dtype)     # blank is the last index

    def __call__(self, hidden: Tensor) -> Tensor:
        return self.proj(hidden)


class AsrDecoder(Module):
    """Single-layer LSTM decoder with additive attention, teacher forced."""

    def __init__(self, enc_dim: int, n_symbols: int, config: ModelConfig, rng, dtype=np.float64):
        super().__init__()
        self.n_symbols = n_symbols
        E, D, A = config.embed_dim, config.decoder_hidden, config.attention_dim
        # index n_symbols is the start-of-sequence token
        self.embed = Parameter(rng.uniform(-0.1, 0.1, size=(n_symbols + 1, E)).astype(dtype))
        self.cell = LSTMCell(E + enc_dim, D, rng, dtype)
        self.att_enc = Parameter(xavier_uniform(rng, (enc_dim, A), enc_dim, A, dtype))
        self.att_dec = Parameter(xavier_uniform(rng, (D, A), D, A, dtype))
        self.att_bias = Parameter(np.zeros(A, dtype=dtype))
        self.att_v = Parameter(xavier_uniform(rng, (A, 1), A, 1, dtype))
        self.out = Linear(D + enc_dim, n_symbols, rng, dtype)

    def __call__(self, hidden: Tensor, lengths: np.ndarray, labels: np.ndarray):
        """``labels`` is (B, L) int; returns logits (B, L, A) and attention maps (B, L, T')."""
        B, Tn, H = hidden.shape
        L = labels.shape[1]
        D = self.cell.hidden
        mask = time_mask(lengths, Tn)
        enc_proj = hidden @ self.att_enc + self.att_bias
        prev = np.concatenate([np.full((B, 1), self.n_symbols), labels[:, :-1]], axis=1)
        h = T.zeros((B, D), dtype=hidden.dtype)
        c = T.zeros((B, D), dtype=hidden.dtype)
        ctx = T.zeros((B, H), dtype=hidden.dtype)
        logits, maps = [], []
        for j in range(L):
            emb = self.embed[prev[:, j]]
            h, c = self.cell(T.concat([emb, ctx], axis=1), (h, c))
            dec = T.broadcast_to((h @ self.att_dec).reshape(B, 1, -1), enc_proj.shape)
            energy = (T.tanh(enc_proj + dec) @ self.att_v).reshape(B, Tn)
            alpha = T.softmax(energy, axis=1, mask=mask)
            ctx = T.matmul(alpha.reshape(B, 1, Tn), hidden).reshape(B, H)
            logits.append(self.out(T.concat([h, ctx], axis=1)))
            maps.append(alpha)
        return T.stack(logits, axis=1), T.stack(maps, axis=1)


class RcnnHead(Module):
    """Recurrent-convolutional head: bi-LSTM context around each frame, a
    per-step tanh projection, max-pool over time, then a dense embedding."""

    def __init__(self, enc_dim: int, config: ModelConfig, rng, dtype=np.float64):
        super().__init__()
        R = config.rcnn_hidden
        self.fwd = LSTMLayer(enc_dim, R, rng, dtype)
        self.bwd = LSTMLayer(enc_dim, R, rng, dtype)
        self.proj = Linear(2 * R + enc_dim, config.rcnn_proj, rng, dtype)
        self.dense = Linear(config.rcnn_proj, config.segment_embedding, rng, dtype)
        self.out = Linear(config.segment_embedding, 1, rng, dtype)

    def __call__(self, hidden: Tensor, lengths: np.ndarray) -> tuple[Tensor, Tensor]:
        B, Tn, _ = hidden.shape
        left = self.fwd(hidden, lengths)
        rows, rev = _reverse_index(lengths, Tn)
        right = self.bwd(hidden[rows, rev], lengths)[rows, rev]
        y = T.tanh(self.proj(T.concat([left, hidden, right], axis=2)))
        mask = np.broadcast_to(time_mask(lengths, Tn)[..., None], y.shape)
        pooled = T.reduce_max(y, axis=1, mask=mask)
        emb = T.tanh(self.dense(pooled))
        return self.out(emb).reshape(B), emb


class PoolMlpHead(Module):
    """Baseline head: max-pool the recurrent states, then two dense layers."""

    def __init__(self, enc_dim: int, config: ModelConfig, rng, dtype=np.float64):
        super().__init__()
        self.dense = Linear(enc_dim, config.segment_embedding, rng, dtype)
        self.out = Linear(config.segment_embedding, 1, rng, dtype)

    def __call__(self, hidden: Tensor, lengths: np.ndarray) -> tuple[Tensor, Tensor]:
        B, Tn, _ = hidden.shape
        mask = np.broadcast_to(time_mask(lengths, Tn)[..., None], hidden.shape)
        emb = T.tanh(self.dense(T.reduce_max(hidden, axis=1, mask=mask)))
        return self.out(emb).reshape(B), emb


class FusionMlp(Module):
    def __init__(self, d_in: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        self.hidden = Linear(d_in, hidden, rng, dtype)
        self.out = Linear(hidden, 1, rng, dtype)

    def __call__(self, embeddings, counts=None) -> Tensor:
        """``embeddings`` is (S, N, E) padded per session with ``counts`` valid rows,
        or a single (N, E) list of one session's segments."""
        e = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings))
        if e.ndim == 2:
            e = e.reshape(1, *e.shape)
        S, N, E = e.shape
        if N == 0:
            raise ShapeError("fusion needs at least one segment embedding")
        counts = np.full(S, N) if counts is None else np.asarray(counts)
        if (counts < 1).any():
            raise ShapeError("fusion needs at least one segment embedding per session")
        mask = np.broadcast_to(time_mask(counts, N)[..., None], e.shape)
        pooled = T.reduce_max(e, axis=1, mask=mask)
        return self.out(T.relu(self.hidden(pooled))).reshape(S)


def _check_labels(labels, n_symbols: int) -> None:
    arr = np.asarray(labels)
    if arr.size and (arr.min() < 0 or arr.max() >= n_symbols):
        raise AlphabetError(f"label symbol outside alphabet of size {n_symbols}")


def encode_transcript(text: str, alphabet: str = ALPHABET) -> np.ndarray:
    bad = [ch for ch in text if ch not in alphabet]
    if bad:
        raise AlphabetError(f"transcript symbols {sorted(set(bad))} are outside the alphabet")
    return np.array([alphabet.index(ch) for ch in text], dtype=np.int64)


class PretrainModel(Module):
    """Encoder + attention decoder + CTC projection (ASR pretraining only)."""

    kind = "asr_pretrain"

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(config.encoder, rng, dtype)
        A = len(config.alphabet)
        self.decoder = AsrDecoder(self.encoder.output_dim, A, config, rng, dtype)
        self.ctc_head = CtcHead(self.encoder.output_dim, A, rng, dtype)

    def asr_forward(self, feats, lengths, labels: np.ndarray):
        """Returns (CTC log-probs (B,T',A+1), T' lengths, attention logits (B,L,A), attention maps)."""
        labels = np.atleast_2d(np.asarray(labels))
        _check_labels(labels, len(self.config.alphabet))
        if labels.shape[1] < 1:
            raise ValueError("transcript must hold at least one symbol")
        hidden, out_len = self.encoder(feats, lengths)
        ctc_lp = T.log_softmax(self.ctc_head(hidden), axis=-1)
        att_logits, maps = self.decoder(hidden, out_len, labels)
        return ctc_lp, out_len, att_logits, maps

    def ctc_log_probs(self, feats, lengths=None):
        hidden, out_len = self.encoder(feats, lengths)
        return T.log_softmax(self.ctc_head(hidden), axis=-1), out_len


class DepressionModel(Module):
    """Runtime model: encoder + segment head + segment fusion.  No ASR parts."""

    kind = "depression"

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(config.encoder, rng, dtype)
        head_cls = {"rcnn": RcnnHead, "pool_mlp": PoolMlpHead}[config.head_kind]
        self.head = head_cls(self.encoder.output_dim, config, rng, dtype)
        self.fusion = FusionMlp(config.segment_embedding, config.fusion_hidden, rng, dtype)

    def segment_forward(self, feats, lengths=None) -> tuple[Tensor, Tensor]:
        """Per-segment (prediction, embedding)."""
        hidden, out_len = self.encoder(feats, lengths)
        return self.head(hidden, out_len)

    def fusion_forward(self, embeddings, counts=None) -> Tensor:
        return self.fusion(embeddings, counts)

    def predict_session(self, segment_feats: list[np.ndarray]) -> float:
        """Session output for a list of per-segment feature matrices (probability
        for classification, PHQ-8 estimate for regression)."""
        with T.no_grad():
            embs = [self.segment_forward(f)[1].data[0] for f in segment_feats]
            out = self.fusion_forward(np.stack(embs)).item()
        if TaskKind(self.config.task) is TaskKind.CLASSIFICATION:
            return float(1.0 / (1.0 + np.exp(-out)))
        return out


def greedy_ctc_decode(log_probs, blank: int | None = None, alphabet: str | None = None):
    """Per-frame argmax, collapse repeats, drop blanks.  Returns symbol ids, or a
    string when ``alphabet`` is given."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    blank = lp.shape[-1] - 1 if blank is None else blank
    best = lp.argmax(axis=-1)
    out, prev = [], None
    for k in best:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    if alphabet is not None:
        return "".join(alphabet[k] for k in out)
    return out


def parameter_census(model: Module) -> dict[str, int]:
    """Parameter counts per top-level namespace, plus ``total``."""
    counts: dict[str, int] = {}
    for name, p in model.parameters().items():
        ns = name.split(".", 1)[0]
        counts[ns] = counts.get(ns, 0) + p.size
    counts["total"] = sum(counts.values())
    return counts
