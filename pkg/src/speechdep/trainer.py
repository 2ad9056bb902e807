"""Training loops: ASR pretraining, the two-stage downstream model, and the
multi-arm, multi-seed comparison harness."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import (Checkpoint, FreezePolicy, apply_freeze, load_into, save_checkpoint,
                         transfer_encoder)
from .corpus import (NoSegmentError, Session, SyntheticCorpusConfig, generate_synthetic_corpus,
                     load_manifest, load_response_audio, phq8_to_binary, segment_response)
from .dsp import AudioBuffer, FeatureConfig, log_mel, per_utterance_normalize
from .losses import attention_ce, ctc_loss_batch, downstream_loss, hybrid_loss
from .metrics import (MetricsReport, auc, classification_report, corpus_cer, delong_test,
                      regression_metrics, regression_report, render_report)
from .models import (DepressionModel, EncoderConfig, ModelConfig, PretrainModel, TaskKind,
                     encode_transcript, greedy_ctc_decode)
from .optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class LabelLeakError(RuntimeError):
    """Training code was handed sessions whose test labels are visible."""


def _from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 20
    patience: int = 4                 # epochs without dev improvement before stopping
    lr: float = 1e-3
    seed: int = 0
    freeze_policy: str | None = None
    task: str = "classification"
    ctc_weight: float = 0.5
    clip_norm: float = 5.0
    fusion_epochs: int = 100
    fusion_patience: int = 15
    fusion_lr: float = 3e-3
    dtype: str = "float32"            # training precision; checkpoints are always float64

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight {self.ctc_weight} outside [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.freeze_policy is not None:
            FreezePolicy(self.freeze_policy)
        TaskKind(self.task)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    from_dict = classmethod(_from_dict)

    def to_dict(self) -> dict:
        return asdict(self)


class ExperimentArm(str, Enum):
    SCRATCH = "scratch"
    TL1 = "tl1"
    TL2 = "tl2"
    LSTM_BASELINE = "lstm_baseline"

    @property
    def label(self) -> str:
        return {"scratch": "EH-AC", "tl1": "EH-AC+TL-1", "tl2": "EH-AC+TL-2",
                "lstm_baseline": "LSTM"}[self.value]


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


@dataclass
class SessionFeatures:
    session_id: str
    speaker_id: str
    split: str | None
    phq8: int | None
    segments: list[np.ndarray]
    transcripts: list[str | None]     # one per segment, None when not aligned

    def target(self, task) -> float:
        if self.phq8 is None:
            raise LabelLeakError(f"session {self.session_id} has no visible label")
        if TaskKind(task) is TaskKind.CLASSIFICATION:
            return float(phq8_to_binary(self.phq8))
        return float(self.phq8)


def featurize_audio(audio: AudioBuffer, config: FeatureConfig) -> np.ndarray:
    return per_utterance_normalize(log_mel(audio, config)).values


def featurize_sessions(root, sessions: Sequence[Session], config: FeatureConfig = FeatureConfig(),
                       max_seconds: float = 25.0, min_seconds: float = 1.0) -> list[SessionFeatures]:
    """Segment every response and compute normalised log-mel features per segment."""
    out = []
    for s in sessions:
        segs, texts = [], []
        for r, resp in enumerate(s.responses):
            audio = load_response_audio(root, resp)
            try:
                cuts = segment_response(audio, s.session_id, r, max_seconds, min_seconds)
            except NoSegmentError:
                continue
            for cut in cuts:
                segs.append(featurize_audio(AudioBuffer(audio.samples[cut.start:cut.stop], audio.sample_rate),
                                            config))
                # a transcript only lines up with audio that was not cut
                texts.append(resp.transcript if len(cuts) == 1 else None)
        if not segs:
            raise DataError(f"session {s.session_id} has zero segments of at least {min_seconds} s")
        out.append(SessionFeatures(s.session_id, s.speaker_id, s.split, s.phq8, segs, texts))
    return out


def pad_batch(mats: Sequence[np.ndarray], dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([m.shape[0] for m in mats])
    x = np.zeros((len(mats), lengths.max()) + mats[0].shape[1:], dtype=dtype)
    for i, m in enumerate(mats):
        x[i, :m.shape[0]] = m
    return x, lengths


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _snapshot(model) -> OrderedDict:
    return OrderedDict((k, p.data.copy()) for k, p in model.parameters().items())


def _restore(model, snap) -> None:
    for k, p in model.parameters().items():
        p.data = snap[k].copy()


def _write_csv(path, rows: list[dict]) -> None:
    if path is None or not rows:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _fmt(v):
    return float(f"{v:.10g}") if isinstance(v, float) else v


# ---------------------------------------------------------------------------
# ASR pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int
    dev_cer: float


def _asr_items(data: Sequence[SessionFeatures], split: str, alphabet: str):
    items = []
    for s in data:
        if s.split != split:
            continue
        for feats, text in zip(s.segments, s.transcripts):
            if text is None:
                continue
            if not text:
                raise DataError(f"session {s.session_id}: empty transcript")
            items.append((feats, encode_transcript(text, alphabet), text))
    return items


def _asr_batch(model: PretrainModel, items, idx, cfg: TrainConfig):
    feats, lengths = pad_batch([items[i][0] for i in idx], cfg.np_dtype)
    labs = [items[i][1] for i in idx]
    L = max(len(l) for l in labs)
    lab_arr = np.zeros((len(idx), L), dtype=np.int64)
    for j, l in enumerate(labs):
        lab_arr[j, :len(l)] = l
    ctc_lp, out_len, att_logits, _ = model.asr_forward(feats, lengths, lab_arr)
    ctc = ctc_loss_batch(ctc_lp, out_len, labs)
    att = attention_ce(att_logits, lab_arr, np.array([len(l) for l in labs]))
    return hybrid_loss(ctc, att, cfg.ctc_weight), ctc_lp, out_len


def _asr_dev(model: PretrainModel, items, cfg: TrainConfig) -> tuple[float, float]:
    total, refs, hyps = 0.0, [], []
    with T.no_grad():
        for idx in _batches(len(items), cfg.batch_size, None):
            loss, lp, out_len = _asr_batch(model, items, idx, cfg)
            total += loss.item() * len(idx)
            for j, i in enumerate(idx):
                hyps.append(greedy_ctc_decode(lp.data[j, :out_len[j]], alphabet=model.config.alphabet))
                refs.append(items[i][2])
    return total / len(items), corpus_cer(refs, hyps)


def pretrain_asr(data: Sequence[SessionFeatures], model_config: ModelConfig, cfg: TrainConfig,
                 log_path=None) -> PretrainResult:
    """Train encoder + decoder + CTC projection with the hybrid objective.

    The checkpoint with the lowest dev loss is returned; dev CER is logged per epoch.
    """
    policy = FreezePolicy(cfg.freeze_policy or FreezePolicy.TL1)
    train = _asr_items(data, "train", model_config.alphabet)
    dev = _asr_items(data, "dev", model_config.alphabet)
    if not train or not dev:
        raise DataError("pretraining needs transcribed train and dev utterances")
    model = PretrainModel(model_config, seed=cfg.seed, dtype=cfg.np_dtype)
    apply_freeze(model, policy)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    dev_loss, dev_cer = _asr_dev(model, dev, cfg)
    rows = [{"epoch": 0, "train_loss": "", "dev_loss": _fmt(dev_loss), "dev_cer": _fmt(dev_cer)}]
    best = (dev_loss, 0, dev_cer, _snapshot(model))
    for epoch in range(1, cfg.max_epochs + 1):
        run = 0.0
        for idx in _batches(len(train), cfg.batch_size, rng):
            loss, _, _ = _asr_batch(model, train, idx, cfg)
            run += loss.item() * len(idx)
            opt.zero_grad()
            T.backward(loss)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
        dev_loss, dev_cer = _asr_dev(model, dev, cfg)
        rows.append({"epoch": epoch, "train_loss": _fmt(run / len(train)), "dev_loss": _fmt(dev_loss),
                     "dev_cer": _fmt(dev_cer)})
        log.info("pretrain[%s] epoch %d dev loss %.4f cer %.3f", policy.value, epoch, dev_loss, dev_cer)
        if dev_loss < best[0]:
            best = (dev_loss, epoch, dev_cer, _snapshot(model))
        elif epoch - best[1] >= cfg.patience:
            break
    _restore(model, best[3])
    ckpt = Checkpoint.from_model(model, seed=cfg.seed, freeze_policy=policy.value, best_epoch=best[1],
                                 dev_cer=best[2], train_config=cfg.to_dict())
    _write_csv(log_path, rows)
    return PretrainResult(ckpt, rows, best[1], best[2])


# ---------------------------------------------------------------------------
# downstream training
# ---------------------------------------------------------------------------


@dataclass
class DownstreamResult:
    model: DepressionModel
    segment_log: list[dict]
    fusion_log: list[dict]
    best_epoch: int
    dev_metric: float


def _check_hygiene(data: Sequence[SessionFeatures]) -> None:
    leaked = [s.session_id for s in data if s.split == "test" and s.phq8 is not None]
    if leaked:
        raise LabelLeakError(f"{len(leaked)} test sessions carry labels (e.g. {leaked[0]}); "
                             "training code must only see withheld manifests")


def _session_metric(task, scores: np.ndarray, targets: np.ndarray) -> float:
    """Higher is better: AUC, or negative RMSE."""
    if TaskKind(task) is TaskKind.CLASSIFICATION:
        return auc(scores, targets)
    return -float(np.sqrt(np.mean((scores - targets) ** 2)))


class _SegmentSet:
    """Flattened segments of a split with their session index."""

    def __init__(self, sessions: Sequence[SessionFeatures], task):
        self.sessions = list(sessions)
        self.feats, self.owner = [], []
        for k, s in enumerate(self.sessions):
            for f in s.segments:
                self.feats.append(f)
                self.owner.append(k)
        self.owner = np.array(self.owner)
        self.task = task

    def targets(self) -> np.ndarray:
        return np.array([s.target(self.task) for s in self.sessions])

    def counts(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=len(self.sessions))


def _encode_all(model: DepressionModel, feats, batch: int, dtype) -> list[np.ndarray]:
    out = []
    with T.no_grad():
        for idx in _batches(len(feats), batch, None):
            x, lengths = pad_batch([feats[i] for i in idx], dtype)
            h, hl = model.encoder(x, lengths)
            out.extend(h.data[j, :hl[j]].copy() for j in range(len(idx)))
    return out


def _segment_outputs(model, seg: _SegmentSet, cached, cfg: TrainConfig):
    preds, embs = np.zeros(len(seg.feats)), []
    with T.no_grad():
        for idx in _batches(len(seg.feats), cfg.batch_size, None):
            p, e = _segment_step(model, seg, cached, idx, cfg)
            preds[idx] = p.data
            embs.append(e.data)
    return preds, np.concatenate(embs)


def _segment_step(model: DepressionModel, seg: _SegmentSet, cached, idx, cfg: TrainConfig):
    if cached is not None:
        h, lengths = pad_batch([cached[i] for i in idx], cfg.np_dtype)
        return model.head(T.Tensor(h), lengths)
    x, lengths = pad_batch([seg.feats[i] for i in idx], cfg.np_dtype)
    return model.segment_forward(x, lengths)


def _pool_sessions(values: np.ndarray, owner: np.ndarray, n: int) -> np.ndarray:
    sums = np.bincount(owner, weights=values, minlength=n)
    return sums / np.bincount(owner, minlength=n)


def _pad_sessions(embs: np.ndarray, seg: _SegmentSet, dtype):
    counts = seg.counts()
    out = np.zeros((len(counts), counts.max(), embs.shape[1]), dtype=dtype)
    fill = np.zeros(len(counts), dtype=int)
    for i, k in enumerate(seg.owner):
        out[k, fill[k]] = embs[i]
        fill[k] += 1
    return out, counts


def train_downstream(data: Sequence[SessionFeatures], model_config: ModelConfig, cfg: TrainConfig,
                     encoder: Checkpoint | None = None, log_path=None) -> DownstreamResult:
    """Stage 1: segment model on session labels.  Stage 2: fusion on frozen embeddings.

    Early stopping tracks the dev session metric (AUC, or RMSE for regression).
    """
    _check_hygiene(data)
    task = TaskKind(cfg.task)
    model_config = replace(model_config, task=task)
    train = _SegmentSet([s for s in data if s.split == "train"], task)
    dev = _SegmentSet([s for s in data if s.split == "dev"], task)
    if not train.sessions or not dev.sessions:
        raise DataError("downstream training needs non-empty train and dev splits")
    y_train, y_dev = train.targets(), dev.targets()
    model = DepressionModel(model_config, seed=cfg.seed, dtype=cfg.np_dtype)
    if encoder is not None:
        transfer_encoder(encoder, model)
    policy = FreezePolicy(cfg.freeze_policy or FreezePolicy.FINETUNE_ENCODER)
    apply_freeze(model, policy)
    frozen_enc = policy is FreezePolicy.FREEZE_ENCODER
    train_cache = _encode_all(model, train.feats, cfg.batch_size, cfg.np_dtype) if frozen_enc else None
    dev_cache = _encode_all(model, dev.feats, cfg.batch_size, cfg.np_dtype) if frozen_enc else None

    params = model.parameters()
    seg_params = OrderedDict((k, p) for k, p in params.items() if not k.startswith("fusion."))
    opt = Adam(seg_params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    seg_targets = y_train[train.owner]
    rows, best = [], None
    for epoch in range(1, cfg.max_epochs + 1):
        run = 0.0
        for idx in _batches(len(train.feats), cfg.batch_size, rng):
            pred, _ = _segment_step(model, train, train_cache, idx, cfg)
            loss = downstream_loss(pred, seg_targets[idx], task)
            run += loss.item() * len(idx)
            opt.zero_grad()
            T.backward(loss)
            clip_grad_norm(seg_params, cfg.clip_norm)
            opt.step()
        preds, _ = _segment_outputs(model, dev, dev_cache, cfg)
        metric = _session_metric(task, _pool_sessions(preds, dev.owner, len(dev.sessions)), y_dev)
        rows.append({"epoch": epoch, "train_loss": _fmt(run / len(train.feats)), "dev_metric": _fmt(metric)})
        log.info("segment epoch %d loss %.4f dev %.4f", epoch, run / len(train.feats), metric)
        if best is None or metric > best[0]:
            best = (metric, epoch, _snapshot(model))
        elif epoch - best[1] >= cfg.patience:
            break
    if best is not None:
        _restore(model, best[2])
    best_epoch = best[1] if best else 0

    # stage 2: fusion over frozen segment embeddings
    _, e_train = _segment_outputs(model, train, train_cache, cfg)
    _, e_dev = _segment_outputs(model, dev, dev_cache, cfg)
    x_train, c_train = _pad_sessions(e_train, train, cfg.np_dtype)
    x_dev, c_dev = _pad_sessions(e_dev, dev, cfg.np_dtype)
    fusion_params = OrderedDict((k, p) for k, p in params.items() if k.startswith("fusion."))
    fopt = Adam(fusion_params, lr=cfg.fusion_lr)
    frows = []
    with T.no_grad():
        fbest = (_session_metric(task, model.fusion(x_dev, c_dev).data.astype(np.float64), y_dev), 0,
                 _snapshot(model.fusion))
    for epoch in range(1, cfg.fusion_epochs + 1):
        loss = downstream_loss(model.fusion(x_train, c_train), y_train, task)
        lv = loss.item()
        fopt.zero_grad()
        T.backward(loss)
        fopt.step()
        with T.no_grad():
            metric = _session_metric(task, model.fusion(x_dev, c_dev).data.astype(np.float64), y_dev)
        frows.append({"epoch": epoch, "train_loss": _fmt(lv), "dev_metric": _fmt(metric)})
        if metric > fbest[0]:
            fbest = (metric, epoch, _snapshot(model.fusion))
        elif epoch - fbest[1] >= cfg.fusion_patience:
            break
    _restore(model.fusion, fbest[2])
    _write_csv(log_path, [dict(stage="segment", **r) for r in rows] + [dict(stage="fusion", **r) for r in frows])
    dev_metric = fbest[0] if task is TaskKind.CLASSIFICATION else -fbest[0]
    return DownstreamResult(model, rows, frows, best_epoch, dev_metric)


def predict_sessions(model: DepressionModel, data: Sequence[SessionFeatures],
                     batch_size: int = 16) -> np.ndarray:
    """Session outputs (logit for classification, PHQ-8 estimate for regression)."""
    seg = _SegmentSet(data, model.config.task)
    dtype = model.encoder.lstm[0].w_ih.dtype.type
    cfg = TrainConfig(batch_size=batch_size, dtype=np.dtype(dtype).name)
    _, embs = _segment_outputs(model, seg, None, cfg)
    x, counts = _pad_sessions(embs, seg, dtype)
    with T.no_grad():
        return model.fusion(x, counts).data.astype(np.float64)


def session_probabilities(model: DepressionModel, data: Sequence[SessionFeatures]) -> np.ndarray:
    out = predict_sessions(model, data)
    if TaskKind(model.config.task) is TaskKind.CLASSIFICATION:
        return 1.0 / (1.0 + np.exp(-out))
    return out


def evaluate_sessions(name: str, model: DepressionModel, data: Sequence[SessionFeatures],
                      fingerprint: str = "") -> tuple[MetricsReport, np.ndarray]:
    scores = predict_sessions(model, data)
    task = TaskKind(model.config.task)
    targets = np.array([s.target(task) for s in data])
    if task is TaskKind.CLASSIFICATION:
        return classification_report(name, scores, targets, fingerprint), scores
    return regression_report(name, scores, targets, fingerprint), scores


# ---------------------------------------------------------------------------
# experiment harness
# ---------------------------------------------------------------------------


def _default_pretrain_corpus() -> SyntheticCorpusConfig:
    return SyntheticCorpusConfig(n_speakers=60, seed=1000)


@dataclass(frozen=True)
class ExperimentConfig:
    arms: tuple[str, ...] = ("scratch", "tl1", "tl2")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    task: str = "classification"
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=15, patience=3, lr=2e-3))
    downstream: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=25, patience=5))
    transfer_policy: str = "freeze_encoder"
    model: ModelConfig = field(default_factory=ModelConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    pretrain_corpus: SyntheticCorpusConfig = field(default_factory=_default_pretrain_corpus)

    def __post_init__(self):
        arms = [ExperimentArm(a) for a in self.arms]
        if len(arms) < 2:
            raise ConfigError("an experiment needs at least two arms")
        if len(self.seeds) < 3:
            raise ConfigError("an experiment needs at least three seeds")
        FreezePolicy(self.transfer_policy)
        TaskKind(self.task)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["arms"], d["seeds"] = list(self.arms), list(self.seeds)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        kw = dict(d)
        if "pretrain" in kw:
            kw["pretrain"] = TrainConfig.from_dict(kw["pretrain"])
        if "downstream" in kw:
            kw["downstream"] = TrainConfig.from_dict(kw["downstream"])
        if "model" in kw:
            kw["model"] = ModelConfig.from_dict(kw["model"])
        if "features" in kw:
            kw["features"] = _from_dict(FeatureConfig, kw["features"])
        if "pretrain_corpus" in kw:
            kw["pretrain_corpus"] = SyntheticCorpusConfig.from_dict(kw["pretrain_corpus"])
        for key in ("arms", "seeds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def lstm_baseline_config(config: ModelConfig) -> ModelConfig:
    """Two recurrent layers straight on the filter banks, pooled, two dense layers."""
    enc = replace(config.encoder, conv_channels=())
    return replace(config, encoder=enc, head_kind="pool_mlp")


@dataclass
class ExperimentResult:
    config: dict
    reports: list[dict]                    # one per (seed, arm, split)
    comparisons: list[dict]                # paired DeLong tests on test
    pretrain_cer: dict[str, list[float]]   # arm -> dev CER per seed
    test_scores: dict                      # seed -> arm -> scores

    def mean_auc(self, arm: str, split: str = "test") -> float:
        vals = [r["auc"] for r in self.reports if r["arm"] == arm and r["split"] == split]
        return float(np.mean(vals))

    def table(self) -> list[MetricsReport]:
        """Per-(arm, split) means over seeds, shaped like the published tables."""
        out = []
        arms = list(dict.fromkeys(r["arm"] for r in self.reports))
        keys = ("auc", "specificity", "sensitivity", "rmse", "mae", "pcc")
        for arm in arms:
            for split in ("dev", "test"):
                rs = [r for r in self.reports if r["arm"] == arm and r["split"] == split]
                vals = {k: float(np.mean([r[k] for r in rs])) if rs[0][k] is not None else None for k in keys}
                out.append(MetricsReport(name=f"{ExperimentArm(arm).label}/{split}", task=rs[0]["task"],
                                         n_sessions=rs[0]["n_sessions"], n_positive=rs[0]["n_positive"], **vals))
        return out

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "reports": self.reports, "comparisons": self.comparisons,
                           "pretrain_cer": self.pretrain_cer}, sort_keys=True, indent=1) + "\n"

    def comparisons_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "arm_a", "arm_b", "auc_a", "auc_b", "z", "p"])
        for c in self.comparisons:
            w.writerow([c["seed"], c["arm_a"], c["arm_b"], f"{c['auc_a']:.6f}", f"{c['auc_b']:.6f}",
                        f"{c['z']:.6f}", f"{c['p']:.6g}"])
        return buf.getvalue()


def _report_row(rep: MetricsReport, seed: int, arm: str, split: str) -> dict:
    d = asdict(rep)
    d.update(seed=seed, arm=arm, split=split)
    return d


def run_experiment(corpus_root, config: ExperimentConfig = ExperimentConfig(), out_dir=None,
                   pretrain_root=None) -> ExperimentResult:
    """Train every arm for every seed; test labels are read only for the final scoring."""
    corpus_root = Path(corpus_root)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    arms = [ExperimentArm(a) for a in config.arms]
    task = TaskKind(config.task)
    fingerprint = config.features.fingerprint()

    sessions = load_manifest(corpus_root / "manifest.jsonl")          # test labels withheld
    data = featurize_sessions(corpus_root, sessions, config.features)
    train_dev = [s for s in data if s.split in ("train", "dev")]
    test = [s for s in data if s.split == "test"]
    need_asr = any(a in (ExperimentArm.TL1, ExperimentArm.TL2) for a in arms)
    asr_data = None
    if need_asr:
        if pretrain_root is None:
            if out is None:
                raise ConfigError("pretraining corpus needs pretrain_root or out_dir")
            pretrain_root = out / "pretrain_corpus"
            if not (pretrain_root / "manifest.jsonl").exists():
                generate_synthetic_corpus(config.pretrain_corpus, pretrain_root)
        asr_sessions = load_manifest(Path(pretrain_root) / "manifest.jsonl")
        asr_data = featurize_sessions(pretrain_root, asr_sessions, config.features)

    test_scores: dict[int, dict[str, np.ndarray]] = {}
    dev_scores: dict[int, dict[str, np.ndarray]] = {}
    pretrain_cer: dict[str, list[float]] = {}
    for seed in config.seeds:
        test_scores[seed], dev_scores[seed] = {}, {}
        for arm in arms:
            tag = f"seed{seed}_{arm.value}"
            encoder = None
            model_config = config.model
            down = replace(config.downstream, seed=seed, task=task.value,
                           freeze_policy=FreezePolicy.FINETUNE_ENCODER.value)
            if arm in (ExperimentArm.TL1, ExperimentArm.TL2):
                pcfg = replace(config.pretrain, seed=seed, freeze_policy=arm.value)
                res = pretrain_asr(asr_data, model_config, pcfg,
                                   log_path=out / f"{tag}_pretrain_log.csv" if out else None)
                encoder = res.checkpoint
                pretrain_cer.setdefault(arm.value, []).append(res.dev_cer)
                if out is not None:
                    save_checkpoint(encoder, out / f"{tag}_pretrain.ckpt")
                down = replace(down, freeze_policy=config.transfer_policy)
            elif arm is ExperimentArm.LSTM_BASELINE:
                model_config = lstm_baseline_config(model_config)
            res = train_downstream(train_dev, model_config, down, encoder,
                                   log_path=out / f"{tag}_train_log.csv" if out else None)
            if out is not None:
                save_checkpoint(res.model, out / f"{tag}_model.ckpt", seed=seed, arm=arm.value,
                                train_config=down.to_dict(), feature_fingerprint=fingerprint)
            dev = [s for s in train_dev if s.split == "dev"]
            dev_scores[seed][arm.value] = predict_sessions(res.model, dev)
            test_scores[seed][arm.value] = predict_sessions(res.model, test)

    # final evaluation: the only place test labels are read
    revealed = {s.session_id: s for s in load_manifest(corpus_root / "manifest.jsonl", reveal_test=True)}
    dev_ids = [s.session_id for s in train_dev if s.split == "dev"]
    test_ids = [s.session_id for s in test]

    def targets(ids):
        if task is TaskKind.CLASSIFICATION:
            return np.array([phq8_to_binary(revealed[i].phq8) for i in ids], dtype=float)
        return np.array([revealed[i].phq8 for i in ids], dtype=float)

    y_dev, y_test = targets(dev_ids), targets(test_ids)
    reports, comparisons = [], []
    for seed in config.seeds:
        for arm in arms:
            for split, ids, y, scores in (("dev", dev_ids, y_dev, dev_scores), ("test", test_ids, y_test, test_scores)):
                name = f"{arm.label}/{split}"
                s = scores[seed][arm.value]
                if task is TaskKind.CLASSIFICATION:
                    rep = classification_report(name, s, y, fingerprint)
                else:
                    rep = regression_report(name, s, y, fingerprint)
                rep.extra = {"seed": seed, "arm": arm.value}
                reports.append(_report_row(rep, seed, arm.value, split))
        if task is TaskKind.CLASSIFICATION:
            for i, a in enumerate(arms):
                for b in arms[i:]:
                    r = delong_test(test_scores[seed][a.value], test_scores[seed][b.value], y_test)
                    comparisons.append({"seed": seed, "arm_a": a.value, "arm_b": b.value, "auc_a": r.auc_a,
                                        "auc_b": r.auc_b, "z": r.z, "p": r.p, "degenerate": r.degenerate})
    result = ExperimentResult(config.to_dict(), reports, comparisons, pretrain_cer,
                              {s: {a: v.tolist() for a, v in d.items()} for s, d in test_scores.items()})
    if out is not None:
        (out / "experiment.json").write_text(result.to_json())
        (out / "comparisons.csv").write_text(result.comparisons_csv())
        (out / "table.csv").write_bytes(render_report(result.table(), "csv"))
        (out / "table.txt").write_bytes(render_report(result.table(), "table"))
    return result
