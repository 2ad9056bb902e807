"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that conftest prints in the terminal
summary.  Criteria 8 and 9 share one full default experiment (five seeds,
scratch / TL-1 / TL-2), which takes roughly twenty minutes on one core.
"""

import filecmp
import itertools
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import bootstrap_delong_p, delong_by_hand, naive_edit_distance, trapezoid_auc
from speechdep.checkpoint import Checkpoint, parameter_census, transfer_encoder
from speechdep.corpus import (SyntheticCorpusConfig, generate_synthetic_corpus, load_manifest,
                              phq8_to_binary)
from speechdep.dsp import FeatureConfig
from speechdep.gradcheck import run_suite
from speechdep.losses import ctc_loss, ctc_min_frames
from speechdep.metrics import auc, cer, delong_test, eer_point, edit_distance
from speechdep.models import DepressionModel, EncoderConfig, ModelConfig, PretrainModel
from speechdep.tensor import Tensor
from speechdep.trainer import ExperimentConfig, TrainConfig, run_experiment

RESULTS = Path(__file__).resolve().parents[1] / "results"


def record(n: int, ok: bool, text: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    ACCEPTANCE[n] = (ok, line)
    print(line)
    assert ok, line


# 1 ------------------------------------------------------------------------------

def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    rows = run_suite(tol=1e-4)
    secs = time.perf_counter() - t0
    worst = max(err for _, err, _ in rows)
    ok = all(p for *_, p in rows) and worst < 1e-4 and secs < 60
    record(1, ok, f"{len(rows)} gradient cases, max rel err {worst:.1e}, {secs:.1f} s")


# 2 ------------------------------------------------------------------------------

_PATHS: dict = {}


def _collapse_table(Tn, C):
    """All C**Tn paths and, per collapsed label, the indices of paths that produce it."""
    key = (Tn, C)
    if key not in _PATHS:
        paths = np.array(list(itertools.product(range(C), repeat=Tn)))
        groups: dict = {}
        for i, p in enumerate(paths):
            out, prev = [], None
            for c in p:
                if c != prev and c != C - 1:
                    out.append(int(c))
                prev = c
            groups.setdefault(tuple(out), []).append(i)
        _PATHS[key] = (paths, {k: np.array(v) for k, v in groups.items()})
    return _PATHS[key]


def test_c02_ctc_matches_enumeration():
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    while n < 500:
        A = int(rng.integers(1, 5))
        Tn = int(rng.integers(1, 7))
        L = int(rng.integers(1, 4))
        label = [int(v) for v in rng.integers(0, A, size=L)]
        if ctc_min_frames(label) > Tn:
            continue
        probs = rng.dirichlet(np.ones(A + 1), size=Tn)
        paths, groups = _collapse_table(Tn, A + 1)
        path_p = np.prod(probs[np.arange(Tn), paths], axis=1)
        ref = -np.log(path_p[groups[tuple(label)]].sum())
        got = ctc_loss(Tensor(np.log(probs)), label).item()
        worst = max(worst, abs(got - ref))
        n += 1
    record(2, worst < 1e-8, f"500 instances, max |forward-backward - enumeration| = {worst:.1e}")


# 3 ------------------------------------------------------------------------------

def test_c03_auc_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = rng.integers(0, 6, size=n).astype(float)          # coarse scores force ties
        worst = max(worst, abs(auc(s, y) - trapezoid_auc(s, y)))
    example = auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0])
    record(3, worst < 1e-12 and example == 0.75,
           f"200 tied score sets, max |pairs - trapezoid| = {worst:.1e}; example = {example}")


# 4 ------------------------------------------------------------------------------

def test_c04_delong():
    rng = np.random.default_rng(4)
    s = rng.normal(size=12)
    y12 = np.r_[np.ones(5), np.zeros(7)]
    self_p = delong_test(s, s, y12).p
    y = [1, 1, 1, 0, 0, 0]
    a = [0.9, 0.8, 0.35, 0.4, 0.3, 0.1]
    b = [0.7, 0.2, 0.6, 0.5, 0.65, 0.1]
    got = delong_test(a, b, y)
    hand = delong_by_hand(a, b, y)
    hand_err = max(abs(g - h) for g, h in zip((got.auc_a, got.auc_b, got.z, got.p), hand))
    gaps = []
    for k in range(20):
        r = np.random.default_rng(400 + k)
        n = int(r.integers(20, 41))
        lab = (r.uniform(size=n) < 0.4).astype(int)
        lab[:2] = [0, 1]
        sa = lab + r.normal(size=n)
        sb = 0.6 * sa + 0.8 * (0.5 * lab + r.normal(size=n))
        gaps.append(abs(delong_test(sa, sb, lab).p - bootstrap_delong_p(sa, sb, lab, n_boot=100_000, seed=k)))
    ok = self_p == 1.0 and hand_err < 1e-10 and max(gaps) <= 0.02
    record(4, ok, f"self p = {self_p}; hand case err {hand_err:.1e}; "
                  f"bootstrap max |dp| = {max(gaps):.4f} over 20 cases")


# 5 ------------------------------------------------------------------------------

def test_c05_eer_contract():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 50))
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = rng.normal(size=n) if rng.uniform() < 0.5 else rng.integers(0, 4, size=n).astype(float)
        pt = eer_point(s, y)
        worst = max(worst, abs(pt.sensitivity - pt.specificity))
    sep = eer_point([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    ok = worst < 1e-6 and (sep.sensitivity, sep.specificity) == (1.0, 1.0)
    record(5, ok, f"500 random inputs, max |sens - spec| = {worst:.1e}; "
                  f"separable -> {sep.sensitivity}/{sep.specificity}")


# 6 ------------------------------------------------------------------------------

def test_c06_encoder_only_transfer():
    cfg = ModelConfig()
    src = PretrainModel(cfg, seed=11)
    dst = DepressionModel(cfg, seed=12)
    before = {n: p.data.copy() for n, p in dst.parameters().items()}
    ck = Checkpoint.from_model(src)
    transfer_encoder(ck, dst)
    enc_ok = all(np.array_equal(p.data, ck.tensors[n]) for n, p in dst.parameters().items()
                 if n.startswith("encoder."))
    rest_ok = all(np.array_equal(p.data, before[n]) for n, p in dst.parameters().items()
                  if not n.startswith("encoder."))
    pre, down = parameter_census(src), parameter_census(dst)
    asr_free = not any(n.startswith(("decoder.", "ctc_head.")) for n in dst.parameters())
    ok = enc_ok and rest_ok and asr_free and down["total"] < pre["total"]
    record(6, ok, f"encoder bitwise copied={enc_ok}, others unchanged={rest_ok}, "
                  f"params {down['total']} downstream < {pre['total']} pretraining")


# 7 ------------------------------------------------------------------------------

def test_c07_cer():
    rng = np.random.default_rng(7)
    alphabet = "abcd"
    mismatches = 0
    for _ in range(1000):
        a = "".join(rng.choice(list(alphabet), size=int(rng.integers(1, 9))))
        b = "".join(rng.choice(list(alphabet), size=int(rng.integers(0, 9))))
        if edit_distance(a, b) != naive_edit_distance(a, b) or cer(a, b) != naive_edit_distance(a, b) / len(a):
            mismatches += 1
    example = cer("a", "abcd")
    record(7, example == 3.0 and mismatches == 0,
           f'cer("a", "abcd") = {example}; {mismatches} mismatches vs DP oracle on 1000 pairs')


# 11 ------------------------------------------------------------------------------

def test_c11_phq8_mapping():
    got = [phq8_to_binary(s) for s in range(25)]
    expect = [int(s >= 10) for s in range(25)]
    record(11, got == expect and got[10] == 1 and got[9] == 0, "all 25 PHQ-8 scores map at the 10 cut-off")


# 10 ------------------------------------------------------------------------------

TINY_MODEL = ModelConfig(encoder=EncoderConfig(n_mels=8, conv_channels=(2, 3), hidden=6), decoder_hidden=8,
                         embed_dim=4, attention_dim=4, rcnn_hidden=4, rcnn_proj=4, segment_embedding=4,
                         fusion_hidden=4)


def _tiny_run(root: Path):
    cfg = SyntheticCorpusConfig(n_speakers=15, sessions_per_speaker=(1, 2), responses_per_session=(1, 2),
                                response_seconds=(1.2, 1.6), prevalence=0.45, seed=7)
    generate_synthetic_corpus(cfg, root / "corpus")
    exp = ExperimentConfig(arms=("scratch", "tl1", "tl2"), seeds=(0, 1, 2), model=TINY_MODEL,
                           features=FeatureConfig(n_mels=8),
                           pretrain=TrainConfig(batch_size=8, max_epochs=1),
                           downstream=TrainConfig(batch_size=8, max_epochs=2, fusion_epochs=3),
                           pretrain_corpus=SyntheticCorpusConfig(n_speakers=6, response_seconds=(1.2, 1.5),
                                                                 seed=1000))
    run_experiment(root / "corpus", exp, root / "out")


def _same_tree(a: Path, b: Path) -> bool:
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return files_a == files_b and all(filecmp.cmp(a / f, b / f, shallow=False) for f in files_a)


@pytest.fixture(scope="session")
def default_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("default") / "corpus"
    generate_synthetic_corpus(SyntheticCorpusConfig(), root)
    return root


@pytest.fixture(scope="session")
def default_experiment(default_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    t0 = time.perf_counter()
    res = run_experiment(default_corpus, ExperimentConfig(), out)
    minutes = (time.perf_counter() - t0) / 60
    RESULTS.mkdir(exist_ok=True)
    for name in ("table.txt", "table.csv", "comparisons.csv", "experiment.json"):
        shutil.copy(out / name, RESULTS / name)
    return res, out, minutes


def test_c10_hygiene_and_determinism(default_corpus, default_experiment, tmp_path):
    sessions = load_manifest(default_corpus / "manifest.jsonl")
    spk = {split: {s.speaker_id for s in sessions if s.split == split} for split in ("train", "dev", "test")}
    disjoint = not (spk["train"] & spk["dev"] or spk["train"] & spk["test"] or spk["dev"] & spk["test"])
    _tiny_run(tmp_path / "a")
    _tiny_run(tmp_path / "b")
    identical = _same_tree(tmp_path / "a", tmp_path / "b")
    n_ckpt = len(list((tmp_path / "a" / "out").glob("*.ckpt")))
    _, out, _ = default_experiment
    table = (out / "table.txt").read_text().splitlines()
    side_by_side = all(any(r.startswith(f"{arm}/{split} ") for r in table)
                       for arm in ("EH-AC", "EH-AC+TL-1", "EH-AC+TL-2") for split in ("dev", "test"))
    record(10, disjoint and identical and side_by_side and n_ckpt == 9 + 6,
           f"speaker sets disjoint={disjoint} ({sum(map(len, spk.values()))} speakers); rerun byte-identical "
           f"={identical} ({n_ckpt} checkpoints); dev and test rows emitted={side_by_side}")


# 8, 9 ------------------------------------------------------------------------------

def _pairs(res, a, b):
    return [c for c in res.comparisons if {c["arm_a"], c["arm_b"]} == {a, b} and c["arm_a"] != c["arm_b"]]


def test_c08_transfer_gain(default_experiment):
    res, _, minutes = default_experiment
    gain = res.mean_auc("tl1") - res.mean_auc("scratch")
    sig = sum(c["p"] < 0.05 for c in _pairs(res, "scratch", "tl1"))
    record(8, gain >= 0.03 and sig >= 3,
           f"mean test AUC TL-1 {res.mean_auc('tl1'):.3f} vs scratch {res.mean_auc('scratch'):.3f} "
           f"(gain {gain:+.3f}); DeLong p < 0.05 on {sig}/5 seeds; full experiment {minutes:.1f} min")


def test_c09_weak_source_task(default_experiment):
    res, _, _ = default_experiment
    cer1, cer2 = res.pretrain_cer["tl1"], res.pretrain_cer["tl2"]
    cer_ok = all(c2 > c1 for c1, c2 in zip(cer1, cer2))
    gap = abs(res.mean_auc("tl1") - res.mean_auc("tl2"))
    ns = sum(c["p"] > 0.05 for c in _pairs(res, "tl1", "tl2"))
    record(9, cer_ok and gap <= 0.05 and ns >= 3,
           f"dev CER TL-2 > TL-1 on every seed={cer_ok} (TL-1 {np.mean(cer1):.3f}, TL-2 {np.mean(cer2):.3f}); "
           f"|AUC gap| {gap:.3f}; DeLong p > 0.05 on {ns}/5 seeds")
