"""Hybrid CTC/attention pretraining on a small synthetic corpus, TL-1 against TL-2.

TL-2 keeps the decoder and CTC projection at their random initialisation, so
its source-task CER should stay worse.
"""

import tempfile
from pathlib import Path

from speechdep.corpus import SyntheticCorpusConfig, generate_synthetic_corpus, load_manifest
from speechdep.trainer import TrainConfig, featurize_sessions, pretrain_asr
from speechdep.models import ModelConfig

root = Path(tempfile.mkdtemp()) / "asr"
generate_synthetic_corpus(SyntheticCorpusConfig(n_speakers=60, seed=1000), root)
data = featurize_sessions(root, load_manifest(root / "manifest.jsonl"))
print(sum(len(s.segments) for s in data), "transcribed utterances")

for policy in ("tl1", "tl2"):
    res = pretrain_asr(data, ModelConfig(), TrainConfig(max_epochs=10, patience=3, lr=2e-3, freeze_policy=policy))
    print(f"{policy}: best epoch {res.best_epoch}, dev CER {res.dev_cer:.3f}")
    for row in res.log:
        print(f"    epoch {row['epoch']:>2}  dev loss {float(row['dev_loss']):7.3f}  dev CER {float(row['dev_cer']):.3f}")
