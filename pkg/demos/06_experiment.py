"""A reduced scratch / TL-1 / TL-2 comparison (three seeds, short schedules).

The downstream corpus has only 80 speakers, so each test split holds a handful
of positives and per-seed AUCs swing widely. Read the output as a walk through
the artifacts, not as evidence for or against transfer.

The full default experiment is `speechdep experiment --out DIR`; it runs five
seeds on a 200-speaker corpus and takes about twenty minutes on one core.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

from speechdep.corpus import SyntheticCorpusConfig, generate_synthetic_corpus
from speechdep.metrics import render_report
from speechdep.trainer import ExperimentConfig, run_experiment

work = Path(tempfile.mkdtemp())
generate_synthetic_corpus(SyntheticCorpusConfig(n_speakers=80, seed=0), work / "corpus")
base = ExperimentConfig()
cfg = replace(base, seeds=(0, 1, 2),
              pretrain=replace(base.pretrain, max_epochs=10),
              downstream=replace(base.downstream, max_epochs=8))
res = run_experiment(work / "corpus", cfg, work / "out")
print(render_report(res.table(), "table").decode())
print(res.comparisons_csv())
print("pretraining dev CER per seed:", res.pretrain_cer)
print("artifacts in", work / "out")
