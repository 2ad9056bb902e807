"""Encoder-weight-only transfer into a depression model, then two-stage training."""

import tempfile
from pathlib import Path

from speechdep.checkpoint import Checkpoint, apply_freeze, parameter_census, transfer_encoder
from speechdep.corpus import SyntheticCorpusConfig, generate_synthetic_corpus, load_manifest
from speechdep.models import DepressionModel, ModelConfig, PretrainModel
from speechdep.trainer import TrainConfig, evaluate_sessions, featurize_sessions, train_downstream

cfg = ModelConfig()
source = PretrainModel(cfg, seed=1)
target = DepressionModel(cfg, seed=2)
print("pretraining model:", parameter_census(source))
print("depression model: ", parameter_census(target))

report = transfer_encoder(Checkpoint.from_model(source), target)
print(f"copied {len(report.copied)} encoder tensors; nothing else touched")
print("frozen under freeze_encoder:", len(apply_freeze(target, "freeze_encoder")), "tensors")

root = Path(tempfile.mkdtemp()) / "corpus"
generate_synthetic_corpus(SyntheticCorpusConfig(n_speakers=40, seed=3), root)
data = featurize_sessions(root, load_manifest(root / "manifest.jsonl"))
res = train_downstream(data, cfg, TrainConfig(max_epochs=4, freeze_policy="freeze_encoder"),
                       encoder=Checkpoint.from_model(source))
dev = [s for s in data if s.split == "dev"]
rep, _ = evaluate_sessions("random-encoder/dev", res.model, dev)
print(f"dev AUC {rep.auc:.3f}, sensitivity = specificity = {rep.sensitivity:.3f} at the EER point")
