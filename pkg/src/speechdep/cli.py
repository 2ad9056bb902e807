"""Command-line entry point.

Exit codes: 0 success, 1 failed check (gradcheck), 2 configuration or usage
error, 3 data error, 4 numeric failure.  Data goes to stdout, diagnostics to
stderr.  ``EH_NUM_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import os

_threads = os.environ.get("EH_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .checkpoint import (CheckpointError, FreezePolicy, build_model, load_checkpoint,  # noqa: E402
                         save_checkpoint)
from .corpus import (CorpusError, SyntheticCorpusConfig, generate_synthetic_corpus,  # noqa: E402
                     load_manifest, phq8_to_binary)
from .dsp import (FeatureConfig, FeatureFormatError, FeatureMatrix, WavFormatError,  # noqa: E402
                  write_features)
from .losses import CtcInfeasibleError  # noqa: E402
from .metrics import SingleClassError, render_report  # noqa: E402
from .models import ModelConfig, TaskKind  # noqa: E402
from .tensor import NumericError  # noqa: E402
from .trainer import (ConfigError, DataError, ExperimentArm, ExperimentConfig,  # noqa: E402
                      LabelLeakError, TrainConfig, evaluate_sessions, featurize_sessions,
                      lstm_baseline_config, pretrain_asr, run_experiment, session_probabilities,
                      train_downstream)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
TASKS = {"cls": TaskKind.CLASSIFICATION, "reg": TaskKind.REGRESSION}

log = logging.getLogger("speechdep")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return d


def _take_sections(d: dict, allowed: tuple[str, ...]) -> dict:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)} (allowed: {list(allowed)})")
    return d


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, command: str, effective: dict) -> None:
    blob = {"command": command, "version": __version__, **effective}
    (out / "run_config.json").write_text(json.dumps(blob, sort_keys=True, indent=1) + "\n")


def _model_train_config(args, d: dict, policy_default: str | None):
    _take_sections(d, ("train", "model", "features"))
    train = TrainConfig.from_dict(d.get("train", {}))
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "task", None):
        train = replace(train, task=TASKS[args.task].value)
    policy = getattr(args, "freeze_policy", None) or train.freeze_policy or policy_default
    train = replace(train, freeze_policy=policy)
    model = ModelConfig.from_dict(d["model"]) if "model" in d else ModelConfig()
    model = replace(model, task=TaskKind(train.task))
    feats = FeatureConfig(**d.get("features", {}))
    return train, model, feats


def require_transcripts(sessions) -> None:
    for s in sessions:
        for r, resp in enumerate(s.responses):
            if not resp.transcript:
                raise DataError(f"session {s.session_id}: response {r} has no transcript")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    d = _read_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = SyntheticCorpusConfig.from_dict(d)
    except (CorpusError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _prepare_out(args.out, args.force)
    g = generate_synthetic_corpus(cfg, out)
    sys.stdout.write((out / "stats.csv").read_text())
    log.info("wrote %d sessions to %s", len(g.sessions), out)
    return EXIT_OK


def cmd_featurize(args) -> int:
    d = _take_sections(_read_config(args.config), ("features",))
    fc = FeatureConfig(**d.get("features", {}))
    corpus = Path(args.corpus)
    out = _prepare_out(args.out, args.force)
    sessions = load_manifest(corpus / "manifest.jsonl")
    index = []
    for s in featurize_sessions(corpus, sessions, fc):
        for k, seg in enumerate(s.segments):
            name = f"{s.session_id}_seg{k}.ehfb"
            write_features(out / name, FeatureMatrix(seg, fc.fingerprint()))
            index.append({"session_id": s.session_id, "segment": k, "file": name, "frames": seg.shape[0]})
    (out / "index.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in index))
    _echo(out, "featurize", {"features": fc.__dict__, "fingerprint": fc.fingerprint(), "corpus": str(corpus)})
    print(f"{len(index)} segments")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    train, model, fc = _model_train_config(args, _read_config(args.config), FreezePolicy.TL1.value)
    if FreezePolicy(train.freeze_policy) not in (FreezePolicy.TL1, FreezePolicy.TL2):
        raise ConfigError("pretraining accepts --freeze-policy tl1 or tl2")
    corpus = Path(args.corpus)
    sessions = load_manifest(corpus / "manifest.jsonl")
    require_transcripts(sessions)
    out = _prepare_out(args.out, args.force)
    res = pretrain_asr(featurize_sessions(corpus, sessions, fc), model, train, log_path=out / "pretrain_log.csv")
    ckpt = save_checkpoint(res.checkpoint, out / "pretrain.ckpt", feature_config=fc.__dict__,
                           feature_fingerprint=fc.fingerprint())
    _echo(out, "pretrain", {"train": train.to_dict(), "model": model.to_dict(), "features": fc.__dict__,
                            "corpus": str(corpus)})
    print(json.dumps({"checkpoint": str(out / "pretrain.ckpt"), "best_epoch": res.best_epoch,
                      "dev_cer": res.dev_cer, "freeze_policy": ckpt.metadata["freeze_policy"]}))
    return EXIT_OK


def cmd_train(args) -> int:
    d = _read_config(args.config)
    arm = ExperimentArm(args.arm or ("tl1" if args.encoder else "scratch"))
    default_policy = (FreezePolicy.FREEZE_ENCODER if args.encoder else FreezePolicy.FINETUNE_ENCODER).value
    train, model, fc = _model_train_config(args, d, default_policy)
    if FreezePolicy(train.freeze_policy) not in (FreezePolicy.FINETUNE_ENCODER, FreezePolicy.FREEZE_ENCODER):
        raise ConfigError("downstream training accepts --freeze-policy finetune_encoder or freeze_encoder")
    if arm is ExperimentArm.LSTM_BASELINE:
        model = lstm_baseline_config(model)
    if arm in (ExperimentArm.TL1, ExperimentArm.TL2) and not args.encoder:
        raise ConfigError(f"arm {arm.value} needs --encoder CHECKPOINT")
    encoder = load_checkpoint(args.encoder) if args.encoder else None
    corpus = Path(args.corpus)
    out = _prepare_out(args.out, args.force)
    data = featurize_sessions(corpus, load_manifest(corpus / "manifest.jsonl"), fc)
    train_dev = [s for s in data if s.split in ("train", "dev")]
    res = train_downstream(train_dev, model, train, encoder, log_path=out / "train_log.csv")
    save_checkpoint(res.model, out / "model.ckpt", seed=train.seed, arm=arm.value,
                    freeze_policy=train.freeze_policy, train_config=train.to_dict(),
                    feature_config=fc.__dict__, feature_fingerprint=fc.fingerprint(),
                    encoder_source=str(args.encoder) if args.encoder else None)
    report, _ = evaluate_sessions(f"{arm.label}/dev", res.model, [s for s in train_dev if s.split == "dev"],
                                  fc.fingerprint())
    (out / "dev_report.json").write_bytes(render_report(report, "json"))
    _echo(out, "train", {"arm": arm.value, "train": train.to_dict(), "model": model.to_dict(),
                         "features": fc.__dict__, "corpus": str(corpus)})
    sys.stdout.write(render_report(report, "table").decode())
    return EXIT_OK


def _load_for_eval(args):
    ckpt = load_checkpoint(args.model)
    if ckpt.metadata.get("model_kind") != "depression":
        raise ConfigError(f"{args.model} is not a depression model checkpoint")
    fc = FeatureConfig(**ckpt.metadata.get("feature_config", {}))
    model = build_model(ckpt)
    return ckpt, model, fc


def cmd_evaluate(args) -> int:
    split = args.split or "dev"
    if split == "test" and not args.final:
        raise ConfigError("refusing to evaluate on the test split: its labels are withheld until the "
                          "final evaluation (pass --final)")
    ckpt, model, fc = _load_for_eval(args)
    corpus = Path(args.corpus)
    sessions = [s for s in load_manifest(corpus / "manifest.jsonl", reveal_test=args.final) if s.split == split]
    if not sessions:
        raise DataError(f"split {split!r} is empty")
    data = featurize_sessions(corpus, sessions, fc)
    arm = ExperimentArm(ckpt.metadata.get("arm", "scratch"))
    report, _ = evaluate_sessions(f"{arm.label}/{split}", model, data, fc.fingerprint())
    report.extra = {"checkpoint": str(args.model), "split": split, "seed": ckpt.metadata.get("seed")}
    body = render_report(report, args.format)
    if args.out:
        Path(args.out).write_bytes(body)
    sys.stdout.write(body.decode())
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt, model, fc = _load_for_eval(args)
    corpus = Path(args.corpus)
    sessions = load_manifest(corpus / "manifest.jsonl")
    if args.split:
        sessions = [s for s in sessions if s.split == args.split]
    data = featurize_sessions(corpus, sessions, fc)
    out = session_probabilities(model, data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cls = TaskKind(model.config.task) is TaskKind.CLASSIFICATION
    w.writerow(["session_id", "probability" if cls else "phq8", "class"])
    for s, v in zip(data, out):
        label = int(v >= 0.5) if cls else phq8_to_binary(int(np.clip(round(v), 0, 24)))
        w.writerow([s.session_id, f"{v:.6f}", label])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_experiment(args) -> int:
    d = _read_config(args.config)
    cfg = ExperimentConfig.from_dict(d)
    if args.seed is not None:
        cfg = replace(cfg, seeds=tuple(args.seed + k for k in range(len(cfg.seeds))))
    if args.task:
        cfg = replace(cfg, task=TASKS[args.task].value)
    if args.arm:
        cfg = replace(cfg, arms=tuple(a.strip() for a in args.arm.split(",")))
    out = _prepare_out(args.out, args.force)
    corpus = Path(args.corpus) if args.corpus else out / "corpus"
    if not args.corpus:
        generate_synthetic_corpus(SyntheticCorpusConfig(), corpus)
    _echo(out, "experiment", {"experiment": cfg.to_dict(), "corpus": str(corpus)})
    res = run_experiment(corpus, cfg, out_dir=out)
    sys.stdout.write(render_report(res.table(), "table").decode())
    sys.stdout.write(res.comparisons_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    ok = True
    for name, err, passed in run_suite(tol=args.tol):
        print(f"{'PASS' if passed else 'FAIL'} {name}: max rel err {err:.2e}")
        ok &= passed
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechdep", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True, out=True):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int)
        if corpus:
            sp.add_argument("--corpus", required=True, help="corpus directory holding manifest.jsonl")
        if out:
            sp.add_argument("--out", required=True)
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    common(sp, corpus=False)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("featurize", help="cache log-mel features per segment")
    common(sp)
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("pretrain", help="ASR pretraining")
    common(sp)
    sp.add_argument("--freeze-policy", choices=["tl1", "tl2"])
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="downstream depression model")
    common(sp)
    sp.add_argument("--encoder", help="pretraining checkpoint to take encoder weights from")
    sp.add_argument("--arm", choices=[a.value for a in ExperimentArm])
    sp.add_argument("--task", choices=sorted(TASKS))
    sp.add_argument("--freeze-policy", choices=["finetune_encoder", "freeze_encoder"])
    sp.set_defaults(func=cmd_train)

    for name, func in (("evaluate", cmd_evaluate), ("predict", cmd_predict)):
        sp = sub.add_parser(name)
        sp.add_argument("--corpus", required=True)
        sp.add_argument("--model", required=True, help="trained model checkpoint")
        sp.add_argument("--split", choices=["train", "dev", "test"])
        sp.add_argument("--out", help="also write the output to this file")
        sp.set_defaults(func=func)
    sub.choices["evaluate"].add_argument("--final", action="store_true",
                                         help="allow reading test labels (final evaluation)")
    sub.choices["evaluate"].add_argument("--format", choices=["table", "csv", "json"], default="table")

    sp = sub.add_parser("experiment", help="scratch / TL-1 / TL-2 comparison across seeds")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, help="first seed; the configured seed count is kept")
    sp.add_argument("--corpus", help="corpus directory (default: generate one under --out)")
    sp.add_argument("--arm", help="comma-separated arms")
    sp.add_argument("--task", choices=sorted(TASKS))
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, LabelLeakError, TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, WavFormatError, FeatureFormatError, CheckpointError,
            CtcInfeasibleError, SingleClassError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
