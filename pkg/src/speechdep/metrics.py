"""ROC/AUC, equal-error-rate operating point, paired DeLong test, regression
metrics, character error rate, and deterministic report rendering."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np


class SingleClassError(ValueError):
    """Scores need at least one positive and one negative."""


class UndefinedCorrelationError(ValueError):
    """Pearson correlation is undefined for a constant input.

    The well-defined error metrics are still available on the exception.
    """

    def __init__(self, msg, rmse: float, mae: float):
        super().__init__(msg)
        self.rmse = rmse
        self.mae = mae


def _split_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise SingleClassError("need at least one positive and one negative")
    return pos, neg


def _pair_wins(pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """psi[i, j] = 1 if pos_i > neg_j, 1/2 on ties, else 0."""
    d = pos[:, None] - neg[None, :]
    return (d > 0) + 0.5 * (d == 0)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly, ties 1/2."""
    pos, neg = _split_scores(scores, labels)
    # rank form: O(n log n), identical to pair counting
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size)
    sv = allv[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    m, n = pos.size, neg.size
    return float((ranks[:m].sum() - m * (m + 1) / 2.0) / (m * n))


def roc_points(scores, labels):
    """(fpr, tpr, thresholds) for 'predict positive when score > threshold',
    with thresholds at midpoints of consecutive distinct scores plus both ends."""
    pos, neg = _split_scores(scores, labels)
    uniq = np.unique(np.concatenate([pos, neg]))
    thr = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])[::-1]
    tpr = (pos[None, :] > thr[:, None]).mean(axis=1)
    fpr = (neg[None, :] > thr[:, None]).mean(axis=1)
    return fpr, tpr, thr


def _upper_hull(fpr, tpr):
    """Indices of the upper-left convex hull of ROC points sorted by fpr."""
    hull: list[int] = []
    for k in range(len(fpr)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (fpr[b] - fpr[a]) * (tpr[k] - tpr[a]) - (tpr[b] - tpr[a]) * (fpr[k] - fpr[a])
            if cross >= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return hull


@dataclass(frozen=True)
class EerPoint:
    threshold: float
    sensitivity: float
    specificity: float

    @property
    def eer(self) -> float:
        return 1.0 - self.sensitivity


def eer_point(scores, labels) -> EerPoint:
    """Operating point where false-positive and false-negative rates meet.

    The crossing is found on the convex hull of the ROC points and linearly
    interpolated between the bracketing hull vertices (and their thresholds).
    """
    fpr, tpr, thr = roc_points(scores, labels)
    hull = _upper_hull(fpr, tpr)
    # d = fpr - fnr runs from -1 at (0, 0) to +1 at (1, 1) along the hull
    prev = hull[0]
    for k in hull[1:]:
        d0 = fpr[prev] - (1.0 - tpr[prev])
        d1 = fpr[k] - (1.0 - tpr[k])
        if d0 <= 0.0 <= d1:
            w = 0.0 if d1 == d0 else -d0 / (d1 - d0)
            f = fpr[prev] + w * (fpr[k] - fpr[prev])
            t = tpr[prev] + w * (tpr[k] - tpr[prev])
            eer = 0.5 * (f + (1.0 - t))          # equal up to rounding
            return EerPoint(float(thr[prev] + w * (thr[k] - thr[prev])), 1.0 - eer, 1.0 - eer)
        prev = k
    raise AssertionError("ROC hull never crosses the equal-error line")


@dataclass(frozen=True)
class DelongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    degenerate: bool = False


def delong_components(scores, labels):
    """Structural components: per-positive V10 and per-negative V01."""
    pos, neg = _split_scores(scores, labels)
    psi = _pair_wins(pos, neg)
    return psi.mean(axis=1), psi.mean(axis=0)


def delong_test(scores_a, scores_b, labels, labels_b=None) -> DelongResult:
    """Paired two-sided DeLong test for AUC(a) - AUC(b) on the same cases."""
    if labels_b is not None and not np.array_equal(np.asarray(labels), np.asarray(labels_b)):
        raise ValueError("the two score sets must share identical labels")
    v10a, v01a = delong_components(scores_a, labels)
    v10b, v01b = delong_components(scores_b, labels)
    auc_a, auc_b = float(v10a.mean()), float(v10b.mean())
    m, n = v10a.size, v01a.size
    s10 = np.cov(np.vstack([v10a, v10b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01a, v01b])) if n > 1 else np.zeros((2, 2))
    S = s10 / m + s01 / n
    var = S[0, 0] + S[1, 1] - 2.0 * S[0, 1]
    diff = auc_a - auc_b
    if var <= 1e-15:
        if abs(diff) <= 1e-15:
            return DelongResult(auc_a, auc_b, 0.0, 1.0, degenerate=True)
        return DelongResult(auc_a, auc_b, math.copysign(math.inf, diff), 0.0, degenerate=True)
    z = diff / math.sqrt(var)
    return DelongResult(auc_a, auc_b, z, math.erfc(abs(z) / math.sqrt(2.0)))


@dataclass(frozen=True)
class RegressionMetrics:
    rmse: float
    mae: float
    pcc: float


def regression_metrics(pred, target) -> RegressionMetrics:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    err = p - t
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    pc, tc = p - p.mean(), t - t.mean()
    denom = math.sqrt(float((pc ** 2).sum()) * float((tc ** 2).sum()))
    if denom == 0.0:
        raise UndefinedCorrelationError("Pearson correlation undefined for zero-variance input", rmse, mae)
    pcc = float(np.clip((pc * tc).sum() / denom, -1.0, 1.0))
    return RegressionMetrics(rmse, mae, pcc)


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(reference, hypothesis) -> float:
    """Character error rate; insertions can push it above 1."""
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(reference, hypothesis) / len(reference)


def corpus_cer(references, hypotheses) -> float:
    """Total edits over total reference length."""
    edits = sum(edit_distance(r, h) for r, h in zip(references, hypotheses))
    total = sum(len(r) for r in references)
    if total == 0:
        raise ValueError("references are empty")
    return edits / total


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    name: str = ""
    task: str = "classification"
    auc: float | None = None
    specificity: float | None = None
    sensitivity: float | None = None
    delong_p: float | None = None
    rmse: float | None = None
    mae: float | None = None
    pcc: float | None = None
    cer: float | None = None
    n_sessions: int = 0
    n_positive: int = 0
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        for key in ("auc", "specificity", "sensitivity", "delong_p"):
            v = getattr(self, key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{key}={v} outside [0, 1]")
        if self.pcc is not None and not -1.0 <= self.pcc <= 1.0:
            raise ValueError(f"pcc={self.pcc} outside [-1, 1]")
        for key in ("rmse", "mae", "cer"):
            v = getattr(self, key)
            if v is not None and v < 0:
                raise ValueError(f"{key}={v} is negative")


def classification_report(name, scores, labels, fingerprint: str = "") -> MetricsReport:
    pt = eer_point(scores, labels)
    y = np.asarray(labels).astype(int)
    return MetricsReport(name=name, task="classification", auc=auc(scores, labels),
                         specificity=pt.specificity, sensitivity=pt.sensitivity,
                         n_sessions=int(y.size), n_positive=int(y.sum()), fingerprint=fingerprint)


def regression_report(name, pred, target, fingerprint: str = "") -> MetricsReport:
    r = regression_metrics(pred, target)
    return MetricsReport(name=name, task="regression", rmse=r.rmse, mae=r.mae, pcc=r.pcc,
                         n_sessions=len(target), fingerprint=fingerprint)


CLASSIFICATION_COLUMNS = ("AUC", "Specificity at EER", "Sensitivity at EER")
REGRESSION_COLUMNS = ("RMSE", "MAE", "PCC")


def table_row(report: MetricsReport) -> list[str]:
    if report.task == "classification":
        vals = (report.auc, report.specificity, report.sensitivity)
    else:
        vals = (report.rmse, report.mae, report.pcc)
    return [report.name] + ["" if v is None else f"{v:.2f}" for v in vals]


def render_report(reports, fmt: str = "table") -> bytes:
    """Render one report or a list of them as ``table``, ``csv`` or ``json``."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    reports = list(reports)
    if fmt == "json":
        return (json.dumps([asdict(r) for r in reports], sort_keys=True, indent=1) + "\n").encode()
    task = reports[0].task if reports else "classification"
    cols = CLASSIFICATION_COLUMNS if task == "classification" else REGRESSION_COLUMNS
    rows = [table_row(r) for r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Model", *cols])
        w.writerows(rows)
        return buf.getvalue().encode()
    if fmt == "table":
        width = max([len("Model")] + [len(r[0]) for r in rows])
        lines = [" ".join(["Model".ljust(width), *cols])]
        lines += [" ".join([r[0].ljust(width), *r[1:]]) for r in rows]
        return ("\n".join(lines) + "\n").encode()
    raise ValueError(f"unknown report format {fmt!r}")


def report_from_dict(d: dict) -> MetricsReport:
    names = {f.name for f in fields(MetricsReport)}
    return MetricsReport(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# score files
# ---------------------------------------------------------------------------


@dataclass
class ScoreFile:
    session_ids: list
    labels: np.ndarray
    scores_a: np.ndarray
    scores_b: np.ndarray | None = None


def write_scores(path, session_ids, labels, scores_a, scores_b=None) -> None:
    """CSV with columns session_id, label, score_a[, score_b]."""
    cols = [session_ids, labels, scores_a] + ([] if scores_b is None else [scores_b])
    if len({len(c) for c in cols}) != 1:
        raise ValueError("score columns differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session_id", "label", "score_a"] + ([] if scores_b is None else ["score_b"]))
        for row in zip(*cols):
            w.writerow([row[0], int(row[1])] + [repr(float(v)) for v in row[2:]])


def read_scores(path) -> ScoreFile:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"session_id", "label", "score_a"} <= set(rows[0]):
        raise ValueError(f"{path}: expected columns session_id, label, score_a")
    paired = "score_b" in rows[0]
    labels = np.array([int(r["label"]) for r in rows])
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"{path}: labels must be 0 or 1")
    return ScoreFile([r["session_id"] for r in rows], labels,
                     np.array([float(r["score_a"]) for r in rows]),
                     np.array([float(r["score_b"]) for r in rows]) if paired else None)
