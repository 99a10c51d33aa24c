"""Binary classification metrics and McNemar's paired test."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    name: str
    accuracy: float
    sensitivity: float | None
    specificity: float | None
    auc: float | None
    confusion: ConfusionCounts
    threshold: float

    def as_dict(self):
        d = asdict(self)
        d["confusion"] = asdict(self.confusion)
        return d


def _binary(labels):
    y = np.asarray(labels).astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y


def confusion(probs, labels, threshold=0.5):
    p = np.asarray(probs, dtype=np.float64)
    y = _binary(labels)
    if p.shape != y.shape:
        raise ValueError("probs and labels differ in length")
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(tp=int(np.sum(pred & pos)), tn=int(np.sum(~pred & ~pos)),
                           fp=int(np.sum(pred & ~pos)), fn=int(np.sum(~pred & pos)))


def confusion_metrics(probs, labels, threshold=0.5, name=""):
    """Rates at ``threshold``; an empty class gives ``None`` for its rate."""
    c = confusion(probs, labels, threshold)
    if c.total == 0:
        raise ValueError("no samples")
    sens = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    spec = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    return MetricsReport(name, (c.tp + c.tn) / c.total, sens, spec, None, c, threshold)


def auc_score(labels, scores):
    """Mann-Whitney AUC with half credit for ties."""
    y = _binary(labels)
    s = np.asarray(scores, dtype=np.float64)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def roc_auc(probs, labels):
    return auc_score(labels, probs)


def evaluate(name, probs, labels, threshold=0.5):
    rep = confusion_metrics(probs, labels, threshold, name)
    rep.auc = roc_auc(probs, labels)
    return rep


def chi2_sf(x, df=1):
    """Upper tail of the chi-squared distribution."""
    if x < 0:
        raise ValueError("chi-squared statistic must be non-negative")
    if df == 1:
        return math.erfc(math.sqrt(x / 2.0))
    return float(gammaincc(df / 2.0, x / 2.0))


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    chi2: float
    p: float
    df: int = 1


def mcnemar(correct_a, correct_b, continuity=False):
    a = np.asarray(correct_a, dtype=bool)
    bb = np.asarray(correct_b, dtype=bool)
    if a.shape != bb.shape:
        raise ValueError("paired outcome arrays differ in length")
    b = int(np.sum(a & ~bb))
    c = int(np.sum(~a & bb))
    if b + c == 0:
        raise ValueError("no discordant pairs")
    diff = abs(b - c)
    if continuity:
        diff = max(diff - 1, 0)
    chi2 = diff * diff / (b + c)
    return McNemarResult(b, c, chi2, chi2_sf(chi2))


def write_report(reports, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.as_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")


def mcnemar_matrix(outcomes, continuity=False):
    """All unordered pairs of named correctness vectors, in the given name order."""
    names = list(outcomes)
    rows = []
    for i, na in enumerate(names):
        for nb in names[i + 1:]:
            try:
                r = mcnemar(outcomes[na], outcomes[nb], continuity)
            except ValueError:
                r = McNemarResult(0, 0, 0.0, 1.0)
            rows.append((na, nb, r))
    return rows


def write_mcnemar(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name_a", "name_b", "b", "c", "chi2", "p"])
        for na, nb, r in rows:
            w.writerow([na, nb, r.b, r.c, repr(r.chi2), repr(r.p)])
