"""Baseline cardiovascular risk score over the QRISK3 variable schema.

This is a surrogate, not QRISK3: the published coefficients are not used.
The score is a plain logistic model, ``1 / (1 + exp(-(w.x + b)))``, with
weights read from a CSV table. Absent inputs are encoded as 0.

Encodings: ``sex`` is 1 for male and 0 for female; ``ethnicity`` is the
index of the group in :data:`octcvd.cohort.ETHNICITIES` (the default table
gives it weight 0 because the code is not ordinal); flags are 0/1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from importlib import resources

import numpy as np
from scipy.special import expit

from .cohort import ETHNICITIES

NOTICE = "baseline risk is a surrogate logistic score, not the published QRISK3 equations"

BOOLEAN_FIELDS = ("atrial_fibrillation", "atypical_antipsychotics", "steroid_tablets",
                  "erectile_dysfunction", "migraine", "rheumatoid_arthritis",
                  "chronic_kidney_disease", "severe_mental_illness", "lupus", "bp_treatment",
                  "diabetes_type1", "diabetes_type2", "heart_attack_relative", "smoking")


@dataclass(frozen=True)
class RiskInputs:
    sex: float | None = None
    age: float | None = None
    atrial_fibrillation: float | None = None
    atypical_antipsychotics: float | None = None
    steroid_tablets: float | None = None
    erectile_dysfunction: float | None = None
    migraine: float | None = None
    rheumatoid_arthritis: float | None = None
    chronic_kidney_disease: float | None = None
    severe_mental_illness: float | None = None
    lupus: float | None = None
    bp_treatment: float | None = None
    diabetes_type1: float | None = None
    diabetes_type2: float | None = None
    weight: float | None = None
    height: float | None = None
    ethnicity: float | None = None
    heart_attack_relative: float | None = None
    chol_hdl_ratio: float | None = None
    sbp: float | None = None
    sbp_std: float | None = None
    smoking: float | None = None
    townsend: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
            if (f.name in BOOLEAN_FIELDS or f.name == "sex") and v not in (0, 1):
                raise ValueError(f"{f.name} must be 0 or 1")

    def vector(self, names=None):
        names = VARIABLES if names is None else names
        vals = [getattr(self, n) for n in names]
        if any(v is None for v in vals):
            raise ValueError("inputs contain absent values; impute first")
        return np.array(vals, dtype=np.float64)


VARIABLES = tuple(f.name for f in fields(RiskInputs))


def impute_missing(inputs):
    """Replace every absent value with 0."""
    return replace(inputs, **{n: 0.0 for n in VARIABLES if getattr(inputs, n) is None})


@dataclass(frozen=True)
class WeightTable:
    weights: dict
    intercept: float

    def __post_init__(self):
        missing = [n for n in VARIABLES if n not in self.weights]
        if missing:
            raise KeyError(f"weight table has no entry for {missing[0]!r}")
        extra = sorted(set(self.weights) - set(VARIABLES))
        if extra:
            raise KeyError(f"weight table has unknown variable {extra[0]!r}")

    def vector(self):
        return np.array([self.weights[n] for n in VARIABLES], dtype=np.float64)


def read_weights(path):
    weights, intercept = {}, None
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            name, val = row["variable"].strip(), float(row["weight"])
            if name == "intercept":
                intercept = val
            else:
                weights[name] = val
    if intercept is None:
        raise KeyError("weight table has no 'intercept' row")
    return WeightTable(weights, intercept)


def default_weights():
    with resources.as_file(resources.files("octcvd") / "data" / "qrisk_weights.csv") as p:
        return read_weights(p)


def score_baseline(inputs, weights=None):
    """Risk in [0, 1] for one imputed record."""
    weights = default_weights() if weights is None else weights
    return float(expit(inputs.vector() @ weights.vector() + weights.intercept))


def score_many(records, weights=None):
    weights = default_weights() if weights is None else weights
    if not records:
        return np.zeros(0)
    X = np.stack([r.vector() for r in records])
    return expit(X @ weights.vector() + weights.intercept)


def inputs_from_patient(p):
    """Risk inputs available for a cohort record; everything else stays absent."""
    return RiskInputs(sex=1.0 if p.sex == "M" else 0.0, age=p.age, sbp=p.sbp,
                      ethnicity=float(ETHNICITIES.index(p.ethnicity)),
                      diabetes_type2=1.0 if p.diabetes_flag else 0.0)


def youden_threshold(scores, labels):
    """Threshold maximising sensitivity + specificity - 1 for ``score >= t``.

    Ties keep the smallest threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("Youden threshold needs both classes")
    best_t, best_j = None, -np.inf
    for t in np.unique(s):
        pred = s >= t
        j = pred[y].mean() + (~pred[~y]).mean() - 1.0
        if j > best_j:
            best_t, best_j = float(t), j
    return best_t


def write_scores(ids, scores, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "score"])
        for i, s in zip(ids, scores):
            w.writerow([int(i), repr(float(s))])
