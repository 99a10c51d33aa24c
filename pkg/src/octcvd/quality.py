"""Image quality index used to drop the noisiest volumes.

The index is a surrogate: an intensity ratio (mean over noise floor) times a
tissue-signal ratio (pixels above the floor threshold over pixels below it).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

DARK_FRACTION = 0.01
FLOOR_MIN = 1e-6


@dataclass(frozen=True)
class QualityReport:
    volume_id: str
    ir: float
    tsr: float
    qi: float


def scan_terms(scan):
    """(IR, TSR) of one 2-d B-scan."""
    flat = np.asarray(scan, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty scan")
    if flat.min() == flat.max():
        raise ValueError("degenerate histogram: constant image")
    k = max(1, int(math.ceil(DARK_FRACTION * flat.size)))
    dark = np.partition(flat, k - 1)[:k]
    floor = max(float(dark.mean()), FLOOR_MIN)
    ir = float(flat.mean()) / floor
    thr = floor + 3.0 * float(dark.std())
    above = int(np.count_nonzero(flat > thr))
    tsr = above / max(1, flat.size - above)
    return ir, tsr


def compute_qi(scans, volume_id=""):
    """Quality report of a (C, H, W) stack; IR and TSR are averaged over B-scans."""
    scans = np.asarray(scans, dtype=np.float64)
    if scans.ndim == 2:
        scans = scans[None]
    if scans.size == 0:
        raise ValueError("empty volume")
    terms = np.array([scan_terms(s) for s in scans])
    ir, tsr = float(terms[:, 0].mean()), float(terms[:, 1].mean())
    return QualityReport(str(volume_id), ir, tsr, ir * tsr)


def add_magnitude_noise(scans, sigma, rng):
    """Magnitude of the image plus complex Gaussian noise, clipped to [0, 1]."""
    scans = np.asarray(scans, dtype=np.float64)
    re = scans + sigma * rng.standard_normal(scans.shape)
    im = sigma * rng.standard_normal(scans.shape)
    return np.minimum(np.hypot(re, im), 1.0)


def percentile_filter(reports, fraction):
    """Split ids into (kept, removed); removes floor(fraction*n) lowest QI, ties by id."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    reports = list(reports)
    n_drop = int(math.floor(fraction * len(reports)))
    ranked = sorted(reports, key=lambda r: (r.qi, r.volume_id))
    removed = [r.volume_id for r in ranked[:n_drop]]
    dropped = set(removed)
    kept = [r.volume_id for r in reports if r.volume_id not in dropped]
    return kept, removed


FIELDS = ("volume_id", "ir", "tsr", "qi")


def write_reports(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(FIELDS)
        for r in reports:
            w.writerow([r.volume_id, repr(r.ir), repr(r.tsr), repr(r.qi)])


def read_reports(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [QualityReport(r["volume_id"], float(r["ir"]), float(r["tsr"]), float(r["qi"]))
            for r in rows]
