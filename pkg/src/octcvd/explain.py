"""Latent-traversal explanations: perturb the most important latent, decode,
measure optical flow between the reconstructions and attribute it to layers."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass

import numpy as np

from . import vae as V
from ._backend import kernels
from .cohort import LABELS

_LATENT = re.compile(r"^z([lr])(\d+)$")


def is_latent(name):
    return _LATENT.match(name) is not None


def select_top_latent(importances):
    """Name of the most important zl*/zr* feature; ties go to the smaller name."""
    cands = [(v, n) for n, v in importances.items() if is_latent(n)]
    if not cands:
        raise ValueError("no latent features among the importances")
    best = max(v for v, _ in cands)
    return min(n for v, n in cands if v == best)


@dataclass(frozen=True)
class PerturbationSpec:
    latent: str
    sigma: float
    mode: str = "multiply"

    def __post_init__(self):
        if not is_latent(self.latent):
            raise ValueError(f"{self.latent!r} is not a latent feature name")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.mode not in ("multiply", "add"):
            raise ValueError("mode must be 'multiply' or 'add'")

    @property
    def eye(self):
        return "left" if _LATENT.match(self.latent).group(1) == "l" else "right"

    @property
    def index(self):
        return int(_LATENT.match(self.latent).group(2))


def spec_for(model, latent, mode="multiply"):
    """Perturbation spec using the model's population std of ``latent``."""
    idx = int(_LATENT.match(latent).group(2))
    return PerturbationSpec(latent, float(model.latent_std[idx]), mode)


def perturb_latent(z, spec):
    z = np.asarray(z, dtype=np.float64)
    if spec.index >= z.shape[-1]:
        raise KeyError(f"unknown latent {spec.latent!r}")
    out = z.copy()
    if spec.mode == "multiply":
        out[..., spec.index] = z[..., spec.index] * spec.sigma
    else:
        out[..., spec.index] = z[..., spec.index] + spec.sigma
    return out


def perturb_and_reconstruct(model, volume, spec, eye=None):
    """Decode the posterior mean and its single-coordinate perturbation."""
    if eye is not None and spec.eye != eye:
        raise ValueError(f"{spec.latent} belongs to the {spec.eye} eye, model is for {eye}")
    if spec.index >= model.config.latent_dim:
        raise KeyError(f"unknown latent {spec.latent!r}")
    mu, _ = V.encode(model, volume)
    return V.decode(model, mu), V.decode(model, perturb_latent(mu, spec))


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    window: int

    @property
    def magnitude(self):
        return np.where(self.valid, np.hypot(self.u, self.v), 0.0)


def lucas_kanade_flow(img_a, img_b, window=15, tau=1e-4):
    """Single-level dense Lucas-Kanade flow from ``img_a`` to ``img_b``."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"images must be 2-d and equal in shape, got {a.shape} and {b.shape}")
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    iy, ix = np.gradient(a)
    u, v, valid = kernels.lk_solve(np.ascontiguousarray(ix), np.ascontiguousarray(iy),
                                   np.ascontiguousarray(b - a), window, tau)
    valid = np.asarray(valid, dtype=bool)
    return FlowField(np.asarray(u), np.asarray(v), valid, window)


def volume_flow(base, perturbed, window=15, tau=1e-4):
    """Per-B-scan flow stacked into (C, H, W) fields."""
    fields = [lucas_kanade_flow(a, b, window, tau) for a, b in zip(base, perturbed)]
    return FlowField(np.stack([f.u for f in fields]), np.stack([f.v for f in fields]),
                     np.stack([f.valid for f in fields]), window)


def layer_attribution(flow, mask):
    """Fraction of valid flow magnitude inside each labelled band."""
    mask = np.asarray(mask)
    if mask.shape != flow.u.shape:
        raise ValueError(f"mask shape {mask.shape} does not match flow shape {flow.u.shape}")
    mag = flow.magnitude
    total = mag.sum()
    if not total > 0:
        raise ValueError("no flow to attribute")
    sums = np.bincount(mask.ravel().astype(np.int64), weights=mag.ravel(), minlength=len(LABELS))
    return {name: float(s / total) for name, s in zip(LABELS, sums[:len(LABELS)])}


def modality_importance(importances):
    """Percent of total importance held by left latents, right latents and metadata."""
    if not importances:
        raise ValueError("empty importance vector")
    groups = {"left": 0.0, "right": 0.0, "metadata": 0.0}
    for name, val in importances.items():
        m = _LATENT.match(name)
        key = "metadata" if m is None else ("left" if m.group(1) == "l" else "right")
        groups[key] += float(val)
    total = sum(groups.values())
    if not total > 0:
        raise ValueError("importances sum to zero")
    return {k: 100.0 * v / total for k, v in groups.items()}


def overlay_image(scan, flow):
    """Base intensities boosted towards white in proportion to normalised flow."""
    base = np.clip(np.asarray(scan, dtype=np.float64), 0.0, 1.0)
    mag = flow.magnitude
    peak = mag.max()
    if peak <= 0:
        return base
    w = mag / peak
    return base + (1.0 - base) * w


def write_pgm(image, path):
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    data = np.rint(img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def render_overlay(scan, flow, path):
    write_pgm(overlay_image(scan, flow), path)


def write_attribution(rows, path):
    """``rows``: iterable of (volume id, {layer: fraction})."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["volume_id", "layer", "fraction"])
        for vid, fr in rows:
            for layer in LABELS:
                w.writerow([vid, layer, repr(fr[layer])])
