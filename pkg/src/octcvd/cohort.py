"""Synthetic case/control cohort with layered retina phantoms.

Patient metadata follows fixed per-arm marginals; every subject gets a left
and a right volume rendered on demand from a per-(seed, subject, eye) random
stream, so nothing large has to be kept in memory. CVD+ volumes carry a
planted choroid effect: a thicker band and stronger vessel contrast.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .quality import percentile_filter

LAYERS = ("ILM", "RNFL", "GCL", "IPL", "INL", "OPL", "BMEIS", "IB_OPR", "IB_RPE", "OB_RPE")
BANDS = LAYERS + ("choroid",)
LABELS = ("background",) + BANDS
CHOROID = len(BANDS)
EYES = ("left", "right")
ETHNICITIES = ("White", "Mixed", "Asian or Asian British", "Black or Black British",
               "Chinese", "Other ethnic group")
ALCOHOL = ("Never", "Previous", "Current", "NotAnswered")
ALCOHOL_CODE = {"Never": 0, "Previous": 1, "Current": 2, "NotAnswered": -1}
EVENT_SOURCES = ("hospital_primary", "hospital_secondary", "death_record")
METADATA_FEATURES = ("sex", "age", "bmi", "sbp", "dbp", "hba1c_mmol", "hba1c_pct", "alcohol")
POS, NEG = "CVD+", "CVD-"

# per-arm (mean, sd) for continuous variables, percentages for categoricals
DEFAULT_MARGINALS = {
    POS: {
        "age": (60.78, 6.47), "bmi": (28.31, 4.45), "sbp": (147.26, 19.57),
        "dbp": (84.75, 10.23), "hba1c_mmol": (36.52, 4.32), "female_pct": 29.74,
        "ethnicity_pct": (90.18, 4.26, 3.93, 0.33, 0.16, 1.15),
        "alcohol_pct": (3.59, 5.72, 90.69, 0.0),
    },
    NEG: {
        "age": (60.78, 6.47), "bmi": (27.43, 4.33), "sbp": (145.1, 18.75),
        "dbp": (83.22, 9.73), "hba1c_mmol": (36.59, 6.61), "female_pct": 29.74,
        "ethnicity_pct": (89.22, 4.25, 4.41, 0.82, 0.49, 0.82),
        "alcohol_pct": (3.92, 3.92, 91.83, 0.33),
    },
}

# nominal band thickness in px at H=64, top to bottom
LAYER_THICKNESS = (1.6, 3.4, 3.8, 3.0, 3.0, 2.4, 5.0, 2.0, 1.8, 2.0)
LAYER_INTENSITY = (0.85, 0.72, 0.42, 0.58, 0.28, 0.52, 0.22, 0.82, 0.62, 0.92)


@dataclass(frozen=True)
class EffectSpec:
    choroid_thickening_px: float = 2.0
    left_multiplier: float = 1.5
    texture_contrast_delta: float = 0.08

    def __post_init__(self):
        if min(self.choroid_thickening_px, self.left_multiplier, self.texture_contrast_delta) < 0:
            raise ValueError("effect sizes must be non-negative")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (16, 64, 64)
    top_depth: tuple = (8.0, 1.2)
    # quadratic bowing of the retina, mean and sd in px at the image edge
    curvature: tuple = (3.0, 1.0)
    surface_ripple: float = 0.8
    choroid_thickness: tuple = (11.0, 1.6)
    choroid_intensity: float = 0.6
    vessel_contrast: float = 0.3
    speckle: float = 0.2
    # log-normal acquisition noise sigma; the right eye is noisier
    noise_median: float = 0.035
    noise_log_sd: float = 0.35
    right_noise_factor: float = 1.25

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if len(self.shape) != 3 or self.shape[1] < 32 or self.shape[2] < 8 or self.shape[0] < 1:
            raise ValueError("phantom shape must be (C>=1, H>=32, W>=8)")
        if min(self.top_depth[1], self.curvature[1], self.choroid_thickness[1], self.noise_log_sd,
               self.surface_ripple) < 0:
            raise ValueError("spreads must be non-negative")


@dataclass(frozen=True)
class CohortConfig:
    n_cases: int = 612
    n_controls: int = 2234
    # >1 enrols extra subjects so the exclusion stages can cut back to the targets
    oversample: float = 1.0
    marginals: dict = field(default_factory=lambda: DEFAULT_MARGINALS)
    effect: EffectSpec = field(default_factory=EffectSpec)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    p_event_before_imaging: float = 0.06
    p_diabetes: float = 0.045
    p_cardiomyopathy: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1 or self.n_controls < 1:
            raise ValueError("n_cases and n_controls must be >= 1")
        if self.oversample < 1.0:
            raise ValueError("oversample must be >= 1")
        for arm in (POS, NEG):
            for key, val in self.marginals[arm].items():
                if key in ("age", "bmi", "sbp", "dbp", "hba1c_mmol") and val[1] < 0:
                    raise ValueError(f"infeasible marginal: negative sd for {key} in {arm}")

    @property
    def enrolled(self):
        return (int(math.ceil(self.n_cases * self.oversample)),
                int(math.ceil(self.n_controls * self.oversample)))


@dataclass
class PatientRecord:
    id: int
    sex: str
    age: float
    ethnicity: str
    bmi: float
    sbp: float
    dbp: float
    hba1c_mmol: float
    hba1c_pct: float
    alcohol: str
    diabetes_flag: bool
    cardiomyopathy_flag: bool
    cvd_label: str
    event_offset_years: float | None
    event_source: str | None

    @property
    def positive(self):
        return self.cvd_label == POS

    def metadata_vector(self):
        return np.array([1.0 if self.sex == "F" else 0.0, self.age, self.bmi, self.sbp,
                         self.dbp, self.hba1c_mmol, self.hba1c_pct,
                         float(ALCOHOL_CODE[self.alcohol])])


@dataclass
class OctVolume:
    subject_id: int
    eye: str
    scans: np.ndarray
    layer_mask: np.ndarray
    qi_inputs: dict

    @property
    def volume_id(self):
        return volume_id(self.subject_id, self.eye)


def volume_id(subject_id, eye):
    return f"{int(subject_id):06d}_{eye[0].upper()}"


def parse_volume_id(vid):
    sid, side = vid.split("_")
    return int(sid), {"L": "left", "R": "right"}[side]


# --------------------------------------------------------------------------
# metadata


def _exact_moments(rng, n, mean, sd):
    z = rng.standard_normal(n)
    if n > 1:
        z = (z - z.mean()) / z.std()
    else:
        z = np.zeros(1)
    return mean + sd * z


def _exact_counts(n, pct):
    """Largest-remainder allocation of n items to categories with given percentages."""
    p = np.asarray(pct, dtype=np.float64)
    p = p / p.sum()
    raw = p * n
    counts = np.floor(raw).astype(np.int64)
    order = sorted(range(len(p)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - int(counts.sum())]:
        counts[i] += 1
    return counts


def _categorical(rng, n, labels, pct):
    out = np.repeat(np.array(labels, dtype=object), _exact_counts(n, pct))
    return out[rng.permutation(n)]


def hba1c_percent(mmol):
    """IFCC mmol/mol to NGSP percent (master equation)."""
    return np.asarray(mmol) / 10.929 + 2.15


def _arm_records(rng, n, label, marg, cfg, ids):
    cont = {k: _exact_moments(rng, n, *marg[k]) for k in ("age", "bmi", "sbp", "dbp", "hba1c_mmol")}
    sex = _categorical(rng, n, ("F", "M"), (marg["female_pct"], 100.0 - marg["female_pct"]))
    eth = _categorical(rng, n, ETHNICITIES, marg["ethnicity_pct"])
    alc = _categorical(rng, n, ALCOHOL, marg["alcohol_pct"])
    diab = rng.random(n) < cfg.p_diabetes
    cardio = rng.random(n) < cfg.p_cardiomyopathy
    if label == POS:
        before = rng.random(n) < cfg.p_event_before_imaging
        offset = np.where(before, -rng.uniform(0.0, 5.0, n), 5.0 - rng.uniform(0.0, 5.0, n))
        source = rng.choice(EVENT_SOURCES, size=n, p=(0.55, 0.35, 0.10))
    recs = []
    for i in range(n):
        recs.append(PatientRecord(
            id=int(ids[i]), sex=str(sex[i]), age=float(cont["age"][i]), ethnicity=str(eth[i]),
            bmi=float(cont["bmi"][i]), sbp=float(cont["sbp"][i]), dbp=float(cont["dbp"][i]),
            hba1c_mmol=float(cont["hba1c_mmol"][i]),
            hba1c_pct=float(hba1c_percent(cont["hba1c_mmol"][i])),
            alcohol=str(alc[i]), diabetes_flag=bool(diab[i]), cardiomyopathy_flag=bool(cardio[i]),
            cvd_label=label,
            event_offset_years=float(offset[i]) if label == POS else None,
            event_source=str(source[i]) if label == POS else None))
    return recs


def generate_patients(cfg, first_id=1):
    n_pos, n_neg = cfg.enrolled
    rng = np.random.default_rng([cfg.seed, 0x504154])
    ids = first_id + rng.permutation(n_pos + n_neg)
    recs = _arm_records(rng, n_pos, POS, cfg.marginals[POS], cfg, ids[:n_pos])
    recs += _arm_records(rng, n_neg, NEG, cfg.marginals[NEG], cfg, ids[n_pos:])
    return sorted(recs, key=lambda r: r.id)


def pretrain_pool(cfg, n, first_id):
    """CVD- subjects used only for VAE pretraining; ids start at ``first_id``."""
    pool_cfg = replace(cfg, n_cases=1, n_controls=n, oversample=1.0, seed=cfg.seed + 7919)
    return [r for r in generate_patients(pool_cfg, first_id) if not r.positive][:n]


# --------------------------------------------------------------------------
# phantom rendering


def _smooth_field(rng, shape, n_terms, amplitude):
    """Sum of low-frequency sinusoids over (slice, column)."""
    c, w = shape
    s = np.linspace(0.0, 1.0, c)[:, None]
    x = np.linspace(0.0, 1.0, w)[None, :]
    out = np.zeros(shape)
    for _ in range(n_terms):
        fs, fx = rng.uniform(0.3, 1.5, 2)
        ph = rng.uniform(0.0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fs * s + fx * x) + ph)
    return amplitude * out / max(n_terms, 1)


def _vessel_texture(x, depth, phases):
    """Population-wide vessel pattern in [0, 1] over column and depth-below-choroid-top."""
    t = (np.sin(2 * np.pi * (x / 9.0) + phases[0]) * np.sin(2 * np.pi * (depth / 7.0) + phases[1])
         + 0.6 * np.sin(2 * np.pi * (x / 5.0 + depth / 11.0) + phases[2]))
    return 0.5 + 0.5 * np.clip(t / 1.6, -1.0, 1.0)


def subject_effect(record, eye, effect):
    if not record.positive:
        return 0.0, 0.0
    mult = effect.left_multiplier if eye == "left" else 1.0
    return effect.choroid_thickening_px * mult, effect.texture_contrast_delta * mult


def render_volume(record, eye, cfg, seed=None, with_noise=True):
    """Render one (C, H, W) phantom and its label mask for ``record``'s ``eye``."""
    if eye not in EYES:
        raise ValueError(f"eye must be one of {EYES}")
    ph = cfg.phantom
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, int(record.id), EYES.index(eye)])
    c, h, w = ph.shape
    scale = h / 64.0

    # boundaries: (C, W, 12) top of ILM .. bottom of choroid, in px
    top = rng.normal(*ph.top_depth) * scale
    curv = rng.normal(*ph.curvature) * scale
    xs = np.linspace(-1.0, 1.0, w)[None, :]
    ss = np.linspace(-1.0, 1.0, c)[:, None]
    surface = top + curv * (xs ** 2 + 0.5 * ss ** 2) + _smooth_field(rng, (c, w), 2, ph.surface_ripple * scale)
    thick = np.array(LAYER_THICKNESS) * scale * rng.uniform(0.9, 1.1, len(LAYERS))
    thicken_px, contrast_delta = subject_effect(record, eye, cfg.effect)
    chor = (rng.normal(*ph.choroid_thickness) + thicken_px) * scale
    chor_field = np.maximum(chor + _smooth_field(rng, (c, w), 2, 0.6 * scale), 2.0)
    widths = np.concatenate([np.broadcast_to(thick, (c, w, len(LAYERS))),
                             chor_field[:, :, None]], axis=2)
    bounds = np.concatenate([surface[:, :, None], surface[:, :, None] + np.cumsum(widths, axis=2)],
                            axis=2)

    # band coverage of each pixel row gives partial-volume intensities
    y = np.arange(h, dtype=np.float64)[None, :, None, None]
    lo = bounds[:, None, :, :-1]
    hi = bounds[:, None, :, 1:]
    cover = np.clip(np.minimum(y + 1.0, hi) - np.maximum(y, lo), 0.0, 1.0)
    gain = rng.normal(1.0, 0.04)
    inten = np.array(LAYER_INTENSITY) * rng.uniform(0.93, 1.07, len(LAYERS)) * gain
    img = (cover[..., :len(LAYERS)] * inten).sum(axis=3)

    chor_top = bounds[:, None, :, len(LAYERS)]
    depth = (y[..., 0] + 0.5) - chor_top
    phases = rng.uniform(0.0, 2 * np.pi, 3)
    vessels = _vessel_texture(np.arange(w, dtype=np.float64)[None, None, :], depth, phases)
    contrast = ph.vessel_contrast + contrast_delta
    img += cover[..., CHOROID - 1] * ph.choroid_intensity * gain * (1.0 - contrast * vessels)
    below = np.clip(y[..., 0] + 1.0 - bounds[:, None, :, -1], 0.0, 1.0)
    img += below * 0.12 * gain

    centre = y[..., 0] + 0.5
    mask = np.zeros((c, h, w), dtype=np.uint8)
    for k in range(len(BANDS)):
        inside = (centre >= bounds[:, None, :, k]) & (centre < bounds[:, None, :, k + 1])
        mask[inside] = k + 1

    sigma = ph.noise_median * math.exp(ph.noise_log_sd * rng.standard_normal())
    if eye == "right":
        sigma *= ph.right_noise_factor
    if with_noise:
        img = img * rng.gamma(1.0 / ph.speckle ** 2, ph.speckle ** 2, img.shape)
        img = np.hypot(img + sigma * rng.standard_normal(img.shape),
                       sigma * rng.standard_normal(img.shape))
    img = np.clip(img, 0.0, 1.0)
    qi_inputs = {"noise_sigma": sigma, "speckle": ph.speckle if with_noise else 0.0}
    return OctVolume(int(record.id), eye, img, mask, qi_inputs)


def generate_volume(record, eye, cfg):
    return render_volume(record, eye, cfg)


class VolumeSource:
    """Lazily rendered volumes for a set of patients."""

    def __init__(self, patients, cfg):
        self.cfg = cfg
        self.by_id = {p.id: p for p in patients}

    def get(self, subject_id, eye):
        return render_volume(self.by_id[int(subject_id)], eye, self.cfg)

    def scans(self, subject_ids, eye):
        return ScanSequence(self, list(subject_ids), eye)


class ScanSequence:
    """Sequence view returning only the scan arrays, for VAE training and encoding."""

    def __init__(self, source, subject_ids, eye):
        self.source = source
        self.subject_ids = subject_ids
        self.eye = eye

    def __len__(self):
        return len(self.subject_ids)

    def __getitem__(self, i):
        return self.source.get(self.subject_ids[i], self.eye).scans


def generate_cohort(cfg):
    patients = generate_patients(cfg)
    return patients, VolumeSource(patients, cfg)


def choroid_thickness(mask):
    """Mean choroid height in px over all columns of a label mask."""
    mask = np.asarray(mask)
    return float((mask == CHOROID).sum(axis=-2).mean())


# --------------------------------------------------------------------------
# exclusion stages and split


def strobe_filter(patients, qi_reports, n_cases=None, n_controls=None, qi_fraction=0.2, seed=0):
    """Apply the exclusion stages in order; returns (retained patients, audit list).

    ``qi_reports`` holds reports for both eyes of every patient; the lowest
    ``qi_fraction`` of each eye is dropped, and a subject goes if either eye does.
    """
    audit = []
    current = sorted(patients, key=lambda p: p.id)

    def stage(name, keep):
        nonlocal current
        before = len(current)
        current = [p for p in current if keep(p)]
        audit.append({"stage": name, "removed": before - len(current), "retained": len(current)})

    audit.append({"stage": "enrolled", "removed": 0, "retained": len(current)})
    ids = {p.id for p in current}
    dropped = set()
    for eye in EYES:
        wanted = {volume_id(i, eye) for i in ids}
        reps = [r for r in qi_reports if r.volume_id in wanted]
        if len(reps) != len(ids):
            raise ValueError(f"missing quality reports for {eye} eye")
        _, removed = percentile_filter(reps, qi_fraction)
        dropped.update(parse_volume_id(v)[0] for v in removed)
    stage("low_quality_image", lambda p: p.id not in dropped)
    stage("event_before_imaging", lambda p: not p.positive or p.event_offset_years > 0)
    stage("diabetes_or_cardiomyopathy", lambda p: not (p.diabetes_flag or p.cardiomyopathy_flag))
    if n_cases is not None or n_controls is not None:
        rng = np.random.default_rng([seed, 0x5355])
        keep = set()
        for label, target in ((POS, n_cases), (NEG, n_controls)):
            arm = [p.id for p in current if p.cvd_label == label]
            if target is None:
                keep.update(arm)
                continue
            if target > len(arm):
                raise ValueError(f"only {len(arm)} {label} subjects survive exclusion, "
                                 f"{target} requested; raise oversample")
            keep.update(int(i) for i in rng.choice(arm, size=target, replace=False))
        stage("subsample", lambda p: p.id in keep)
    return current, audit


def _largest_remainder(total, weights):
    w = np.asarray(weights, dtype=np.float64)
    return _exact_counts(total, w / w.sum() * 100.0)


def split_dataset(patients, ratios, seed):
    """Stratified subject-level split into len(ratios) parts (train, validation, test)."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if (ratios <= 0).any():
        raise ValueError("ratios must be positive")
    pos = sorted(p.id for p in patients if p.positive)
    neg = sorted(p.id for p in patients if not p.positive)
    sizes = _largest_remainder(len(pos) + len(neg), ratios)
    n_pos = _largest_remainder(len(pos), ratios)
    n_pos = np.minimum(n_pos, sizes)
    # keep every split's size exact after clipping
    short = len(pos) - int(n_pos.sum())
    for i in np.argsort(-(sizes - n_pos), kind="stable")[:short]:
        n_pos[i] += 1
    n_neg = sizes - n_pos
    if (sizes == 0).any() or (n_neg < 0).any():
        raise ValueError("a split would be empty")
    rng = np.random.default_rng([seed, 0x53504C])
    pos = list(rng.permutation(pos))
    neg = list(rng.permutation(neg))
    out = []
    ip = ineg = 0
    for a, b in zip(n_pos, n_neg):
        part = pos[ip:ip + a] + neg[ineg:ineg + b]
        ip += a
        ineg += b
        out.append(sorted(int(i) for i in part))
    return tuple(out)


# --------------------------------------------------------------------------
# file formats

PATIENT_FIELDS = ("id", "sex", "age", "ethnicity", "bmi", "sbp", "dbp", "hba1c_mmol",
                  "hba1c_pct", "alcohol", "diabetes_flag", "cardiomyopathy_flag", "cvd_label",
                  "event_offset_years", "event_source")


def write_patients(patients, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PATIENT_FIELDS)
        for p in patients:
            row = asdict(p)
            w.writerow(["" if row[k] is None else
                        (repr(row[k]) if isinstance(row[k], float) else
                         str(int(row[k])) if isinstance(row[k], bool) else str(row[k]))
                        for k in PATIENT_FIELDS])


def read_patients(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(PatientRecord(
                id=int(row["id"]), sex=row["sex"], age=float(row["age"]),
                ethnicity=row["ethnicity"], bmi=float(row["bmi"]), sbp=float(row["sbp"]),
                dbp=float(row["dbp"]), hba1c_mmol=float(row["hba1c_mmol"]),
                hba1c_pct=float(row["hba1c_pct"]), alcohol=row["alcohol"],
                diabetes_flag=row["diabetes_flag"] == "1",
                cardiomyopathy_flag=row["cardiomyopathy_flag"] == "1",
                cvd_label=row["cvd_label"],
                event_offset_years=float(row["event_offset_years"]) if row["event_offset_years"] else None,
                event_source=row["event_source"] or None))
    return out


VOLUME_MAGIC = b"OCT1"


def write_volume(vol, path):
    c, h, w = vol.scans.shape
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<3i", c, h, w))
        fh.write(np.ascontiguousarray(vol.scans, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(vol.layer_mask, dtype=np.uint8).tobytes())


def read_volume(path, subject_id=0, eye="left"):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not an OCT1 volume")
    c, h, w = struct.unpack_from("<3i", blob, 4)
    n = c * h * w
    scans = np.frombuffer(blob, dtype="<f8", count=n, offset=16).astype(np.float64).reshape(c, h, w)
    mask = np.frombuffer(blob, dtype=np.uint8, count=n, offset=16 + 8 * n).reshape(c, h, w).copy()
    return OctVolume(subject_id, eye, scans, mask, {})


def write_audit(audit, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(audit, fh, indent=2)
        fh.write("\n")
