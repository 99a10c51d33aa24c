"""End-to-end experiment: cohort, quality filter, VAEs, forests, evaluation,
explanations and reports, run stage by stage inside one run directory."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import cohort as C
from . import explain as E
from . import forest as F
from . import metrics as M
from . import quality as Q
from . import riskscore as R
from . import vae as V
from ._backend import NAME as BACKEND
from .config import DATASET_IDS

log = logging.getLogger("octcvd")

STAGES = ("synth", "qi", "filter", "train-vae", "encode", "assemble", "train-rf", "evaluate",
          "explain", "report")
BASELINE_NAME = "QRISK3-surrogate"
SUBDIRS = ("manifests", "cohort", "models", "latents", "metrics", "explain", "report")
_ENCODE_CHUNK = 64


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def model_name(dataset_id):
    return f"{dataset_id}-RF"


# --------------------------------------------------------------------------
# run directory and manifests


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def create(self, cfg):
        for sub in SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        snap = self.root / "config.snapshot"
        text = cfg.dump()
        if snap.exists() and snap.read_text(encoding="utf-8") != text:
            raise ValueError(f"{self.root} holds a run with a different configuration")
        snap.write_text(text, encoding="utf-8")
        return self

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def require(self, *parts):
        p = self.path(*parts)
        if not p.exists():
            raise FileNotFoundError(f"missing input {p.relative_to(self.root)}; run the earlier stage first")
        return p


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run, stage, inputs, outputs, extra=None):
    """Stage record with content hashes of every input and output file."""
    rel = lambda p: str(Path(p).relative_to(run.root))  # noqa: E731
    doc = {"stage": stage, "backend": BACKEND,
           "config_sha256": sha256(run.path("config.snapshot")),
           "inputs": {rel(p): sha256(p) for p in sorted(map(Path, inputs))},
           "outputs": {rel(p): sha256(p) for p in sorted(map(Path, outputs))}}
    if extra:
        doc["extra"] = extra
    path = run.path("manifests", f"{stage}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# feature tables


def write_latents(path, eye, ids, names, X):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "eye"] + list(names))
        for sid, row in zip(ids, X):
            w.writerow([int(sid), eye] + [repr(float(v)) for v in row])


def read_latents(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][2:]
    ids = [int(r[0]) for r in rows[1:]]
    X = np.array([[float(v) for v in r[2:]] for r in rows[1:]]).reshape(len(ids), len(names))
    return F.FeatureMatrix(names, X, ids=ids)


def write_dataset(path, data):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label"] + data.names)
        for sid, label, row in zip(data.ids, data.y, data.X):
            w.writerow([int(sid), int(label)] + [repr(float(v)) for v in row])


def read_dataset(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][2:]
    ids = [int(r[0]) for r in rows[1:]]
    y = np.array([int(r[1]) for r in rows[1:]], dtype=np.int8)
    X = np.array([[float(v) for v in r[2:]] for r in rows[1:]]).reshape(len(ids), len(names))
    return F.FeatureMatrix(names, X, y, ids)


def metadata_matrix(patients):
    pats = sorted(patients, key=lambda p: p.id)
    return F.FeatureMatrix(list(C.METADATA_FEATURES), np.stack([p.metadata_vector() for p in pats]),
                           np.array([p.positive for p in pats], dtype=np.int8), [p.id for p in pats])


_BLOCKS = {"LE": ("left",), "RE": ("right",), "BE": ("left", "right"), "MTDT": ("metadata",),
           "LE-MTDT": ("left", "metadata"), "RE-MTDT": ("right", "metadata"),
           "BE-MTDT": ("left", "right", "metadata")}


def assemble_dataset(dataset_id, patients, latents_left=None, latents_right=None):
    """Feature matrix for one configuration, columns [zl.., zr.., metadata..], rows by subject id."""
    if dataset_id not in _BLOCKS:
        raise ValueError(f"unknown dataset id {dataset_id!r}; expected one of {DATASET_IDS}")
    meta = metadata_matrix(patients)
    sources = {"left": ("latents_left", latents_left), "right": ("latents_right", latents_right)}
    names, cols = [], []
    for block in _BLOCKS[dataset_id]:
        if block == "metadata":
            names += meta.names
            cols.append(meta.X)
            continue
        label, table = sources[block]
        if table is None:
            raise KeyError(f"{dataset_id} needs {label}, which is not available")
        pos = {sid: i for i, sid in enumerate(table.ids)}
        missing = [sid for sid in meta.ids if sid not in pos]
        if missing:
            raise KeyError(f"subject {missing[0]} is missing from {label}")
        names += table.names
        cols.append(table.X[[pos[sid] for sid in meta.ids]])
    return F.FeatureMatrix(names, np.hstack(cols), meta.y, meta.ids)


# --------------------------------------------------------------------------
# stages


def _patients(run, name):
    return C.read_patients(run.require("cohort", name))


def stage_synth(run, cfg, write_volumes=False):
    enrolled = C.generate_patients(cfg.cohort)
    pool = C.pretrain_pool(cfg.cohort, cfg.pretrain_pool, first_id=max(p.id for p in enrolled) + 1)
    out = [run.path("cohort", "enrolled.csv"), run.path("cohort", "pretrain_pool.csv")]
    C.write_patients(enrolled, out[0])
    C.write_patients(pool, out[1])
    if write_volumes:
        vdir = run.path("cohort", "volumes")
        vdir.mkdir(exist_ok=True)
        src = C.VolumeSource(enrolled, cfg.cohort)
        for p in enrolled:
            for eye in C.EYES:
                path = vdir / f"{C.volume_id(p.id, eye)}.oct"
                C.write_volume(src.get(p.id, eye), path)
                out.append(path)
    counts = {"enrolled_cases": sum(p.positive for p in enrolled),
              "enrolled_controls": sum(not p.positive for p in enrolled), "pretrain_pool": len(pool)}
    write_manifest(run, "synth", [], out, counts)


def stage_qi(run, cfg):
    enrolled = _patients(run, "enrolled.csv")
    src = C.VolumeSource(enrolled, cfg.cohort)
    reports = [Q.compute_qi(src.get(p.id, eye).scans, C.volume_id(p.id, eye))
               for p in enrolled for eye in C.EYES]
    out = run.path("cohort", "qi_reports.csv")
    Q.write_reports(reports, out)
    write_manifest(run, "qi", [run.path("cohort", "enrolled.csv")], [out])


def stage_filter(run, cfg):
    enrolled = _patients(run, "enrolled.csv")
    reports = Q.read_reports(run.require("cohort", "qi_reports.csv"))
    kept, audit = C.strobe_filter(enrolled, reports, cfg.cohort.n_cases, cfg.cohort.n_controls,
                                  cfg.qi_fraction, cfg.seed)
    train, val, test = C.split_dataset(kept, cfg.split_ratios, cfg.seed)
    out = [run.path("cohort", "patients.csv"), run.path("cohort", "audit_strobe.json"),
           run.path("cohort", "splits.json")]
    C.write_patients(kept, out[0])
    C.write_audit(audit, out[1])
    _write_json({"train": train, "validation": val, "test": test}, out[2])
    write_manifest(run, "filter", [run.path("cohort", "enrolled.csv"), run.path("cohort", "qi_reports.csv")],
                   out, {"sizes": [len(train), len(val), len(test)]})


def _render(src, ids, eye):
    return np.stack([src.get(i, eye).scans for i in ids]) if len(ids) else np.zeros((0,))


def stage_train_vae(run, cfg, eyes=C.EYES):
    pool = _patients(run, "pretrain_pool.csv")
    train_ids, val_ids, held_ids = C.split_dataset(pool, cfg.vae_split, cfg.seed)
    src = C.VolumeSource(pool, cfg.cohort)
    out, extra = [], {"pool_split": [len(train_ids), len(val_ids), len(held_ids)]}
    for eye in eyes:
        t0 = time.perf_counter()
        log.info("train-vae: %s eye on %d volumes", eye, len(train_ids))
        model = V.train(cfg.vae(eye), _render(src, train_ids, eye), _render(src, val_ids, eye))
        path = run.path("models", f"vae_{eye}.bin")
        V.save(model, path)
        out.append(path)
        extra[eye] = {"final_train_mse": model.history[-1]["mse"],
                      "heldout_mse": V.reconstruction_mse(model, _render(src, held_ids, eye))}
        log.info("train-vae: %s eye took %.1f s", eye, time.perf_counter() - t0)
    write_manifest(run, "train-vae", [run.path("cohort", "pretrain_pool.csv")], out, extra)


def stage_encode(run, cfg, eyes=C.EYES):
    patients = _patients(run, "patients.csv")
    ids = sorted(p.id for p in patients)
    src = C.VolumeSource(patients, cfg.cohort)
    out, inputs = [], [run.path("cohort", "patients.csv")]
    for eye in eyes:
        mpath = run.require("models", f"vae_{eye}.bin")
        inputs.append(mpath)
        model = V.load(mpath)
        chunks = []
        for start in range(0, len(ids), _ENCODE_CHUNK):
            chunk = ids[start:start + _ENCODE_CHUNK]
            chunks.append(V.encode_batch(model, _render(src, chunk, eye))[0])
        path = run.path("latents", f"latents_{eye}.csv")
        write_latents(path, eye, ids, V.latent_names(eye, model.config.latent_dim), np.concatenate(chunks))
        out.append(path)
    write_manifest(run, "encode", inputs, out)


def _load_latents(run, eye):
    p = run.path("latents", f"latents_{eye}.csv")
    return read_latents(p) if p.exists() else None


def stage_assemble(run, cfg, ids=DATASET_IDS):
    patients = _patients(run, "patients.csv")
    left, right = _load_latents(run, "left"), _load_latents(run, "right")
    out = []
    for did in ids:
        path = run.path("latents", f"dataset_{did}.csv")
        write_dataset(path, assemble_dataset(did, patients, left, right))
        out.append(path)
    inputs = [run.path("cohort", "patients.csv")] + [
        run.path("latents", f"latents_{e}.csv") for e in C.EYES
        if run.path("latents", f"latents_{e}.csv").exists()]
    write_manifest(run, "assemble", inputs, out)


def _splits(run):
    return _read_json(run.require("cohort", "splits.json"))


def _rows(data, subject_ids):
    pos = {sid: i for i, sid in enumerate(data.ids)}
    return data.rows([pos[s] for s in subject_ids])


def fit_configuration(data, cfg, dataset_id):
    """Feature elimination, grid search and final fit, all on the rows given."""
    k = min(cfg.rfe_k[dataset_id], len(data.names))
    rfe_params = F.ForestParams(n_trees=cfg.rfe_trees, class_weight=cfg.forest_base.class_weight,
                                max_features=cfg.forest_base.max_features, seed=cfg.seed)
    selected = F.rfe_select(data, rfe_params, k)
    sub = data.columns(selected)
    best, table = F.grid_search_cv(sub, cfg.forest_grid, cfg.folds, cfg.forest_base, cfg.seed)
    return F.fit_forest(sub, best), best, table


def stage_train_rf(run, cfg, ids=DATASET_IDS):
    split = _splits(run)
    inputs, out, extra = [run.path("cohort", "splits.json")], [], {}
    for did in ids:
        t0 = time.perf_counter()
        dpath = run.require("latents", f"dataset_{did}.csv")
        inputs.append(dpath)
        train = _rows(read_dataset(dpath), split["train"])
        model, best, table = fit_configuration(train, cfg, did)
        mpath = run.path("models", f"rf_{did}.bin")
        F.save(model, mpath)
        cv_path = run.path("metrics", f"cv_{did}.csv")
        F.write_cv_table(table, cv_path)
        out += [mpath, cv_path]
        extra[did] = {"features": model.feature_names, "params": asdict(best)}
        log.info("train-rf: %s done in %.1f s (%d features)", did, time.perf_counter() - t0,
                 len(model.feature_names))
    write_manifest(run, "train-rf", inputs, out, extra)


def _baseline(run, cfg, patients, split):
    weights = R.default_weights() if cfg.baseline_weights is None else R.read_weights(cfg.baseline_weights)
    pats = sorted(patients, key=lambda p: p.id)
    scores = R.score_many([R.impute_missing(R.inputs_from_patient(p)) for p in pats], weights)
    by_id = dict(zip((p.id for p in pats), scores))
    label = {p.id: int(p.positive) for p in pats}
    val = split["validation"]
    thr = R.youden_threshold([by_id[i] for i in val], [label[i] for i in val])
    return [p.id for p in pats], scores, by_id, thr


def stage_evaluate(run, cfg, ids=DATASET_IDS):
    patients = _patients(run, "patients.csv")
    split = _splits(run)
    label = {p.id: int(p.positive) for p in patients}
    test = split["test"]
    y_test = np.array([label[i] for i in test])
    reports, outcomes, pred_rows, val_auc = [], {}, [], {}
    inputs = [run.path("cohort", "patients.csv"), run.path("cohort", "splits.json")]
    for did in ids:
        mpath = run.require("models", f"rf_{did}.bin")
        dpath = run.require("latents", f"dataset_{did}.csv")
        inputs += [mpath, dpath]
        model, data = F.load(mpath), read_dataset(dpath)
        probs = F.predict_proba(model, _rows(data, test))
        rep = M.evaluate(model_name(did), probs, y_test, cfg.threshold)
        reports.append(rep)
        outcomes[rep.name] = (probs >= cfg.threshold) == y_test.astype(bool)
        val = split["validation"]
        val_auc[did] = M.roc_auc(F.predict_proba(model, _rows(data, val)), [label[i] for i in val])
        pred_rows += [(rep.name, sid, p, int(p >= cfg.threshold), y) for sid, p, y in zip(test, probs, y_test)]
    all_ids, scores, by_id, thr = _baseline(run, cfg, patients, split)
    risk_path = run.path("metrics", "risk_scores.csv")
    R.write_scores(all_ids, scores, risk_path)
    base = np.array([by_id[i] for i in test])
    rep = M.evaluate(BASELINE_NAME, base, y_test, thr)
    reports.append(rep)
    outcomes[rep.name] = (base >= thr) == y_test.astype(bool)
    pred_rows += [(rep.name, sid, p, int(p >= thr), y) for sid, p, y in zip(test, base, y_test)]
    log.warning("%s", R.NOTICE)

    out = [run.path("metrics", n) for n in ("metrics_report.json", "predictions.csv", "mcnemar.csv",
                                             "validation_auc.json")] + [risk_path]
    M.write_report(reports, out[0])
    with open(out[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "subject_id", "probability", "prediction", "label"])
        for name, sid, p, pred, y in pred_rows:
            w.writerow([name, int(sid), repr(float(p)), pred, int(y)])
    M.write_mcnemar(M.mcnemar_matrix(outcomes), out[2])
    _write_json({"validation_auc": val_auc, "baseline_threshold": thr}, out[3])
    write_manifest(run, "evaluate", inputs, out)


def choose_explained_model(val_auc, feature_names):
    """Highest validation AUC among configurations with at least one latent feature."""
    cands = [(auc, did) for did, auc in val_auc.items()
             if any(E.is_latent(n) for n in feature_names[did])]
    if not cands:
        raise ValueError("no fitted configuration uses latent features")
    best = max(a for a, _ in cands)
    return min(DATASET_IDS.index(d) for a, d in cands if a == best)


def stage_explain(run, cfg):
    patients = _patients(run, "patients.csv")
    split = _splits(run)
    val_auc = _read_json(run.require("metrics", "validation_auc.json"))["validation_auc"]
    models = {did: F.load(run.require("models", f"rf_{did}.bin")) for did in val_auc}
    did = DATASET_IDS[choose_explained_model(val_auc, {d: m.feature_names for d, m in models.items()})]
    model = models[did]
    latent = E.select_top_latent(F.importance_table(model))
    eye = "left" if latent.startswith("zl") else "right"
    vae_path = run.require("models", f"vae_{eye}.bin")
    vae = V.load(vae_path)
    spec = E.spec_for(vae, latent, cfg.explain.mode)

    data = read_dataset(run.require("latents", f"dataset_{did}.csv"))
    test = split["test"]
    probs = F.predict_proba(model, _rows(data, test))
    label = {p.id: p.positive for p in patients}
    chosen = [sid for sid, p in zip(test, probs) if label[sid] and p >= cfg.threshold]
    src = C.VolumeSource(patients, cfg.cohort)

    rows, fractions, overlays = [], [], []
    for n, sid in enumerate(chosen):
        vol = src.get(sid, eye)
        base, moved = E.perturb_and_reconstruct(vae, vol.scans, spec, eye)
        ref = base if cfg.explain.target == "reconstruction" else vol.scans
        flow = E.volume_flow(ref, moved, cfg.explain.window, cfg.explain.tau)
        try:
            attr = E.layer_attribution(flow, vol.layer_mask)
        except ValueError:
            # a perturbation that leaves the image unchanged attributes nothing
            attr = {name: 0.0 for name in C.LABELS}
        rows.append((vol.volume_id, attr))
        fractions.append(attr["choroid"])
        if n < cfg.explain.overlay_subjects:
            c = vol.scans.shape[0]
            for s in sorted({0, c // 2, c - 1}):
                path = run.path("explain", f"overlay_{vol.volume_id}_scan{s:03d}.pgm")
                E.render_overlay(vol.scans[s], E.FlowField(flow.u[s], flow.v[s], flow.valid[s], flow.window),
                                 path)
                overlays.append(path)
    attr_path = run.path("explain", "attribution.csv")
    E.write_attribution(rows, attr_path)
    frac = np.array(fractions)
    summary = {"model": model_name(did), "latent": latent, "eye": eye, "sigma": spec.sigma,
               "mode": spec.mode, "target": cfg.explain.target,
               "correct_positive_volumes": len(chosen),
               "choroid_majority_share": float((frac >= 0.5).mean()) if frac.size else None,
               "mean_choroid_fraction": float(frac.mean()) if frac.size else None}
    sum_path = run.path("explain", "explain.json")
    _write_json(summary, sum_path)
    write_manifest(run, "explain", [vae_path, run.path("models", f"rf_{did}.bin")],
                   [attr_path, sum_path] + overlays)


def stage_report(run, cfg):
    reports = _read_json(run.require("metrics", "metrics_report.json"))
    order = [model_name(d) for d in DATASET_IDS] + [BASELINE_NAME]
    reports.sort(key=lambda r: order.index(r["name"]))
    cols = ["name", "accuracy", "sensitivity", "specificity", "auc", "threshold"]
    out = [run.path("report", n) for n in ("metrics.csv", "metrics.json", "confusion_counts.csv",
                                           "modality_importance.csv", "mcnemar_matrix.csv")]
    with open(out[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in reports:
            w.writerow([r[c] if isinstance(r[c], str) else ("" if r[c] is None else repr(r[c])) for c in cols])
    _write_json(reports, out[1])
    with open(out[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "TP", "TN", "FP", "FN"])
        for r in reports:
            c = r["confusion"]
            w.writerow([r["name"], c["tp"], c["tn"], c["fp"], c["fn"]])
    inputs = [run.path("metrics", "metrics_report.json"), run.path("metrics", "mcnemar.csv")]
    with open(out[3], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "left_pct", "right_pct", "metadata_pct"])
        for did in DATASET_IDS:
            p = run.path("models", f"rf_{did}.bin")
            if not p.exists():
                continue
            inputs.append(p)
            pct = E.modality_importance(F.importance_table(F.load(p)))
            w.writerow([model_name(did), repr(pct["left"]), repr(pct["right"]), repr(pct["metadata"])])
    out[4].write_bytes(run.require("metrics", "mcnemar.csv").read_bytes())
    summary = run.path("report", "summary.txt")
    lines = [f"{r['name']:<18} AUC {r['auc']:.3f}  accuracy {r['accuracy']:.3f}" for r in reports]
    ex = run.path("explain", "explain.json")
    if ex.exists():
        e = _read_json(ex)
        inputs.append(ex)
        share = e["choroid_majority_share"]
        lines.append(f"explained {e['model']} via {e['latent']}: choroid holds >= 50% of flow in "
                     f"{'n/a' if share is None else f'{100 * share:.1f}%'} of "
                     f"{e['correct_positive_volumes']} correctly classified CVD+ test volumes")
    lines.append(f"note: {R.NOTICE}")
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    out.append(summary)
    write_manifest(run, "report", inputs, out)


RUNNERS = {"synth": stage_synth, "qi": stage_qi, "filter": stage_filter, "train-vae": stage_train_vae,
           "encode": stage_encode, "assemble": stage_assemble, "train-rf": stage_train_rf,
           "evaluate": stage_evaluate, "explain": stage_explain, "report": stage_report}


def run_stage(stage, run, cfg, **kwargs):
    log.info("stage %s", stage)
    t0 = time.perf_counter()
    try:
        RUNNERS[stage](run, cfg, **kwargs)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(stage, exc) from exc
    log.info("stage %s finished in %.1f s", stage, time.perf_counter() - t0)


def run_pipeline(cfg, out_dir):
    run = RunDir(out_dir).create(cfg)
    for stage in STAGES:
        run_stage(stage, run, cfg)
    return run.root
