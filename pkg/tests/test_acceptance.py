"""One PASS/FAIL line per acceptance criterion (see the terminal summary).

Criteria 5 and 6 run the full default pipeline once and are marked slow;
deselect them with ``-m "not slow"``.
"""
import json
import math
import time

import numpy as np
import pytest
from test_explain import texture
from test_forest import planted

from octcvd import cohort as C
from octcvd import config as cfgmod
from octcvd import explain as E
from octcvd import forest as F
from octcvd import metrics as M
from octcvd import pipeline as P
from octcvd import quality as Q
from octcvd import tensor as T
from octcvd import vae as V
from octcvd.tensor import LayerSpec


def test_gradients(verdict):
    stacks = {
        "conv2d+batchnorm2d+leaky_relu+linear/mse": (
            [LayerSpec("conv2d", in_channels=1, out_channels=2, bias=False),
             LayerSpec("batchnorm2d", out_channels=2), LayerSpec("leaky_relu"),
             LayerSpec("linear", in_features=32, out_features=3)], (2, 1, 8, 8), "mse"),
        "conv2d+relu+linear/mse": (
            [LayerSpec("conv2d", in_channels=2, out_channels=3), LayerSpec("relu"),
             LayerSpec("linear", in_features=48, out_features=2)], (2, 2, 8, 8), "mse"),
        "conv_transpose2d+batchnorm2d+leaky_relu+conv_transpose2d/mse": (
            [LayerSpec("conv_transpose2d", in_channels=2, out_channels=2, output_padding=1, bias=False),
             LayerSpec("batchnorm2d", out_channels=2), LayerSpec("leaky_relu"),
             LayerSpec("conv_transpose2d", in_channels=2, out_channels=1, output_padding=1)],
            (2, 2, 3, 3), "mse"),
        "linear/kl": ([LayerSpec("linear", in_features=5, out_features=8)], (3, 5), "kl"),
    }
    t0 = time.perf_counter()
    errs = {name: max(T.grad_check(net, np.random.default_rng(seed).normal(size=shape), loss=loss,
                                   seed=seed, h=1e-4) for seed in range(5))
            for name, (net, shape, loss) in stacks.items()}
    took = time.perf_counter() - t0
    worst = max(errs.values())
    verdict(1, worst <= 1e-4 and took < 60,
            f"max relative error {worst:.2e} (limit 1e-4) over {len(errs)} layer/loss stacks x 5 seeds, "
            f"{took:.1f} s (limit 60 s)")


def test_vae_learning(verdict, monkeypatch):
    cfg = cfgmod.load()
    pats = C.generate_patients(C.CohortConfig(n_cases=1, n_controls=64, seed=11))
    src = C.VolumeSource(pats, cfg.cohort)
    vols = np.stack([src.get(p.id, "left").scans for p in pats if not p.positive][:64])
    kls = []
    real = V.elbo_loss

    def watched(*args, **kwargs):
        out = real(*args, **kwargs)
        kls.append(out[2].item())
        return out

    monkeypatch.setattr(V, "elbo_loss", watched)
    t0 = time.perf_counter()
    model = V.train(cfg.vae_left, vols)
    took = time.perf_counter() - t0
    h = model.history
    ratio = h[-1]["mse"] / h[0]["mse"]
    verdict(2, len(h) == 20 and ratio < 0.5 and min(kls) >= 0 and took < 600,
            f"{len(vols)} volumes {vols.shape[1:]}, {len(h)} epochs: final/epoch-1 MSE {ratio:.3f} (limit 0.5), "
            f"min KL over {len(kls)} steps {min(kls):.3g}, {took:.0f} s (limit 600 s)")


def test_lucas_kanade(verdict):
    base = texture((64, 64))
    worst, min_valid = 0.0, 1.0
    for dx in range(-2, 3):
        for dy in range(-2, 3):
            f = E.lucas_kanade_flow(base, texture((64, 64), dx, dy))
            worst = max(worst, abs(f.u[f.valid].mean() - dx), abs(f.v[f.valid].mean() - dy))
            min_valid = min(min_valid, f.valid.mean())
    flat = E.lucas_kanade_flow(np.full((64, 64), 0.4), np.full((64, 64), 0.4))
    verdict(3, worst <= 0.25 and min_valid > 0 and not flat.valid.any(),
            f"worst per-component error of mean flow over 25 shifts {worst:.3f} px (limit 0.25), "
            f"min valid fraction {min_valid:.2f}, flat pair invalid fraction {1 - flat.valid.mean():.2f}")


def test_statistics(verdict):
    r = M.mcnemar([True] * 20 + [False] * 5, [False] * 20 + [True] * 5)
    p1 = M.chi2_sf(3.841459, 1)
    p2 = M.chi2_sf(95.72, 1)
    ratio = p2 / 1.3e-22
    verdict(4, r.chi2 == 9.0 and abs(p1 - 0.05) <= 1e-4 and 1 / 1.1 <= ratio <= 1.1,
            f"McNemar(20,5) chi2 {r.chi2!r}; chi2_sf(3.841459) {p1:.6f}; chi2_sf(95.72) {p2:.3e} "
            f"(ratio to 1.3e-22: {ratio:.3f})")


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    cfg = cfgmod.load()
    t0 = time.perf_counter()
    root = P.run_pipeline(cfg, tmp_path_factory.mktemp("acceptance") / "run")
    return P.RunDir(root), time.perf_counter() - t0


@pytest.mark.slow
def test_desk_ordering(verdict, default_run):
    run, took = default_run
    auc = {r["name"]: r["auc"] for r in json.loads(run.path("metrics", "metrics_report.json").read_text())}
    be, le, re_, mt = (auc[P.model_name(d)] for d in ("BE-MTDT", "LE-MTDT", "RE-MTDT", "MTDT"))
    ok = be >= le >= re_ > mt and be >= 0.70 and mt <= be - 0.05 and took < 45 * 60
    verdict(5, ok, f"AUC BE-MTDT {be:.3f} >= LE-MTDT {le:.3f} >= RE-MTDT {re_:.3f} > MTDT {mt:.3f}; "
                   f"BE-MTDT >= 0.70; MTDT <= BE-MTDT - 0.05; runtime {took / 60:.1f} min (limit 45)")


@pytest.mark.slow
def test_choroid_attribution(verdict, default_run):
    run, _ = default_run
    doc = json.loads(run.path("explain", "explain.json").read_text())
    share = doc["choroid_majority_share"]
    verdict(6, share is not None and share >= 0.8,
            f"{doc['model']} via {doc['latent']}: choroid holds >= 50% of flow in "
            f"{'n/a' if share is None else f'{100 * share:.1f}%'} of {doc['correct_positive_volumes']} "
            f"correctly classified CVD+ test volumes (limit 80%)")


def test_forest_properties(verdict):
    small = planted(np.random.default_rng(3), n=80, d=6, informative=(0, 1), noise=0.6)
    vote_ok = True
    for n_trees in range(1, 16):
        model = F.fit_forest(small, F.ForestParams(n_trees=n_trees, seed=n_trees))
        votes = np.stack([t.predict(small.X) for t in model.trees])
        mode = (votes.sum(axis=0) * 2 >= n_trees).astype(int)
        vote_ok &= np.array_equal(F.predict(model, small), mode)
        vote_ok &= np.array_equal(F.predict_proba(model, small), votes.sum(axis=0) / n_trees)
    imp = F.feature_importance(F.fit_forest(small, F.ForestParams(n_trees=20)))
    imp_err = abs(imp.sum() - 1.0)
    hits = 0
    for seed in range(100):
        data = planted(np.random.default_rng(1000 + seed), n=200, d=12, informative=(3, 8), noise=0.3)
        hits += F.rfe_select(data, F.ForestParams(n_trees=25, seed=seed), 2) == ["f03", "f08"]
    invariant = 0
    for seed in range(20):
        data = planted(np.random.default_rng(seed), n=60, d=4, informative=(0, 2), noise=0.7)
        moved = F.FeatureMatrix(data.names, np.exp(data.X), data.y)
        p = F.ForestParams(n_trees=9, seed=seed)
        invariant += np.array_equal(F.predict_proba(F.fit_forest(data, p), data),
                                    F.predict_proba(F.fit_forest(moved, p), moved))
    verdict(7, vote_ok and imp_err <= 1e-12 and (imp >= 0).all() and hits >= 90 and invariant == 20,
            f"majority vote exact on 1..15 trees: {vote_ok}; |sum(importance) - 1| {imp_err:.1e}; "
            f"RFE recovery {hits}/100 (limit 90); monotone invariance {invariant}/20")


def test_filtering(verdict):
    cfg = C.CohortConfig(n_cases=20, n_controls=47, oversample=1.0, p_diabetes=0.1, seed=4)
    pats = C.generate_patients(cfg)
    src = C.VolumeSource(pats, cfg)
    reps = [Q.compute_qi(src.get(p.id, eye).scans, C.volume_id(p.id, eye)) for p in pats for eye in C.EYES]
    exact = True
    for eye in C.EYES:
        mine = [r for r in reps if r.volume_id.endswith(eye[0].upper())]
        kept, removed = Q.percentile_filter(mine, 0.2)
        lowest = sorted(mine, key=lambda r: (r.qi, r.volume_id))[:math.floor(0.2 * len(mine))]
        exact &= sorted(removed) == sorted(r.volume_id for r in lowest)
    _, audit = C.strobe_filter(pats, reps, qi_fraction=0.2)
    conserved = audit[0]["retained"] == len(pats) and all(
        a["retained"] - b["removed"] == b["retained"] for a, b in zip(audit, audit[1:]))
    big = C.generate_patients(C.CohortConfig())
    sizes = [len(s) for s in C.split_dataset(big, cfgmod.load().split_ratios, seed=0)]
    verdict(8, exact and conserved and sizes == [1423, 459, 964],
            f"percentile filter removes exactly floor(0.2 n) lowest per eye: {exact}; "
            f"audit conserved over {len(audit)} stages: {conserved}; split of {len(big)}: {sizes}")


def test_determinism(verdict, tiny_config, tiny_run, tmp_path):
    again = P.RunDir(P.run_pipeline(tiny_config, tmp_path / "again"))
    files = [tiny_run.path("metrics", "metrics_report.json")]
    files += sorted(tiny_run.path("models").iterdir()) + sorted(tiny_run.path("explain").glob("*.pgm"))
    rels = [f.relative_to(tiny_run.root) for f in files]
    same = [again.path(r).exists() and again.path(r).read_bytes() == tiny_run.path(r).read_bytes()
            for r in rels]
    n_pgm = sum(r.suffix == ".pgm" for r in rels)
    verdict(9, all(same) and n_pgm > 0,
            f"{sum(same)}/{len(same)} files byte-identical across two runs of the reduced configuration "
            f"(metrics_report.json, {len(rels) - n_pgm - 1} model files, {n_pgm} overlays)")
