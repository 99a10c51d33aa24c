import csv
import json

import numpy as np
import pytest

from octcvd import cohort as C
from octcvd import forest as F
from octcvd import pipeline as P
from octcvd.config import DATASET_IDS


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def patients():
    return C.generate_patients(C.CohortConfig(n_cases=4, n_controls=6))


def latents(patients, eye, dim=128, drop=()):
    ids = [p.id for p in patients if p.id not in drop][::-1]
    names = [f"z{eye[0]}{i:03d}" for i in range(dim)]
    X = np.arange(len(ids) * dim, dtype=float).reshape(len(ids), dim) + (0 if eye == "left" else 0.5)
    return F.FeatureMatrix(names, X, ids=ids)


class TestAssemble:
    @pytest.mark.parametrize("did,width", [("LE", 128), ("RE", 128), ("BE", 256), ("MTDT", 8),
                                           ("LE-MTDT", 136), ("RE-MTDT", 136), ("BE-MTDT", 264)])
    def test_widths(self, patients, did, width):
        data = P.assemble_dataset(did, patients, latents(patients, "left"), latents(patients, "right"))
        assert data.X.shape == (10, width)

    def test_column_order_and_alignment(self, patients):
        left, right = latents(patients, "left"), latents(patients, "right")
        data = P.assemble_dataset("BE-MTDT", patients, left, right)
        assert data.names[0] == "zl000" and data.names[128] == "zr000" and data.names[256] == "sex"
        assert data.ids == sorted(p.id for p in patients)
        row = data.ids.index(left.ids[0])
        assert np.array_equal(data.X[row, :128], left.X[0])
        assert list(data.y) == [int(p.positive) for p in sorted(patients, key=lambda p: p.id)]

    def test_left_table_has_no_other_blocks(self, patients):
        data = P.assemble_dataset("LE", patients, latents(patients, "left"), latents(patients, "right"))
        assert all(n.startswith("zl") for n in data.names)

    def test_missing_right_latents(self, patients):
        with pytest.raises(KeyError, match="RE needs latents_right"):
            P.assemble_dataset("RE", patients, latents(patients, "left"), None)
        assert P.assemble_dataset("LE", patients, latents(patients, "left"), None).X.shape[1] == 128

    def test_missing_subject(self, patients):
        sid = patients[3].id
        with pytest.raises(KeyError, match=f"subject {sid} is missing from latents_left"):
            P.assemble_dataset("LE", patients, latents(patients, "left", drop={sid}))

    def test_unknown_id(self, patients):
        with pytest.raises(ValueError, match="unknown dataset id"):
            P.assemble_dataset("XE", patients)


class TestTables:
    def test_latents_round_trip(self, patients, tmp_path):
        lat = latents(patients, "right", dim=3)
        lat.X[0, 0] = 0.1 + 0.2
        P.write_latents(tmp_path / "l.csv", "right", lat.ids, lat.names, lat.X)
        back = P.read_latents(tmp_path / "l.csv")
        assert back.ids == lat.ids and back.names == lat.names and np.array_equal(back.X, lat.X)

    def test_dataset_round_trip(self, patients, tmp_path):
        data = P.assemble_dataset("MTDT", patients)
        P.write_dataset(tmp_path / "d.csv", data)
        back = P.read_dataset(tmp_path / "d.csv")
        assert back.ids == data.ids and np.array_equal(back.X, data.X) and np.array_equal(back.y, data.y)


class TestChooseModel:
    NAMES = {"LE": ["zl001"], "RE": ["zr004"], "MTDT": ["age"], "BE": ["zl000", "zr000"]}

    def test_skips_metadata_only(self):
        auc = {"LE": 0.7, "RE": 0.6, "MTDT": 0.9, "BE": 0.65}
        assert DATASET_IDS[P.choose_explained_model(auc, self.NAMES)] == "LE"

    def test_tie_takes_first_listed(self):
        auc = {"LE": 0.7, "RE": 0.7, "MTDT": 0.5, "BE": 0.7}
        assert DATASET_IDS[P.choose_explained_model(auc, self.NAMES)] == "LE"

    def test_no_latent_model(self):
        with pytest.raises(ValueError):
            P.choose_explained_model({"MTDT": 0.8}, self.NAMES)


class TestRunDir:
    def test_conflicting_config(self, tiny_config, tmp_path):
        P.RunDir(tmp_path).create(tiny_config)
        other = type(tiny_config)(**{**tiny_config.__dict__, "tree": {**tiny_config.tree, "seed": 5}})
        with pytest.raises(ValueError, match="different configuration"):
            P.RunDir(tmp_path).create(other)

    def test_missing_input_named(self, tiny_config, tmp_path):
        run = P.RunDir(tmp_path).create(tiny_config)
        with pytest.raises(P.StageError, match="stage 'qi' failed: missing input cohort/enrolled.csv"):
            P.run_stage("qi", run, tiny_config)


class TestTinyRun:
    def test_metrics_rows(self, tiny_run):
        rows = read_csv(tiny_run.path("report", "metrics.csv"))
        assert [r["name"] for r in rows] == [P.model_name(d) for d in DATASET_IDS] + [P.BASELINE_NAME]
        for r in rows:
            assert 0.0 <= float(r["auc"]) <= 1.0

    def test_mcnemar_pairs(self, tiny_run):
        rows = read_csv(tiny_run.path("report", "mcnemar_matrix.csv"))
        assert len(rows) == 28
        assert len({frozenset((r["name_a"], r["name_b"])) for r in rows}) == 28

    def test_importance_sums(self, tiny_run):
        rows = read_csv(tiny_run.path("report", "modality_importance.csv"))
        assert len(rows) == 7
        for r in rows:
            total = float(r["left_pct"]) + float(r["right_pct"]) + float(r["metadata_pct"])
            assert total == pytest.approx(100.0, abs=1e-9)
        mtdt = next(r for r in rows if r["model"] == "MTDT-RF")
        assert float(mtdt["metadata_pct"]) == pytest.approx(100.0)

    def test_splits(self, tiny_run):
        split = json.loads(tiny_run.path("cohort", "splits.json").read_text())
        parts = [set(split[k]) for k in ("train", "validation", "test")]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        assert sum(map(len, parts)) == 90

    def test_audit(self, tiny_run):
        audit = json.loads(tiny_run.path("cohort", "audit_strobe.json").read_text())
        assert audit[-1]["retained"] == 90

    def test_manifest_hashes(self, tiny_run):
        for stage in P.STAGES:
            doc = json.loads(tiny_run.path("manifests", f"{stage}.json").read_text())
            assert doc["stage"] == stage and doc["outputs"]
            for rel, digest in doc["outputs"].items():
                assert P.sha256(tiny_run.path(rel)) == digest

    def test_explain_summary(self, tiny_run):
        doc = json.loads(tiny_run.path("explain", "explain.json").read_text())
        assert doc["latent"][:2] in ("zl", "zr") and doc["sigma"] > 0
        rows = read_csv(tiny_run.path("explain", "attribution.csv"))
        vols = {r["volume_id"] for r in rows}
        assert len(vols) == doc["correct_positive_volumes"]
        assert len(rows) == len(vols) * len(C.LABELS)
        for v in vols:
            assert sum(float(r["fraction"]) for r in rows if r["volume_id"] == v) == pytest.approx(1.0)

    def test_deterministic(self, tiny_config, tiny_run, tmp_path):
        again = P.RunDir(P.run_pipeline(tiny_config, tmp_path / "again"))
        files = sorted(p.relative_to(tiny_run.root) for p in tiny_run.root.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(again.root) for p in again.root.rglob("*") if p.is_file())
        for rel in files:
            assert again.path(rel).read_bytes() == tiny_run.path(rel).read_bytes(), rel

    def test_rerun_stage_after_missing_right_eye(self, tiny_config, tiny_run, tmp_path):
        run = P.RunDir(tmp_path / "partial").create(tiny_config)
        for sub in ("cohort",):
            for f in tiny_run.path(sub).iterdir():
                run.path(sub, f.name).write_bytes(f.read_bytes())
        run.path("latents", "latents_left.csv").write_bytes(tiny_run.path("latents", "latents_left.csv").read_bytes())
        P.run_stage("assemble", run, tiny_config, ids=("LE",))
        assert run.path("latents", "dataset_LE.csv").exists()
        with pytest.raises(P.StageError, match="assemble"):
            P.run_stage("assemble", run, tiny_config, ids=("RE",))
