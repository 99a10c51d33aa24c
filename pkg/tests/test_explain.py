import numpy as np
import pytest

from octcvd import explain as E
from octcvd._fallback import lk_solve as lk_solve_py
from octcvd._backend import kernels
from octcvd.cohort import CHOROID, LABELS


def texture(shape, dx=0.0, dy=0.0, seed=0):
    """Smooth isotropic texture translated by (dx, dy): b(x, y) = a(x - dx, y - dy)."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros(shape)
    for _ in range(40):
        theta = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / rng.uniform(24.0, 48.0)
        ph = rng.uniform(0, 2 * np.pi)
        img += np.sin(k * np.cos(theta) * (xx - dx) + k * np.sin(theta) * (yy - dy) + ph)
    return 0.5 + img / (1.5 * np.sqrt(80.0)) * 0.4


def mean_flow_error(dx, dy):
    """Per-component error of the mean flow over valid pixels."""
    a = texture((64, 64))
    b = texture((64, 64), dx, dy)
    f = E.lucas_kanade_flow(a, b)
    return abs(f.u[f.valid].mean() - dx), abs(f.v[f.valid].mean() - dy), f


class TestSelection:
    def test_metadata_excluded(self):
        assert E.select_top_latent({"zl066": 0.3, "zr010": 0.2, "bmi": 0.4}) == "zl066"

    def test_single(self):
        assert E.select_top_latent({"zr001": 0.1}) == "zr001"

    def test_tie_by_name(self):
        assert E.select_top_latent({"zr002": 0.5, "zl009": 0.5}) == "zl009"

    def test_scale_invariant(self):
        imp = {"zl001": 0.2, "zr003": 0.25, "age": 0.55}
        assert E.select_top_latent({k: 7 * v for k, v in imp.items()}) == E.select_top_latent(imp)

    def test_no_latents(self):
        with pytest.raises(ValueError):
            E.select_top_latent({"age": 1.0})


class TestPerturbation:
    def test_unit_sigma_is_noop(self):
        z = np.array([0.3, -1.2, 2.0])
        assert np.array_equal(E.perturb_latent(z, E.PerturbationSpec("zl001", 1.0)), z)

    def test_zero_latent_unchanged(self):
        z = np.array([0.3, 0.0, 2.0])
        assert np.array_equal(E.perturb_latent(z, E.PerturbationSpec("zl001", 3.0)), z)

    def test_locality(self):
        z = np.array([0.3, -1.2, 2.0])
        out = E.perturb_latent(z, E.PerturbationSpec("zr002", 0.5))
        assert np.flatnonzero(out != z).tolist() == [2] and out[2] == 1.0

    def test_additive_mode(self):
        out = E.perturb_latent(np.zeros(3), E.PerturbationSpec("zl000", 0.5, mode="add"))
        assert out.tolist() == [0.5, 0.0, 0.0]

    def test_unknown_latent(self):
        with pytest.raises(KeyError):
            E.perturb_latent(np.zeros(3), E.PerturbationSpec("zl007", 2.0))


class TestLucasKanade:
    def test_identical_images(self):
        a = texture((32, 32))
        f = E.lucas_kanade_flow(a, a)
        assert f.valid.all() and not f.u.any() and not f.v.any()

    def test_unit_horizontal_shift(self):
        eu, _, f = mean_flow_error(1, 0)
        assert eu <= 0.25
        assert np.abs(f.v[f.valid]).mean() <= 0.25

    @pytest.mark.parametrize("dx", range(-2, 3))
    @pytest.mark.parametrize("dy", range(-2, 3))
    def test_integer_translations(self, dx, dy):
        eu, ev, f = mean_flow_error(dx, dy)
        assert f.valid.mean() > 0.5
        assert max(eu, ev) <= 0.25

    def test_flat_pair_all_invalid(self):
        f = E.lucas_kanade_flow(np.full((20, 20), 0.4), np.full((20, 20), 0.4))
        assert not f.valid.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            E.lucas_kanade_flow(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_even_window(self):
        with pytest.raises(ValueError):
            E.lucas_kanade_flow(np.zeros((4, 4)), np.zeros((4, 4)), window=4)

    def test_backends_agree(self):
        a, b = texture((40, 30)), texture((40, 30), 1, -1)
        iy, ix = np.gradient(a)
        got = kernels.lk_solve(ix, iy, b - a, 15, 1e-4)
        ref = lk_solve_py(ix, iy, b - a, 15, 1e-4)
        assert np.array_equal(got[2], ref[2])
        np.testing.assert_allclose(got[0], ref[0], rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(got[1], ref[1], rtol=1e-9, atol=1e-12)


def _field(mag, valid=None):
    valid = np.ones(mag.shape, bool) if valid is None else valid
    return E.FlowField(mag.astype(float), np.zeros(mag.shape), valid, 15)


class TestAttribution:
    def test_choroid_only(self):
        mask = np.zeros((6, 6), np.uint8)
        mask[3:5] = CHOROID
        mag = np.where(mask == CHOROID, 0.7, 0.0)
        assert E.layer_attribution(_field(mag), mask)["choroid"] == pytest.approx(1.0, abs=1e-12)

    def test_uniform_is_area_weighted(self):
        mask = np.repeat(np.arange(12, dtype=np.uint8), 3).reshape(6, 6)
        fr = E.layer_attribution(_field(np.ones((6, 6))), mask)
        counts = np.bincount(mask.ravel(), minlength=12)
        for i, name in enumerate(LABELS):
            assert fr[name] == pytest.approx(counts[i] / 36)
        assert sum(fr.values()) == pytest.approx(1.0, abs=1e-9)

    def test_invalid_pixels_ignored(self):
        mask = np.zeros((2, 2), np.uint8)
        mask[1] = CHOROID
        valid = np.array([[False, False], [True, True]])
        assert E.layer_attribution(_field(np.ones((2, 2)), valid), mask)["choroid"] == 1.0

    def test_zero_flow(self):
        with pytest.raises(ValueError, match="no flow"):
            E.layer_attribution(_field(np.zeros((3, 3))), np.zeros((3, 3), np.uint8))


class TestModality:
    def test_split(self):
        out = E.modality_importance({"zl0": 0.5, "zr0": 0.3, "bmi": 0.2})
        assert out == pytest.approx({"left": 50.0, "right": 30.0, "metadata": 20.0})

    def test_latents_only(self):
        out = E.modality_importance({"zl001": 1.0, "zr001": 3.0})
        assert out["metadata"] == 0.0 and sum(out.values()) == pytest.approx(100.0, abs=1e-9)


class TestOverlay:
    def test_zero_flow_is_base(self, tmp_path):
        base = np.linspace(0, 1, 20).reshape(4, 5)
        E.render_overlay(base, _field(np.zeros((4, 5))), tmp_path / "o.pgm")
        assert np.array_equal(E.read_pgm(tmp_path / "o.pgm"), np.rint(base * 255).astype(np.uint8))

    def test_peak_is_white(self, tmp_path):
        mag = np.zeros((4, 5))
        mag[2, 3] = 0.8
        E.render_overlay(np.full((4, 5), 0.2), _field(mag), tmp_path / "o.pgm")
        img = E.read_pgm(tmp_path / "o.pgm")
        assert img[2, 3] == 255 and img.max() == 255

    def test_repeatable_bytes(self, tmp_path):
        a, b = texture((16, 16)), texture((16, 16), 1, 0)
        f = E.lucas_kanade_flow(a, b)
        E.render_overlay(a, f, tmp_path / "1.pgm")
        E.render_overlay(a, f, tmp_path / "2.pgm")
        assert (tmp_path / "1.pgm").read_bytes() == (tmp_path / "2.pgm").read_bytes()
        assert (tmp_path / "1.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")
