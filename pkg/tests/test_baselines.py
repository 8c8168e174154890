import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reflectgan import baselines as bl, dataset as ds
from reflectgan.errors import ConfigError, DataError, DegenerateInputError

SOIL = np.array([0.10, 0.12, 0.16, 0.20, 0.26, 0.33, 0.30])
VEG = np.array([0.03, 0.05, 0.09, 0.04, 0.45, 0.15, 0.06])


def em():
    return bl.EndmemberSet(SOIL, VEG)


# -- endmember set -------------------------------------------------------------------

def test_endmember_validation():
    with pytest.raises(DegenerateInputError):
        bl.EndmemberSet(SOIL, SOIL + 1e-8)
    with pytest.raises(ConfigError):
        bl.EndmemberSet(SOIL, VEG[:6])
    with pytest.raises(ConfigError):
        bl.EndmemberSet(SOIL * 5, VEG)
    with pytest.raises(ConfigError):
        bl.EndmemberSet(SOIL, VEG, provenance="guessed")


# -- unmixing ------------------------------------------------------------------------------

def test_pure_endmembers():
    a = bl.sma_unmix(SOIL, em())
    assert a.f_soil == pytest.approx(1.0, abs=1e-12) and a.residual_norm == pytest.approx(0.0, abs=1e-12)
    assert bl.sma_unmix(VEG, em()).f_soil == pytest.approx(0.0, abs=1e-12)


def test_half_mixture():
    a = bl.sma_unmix(0.5 * SOIL + 0.5 * VEG, em())
    assert a.f_soil == pytest.approx(0.5, abs=1e-12)
    assert a.f_soil + a.f_veg == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0))
def test_linear_mixture_exact(f):
    mixed = f * SOIL + (1 - f) * VEG
    a = bl.sma_unmix(mixed, em())
    assert abs(a.f_soil - f) <= 1e-8
    if f >= 0.05:
        np.testing.assert_allclose(bl.sma_correct(mixed, em()).bare, SOIL, atol=1e-8, rtol=0)


def test_abundance_clipped():
    beyond = SOIL + 0.5 * (SOIL - VEG)
    a = bl.sma_unmix(np.clip(beyond, 0, 1), em())
    assert a.f_soil == 1.0


def test_batch_matches_rows():
    rng = np.random.default_rng(0)
    f = rng.uniform(0, 1, 20)
    mixed = f[:, None] * SOIL + (1 - f[:, None]) * VEG + rng.normal(0, 0.01, (20, 7))
    batch = bl.sma_unmix(mixed, em())
    for i in range(20):
        assert bl.sma_unmix(mixed[i], em()).f_soil == pytest.approx(batch.f_soil[i], abs=1e-15)


def test_low_confidence_flag():
    mixed = np.stack([0.02 * SOIL + 0.98 * VEG, 0.6 * SOIL + 0.4 * VEG])
    r = bl.sma_correct(mixed, em(), f_floor=0.05)
    assert r.low_confidence.tolist() == [True, False]
    assert np.all((r.bare >= 0) & (r.bare <= 1))
    with pytest.raises(ConfigError):
        bl.sma_correct(mixed, em(), f_floor=0.0)


def test_least_squares_optimality():
    # the clipped closed form equals a dense grid search over f in [0, 1]
    rng = np.random.default_rng(1)
    grid = np.linspace(0, 1, 100001)
    for _ in range(20):
        x = rng.uniform(0, 0.5, 7)
        errs = ((x[None, :] - (VEG + grid[:, None] * (SOIL - VEG))) ** 2).sum(axis=1)
        assert bl.sma_unmix(x, em()).f_soil == pytest.approx(grid[np.argmin(errs)], abs=2e-5)


# -- endmember estimation and files ------------------------------------------------------

def test_estimate_endmembers_means():
    bare = np.stack([SOIL, SOIL * 1.1])
    veg = np.stack([VEG, VEG * 0.9, 0.5 * SOIL + 0.5 * VEG])
    e = bl.estimate_endmembers(bare, veg)
    np.testing.assert_allclose(e.soil, SOIL * 1.05)
    np.testing.assert_allclose(e.vegetation, VEG * 0.95)
    assert e.provenance == "estimated-from-data"


def test_estimate_endmembers_fallback(caplog):
    veg = np.stack([0.5 * SOIL + 0.5 * VEG, 0.3 * SOIL + 0.7 * VEG])
    e = bl.estimate_endmembers(SOIL[None, :], veg)
    np.testing.assert_allclose(e.vegetation, veg[1])
    assert "highest-NDVI" in caplog.text


def test_estimate_endmembers_needs_bare():
    with pytest.raises(DataError):
        bl.estimate_endmembers(np.zeros((0, 7)), VEG[None, :])


def test_estimate_endmembers_on_synthetic_pure_canopy():
    # with full canopy, no canopy variability and no illumination change the
    # dense vegetated samples are the canopy spectrum up to noise
    cfg = ds.SynthConfig(n_samples=400, canopy_fraction_range=(1.0, 1.0), canopy_variability=0.0,
                         illumination_variability=0.0, nonlinear_strength=0.0, noise_sigma=0.001,
                         bare_canopy_max=0.0)
    samples, truth = ds.synth_generate(cfg)
    bare, veg = ds.classify_by_ndvi(samples)
    e = bl.estimate_endmembers(np.array([s.bands for s in bare]), np.array([s.bands for s in veg]))
    assert np.abs(e.vegetation - ds.CANOPY).max() < 3 * cfg.noise_sigma
    np.testing.assert_allclose(e.soil, np.mean([truth[s.id] for s in bare], axis=0), atol=3 * cfg.noise_sigma)


def test_endmember_file_roundtrip(tmp_path):
    p = tmp_path / "em.csv"
    bl.write_endmembers(p, em())
    back = bl.read_endmembers(p, 7)
    np.testing.assert_array_equal(back.soil, SOIL)
    np.testing.assert_array_equal(back.vegetation, VEG)
    with pytest.raises(DataError):
        bl.read_endmembers(p, 6)
    p.write_text("role,b1\nsoil,0.1\n")
    with pytest.raises(DataError):
        bl.read_endmembers(p)


# -- VI regression correction -------------------------------------------------------------

def _vi_data(n=60, seed=2):
    rng = np.random.default_rng(seed)
    f = rng.uniform(0.2, 0.9, n)
    soil = SOIL * rng.uniform(0.8, 1.2, (n, 1))
    return f[:, None] * VEG + (1 - f[:, None]) * soil


def test_vi_correction_removes_index_trend():
    x = _vi_data()
    p = bl.vi_predictors(x)
    out = bl.vi_correction(x)
    pc = p - p.mean(axis=0)
    # residuals are orthogonal to the centred predictors
    np.testing.assert_allclose(pc.T @ (out - out.mean(axis=0)), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.mean(axis=0), x.mean(axis=0), atol=1e-12)


def test_vi_correction_idempotent_with_fixed_predictors():
    x = _vi_data()
    p = bl.vi_predictors(x)
    once = bl.vi_correction(x, p)
    np.testing.assert_allclose(bl.vi_correction(once, p), once, atol=1e-12)


def test_vi_correction_fit_apply_split():
    x = _vi_data()
    model = bl.fit_vi_correction(x[:40])
    assert model.coef.shape == (2, 7)
    out = model.apply(x[40:])
    assert out.shape == (20, 7)
    with pytest.raises(ConfigError):
        model.apply(x[40:], predictors=np.zeros((3, 2)))


def test_vi_correction_degenerate():
    with pytest.raises(DataError):
        bl.fit_vi_correction(_vi_data(n=5))
    same = np.tile(_vi_data(n=1), (20, 1))
    with pytest.raises(DegenerateInputError):
        bl.fit_vi_correction(same)
