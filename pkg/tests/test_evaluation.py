import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reflectgan import dataset as ds, evaluation as ev, gan, regressors
from reflectgan.errors import ConfigError, DataError, DegenerateInputError, LeakageError

import oracles


def random_instance(rng):
    n = int(rng.integers(3, 300))
    y = rng.normal(rng.uniform(-10, 10), rng.uniform(0.1, 10), n)
    p = y + rng.normal(0, rng.uniform(0.01, 10), n)
    return y, p


# -- metrics -------------------------------------------------------------------------------

def test_metrics_match_oracles():
    rng = np.random.default_rng(0)
    for _ in range(200):
        y, p = random_instance(rng)
        yl, pl = y.tolist(), p.tolist()
        assert abs(ev.r2(y, p) - oracles.r2(yl, pl)) <= 1e-12
        assert abs(ev.rmse(y, p) - oracles.rmse(yl, pl)) <= 1e-12
        assert abs(ev.rpd(y, p) - oracles.rpd(yl, pl)) <= 1e-12
        assert abs(ev.pearson(y, p) - oracles.pearson(yl, pl)) <= 1e-12


def test_rpd_is_std_over_rmse():
    rng = np.random.default_rng(1)
    for _ in range(200):
        y, p = random_instance(rng)
        assert ev.rpd(y, p) == float(np.std(y)) / ev.rmse(y, p)
        s = float(np.std(y))
        assert abs(ev.rpd(y, p) * ev.rmse(y, p) - s) <= math.ulp(s)


def test_metric_hand_values():
    y, p = [1.0, 2.0, 3.0], [1.0, 2.0, 4.0]
    assert ev.rmse(y, p) == pytest.approx(math.sqrt(1 / 3), abs=1e-15)
    assert ev.r2(y, p) == pytest.approx(0.5, abs=1e-15)
    assert ev.pearson(y, [2.0, 4.0, 6.0]) == pytest.approx(1.0, abs=1e-15)
    assert ev.pearson(y, [3.0, 2.0, 1.0]) == pytest.approx(-1.0, abs=1e-15)
    assert ev.r2(y, [2.0, 2.0, 2.0]) == 0.0


def test_perfect_fit_rpd_infinite(caplog):
    assert ev.rpd([1.0, 2.0], [1.0, 2.0]) == math.inf
    assert "infinite" in caplog.text


def test_metric_errors():
    with pytest.raises(DegenerateInputError):
        ev.r2([2.0, 2.0], [1.0, 3.0])
    with pytest.raises(DegenerateInputError):
        ev.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        ev.rmse([1.0], [1.0, 2.0])
    with pytest.raises(DataError):
        ev.pearson([1.0, 2.0], [1.0, 2.0])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=40),
       st.floats(0.1, 100), st.floats(-100, 100))
def test_metrics_affine_invariance(pairs, scale, shift):
    y = np.array([a for a, _ in pairs])
    p = np.array([b for _, b in pairs])
    if np.ptp(y) < 1e-3 or np.ptp(p) < 1e-3 or ev.rmse(y, p) < 1e-6:
        return
    ys, ps = y * scale + shift, p * scale + shift
    assert ev.r2(ys, ps) == pytest.approx(ev.r2(y, p), rel=1e-7, abs=1e-7)
    assert ev.rpd(ys, ps) == pytest.approx(ev.rpd(y, p), rel=1e-7)
    assert ev.rmse(ys, ps) == pytest.approx(scale * ev.rmse(y, p), rel=1e-7)
    assert ev.pearson(ys, p) == pytest.approx(ev.pearson(y, p), abs=1e-7)
    assert ev.pearson(-y, p) == pytest.approx(-ev.pearson(y, p), abs=1e-12)


# -- scenario matrix ------------------------------------------------------------------------

def test_default_scenarios_full_matrix():
    specs = ev.default_scenarios()
    assert len(specs) == 70 == len(set(specs))
    assert specs[0] == ev.ScenarioSpec("bare_only", False, "lr")
    assert specs[5] == ev.ScenarioSpec("bare_only", True, "lr")
    assert specs[-1] == ev.ScenarioSpec("sma_corrected", True, "mlp")
    assert specs[16].label == "vegetated_only+features/knn"


def test_spec_validation():
    with pytest.raises(ConfigError):
        ev.ScenarioSpec("raw", False, "lr").validate()
    with pytest.raises(ConfigError):
        ev.ScenarioSpec("bare_only", False, "svm").validate()


@pytest.fixture(scope="module")
def small_world():
    samples, truth = ds.synth_generate(ds.SynthConfig(n_samples=300, seed=5))
    sp = ds.split(len(samples), seed=5)
    bare, veg = ds.classify_by_ndvi(samples)
    train_ids = {samples[i].id for i in sp.train_indices}
    pairs = ds.pair_samples([s for s in veg if s.id in train_ids], [s for s in bare if s.id in train_ids])
    g, _, _ = gan.train(pairs, gan.GanTrainConfig(epochs=2, seed=5), hidden=8,
                        blocks=((8, 16), (16, 8), (8, 8), (8, 4)))
    ids = sorted({p.veg_id for p in pairs} | {b for p in pairs for b in p.bare_ids})
    return samples, truth, sp, g, ids


def test_prepare_inputs_tables(small_world):
    samples, _, sp, g, ids = small_world
    data = ev.prepare_inputs(samples, sp, g, ids)
    ndvi = np.array([s.ndvi for s in samples])
    veg = np.flatnonzero(ndvi > ds.NDVI_THRESHOLD)
    bare = np.flatnonzero(ndvi <= ds.NDVI_THRESHOLD)
    assert set(data.tables) == set(ev.INPUT_KINDS)
    np.testing.assert_array_equal(data.tables["vegetated_only"].index, veg)
    np.testing.assert_array_equal(data.tables["bare_only"].index, bare)
    assert data.tables["bare_plus_raw_veg"].bands.shape[0] == len(samples)
    mixed = data.tables["bare_plus_reconstructed"].bands
    np.testing.assert_array_equal(mixed[bare], data.tables["bare_only"].bands)
    np.testing.assert_array_equal(mixed[veg], data.tables["reconstructed_only"].bands)
    for k in ("reconstructed_only", "vi_corrected", "sma_corrected"):
        np.testing.assert_array_equal(data.tables[k].soc, data.tables["vegetated_only"].soc)
    rec = data.tables["reconstructed_only"].bands
    assert np.all((rec >= 0) & (rec <= 1))
    assert data.endmembers is not None
    assert {a.name for a in data.artifacts} == {"generator", "vi_correction", "endmembers"}


def test_fitted_artifacts_use_train_rows_only(small_world):
    samples, _, sp, g, ids = small_world
    data = ev.prepare_inputs(samples, sp, g, ids)
    test = set(sp.test_indices.tolist())
    for art in data.artifacts:
        assert not (art.train_indices & test)


def test_leakage_guard(small_world):
    samples, _, sp, g, ids = small_world
    leaked = ids + [samples[sp.test_indices[0]].id]
    with pytest.raises(LeakageError):
        ev.prepare_inputs(samples, sp, g, leaked, kinds=("reconstructed_only",))
    with pytest.raises(LeakageError):
        ev.prepare_inputs(samples, sp, g, ids + ["nope"], kinds=("reconstructed_only",))
    data = ev.prepare_inputs(samples, sp, kinds=("vegetated_only",))
    data.artifacts.append(ev.FitArtifact("rogue", frozenset({int(sp.test_indices[0])})))
    with pytest.raises(LeakageError):
        ev.run_scenario(ev.ScenarioSpec("vegetated_only", False, "lr"), data)


def test_reconstructed_kinds_need_generator(small_world):
    samples, _, sp, _, _ = small_world
    with pytest.raises(ConfigError):
        ev.prepare_inputs(samples, sp, kinds=("reconstructed_only",))
    with pytest.raises(ConfigError):
        ev.prepare_inputs(samples, sp, kinds=("unknown",))


def test_run_scenario_scores_test_rows(small_world):
    samples, _, sp, _, _ = small_world
    data = ev.prepare_inputs(samples, sp, kinds=("vegetated_only",))
    spec = ev.ScenarioSpec("vegetated_only", True, "lr")
    row, model, pred = ev.run_scenario(spec, data)
    t = data.tables["vegetated_only"]
    test_rows = np.isin(t.index, sp.test_indices)
    assert row.n_test == test_rows.sum() == pred.size
    assert row.r2 == ev.r2(t.soc[test_rows], pred)
    assert model.coef_.shape == (21,)
    again, _, _ = ev.run_scenario(spec, data)
    assert again == row


def test_run_scenario_seed_mapping(small_world):
    samples, _, sp, _, _ = small_world
    data = ev.prepare_inputs(samples, sp, kinds=("vegetated_only",))
    spec = ev.ScenarioSpec("vegetated_only", False, "rforest")
    params = {"rforest": {"n_trees": 3}}
    _, m, _ = ev.run_scenario(spec, data, seed={"rforest": 11}, model_params=params)
    assert (m.seed, m.n_trees) == (11, 3)


def test_report_csv_and_pearson(tmp_path, small_world):
    samples, _, sp, _, _ = small_world
    data = ev.prepare_inputs(samples, sp, kinds=("bare_only", "vegetated_only"))
    specs = ev.default_scenarios(kinds=("bare_only", "vegetated_only"), models=("lr", "knn"))
    seen = []
    report = ev.run_scenarios(specs, data, progress=seen.append)
    assert len(report.rows) == len(seen) == 8
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(ev.REPORT_HEADER) and len(lines) == 9
    assert lines[1].startswith("bare_only,0,lr,")
    report.write_pearson(tmp_path / "p.csv", 7)
    plines = (tmp_path / "p.csv").read_text().splitlines()
    assert plines[0] == "input_kind,b1,b2,b3,b4,b5,b6,b7"
    t = data.tables["vegetated_only"]
    assert report.pearson["vegetated_only"][5] == pytest.approx(
        oracles.pearson(t.bands[:, 5].tolist(), t.soc.tolist()), abs=1e-12)
    assert report.find("bare_only", "knn").model == "knn"
    with pytest.raises(KeyError):
        report.find("bare_only", "mlp")


def test_features_floor_keeps_indices_finite():
    arr = np.zeros((3, 7))
    arr[:, 3] = 0.2
    out = ev._features(arr, True, ev.DEFAULT_ROLES, None)
    assert out.shape == (3, 21) and np.all(np.isfinite(out))
    assert ev._features(arr, False, ev.DEFAULT_ROLES, None) is arr


def test_model_kinds_constant():
    assert regressors.MODEL_KINDS == ("lr", "knn", "dtree", "rforest", "mlp")
