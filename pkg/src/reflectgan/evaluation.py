"""SOC metrics, per-band correlation tables and the scenario matrix
(input kind x regressor x feature flag)."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import baselines, gan, regressors
from .dataset import NDVI_THRESHOLD, DatasetSplit, SoilSample
from .errors import ConfigError, DataError, DegenerateInputError, LeakageError
from .spectral import DEFAULT_ROLES, BandRoleMap, augment_features, compute_vegetation_indices

log = logging.getLogger(__name__)

INPUT_KINDS = ("bare_only", "vegetated_only", "bare_plus_raw_veg", "reconstructed_only",
               "bare_plus_reconstructed", "vi_corrected", "sma_corrected")
RECONSTRUCTED_KINDS = ("reconstructed_only", "bare_plus_reconstructed")
REPORT_HEADER = ["scenario", "with_features", "model", "r2", "rmse", "rpd", "n_test"]
# corrected spectra can hit exact zeros, which makes ratio indices undefined
FEATURE_FLOOR = 1e-4


def _pair(y_true, y_est, min_len):
    y = np.asarray(y_true, dtype=np.float64).reshape(-1)
    p = np.asarray(y_est, dtype=np.float64).reshape(-1)
    if y.shape != p.shape:
        raise DataError(f"length mismatch: {y.shape[0]} vs {p.shape[0]}")
    if y.shape[0] < min_len:
        raise DataError(f"need at least {min_len} values, got {y.shape[0]}")
    return y, p


def rmse(y_true, y_est) -> float:
    y, p = _pair(y_true, y_est, 1)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def r2(y_true, y_est) -> float:
    """Coefficient of determination; negative when worse than the mean."""
    y, p = _pair(y_true, y_est, 2)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateInputError("r2 undefined for constant targets")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


def rpd(y_true, y_est) -> float:
    """Population standard deviation of the targets over RMSE.

    A perfect fit returns ``inf`` with a warning instead of raising.
    """
    y, p = _pair(y_true, y_est, 2)
    e = rmse(y, p)
    if e == 0.0:
        log.warning("rmse is zero; RPD reported as infinite")
        return math.inf
    return float(np.std(y)) / e


def pearson(x, y) -> float:
    a, b = _pair(x, y, 3)
    a = a - a.mean()
    b = b - b.mean()
    sa, sb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if sa == 0.0 or sb == 0.0:
        raise DegenerateInputError("pearson undefined for a constant input")
    return float(np.clip((a @ b) / (sa * sb), -1.0, 1.0))


@dataclass(frozen=True)
class ScenarioSpec:
    input_kind: str
    with_features: bool
    model_kind: str

    def validate(self) -> None:
        if self.input_kind not in INPUT_KINDS:
            raise ConfigError(f"unknown input kind {self.input_kind!r}")
        if self.model_kind not in regressors.MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")

    @property
    def label(self) -> str:
        return f"{self.input_kind}{'+features' if self.with_features else ''}/{self.model_kind}"


def default_scenarios(kinds=INPUT_KINDS, models=regressors.MODEL_KINDS, features=(False, True)):
    """Row order: input kind, then feature flag, then model."""
    return [ScenarioSpec(k, f, m) for k in kinds for f in features for m in models]


@dataclass
class EvalRow:
    scenario: str
    with_features: bool
    model: str
    r2: float
    rmse: float
    rpd: float
    n_test: int

    @property
    def rpd_infinite(self) -> bool:
        return math.isinf(self.rpd)

    def csv_row(self) -> list[str]:
        return [self.scenario, str(int(self.with_features)), self.model,
                f"{self.r2:.6f}", f"{self.rmse:.6f}", f"{self.rpd:.6f}", str(self.n_test)]


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    pearson: dict[str, np.ndarray] = field(default_factory=dict)

    def find(self, scenario: str, model: str, with_features: bool = False) -> EvalRow:
        for r in self.rows:
            if (r.scenario, r.model, r.with_features) == (scenario, model, with_features):
                return r
        raise KeyError(f"no row for {scenario}/{model}/features={with_features}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow(r.csv_row())

    def write_pearson(self, path, n_bands: int) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["input_kind"] + [f"b{i + 1}" for i in range(n_bands)])
            for kind, corr in self.pearson.items():
                w.writerow([kind] + [f"{c:.6f}" for c in corr])


@dataclass
class InputTable:
    """Band matrix for one input kind with the sample index of every row."""

    bands: np.ndarray
    soc: np.ndarray
    index: np.ndarray


@dataclass
class FitArtifact:
    name: str
    train_indices: frozenset


@dataclass
class ScenarioData:
    tables: dict[str, InputTable]
    split: DatasetSplit
    artifacts: list[FitArtifact] = field(default_factory=list)
    roles: BandRoleMap = DEFAULT_ROLES
    tct_coeffs: np.ndarray | None = None
    endmembers: baselines.EndmemberSet | None = None

    def check_leakage(self) -> None:
        test = set(self.split.test_indices.tolist())
        for art in self.artifacts:
            seen = test & art.train_indices
            if seen:
                raise LeakageError(f"{art.name} was fitted on {len(seen)} test sample(s), e.g. index {min(seen)}")


def prepare_inputs(samples: list[SoilSample], split: DatasetSplit, generator=None,
                   gan_train_ids=None, kinds=INPUT_KINDS, ndvi_threshold: float = NDVI_THRESHOLD,
                   roles: BandRoleMap = DEFAULT_ROLES, tct_coeffs=None, endmembers=None) -> ScenarioData:
    """Build the band matrix of every requested input kind.

    Bare/vegetated membership follows the NDVI threshold. Reconstructed
    kinds pass only vegetated rows through ``generator``; bare rows stay
    unchanged. SMA endmembers (unless given) and the VI regression are
    fitted on training rows only. ``gan_train_ids`` lists the sample ids
    whose pairs trained the generator and feeds the leakage guard.
    """
    for k in kinds:
        if k not in INPUT_KINDS:
            raise ConfigError(f"unknown input kind {k!r}")
    if not samples:
        raise DataError("no samples to evaluate")
    bands = np.array([s.bands for s in samples], dtype=np.float64)
    soc = np.array([s.soc for s in samples], dtype=np.float64)
    ndvi = np.asarray(compute_vegetation_indices(bands, roles)["ndvi"])
    is_veg = ndvi > ndvi_threshold
    if split.train_indices.size + split.test_indices.size != len(samples):
        raise ConfigError(f"split covers {split.train_indices.size + split.test_indices.size} samples, "
                          f"dataset has {len(samples)}")
    is_train = np.zeros(len(samples), dtype=bool)
    is_train[split.train_indices] = True
    bare_idx = np.flatnonzero(~is_veg)
    veg_idx = np.flatnonzero(is_veg)
    artifacts: list[FitArtifact] = []

    def table(idx, arr=None):
        return InputTable(bands[idx] if arr is None else arr, soc[idx], idx)

    tables: dict[str, InputTable] = {}
    recon = None
    em = None
    if any(k in RECONSTRUCTED_KINDS for k in kinds):
        if generator is None:
            raise ConfigError("reconstructed input kinds need a trained generator")
        if gan_train_ids is None:
            raise ConfigError("reconstructed input kinds need the generator's training ids")
        pos = {s.id: i for i, s in enumerate(samples)}
        unknown = [i for i in gan_train_ids if i not in pos]
        if unknown:
            raise LeakageError(f"generator trained on ids absent from this dataset, e.g. {unknown[0]}")
        artifacts.append(FitArtifact("generator", frozenset(pos[i] for i in gan_train_ids)))
        recon = gan.reconstruct(generator, bands[veg_idx]) if veg_idx.size else bands[veg_idx]
    for k in kinds:
        if k == "bare_only":
            tables[k] = table(bare_idx)
        elif k == "vegetated_only":
            tables[k] = table(veg_idx)
        elif k == "bare_plus_raw_veg":
            idx = np.arange(len(samples))
            tables[k] = table(idx)
        elif k == "reconstructed_only":
            tables[k] = table(veg_idx, recon)
        elif k == "bare_plus_reconstructed":
            arr = bands.copy()
            arr[veg_idx] = recon
            tables[k] = table(np.arange(len(samples)), arr)
        elif k == "vi_corrected":
            fit_idx = veg_idx[is_train[veg_idx]]
            model = baselines.fit_vi_correction(bands[fit_idx], roles=roles)
            artifacts.append(FitArtifact("vi_correction", frozenset(fit_idx.tolist())))
            tables[k] = table(veg_idx, model.apply(bands[veg_idx], roles=roles))
        elif k == "sma_corrected":
            if endmembers is None:
                tb = bare_idx[is_train[bare_idx]]
                tv = veg_idx[is_train[veg_idx]]
                em = baselines.estimate_endmembers(bands[tb], bands[tv], roles=roles)
                artifacts.append(FitArtifact("endmembers", frozenset(tb.tolist()) | frozenset(tv.tolist())))
            else:
                em = endmembers
            tables[k] = table(veg_idx, baselines.sma_correct(bands[veg_idx], em).bare)
    data = ScenarioData(tables, split, artifacts, roles, tct_coeffs, em)
    data.check_leakage()
    return data


def _features(arr, with_features, roles, tct_coeffs):
    if not with_features:
        return arr
    return augment_features(np.clip(arr, FEATURE_FLOOR, 1.0), roles, tct_coeffs)


def pearson_table(data: ScenarioData) -> dict[str, np.ndarray]:
    out = {}
    for kind, t in data.tables.items():
        if t.bands.shape[0] < 3:
            log.warning("%s: fewer than 3 rows, correlations skipped", kind)
            continue
        corr = []
        for j in range(t.bands.shape[1]):
            try:
                corr.append(pearson(t.bands[:, j], t.soc))
            except DegenerateInputError:
                corr.append(float("nan"))
        out[kind] = np.array(corr)
    return out


def run_scenario(spec: ScenarioSpec, data: ScenarioData, seed=42, model_params=None):
    """Fit one model on the training rows of its input kind and score it on
    the test rows. Returns ``(row, fitted_model, test_predictions)``.

    ``seed`` is an int or a mapping from model kind to seed.
    """
    spec.validate()
    if spec.input_kind not in data.tables:
        raise ConfigError(f"input kind {spec.input_kind!r} was not prepared")
    data.check_leakage()
    t = data.tables[spec.input_kind]
    X = _features(t.bands, spec.with_features, data.roles, data.tct_coeffs)
    is_train = np.isin(t.index, data.split.train_indices)
    is_test = np.isin(t.index, data.split.test_indices)
    if is_train.sum() < 2 or is_test.sum() < 2:
        raise DataError(f"{spec.label}: {is_train.sum()} train / {is_test.sum()} test rows")
    params = dict((model_params or {}).get(spec.model_kind, {}))
    model_seed = seed.get(spec.model_kind, 42) if isinstance(seed, dict) else seed
    model = regressors.fit_model(regressors.FitSpec(spec.model_kind, seed=model_seed, params=params),
                                 X[is_train], t.soc[is_train])
    y, p = t.soc[is_test], model.predict(X[is_test])
    row = EvalRow(spec.input_kind, spec.with_features, spec.model_kind, r2(y, p), rmse(y, p), rpd(y, p), int(y.size))
    return row, model, p


def run_scenarios(specs, data: ScenarioData, seed=42, model_params=None, progress=None) -> EvalReport:
    report = EvalReport(pearson=pearson_table(data))
    for spec in specs:
        row, _, _ = run_scenario(spec, data, seed, model_params)
        report.rows.append(row)
        if progress is not None:
            progress(row)
    return report
