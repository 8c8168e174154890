"""Classical vegetation-correction baselines: linear two-endmember spectral
mixture analysis (SMA) and regression of band values on vegetation
indices."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError
from .spectral import DEFAULT_ROLES, BandRoleMap, as_bands, compute_vegetation_indices

log = logging.getLogger(__name__)

ENDMEMBER_TOL = 1e-6
MIN_VI_SAMPLES = 10


@dataclass(frozen=True)
class EndmemberSet:
    soil: np.ndarray
    vegetation: np.ndarray
    provenance: str = "fixed"

    def __post_init__(self):
        soil = np.asarray(self.soil, dtype=np.float64)
        veg = np.asarray(self.vegetation, dtype=np.float64)
        if soil.shape != veg.shape or soil.ndim != 1:
            raise ConfigError(f"endmember shapes differ: {soil.shape} vs {veg.shape}")
        if np.any((soil < 0) | (soil > 1)) or np.any((veg < 0) | (veg > 1)):
            raise ConfigError("endmember reflectance must lie in [0, 1]")
        if np.linalg.norm(soil - veg) <= ENDMEMBER_TOL:
            raise DegenerateInputError("soil and vegetation endmembers coincide")
        if self.provenance not in ("fixed", "estimated-from-data"):
            raise ConfigError(f"unknown endmember provenance {self.provenance!r}")
        object.__setattr__(self, "soil", soil)
        object.__setattr__(self, "vegetation", veg)


@dataclass
class AbundanceEstimate:
    f_soil: np.ndarray | float
    f_veg: np.ndarray | float
    residual_norm: np.ndarray | float


@dataclass
class SMAResult:
    bare: np.ndarray
    abundance: AbundanceEstimate
    low_confidence: np.ndarray


def estimate_endmembers(bare, vegetated, ndvi_hi: float = 0.7,
                        roles: BandRoleMap = DEFAULT_ROLES) -> EndmemberSet:
    """Soil endmember = mean bare spectrum; vegetation endmember = mean of
    vegetated spectra with NDVI >= ``ndvi_hi``, or the single highest-NDVI
    spectrum when none qualifies."""
    bare = np.atleast_2d(as_bands(bare))
    if bare.shape[0] == 0 or bare.size == 0:
        raise DataError("cannot estimate a soil endmember from zero bare samples")
    veg = np.atleast_2d(as_bands(vegetated))
    if veg.size == 0:
        raise DataError("cannot estimate a vegetation endmember from zero samples")
    ndvi = np.atleast_1d(compute_vegetation_indices(veg, roles)["ndvi"])
    dense = ndvi >= ndvi_hi
    if dense.any():
        veg_em = veg[dense].mean(axis=0)
    else:
        best = int(np.argmax(ndvi))
        log.warning("no sample reaches ndvi %.2f; using the highest-NDVI sample (%.3f)", ndvi_hi, ndvi[best])
        veg_em = veg[best]
    return EndmemberSet(bare.mean(axis=0), veg_em, "estimated-from-data")


def sma_unmix(mixed, em: EndmemberSet) -> AbundanceEstimate:
    """Closed-form two-endmember abundances.

    With ``f_soil + f_veg = 1`` the model is ``mixed = veg + f_soil (soil - veg)``,
    so the unconstrained optimum is a projection onto ``soil - veg``; it is
    then clipped to [0, 1].
    """
    x = as_bands(mixed, em.soil.shape[0])
    d = em.soil - em.vegetation
    f = ((x - em.vegetation) @ d) / (d @ d)
    f = np.clip(f, 0.0, 1.0)
    f_arr = np.asarray(f)
    resid = np.linalg.norm(x - (em.vegetation + f_arr[..., None] * d), axis=-1)
    if np.ndim(f) == 0:
        return AbundanceEstimate(float(f), 1.0 - float(f), float(resid))
    return AbundanceEstimate(f, 1.0 - f, resid)


def sma_correct(mixed, em: EndmemberSet, f_floor: float = 0.05) -> SMAResult:
    """Back out the soil spectrum: ``(mixed - f_veg veg) / max(f_soil, f_floor)``,
    clamped to [0, 1]. Rows with ``f_soil < f_floor`` are flagged."""
    if not 0 < f_floor <= 1:
        raise ConfigError(f"f_floor must lie in (0, 1], got {f_floor}")
    x = as_bands(mixed, em.soil.shape[0])
    ab = sma_unmix(x, em)
    f_soil = np.asarray(ab.f_soil, dtype=np.float64)
    f_veg = np.asarray(ab.f_veg, dtype=np.float64)
    denom = np.maximum(f_soil, f_floor)
    bare = np.clip((x - f_veg[..., None] * em.vegetation) / denom[..., None], 0.0, 1.0)
    low = f_soil < f_floor
    if np.any(low):
        log.info("%d spectra below f_floor=%.3f flagged low-confidence", int(np.count_nonzero(low)), f_floor)
    return SMAResult(bare, ab, low)


def write_endmembers(path, em: EndmemberSet) -> None:
    n = em.soil.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["role"] + [f"b{i + 1}" for i in range(n)])
        w.writerow(["soil"] + [format(v, ".17g") for v in em.soil])
        w.writerow(["vegetation"] + [format(v, ".17g") for v in em.vegetation])


def read_endmembers(path, n_bands: int | None = None) -> EndmemberSet:
    rows = {}
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "role":
            raise DataError(f"{path}: endmember file needs a 'role,b1..bN' header")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows[row[0]] = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise DataError(f"{path}:{line_no}: non-numeric reflectance") from None
    if set(rows) != {"soil", "vegetation"}:
        raise DataError(f"{path}: expected roles soil and vegetation, got {sorted(rows)}")
    if n_bands is not None and rows["soil"].shape[0] != n_bands:
        raise DataError(f"{path}: expected {n_bands} bands, got {rows['soil'].shape[0]}")
    return EndmemberSet(rows["soil"], rows["vegetation"], "fixed")


def vi_predictors(bands, roles: BandRoleMap = DEFAULT_ROLES) -> np.ndarray:
    """``(m, 2)`` matrix of NDVI and SAVI."""
    vi = compute_vegetation_indices(np.atleast_2d(as_bands(bands)), roles)
    return np.column_stack([vi["ndvi"], vi["savi"]])


@dataclass
class VICorrection:
    """Per-band OLS ``band = a + b ndvi + c savi``; applying it removes the
    fitted vegetation term and re-centres on the fitting-set index means."""

    coef: np.ndarray          # (2, n_bands): ndvi row, savi row
    intercept: np.ndarray
    predictor_mean: np.ndarray

    def apply(self, bands, predictors=None, roles: BandRoleMap = DEFAULT_ROLES) -> np.ndarray:
        x = np.atleast_2d(as_bands(bands, self.coef.shape[1]))
        p = vi_predictors(x, roles) if predictors is None else np.atleast_2d(np.asarray(predictors, dtype=np.float64))
        if p.shape != (x.shape[0], 2):
            raise ConfigError(f"predictors must have shape ({x.shape[0]}, 2), got {p.shape}")
        return x - (p - self.predictor_mean) @ self.coef


def fit_vi_correction(bands, predictors=None, roles: BandRoleMap = DEFAULT_ROLES) -> VICorrection:
    x = np.atleast_2d(as_bands(bands))
    if x.shape[0] < MIN_VI_SAMPLES:
        raise DataError(f"VI correction needs at least {MIN_VI_SAMPLES} samples, got {x.shape[0]}")
    p = vi_predictors(x, roles) if predictors is None else np.atleast_2d(np.asarray(predictors, dtype=np.float64))
    pm = p.mean(axis=0)
    pc = p - pm
    # centered design; the intercept is then just the band mean
    if np.linalg.matrix_rank(pc, tol=1e-10 * max(1.0, float(np.abs(p).max()))) < 2:
        raise DegenerateInputError("VI correction design is rank-deficient (NDVI/SAVI constant or collinear)")
    coef, *_ = np.linalg.lstsq(pc, x - x.mean(axis=0), rcond=None)
    intercept = x.mean(axis=0) - pm @ coef
    return VICorrection(coef, intercept, pm)


def vi_correction(bands, predictors=None, roles: BandRoleMap = DEFAULT_ROLES) -> np.ndarray:
    """Fit on ``bands`` and correct the same set."""
    model = fit_vi_correction(bands, predictors, roles)
    return model.apply(bands, predictors, roles)
