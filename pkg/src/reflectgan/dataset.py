"""Sample ingestion, NDVI gating, geographic pairing, splits and a synthetic
mixed-pixel generator."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neighbors
from .errors import ConfigError, DataError, DegenerateInputError
from .spectral import DEFAULT_ROLES, BandRoleMap, ClampStats, clamp_unit, ndvi

log = logging.getLogger(__name__)

NDVI_THRESHOLD = 0.2


@dataclass
class SoilSample:
    id: str
    lon: float
    lat: float
    soc: float
    bands: np.ndarray
    ndvi: float

    @classmethod
    def from_bands(cls, id, lon, lat, soc, bands, roles: BandRoleMap = DEFAULT_ROLES):
        bands = np.asarray(bands, dtype=np.float64)
        return cls(str(id), float(lon), float(lat), float(soc), bands, ndvi(bands, roles))


@dataclass
class PairedRecord:
    veg: np.ndarray
    bare_target: np.ndarray
    soc: float
    veg_id: str
    bare_ids: list[str]
    pair_distance: float


@dataclass
class DatasetSplit:
    train_indices: np.ndarray
    test_indices: np.ndarray
    folds: list[np.ndarray]
    seed: int


@dataclass
class LoadReport:
    """What :func:`load_samples` skipped or altered."""

    rows: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)
    clamped: int = 0


def band_columns(n_bands: int, prefix: str = "b") -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(n_bands)]


def samples_header(n_bands: int) -> list[str]:
    return ["sample_id", "lon", "lat", "soc_g_kg"] + band_columns(n_bands)


def load_samples(path, n_bands: int = 7, roles: BandRoleMap = DEFAULT_ROLES,
                 report: LoadReport | None = None) -> list[SoilSample]:
    """Read a samples CSV (``sample_id,lon,lat,soc_g_kg,b1..bN``).

    Rows with non-finite numbers, non-positive SOC or a degenerate NDVI are
    skipped and listed in ``report.rejected``; band values outside [0, 1]
    are clamped and counted. A row with the wrong number of fields or
    unparseable numbers raises :class:`DataError` naming the line.
    """
    report = report if report is not None else LoadReport()
    roles.validate(n_bands)
    expected = samples_header(n_bands)
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise DataError(f"{path}: header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                lon, lat, soc, *bands = (float(v) for v in row[1:])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in (lon, lat, soc, *bands)):
                report.rejected.append((lineno, "non-finite value"))
                continue
            if soc <= 0:
                report.rejected.append((lineno, "non-positive SOC"))
                continue
            stats = ClampStats()
            arr = clamp_unit(bands, stats)
            if stats.count:
                log.warning("%s:%d: %d band value(s) clamped to [0, 1]", path, lineno, stats.count)
                report.clamped += stats.count
            try:
                samples.append(SoilSample.from_bands(row[0], lon, lat, soc, arr, roles))
            except DegenerateInputError:
                report.rejected.append((lineno, "degenerate NDVI"))
    report.rows = len(samples)
    log.info("loaded %d samples from %s (%d rejected)", len(samples), path, len(report.rejected))
    return samples


def write_samples(path, samples: list[SoilSample], n_bands: int | None = None,
                  extra: dict[str, list] | None = None) -> None:
    """Write the samples schema; ``extra`` appends named columns."""
    if n_bands is None:
        if not samples:
            raise ConfigError("n_bands is required to write an empty samples file")
        n_bands = len(samples[0].bands)
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(samples_header(n_bands) + list(extra))
        for i, s in enumerate(samples):
            row = [s.id, repr(s.lon), repr(s.lat), repr(s.soc)] + [repr(float(v)) for v in s.bands]
            w.writerow(row + [extra[k][i] for k in extra])


def classify_by_ndvi(samples: list[SoilSample], threshold: float = NDVI_THRESHOLD):
    """Split into ``(bare, vegetated)``; NDVI exactly at the threshold counts as bare."""
    bare = [s for s in samples if s.ndvi <= threshold]
    veg = [s for s in samples if s.ndvi > threshold]
    n_ties = sum(1 for s in samples if s.ndvi == threshold)
    if n_ties:
        log.info("%d sample(s) at NDVI == %g assigned to bare", n_ties, threshold)
    return bare, veg


@dataclass
class PairingReport:
    paired: int = 0
    dropped: int = 0


def pair_samples(vegetated: list[SoilSample], bare: list[SoilSample], k: int = 3,
                 max_radius: float = math.inf, report: PairingReport | None = None) -> list[PairedRecord]:
    """Pair each vegetated sample with the mean spectrum of its nearest bare samples.

    Distance is planar Euclidean in (lon, lat) degrees. Up to ``k``
    neighbours within ``max_radius`` are averaged; equal distances are
    broken by position in ``bare``; near-equal float distances are
    resolved exactly. A vegetated sample whose nearest bare
    neighbour lies beyond ``max_radius`` is dropped and counted.
    """
    if not bare:
        raise DataError("no bare references")
    if k < 1:
        raise ConfigError("k must be at least 1")
    report = report if report is not None else PairingReport()
    bxy = np.array([[s.lon, s.lat] for s in bare], dtype=np.float64)
    bbands = np.array([s.bands for s in bare], dtype=np.float64)
    vxy = np.array([[v.lon, v.lat] for v in vegetated], dtype=np.float64).reshape(-1, 2)
    idx, d2 = neighbors.nearest(bxy, vxy, k)
    out = []
    for r, v in enumerate(vegetated):
        chosen = neighbors.within_radius(bxy, vxy[r], idx[r], d2[r], max_radius)
        if chosen.size == 0:
            report.dropped += 1
            continue
        out.append(PairedRecord(
            veg=v.bands.copy(),
            bare_target=bbands[chosen].mean(axis=0),
            soc=v.soc,
            veg_id=v.id,
            bare_ids=[bare[i].id for i in chosen],
            pair_distance=float(np.sqrt(d2[r, 0])),
        ))
    report.paired = len(out)
    return out


def write_pairs(path, pairs: list[PairedRecord], n_bands: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["veg_id", "bare_ids", "pair_distance", "soc_g_kg"]
                   + band_columns(n_bands, "veg_b") + band_columns(n_bands, "bare_b"))
        for p in pairs:
            w.writerow([p.veg_id, ";".join(p.bare_ids), repr(p.pair_distance), repr(p.soc)]
                       + [repr(float(v)) for v in p.veg] + [repr(float(v)) for v in p.bare_target])


def read_pairs(path, n_bands: int) -> list[PairedRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        width = 4 + 2 * n_bands
        if header is None or len(header) != width:
            raise DataError(f"{path}: paired CSV header must have {width} columns for {n_bands} bands")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            out.append(PairedRecord(
                veg=np.array(vals[2:2 + n_bands]),
                bare_target=np.array(vals[2 + n_bands:]),
                soc=vals[1], veg_id=row[0], bare_ids=row[1].split(";"), pair_distance=vals[0],
            ))
    return out


def split(n: int, test_fraction: float = 0.2, k_folds: int = 5, seed: int = 42) -> DatasetSplit:
    """Seeded holdout split plus a k-fold partition of the training part."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(math.floor(n * test_fraction + 0.5))
    if n < k_folds or n_test < 1 or n - n_test < max(k_folds, 1):
        raise ConfigError(f"{n} samples are too few for a {test_fraction} holdout and {k_folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    test = np.sort(perm[:n_test])
    rest = perm[n_test:]
    folds = [np.sort(f) for f in np.array_split(rest, k_folds)] if k_folds > 0 else []
    return DatasetSplit(np.sort(rest), test, folds, seed)


# -- synthetic data ----------------------------------------------------------

# low-SOC bare soil, B1..B7
SOIL_BASE = np.array([0.11, 0.13, 0.17, 0.22, 0.27, 0.34, 0.30])
# fractional darkening at the top of the SOC range, strongest in the SWIR
SOIL_SOC_DEPTH = np.array([0.30, 0.32, 0.36, 0.40, 0.40, 0.48, 0.52])
CANOPY = np.array([0.03, 0.05, 0.09, 0.04, 0.45, 0.15, 0.06])


@dataclass
class SynthConfig:
    n_samples: int = 2000
    soc_range: tuple[float, float] = (2.5, 30.0)
    canopy_fraction_range: tuple[float, float] = (0.75, 0.98)
    nonlinear_strength: float = 0.5
    noise_sigma: float = 0.0002
    seed: int = 42
    bare_fraction: float = 0.3
    bare_canopy_max: float = 0.03
    soil_variability: float = 0.04
    extent: float = 10.0
    canopy_variability: float = 0.95
    illumination_variability: float = 0.5

    def validate(self) -> None:
        lo, hi = self.soc_range
        flo, fhi = self.canopy_fraction_range
        if self.n_samples < 0:
            raise ConfigError("n_samples must be non-negative")
        if not 0 < lo < hi:
            raise ConfigError(f"soc_range must satisfy 0 < lo < hi, got {self.soc_range}")
        if not 0 <= flo <= fhi <= 1:
            raise ConfigError(f"canopy_fraction_range must lie in [0, 1], got {self.canopy_fraction_range}")
        if self.noise_sigma < 0 or self.nonlinear_strength < 0 or self.soil_variability < 0:
            raise ConfigError("noise_sigma, nonlinear_strength and soil_variability must be >= 0")
        if not 0 <= self.canopy_variability < 1 or not 0 <= self.illumination_variability < 1:
            raise ConfigError("canopy_variability and illumination_variability must lie in [0, 1)")
        if not 0 <= self.bare_fraction <= 1 or not 0 <= self.bare_canopy_max <= 1:
            raise ConfigError("bare_fraction and bare_canopy_max must lie in [0, 1]")


def bare_spectrum(soc, soc_range=(2.5, 30.0)) -> np.ndarray:
    """Noise-free bare-soil reflectance, decreasing in SOC in every band."""
    lo, hi = soc_range
    s = (np.asarray(soc, dtype=np.float64)[..., None] - lo) / (hi - lo)
    return SOIL_BASE * (1.0 - SOIL_SOC_DEPTH * s)


def mix_spectrum(bare, canopy, f, nonlinear_strength=0.0, noise_sigma=0.0, rng=None) -> np.ndarray:
    """``(1-f) bare + f canopy + k f (1-f) bare*canopy + noise``, clamped to [0, 1]."""
    bare = np.asarray(bare, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if f.ndim < bare.ndim:
        f = f[..., None]
    mixed = (1 - f) * bare + f * canopy + nonlinear_strength * f * (1 - f) * bare * canopy
    if noise_sigma > 0:
        mixed = mixed + rng.normal(0.0, noise_sigma, size=mixed.shape)
    return np.clip(mixed, 0.0, 1.0)


def _smooth_field(rng, xy, extent, n_waves=6):
    """Sum of random low-frequency plane waves evaluated at ``xy``."""
    k = rng.uniform(0.3, 1.2, size=n_waves) * 2 * np.pi / extent
    theta = rng.uniform(0, 2 * np.pi, size=n_waves)
    phase = rng.uniform(0, 2 * np.pi, size=n_waves)
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1) * k[:, None]
    return np.cos(xy @ dirs.T + phase).sum(axis=1)


def synth_generate(cfg: SynthConfig | None = None, roles: BandRoleMap = DEFAULT_ROLES):
    """Seeded mixed-pixel population with known bare-soil truth.

    Locations are uniform in a square of side ``extent`` degrees. SOC is a
    smooth spatial field rank-mapped onto a uniform distribution over
    ``soc_range``, so nearby samples have similar SOC and similar bare
    spectra. A second smooth field scales soil brightness by up to
    ``soil_variability``. A ``bare_fraction`` of samples get canopy cover
    below ``bare_canopy_max``; the rest draw it from
    ``canopy_fraction_range``. Each sample scales the canopy endmember by
    three independent factors in ``1 +- canopy_variability``, one each for
    the visible, NIR and SWIR bands, standing in for leaf area, structure
    and water content. Finally every observed spectrum is scaled by a
    directional factor in ``1 +- f * illumination_variability``: canopy
    shadowing makes vegetated pixels sensitive to sun and view geometry,
    while bare soil stays close to Lambertian. Truth spectra are unscaled.

    Returns ``(samples, truth)`` with ``truth`` mapping sample id to the
    noise-free bare spectrum at that location.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    n = cfg.n_samples
    if n == 0:
        return [], {}
    rng = np.random.default_rng(cfg.seed)
    xy = rng.uniform(0.0, cfg.extent, size=(n, 2))
    soc_field = _smooth_field(rng, xy, cfg.extent)
    lo, hi = cfg.soc_range
    ranks = np.argsort(np.argsort(soc_field, kind="stable"), kind="stable")
    soc = lo + (hi - lo) * (ranks + rng.uniform(size=n)) / n
    bright = _smooth_field(rng, xy, cfg.extent)
    bright = 1.0 + cfg.soil_variability * bright / max(np.abs(bright).max(), 1e-12)
    truth = bare_spectrum(soc, cfg.soc_range) * bright[:, None]
    is_bare = rng.uniform(size=n) < cfg.bare_fraction
    f = np.where(is_bare,
                 rng.uniform(0.0, cfg.bare_canopy_max, size=n),
                 rng.uniform(*cfg.canopy_fraction_range, size=n))
    group = np.zeros(len(CANOPY), dtype=np.int64)
    group[roles.nir] = 1
    group[[roles.swir1, roles.swir2]] = 2
    scale = 1.0 + cfg.canopy_variability * rng.uniform(-1.0, 1.0, size=(n, 3))
    canopy = CANOPY * scale[:, group]
    observed = mix_spectrum(truth, canopy, f, cfg.nonlinear_strength, cfg.noise_sigma, rng)
    illum = 1.0 + cfg.illumination_variability * f[:, None] * rng.uniform(-1.0, 1.0, size=(n, 1))
    observed = np.clip(observed * illum, 0.0, 1.0)
    samples = []
    truth_map = {}
    width = len(str(n - 1))
    for i in range(n):
        sid = f"S{i:0{width}d}"
        samples.append(SoilSample.from_bands(sid, xy[i, 0], xy[i, 1], soc[i], observed[i], roles))
        truth_map[sid] = truth[i]
    return samples, truth_map


def write_truth(path, truth: dict[str, np.ndarray], n_bands: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"] + band_columns(n_bands, "true_b"))
        for sid, bands in truth.items():
            w.writerow([sid] + [repr(float(v)) for v in bands])


def read_truth(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {row[0]: np.array([float(v) for v in row[1:]]) for row in reader if row}
