"""Band semantics, reflectance scaling and derived spectral features.

All index functions accept either a single band vector of shape
``(n_bands,)`` or a stack of vectors of shape ``(m, n_bands)`` and
return a scalar or an array of length ``m`` respectively.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError

DEGENERACY_TOL = 1e-12

VEGETATION_INDEX_NAMES = ("rvi", "ndvi", "gndvi", "evi", "savi", "msavi")
SOIL_INDEX_NAMES = ("bi", "si", "ci", "dsi", "dvi")
TCT_NAMES = ("tct_brightness", "tct_greenness", "tct_wetness")
INDEX_NAMES = VEGETATION_INDEX_NAMES + SOIL_INDEX_NAMES + TCT_NAMES


@dataclass(frozen=True)
class BandRoleMap:
    """0-based positions of the named bands inside a band vector.

    The default is Landsat-8 OLI B1..B7.
    """

    coastal: int = 0
    blue: int = 1
    green: int = 2
    red: int = 3
    nir: int = 4
    swir1: int = 5
    swir2: int = 6

    def validate(self, n_bands: int) -> None:
        idx = [getattr(self, f.name) for f in fields(self)]
        if len(set(idx)) != len(idx):
            raise ConfigError(f"band roles must be distinct, got {idx}")
        if min(idx) < 0 or max(idx) >= n_bands:
            raise ConfigError(f"band roles {idx} out of range for {n_bands} bands")

    @property
    def tct_bands(self) -> tuple[int, ...]:
        return (self.blue, self.green, self.red, self.nir, self.swir1, self.swir2)


DEFAULT_ROLES = BandRoleMap()


@dataclass(frozen=True)
class IndexSet:
    rvi: float
    ndvi: float
    gndvi: float
    evi: float
    savi: float
    msavi: float
    bi: float
    si: float
    ci: float
    dsi: float
    dvi: float
    tct_brightness: float
    tct_greenness: float
    tct_wetness: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in INDEX_NAMES], dtype=np.float64)


def as_bands(b, n_bands: int | None = None) -> np.ndarray:
    """Coerce ``b`` into a float64 array and check it is a valid band vector."""
    arr = np.asarray(b, dtype=np.float64)
    if arr.ndim not in (1, 2):
        raise ConfigError(f"band vector must be 1-D or 2-D, got shape {arr.shape}")
    if n_bands is not None and arr.shape[-1] != n_bands:
        raise ConfigError(f"expected {n_bands} bands, got {arr.shape[-1]}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError("band vector contains non-finite values")
    return arr


def _ratio(num, den, name):
    den = np.asarray(den, dtype=np.float64)
    if np.any(np.abs(den) < DEGENERACY_TOL):
        raise DegenerateInputError(f"{name}: denominator vanishes")
    return num / den


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def ndvi(b, roles: BandRoleMap = DEFAULT_ROLES):
    """Normalized difference vegetation index, (NIR - Red) / (NIR + Red)."""
    b = as_bands(b)
    nir, red = b[..., roles.nir], b[..., roles.red]
    return _scalar(_ratio(nir - red, nir + red, "ndvi"))


def savi(b, roles: BandRoleMap = DEFAULT_ROLES):
    b = as_bands(b)
    nir, red = b[..., roles.nir], b[..., roles.red]
    return _scalar(_ratio(1.5 * (nir - red), nir + red + 0.5, "savi"))


def compute_vegetation_indices(b, roles: BandRoleMap = DEFAULT_ROLES) -> dict:
    """RVI, NDVI, GNDVI, EVI, SAVI and MSAVI.

    EVI uses G=2.5, C1=6, C2=7.5, L=1 and SAVI uses L=0.5. Raises
    :class:`DegenerateInputError` naming the index whose denominator
    vanishes or whose MSAVI radicand is negative.
    """
    b = as_bands(b)
    blue, green = b[..., roles.blue], b[..., roles.green]
    red, nir = b[..., roles.red], b[..., roles.nir]
    radicand = (2 * nir + 1) ** 2 - 8 * (nir - red)
    if np.any(radicand < 0):
        raise DegenerateInputError("msavi: negative radicand")
    out = {
        "rvi": _ratio(nir, red, "rvi"),
        "ndvi": _ratio(nir - red, nir + red, "ndvi"),
        "gndvi": _ratio(nir - green, nir + green, "gndvi"),
        "evi": _ratio(2.5 * (nir - red), nir + 6 * red - 7.5 * blue + 1, "evi"),
        "savi": _ratio(1.5 * (nir - red), nir + red + 0.5, "savi"),
        "msavi": (2 * nir + 1 - np.sqrt(radicand)) / 2,
    }
    return {k: _scalar(v) for k, v in out.items()}


def compute_soil_indices(b, roles: BandRoleMap = DEFAULT_ROLES) -> dict:
    """BI, SI, CI, DSI and DVI (difference vegetation index, NIR - Red)."""
    b = as_bands(b)
    blue, green, red = b[..., roles.blue], b[..., roles.green], b[..., roles.red]
    nir, swir1 = b[..., roles.nir], b[..., roles.swir1]
    if np.any(blue * red < 0):
        raise DegenerateInputError("si: negative radicand")
    out = {
        "bi": np.sqrt((red**2 + green**2) / 2),
        "si": np.sqrt(blue * red),
        "ci": _ratio(red - green, red + green, "ci"),
        "dsi": _ratio(swir1, nir, "dsi"),
        "dvi": nir - red,
    }
    return {k: _scalar(v) for k, v in out.items()}


def load_tct_coefficients(path: str | Path | None = None) -> np.ndarray:
    """Read a 3x6 Tasseled Cap coefficient CSV.

    Rows are brightness, greenness, wetness; columns are B2..B7. Without a
    path the bundled Landsat-8 OLI coefficients (Baig et al., 2014) are used.
    """
    if path is None:
        text = resources.files("reflectgan.data").joinpath("tct_landsat8_oli.csv").read_text()
    else:
        text = Path(path).read_text()
    try:
        rows = [[float(v) for v in line.split(",")] for line in text.splitlines() if line.strip()]
        coeffs = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"unreadable tasseled cap coefficients: {exc}") from None
    _check_tct_shape(coeffs)
    return coeffs


def _check_tct_shape(coeffs: np.ndarray) -> None:
    if coeffs.shape != (3, 6):
        raise ConfigError(f"tasseled cap coefficients must be 3x6, got {coeffs.shape}")


DEFAULT_TCT = load_tct_coefficients()


def tasseled_cap(b, coeffs=None, roles: BandRoleMap = DEFAULT_ROLES) -> np.ndarray:
    """Brightness, greenness and wetness as dot products over (blue..swir2)."""
    coeffs = DEFAULT_TCT if coeffs is None else np.asarray(coeffs, dtype=np.float64)
    _check_tct_shape(coeffs)
    b = as_bands(b)
    return b[..., list(roles.tct_bands)] @ coeffs.T


def feature_names(n_bands: int) -> list[str]:
    return [f"b{i + 1}" for i in range(n_bands)] + list(INDEX_NAMES)


def compute_indices(b, roles: BandRoleMap = DEFAULT_ROLES, tct_coeffs=None) -> IndexSet:
    """All fourteen derived features of a single band vector."""
    b = as_bands(b)
    if b.ndim != 1:
        raise ConfigError("compute_indices takes a single band vector")
    tct = tasseled_cap(b, tct_coeffs, roles)
    return IndexSet(
        **compute_vegetation_indices(b, roles),
        **compute_soil_indices(b, roles),
        tct_brightness=float(tct[0]),
        tct_greenness=float(tct[1]),
        tct_wetness=float(tct[2]),
    )


def augment_features(b, roles: BandRoleMap = DEFAULT_ROLES, tct_coeffs=None) -> np.ndarray:
    """Concatenate raw bands, 6 vegetation indices, 5 soil indices and 3 TCT
    components, in the order given by :func:`feature_names`.
    """
    b = as_bands(b)
    vi = compute_vegetation_indices(b, roles)
    si = compute_soil_indices(b, roles)
    tct = tasseled_cap(b, tct_coeffs, roles)
    derived = [vi[n] for n in VEGETATION_INDEX_NAMES] + [si[n] for n in SOIL_INDEX_NAMES]
    derived = np.stack([np.asarray(d, dtype=np.float64) for d in derived], axis=-1)
    return np.concatenate([b, derived, tct], axis=-1)


@dataclass
class ClampStats:
    """Running count of reflectance values pulled back into [0, 1]."""

    count: int = 0


def clamp_unit(b, stats: ClampStats | None = None) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    out = np.clip(arr, 0.0, 1.0)
    if stats is not None:
        stats.count += int(np.count_nonzero(out != arr))
    return out


def normalize_reflectance(b, stats: ClampStats | None = None) -> np.ndarray:
    """Map reflectance in [0, 1] to [-1, 1]; out-of-range values are clamped."""
    return 2.0 * clamp_unit(b, stats) - 1.0


def denormalize_reflectance(v) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) + 1.0) / 2.0
