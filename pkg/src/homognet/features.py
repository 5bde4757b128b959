"""Handcrafted microstructure descriptors: the 51-entry feature vector.

Layout of the vector (fixed order, 51 entries):

    [0]      volume fraction
    [1:14]   reduced coefficients of the periodic two point correlation
             function (projections onto a snapshot PCA basis, k = 13)
    [14:30]  band features, 8 directions x {inclusion, matrix} phase
    [30:32]  global directional means (flux hindrance along x and y)
    [32:39]  local volume fraction distribution (std, skewness, 5 counts)
    [39:51]  directional edge distribution (mean, std, skewness for each
             of 4 edge detector kernels)

All convolutions are circular and evaluated in Fourier space, which is
consistent with the periodic semantics of the RVE grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DataError
from .grid import RveImage

N_FEATURES = 51
N_PCF_COEFFS = 13

# Directional edge detectors: horizontal / two diagonal / vertical gradients.
EDGE_KERNELS = (
    np.array([[-1.0, 0.0, 1.0]]),
    np.array([[0.0, -0.5, -1.0], [0.5, 0.0, -0.5], [1.0, 0.5, 0.0]]),
    np.array([[-1.0, -0.5, 0.0], [-0.5, 0.0, 0.5], [0.0, 0.5, 1.0]]),
    np.array([[-1.0], [0.0], [1.0]]),
)


def conv_periodic(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Circular convolution of an image with a centered kernel via FFT.

    Equivalent to the direct periodic convolution
        out[i,j] = sum_{u,v} kernel[u,v] * image[(i-u+cu) % n, (j-v+cv) % n]
    with the kernel center (cu, cv) = (kh//2, kw//2).
    """
    image = np.asarray(image, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape[0] > image.shape[0] or kernel.shape[1] > image.shape[1]:
        raise ConfigError("kernel larger than image")
    ny, nx = image.shape
    kh, kw = kernel.shape
    pad = np.zeros_like(image)
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.irfft2(np.fft.rfft2(image) * np.fft.rfft2(pad), s=(ny, nx))


def two_pcf(rve: RveImage) -> np.ndarray:
    """Periodic autocorrelation of the inclusion indicator, normalized by pixel count.

    The value at zero shift equals the volume fraction.
    """
    a = rve.pixels.astype(float)
    n = a.size
    f = np.fft.rfft2(a)
    return np.fft.irfft2(f * np.conj(f), s=a.shape) / n


@lru_cache(maxsize=32)
def _band_detectors(n: int, width_px: int, n_angles: int):
    """Anti-aliased band detector kernels, one per direction, entries summing to 1.

    Each detector is a rotated rectangle of the given width spanning the
    full image extent, rasterized by pixel-center coverage.
    """
    if width_px < 1:
        raise ConfigError("band width must be >= 1 pixel")
    if width_px > n:
        raise ConfigError("band wider than the image")
    c = np.arange(n, dtype=float) + 0.5 - n / 2.0
    ys, xs = np.meshgrid(c, c, indexing="ij")
    detectors = []
    for k in range(n_angles):
        theta = k * np.pi / n_angles
        ux, uy = np.cos(theta), np.sin(theta)
        length = n / max(abs(ux), abs(uy))
        if length > n * np.sqrt(2.0) + 1e-9:
            raise ConfigError("band longer than the image diagonal")
        d_par = xs * ux + ys * uy
        d_perp = -xs * uy + ys * ux
        along = np.clip(length / 2.0 - np.abs(d_par) + 0.5, 0.0, 1.0)
        across = np.clip(width_px / 2.0 - np.abs(d_perp) + 0.5, 0.0, 1.0)
        b = along * across
        detectors.append(b / b.sum())
    return tuple(detectors)


def band_features(rve: RveImage, width_px: int = 4, n_angles: int = 8) -> np.ndarray:
    """Maximum band detector overlap per direction and phase (linear connectivity).

    Returns 2 * n_angles values: first the inclusion phase responses for the
    directions k*pi/n_angles, then the matrix phase responses.
    """
    a = rve.pixels.astype(float)
    n = rve.resolution
    fa = np.fft.rfft2(a)
    # fft of (1 - a) differs from -fft(a) only in the mean mode
    finv = -fa.copy()
    finv[0, 0] += n * n
    p_incl = np.empty(n_angles)
    p_matr = np.empty(n_angles)
    for k, b in enumerate(_band_detectors(n, width_px, n_angles)):
        fb = np.fft.rfft2(b)
        p_incl[k] = np.fft.irfft2(fa * fb, s=(n, n)).max()
        p_matr[k] = np.fft.irfft2(finv * fb, s=(n, n)).max()
    return np.clip(np.concatenate([p_incl, p_matr]), 0.0, 1.0)


def global_directional_mean(rve: RveImage) -> np.ndarray:
    """Fraction of lines orthogonal to each axis hit by at least one inclusion pixel."""
    a = rve.pixels
    return np.array(
        [
            float((a.sum(axis=0) >= 1).mean()),
            float((a.sum(axis=1) >= 1).mean()),
        ]
    )


def _pool_mean(img: np.ndarray, window: int) -> np.ndarray:
    n0, n1 = img.shape
    if n0 % window or n1 % window:
        raise ConfigError(f"pooling window {window} does not divide image shape {img.shape}")
    return img.reshape(n0 // window, window, n1 // window, window).mean(axis=(1, 3))


def _skewness(values: np.ndarray) -> float:
    mu = values.mean()
    sig = values.std()
    if sig == 0.0:
        return 0.0
    return float(((values - mu) ** 3).mean() / sig**3)


def local_volume_distribution(rve: RveImage, window: int | None = None) -> np.ndarray:
    """Statistics of the coarse-grained local volume fraction.

    Average-pools the indicator to a coarse grid (window defaults to n/8)
    and returns [std, skewness, c1..c5] where the five counts bin the cell
    volume fractions into {empty, (0,1/3), [1/3,2/3), [2/3,1), full} with a
    small tolerance eps = 1/(2 n^2); the counts sum to one.
    """
    n = rve.resolution
    window = n // 8 if window is None else int(window)
    cells = _pool_mean(rve.pixels.astype(float), window).ravel()
    eps = 1.0 / (2.0 * n * n)
    edges = [eps, 1.0 / 3.0 - eps, 2.0 / 3.0 - eps, 1.0 - eps]
    counts = np.histogram(cells, bins=[-np.inf] + edges + [np.inf])[0] / cells.size
    return np.concatenate([[cells.std(), _skewness(cells)], counts])


def edge_distributions(rve: RveImage, window: int | None = None) -> np.ndarray:
    """Mean, std and skewness of the pooled absolute edge response per detector."""
    n = rve.resolution
    window = n // 8 if window is None else int(window)
    a = rve.pixels.astype(float)
    out = []
    for k in EDGE_KERNELS:
        pooled = _pool_mean(np.abs(conv_periodic(a, k)), window).ravel()
        out.extend([pooled.mean(), pooled.std(), _skewness(pooled)])
    return np.array(out)


@dataclass(frozen=True)
class PcaBasis:
    """Snapshot PCA basis of two point correlation maps."""

    mean_map: np.ndarray
    components: np.ndarray  # (k, n, n), orthonormal when flattened
    weights: np.ndarray  # explained variance per component
    fitted_on: int

    @property
    def k(self) -> int:
        return self.components.shape[0]


def fit_pca(pcf_maps, k: int = N_PCF_COEFFS) -> PcaBasis:
    """Fit a centered snapshot PCA to a stack of correlation maps."""
    maps = np.asarray(pcf_maps, dtype=float)
    if maps.ndim != 3:
        raise DataError("expected a stack of 2-D maps")
    n_maps = maps.shape[0]
    if k > n_maps:
        raise ConfigError(f"requested {k} components from {n_maps} maps")
    flat = maps.reshape(n_maps, -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    shape = maps.shape[1:]
    return PcaBasis(
        mean_map=mean.reshape(shape),
        components=vt[:k].reshape(k, *shape).copy(),
        weights=(s[:k] ** 2) / max(n_maps - 1, 1),
        fitted_on=n_maps,
    )


def project(pcf_map: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """Principal scores of one correlation map under a fitted basis."""
    if pcf_map.shape != basis.mean_map.shape:
        raise DataError(
            f"map shape {pcf_map.shape} does not match basis resolution {basis.mean_map.shape}"
        )
    centered = (pcf_map - basis.mean_map).ravel()
    return basis.components.reshape(basis.k, -1) @ centered


@dataclass(frozen=True)
class FeatureConfig:
    band_width_px: int = 4
    n_band_angles: int = 8
    pool_window: int | None = None  # defaults to n/8 at call time

    def resolved_window(self, resolution: int) -> int:
        return resolution // 8 if self.pool_window is None else self.pool_window


def feature_names(config: FeatureConfig = FeatureConfig(), k: int = N_PCF_COEFFS) -> list[str]:
    names = ["volume_fraction"]
    names += [f"pcf_score_{i + 1:02d}" for i in range(k)]
    step = 180 // config.n_band_angles
    names += [f"band_incl_{k * step:03d}" for k in range(config.n_band_angles)]
    names += [f"band_matrix_{k * step:03d}" for k in range(config.n_band_angles)]
    names += ["dir_mean_x", "dir_mean_y"]
    names += ["volfrac_std", "volfrac_skew"] + [f"volfrac_bin{i + 1}" for i in range(5)]
    for e in range(1, 5):
        names += [f"edge{e}_mean", f"edge{e}_std", f"edge{e}_skew"]
    return names


def assemble_feature_vector(
    rve: RveImage, basis: PcaBasis, config: FeatureConfig = FeatureConfig()
) -> np.ndarray:
    """Full descriptor vector for one RVE (unstandardized).

    With the default 13 correlation coefficients and 8 band angles this is
    the 51-entry vector; a basis with k components yields 38 + k entries.
    """
    window = config.resolved_window(rve.resolution)
    vec = np.concatenate(
        [
            [rve.pixels.mean()],
            project(two_pcf(rve), basis),
            band_features(rve, config.band_width_px, config.n_band_angles),
            global_directional_mean(rve),
            local_volume_distribution(rve, window),
            edge_distributions(rve, window),
        ]
    )
    expected = 1 + basis.k + 2 * config.n_band_angles + 2 + 7 + 12
    if vec.shape[0] != expected:
        raise DataError(f"feature vector has length {vec.shape[0]}, expected {expected}")
    return vec


@dataclass(frozen=True)
class StandardizationStats:
    """Per-feature shift and scale; scale is the (n-1)-normalized deviation."""

    mean: np.ndarray
    scale: np.ndarray


def standardize_fit(vectors: np.ndarray) -> StandardizationStats:
    """Fit shift/scale so the fitting set gets zero mean and unit sample std.

    Zero-variance columns get their scale clamped to 1 (with a warning), so
    they standardize to exactly zero.
    """
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2:
        raise DataError("expected a (samples, features) matrix")
    mean = x.mean(axis=0)
    sq = ((x - mean) ** 2).sum(axis=0)
    scale = np.sqrt(sq / max(x.shape[0] - 1, 1))
    # numerically constant columns count as degenerate as well
    degenerate = scale <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} zero-variance feature(s); scale clamped to 1",
            stacklevel=2,
        )
        scale = np.where(degenerate, 1.0, scale)
    return StandardizationStats(mean=mean, scale=scale)


def standardize_apply(vectors: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    return (np.asarray(vectors, dtype=float) - stats.mean) / stats.scale


def standardize_invert(vectors: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    return np.asarray(vectors, dtype=float) * stats.scale + stats.mean


@dataclass(frozen=True)
class FeaturePipeline:
    """Fitted basis + standardization bundle mapping an RVE to model input."""

    basis: PcaBasis
    stats: StandardizationStats
    config: FeatureConfig = field(default_factory=FeatureConfig)

    def raw_vector(self, rve: RveImage) -> np.ndarray:
        return assemble_feature_vector(rve, self.basis, self.config)

    def transform(self, rve: RveImage) -> np.ndarray:
        return standardize_apply(self.raw_vector(rve), self.stats)
