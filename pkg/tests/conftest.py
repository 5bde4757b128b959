import numpy as np
import pytest

from homognet.grid import RveImage, as_rve


@pytest.fixture
def rng():
    return np.random.default_rng(20240)


def random_rve(rng, n=32, fill=None) -> RveImage:
    fill = rng.uniform(0.2, 0.7) if fill is None else fill
    return as_rve((rng.random((n, n)) < fill).astype(np.uint8))


def blob_rve(rng, n=32) -> RveImage:
    """Smoothed random structure: more realistic connectivity than iid noise."""
    field = rng.normal(size=(n, n))
    f = np.fft.rfft2(field)
    ky = np.fft.fftfreq(n)[:, None]
    kx = np.fft.rfftfreq(n)[None, :]
    f *= np.exp(-((ky**2 + kx**2) * (n / 4.0) ** 2))
    smooth = np.fft.irfft2(f, s=(n, n))
    cut = np.quantile(smooth, 1.0 - rng.uniform(0.2, 0.7))
    return as_rve((smooth >= cut).astype(np.uint8))
