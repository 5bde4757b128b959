import numpy as np
import pytest

from homognet.errors import ConfigError
from homognet.features import (
    EDGE_KERNELS,
    N_FEATURES,
    _band_detectors,
    assemble_feature_vector,
    band_features,
    conv_periodic,
    edge_distributions,
    feature_names,
    fit_pca,
    global_directional_mean,
    local_volume_distribution,
    project,
    standardize_apply,
    standardize_fit,
    standardize_invert,
    two_pcf,
)
from homognet.grid import as_rve, phase_invert, translate_periodic

from conftest import blob_rve, random_rve


# ---------------------------------------------------------------------------
# brute-force spatial oracles


def conv_oracle(image, kernel):
    n1, n2 = image.shape
    kh, kw = kernel.shape
    cu, cv = kh // 2, kw // 2
    out = np.zeros_like(image, dtype=float)
    for i in range(n1):
        for j in range(n2):
            acc = 0.0
            for u in range(kh):
                for v in range(kw):
                    acc += kernel[u, v] * image[(i - u + cu) % n1, (j - v + cv) % n2]
            out[i, j] = acc
    return out


def band_oracle(rve, width_px=4, n_angles=8):
    a = rve.pixels.astype(float)
    n = rve.resolution
    vals_incl, vals_matr = [], []
    for b in _band_detectors(n, width_px, n_angles):
        best_i, best_m = -np.inf, -np.inf
        for dy in range(n):
            for dx in range(n):
                shifted = np.roll(a, (-dy, -dx), axis=(0, 1))
                ov = float((b * shifted).sum())
                best_i = max(best_i, ov)
                best_m = max(best_m, float((b * (1 - shifted)).sum()))
        vals_incl.append(best_i)
        vals_matr.append(best_m)
    return np.array(vals_incl + vals_matr)


def two_pcf_oracle(rve):
    a = rve.pixels.astype(float)
    n = rve.resolution
    out = np.zeros((n, n))
    for dy in range(n):
        for dx in range(n):
            out[dy, dx] = (a * np.roll(a, (-dy, -dx), axis=(0, 1))).sum() / (n * n)
    return out


def pooled_cells_oracle(img, window):
    n = img.shape[0]
    cells = []
    for bi in range(n // window):
        for bj in range(n // window):
            cells.append(img[bi * window : (bi + 1) * window, bj * window : (bj + 1) * window].mean())
    return np.array(cells)


def moments_oracle(values):
    mu = values.mean()
    sig = values.std()
    skew = 0.0 if sig == 0 else ((values - mu) ** 3).mean() / sig**3
    return mu, sig, skew


# ---------------------------------------------------------------------------
# conv_periodic


def test_conv_delta_kernel_is_identity(rng):
    img = rng.random((12, 12))
    np.testing.assert_allclose(conv_periodic(img, np.array([[1.0]])), img, atol=1e-12)


def test_conv_constant_image(rng):
    kernel = rng.random((3, 3))
    out = conv_periodic(np.full((10, 10), 2.5), kernel)
    np.testing.assert_allclose(out, 2.5 * kernel.sum(), atol=1e-12)


def test_conv_matches_bruteforce_sobel(rng):
    img = rng.random((16, 16))
    sobel = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    np.testing.assert_allclose(conv_periodic(img, sobel), conv_oracle(img, sobel), atol=1e-10)


def test_conv_matches_bruteforce_random_kernels(rng):
    for _ in range(10):
        n = int(rng.integers(6, 20))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        img = rng.random((n, n))
        kernel = rng.normal(size=(kh, kw))
        np.testing.assert_allclose(conv_periodic(img, kernel), conv_oracle(img, kernel), atol=1e-10)


def test_conv_kernel_larger_than_image_rejected():
    with pytest.raises(ConfigError):
        conv_periodic(np.zeros((4, 4)), np.zeros((5, 5)))


# ---------------------------------------------------------------------------
# band features


def test_band_saturated_cases():
    n = 32
    ones = as_rve(np.ones((n, n), np.uint8))
    vals = band_features(ones)
    np.testing.assert_allclose(vals[:8], 1.0, atol=1e-9)
    np.testing.assert_allclose(vals[8:], 0.0, atol=1e-9)


def test_band_vertical_stripe_hits_one():
    n = 32
    img = np.zeros((n, n), np.uint8)
    img[:, 10:16] = 1  # full-height stripe, 6 px wide
    vals = band_features(as_rve(img), width_px=4, n_angles=8)
    vertical = 4  # angle index for pi/2
    assert vals[vertical] == pytest.approx(1.0, abs=1e-9)


def test_band_matches_bruteforce_scan(rng):
    rve = random_rve(rng, 16)
    vals = band_features(rve, width_px=4, n_angles=4)
    oracle = band_oracle(rve, width_px=4, n_angles=4)
    np.testing.assert_allclose(vals, np.clip(oracle, 0, 1), atol=1e-10)


def test_band_phase_complement_identity(rng):
    rve = random_rve(rng, 24)
    vals = band_features(rve)
    vals_inv = band_features(phase_invert(rve))
    np.testing.assert_allclose(vals[8:], vals_inv[:8], atol=1e-12)


def test_band_translation_invariance(rng):
    rve = blob_rve(rng, 32)
    vals = band_features(rve)
    for _ in range(5):
        moved = translate_periodic(rve, int(rng.integers(32)), int(rng.integers(32)))
        np.testing.assert_allclose(band_features(moved), vals, atol=1e-9)


def test_band_detectors_normalized():
    for b in _band_detectors(32, 4, 8):
        assert b.sum() == pytest.approx(1.0)
        assert b.min() >= 0.0


# ---------------------------------------------------------------------------
# global directional mean


def test_directional_mean_trivia():
    n = 8
    empty = as_rve(np.zeros((n, n), np.uint8))
    np.testing.assert_allclose(global_directional_mean(empty), [0.0, 0.0])
    line = np.zeros((n, n), np.uint8)
    line[3, :] = 1  # one full horizontal line
    w = global_directional_mean(as_rve(line))
    assert w[0] == pytest.approx(1.0)  # every column hits at least one pixel
    assert w[1] == pytest.approx(1.0 / n)
    single = np.zeros((n, n), np.uint8)
    single[2, 5] = 1
    np.testing.assert_allclose(global_directional_mean(as_rve(single)), [1.0 / n, 1.0 / n])


def test_directional_mean_translation_invariant(rng):
    rve = blob_rve(rng, 16)
    w = global_directional_mean(rve)
    moved = translate_periodic(rve, 5, 11)
    np.testing.assert_allclose(global_directional_mean(moved), w)


# ---------------------------------------------------------------------------
# local volume distribution


def test_local_volume_trivia():
    n = 32
    empty = as_rve(np.zeros((n, n), np.uint8))
    out = local_volume_distribution(empty)
    np.testing.assert_allclose(out, [0, 0, 1, 0, 0, 0, 0])
    full = as_rve(np.ones((n, n), np.uint8))
    np.testing.assert_allclose(local_volume_distribution(full), [0, 0, 0, 0, 0, 0, 1])


def test_local_volume_matches_cell_oracle(rng):
    rve = random_rve(rng, 64)
    out = local_volume_distribution(rve, window=8)
    cells = pooled_cells_oracle(rve.pixels.astype(float), 8)
    _, sig, skew = moments_oracle(cells)
    eps = 1.0 / (2 * 64 * 64)
    bins = [
        (cells < eps).mean(),
        ((cells >= eps) & (cells < 1 / 3 - eps)).mean(),
        ((cells >= 1 / 3 - eps) & (cells < 2 / 3 - eps)).mean(),
        ((cells >= 2 / 3 - eps) & (cells < 1 - eps)).mean(),
        (cells >= 1 - eps).mean(),
    ]
    np.testing.assert_allclose(out, [sig, skew] + bins, atol=1e-10)


def test_local_volume_counts_sum_to_one_and_pooling_preserves_mean(rng):
    rve = blob_rve(rng, 32)
    out = local_volume_distribution(rve)
    assert out[2:].sum() == pytest.approx(1.0)
    window = 4
    cells = pooled_cells_oracle(rve.pixels.astype(float), window)
    assert cells.mean() == pytest.approx(rve.pixels.mean(), abs=1e-12)


def test_local_volume_window_must_divide():
    with pytest.raises(ConfigError):
        local_volume_distribution(as_rve(np.zeros((32, 32), np.uint8)), window=5)


# ---------------------------------------------------------------------------
# edge distributions


def test_edge_detector_kernels_are_pinned():
    k1, k2, k3, k4 = EDGE_KERNELS
    np.testing.assert_array_equal(k1, [[-1.0, 0.0, 1.0]])
    np.testing.assert_array_equal(k2, [[0.0, -0.5, -1.0], [0.5, 0.0, -0.5], [1.0, 0.5, 0.0]])
    np.testing.assert_array_equal(k3, [[-1.0, -0.5, 0.0], [-0.5, 0.0, 0.5], [0.0, 0.5, 1.0]])
    np.testing.assert_array_equal(k4, [[-1.0], [0.0], [1.0]])
    for k in EDGE_KERNELS:
        assert k.sum() == 0.0  # pure gradient detectors


def test_edges_zero_for_constant_image():
    out = edge_distributions(as_rve(np.zeros((32, 32), np.uint8)))
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_edges_invariant_under_phase_inversion(rng):
    rve = random_rve(rng, 32)
    np.testing.assert_allclose(
        edge_distributions(rve), edge_distributions(phase_invert(rve)), atol=1e-10
    )


def test_edges_match_bruteforce(rng):
    rve = random_rve(rng, 32)
    out = edge_distributions(rve, window=4)
    expect = []
    for k in EDGE_KERNELS:
        emap = np.abs(conv_oracle(rve.pixels.astype(float), k))
        cells = pooled_cells_oracle(emap, 4)
        expect.extend(moments_oracle(cells))
    np.testing.assert_allclose(out, expect, atol=1e-10)


# ---------------------------------------------------------------------------
# 2PCF and PCA


def test_two_pcf_trivia():
    n = 8
    np.testing.assert_allclose(two_pcf(as_rve(np.ones((n, n), np.uint8))), 1.0)
    np.testing.assert_allclose(two_pcf(as_rve(np.zeros((n, n), np.uint8))), 0.0)


def test_two_pcf_matches_double_sum(rng):
    rve = random_rve(rng, 16)
    np.testing.assert_allclose(two_pcf(rve), two_pcf_oracle(rve), atol=1e-10)


def test_two_pcf_zero_shift_is_volume_fraction(rng):
    rve = random_rve(rng, 32)
    assert two_pcf(rve)[0, 0] == pytest.approx(rve.pixels.mean(), abs=1e-12)


def test_pca_identical_maps_project_to_zero(rng):
    maps = np.repeat(rng.random((1, 8, 8)), 6, axis=0)
    basis = fit_pca(maps, k=2)
    for m in maps:
        np.testing.assert_allclose(project(m, basis), 0.0, atol=1e-10)


def test_pca_two_maps_closed_form(rng):
    a, b = rng.random((8, 8)), rng.random((8, 8))
    basis = fit_pca(np.stack([a, b]), k=1)
    half = np.linalg.norm((a - b).ravel()) / 2
    pa, pb = project(a, basis)[0], project(b, basis)[0]
    assert abs(pa) == pytest.approx(half, rel=1e-10)
    assert abs(pb) == pytest.approx(half, rel=1e-10)
    assert pa == pytest.approx(-pb, rel=1e-10)


def test_pca_reconstruction_error_equals_discarded_energy(rng):
    maps = rng.random((20, 6, 6))
    k = 5
    basis = fit_pca(maps, k=k)
    flat = maps.reshape(20, -1)
    centered = flat - flat.mean(axis=0)
    _, s, _ = np.linalg.svd(centered, full_matrices=False)
    comp = basis.components.reshape(k, -1)
    scores = centered @ comp.T
    recon_err = ((centered - scores @ comp) ** 2).sum()
    assert recon_err == pytest.approx((s[k:] ** 2).sum(), abs=1e-8)


def test_pca_components_orthonormal(rng):
    basis = fit_pca(rng.random((15, 6, 6)), k=4)
    comp = basis.components.reshape(4, -1)
    np.testing.assert_allclose(comp @ comp.T, np.eye(4), atol=1e-8)


def test_pca_requires_enough_maps(rng):
    with pytest.raises(ConfigError):
        fit_pca(rng.random((3, 4, 4)), k=5)


# ---------------------------------------------------------------------------
# assembling and standardization


def test_feature_vector_length_and_names(rng):
    maps = np.stack([two_pcf(blob_rve(rng, 32)) for _ in range(15)])
    basis = fit_pca(maps, k=13)
    vec = assemble_feature_vector(blob_rve(rng, 32), basis)
    assert vec.shape == (N_FEATURES,)
    assert len(feature_names()) == N_FEATURES
    # census: 37 descriptor entries beyond volume fraction + correlation scores
    assert N_FEATURES - 1 - 13 == 37


def test_standardize_fit_apply_roundtrip(rng):
    x = rng.normal(size=(50, 7)) * rng.uniform(0.5, 3, size=7) + rng.normal(size=7)
    stats = standardize_fit(x)
    z = standardize_apply(x, stats)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0, ddof=1), 1.0, atol=1e-10)
    np.testing.assert_allclose(standardize_invert(z, stats), x, atol=1e-12)


def test_standardize_constant_column_clamped(rng):
    x = rng.normal(size=(20, 3))
    x[:, 1] = 4.2
    with pytest.warns(UserWarning):
        stats = standardize_fit(x)
    z = standardize_apply(x, stats)
    np.testing.assert_allclose(z[:, 1], 0.0, atol=1e-12)
    assert stats.scale[1] == 1.0


def test_pooled_features_invariant_for_window_multiple_shifts(rng):
    rve = blob_rve(rng, 32)
    window = 4
    base_lv = local_volume_distribution(rve, window)
    base_ed = edge_distributions(rve, window)
    moved = translate_periodic(rve, window * 3, window * 5)
    np.testing.assert_allclose(local_volume_distribution(moved, window), base_lv, atol=1e-12)
    np.testing.assert_allclose(edge_distributions(moved, window), base_ed, atol=1e-10)


def test_two_pcf_translation_invariance(rng):
    rve = blob_rve(rng, 16)
    base = two_pcf(rve)
    moved = translate_periodic(rve, 3, 7)
    np.testing.assert_allclose(two_pcf(moved), base, atol=1e-12)