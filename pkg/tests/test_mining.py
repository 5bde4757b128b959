import numpy as np
import pytest

from homognet.errors import DataError
from homognet import mining


def test_relative_error_trivia():
    t = np.array([1.0, 1.0, 0.0])
    assert mining.relative_error(t, t) == 0.0
    assert mining.relative_error(t, np.zeros(3)) == pytest.approx(1.0)
    assert mining.relative_error(t, [1.1, 1.0, 0.0]) == pytest.approx(0.1 / np.sqrt(2))


def test_relative_error_zero_target_rejected():
    with pytest.raises(DataError):
        mining.relative_error(np.zeros(3), np.ones(3))


def _records(errs, sigs):
    return [
        mining.MiningRecord(sample_id=i, rel_error=float(e), mean_sigma=float(s),
                            mu=(0.0, 0.0, 0.0), sigma=(s, s, s))
        for i, (e, s) in enumerate(zip(errs, sigs))
    ]


def test_identical_records_select_nothing(tmp_path):
    recs = _records([0.1] * 10, [0.2] * 10)
    res = mining.rank_and_export(recs, out_dir=tmp_path)
    assert res.selected_ids == []
    assert res.csv_path is not None  # CSV is still written (empty body)


def test_dominant_outlier_ranks_first(tmp_path, rng):
    errs = list(rng.uniform(0.01, 0.02, size=20)) + [0.5]
    sigs = list(rng.uniform(0.1, 0.2, size=20)) + [0.9]
    recs = _records(errs, sigs)
    res = mining.rank_and_export(recs, out_dir=tmp_path)
    assert res.selected_ids[0] == 20


def test_k_zero_gives_csv_only(tmp_path, rng):
    errs = rng.uniform(0, 1, size=30)
    sigs = rng.uniform(0.1, 1, size=30)
    imgs = (rng.random((30, 8, 8)) < 0.5).astype(np.uint8)
    res = mining.rank_and_export(_records(errs, sigs), images=imgs, out_dir=tmp_path, k=0)
    assert res.csv_path.exists()
    assert res.gallery_path is None


def test_gallery_written_and_deterministic(tmp_path, rng):
    errs = rng.uniform(0, 1, size=40)
    sigs = rng.uniform(0.1, 1, size=40)
    imgs = (rng.random((40, 8, 8)) < 0.5).astype(np.uint8)
    recs = _records(errs, sigs)
    res1 = mining.rank_and_export(recs, images=imgs, out_dir=tmp_path / "a", k=4)
    res2 = mining.rank_and_export(recs, images=imgs, out_dir=tmp_path / "b", k=4)
    assert res1.selected_ids == res2.selected_ids
    assert res1.gallery_path.read_bytes() == res2.gallery_path.read_bytes()
    header = res1.gallery_path.read_bytes()[:2]
    assert header == b"P5"


def test_ranking_invariant_under_common_sigma_rescaling(rng):
    errs = rng.uniform(0, 1, size=50)
    sigs = rng.uniform(0.1, 1, size=50)
    base = mining.rank_and_export(_records(errs, sigs))
    scaled = mining.rank_and_export(_records(errs, [7.5 * s for s in sigs]))
    assert base.selected_ids == scaled.selected_ids


def test_records_from_predictions(rng):
    t = np.abs(rng.normal(size=(5, 3))) + 0.5
    mu = t + 0.01
    sigma = np.abs(rng.normal(size=(5, 3))) + 0.1
    recs = mining.records_from_predictions(t, mu, sigma, iteration="it1")
    assert len(recs) == 5
    assert recs[0].iteration == "it1"
    assert recs[2].rel_error == pytest.approx(mining.relative_error(t[2], mu[2]))


def test_record_validation():
    with pytest.raises(DataError):
        mining.MiningRecord(0, rel_error=-0.1, mean_sigma=1.0, mu=(0, 0, 0), sigma=(1, 1, 1))
    with pytest.raises(DataError):
        mining.MiningRecord(0, rel_error=0.1, mean_sigma=0.0, mu=(0, 0, 0), sigma=(1, 1, 1))
