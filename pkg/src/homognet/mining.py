"""Uncertainty guided data mining.

Ranks predicted samples by joint aleatoric uncertainty and relative error
and exports the most suspicious RVEs as an inspection gallery.  The
gallery feeds the human feature-engineering loop: recurring structures
among high-sigma / high-error samples hint at characteristics the current
descriptor set cannot express.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


def relative_error(target, prediction) -> float:
    """Euclidean norm of the error divided by the norm of the target."""
    t = np.asarray(target, dtype=float)
    p = np.asarray(prediction, dtype=float)
    norm = np.linalg.norm(t)
    if norm == 0.0:
        raise DataError("relative error undefined for a zero-norm target")
    return float(np.linalg.norm(t - p) / norm)


@dataclass(frozen=True)
class MiningRecord:
    sample_id: int
    rel_error: float
    mean_sigma: float
    mu: tuple
    sigma: tuple
    iteration: str = ""

    def __post_init__(self):
        if self.rel_error < 0:
            raise DataError("relative error must be >= 0")
        if self.mean_sigma <= 0 or any(s <= 0 for s in self.sigma):
            raise DataError("aleatoric sigma must be positive")


def records_from_predictions(targets, mu, sigma, iteration: str = "") -> list[MiningRecord]:
    targets = np.asarray(targets, float)
    mu = np.asarray(mu, float)
    sigma = np.asarray(sigma, float)
    return [
        MiningRecord(
            sample_id=i,
            rel_error=relative_error(targets[i], mu[i]),
            mean_sigma=float(sigma[i].mean()),
            mu=tuple(map(float, mu[i])),
            sigma=tuple(map(float, sigma[i])),
            iteration=iteration,
        )
        for i in range(len(targets))
    ]


@dataclass
class MiningResult:
    selected_ids: list
    csv_path: Path | None
    gallery_path: Path | None
    records: list = field(default_factory=list)


def _tile_gallery(images, columns: int = 4, gap: int = 2) -> np.ndarray:
    """Arrange binary images into one uint8 sheet (inclusions white)."""
    n = len(images)
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    side = images[0].shape[0]
    sheet = np.full(
        (rows * side + (rows + 1) * gap, columns * side + (columns + 1) * gap), 128, dtype=np.uint8
    )
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        y = gap + r * (side + gap)
        x = gap + c * (side + gap)
        sheet[y : y + side, x : x + side] = np.asarray(img, np.uint8) * 255
    return sheet


def write_pgm(image: np.ndarray, path) -> Path:
    """Plain binary PGM (P5) writer for grayscale uint8 sheets."""
    path = Path(path)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return path


def rank_and_export(
    records: list[MiningRecord],
    images=None,
    out_dir=None,
    error_quantile: float = 0.9,
    sigma_quantile: float = 0.9,
    k: int = 16,
) -> MiningResult:
    """Select samples above both quantile thresholds and export them.

    Selection uses strict 'greater than' comparisons, so a degenerate set
    of identical records yields an empty (but valid) result.  Selected
    records are ordered by the product of max-normalized error and sigma;
    the top k images go into a tiled gallery, all selected records into a
    CSV.  Deterministic given the records.
    """
    if not 0.0 <= error_quantile <= 1.0 or not 0.0 <= sigma_quantile <= 1.0:
        raise ConfigError("quantiles must lie in [0, 1]")
    errs = np.array([r.rel_error for r in records])
    sigs = np.array([r.mean_sigma for r in records])
    if len(records) == 0:
        return MiningResult(selected_ids=[], csv_path=None, gallery_path=None)
    e_th = np.quantile(errs, error_quantile)
    s_th = np.quantile(sigs, sigma_quantile)
    chosen = [r for r, e, s in zip(records, errs, sigs) if e > e_th and s > s_th]
    e_max = errs.max() if errs.max() > 0 else 1.0
    s_max = sigs.max()
    chosen.sort(key=lambda r: (-(r.rel_error / e_max) * (r.mean_sigma / s_max), r.sample_id))

    csv_path = gallery_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "mining_records.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["sample_id", "rel_error", "mean_sigma"]
                + [f"mu_{i}" for i in range(3)]
                + [f"sigma_{i}" for i in range(3)]
                + ["iteration"]
            )
            for r in chosen:
                writer.writerow([r.sample_id, r.rel_error, r.mean_sigma, *r.mu, *r.sigma, r.iteration])
        if k > 0 and images is not None and chosen:
            top = chosen[:k]
            sheet = _tile_gallery([images[r.sample_id] for r in top])
            gallery_path = write_pgm(sheet, out_dir / "mining_gallery.pgm")
    return MiningResult(
        selected_ids=[r.sample_id for r in chosen],
        csv_path=csv_path,
        gallery_path=gallery_path,
        records=chosen,
    )
