"""Evaluation measures and physical-correctness reports.

The relative root mean squared error divides each squared component error
by the squared target.  Because the Mandel off-diagonal component
fluctuates around zero, components are only included in relative measures
when |target| exceeds a threshold (default 0.2); below it they are
reported as absolute errors instead.  Diagonal components are always
included relatively.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DataError
from .grid import RveImage, rotate90, translate_periodic

REL_THRESHOLD = 0.2
COMPONENT_NAMES = ("k11", "k22", "sqrt2_k12")


def _as_n3(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != 3:
        raise DataError(f"expected (n, 3) Mandel arrays, got {a.shape}")
    return a


def _inclusion_mask(targets, threshold=REL_THRESHOLD):
    """Boolean mask of components entering the relative error: diagonals always,
    the off-diagonal only when its magnitude exceeds the threshold."""
    mask = np.ones_like(targets, dtype=bool)
    mask[:, 2] = np.abs(targets[:, 2]) > threshold
    return mask


def rel_rmse(targets, predictions, threshold: float = REL_THRESHOLD) -> float:
    """Relative root mean squared error in percent over the included components."""
    t, p = _as_n3(targets), _as_n3(predictions)
    mask = _inclusion_mask(t, threshold)
    if np.any(t[mask] == 0.0):
        raise DataError("zero target in a component included in the relative error")
    ratios = ((t - p)[mask] / t[mask]) ** 2
    return 100.0 * float(np.sqrt(ratios.mean()))


def mse(targets, predictions) -> float:
    t, p = _as_n3(targets), _as_n3(predictions)
    return float(((t - p) ** 2).mean())


def r_squared(targets, predictions) -> np.ndarray:
    """Coefficient of determination per component (mean predictor scores 0)."""
    t, p = _as_n3(targets), _as_n3(predictions)
    ss_res = ((t - p) ** 2).sum(axis=0)
    ss_tot = ((t - t.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - ss_res / ss_tot
    return np.where(ss_tot > 0, r2, np.where(ss_res == 0, 1.0, -np.inf))


def thresholded_errors(targets, predictions, threshold: float = REL_THRESHOLD) -> dict:
    """Per-component mean relative (|y| > threshold) and mean absolute
    (|y| <= threshold) errors; empty partitions are reported as None."""
    t, p = _as_n3(targets), _as_n3(predictions)
    out = {}
    for j, name in enumerate(COMPONENT_NAMES):
        big = np.abs(t[:, j]) > threshold
        rel = float(np.abs((t[big, j] - p[big, j]) / t[big, j]).mean()) if big.any() else None
        small = ~big
        absolute = float(np.abs(t[small, j] - p[small, j]).mean()) if small.any() else None
        out[name] = {"relative_mean": rel, "absolute_mean": absolute}
    return out


@dataclass
class EvalReport:
    rel_rmse_pct: float
    mse: float
    mean_rel_err_pct: dict
    median_rel_err_pct: dict
    r2: dict
    n_samples: int
    thresholded: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(targets, predictions, threshold: float = REL_THRESHOLD) -> EvalReport:
    """Full report; per-component relative errors cover the diagonal entries."""
    t, p = _as_n3(targets), _as_n3(predictions)
    mean_rel, median_rel = {}, {}
    for j, name in enumerate(COMPONENT_NAMES[:2]):
        rel = 100.0 * np.abs((t[:, j] - p[:, j]) / t[:, j])
        mean_rel[name] = float(rel.mean())
        median_rel[name] = float(np.median(rel))
    r2 = r_squared(t, p)
    return EvalReport(
        rel_rmse_pct=rel_rmse(t, p, threshold),
        mse=mse(t, p),
        mean_rel_err_pct=mean_rel,
        median_rel_err_pct=median_rel,
        r2={name: float(r2[j]) for j, name in enumerate(COMPONENT_NAMES)},
        n_samples=t.shape[0],
        thresholded=thresholded_errors(t, p, threshold),
    )


def translation_robustness(predict_fn, rve: RveImage, n_shifts: int = 100, rng=None) -> dict:
    """Prediction spread of a model over random periodic frame translations.

    predict_fn maps an RveImage to a 3-vector.  The coefficient of
    variation guards its denominator with the relative-error threshold so
    the near-zero off-diagonal component stays well defined.
    """
    rng = rng or np.random.default_rng(0)
    n = rve.resolution
    preds = []
    shifts = rng.integers(0, n, size=(n_shifts, 2))
    for dx, dy in shifts:
        preds.append(predict_fn(translate_periodic(rve, int(dx), int(dy))))
    preds = np.asarray(preds, dtype=float).reshape(n_shifts, 3)
    mean = preds.mean(axis=0)
    std = preds.std(axis=0)
    cov = std / np.maximum(np.abs(mean), REL_THRESHOLD)
    return {
        "mean": mean,
        "std": std,
        "cov": cov,
        "n_shifts": n_shifts,
    }


def rotation_consistency(predict_fn, images, targets) -> dict:
    """Paired evaluation in the original and quarter-rotated configuration.

    Under a quarter rotation the diagonal components swap and the Mandel
    off-diagonal flips its sign; the rotated row evaluates the model on
    the rotated images against the transformed targets.
    """
    t = _as_n3(targets)
    preds, preds_rot = [], []
    for img in images:
        rve = img if isinstance(img, RveImage) else RveImage(np.asarray(img, np.uint8), img.shape[0])
        preds.append(predict_fn(rve))
        preds_rot.append(predict_fn(rotate90(rve)))
    preds = np.asarray(preds, float).reshape(len(t), 3)
    preds_rot = np.asarray(preds_rot, float).reshape(len(t), 3)
    t_rot = np.column_stack([t[:, 1], t[:, 0], -t[:, 2]])
    return {
        "original": evaluate(t, preds),
        "rotated": evaluate(t_rot, preds_rot),
    }
