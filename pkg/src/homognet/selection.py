"""Feature ranking and the subset-size training sweep.

Three rankers order the 51 descriptors by estimated usefulness:

  pearson   absolute Pearson correlation against the targets (filter)
  anova     one-way F-score over quantile-binned targets (filter)
  rfe       recursive feature elimination with a ridge surrogate (wrapper)

The subset sweep then trains small aleatoric networks on growing feature
subsets per ranking and records the best validation loss out of a fixed
number of repeats per size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from . import models as _models
from .neural import TrainConfig

RANKING_METHODS = ("pearson", "anova", "rfe")


@dataclass(frozen=True)
class RankingResult:
    method: str
    order: np.ndarray  # feature indices, best first; a permutation of 0..d-1
    scores: np.ndarray  # per-feature score in original feature order

    def __post_init__(self):
        d = len(self.order)
        if sorted(self.order.tolist()) != list(range(d)):
            raise DataError("ranking order is not a permutation")


def _safe_corr(matrix) -> np.ndarray:
    """Absolute correlation matrix with zero-variance columns mapped to 0."""
    x = np.asarray(matrix, dtype=float)
    std = x.std(axis=0)
    degenerate = std == 0.0
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} constant column(s): correlation set to 0", stacklevel=2)
    xc = (x - x.mean(axis=0)) / np.where(degenerate, 1.0, std)
    corr = np.abs(xc.T @ xc / x.shape[0])
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, 0.0, 1.0)


def pearson_matrix(features, targets) -> np.ndarray:
    """Absolute Pearson correlations of [features | targets], unit diagonal."""
    f = np.asarray(features, dtype=float)
    t = np.asarray(targets, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if f.shape[0] != t.shape[0]:
        raise DataError("feature and target sample counts differ")
    if f.shape[0] < 3:
        raise DataError("need at least 3 samples for a correlation estimate")
    return _safe_corr(np.hstack([f, t]))


def pearson_rank(features, targets) -> RankingResult:
    d = features.shape[1]
    corr = pearson_matrix(features, targets)
    scores = corr[:d, d:].max(axis=1)
    return RankingResult("pearson", order=np.argsort(-scores, kind="stable"), scores=scores)


def anova_f(features, targets, bins: int = 8) -> np.ndarray:
    """F-scores of each feature over quantile-binned targets, averaged over
    the target components (one-way analysis of variance)."""
    f = np.asarray(features, dtype=float)
    t = np.asarray(targets, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    n, d = f.shape
    scores = np.zeros(d)
    for j in range(t.shape[1]):
        edges = np.quantile(t[:, j], np.linspace(0, 1, bins + 1)[1:-1])
        groups = np.searchsorted(edges, t[:, j], side="right")
        labels = np.unique(groups)
        if len(labels) < 2:
            raise DataError("degenerate binning: all targets fall into one bin")
        grand = f.mean(axis=0)
        ss_between = np.zeros(d)
        ss_within = np.zeros(d)
        for g in labels:
            sel = f[groups == g]
            ss_between += len(sel) * (sel.mean(axis=0) - grand) ** 2
            ss_within += ((sel - sel.mean(axis=0)) ** 2).sum(axis=0)
        df_b = len(labels) - 1
        df_w = n - len(labels)
        num = ss_between / df_b
        den = ss_within / df_w
        with np.errstate(divide="ignore", invalid="ignore"):
            fval = np.where(num == 0.0, 0.0, np.where(den > 0.0, num / den, np.inf))
        scores += fval
    return scores / t.shape[1]


def anova_rank(features, targets, bins: int = 8) -> RankingResult:
    scores = anova_f(features, targets, bins)
    return RankingResult("anova", order=np.argsort(-scores, kind="stable"), scores=scores)


def _ridge_fit(x, y, lam):
    d = x.shape[1]
    for _ in range(8):
        try:
            beta = np.linalg.solve(x.T @ x + lam * np.eye(d), x.T @ y)
            if np.isfinite(beta).all():
                return beta
        except np.linalg.LinAlgError:
            pass
        lam *= 10.0
    raise DataError("ridge fit failed even with a raised regularization floor")


def rfe_rank(features, targets, ridge: float = 1e-6) -> RankingResult:
    """Recursive feature elimination: repeatedly drop the feature whose ridge
    coefficient norm is smallest; the last survivor ranks first.

    Expects standardized features so coefficient magnitudes are comparable.
    """
    x = np.asarray(features, dtype=float)
    t = np.asarray(targets, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    d = x.shape[1]
    remaining = list(range(d))
    elimination = []
    lam = ridge * x.shape[0]
    while remaining:
        beta = _ridge_fit(x[:, remaining], t, lam)
        weight = np.linalg.norm(beta, axis=1)
        drop = int(np.argmin(weight))
        elimination.append(remaining.pop(drop))
    order = np.array(elimination[::-1])
    scores = np.empty(d)
    scores[order] = np.arange(d, 0, -1)  # survivors score highest
    return RankingResult("rfe", order=order, scores=scores)


def rank_features(features, targets, method: str, **kw) -> RankingResult:
    if method == "pearson":
        return pearson_rank(features, targets)
    if method == "anova":
        return anova_rank(features, targets, **kw)
    if method == "rfe":
        return rfe_rank(features, targets, **kw)
    raise ConfigError(f"unknown ranking method {method!r}; choose from {RANKING_METHODS}")


def subset_sweep(
    features,
    targets,
    rankings: dict,
    train_idx,
    val_idx,
    sizes=None,
    repeats: int = 5,
    config: TrainConfig | None = None,
) -> dict:
    """Best validation loss per (method, subset size) over repeated trainings.

    For every ranking and every subset size the top-scoring features are
    used to train `repeats` aleatoric networks from different seeds; the
    smallest validation loss survives (a best-out-of-n setup).
    """
    features = np.asarray(features, dtype=float)
    d = features.shape[1]
    sizes = list(range(6, d + 1, 3)) if sizes is None else sorted(set(int(s) for s in sizes))
    if sizes[-1] > d:
        raise ConfigError("subset size exceeds the feature count")
    config = config or TrainConfig(max_epochs=120, patience=15)
    curves = {}
    for method, ranking in rankings.items():
        losses = []
        for size in sizes:
            idx = np.asarray(ranking.order[:size])
            best = np.inf
            for rep in range(repeats):
                bundle = _models.ModelBundle(
                    kind="bnn",
                    net=_models.build_bnn(size, rng=np.random.default_rng([config.seed, rep, size])),
                    input_dim=size,
                    feature_indices=idx,
                )
                rep_cfg = TrainConfig(**{**config.__dict__, "seed": config.seed + 1000 * rep + size})
                data = _models.ModelData(
                    features=features, targets=np.asarray(targets, float),
                    train_idx=np.asarray(train_idx), val_idx=np.asarray(val_idx),
                )
                hist = _models.train_model(bundle, data, rep_cfg)
                best = min(best, hist.best_val())
            losses.append(best)
        curves[method] = {"sizes": sizes, "losses": losses}
    return curves
