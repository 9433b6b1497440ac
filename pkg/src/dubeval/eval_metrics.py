"""Correlation, reliability and calibration statistics, plus report emitters.

All functions are pure; inputs are 1-D sequences or 2-D rating matrices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import METRIC_NAMES
from .errors import DataError, NumericError

ECE_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _check_pair(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise DataError(f"paired series must be equal-length vectors, got {x.shape} vs {y.shape}")
    if x.size < 2:
        raise DataError("paired series need at least 2 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("non-finite values in paired series")
    return x, y


def pcc(predictions, targets) -> float:
    """Pearson product-moment correlation."""
    x, y = _check_pair(predictions, targets)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise NumericError("correlation undefined for a constant series")
    return float(np.sum(xc * yc) / (sx * sy))


def average_ranks(x) -> np.ndarray:
    """Ranks 1..n with ties assigned the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(predictions, targets) -> float:
    """Spearman rank correlation: Pearson over average ranks."""
    x, y = _check_pair(predictions, targets)
    return pcc(average_ranks(x), average_ranks(y))


def mse(predictions, targets) -> float:
    x, y = _check_pair(predictions, targets)
    return float(np.mean((x - y) ** 2))


def r2(predictions, targets) -> float:
    x, y = _check_pair(predictions, targets)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise NumericError("R^2 undefined for constant targets")
    sse = float(np.sum((x - y) ** 2))
    return 1.0 - sse / sst


# ---------------------------------------------------------------------------
# inter-rater reliability

@dataclass(frozen=True)
class RatingMatrix:
    """raters x items score matrix with a boolean mask marking present entries."""

    scores: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_dense(cls, scores) -> "RatingMatrix":
        scores = np.asarray(scores, dtype=np.float64)
        mask = np.isfinite(scores)
        return cls(scores=np.where(mask, scores, 0.0), mask=mask)

    def complete_items(self) -> np.ndarray:
        """Listwise deletion: (raters, m) sub-matrix of items rated by everyone."""
        keep = self.mask.all(axis=0)
        return self.scores[:, keep]


def cronbach_alpha(matrix: RatingMatrix) -> float:
    """Internal consistency across raters.

    Missing entries are handled pairwise: alpha is computed from the mean
    per-rater variance and the mean pairwise inter-rater covariance, each over
    the items the raters involved actually scored. Equals the classical
    formula on complete matrices.
    """
    k = matrix.scores.shape[0]
    if k < 2 or matrix.scores.shape[1] < 2:
        raise DataError("alpha needs >= 2 raters and >= 2 items")
    variances = []
    for i in range(k):
        vals = matrix.scores[i, matrix.mask[i]]
        if vals.size < 2:
            raise DataError(f"rater {i} scored fewer than 2 items")
        variances.append(np.var(vals, ddof=1))
    covs = []
    for i in range(k):
        for j in range(i + 1, k):
            both = matrix.mask[i] & matrix.mask[j]
            if both.sum() >= 2:
                a = matrix.scores[i, both]
                b = matrix.scores[j, both]
                covs.append(np.cov(a, b, ddof=1)[0, 1])
    if not covs:
        raise DataError("no rater pair shares >= 2 items")
    v_bar = float(np.mean(variances))
    c_bar = float(np.mean(covs))
    denom = v_bar + (k - 1) * c_bar
    if denom == 0.0:
        raise NumericError("zero total variance in rating matrix")
    return k * c_bar / denom


def _anova_mean_squares(scores: np.ndarray):
    """Two-way mean squares for a complete raters x items matrix."""
    k, n = scores.shape
    grand = scores.mean()
    item_means = scores.mean(axis=0)
    rater_means = scores.mean(axis=1)
    ss_items = k * np.sum((item_means - grand) ** 2)
    ss_raters = n * np.sum((rater_means - grand) ** 2)
    ss_total = np.sum((scores - grand) ** 2)
    ss_resid = ss_total - ss_items - ss_raters
    msb = ss_items / (n - 1)  # between items
    msr = ss_raters / (k - 1)  # between raters
    mse_ = ss_resid / ((n - 1) * (k - 1))
    msw = (ss_raters + ss_resid) / (n * (k - 1))  # within items (one-way)
    return msb, msr, mse_, msw


def icc1(matrix: RatingMatrix) -> float:
    """One-way random, single rater: ICC(1,1). Listwise-complete items only."""
    scores = matrix.complete_items()
    k, n = scores.shape
    if k < 2 or n < 2:
        raise DataError("ICC needs >= 2 raters and >= 2 complete items")
    msb, _, _, msw = _anova_mean_squares(scores)
    denom = msb + (k - 1) * msw
    if denom == 0.0:
        raise NumericError("degenerate variance decomposition in ICC1")
    return float((msb - msw) / denom)


def icc2(matrix: RatingMatrix) -> float:
    """Two-way random, single rater: ICC(2,1). Listwise-complete items only."""
    scores = matrix.complete_items()
    k, n = scores.shape
    if k < 2 or n < 2:
        raise DataError("ICC needs >= 2 raters and >= 2 complete items")
    msb, msr, mse_, _ = _anova_mean_squares(scores)
    denom = msb + (k - 1) * mse_ + k * (msr - mse_) / n
    if denom == 0.0:
        raise NumericError("degenerate variance decomposition in ICC2")
    return float((msb - mse_) / denom)


# ---------------------------------------------------------------------------
# uncertainty calibration

@dataclass(frozen=True)
class IntervalSeries:
    """Per-item central prediction intervals at a nominal level."""

    lower: np.ndarray
    upper: np.ndarray
    targets: np.ndarray
    level: float = 0.9

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        t = np.asarray(self.targets, dtype=np.float64)
        if not (lo.shape == hi.shape == t.shape) or lo.ndim != 1:
            raise DataError("interval series components must be equal-length vectors")
        if lo.size == 0:
            raise DataError("empty interval series")
        if np.any(lo > hi):
            raise DataError("interval with lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "targets", t)


def gaussian_z(level: float) -> float:
    """Two-sided z for a central interval at the given coverage level."""
    # inverse error function via Newton on erf, adequate for metric use
    p = 0.5 * (1.0 + level)
    x = 0.0
    for _ in range(60):
        err = math.erf(x) - (2.0 * p - 1.0)
        x -= err / (2.0 / math.sqrt(math.pi) * math.exp(-x * x))
    return x * math.sqrt(2.0)


def calibration_suite(intervals: IntervalSeries, variances) -> dict[str, float]:
    """APV, PICP, MPIW and multi-level ECE for Gaussian predictive distributions.

    The interval midpoints and the supplied variances define the per-item
    Gaussians used for ECE; MPIW is normalized by the observed target range.
    """
    var = np.asarray(variances, dtype=np.float64)
    if var.shape != intervals.targets.shape:
        raise DataError("variances length does not match interval series")
    t = intervals.targets
    apv = float(np.mean(var))
    picp = float(np.mean((t >= intervals.lower) & (t <= intervals.upper)))
    t_range = float(t.max() - t.min())
    widths = intervals.upper - intervals.lower
    mpiw = float(np.mean(widths) / t_range) if t_range > 0 else float(np.mean(widths))
    mean = 0.5 * (intervals.lower + intervals.upper)
    sigma = np.sqrt(var)
    gaps = []
    for q in ECE_LEVELS:
        z = gaussian_z(q)
        inside = np.abs(t - mean) <= z * sigma
        gaps.append(abs(float(np.mean(inside)) - q))
    return {"apv": apv, "picp": picp, "mpiw": mpiw, "ece": float(np.mean(gaps))}


# ---------------------------------------------------------------------------
# baseline comparison (single objective metrics vs the model)

def single_metric_baselines(manifest, mos_by_clip: dict[str, float]) -> dict[str, dict[str, float]]:
    """Per-metric PCC/SRCC of the normalized metric alone against human MOS."""
    from .proxy_mos import fit_normalizer  # local import avoids a cycle

    clip_ids = sorted(c for c in mos_by_clip if c in {r.clip_id for r in manifest.records})
    if not clip_ids:
        raise DataError("no rated clips available for baseline comparison")
    raw = manifest.objective_matrix(clip_ids)
    normalizer = fit_normalizer(raw)
    normed = normalizer.transform(raw)
    mos = np.array([mos_by_clip[c] for c in clip_ids])
    out = {}
    for j, name in enumerate(METRIC_NAMES):
        out[name] = {"pcc": pcc(normed[:, j], mos), "srcc": srcc(normed[:, j], mos)}
    return out


# ---------------------------------------------------------------------------
# report emission

def render_table(headers: list[str], rows: list[list], title: str | None = None) -> str:
    cells = [[h for h in headers]] + [
        [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    if title:
        lines.append(title)
    sep = "-+-".join("-" * w for w in widths)
    lines.append(" | ".join(h.ljust(w) for h, w in zip(cells[0], widths)))
    lines.append(sep)
    for row in cells[1:]:
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_results(path: Path, payload: dict) -> None:
    """Machine-readable results file; deterministic byte layout."""
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
