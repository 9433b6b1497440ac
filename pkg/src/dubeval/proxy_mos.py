"""Proxy quality labels: metric normalization, simplex weight learning by
Pearson maximization, affine calibration to the MOS scale, and a bootstrap
ensemble for predictive uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import LOWER_BETTER, METRIC_NAMES
from .errors import DataError, NumericError

DEFAULT_ENSEMBLE_SIZE = 50
N_RESTARTS = 16
RHO_TOL = 1e-8
MAX_ITERS = 2000


@dataclass(frozen=True)
class MetricNormalizer:
    mean: np.ndarray
    std: np.ndarray
    sign: np.ndarray  # +1, or -1 for lower-better metrics

    def transform(self, raw: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        if raw.shape[1] != 5:
            raise DataError(f"objective matrix must have 5 columns, got {raw.shape[1]}")
        if not np.all(np.isfinite(raw)):
            raise DataError("non-finite objective metric value")
        return self.sign * (raw - self.mean) / self.std


def fit_normalizer(raw_pool: np.ndarray) -> MetricNormalizer:
    """Z-score each metric over the pool and flip lower-better metrics so a
    larger normalized value always means better."""
    raw = np.atleast_2d(np.asarray(raw_pool, dtype=np.float64))
    if raw.shape[0] < 2:
        raise DataError("normalizer needs a pool of at least 2 clips")
    mean = raw.mean(axis=0)
    std = raw.std(axis=0, ddof=0)
    for j, name in enumerate(METRIC_NAMES):
        if std[j] == 0.0:
            raise NumericError(f"zero variance: {name}")
    sign = np.array([-1.0 if n in LOWER_BETTER else 1.0 for n in METRIC_NAMES])
    return MetricNormalizer(mean=mean, std=std, sign=sign)


@dataclass(frozen=True)
class ProxyWeights:
    w: np.ndarray  # simplex weights over the five metrics
    a: float  # affine calibration slope (> 0)
    b: float  # affine calibration intercept
    rho: float  # Pearson correlation achieved on the fitting pool

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != (5,) or np.any(w < -1e-9) or abs(w.sum() - 1.0) > 1e-6:
            raise DataError("proxy weights must lie on the 5-simplex")
        object.__setattr__(self, "w", np.clip(w, 0.0, None))


def equal_weights(normalizer: MetricNormalizer, pool_normed: np.ndarray, mos: np.ndarray) -> ProxyWeights:
    """Equal-weight baseline, calibrated to the given pool."""
    w = np.full(5, 0.2)
    s = pool_normed @ w
    a, b = _calibrate(s, mos)
    return ProxyWeights(w=w, a=a, b=b, rho=_pearson(s, mos))


def proxy_score(weights: ProxyWeights, normalizer: MetricNormalizer, raw,
                clamp: bool = True) -> np.ndarray:
    """Calibrated proxy MOS, clamped to [1, 5] unless clamp is False."""
    normed = normalizer.transform(raw)
    s = normed @ weights.w
    out = weights.a * s + weights.b
    return np.clip(out, 1.0, 5.0) if clamp else out


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of v onto the probability simplex."""
    v = np.atleast_2d(v)
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    idx = np.arange(1, v.shape[1] + 1)
    cond = u + (1.0 - css) / idx > 0
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    lam = (1.0 - css[np.arange(v.shape[0]), rho]) / (rho + 1.0)
    return np.maximum(v + lam[:, None], 0.0)


def _pearson(s: np.ndarray, y: np.ndarray) -> float:
    sc = s - s.mean()
    yc = y - y.mean()
    denom = np.sqrt((sc @ sc) * (yc @ yc))
    if denom == 0.0:
        return 0.0
    return float((sc @ yc) / denom)


def _calibrate(s: np.ndarray, mos: np.ndarray) -> tuple[float, float]:
    """Least-squares affine map from weighted sum to MOS; slope kept positive."""
    A = np.stack([s, np.ones_like(s)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, mos, rcond=None)
    if a <= 0.0:
        a = 1e-6
    return float(a), float(b)


def _maximize_pearson(X: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                      n_restarts: int = N_RESTARTS) -> tuple[np.ndarray, float]:
    """Projected gradient ascent of rho(Xw, y) over the simplex, run over all
    restarts simultaneously. Returns the best weight vector and its rho."""
    n, d = X.shape
    yc = y - y.mean()
    ynorm = np.sqrt(yc @ yc)
    if ynorm == 0.0:
        raise NumericError("constant MOS labels: correlation objective undefined")
    yc = yc / ynorm  # unit target, rho = <sc/|sc|, yc>

    W = np.vstack([np.full((1, d), 1.0 / d), rng.dirichlet(np.ones(d), size=n_restarts - 1)])

    def rho_of(W):
        S = X @ W.T  # (n, R)
        Sc = S - S.mean(axis=0)
        norms = np.sqrt(np.sum(Sc * Sc, axis=0))
        norms = np.where(norms == 0.0, 1e-300, norms)
        return Sc, norms, (Sc.T @ yc) / norms

    Sc, norms, rho = rho_of(W)
    lr = np.full(n_restarts, 0.5)
    active = np.ones(n_restarts, dtype=bool)
    for _ in range(MAX_ITERS):
        if not active.any():
            break
        # d rho / d s, then chain through X
        G_s = (yc[:, None] - Sc * (rho / norms)[None, :]) / norms[None, :]
        G_w = (X.T @ G_s).T  # (R, d)
        W_new = project_simplex(W + lr[:, None] * G_w)
        Sc_new, norms_new, rho_new = rho_of(W_new)
        improved = rho_new > rho
        step = improved & active
        W[step] = W_new[step]
        Sc[:, step] = Sc_new[:, step]
        norms[step] = norms_new[step]
        converged = step & (np.abs(rho_new - rho) < RHO_TOL)
        rho[step] = rho_new[step]
        shrink = ~improved & active
        lr[shrink] *= 0.5
        active &= ~converged & (lr > 1e-12)
    best = int(np.argmax(rho))
    return W[best], float(rho[best])


def learn_weights(objective_pool: np.ndarray, mos, normalizer: MetricNormalizer,
                  seed: int, n_restarts: int = N_RESTARTS) -> ProxyWeights:
    """Fit simplex weights maximizing Pearson correlation of the weighted
    normalized-metric sum with human MOS, then calibrate affinely to [1, 5].

    objective_pool: (n, 5) raw metric matrix; mos: length-n labels.
    Multi-start projected gradient ascent; deterministic given seed.
    """
    X = normalizer.transform(objective_pool)
    y = np.asarray(mos, dtype=np.float64)
    if X.shape[0] != y.shape[0]:
        raise DataError("objective pool and MOS labels differ in length")
    if X.shape[0] < 10:
        raise DataError(f"weight learning needs >= 10 labeled pairs, got {X.shape[0]}")
    if np.ptp(y) == 0.0:
        raise NumericError("constant MOS labels: correlation objective undefined")
    rng = np.random.default_rng(seed)
    w, rho = _maximize_pearson(X, y, rng, n_restarts=n_restarts)
    if not np.isfinite(rho):
        raise NumericError("weight optimization failed on all restarts")
    s = X @ w
    a, b = _calibrate(s, y)
    return ProxyWeights(w=w, a=a, b=b, rho=rho)


@dataclass(frozen=True)
class WeightEnsemble:
    """Bootstrap ensemble of proxy weight vectors for uncertainty estimates."""

    members: tuple[ProxyWeights, ...]
    normalizer: MetricNormalizer

    def member_scores(self, raw, clamp: bool = True) -> np.ndarray:
        """(n_clips, K) matrix of per-member calibrated proxy scores."""
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        return np.stack(
            [proxy_score(m, self.normalizer, raw, clamp=clamp) for m in self.members],
            axis=1,
        )


def fit_ensemble(objective_pool: np.ndarray, mos, normalizer: MetricNormalizer,
                 K: int = DEFAULT_ENSEMBLE_SIZE, seed: int = 0,
                 n_restarts: int = N_RESTARTS) -> WeightEnsemble:
    """K bootstrap resamples of the labeled pool, weights learned on each.

    Degenerate resamples (constant MOS) are redrawn, with bounded retries.
    """
    X_raw = np.atleast_2d(np.asarray(objective_pool, dtype=np.float64))
    y = np.asarray(mos, dtype=np.float64)
    n = X_raw.shape[0]
    if n < 10:
        raise DataError(f"ensemble fitting needs >= 10 labeled pairs, got {n}")
    rng = np.random.default_rng(seed)
    members = []
    for k in range(K):
        for attempt in range(20):
            idx = rng.integers(0, n, size=n)
            if np.ptp(y[idx]) > 0.0:
                break
        else:
            raise NumericError("could not draw a non-degenerate bootstrap resample")
        member_seed = int(rng.integers(0, 2**31 - 1))
        members.append(
            learn_weights(X_raw[idx], y[idx], normalizer, seed=member_seed,
                          n_restarts=n_restarts)
        )
    return WeightEnsemble(members=tuple(members), normalizer=normalizer)


def predictive_distribution(ensemble: WeightEnsemble, raw, level: float = 0.9,
                            extra_variance: float = 0.0):
    """Gaussian summary of the ensemble's proxy scores per clip.

    Returns (mean, variance, (lower, upper)); variance uses the population
    convention over members, optionally widened by an observation-noise term.
    The interval is mean +/- z_level * sigma.
    """
    from .eval_metrics import gaussian_z

    scores = ensemble.member_scores(raw)  # (n, K)
    mean = scores.mean(axis=1)
    var = scores.var(axis=1) + extra_variance
    z = gaussian_z(level)
    sigma = np.sqrt(var)
    return mean, var, (mean - z * sigma, mean + z * sigma)
