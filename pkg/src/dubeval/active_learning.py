"""Three-stage label acquisition: random initialization at a third of the
budget, then two rounds of uncertainty + diversity querying, refitting the
proxy weights after each stage. A random-sampling policy shares the exact same
code path for paired comparisons.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import Manifest, kfold_split
from .errors import ConfigError, DataError
from .eval_metrics import IntervalSeries, calibration_suite, gaussian_z, pcc
from .proxy_mos import (
    MetricNormalizer,
    ProxyWeights,
    WeightEnsemble,
    fit_ensemble,
    fit_normalizer,
    learn_weights,
    predictive_distribution,
    proxy_score,
)

# variance floor guarding the Gaussian entropy at zero ensemble spread
VARIANCE_FLOOR = 1e-12
OVERSAMPLE_FACTOR = 3
STAGE_FRACTIONS = (1 / 3, 2 / 3, 1.0)


class SimulatedAnnotator:
    """Annotator oracle backed by the hidden true-quality table.

    Ratings are deterministic per clip regardless of query order, so the
    selection policy is the only thing that differs between compared runs.
    """

    def __init__(self, truth: dict[str, float], noise_sigma: float = 0.3, seed: int = 0):
        self.truth = truth
        self.noise_sigma = noise_sigma
        self.seed = seed

    def rate(self, clip_id: str) -> float:
        if clip_id not in self.truth:
            raise DataError(f"annotator has no ground truth for clip {clip_id!r}")
        digest = hashlib.sha256(f"{self.seed}:{clip_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return float(np.clip(self.truth[clip_id] + self.noise_sigma * rng.normal(), 1.0, 5.0))


class RecordedAnnotator:
    """Replays a static table of real ratings (mean MOS per clip)."""

    def __init__(self, mos_by_clip: dict[str, float]):
        self.mos = mos_by_clip

    def rate(self, clip_id: str) -> float:
        if clip_id not in self.mos:
            raise DataError(f"no recorded rating for clip {clip_id!r}")
        return self.mos[clip_id]


@dataclass
class ALState:
    labeled: dict[str, float]
    unlabeled: list[str]
    stage: str  # S0 / S1 / S2
    budget: int
    weights: ProxyWeights | None = None
    ensemble: WeightEnsemble | None = None
    history: list[dict] = field(default_factory=list)

    def check_pools(self, all_ids: set[str]):
        assert not set(self.labeled) & set(self.unlabeled), "pools overlap"
        assert set(self.labeled) | set(self.unlabeled) == all_ids, "pools not exhaustive"


def condition_vectors(manifest: Manifest, clip_ids) -> np.ndarray:
    """Diversity features: z-scored duration, an 8-dim speaker hash, a
    background one-hot and the language-direction bit."""
    durations = np.array([r.duration_s for r in manifest.records])
    mu, sd = durations.mean(), durations.std()
    sd = sd if sd > 0 else 1.0
    backgrounds = sorted({r.background_label for r in manifest.records})
    bg_index = {b: i for i, b in enumerate(backgrounds)}
    rows = []
    for cid in clip_ids:
        rec = manifest.record(cid)
        digest = hashlib.sha256(rec.speaker_id.encode()).digest()
        spk = np.array([b / 255.0 * 2.0 - 1.0 for b in digest[:8]])
        onehot = np.zeros(len(backgrounds))
        onehot[bg_index[rec.background_label]] = 1.0
        rows.append(
            np.concatenate(
                [
                    [(rec.duration_s - mu) / sd],
                    spk,
                    onehot,
                    [1.0 if rec.language_direction == "en-hi" else 0.0],
                ]
            )
        )
    return np.array(rows)


def entropy_of_variance(var: np.ndarray) -> np.ndarray:
    """Gaussian differential entropy, with the variance floored so the
    degenerate zero-spread case maps to a finite minimum score."""
    v = np.maximum(np.asarray(var, dtype=np.float64), VARIANCE_FLOOR)
    return 0.5 * np.log(2.0 * math.pi * math.e * v)


def uncertainty_scores(ensemble: WeightEnsemble, manifest: Manifest, clip_ids) -> np.ndarray:
    """Per-clip entropy of the ensemble's proxy-score distribution.

    Scores are left unclamped here: the [1, 5] clamp would flatten member
    disagreement exactly on the extreme clips the sampler should notice."""
    raw = manifest.objective_matrix(clip_ids)
    scores = ensemble.member_scores(raw, clamp=False)
    return entropy_of_variance(scores.var(axis=1))


def rank_by_uncertainty(clip_ids, scores) -> list[str]:
    """Descending by score; ties broken by lexicographic clip_id."""
    return [c for c, _ in sorted(zip(clip_ids, scores), key=lambda t: (-t[1], t[0]))]


def diversity_filter(ranked_ids: list[str], cond: np.ndarray, batch_size: int) -> list[str]:
    """Greedy farthest-point selection over the top 3x batch of the ranking.

    cond rows correspond to ranked_ids. Seeded by the most uncertain clip;
    each subsequent pick maximizes the minimum Euclidean distance to the
    already-selected set (ties resolved by uncertainty rank).
    """
    if batch_size > len(ranked_ids):
        raise DataError(
            f"batch_size {batch_size} exceeds candidate pool ({len(ranked_ids)})"
        )
    if batch_size == len(ranked_ids):
        return list(ranked_ids)
    top = min(OVERSAMPLE_FACTOR * batch_size, len(ranked_ids))
    ids = ranked_ids[:top]
    vecs = np.asarray(cond[:top], dtype=np.float64)
    selected = [0]
    min_dist = np.linalg.norm(vecs - vecs[0], axis=1)
    while len(selected) < batch_size:
        min_dist[selected] = -1.0
        nxt = int(np.argmax(min_dist))  # argmax keeps first (most uncertain) on ties
        selected.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(vecs - vecs[nxt], axis=1))
    return [ids[i] for i in selected]


@dataclass
class ALResult:
    weights: ProxyWeights
    normalizer: MetricNormalizer
    ensemble: WeightEnsemble
    state: ALState

    @property
    def history(self) -> list[dict]:
        return self.state.history


def _observation_variance(weights: ProxyWeights, normalizer, X_raw, y) -> float:
    """Plug-in residual variance of the calibrated proxy predictor on the
    labeled pool. Optimistic at small pool sizes (the fit absorbs part of the
    noise), so predicted intervals start too narrow and widen toward honest
    coverage as the budget grows."""
    resid = proxy_score(weights, normalizer, X_raw) - y
    return float(np.mean(resid**2))


def _stage_report(stage, queried, state: ALState, manifest, normalizer, seed,
                  diag_ids, diag_mos, level) -> dict:
    ids = sorted(state.labeled)
    X = manifest.objective_matrix(ids)
    y = np.array([state.labeled[c] for c in ids])
    obs_var = _observation_variance(state.weights, normalizer, X, y)
    entry = {
        "stage": stage,
        "n_labeled": len(ids),
        "queried": list(queried),
        "rho_pool": state.weights.rho,
        "weights": [float(v) for v in state.weights.w],
        "calibration": {"a": state.weights.a, "b": state.weights.b},
        "obs_variance": obs_var,
    }
    if diag_ids:
        raw = manifest.objective_matrix(diag_ids)
        # ensemble predictive distribution: the sampler's uncertainty signal,
        # whose mean variance is reported as APV
        mean, ens_var, _ = predictive_distribution(state.ensemble, raw, level=level)
        targets = np.array([diag_mos[c] for c in diag_ids])
        entry["rho_diag"] = pcc(mean, targets)
        # plain prediction intervals from the residual-noise model: these are
        # what coverage of noisy human ratings is judged against
        z = gaussian_z(level)
        sigma = math.sqrt(obs_var)
        suite = calibration_suite(
            IntervalSeries(mean - z * sigma, mean + z * sigma, targets, level=level),
            np.full_like(mean, obs_var),
        )
        suite.pop("apv")
        entry["apv"] = float(np.mean(ens_var))
        entry.update(suite)
    state.history.append(entry)
    return entry


def run_al_loop(manifest: Manifest, pool_ids, annotator, budget: int, seed: int,
                policy: str = "al", diag_ids=None, ensemble_size: int = 50,
                interval_level: float = 0.9) -> ALResult:
    """Stage I random init at a third of the budget, then two query rounds to
    two thirds and the full budget, refitting weights and the bootstrap
    ensemble after each stage.

    policy "al" uses entropy ranking plus farthest-point diversity filtering;
    policy "random" replaces the query selection with uniform sampling and is
    otherwise identical. diag_ids, when given, are held-out clips (never
    queried against the budget) used for out-of-sample correlation and
    calibration diagnostics at each stage.
    """
    if policy not in ("al", "random"):
        raise ConfigError(f"unknown policy {policy!r}")
    pool_ids = sorted(pool_ids)
    if budget < 10:
        raise ConfigError(f"labeled budget must be >= 10, got {budget}")
    if budget > len(pool_ids):
        raise DataError(f"budget {budget} exceeds pool size {len(pool_ids)}")
    diag_ids = sorted(diag_ids) if diag_ids else []
    if set(diag_ids) & set(pool_ids):
        raise DataError("diagnostic clips must be disjoint from the query pool")
    diag_mos = {c: annotator.rate(c) for c in diag_ids}

    rng = np.random.default_rng(seed)
    all_ids = set(pool_ids)
    targets = [math.ceil(f * budget) for f in STAGE_FRACTIONS]
    normalizer = fit_normalizer(manifest.objective_matrix(pool_ids))
    cond_all = {c: v for c, v in zip(pool_ids, condition_vectors(manifest, pool_ids))}

    def refit(state: ALState, stage_seed: int):
        ids = sorted(state.labeled)
        X = manifest.objective_matrix(ids)
        y = np.array([state.labeled[c] for c in ids])
        state.weights = learn_weights(X, y, normalizer, seed=stage_seed)
        state.ensemble = fit_ensemble(X, y, normalizer, K=ensemble_size, seed=stage_seed)

    # Stage I: uniform random initialization
    init = [pool_ids[i] for i in rng.choice(len(pool_ids), size=targets[0], replace=False)]
    state = ALState(
        labeled={c: annotator.rate(c) for c in init},
        unlabeled=[c for c in pool_ids if c not in set(init)],
        stage="S0",
        budget=budget,
    )
    refit(state, seed)
    state.check_pools(all_ids)
    _stage_report("S0", init, state, manifest, normalizer, seed, diag_ids, diag_mos,
                  interval_level)

    for stage_no, target in enumerate(targets[1:], start=1):
        batch = target - len(state.labeled)
        candidates = list(state.unlabeled)
        if policy == "al":
            ent = uncertainty_scores(state.ensemble, manifest, candidates)
            ranked = rank_by_uncertainty(candidates, ent)
            cond = np.array([cond_all[c] for c in ranked])
            queried = diversity_filter(ranked, cond, batch)
        else:
            queried = [candidates[i] for i in rng.choice(len(candidates), size=batch,
                                                         replace=False)]
        for c in queried:
            state.labeled[c] = annotator.rate(c)
        state.unlabeled = [c for c in state.unlabeled if c not in set(queried)]
        state.stage = f"S{stage_no}"
        refit(state, seed + stage_no)
        state.check_pools(all_ids)
        _stage_report(state.stage, queried, state, manifest, normalizer, seed,
                      diag_ids, diag_mos, interval_level)

    return ALResult(weights=state.weights, normalizer=normalizer,
                    ensemble=state.ensemble, state=state)


def random_baseline(manifest: Manifest, pool_ids, annotator, budget: int, seed: int,
                    **kwargs) -> ALResult:
    """Uniform random querying through the identical staged pipeline."""
    return run_al_loop(manifest, pool_ids, annotator, budget, seed,
                       policy="random", **kwargs)


def proxy_labels(manifest: Manifest, weights: ProxyWeights,
                 normalizer: MetricNormalizer) -> dict[str, float]:
    """Proxy MOS for every clip in the manifest."""
    scores = proxy_score(weights, normalizer, manifest.objective_matrix())
    return {rec.clip_id: float(s) for rec, s in zip(manifest.records, scores)}


def paired_bootstrap_pvalue(diffs, n_resamples: int = 10_000, seed: int = 0) -> float:
    """One-sided p-value for mean(diffs) > 0 via bootstrap over paired runs."""
    d = np.asarray(diffs, dtype=np.float64)
    if d.size < 2:
        raise DataError("need at least 2 paired differences")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(n_resamples, d.size))
    means = d[idx].mean(axis=1)
    return float((np.sum(means <= 0.0) + 1) / (n_resamples + 1))
