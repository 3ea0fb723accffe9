"""
Trigger Separability Index and the tail/margin bounds built on it.

For target class y' with effect vector v (mean penultimate displacement caused
by its trigger) and last-layer rows w_k, the logit gaps are
Delta_k = (w_y' - w_k) . v for every competitor k. TSI is their mean over their
population standard deviation (plus eps). Under sub-Gaussian i.i.d. gaps:

    P(all gaps > 0) >= 1 - (K-1) exp(-TSI^2 / 2)
    E[min gap]      >= mu - sigma sqrt(2 ln(K-1))

`monte_carlo_verify` checks both empirically.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from engines.data_engine import Dataset, apply_trigger
from engines.errors import DatasetError, ShapeError
from engines.victim_engine import Classifier

logger = logging.getLogger(__name__)

TSI_EPS = 1e-8
MIN_TRIALS = 10_000
MC_CHUNK = 20_000
GAP_DISTRIBUTIONS = ("gaussian", "laplace")


@dataclass(frozen=True)
class GapProfile:
    target: int
    gaps: Tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.gaps)) if self.gaps else 0.0

    @property
    def variance(self) -> float:
        """Population variance over the K-1 competitors."""
        return float(np.var(self.gaps)) if self.gaps else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


@dataclass
class SeparabilityReport:
    eps: float
    effect_vectors: List[List[float]]
    profiles: List[GapProfile]
    tsi: List[float]
    proposition_bounds: List[float]
    corollary_thresholds: Dict[str, float]
    margin_bounds: List[float]
    margin_slack: List[float]
    empirical_asr: List[float] = field(default_factory=list)
    spearman: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["profiles"] = [
            {"target": p.target, "gaps": list(p.gaps), "mean": p.mean, "variance": p.variance}
            for p in self.profiles
        ]
        return out

    def per_class_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "class": [p.target for p in self.profiles],
            "tsi": self.tsi,
            "gap_mean": [p.mean for p in self.profiles],
            "gap_std": [p.std for p in self.profiles],
            "proposition_bound": self.proposition_bounds,
            "margin_bound": self.margin_bounds,
            "asr": self.empirical_asr or [float("nan")] * len(self.tsi),
        })


# =============================================================================
# Gap geometry
# =============================================================================

def effect_vector(model: Classifier, dataset: Dataset, trigger: np.ndarray) -> np.ndarray:
    """Mean over the dataset of phi(x + T) - phi(x), with x + T clamped."""
    if len(dataset) == 0:
        raise DatasetError("effect vector needs a nonempty dataset")
    trigger = np.asarray(trigger, dtype=np.float32)
    if trigger.shape != dataset.image_shape:
        raise ShapeError("effect_vector", "trigger must match the image shape", trigger.shape + dataset.image_shape)
    clean = model.feature_array(dataset.flat()).astype(np.float64)
    poisoned = model.feature_array(apply_trigger(dataset.images, trigger).reshape(len(dataset), -1))
    return (poisoned.astype(np.float64) - clean).mean(axis=0)


def logit_gaps(weights: np.ndarray, v: np.ndarray, target: int) -> GapProfile:
    """Delta_{y',k} = (w_y' - w_k) . v for every k != y'; weights is (K, d)."""
    weights = np.asarray(weights, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if weights.ndim != 2 or weights.shape[1] != v.shape[0]:
        raise ShapeError("logit_gaps", "weights must be (K, d) with d = len(v)", weights.shape + v.shape)
    k = weights.shape[0]
    if not 0 <= target < k:
        raise ValueError(f"target {target} outside [0, {k})")
    logits = weights @ v
    gaps = logits[target] - np.delete(logits, target)
    return GapProfile(int(target), tuple(float(g) for g in gaps))


def tsi(profile: GapProfile, eps: float = TSI_EPS) -> float:
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    return profile.mean / (profile.std + eps)


def fdr_pairwise(triggered: np.ndarray, clean: np.ndarray) -> float:
    """1-D Fisher ratio (mean_t - mean_c)^2 / (var_t + var_c); 0 or inf when both variances vanish."""
    triggered = np.asarray(triggered, dtype=np.float64).reshape(-1)
    clean = np.asarray(clean, dtype=np.float64).reshape(-1)
    if triggered.size < 2 or clean.size < 2:
        raise ValueError("Fisher ratio needs at least two samples on each side")
    numerator = (triggered.mean() - clean.mean()) ** 2
    denominator = triggered.var() + clean.var()
    if denominator == 0:
        return 0.0 if numerator == 0 else math.inf
    return float(numerator / denominator)


def pairwise_fdr_table(model: Classifier, dataset: Dataset, trigger: np.ndarray, target: int) -> pd.DataFrame:
    """Fisher ratio of triggered vs clean projections onto w_y' - w_k, one row per competitor k."""
    weights = model.last_layer_weight.astype(np.float64)
    clean = model.feature_array(dataset.flat()).astype(np.float64)
    poisoned = model.feature_array(apply_trigger(dataset.images, trigger).reshape(len(dataset), -1)).astype(np.float64)
    rows = []
    for k in range(weights.shape[0]):
        if k == target:
            continue
        direction = weights[target] - weights[k]
        rows.append({"target": target, "competitor": k,
                     "fdr": fdr_pairwise(poisoned @ direction, clean @ direction)})
    return pd.DataFrame(rows, columns=["target", "competitor", "fdr"])


# =============================================================================
# Bounds
# =============================================================================

def _check_classes(k: int) -> None:
    if k < 2:
        raise ValueError(f"need K >= 2 classes, got {k}")


def proposition_bound(tsi_value: float, k: int) -> float:
    """max(0, 1 - (K-1) exp(-tsi^2 / 2)); vacuous (0) for non-positive TSI."""
    _check_classes(k)
    if tsi_value <= 0:
        return 0.0
    return max(0.0, 1.0 - (k - 1) * math.exp(-tsi_value * tsi_value / 2.0))


def corollary_threshold(k: int, delta: float) -> float:
    """TSI needed for the proposition bound to reach 1 - delta."""
    _check_classes(k)
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return math.sqrt(2.0 * math.log((k - 1) / delta))


def expected_margin_bound(mu: float, sigma: float, k: int) -> float:
    """mu - sigma sqrt(2 ln(K-1)); equals mu for K = 2."""
    _check_classes(k)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    return mu - sigma * math.sqrt(2.0 * math.log(k - 1))


def margin_slack(profile: GapProfile, k: int) -> float:
    """Observed min gap minus the i.i.d. margin bound. Real gaps are correlated, so this is reported only."""
    if not profile.gaps:
        return 0.0
    return min(profile.gaps) - expected_margin_bound(profile.mean, profile.std, k)


@dataclass(frozen=True)
class MonteCarloResult:
    mu: float
    sigma: float
    k: int
    trials: int
    distribution: str
    success: float
    success_se: float
    mean_min_gap: float
    min_gap_se: float

    @property
    def proposition_bound(self) -> float:
        ratio = self.mu / self.sigma if self.sigma > 0 else (math.inf if self.mu > 0 else 0.0)
        return proposition_bound(ratio, self.k) if math.isfinite(ratio) else 1.0

    @property
    def margin_bound(self) -> float:
        return expected_margin_bound(self.mu, self.sigma, self.k)

    def bounds_hold(self, tolerance_se: float = 3.0) -> bool:
        return (self.success >= self.proposition_bound - tolerance_se * self.success_se
                and self.mean_min_gap >= self.margin_bound - tolerance_se * self.min_gap_se)


def monte_carlo_verify(mu: float, sigma: float, k: int, trials: int = 100_000, seed: int = 0,
                       distribution: str = "gaussian") -> MonteCarloResult:
    """
    Draws K-1 i.i.d. gaps per trial and estimates P(all gaps > 0) and E[min gap].

    Trials are generated in fixed-size chunks from one seeded generator, so the
    result depends only on the arguments. The Laplace option keeps mean mu and
    variance sigma^2.
    """
    _check_classes(k)
    if trials < MIN_TRIALS:
        raise ValueError(f"need at least {MIN_TRIALS} trials, got {trials}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if distribution not in GAP_DISTRIBUTIONS:
        raise ValueError(f"unknown gap distribution '{distribution}', expected one of {GAP_DISTRIBUTIONS}")

    rng = np.random.default_rng(seed)
    hits = 0
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < trials:
        n = min(MC_CHUNK, trials - done)
        if distribution == "gaussian":
            gaps = rng.normal(mu, sigma, size=(n, k - 1))
        else:
            gaps = rng.laplace(mu, sigma / math.sqrt(2.0), size=(n, k - 1))
        minima = gaps.min(axis=1)
        hits += int(np.count_nonzero(minima > 0))
        total += float(minima.sum())
        total_sq += float((minima * minima).sum())
        done += n

    success = hits / trials
    mean_min = total / trials
    var_min = max(total_sq / trials - mean_min * mean_min, 0.0)
    return MonteCarloResult(
        mu=float(mu), sigma=float(sigma), k=int(k), trials=int(trials), distribution=distribution,
        success=success,
        success_se=math.sqrt(success * (1.0 - success) / trials),
        mean_min_gap=mean_min,
        min_gap_se=math.sqrt(var_min / trials),
    )


def bound_grid(ratios: Iterable[float] = (0.5, 1.0, 2.0, 3.0, 4.0),
               class_counts: Iterable[int] = (2, 11, 101), sigma: float = 1.0) -> List[Tuple[float, float, int]]:
    """(mu, sigma, K) grid points with mu = ratio * sigma."""
    return [(r * sigma, sigma, int(k)) for r in ratios for k in class_counts]


def bound_sweep(grid: Sequence[Tuple[float, float, int]], trials: int = 100_000, seed: int = 0,
                distribution: str = "gaussian") -> pd.DataFrame:
    """One row per grid point: bounds, Monte Carlo estimates, standard errors and a violation flag."""
    if not grid:
        raise ValueError("bound grid is empty")
    rows = []
    for i, (mu, sigma, k) in enumerate(grid):
        result = monte_carlo_verify(mu, sigma, k, trials, seed + i, distribution)
        rows.append({
            "mu": mu, "sigma": sigma, "K": k,
            "bound": result.proposition_bound, "empirical": result.success, "SE": result.success_se,
            "margin_bound": result.margin_bound, "empirical_margin": result.mean_min_gap,
            "margin_SE": result.min_gap_se, "violated": not result.bounds_hold(),
        })
    frame = pd.DataFrame(rows)
    logger.info("bound sweep: %d grid points, %d violations", len(frame), int(frame["violated"].sum()))
    return frame


# =============================================================================
# Reports
# =============================================================================

def tsi_asr_correlation(tsi_values: Sequence[float], asr_values: Sequence[float]) -> float:
    """Spearman rank correlation; NaN when either side is constant."""
    if len(tsi_values) != len(asr_values):
        raise ShapeError("tsi_asr_correlation", "one ASR per TSI value required", (len(tsi_values), len(asr_values)))
    if len(tsi_values) < 2 or np.ptp(tsi_values) == 0 or np.ptp(asr_values) == 0:
        return float("nan")
    return float(spearmanr(tsi_values, asr_values).correlation)


def separability_report(model: Classifier, dataset: Dataset, triggers: np.ndarray,
                        empirical_asr: Optional[Sequence[float]] = None, eps: float = TSI_EPS,
                        deltas: Sequence[float] = (0.01, 0.05, 0.1)) -> SeparabilityReport:
    """Effect vectors, gap profiles, TSI and bounds for every target class."""
    triggers = np.asarray(triggers, dtype=np.float32)
    weights = model.last_layer_weight.astype(np.float64)
    k = weights.shape[0]
    vectors, profiles, scores = [], [], []
    for target in range(triggers.shape[0]):
        v = effect_vector(model, dataset, triggers[target])
        profile = logit_gaps(weights, v, target)
        vectors.append(v.tolist())
        profiles.append(profile)
        scores.append(tsi(profile, eps))

    asr = [float(a) for a in empirical_asr] if empirical_asr is not None else []
    report = SeparabilityReport(
        eps=eps,
        effect_vectors=vectors,
        profiles=profiles,
        tsi=scores,
        proposition_bounds=[proposition_bound(s, k) for s in scores],
        corollary_thresholds={str(d): corollary_threshold(k, d) for d in deltas},
        margin_bounds=[expected_margin_bound(p.mean, p.std, k) for p in profiles],
        margin_slack=[margin_slack(p, k) for p in profiles],
        empirical_asr=asr,
        spearman=tsi_asr_correlation(scores, asr) if asr else None,
    )
    logger.info("mean TSI %.4f over %d classes", float(np.mean(scores)), len(scores))
    return report
