"""
Backdoor removal and detection baselines: fine-tuning, fine-pruning and STRIP.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np
from scipy.stats import entropy
from sklearn.metrics import roc_auc_score

from engines.autodiff_engine import softmax
from engines.data_engine import Dataset, apply_trigger
from engines.errors import DatasetError
from engines.victim_engine import Classifier, attack_success_rate, benign_accuracy, fit_classifier

logger = logging.getLogger(__name__)

FINE_TUNE_LR = 0.01
BA_DROP_TOLERANCE = 0.02


@dataclass
class DefenseResult:
    name: str
    ba_before: float
    ba_after: float
    asr_before: float
    asr_after: float
    flagged: bool

    @property
    def delta_ba(self) -> float:
        return self.ba_after - self.ba_before

    @property
    def delta_asr(self) -> float:
        return self.asr_after - self.asr_before

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out.update(delta_ba=self.delta_ba, delta_asr=self.delta_asr)
        return out


@dataclass
class StripResult:
    entropies: np.ndarray
    is_poisoned: Optional[np.ndarray]
    auroc: float

    def to_dict(self) -> Dict[str, object]:
        return {
            "auroc": self.auroc,
            "mean_entropy_clean": _masked_mean(self.entropies, self.is_poisoned, False),
            "mean_entropy_poisoned": _masked_mean(self.entropies, self.is_poisoned, True),
        }


def _masked_mean(values: np.ndarray, mask: Optional[np.ndarray], flag: bool) -> float:
    if mask is None:
        return float(values.mean()) if not flag else float("nan")
    chosen = values[mask == flag]
    return float(chosen.mean()) if chosen.size else float("nan")


def fine_tune_defense(model: Classifier, clean_subset: Dataset, epochs: int, seed: int = 0,
                      lr: float = FINE_TUNE_LR, batch_size: int = 32) -> Classifier:
    """Continues SGD on the clean subset only; the input model is left untouched."""
    tuned = model.copy()
    if epochs > 0:
        fit_classifier(tuned, clean_subset, epochs, lr, batch_size, np.random.default_rng(seed), decay=False)
    return tuned


def fine_prune_defense(model: Classifier, clean_subset: Dataset, prune_fraction: float,
                       seed: int = 0, lr: float = FINE_TUNE_LR, batch_size: int = 32) -> Classifier:
    """
    Zeroes the penultimate units with the lowest mean clean activation, then
    fine-tunes for one epoch.
    """
    if not 0.0 <= prune_fraction < 1.0:
        raise ValueError(f"prune fraction must be in [0, 1), got {prune_fraction}")
    if len(clean_subset) == 0:
        raise DatasetError("fine-pruning needs a nonempty clean subset")
    pruned = model.copy()
    activations = pruned.feature_array(clean_subset.flat()).mean(axis=0)
    count = int(np.floor(prune_fraction * pruned.feature_dim))
    order = np.argsort(activations, kind="stable")[:count]
    mask = pruned.unit_mask.copy()
    mask[order] = 0.0
    pruned.unit_mask = mask
    logger.info("fine-pruning removed %d of %d penultimate units", count, pruned.feature_dim)
    return fine_tune_defense(pruned, clean_subset, 1, seed=seed, lr=lr, batch_size=batch_size)


def defense_report(name: str, before: Classifier, after: Classifier, test: Dataset,
                   triggers: np.ndarray, ba_tolerance: float = BA_DROP_TOLERANCE) -> DefenseResult:
    """Mean ASR and BA before/after a defense; flags BA drops beyond the tolerance."""
    ba_before = benign_accuracy(before, test)
    ba_after = benign_accuracy(after, test)
    result = DefenseResult(
        name=name,
        ba_before=ba_before,
        ba_after=ba_after,
        asr_before=attack_success_rate(before, test, triggers)["mean"],
        asr_after=attack_success_rate(after, test, triggers)["mean"],
        flagged=ba_before - ba_after > ba_tolerance,
    )
    if result.flagged:
        logger.warning("%s dropped benign accuracy by %.4f (tolerance %.4f)", name, -result.delta_ba, ba_tolerance)
    return result


def strip_entropy(model: Classifier, inputs: np.ndarray, clean_pool: np.ndarray,
                  n_blends: int, rng: np.random.Generator) -> np.ndarray:
    """Mean prediction entropy over `n_blends` 50/50 blends of each input with random pool images."""
    inputs = np.asarray(inputs, dtype=np.float32)
    pool = np.asarray(clean_pool, dtype=np.float32)
    scores = np.zeros(inputs.shape[0])
    for i, x in enumerate(inputs):
        partners = pool[rng.integers(0, pool.shape[0], size=n_blends)]
        blends = 0.5 * x[None] + 0.5 * partners
        probs = softmax(model.logit_array(blends.reshape(n_blends, -1)))
        scores[i] = entropy(probs, axis=1).mean()
    return scores


def strip_detect(model: Classifier, inputs: np.ndarray, clean_pool: np.ndarray, n_blends: int,
                 is_poisoned: Optional[np.ndarray] = None, seed: int = 0) -> StripResult:
    """
    STRIP scores; AUROC treats low entropy as evidence of poisoning. AUROC is NaN
    when ground truth is missing or one-sided.
    """
    if n_blends < 2:
        raise ValueError(f"STRIP needs at least 2 blends per input, got {n_blends}")
    if len(clean_pool) == 0:
        raise DatasetError("STRIP clean pool is empty")
    scores = strip_entropy(model, inputs, clean_pool, n_blends, np.random.default_rng(seed))
    auroc = float("nan")
    if is_poisoned is not None:
        is_poisoned = np.asarray(is_poisoned, dtype=bool)
        if 0 < is_poisoned.sum() < is_poisoned.size:
            auroc = float(roc_auc_score(is_poisoned, -scores))
    return StripResult(scores, is_poisoned, auroc)


def strip_evaluation(model: Classifier, test: Dataset, clean_pool: Dataset, triggers: np.ndarray,
                     n_inputs: int, n_blends: int, seed: int = 0) -> StripResult:
    """Scores `n_inputs` clean test images against as many triggered ones (random targets)."""
    rng = np.random.default_rng(seed)
    n_inputs = min(n_inputs, len(test))
    clean_idx = rng.choice(len(test), size=n_inputs, replace=False)
    poison_idx = rng.choice(len(test), size=n_inputs, replace=False)
    targets = rng.integers(0, triggers.shape[0], size=n_inputs)
    poisoned = np.stack([apply_trigger(test.images[i], triggers[t]) for i, t in zip(poison_idx, targets)])
    inputs = np.concatenate([test.images[clean_idx], poisoned])
    labels = np.concatenate([np.zeros(n_inputs, dtype=bool), np.ones(n_inputs, dtype=bool)])
    return strip_detect(model, inputs, clean_pool.images, n_blends, labels, seed=seed + 1)
