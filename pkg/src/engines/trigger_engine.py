"""
GCN trigger generator and its training loop.

The generator propagates the binary class codes over the normalized class graph
(two ReLU graph-convolution layers) and maps every node to an image-shaped
trigger bounded by alpha * tanh(.). Training minimises

    (1 - beta) * mean_pairs(max(0, p - PSNR)) + beta * mean_pairs(CE(f(X + T_y'), y'))

over sampled (image, target) pairs with the surrogate frozen.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from engines.autodiff_engine import (
    SGD, Tensor, add, clamp, log, matmul, mean_squared_error, no_grad, reduce_mean,
    relu, reset_tape, reshape, scale, shift, softmax_cross_entropy, take_rows, tanh,
    uniform_init, zeros_param,
)
from engines.data_engine import Dataset
from engines.errors import NonFiniteError, ShapeError
from engines.graph_engine import ClassGraph
from engines.latent_engine import BinaryCodeSet
from engines.victim_engine import Classifier, stealth_metrics, step_decay_lr

logger = logging.getLogger(__name__)

TRIGGER_METHODS = ("gcn", "code_blend")
MSE_FLOOR = 1e-10
_DB_PER_NEPER = 10.0 / math.log(10.0)

ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass
class GcnParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w_out: Tensor
    b_out: Tensor
    image_shape: Tuple[int, int, int]
    alpha: float = 0.2

    NAMES = ("w1", "b1", "w2", "b2", "w_out", "b_out")

    @property
    def code_length(self) -> int:
        return int(self.w1.shape[0])

    def tensors(self) -> List[Tensor]:
        return [getattr(self, name) for name in self.NAMES]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: getattr(self, name).data.copy() for name in self.NAMES}
        state["alpha"] = np.array([self.alpha], dtype=np.float32)
        state["image_shape"] = np.array(self.image_shape, dtype=np.float32)
        return state

    @classmethod
    def from_state(cls, state: Dict[str, np.ndarray]) -> "GcnParams":
        tensors = {name: Tensor(state[name], requires_grad=True, name=name) for name in cls.NAMES}
        shape = tuple(int(s) for s in state["image_shape"])
        return cls(image_shape=shape, alpha=float(state["alpha"][0]), **tensors)


def init_gcn_params(code_length: int, image_shape: Sequence[int], rng: np.random.Generator,
                    hidden: Sequence[int] = (64, 64), alpha: float = 0.2) -> GcnParams:
    """Glorot-uniform weights, zero biases."""
    h1, h2 = hidden
    out = int(np.prod(image_shape))

    def glorot(shape, name):
        return uniform_init(rng, shape, math.sqrt(6.0 / (shape[0] + shape[1])), name)

    return GcnParams(
        w1=glorot((code_length, h1), "w1"), b1=zeros_param((h1,), "b1"),
        w2=glorot((h1, h2), "w2"), b2=zeros_param((h2,), "b2"),
        w_out=glorot((h2, out), "w_out"), b_out=zeros_param((out,), "b_out"),
        image_shape=tuple(int(s) for s in image_shape), alpha=alpha,
    )


def calibrate_gcn_init(graph: ClassGraph, params: GcnParams, target_rms: float) -> GcnParams:
    """
    Data-dependent start for the generator, in place. Each hidden unit's
    pre-activation is centred and scaled to unit spread across the graph nodes,
    so related classes start with related but not identical embeddings, then
    the output weights are scaled so the initial triggers have RMS `target_rms`.
    """
    if not 0.0 < target_rms < params.alpha:
        raise ValueError(f"target trigger RMS must be in (0, {params.alpha}), got {target_rms}")
    adjacency, features = graph.adjacency, graph.features
    if features.shape[1] != params.code_length:
        raise ShapeError("calibrate_gcn_init", "graph node features do not match layer-1 width",
                         (features.shape[1], params.code_length))

    def standardize(pre: np.ndarray, weight: Tensor, bias: Tensor) -> None:
        spread = pre.std(axis=0)
        gain = np.where(spread > 1e-8, 1.0 / np.maximum(spread, 1e-8), 1.0)
        weight.data[...] = weight.data * gain
        bias.data[...] = -pre.mean(axis=0) * gain

    propagated = adjacency @ features
    standardize(propagated @ params.w1.data, params.w1, params.b1)
    h1 = np.maximum(propagated @ params.w1.data + params.b1.data, 0.0)
    standardize(adjacency @ (h1 @ params.w2.data), params.w2, params.b2)
    h2 = np.maximum(adjacency @ (h1 @ params.w2.data) + params.b2.data, 0.0)

    params.b_out.data[...] = 0.0
    rms = float(np.sqrt(np.mean((h2 @ params.w_out.data) ** 2)))
    if rms > 0:
        params.w_out.data[...] = params.w_out.data * (math.atanh(target_rms / params.alpha) / rms)
    return params


@dataclass(frozen=True, eq=False)
class TriggerSet:
    """One trigger per target class, (K, C, H, W), plus the loss curve that produced it."""
    triggers: np.ndarray
    method: str = "gcn"
    history: Tuple[Dict[str, float], ...] = ()

    def __post_init__(self):
        triggers = np.asarray(self.triggers, dtype=np.float32)
        if triggers.ndim != 4:
            raise ShapeError("trigger_set", "triggers must be (K, C, H, W)", triggers.shape)
        if not np.all(np.isfinite(triggers)):
            raise NonFiniteError("trigger_set")
        object.__setattr__(self, "triggers", triggers)

    @property
    def class_count(self) -> int:
        return int(self.triggers.shape[0])

    def __getitem__(self, target: int) -> np.ndarray:
        return self.triggers[target]

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(list(self.history), columns=["epoch", "mean_stealth", "mean_attack", "mean_total"])


@dataclass(frozen=True)
class TriggerTrainConfig:
    beta: float = 0.01
    psnr_threshold: float = 30.0
    lr: float = 0.05
    epochs: int = 200
    batch_size: int = 32
    targets_per_step: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden: Tuple[int, int] = (64, 64)
    alpha: float = 0.2
    grad_norm: Optional[float] = 1.0
    init_margin_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.psnr_threshold <= 0:
            raise ValueError(f"PSNR threshold must be > 0, got {self.psnr_threshold}")
        if self.epochs < 0 or self.batch_size < 1 or self.targets_per_step < 1:
            raise ValueError("epochs must be >= 0, batch size and targets per step >= 1")
        if self.alpha <= 0:
            raise ValueError(f"output scale alpha must be > 0, got {self.alpha}")
        if self.grad_norm is not None and self.grad_norm <= 0:
            raise ValueError(f"gradient norm must be > 0, got {self.grad_norm}")
        if self.init_margin_db < 0:
            raise ValueError(f"initial PSNR margin must be >= 0, got {self.init_margin_db}")

    @property
    def initial_rms(self) -> float:
        """Trigger RMS whose PSNR sits `init_margin_db` above the threshold."""
        return 10.0 ** (-(self.psnr_threshold + self.init_margin_db) / 20.0)


# =============================================================================
# Generator
# =============================================================================

def _generator_output(graph: ClassGraph, params: GcnParams) -> Tensor:
    if graph.features.shape[1] != params.code_length:
        raise ShapeError("gcn_forward", "graph node features do not match layer-1 width",
                         (graph.features.shape[1], params.code_length))
    adjacency = Tensor(graph.adjacency)
    propagated = Tensor(graph.adjacency @ graph.features)
    h1 = relu(add(matmul(propagated, params.w1), params.b1))
    h2 = relu(add(matmul(adjacency, matmul(h1, params.w2)), params.b2))
    return scale(tanh(add(matmul(h2, params.w_out), params.b_out)), params.alpha)


def gcn_forward(graph: ClassGraph, params: GcnParams) -> TriggerSet:
    """
    H1 = relu(A X W1 + b1); H2 = relu(A H1 W2 + b2); T = alpha * tanh(H2 W_out + b_out).

    Deterministic in (graph, params); values lie in [-alpha, alpha].
    """
    with no_grad():
        out = _generator_output(graph, params)
    return TriggerSet(out.data.reshape((graph.node_count,) + params.image_shape))


# =============================================================================
# Losses
# =============================================================================

def _as_rows(x: ArrayOrTensor) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim == 2:
        return x
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def psnr_tensor(x_poison: ArrayOrTensor, x: ArrayOrTensor) -> Tensor:
    """Per-image PSNR in dB (MAX = 1) with the MSE floored so identical images read 100 dB."""
    a, b = _as_rows(x_poison), _as_rows(x)
    if a.shape != b.shape:
        raise ShapeError("psnr", "poisoned and clean batches differ in shape", a.shape + b.shape)
    mse = clamp(mean_squared_error(a, b, axis=1), low=MSE_FLOOR)
    return scale(log(mse), -_DB_PER_NEPER)


def stealth_loss(x_poison: ArrayOrTensor, x: ArrayOrTensor, p: float) -> Tensor:
    """Mean over images of max(0, p - PSNR)."""
    return reduce_mean(relu(shift(scale(psnr_tensor(x_poison, x), -1.0), p)))


def attack_loss(surrogate: Classifier, x_poison: ArrayOrTensor, targets: Union[int, Sequence[int]]) -> Tensor:
    """Mean cross-entropy of the surrogate's prediction on poisoned images against the targets."""
    rows = _as_rows(x_poison)
    targets = np.broadcast_to(np.asarray(targets, dtype=np.int64), (rows.shape[0],))
    if targets.size and (targets.min() < 0 or targets.max() >= surrogate.class_count):
        raise ValueError(f"target class outside [0, {surrogate.class_count})")
    return softmax_cross_entropy(surrogate.logits(rows), targets)


def total_loss(stealth: Union[Tensor, float], attack: Union[Tensor, float], beta: float):
    """(1 - beta) * stealth + beta * attack."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if isinstance(stealth, Tensor):
        return add(scale(stealth, 1.0 - beta), scale(attack, beta))
    return (1.0 - beta) * float(stealth) + beta * float(attack)


# =============================================================================
# Training
# =============================================================================

def train_triggers(dataset: Dataset, graph: ClassGraph, surrogate: Classifier,
                   config: TriggerTrainConfig,
                   params: Optional[GcnParams] = None) -> TriggerSet:
    """
    Optimises the generator for a fixed epoch budget.

    Each step draws `batch_size` images and `targets_per_step` distinct target
    classes, poisons every (image, target) pair with the freshly generated
    trigger, averages the per-pair total loss and updates only the generator.
    An epoch is one shuffled pass over `dataset`. A fresh generator starts from
    calibrate_gcn_init, inside the PSNR budget. Steps use normalized gradients
    (`config.grad_norm`) so the small attack weight still moves the generator
    inside the budget, and the learning rate drops tenfold at 1/3 and 2/3 of
    the epochs.

    Returns:
        Final generator output, with one history row per epoch
    """
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_gcn_params(graph.features.shape[1], dataset.image_shape, rng,
                                 config.hidden, config.alpha)
        calibrate_gcn_init(graph, params, min(config.initial_rms, 0.5 * config.alpha))
    if graph.node_count != dataset.class_count:
        raise ShapeError("train_triggers", "graph must have one node per class",
                         (graph.node_count, dataset.class_count))

    images = dataset.flat()
    k = graph.node_count
    m = min(config.targets_per_step, k)
    optimizer = SGD(params.tensors(), lr=config.lr, momentum=config.momentum,
                    weight_decay=config.weight_decay, grad_norm=config.grad_norm)
    frozen_flags = [p.requires_grad for p in surrogate.parameters()]
    surrogate.requires_grad_(False)
    history: List[Dict[str, float]] = []
    try:
        for epoch in tqdm(range(config.epochs), desc="train triggers", disable=None, leave=False):
            optimizer.lr = step_decay_lr(config.lr, epoch, config.epochs)
            order = rng.permutation(len(dataset))
            sums = np.zeros(3)
            steps = 0
            for start in range(0, len(order), config.batch_size):
                batch = images[order[start:start + config.batch_size]]
                targets = np.sort(rng.choice(k, size=m, replace=False))
                pair_targets = np.tile(targets, batch.shape[0])
                clean = Tensor(np.repeat(batch, m, axis=0))

                reset_tape()
                triggers = _generator_output(graph, params)
                poisoned = clamp(add(clean, take_rows(triggers, pair_targets)), 0.0, 1.0)
                stealth = stealth_loss(poisoned, clean, config.psnr_threshold)
                attack = attack_loss(surrogate, poisoned, pair_targets)
                loss = total_loss(stealth, attack, config.beta)
                optimizer.step(loss)

                sums += (stealth.item(), attack.item(), loss.item())
                steps += 1
            mean_stealth, mean_attack, mean_total = sums / max(steps, 1)
            history.append({"epoch": epoch, "mean_stealth": mean_stealth,
                            "mean_attack": mean_attack, "mean_total": mean_total})
            logger.debug("trigger epoch %d stealth %.4f attack %.4f total %.4f",
                         epoch, mean_stealth, mean_attack, mean_total)
    except NonFiniteError:
        reset_tape()
        logger.error("trigger training produced a non-finite loss at epoch %d", len(history))
        raise
    finally:
        for p, flag in zip(surrogate.parameters(), frozen_flags):
            p.requires_grad = flag

    result = gcn_forward(graph, params)
    if history:
        logger.info("trigger training done: stealth %.4f attack %.4f after %d epochs",
                    history[-1]["mean_stealth"], history[-1]["mean_attack"], len(history))
    return TriggerSet(result.triggers, "gcn", tuple(history))


# =============================================================================
# Baseline and reference triggers
# =============================================================================

def code_blend_triggers(codes: Union[BinaryCodeSet, np.ndarray], image_shape: Sequence[int],
                        p: float, seed: int) -> TriggerSet:
    """
    Code-mapped baseline: every code bit owns a fixed random +/-1 pattern and a
    class trigger is the sign of its bit-signed pattern sum, scaled to amplitude
    10 ** (-p / 20) so the unclamped PSNR equals p exactly.
    """
    bits = np.asarray(codes.codes if isinstance(codes, BinaryCodeSet) else codes, dtype=np.float64)
    rng = np.random.default_rng(seed)
    size = int(np.prod(image_shape))
    patterns = rng.choice([-1.0, 1.0], size=(bits.shape[1], size))
    summed = (2.0 * bits - 1.0) @ patterns
    signs = np.where(summed >= 0, 1.0, -1.0)
    amplitude = 10.0 ** (-p / 20.0)
    return TriggerSet((amplitude * signs).reshape((bits.shape[0],) + tuple(image_shape)), "code_blend")


def patch_triggers(class_count: int, image_shape: Sequence[int], patch: int = 4,
                   intensity: float = 1.0, seed: int = 0) -> TriggerSet:
    """Visible random black/white patch in the bottom-right corner, one pattern per class."""
    c, h, w = image_shape
    if not 0 < patch <= min(h, w):
        raise ValueError(f"patch size must be in (0, {min(h, w)}], got {patch}")
    rng = np.random.default_rng(seed)
    triggers = np.zeros((class_count, c, h, w), dtype=np.float32)
    triggers[:, :, h - patch:, w - patch:] = intensity * rng.choice([-1.0, 1.0], size=(class_count, c, patch, patch))
    return TriggerSet(triggers, "patch")


def trigger_quality(images: np.ndarray, triggers: Union[TriggerSet, np.ndarray],
                    p: Optional[float] = None) -> Dict[str, float]:
    """
    Mean/min PSNR and mean SSIM of triggered probes. With `p`, also reports
    whether the mean PSNR reached p - 0.5 dB; a miss is logged, never raised.
    """
    triggers = triggers.triggers if isinstance(triggers, TriggerSet) else np.asarray(triggers)
    quality = stealth_metrics(images, triggers)
    if p is not None:
        quality["meets_threshold"] = float(quality["mean_psnr"] >= p - 0.5)
        if not quality["meets_threshold"]:
            logger.warning("mean trigger PSNR %.2f dB is below the %.1f dB target", quality["mean_psnr"], p)
    return quality
