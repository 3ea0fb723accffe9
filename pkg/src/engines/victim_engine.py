"""
Image classifiers (surrogate and victim), their SGD training loop, and the
evaluation metrics: benign accuracy, per-class attack success rate, PSNR, SSIM.
"""
import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from engines.autodiff_engine import (
    SGD, Tensor, add, conv2d, matmul, mul, no_grad, relu, reset_tape, reshape, shift,
    softmax_cross_entropy, transpose, uniform_init, zeros_param,
)
from engines.data_engine import Dataset, apply_trigger
from engines.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "mlp-wide", "cnn")
PSNR_CAP_DB = 100.0
INPUT_CENTER = 0.5
EVAL_BATCH = 512


@dataclass(frozen=True)
class TrainHyper:
    """
    Classifier training hyperparameters.

    Learning rate is divided by 10 at 1/3 and 2/3 of the epoch budget.
    """
    arch: str = "mlp"
    hidden: int = 128
    feature_dim: int = 64
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture '{self.arch}', expected one of {ARCHITECTURES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")


class Classifier:
    """
    Feature extractor phi followed by a strictly linear last layer.

    The last layer is stored as `head_w` (d x K) and `head_b` (K); `last_layer_weight`
    exposes W = [w_1 .. w_K]^T with shape (K, d). `unit_mask` multiplies phi and is
    how fine-pruning disables penultimate units.
    """

    def __init__(self, arch: str, image_shape: Sequence[int], class_count: int,
                 params: Dict[str, Tensor]):
        self.arch = arch
        self.image_shape = tuple(int(s) for s in image_shape)
        self.class_count = int(class_count)
        self.params = params
        self.unit_mask = np.ones(self.feature_dim, dtype=np.float32)

    @property
    def feature_dim(self) -> int:
        return int(self.params["head_w"].shape[0])

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def last_layer_weight(self) -> np.ndarray:
        return self.params["head_w"].data.T.copy()

    @property
    def last_layer_bias(self) -> np.ndarray:
        return self.params["head_b"].data.copy()

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool) -> "Classifier":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def features(self, x: Tensor) -> Tensor:
        """Penultimate activations phi(x) for (N, D) or (N, C, H, W) input, centred at mid-grey."""
        n = x.shape[0]
        p = self.params
        x = shift(x, -INPUT_CENTER)
        if self.arch == "cnn":
            if x.data.ndim != 4:
                x = reshape(x, (n,) + self.image_shape)
            h = _conv_block(x, p["conv1_w"], p["conv1_b"], stride=1)
            h = _conv_block(h, p["conv2_w"], p["conv2_b"], stride=2)
            h = reshape(h, (n, int(np.prod(h.shape[1:]))))
            phi = relu(add(matmul(h, p["fc_w"]), p["fc_b"]))
        else:
            if x.data.ndim != 2:
                x = reshape(x, (n, self.input_dim))
            if x.shape[1] != self.input_dim:
                raise ShapeError("classifier", "input width differs from image size", (x.shape[1], self.input_dim))
            h = relu(add(matmul(x, p["fc1_w"]), p["fc1_b"]))
            phi = relu(add(matmul(h, p["fc2_w"]), p["fc2_b"]))
        if not np.all(self.unit_mask == 1.0):
            phi = mul(phi, Tensor(np.broadcast_to(self.unit_mask, phi.shape)))
        return phi

    def head(self, phi: Tensor) -> Tensor:
        return add(matmul(phi, self.params["head_w"]), self.params["head_b"])

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def _batched(self, images: np.ndarray, fn, width: int) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.shape[0] == 0:
            return np.zeros((0, width), dtype=np.float32)
        out = []
        with no_grad():
            for start in range(0, images.shape[0], EVAL_BATCH):
                out.append(fn(Tensor(images[start:start + EVAL_BATCH])).data)
        return np.concatenate(out, axis=0)

    def feature_array(self, images: np.ndarray) -> np.ndarray:
        return self._batched(images, self.features, self.feature_dim)

    def logit_array(self, images: np.ndarray) -> np.ndarray:
        return self._batched(images, self.logits, self.class_count)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Argmax labels; equal logits resolve to the lowest class index."""
        return np.argmax(self.logit_array(images), axis=1)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        state["unit_mask"] = self.unit_mask.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> "Classifier":
        for name, p in self.params.items():
            if state[name].shape != p.shape:
                raise ShapeError("load_state_dict", f"shape mismatch for {name}", p.shape + state[name].shape)
            p.data[...] = state[name]
        if "unit_mask" in state:
            self.unit_mask = np.asarray(state["unit_mask"], dtype=np.float32).copy()
        return self

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)


def _conv_block(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    # channels-last for the bias add, then back to (N, F, H, W)
    h = transpose(conv2d(x, w, stride=stride, padding=1), (0, 2, 3, 1))
    return relu(transpose(add(h, b), (0, 3, 1, 2)))


def build_classifier(arch: str, image_shape: Sequence[int], class_count: int,
                     hidden: int, feature_dim: int, rng: np.random.Generator) -> Classifier:
    """Randomly initialised classifier (He-uniform hidden layers)."""
    c, h, w = image_shape
    if arch == "mlp-wide":
        hidden, feature_dim = 2 * hidden, 2 * feature_dim

    def he(shape, fan_in, name):
        return uniform_init(rng, shape, np.sqrt(6.0 / fan_in), name)

    params: Dict[str, Tensor] = {}
    if arch == "cnn":
        params["conv1_w"] = he((8, c, 3, 3), c * 9, "conv1_w")
        params["conv1_b"] = zeros_param((8,), "conv1_b")
        params["conv2_w"] = he((16, 8, 3, 3), 8 * 9, "conv2_w")
        params["conv2_b"] = zeros_param((16,), "conv2_b")
        flat = 16 * ((h + 1) // 2) * ((w + 1) // 2)
        params["fc_w"] = he((flat, feature_dim), flat, "fc_w")
        params["fc_b"] = zeros_param((feature_dim,), "fc_b")
    else:
        d = c * h * w
        params["fc1_w"] = he((d, hidden), d, "fc1_w")
        params["fc1_b"] = zeros_param((hidden,), "fc1_b")
        params["fc2_w"] = he((hidden, feature_dim), hidden, "fc2_w")
        params["fc2_b"] = zeros_param((feature_dim,), "fc2_b")
    params["head_w"] = uniform_init(rng, (feature_dim, class_count), 1.0 / np.sqrt(feature_dim), "head_w")
    params["head_b"] = zeros_param((class_count,), "head_b")
    return Classifier(arch, image_shape, class_count, params)


def step_decay_lr(base_lr: float, epoch: int, epochs: int) -> float:
    """Divide by 10 at 1/3 and 2/3 of the budget."""
    milestones = [epochs // 3, (2 * epochs) // 3] if epochs >= 3 else []
    drops = sum(1 for m in milestones if epoch >= m)
    return base_lr * (0.1 ** drops)


def fit_classifier(model: Classifier, dataset: Dataset, epochs: int, lr: float,
                   batch_size: int, rng: np.random.Generator, momentum: float = 0.9,
                   weight_decay: float = 1e-4, decay: bool = True) -> List[float]:
    """
    Runs SGD on `model` in place.

    Returns:
        Mean training loss per epoch
    """
    if epochs == 0 or len(dataset) == 0:
        return []
    optimizer = SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    images = dataset.flat()
    labels = dataset.labels
    history = []
    for epoch in tqdm(range(epochs), desc=f"train {model.arch}", disable=None, leave=False):
        optimizer.lr = step_decay_lr(lr, epoch, epochs) if decay else lr
        order = rng.permutation(len(dataset))
        total, batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            reset_tape()
            try:
                loss = softmax_cross_entropy(model.logits(Tensor(images[idx])), labels[idx])
                optimizer.step(loss)
            except NonFiniteError:
                reset_tape()
                logger.error("classifier training diverged at epoch %d (lr=%.4g)", epoch, optimizer.lr)
                raise
            total += loss.item()
            batches += 1
        history.append(total / batches)
        logger.debug("epoch %d loss %.4f", epoch, history[-1])
    return history


def train_classifier(dataset: Dataset, hyper: TrainHyper, seed: int) -> Classifier:
    """Trains a fresh classifier; identical seed and data give identical parameters."""
    rng = np.random.default_rng(seed)
    model = build_classifier(hyper.arch, dataset.image_shape, dataset.class_count,
                             hyper.hidden, hyper.feature_dim, rng)
    history = fit_classifier(model, dataset, hyper.epochs, hyper.lr, hyper.batch_size, rng,
                             hyper.momentum, hyper.weight_decay)
    if history:
        logger.info("trained %s classifier for %d epochs, final loss %.4f", hyper.arch, hyper.epochs, history[-1])
    return model


def classifier_state(model: Classifier) -> Dict[str, np.ndarray]:
    return model.state_dict()


def load_classifier(state: Dict[str, np.ndarray], hyper: TrainHyper, image_shape: Sequence[int],
                    class_count: int) -> Classifier:
    model = build_classifier(hyper.arch, image_shape, class_count, hyper.hidden,
                             hyper.feature_dim, np.random.default_rng(0))
    return model.load_state_dict(state)


# =============================================================================
# Metrics
# =============================================================================

def benign_accuracy(model: Classifier, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("benign accuracy needs a nonempty test split")
    return float(np.mean(model.predict(test.flat()) == test.labels))


def attack_success_rate(model: Classifier, test: Dataset, triggers: np.ndarray,
                        targets: Optional[Sequence[int]] = None) -> Dict[str, object]:
    """
    ASR_y' = fraction of all clean test images classified as y' once T_y' is added.

    Returns:
        Dictionary containing:
            - targets: evaluated target classes
            - per_class: ASR per target (same order)
            - mean: arithmetic mean of per_class
    """
    triggers = np.asarray(triggers, dtype=np.float32)
    targets = list(range(triggers.shape[0])) if targets is None else [int(t) for t in targets]
    per_class = np.zeros(len(targets), dtype=np.float64)
    for i, target in enumerate(targets):
        poisoned = apply_trigger(test.images, triggers[target])
        per_class[i] = np.mean(model.predict(poisoned.reshape(len(test), -1)) == target)
    return {
        "targets": targets,
        "per_class": per_class,
        "mean": float(per_class.mean()) if len(targets) else 0.0,
    }


def psnr_batch(x: np.ndarray, y: np.ndarray, max_val: float = 1.0) -> np.ndarray:
    """Per-image PSNR in dB; identical images are capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError("psnr", "images must share a shape", x.shape + y.shape)
    mse = ((x - y) ** 2).reshape(x.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(max_val ** 2 / mse)
    return np.minimum(values, PSNR_CAP_DB)


def psnr(x: np.ndarray, y: np.ndarray, max_val: float = 1.0) -> float:
    return float(psnr_batch(np.asarray(x)[None], np.asarray(y)[None], max_val)[0])


def ssim_batch(x: np.ndarray, y: np.ndarray, window: int = 8, stride: int = 4,
               max_val: float = 1.0) -> np.ndarray:
    """
    Windowed SSIM per image of (N, C, H, W) batches.

    Uniform 8x8 windows at stride 4, population statistics, averaged over windows
    and channels. Images smaller than the window use one full-image window.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 4:
        raise ShapeError("ssim", "expected two (N, C, H, W) batches of equal shape", x.shape + y.shape)
    h, w = x.shape[2], x.shape[3]
    if h < window or w < window:
        wx, wy = x[:, :, None, None], y[:, :, None, None]
    else:
        wx = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        wy = sliding_window_view(y, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    axes = (-2, -1)
    mu_x, mu_y = wx.mean(axis=axes), wy.mean(axis=axes)
    var_x = (wx ** 2).mean(axis=axes) - mu_x ** 2
    var_y = (wy ** 2).mean(axis=axes) - mu_y ** 2
    cov = (wx * wy).mean(axis=axes) - mu_x * mu_y
    c1, c2 = (0.01 * max_val) ** 2, (0.03 * max_val) ** 2
    index = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return index.reshape(x.shape[0], -1).mean(axis=1)


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """SSIM of two (C, H, W) or (H, W) images."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim == 2:
        x, y = x[None], y[None]
    return float(ssim_batch(x[None], y[None])[0])


def stealth_metrics(images: np.ndarray, triggers: np.ndarray) -> Dict[str, float]:
    """PSNR/SSIM of every (image, trigger) poisoned pair against its clean image."""
    psnrs, ssims = [], []
    for trigger in np.asarray(triggers, dtype=np.float32):
        poisoned = apply_trigger(images, trigger)
        psnrs.append(psnr_batch(poisoned, images))
        ssims.append(ssim_batch(poisoned, images))
    psnrs = np.concatenate(psnrs)
    ssims = np.concatenate(ssims)
    return {
        "mean_psnr": float(psnrs.mean()),
        "min_psnr": float(psnrs.min()),
        "mean_ssim": float(ssims.mean()),
    }


@dataclass
class EvalReport:
    benign_accuracy: float
    per_class_asr: List[float]
    mean_asr: float
    mean_psnr: float
    min_psnr: float
    mean_ssim: float
    seed: int
    config: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def per_class_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"class": range(len(self.per_class_asr)), "asr": self.per_class_asr})


def evaluate(model: Classifier, test: Dataset, triggers: np.ndarray, seed: int,
             config: Optional[Dict[str, object]] = None) -> EvalReport:
    asr = attack_success_rate(model, test, triggers)
    stealth = stealth_metrics(test.images, triggers)
    per_class = [float(v) for v in asr["per_class"]]
    return EvalReport(
        benign_accuracy=benign_accuracy(model, test),
        per_class_asr=per_class,
        mean_asr=float(np.mean(per_class)),
        mean_psnr=stealth["mean_psnr"],
        min_psnr=stealth["min_psnr"],
        mean_ssim=stealth["mean_ssim"],
        seed=int(seed),
        config=dict(config or {}),
    )
