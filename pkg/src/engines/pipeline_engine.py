"""
Experiment configuration, seed lineage, run manifests and the staged attack pipeline.

Every stage reads its inputs from the run directory and writes its outputs
back there, so any stage can be rerun on its own from persisted upstream
artifacts. Per-stage seeds are derived from the master seed and the stage name,
which keeps reruns independent of execution order.
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from engines.data_engine import (
    DataGenSpec, Dataset, generate_synthetic_dataset, load_dataset, load_tensors,
    poison_dataset, save_dataset, save_tensors,
)
from engines.defense_engine import (
    defense_report, fine_prune_defense, fine_tune_defense, strip_evaluation,
)
from engines.errors import ConfigError, StageError, UbdError
from engines.graph_engine import build_graph, graph_from_tensors, graph_to_tensors, save_edge_list
from engines.latent_engine import codes_from_csv, codes_to_csv, encode_classes
from engines.trigger_engine import (
    TRIGGER_METHODS, TriggerSet, TriggerTrainConfig, code_blend_triggers, patch_triggers,
    train_triggers, trigger_quality,
)
from engines.tsi_engine import GAP_DISTRIBUTIONS, bound_grid, bound_sweep, separability_report
from engines.victim_engine import (
    ARCHITECTURES, Classifier, EvalReport, TrainHyper, attack_success_rate, benign_accuracy, evaluate,
    load_classifier, train_classifier,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PATCH_SIZE = 4


# =============================================================================
# Configuration
# =============================================================================

@dataclass(frozen=True)
class ExperimentConfig:
    """
    Flat experiment configuration. File keys are the upper-cased field names
    (`GRAPH_T=5`), list values are comma-separated.
    """
    seed: int = 0
    # data
    num_classes: int = 16
    channels: int = 3
    height: int = 16
    width: int = 16
    train_per_class: int = 60
    test_per_class: int = 20
    sample_per_class: int = 10
    contrast: float = 0.3
    noise_std: float = 0.05
    # classifiers
    surrogate_arch: str = "mlp"
    victim_arch: str = "mlp"
    hidden: int = 128
    feature_dim: int = 64
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # codes and graph
    latent_dim: int = 8
    graph_t: float = 5.0
    weight_min: float = 0.1
    # triggers
    trigger_method: str = "gcn"
    beta: float = 0.01
    psnr_threshold: float = 30.0
    trigger_lr: float = 0.05
    trigger_epochs: int = 200
    trigger_batch: int = 32
    targets_per_step: int = 8
    gcn_hidden: int = 64
    trigger_alpha: float = 0.2
    trigger_grad_norm: float = 1.0
    trigger_init_margin: float = 10.0
    # poisoning
    poison_per_class: int = 8
    poison_mode: str = "replace"
    # defenses
    defense_fine_tune: bool = True
    defense_fine_prune: bool = True
    defense_strip: bool = True
    clean_subset_fraction: float = 0.01
    fine_tune_epochs: int = 5
    prune_fraction: float = 0.3
    strip_blends: int = 16
    strip_inputs: int = 64
    ba_tolerance: float = 0.02
    # theory
    tsi_eps: float = 1e-8
    bound_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0, 3.0, 4.0)
    bound_classes: Tuple[int, ...] = (2, 11, 101)
    mc_trials: int = 100_000
    mc_distribution: str = "gaussian"
    # sweeps
    sweep_key: str = ""
    sweep_values: Tuple[str, ...] = ()
    sweep_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.num_classes >= 2, "NUM_CLASSES must be >= 2"),
            (self.surrogate_arch in ARCHITECTURES, f"SURROGATE_ARCH must be one of {ARCHITECTURES}"),
            (self.victim_arch in ARCHITECTURES, f"VICTIM_ARCH must be one of {ARCHITECTURES}"),
            (self.latent_dim >= 1, "LATENT_DIM must be >= 1"),
            (self.graph_t >= 0, "GRAPH_T must be >= 0"),
            (0.0 < self.weight_min < 1.0, "WEIGHT_MIN must be in (0, 1)"),
            (self.trigger_method in TRIGGER_METHODS, f"TRIGGER_METHOD must be one of {TRIGGER_METHODS}"),
            (0.0 <= self.beta <= 1.0, "BETA must be in [0, 1]"),
            (self.psnr_threshold > 0, "PSNR_THRESHOLD must be > 0"),
            (self.trigger_grad_norm >= 0, "TRIGGER_GRAD_NORM must be >= 0 (0 disables normalization)"),
            (self.trigger_init_margin >= 0, "TRIGGER_INIT_MARGIN must be >= 0"),
            (self.poison_per_class >= 0, "POISON_PER_CLASS must be >= 0"),
            (self.poison_mode in ("replace", "append"), "POISON_MODE must be 'replace' or 'append'"),
            (0.0 < self.clean_subset_fraction <= 1.0, "CLEAN_SUBSET_FRACTION must be in (0, 1]"),
            (0.0 <= self.prune_fraction < 1.0, "PRUNE_FRACTION must be in [0, 1)"),
            (self.strip_blends >= 2, "STRIP_BLENDS must be >= 2"),
            (self.tsi_eps > 0, "TSI_EPS must be > 0"),
            (self.mc_trials >= 10_000, "MC_TRIALS must be >= 10000"),
            (self.mc_distribution in GAP_DISTRIBUTIONS, f"MC_DISTRIBUTION must be one of {GAP_DISTRIBUTIONS}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.poison_mode == "append":
            # TODO: appending triggered copies as extra samples needs a PoisonedDataset variant with grown labels
            raise ConfigError("POISON_MODE=append is not implemented; poisoned images replace their sources")

    # -- parsing -------------------------------------------------------------

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name.upper() for f in dataclasses.fields(cls)]

    @classmethod
    def _coerce(cls, name: str, raw: str):
        default = next(f.default for f in dataclasses.fields(cls) if f.name == name)
        text = raw.strip()
        try:
            if isinstance(default, bool):
                lowered = text.lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                return lowered in ("true", "1", "yes")
            if isinstance(default, tuple):
                items = [s.strip() for s in text.split(",") if s.strip()]
                kind = type(default[0]) if default else str
                return tuple(kind(s) for s in items)
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
            return text
        except ValueError as exc:
            raise ConfigError(f"{name.upper()}: cannot parse '{raw}' as {type(default).__name__}") from exc

    @classmethod
    def from_mapping(cls, values: Dict[str, Optional[str]], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        parsed = {}
        for key, raw in values.items():
            name = key.strip().lower()
            if name not in known:
                raise ConfigError(f"unknown config key '{key}'")
            if raw is None:
                raise ConfigError(f"config key '{key}' has no value")
            parsed[name] = cls._coerce(name, str(raw))
        return dataclasses.replace(base or cls(), **parsed)

    @classmethod
    def from_file(cls, path: PathLike) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_mapping(dotenv_values(path, interpolate=False))

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name.upper()}={value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, object]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    # -- derived engine configs ---------------------------------------------

    def data_spec(self) -> DataGenSpec:
        return DataGenSpec(
            num_classes=self.num_classes, channels=self.channels, height=self.height, width=self.width,
            train_per_class=self.train_per_class, test_per_class=self.test_per_class,
            sample_per_class=self.sample_per_class, contrast=self.contrast, noise_std=self.noise_std,
            seed=stage_seed(self.seed, "gen-data"),
        )

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def train_hyper(self, arch: str) -> TrainHyper:
        return TrainHyper(arch=arch, hidden=self.hidden, feature_dim=self.feature_dim, epochs=self.epochs,
                          batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                          weight_decay=self.weight_decay)

    def trigger_config(self) -> TriggerTrainConfig:
        return TriggerTrainConfig(
            beta=self.beta, psnr_threshold=self.psnr_threshold, lr=self.trigger_lr,
            epochs=self.trigger_epochs, batch_size=self.trigger_batch,
            targets_per_step=self.targets_per_step, momentum=self.momentum,
            weight_decay=self.weight_decay, hidden=(self.gcn_hidden, self.gcn_hidden),
            alpha=self.trigger_alpha, grad_norm=self.trigger_grad_norm or None,
            init_margin_db=self.trigger_init_margin, seed=stage_seed(self.seed, "train-triggers"),
        )


def stage_seed(master: int, stage: str) -> int:
    """Stable 32-bit seed for one stage of one master seed."""
    digest = hashlib.sha256(f"{master}:{stage}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


def file_sha256(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# =============================================================================
# Manifest
# =============================================================================

@dataclass
class RunManifest:
    config_hash: str
    seed: int
    run_dir: str
    stage_seeds: Dict[str, int] = field(default_factory=dict)
    artifacts: Dict[str, Dict[str, str]] = field(default_factory=dict)
    stages_completed: List[str] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""
    status: str = "running"
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    FILENAME = "manifest.json"

    def record(self, stage: str, outputs: Dict[str, Path]) -> None:
        root = Path(self.run_dir)
        for name, path in outputs.items():
            path = Path(path)
            self.artifacts[name] = {
                "stage": stage,
                "path": str(path.relative_to(root)),
                "sha256": file_sha256(path),
            }
        self.stages_completed.append(stage)

    def save(self) -> Path:
        path = Path(self.run_dir) / self.FILENAME
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: PathLike) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / cls.FILENAME
        data = json.loads(path.read_text())
        return cls(**data)


def verify_manifest(path: PathLike) -> List[str]:
    """Artifact names whose file is missing or whose hash no longer matches."""
    manifest = RunManifest.load(path)
    root = Path(path) if Path(path).is_dir() else Path(path).parent
    problems = []
    for name, entry in sorted(manifest.artifacts.items()):
        file = root / entry["path"]
        if not file.is_file() or file_sha256(file) != entry["sha256"]:
            problems.append(name)
    return problems


# =============================================================================
# Artifact helpers
# =============================================================================

def _write_json(path: Path, payload: Dict[str, object]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def _save_classifier(model: Classifier, path: Path) -> Path:
    return save_tensors(model.state_dict(), path)


def _load_classifier(config: ExperimentConfig, arch: str, path: Path) -> Classifier:
    return load_classifier(load_tensors(path), config.train_hyper(arch), config.image_shape, config.num_classes)


def _load_triggers(run_dir: Path) -> np.ndarray:
    return load_tensors(run_dir / "triggers.ubds")["triggers"]


# =============================================================================
# Stages
# =============================================================================

def stage_gen_data(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    bundle = generate_synthetic_dataset(config.data_spec())
    return {
        "train": save_dataset(bundle.train, run_dir / "data" / "train.ubds"),
        "test": save_dataset(bundle.test, run_dir / "data" / "test.ubds"),
        "sample": save_dataset(bundle.sample, run_dir / "data" / "sample.ubds"),
    }


def stage_train_surrogate(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    train = load_dataset(run_dir / "data" / "train.ubds")
    model = train_classifier(train, config.train_hyper(config.surrogate_arch),
                             stage_seed(config.seed, "train-surrogate"))
    return {"surrogate": _save_classifier(model, run_dir / "surrogate.ubds")}


def stage_encode(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    surrogate = _load_classifier(config, config.surrogate_arch, run_dir / "surrogate.ubds")
    sample = load_dataset(run_dir / "data" / "sample.ubds")
    codes = encode_classes(surrogate, sample, config.latent_dim)
    return {"codes": codes_to_csv(codes, run_dir / "codes.csv")}


def stage_build_graph(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    graph = build_graph(codes_from_csv(run_dir / "codes.csv"), config.graph_t, config.weight_min)
    return {
        "graph": save_tensors(graph_to_tensors(graph), run_dir / "graph.ubds"),
        "graph_edges": save_edge_list(graph, run_dir / "graph_edges.csv"),
    }


def stage_train_triggers(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    if config.trigger_method == "code_blend":
        triggers = code_blend_triggers(codes_from_csv(run_dir / "codes.csv"), config.image_shape, config.psnr_threshold,
                                       stage_seed(config.seed, "train-triggers"))
    else:
        graph = graph_from_tensors(load_tensors(run_dir / "graph.ubds"))
        surrogate = _load_classifier(config, config.surrogate_arch, run_dir / "surrogate.ubds")
        sample = load_dataset(run_dir / "data" / "sample.ubds")
        triggers = train_triggers(sample, graph, surrogate, config.trigger_config())
    outputs = {"triggers": save_tensors({"triggers": triggers.triggers}, run_dir / "triggers.ubds")}
    if triggers.history:
        outputs["trigger_loss"] = _write_csv(run_dir / "trigger_loss.csv", triggers.history_frame())
    return outputs


def stage_poison(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    train = load_dataset(run_dir / "data" / "train.ubds")
    poisoned = poison_dataset(train, _load_triggers(run_dir), config.poison_per_class,
                              stage_seed(config.seed, "poison"))
    records = pd.DataFrame([dataclasses.asdict(r) for r in poisoned.injected],
                           columns=["source_index", "target", "trigger_id"])
    return {
        "poisoned": save_dataset(poisoned.dataset, run_dir / "data" / "poisoned.ubds"),
        "poison_records": _write_csv(run_dir / "poison_records.csv", records),
    }


def stage_train_victim(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    poisoned = load_dataset(run_dir / "data" / "poisoned.ubds")
    model = train_classifier(poisoned, config.train_hyper(config.victim_arch),
                             stage_seed(config.seed, "train-victim"))
    return {"victim": _save_classifier(model, run_dir / "victim.ubds")}


def _clean_subset(config: ExperimentConfig, train: Dataset) -> Dataset:
    rng = np.random.default_rng(stage_seed(config.seed, "clean-subset"))
    size = min(len(train), max(config.num_classes, int(round(config.clean_subset_fraction * len(train)))))
    return train.subset(np.sort(rng.choice(len(train), size=size, replace=False)))


def _patch_strip(config: ExperimentConfig, train: Dataset, test: Dataset, subset: Dataset,
                 seed: int) -> Dict[str, object]:
    """STRIP against a victim poisoned with visible corner patches, the reference a stealthy trigger is compared to."""
    patch = min(PATCH_SIZE, config.height, config.width)
    triggers = patch_triggers(config.num_classes, config.image_shape, patch=patch,
                              seed=stage_seed(config.seed, "patch-triggers")).triggers
    poisoned = poison_dataset(train, triggers, config.poison_per_class, stage_seed(config.seed, "patch-poison"))
    victim = train_classifier(poisoned.dataset, config.train_hyper(config.victim_arch),
                              stage_seed(config.seed, "patch-victim"))
    strip = strip_evaluation(victim, test, subset, triggers, config.strip_inputs, config.strip_blends, seed=seed)
    result = strip.to_dict()
    result["mean_asr"] = float(attack_success_rate(victim, test, triggers)["mean"])
    result["patch_size"] = patch
    return result


def run_defenses(config: ExperimentConfig, victim: Classifier, train: Dataset, test: Dataset,
                 triggers: np.ndarray) -> Dict[str, object]:
    subset = _clean_subset(config, train)
    seed = stage_seed(config.seed, "defenses")
    results: Dict[str, object] = {"clean_subset_size": len(subset)}
    if config.defense_fine_tune:
        tuned = fine_tune_defense(victim, subset, config.fine_tune_epochs, seed=seed)
        results["fine_tune"] = defense_report("fine_tune", victim, tuned, test, triggers, config.ba_tolerance).to_dict()
    if config.defense_fine_prune:
        pruned = fine_prune_defense(victim, subset, config.prune_fraction, seed=seed)
        results["fine_prune"] = defense_report("fine_prune", victim, pruned, test, triggers, config.ba_tolerance).to_dict()
    if config.defense_strip:
        strip = strip_evaluation(victim, test, subset, triggers, config.strip_inputs, config.strip_blends, seed=seed)
        results["strip"] = strip.to_dict()
        results["strip_patch"] = _patch_strip(config, train, test, subset, seed)
        logger.info("STRIP AUROC %.3f on generated triggers, %.3f on corner patches",
                    strip.auroc, results["strip_patch"]["auroc"])
    return results


def stage_evaluate(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    victim = _load_classifier(config, config.victim_arch, run_dir / "victim.ubds")
    test = load_dataset(run_dir / "data" / "test.ubds")
    triggers = _load_triggers(run_dir)
    report = evaluate(victim, test, triggers, config.seed, config.to_dict())
    payload = report.to_dict()
    payload["trigger_quality"] = trigger_quality(test.images, triggers, config.psnr_threshold)
    train = load_dataset(run_dir / "data" / "train.ubds")
    control = train_classifier(train, config.train_hyper(config.victim_arch), stage_seed(config.seed, "train-victim"))
    payload["clean_ba"] = benign_accuracy(control, test)
    payload["ba_drop"] = payload["clean_ba"] - report.benign_accuracy
    payload["clean_control_asr"] = float(attack_success_rate(control, test, triggers)["mean"])
    outputs = {
        "eval_report": _write_json(run_dir / "eval_report.json", payload),
        "per_class_asr": _write_csv(run_dir / "per_class_asr.csv", report.per_class_frame()),
    }
    if config.defense_fine_tune or config.defense_fine_prune or config.defense_strip:
        outputs["defenses"] = _write_json(run_dir / "defenses.json",
                                          run_defenses(config, victim, train, test, triggers))
    return outputs


def stage_tsi(config: ExperimentConfig, run_dir: Path) -> Dict[str, Path]:
    victim = _load_classifier(config, config.victim_arch, run_dir / "victim.ubds")
    test = load_dataset(run_dir / "data" / "test.ubds")
    evaluation = json.loads((run_dir / "eval_report.json").read_text())
    report = separability_report(victim, test, _load_triggers(run_dir),
                                 evaluation["per_class_asr"], config.tsi_eps)
    return {
        "separability": _write_json(run_dir / "separability.json", report.to_dict()),
        "tsi_per_class": _write_csv(run_dir / "tsi_per_class.csv", report.per_class_frame()),
    }


StageFn = Callable[[ExperimentConfig, Path], Dict[str, Path]]

STAGES: Tuple[Tuple[str, StageFn], ...] = (
    ("gen-data", stage_gen_data),
    ("train-surrogate", stage_train_surrogate),
    ("encode", stage_encode),
    ("build-graph", stage_build_graph),
    ("train-triggers", stage_train_triggers),
    ("poison", stage_poison),
    ("train-victim", stage_train_victim),
    ("evaluate", stage_evaluate),
    ("tsi", stage_tsi),
)
STAGE_NAMES = tuple(name for name, _ in STAGES)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _open_manifest(config: ExperimentConfig, run_dir: Path) -> RunManifest:
    path = run_dir / RunManifest.FILENAME
    if path.is_file():
        manifest = RunManifest.load(path)
        if manifest.config_hash == config.config_hash():
            return manifest
        logger.warning("config changed since %s was written; starting a fresh manifest", path)
    return RunManifest(config_hash=config.config_hash(), seed=config.seed, run_dir=str(run_dir),
                       stage_seeds={name: stage_seed(config.seed, name) for name in STAGE_NAMES},
                       started_at=_now())


def run_stage(name: str, config: ExperimentConfig, run_dir: PathLike,
              manifest: Optional[RunManifest] = None) -> RunManifest:
    """
    Runs one stage from persisted upstream artifacts and records its outputs.

    Raises:
        StageError: carrying the stage name; the partial manifest is saved first
    """
    stages = dict(STAGES)
    if name not in stages:
        raise ConfigError(f"unknown stage '{name}', expected one of {STAGE_NAMES}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest or _open_manifest(config, run_dir)
    (run_dir / "config.cfg").write_text(config.to_text())
    logger.info("stage %s (seed %d)", name, stage_seed(config.seed, name))
    try:
        outputs = stages[name](config, run_dir)
    except (UbdError, ValueError, OSError, KeyError) as exc:
        manifest.status = "failed"
        manifest.failed_stage = name
        manifest.error = str(exc)
        manifest.finished_at = _now()
        manifest.save()
        logger.error("stage %s failed: %s", name, exc)
        raise StageError(name, exc) from exc
    if name in manifest.stages_completed:
        manifest.stages_completed.remove(name)
    manifest.record(name, outputs)
    manifest.status = "running"
    manifest.failed_stage = None
    manifest.error = None
    manifest.save()
    return manifest


@dataclass
class PipelineResult:
    manifest: RunManifest
    eval_report: Dict[str, object]
    separability: Dict[str, object]


def run_attack_pipeline(config: ExperimentConfig, run_dir: PathLike) -> PipelineResult:
    """All nine stages in order, persisting every intermediate."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config_hash=config.config_hash(), seed=config.seed, run_dir=str(run_dir),
                           stage_seeds={name: stage_seed(config.seed, name) for name in STAGE_NAMES},
                           started_at=_now())
    for name in STAGE_NAMES:
        manifest = run_stage(name, config, run_dir, manifest)
    manifest.status = "complete"
    manifest.finished_at = _now()
    manifest.save()
    return PipelineResult(
        manifest=manifest,
        eval_report=json.loads((run_dir / "eval_report.json").read_text()),
        separability=json.loads((run_dir / "separability.json").read_text()),
    )


# =============================================================================
# Theory suite and sweeps
# =============================================================================

def run_theory_suite(config: ExperimentConfig, out_dir: Optional[PathLike] = None,
                     grid: Optional[Sequence[Tuple[float, float, int]]] = None) -> pd.DataFrame:
    """Bounds vs Monte Carlo over the configured grid; writes bounds.csv when `out_dir` is given."""
    grid = list(grid) if grid is not None else bound_grid(config.bound_ratios, config.bound_classes)
    frame = bound_sweep(grid, config.mc_trials, stage_seed(config.seed, "verify-bounds"), config.mc_distribution)
    if out_dir is not None:
        _write_csv(Path(out_dir) / "bounds.csv", frame)
    return frame


SWEEP_KEYS = ("graph_t", "latent_dim", "psnr_threshold", "poison_per_class", "beta", "trigger_method")


def run_sweep(config: ExperimentConfig, key: str, values: Sequence[str], seeds: Sequence[int],
              out_dir: PathLike) -> pd.DataFrame:
    """
    One full pipeline per (value, seed); returns per-run rows and writes
    sweep_runs.csv plus the seed-averaged sweep_summary.csv.
    """
    key = key.lower()
    if key not in SWEEP_KEYS:
        raise ConfigError(f"cannot sweep '{key}', expected one of {SWEEP_KEYS}")
    if not values or not seeds:
        raise ConfigError("sweep needs at least one value and one seed")
    out_dir = Path(out_dir)
    rows = []
    for raw in values:
        value = ExperimentConfig._coerce(key, str(raw))
        for seed in seeds:
            run_config = config.with_overrides(**{key: value, "seed": int(seed)})
            result = run_attack_pipeline(run_config, out_dir / f"{key}={raw}" / f"seed_{seed}")
            report, separability = result.eval_report, result.separability
            rows.append({
                "key": key, "value": str(raw), "seed": int(seed),
                "benign_accuracy": report["benign_accuracy"],
                "mean_asr": report["mean_asr"],
                "mean_psnr": report["mean_psnr"],
                "mean_ssim": report["mean_ssim"],
                "mean_tsi": float(np.mean(separability["tsi"])),
                "spearman": separability["spearman"],
            })
    runs = pd.DataFrame(rows)
    summary = (runs.drop(columns=["seed", "key"])
               .groupby("value", sort=False).mean().reset_index())
    summary.insert(0, "key", key)
    _write_csv(out_dir / "sweep_runs.csv", runs)
    _write_csv(out_dir / "sweep_summary.csv", summary)
    logger.info("sweep over %s: %d values x %d seeds", key, len(values), len(seeds))
    return runs
