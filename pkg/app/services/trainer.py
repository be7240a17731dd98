"""
Training and Inference Service

This module ties the toolkit together:
1. fit / train: mini-batch Adam on the joint or a single-head objective,
   validating after every epoch and keeping the best-HTER weights
2. evaluate: the 3 heads x 4 metrics report for one split of a dataset
3. infer: the vision, acoustic and fusion routes with optional fallback
"""

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from app.models.metrics import HEADS, EvaluationReport
from app.models.network import Route
from app.models.pipeline import PipelineConfig
from app.models.signal import Waveform
from app.models.training import (
    CheckpointMeta,
    DatasetManifest,
    EpochLog,
    InferenceResult,
    Split,
    ThresholdMode,
    TrainingMode,
)
from app.services import numerics as nx
from app.services.channel_sim import check_distortion
from app.services.checkpoint import apply_state, load_checkpoint, save_checkpoint
from app.services.config import AppConfig, config_from_flat, flatten_config
from app.services.dataset import (
    EmptySplitError,
    Features,
    assign_splits,
    extract_features,
    prepare_image,
    prepare_spectrogram,
)
from app.services.echo_pipeline import build_pipeline_config, preprocess
from app.services.errors import InvalidInputError, M3FASError, MissingModalityError, NumericFailureError
from app.services.metrics import build_report, confusion_at, eer_threshold, hter, make_score_set
from app.services.network import M3FASModel, build_model, combine_losses, loss_terms
from app.services.numerics import AdamState, Tape, Tensor
from app.services.run_log import RunLogService

logger = logging.getLogger(__name__)


# ============================================================================
# Custom Exceptions
# ============================================================================

class TrainingError(M3FASError):
    """Raised when training cannot proceed"""
    pass


class NonFiniteLossError(TrainingError, NumericFailureError):
    """Raised when a batch loss is NaN or infinite"""
    def __init__(self, epoch: int, step: int, losses: Dict[str, float]):
        self.epoch = epoch
        self.step = step
        self.losses = losses
        listed = ", ".join(f"{k}={v}" for k, v in losses.items())
        super().__init__(f"Non-finite loss at epoch {epoch}, step {step}: {listed}")


class PreprocessingFailedError(InvalidInputError):
    """Raised when a recording cannot be turned into a spectrogram for inference"""
    pass


# ============================================================================
# Training
# ============================================================================

_TRAINING_ROUTES = {
    TrainingMode.JOINT: Route.FUSION,
    TrainingMode.SEPARATE_VISION: Route.VISION,
    TrainingMode.SEPARATE_ACOUSTIC: Route.ACOUSTIC,
}


def selection_head(mode: TrainingMode) -> str:
    """Head whose validation HTER picks the best epoch."""
    return _TRAINING_ROUTES[mode].value


def training_route(mode: TrainingMode) -> Route:
    return _TRAINING_ROUTES[mode]


class BestCheckpointTracker:
    """Keeps the weights of the epoch with the lowest validation HTER; ties keep the earlier epoch."""

    def __init__(self):
        self.best_hter = float("inf")
        self.best_epoch: Optional[int] = None
        self.best_state: Optional[Dict[str, np.ndarray]] = None

    def update(self, epoch: int, hter: float, state: Dict[str, np.ndarray]) -> bool:
        if hter < self.best_hter:
            self.best_hter = hter
            self.best_epoch = epoch
            self.best_state = {k: v.copy() for k, v in state.items()}
            return True
        return False


@dataclass
class TrainResult:
    model: M3FASModel
    meta: CheckpointMeta
    history: List[EpochLog] = field(default_factory=list)


def _batch(features: Features, index: np.ndarray):
    return Tensor(features.images[index]), Tensor(features.spectrograms[index]), features.labels[index]


def train_step(
    model: M3FASModel,
    images: Tensor,
    spectrograms: Tensor,
    labels: np.ndarray,
    mode: TrainingMode,
    alpha: float,
    params: Dict[str, Tensor],
    state: AdamState,
    epoch: int = 0,
    step: int = 0,
) -> Dict[str, float]:
    """
    One forward, backward and Adam update.

    Returns:
        Per-head BCE values and the optimised total under "total"

    Raises:
        NonFiniteLossError: If any loss is NaN or infinite
    """
    route = training_route(mode)
    model.zero_grad()
    with Tape():
        out = model(images, spectrograms, route)
        terms = loss_terms(out, labels)
        if mode == TrainingMode.JOINT:
            loss = combine_losses(terms["fusion"], terms["vision"], terms["acoustic"], alpha)
        else:
            loss = terms[route.value]
    values = {head: t.item() for head, t in terms.items()}
    values["total"] = loss.item()
    if not all(np.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(epoch, step, values)
    nx.backward(loss)
    nx.adam_step(params, state)
    return values


def score_features(
    model: M3FASModel,
    features: Features,
    route: Route = Route.FUSION,
    batch_size: int = 64,
    workers: int = 4,
) -> Dict[str, np.ndarray]:
    """
    Sigmoid scores per head over all rows, in inference mode.

    Batches run on a thread pool; no tape is active in the workers.
    """
    was_training = model.training
    model.eval()
    starts = list(range(0, len(features), batch_size))

    def run(start: int) -> Dict[str, np.ndarray]:
        index = np.arange(start, min(start + batch_size, len(features)))
        images, spectrograms, _ = _batch(features, index)
        use_image = images if route != Route.ACOUSTIC else None
        use_spec = spectrograms if route != Route.VISION else None
        return model(use_image, use_spec, route).scores()

    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    finally:
        model.train(was_training)
    return {head: np.concatenate([p[head] for p in parts]) for head in parts[0]}


def validation_hter(model: M3FASModel, features: Features, head: str, threshold: float, workers: int = 4) -> float:
    scores = score_features(model, features, Route.FUSION if head == "fusion" else Route(head), workers=workers)
    return hter(confusion_at(make_score_set(scores[head], features.labels), threshold))


def fit(
    model: M3FASModel,
    train_features: Features,
    val_features: Features,
    config: AppConfig,
    run_log: Optional[RunLogService] = None,
    validator: Optional[Callable[[M3FASModel, int], float]] = None,
) -> TrainResult:
    """
    Train model in place and restore the best epoch's weights.

    Args:
        model: Freshly built model
        train_features: Training inputs
        val_features: Validation inputs
        config: Full configuration (train settings and the snapshot stored in meta)
        run_log: Receives one EpochLog per epoch
        validator: Replaces the validation HTER computation (model, epoch) -> HTER

    Returns:
        TrainResult with the model holding the best weights

    Raises:
        EmptySplitError: If either split is empty
        NonFiniteLossError: If a loss diverges
    """
    cfg = config.train
    if len(train_features) == 0:
        raise EmptySplitError("train")
    if len(val_features) == 0:
        raise EmptySplitError("val")

    head = selection_head(cfg.training_mode)
    params = model.route_parameters(training_route(cfg.training_mode))
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    tracker = BestCheckpointTracker()
    history: List[EpochLog] = []
    n = len(train_features)

    logger.info(
        "Training %s (%d params) on %d samples, %d validation, %d epochs",
        cfg.training_mode.value, int(np.sum([p.size for p in params.values()])), n, len(val_features), cfg.epochs,
    )
    for epoch in range(1, cfg.epochs + 1):
        started = time.time()
        model.train()
        order = rng.permutation(n)
        sums: Dict[str, float] = {}
        n_steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            images, spectrograms, labels = _batch(train_features, order[start:start + cfg.batch_size])
            values = train_step(
                model, images, spectrograms, labels, cfg.training_mode, cfg.alpha, params, state, epoch, step
            )
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1

        if validator is not None:
            val_hter = validator(model, epoch)
        else:
            val_hter = validation_hter(model, val_features, head, cfg.threshold, cfg.workers)
        is_best = tracker.update(epoch, val_hter, model.state_dict())

        means = {k: v / n_steps for k, v in sums.items()}
        record = EpochLog(
            epoch=epoch,
            train_losses={k: v for k, v in means.items() if k != "total"},
            total_loss=means["total"],
            val_hter=val_hter,
            selection_head=head,
            is_best=is_best,
            duration_ms=(time.time() - started) * 1000,
        )
        history.append(record)
        if run_log is not None:
            run_log.append(record)
        logger.info(
            "Epoch %d/%d: loss %.4f, val HTER (%s) %.4f%s",
            epoch, cfg.epochs, record.total_loss, head, val_hter, " *" if is_best else "",
        )

    model.load_state_dict(tracker.best_state)
    meta = CheckpointMeta(
        config=flatten_config(config),
        best_hter=tracker.best_hter,
        epoch=tracker.best_epoch,
        selection_head=head,
        threshold=cfg.threshold,
    )
    return TrainResult(model=model, meta=meta, history=history)


def train(
    manifest: DatasetManifest,
    config: AppConfig,
    out_path: Union[str, Path],
    run_log_path: Union[str, Path, None] = None,
) -> TrainResult:
    """
    Split the dataset, extract features, fit and save the best checkpoint.

    Raises:
        EmptySplitError: If the train or validation split is empty
    """
    split_manifest = assign_splits(manifest, config.train)
    train_rows = split_manifest.split_rows(Split.TRAIN)
    val_rows = split_manifest.split_rows(Split.VAL)
    if not val_rows:
        raise EmptySplitError("val", "raise train.split_ratios[1]")

    pipeline = build_pipeline_config(config.signal, config.pipeline)
    workers = config.train.workers
    train_features = extract_features(split_manifest, train_rows, pipeline, config.model, workers)
    val_features = extract_features(split_manifest, val_rows, pipeline, config.model, workers)

    model = build_model(config.model, seed=config.train.seed)
    run_log = RunLogService(run_log_path) if run_log_path else None
    result = fit(model, train_features, val_features, config, run_log)
    save_checkpoint(out_path, result.model.state_dict(), result.meta)
    logger.info("Best epoch %d with validation HTER %.4f", result.meta.epoch, result.meta.best_hter)
    return result


# ============================================================================
# Loading
# ============================================================================

@dataclass
class LoadedModel:
    """A checkpoint restored into a model, with the configuration it was trained under."""
    model: M3FASModel
    config: AppConfig
    meta: CheckpointMeta
    pipeline: PipelineConfig


def load_model(path: Union[str, Path]) -> LoadedModel:
    """
    Rebuild the architecture from the stored config and load the weights.

    Raises:
        CheckpointError: On version, checksum or shape problems
    """
    meta, state = load_checkpoint(path)
    config = config_from_flat(meta.config)
    model = build_model(config.model, seed=config.train.seed)
    apply_state(model, state)
    model.eval()
    return LoadedModel(
        model=model,
        config=config,
        meta=meta,
        pipeline=build_pipeline_config(config.signal, config.pipeline),
    )


# ============================================================================
# Evaluation
# ============================================================================

def evaluate(
    loaded: LoadedModel,
    manifest: DatasetManifest,
    split: Split = Split.TEST,
    distortion: Optional[str] = None,
    distortion_level: float = 0.0,
) -> EvaluationReport:
    """
    AUC, ACC, HTER and EER of every head on one split.

    The split is rebuilt from the checkpoint's train settings. In dev
    threshold mode each head's threshold is the EER threshold of its
    validation scores. distortion is applied to the evaluated images only.

    Raises:
        EmptySplitError: If the split has no rows
        ChannelSimError: If distortion is not a known kind
    """
    if distortion is not None:
        check_distortion(distortion)
    cfg = loaded.config
    split_manifest = assign_splits(manifest, cfg.train)
    rows = split_manifest.split_rows(split)
    if not rows:
        raise EmptySplitError(split.value)

    workers = cfg.train.workers
    features = extract_features(
        split_manifest, rows, loaded.pipeline, cfg.model, workers, distortion, distortion_level
    )
    scores = score_features(loaded.model, features, Route.FUSION, cfg.train.batch_size, workers)

    if cfg.train.threshold_mode == ThresholdMode.DEV:
        val_rows = split_manifest.split_rows(Split.VAL)
        if not val_rows:
            raise EmptySplitError("val", "dev threshold mode")
        val_features = extract_features(split_manifest, val_rows, loaded.pipeline, cfg.model, workers)
        val_scores = score_features(loaded.model, val_features, Route.FUSION, cfg.train.batch_size, workers)
        thresholds = {h: eer_threshold(make_score_set(val_scores[h], val_features.labels)) for h in HEADS}
    else:
        thresholds = {h: cfg.train.threshold for h in HEADS}

    score_sets = {h: make_score_set(scores[h], features.labels) for h in HEADS}
    report = build_report(score_sets, thresholds, split=split.value, distortion=distortion)
    report = report.model_copy(update={"evaluated": len(features), "skipped": list(features.skipped)})
    if features.skipped:
        logger.warning(
            "%d of %d rows of split '%s' failed preprocessing and are not in the metrics",
            len(features.skipped), len(rows), split.value,
        )
    logger.info("Evaluated %d rows of split '%s'", len(features), split.value)
    return report


# ============================================================================
# Inference
# ============================================================================

def input_hash(image: Optional[np.ndarray], recording: Optional[Waveform]) -> str:
    """Short SHA-256 digest of the inputs, for inference logs."""
    digest = hashlib.sha256()
    if image is not None:
        digest.update(np.ascontiguousarray(image, dtype=np.float64).tobytes())
    if recording is not None:
        digest.update(recording.samples.tobytes())
    return digest.hexdigest()[:16]


def infer(
    loaded: LoadedModel,
    image: Optional[np.ndarray],
    recording: Optional[Waveform],
    route: Route,
    fallback: bool = False,
) -> InferenceResult:
    """
    Score one sample on a route.

    Args:
        loaded: Model from load_model
        image: RGB image, HxWx3 in [0, 1]
        recording: Raw microphone recording; preprocessed internally
        route: vision, acoustic or fusion
        fallback: Answer with the vision route when the fusion route's
            recording is missing or fails preprocessing and an image is present

    Returns:
        InferenceResult with one score per computed head

    Raises:
        MissingModalityError: If the route's input is absent and no fallback applies
        PreprocessingFailedError: If the recording fails preprocessing and no fallback applies
    """
    cfg = loaded.config
    reason = None
    spectrogram = None

    if route in (Route.ACOUSTIC, Route.FUSION):
        can_fall_back = fallback and route == Route.FUSION and image is not None
        if recording is None:
            if not can_fall_back:
                raise MissingModalityError(route.value, "acoustic")
            reason = "no recording supplied"
        else:
            try:
                magnitudes = preprocess(recording, loaded.pipeline).magnitudes
                spectrogram = Tensor(prepare_spectrogram(magnitudes, cfg.model)[None])
            except InvalidInputError as e:
                if not can_fall_back:
                    raise PreprocessingFailedError(f"Recording preprocessing failed: {e}") from e
                reason = f"recording preprocessing failed: {e}"
        if reason is not None:
            logger.warning("Falling back to the vision route: %s", reason)
            route = Route.VISION

    image_tensor = None
    if route in (Route.VISION, Route.FUSION):
        if image is None:
            raise MissingModalityError(route.value, "image")
        image_tensor = Tensor(prepare_image(np.asarray(image, dtype=np.float64), cfg.model.image_size)[None])

    out = loaded.model(image_tensor, spectrogram if route != Route.VISION else None, route)
    scores = {head: float(values[0]) for head, values in out.scores().items()}
    return InferenceResult(route=route, scores=scores, fallback=reason is not None, fallback_reason=reason)
