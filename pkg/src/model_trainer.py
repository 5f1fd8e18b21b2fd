# src/model_trainer.py: SGD training, adaptation and evaluation

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger
from scipy.special import log_softmax

from src import config as settings
from src.errors import ConfigurationError, ConsistencyError, ParameterError
from src.lattice import regularized_sequence_loss, smbr_forward_backward
from src.losses import TargetBatch, ce_loss, hybrid_loss, kl_loss
from src.network import ParamMask, backward, forward
from src.synthetic_data import FrameDataset
from src.utils import log_epoch_metrics

FRAME_OBJECTIVES = ("ce", "kd", "hybrid")
SEQUENCE_OBJECTIVES = ("smbr_ce", "smbr_kl")
OBJECTIVES = FRAME_OBJECTIVES + SEQUENCE_OBJECTIVES
TEACHER_OBJECTIVES = ("kd", "hybrid", "smbr_kl")
LABEL_SOURCES = ("hard_pseudo", "soft_teacher", "oracle_hard")
EVAL_CHUNK = 4096


class TeacherModel(NamedTuple):
    params: object
    config: object


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "ce"
    learning_rate: float = settings.LEARNING_RATE
    momentum_schedule: tuple = settings.MOMENTUM_SCHEDULE
    epochs: int = settings.EPOCHS
    batch_size: int = settings.BATCH_SIZE
    q: float = settings.HYBRID_WEIGHT
    p: float = settings.SMBR_SMOOTHING
    temperature: float = settings.TEMPERATURE
    k: float = settings.ACOUSTIC_SCALE
    mask: ParamMask = field(default_factory=ParamMask.everything)
    seed: int = settings.DEFAULT_SEED
    n_jobs: int = 1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        for name in ("learning_rate", "temperature", "k"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("epochs", "batch_size", "n_jobs"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.q < 0 or self.p < 0:
            raise ConfigurationError("q and p must be nonnegative")
        if len(self.momentum_schedule) != 2:
            raise ConfigurationError("momentum_schedule is (first epoch, later epochs)")

    @property
    def sequence_mode(self):
        return {"smbr_ce": "ce_smoothed", "smbr_kl": "kl_smoothed"}.get(self.objective)

    def momentum_for(self, epoch):
        return self.momentum_schedule[0] if epoch == 1 else self.momentum_schedule[1]


@dataclass(frozen=True)
class AdaptConfig:
    learning_rate: float = settings.ADAPT_LEARNING_RATE
    epochs: int = settings.ADAPT_EPOCHS
    label_source: str = "hard_pseudo"
    mask: ParamMask = field(default_factory=ParamMask.gates_only)
    batch_size: int = settings.ADAPT_BATCH_SIZE
    momentum_schedule: tuple = settings.MOMENTUM_SCHEDULE
    temperature: float = settings.TEMPERATURE
    seed: int = settings.DEFAULT_SEED

    def __post_init__(self):
        if self.label_source not in LABEL_SOURCES:
            raise ConfigurationError(f"unknown label source {self.label_source!r}; expected one of {LABEL_SOURCES}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("adaptation needs a positive learning rate, epochs and batch size")


@dataclass
class MomentumState:
    velocity: object

    @classmethod
    def zeros(cls, params):
        return cls(params.zeros_like())


@dataclass
class TrainResult:
    params: object
    history: pd.DataFrame


@dataclass
class EvalResult:
    fer: float
    ce: float
    frames: int


@dataclass
class AdaptResult:
    params: object
    history: pd.DataFrame
    labels: np.ndarray


# === Optimizer ===
def sgd_step(params, grads, state, lr, momentum, mask):
    """Classical momentum: v <- momentum*v - lr*g; theta <- theta + v, per unmasked group."""
    shapes = [a.shape for a in params.arrays()]
    if [a.shape for a in grads.arrays()] != shapes or [a.shape for a in state.velocity.arrays()] != shapes:
        raise ConsistencyError("gradient / velocity structure does not match the parameters")
    new_theta, new_velocity = [], []
    for (group, _, theta), g, v in zip(params.named_arrays(), grads.arrays(), state.velocity.arrays()):
        if mask.updates(group):
            v = momentum * v - lr * g
            theta = theta + v
        new_theta.append(theta)
        new_velocity.append(v)
    return params.rebuild(new_theta), MomentumState(state.velocity.rebuild(new_velocity))


# === Objectives ===
def frame_objective(objective, posteriors, labels=None, teacher_posteriors=None, q=0.0, temperature=1.0):
    if objective == "ce":
        return ce_loss(posteriors, TargetBatch.from_labels(labels), temperature)
    if objective == "kd":
        return kl_loss(posteriors, TargetBatch.from_posteriors(teacher_posteriors), temperature)
    if objective == "hybrid":
        return hybrid_loss(
            posteriors,
            TargetBatch.from_posteriors(teacher_posteriors),
            TargetBatch.from_labels(labels),
            q,
            temperature,
        )
    raise ConfigurationError(f"{objective!r} is not a frame-level objective")


def loss_and_gradients(params, config, features, objective, labels=None, teacher_posteriors=None,
                       lattice=None, reference=None, q=0.0, p=0.0, temperature=1.0, k=1.0):
    """Forward, objective and backward for one minibatch (or one utterance)."""
    trace = forward(params, config, features, temperature)
    smbr = None
    if objective in FRAME_OBJECTIVES:
        result = frame_objective(objective, trace.posteriors, labels, teacher_posteriors, q, temperature)
    elif objective in SEQUENCE_OBJECTIVES:
        log_post = log_softmax(trace.logits / temperature, axis=1)
        smbr = smbr_forward_backward(lattice, reference, log_post, k)
        if objective == "smbr_ce":
            frame = ce_loss(trace.posteriors, TargetBatch.from_labels(reference.as_array()), temperature)
            mode = "ce_smoothed"
        else:
            frame = kl_loss(trace.posteriors, TargetBatch.from_posteriors(teacher_posteriors), temperature)
            mode = "kl_smoothed"
        result = regularized_sequence_loss(smbr, frame, p, mode, trace.posteriors, temperature)
    else:
        raise ConfigurationError(f"unknown objective {objective!r}")
    grads = backward(params, config, trace, result.d_logits)
    return result, grads, trace, smbr


def _sharded_gradients(params, config, features, objective, labels, teacher_posteriors, tcfg):
    """Frame-objective gradients, fanned out over shards when n_jobs > 1.

    Shard results are combined in shard order, weighted by shard size, so the
    reduction is deterministic for a fixed n_jobs.
    """
    kwargs = dict(q=tcfg.q, temperature=tcfg.temperature)
    if tcfg.n_jobs <= 1 or len(features) < 2 * tcfg.n_jobs:
        result, grads, _, _ = loss_and_gradients(params, config, features, objective, labels, teacher_posteriors, **kwargs)
        return result.value, grads
    shards = np.array_split(np.arange(len(features)), tcfg.n_jobs)
    outputs = Parallel(n_jobs=tcfg.n_jobs, prefer="threads")(
        delayed(loss_and_gradients)(
            params, config, features[idx], objective,
            None if labels is None else labels[idx],
            None if teacher_posteriors is None else teacher_posteriors[idx],
            **kwargs,
        )
        for idx in shards
    )
    total = len(features)
    value = 0.0
    grads = params.zeros_like()
    for idx, (result, shard_grads, _, _) in zip(shards, outputs):
        w = len(idx) / total
        value += w * result.value
        grads = grads.rebuild(a + w * b for a, b in zip(grads.arrays(), shard_grads.arrays()))
    return value, grads


def _posteriors(params, config, features, temperature=1.0):
    chunks = [
        forward(params, config, features[i:i + EVAL_CHUNK], temperature).posteriors
        for i in range(0, len(features), EVAL_CHUNK)
    ]
    return np.vstack(chunks)


# === Evaluation ===
def evaluate(params, config, data):
    """Frame error rate of the argmax posterior and mean CE against data.labels."""
    if data.labels is None or len(data.labels) == 0:
        raise ParameterError("evaluation needs labelled, non-empty data")
    y = _posteriors(params, config, data.features)
    labels = np.asarray(data.labels)
    fer = float(np.mean(np.argmax(y, axis=1) != labels))
    ce = ce_loss(y, TargetBatch.from_labels(labels)).value
    return EvalResult(fer=fer, ce=ce, frames=len(labels))


def _sequence_metrics(params, config, utterances, tcfg, teacher_posts):
    total_acc = total_frames = errors = 0
    losses = []
    for utt, teacher_y in zip(utterances, teacher_posts):
        result, _, trace, smbr = loss_and_gradients(
            params, config, utt.features, tcfg.objective, teacher_posteriors=teacher_y,
            lattice=utt.lattice, reference=utt.reference, p=tcfg.p, temperature=tcfg.temperature, k=tcfg.k,
        )
        losses.append(result.value)
        total_acc += smbr.expected_accuracy
        total_frames += utt.lattice.num_frames
        errors += int(np.sum(np.argmax(trace.posteriors, axis=1) != utt.reference.as_array()))
    return float(np.mean(losses)), errors / total_frames, total_acc / total_frames


def _check_requirements(config, tcfg, data, teacher, utterances):
    needs_teacher = tcfg.objective in TEACHER_OBJECTIVES
    if needs_teacher and teacher is None:
        raise ConfigurationError(f"objective {tcfg.objective} needs a teacher model")
    if not needs_teacher and teacher is not None:
        raise ConfigurationError(f"objective {tcfg.objective} does not use a teacher model")
    is_sequence = tcfg.objective in SEQUENCE_OBJECTIVES
    if is_sequence and not utterances:
        raise ConfigurationError(f"objective {tcfg.objective} needs lattices")
    if not is_sequence and utterances:
        raise ConfigurationError(f"objective {tcfg.objective} does not use lattices")
    if not is_sequence:
        if data is None or len(data.features) == 0:
            raise ParameterError("training needs non-empty frame data")
        if tcfg.objective in ("ce", "hybrid") and data.labels is None:
            raise ConfigurationError(f"objective {tcfg.objective} needs labels")
    if not config.is_highway and tcfg.mask == ParamMask.gates_only():
        raise ConfigurationError("a gates-only update needs a highway network")


# === Training ===
def train(params, config, data, tcfg, teacher=None, utterances=None, metrics_path=None, on_epoch_end=None):
    """Minibatch SGD on the objective named by tcfg; returns params and per-epoch metrics.

    Row 0 of the history holds the metrics before the first update.
    `on_epoch_end(epoch, params)` may return extra columns for the history.
    """
    _check_requirements(config, tcfg, data, teacher, utterances)
    rng = np.random.default_rng(tcfg.seed)
    state = MomentumState.zeros(params)
    is_sequence = tcfg.objective in SEQUENCE_OBJECTIVES

    if is_sequence:
        teacher_posts = [
            _posteriors(teacher.params, teacher.config, u.features, tcfg.temperature) if teacher else None
            for u in utterances
        ]
    else:
        teacher_posts = (
            _posteriors(teacher.params, teacher.config, data.features, tcfg.temperature) if teacher else None
        )

    def epoch_row(epoch, current):
        if is_sequence:
            loss, fer, expected = _sequence_metrics(current, config, utterances, tcfg, teacher_posts)
        else:
            y = _posteriors(current, config, data.features, tcfg.temperature)
            loss = frame_objective(tcfg.objective, y, data.labels, teacher_posts, tcfg.q, tcfg.temperature).value
            fer = evaluate(current, config, data).fer if data.labels is not None else None
            expected = None
        row = {"epoch": epoch, "objective": tcfg.objective, "loss": loss, "fer": fer, "expected_accuracy": expected}
        if on_epoch_end is not None:
            row.update(on_epoch_end(epoch, current) or {})
        return row

    history = [epoch_row(0, params)]
    logger.info(f"🧠 Training {config.describe()} with {tcfg.objective} | initial loss {history[0]['loss']:.6f}")

    for epoch in range(1, tcfg.epochs + 1):
        momentum = tcfg.momentum_for(epoch)
        if is_sequence:
            for i in rng.permutation(len(utterances)):
                utt = utterances[i]
                _, grads, _, _ = loss_and_gradients(
                    params, config, utt.features, tcfg.objective, teacher_posteriors=teacher_posts[i],
                    lattice=utt.lattice, reference=utt.reference, p=tcfg.p, temperature=tcfg.temperature, k=tcfg.k,
                )
                params, state = sgd_step(params, grads, state, tcfg.learning_rate, momentum, tcfg.mask)
        else:
            order = rng.permutation(len(data.features))
            for start in range(0, len(order), tcfg.batch_size):
                idx = order[start:start + tcfg.batch_size]
                _, grads = _sharded_gradients(
                    params, config, data.features[idx], tcfg.objective,
                    None if data.labels is None else data.labels[idx],
                    None if teacher_posts is None else teacher_posts[idx],
                    tcfg,
                )
                params, state = sgd_step(params, grads, state, tcfg.learning_rate, momentum, tcfg.mask)

        row = epoch_row(epoch, params)
        history.append(row)
        fer_text = f"{row['fer']:.4f}" if row["fer"] is not None else "n/a"
        extra = f" | expected acc {row['expected_accuracy']:.4f}" if row["expected_accuracy"] is not None else ""
        logger.info(f"📊 Epoch {epoch}/{tcfg.epochs} | loss {row['loss']:.6f} | FER {fer_text}{extra}")

    history = pd.DataFrame(history)
    if metrics_path:
        log_epoch_metrics(history, metrics_path)
    return TrainResult(params, history)


# === Adaptation ===
def adaptation_labels(params, config, data, source, teacher=None, temperature=1.0):
    if source == "hard_pseudo":
        return np.argmax(_posteriors(params, config, data.features), axis=1)
    if source == "oracle_hard":
        if data.labels is None:
            raise ConfigurationError("oracle_hard adaptation needs labelled data")
        return np.asarray(data.labels)
    if teacher is None:
        raise ConfigurationError("soft_teacher adaptation needs a teacher model")
    return _posteriors(teacher.params, teacher.config, data.features, temperature)


def adapt(params, config, data, acfg, teacher=None, metrics_path=None, on_epoch_end=None):
    """Two-pass adaptation: label the data, then fine-tune the masked groups.

    The history's `loss` column is the adaptation objective on the adaptation
    data; `true_fer` is added when the data carries true labels.
    """
    if not config.is_highway and acfg.mask == ParamMask.gates_only():
        raise ConfigurationError("gates-only adaptation needs a highway network")

    targets = adaptation_labels(params, config, data, acfg.label_source, teacher, acfg.temperature)
    soft = acfg.label_source == "soft_teacher"
    adapt_data = FrameDataset(data.features, None if soft else targets)
    tcfg = TrainConfig(
        objective="kd" if soft else "ce",
        learning_rate=acfg.learning_rate,
        momentum_schedule=acfg.momentum_schedule,
        epochs=acfg.epochs,
        batch_size=acfg.batch_size,
        temperature=acfg.temperature,
        mask=acfg.mask,
        seed=acfg.seed,
    )
    true_labels = data.labels

    def track_true_fer(epoch, current):
        extra = {} if true_labels is None else {"true_fer": evaluate(current, config, data).fer}
        if on_epoch_end is not None:
            extra.update(on_epoch_end(epoch, current) or {})
        return extra

    logger.info(f"🔧 Adapting {config.describe()} ({acfg.label_source}, update {acfg.mask.describe()})")
    result = train(params, config, adapt_data, tcfg, teacher=teacher if soft else None,
                   metrics_path=metrics_path, on_epoch_end=track_true_fer)
    return AdaptResult(result.params, result.history, targets)


def adapt_speakers(params, config, speaker_data, acfg, teacher=None, n_jobs=1):
    """Adapt a copy of the model per speaker; speakers are independent."""
    speakers = sorted(speaker_data)
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(adapt)(params, config, speaker_data[s], acfg, teacher) for s in speakers
    )
    return dict(zip(speakers, results))
