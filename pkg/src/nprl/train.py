"""Learning procedures: plain empirical risk minimization, class-balanced
weighting, self-supervised profile pretraining (every training night is its
own class), and fine-tuning that stays near the pretrained parameters either
through a quadratic penalty or through projection onto a Frobenius ball.

All procedures are bit-deterministic given (data, config, seed): batch order,
initialization and resampling all derive from the config seed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from . import numgrad as ng
from .errors import InputError
from .model import FeatureSchema, ModelConfig
from .numgrad import Array, ParamSet
from .pipeline import ClassStats, NightInstance
from .util import derive_rng


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1 or self.learning_rate <= 0:
            raise InputError("pretrain config values must be positive")


@dataclass(frozen=True)
class FinetuneConfig:
    mode: str = "regularized"  # or "projected"
    lam: float = 1e-2  # penalty coefficient, regularized mode
    gamma: float = 0.0  # ball radius, projected mode
    learning_rate: float = 1e-4  # deliberately below the pretraining rate
    epochs: int = 15
    batch_size: int = 64
    seed: int = 0
    loss: str = "plain"  # or "class_balanced"
    resample: bool = True  # consumed by the harness, not by finetune itself

    def __post_init__(self):
        if self.mode not in ("regularized", "projected"):
            raise InputError(f"unknown finetune mode {self.mode!r}")
        if self.loss not in ("plain", "class_balanced"):
            raise InputError(f"unknown loss {self.loss!r}")
        if min(self.epochs, self.batch_size) < 1 or self.learning_rate <= 0:
            raise InputError("finetune config values must be positive")


@dataclass(frozen=True)
class BaselineConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    frob_dist: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)
    wall_time_s: float = 0.0
    final_accuracy: float | None = None
    final_mean_cosine: float | None = None
    final_mean_abs_cosine: float | None = None

    def to_csv(self, path, header_comment: str | None = None) -> None:
        # Wall time is intentionally not written: emitted logs must be
        # byte-identical across reruns with the same seed.
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "acc", "frob_dist"])
            for row in self.epochs:
                writer.writerow([row.epoch, repr(row.loss), repr(row.accuracy), repr(row.frob_dist)])


# ---------------------------------------------------------------------------
# Instance marshalling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileInstance:
    """A night profile with the outcome label stripped; the only thing the
    pretraining path is allowed to see."""

    instance_index: int
    temporal: np.ndarray
    statics: np.ndarray


def strip_labels(instances: list[NightInstance]) -> list[ProfileInstance]:
    return [
        ProfileInstance(inst.instance_index, inst.temporal, inst.statics) for inst in instances
    ]


def to_arrays(instances) -> tuple[Array, Array]:
    temporal = np.stack([np.asarray(inst.temporal, dtype=np.float64) for inst in instances])
    statics = np.stack([np.asarray(inst.statics, dtype=np.float64) for inst in instances])
    return temporal, statics


def labels_of(instances: list[NightInstance]) -> Array:
    return np.array([inst.label for inst in instances], dtype=np.int64)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def erm_loss(
    batch: tuple[Array, Array, Array],
    params: ParamSet,
    config: ModelConfig,
    class_weights: Array | None = None,
) -> tuple[float, ng.Gradients]:
    """Mean (optionally class-weighted) cross-entropy over one batch and the
    gradients of every parameter."""
    loss, grads, _ = _loss_and_grads(batch, params, config, class_weights)
    return loss, grads


def _loss_and_grads(batch, params, config, class_weights):
    temporal, statics, labels = batch
    if temporal.shape[0] == 0:
        raise InputError("empty batch")
    ng.reset_grads(params)
    logits, _ = M.forward_batch(temporal, statics, params, config)
    out = ng.cross_entropy(logits, labels, class_weights)
    predictions = logits.data.argmax(axis=1)
    loss = out.item()
    out.backward()
    return loss, ng.collect_grads(params), int((predictions == labels).sum())


def class_balanced_weights(
    stats: ClassStats, scheme: str = "inverse_frequency", beta: float | None = None
) -> Array:
    """Per-class loss weights for a two-class problem.

    inverse_frequency: w_c = n / (C * n_c).
    effective_number: w_c proportional to (1 - beta) / (1 - beta^{n_c}),
    normalized so that sum_c w_c * n_c = n.
    """
    counts = np.array([stats.n_neg, stats.n_pos], dtype=np.float64)
    if np.any(counts <= 0):
        raise InputError("both classes must be non-empty")
    if scheme == "inverse_frequency":
        return stats.n / (stats.n_classes * counts)
    if scheme == "effective_number":
        if beta is None or not 0.0 <= beta < 1.0:
            raise InputError(f"effective_number needs beta in [0, 1), got {beta}")
        raw = (1.0 - beta) / (1.0 - np.power(beta, counts))
        return raw * stats.n / float(raw @ counts)
    raise InputError(f"unknown weighting scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Shared training loop
# ---------------------------------------------------------------------------


def _evaluate(temporal, statics, labels, params, config) -> tuple[float, float]:
    probs_loss = 0.0
    correct = 0
    n = temporal.shape[0]
    for lo in range(0, n, 512):
        logits, _ = M.forward_batch(temporal[lo : lo + 512], statics[lo : lo + 512], params, config)
        loss, _ = ng.softmax_xent(logits.data, labels[lo : lo + 512])
        probs_loss += loss * logits.data.shape[0]
        correct += int((logits.data.argmax(axis=1) == labels[lo : lo + 512]).sum())
    return probs_loss / n, correct / n


def _train(
    temporal: Array,
    statics: Array,
    labels: Array,
    params: ParamSet,
    config: ModelConfig,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    seed: int,
    class_weights: Array | None = None,
    theta0: ParamSet | None = None,
    lam: float = 0.0,
    gamma: float | None = None,
) -> tuple[ParamSet, TrainLog]:
    """Mini-batch Adam over the full objective.

    With ``theta0`` set, either a quadratic pull-back of strength ``lam`` is
    added analytically to the non-head gradients, or (``gamma`` set) the
    parameters are projected back onto the ball around theta0 after every step.
    """
    started = time.perf_counter()
    reference = theta0 if theta0 is not None else params
    state = ng.init_adam(params, learning_rate)
    log = TrainLog()
    n = temporal.shape[0]
    for epoch in range(1, epochs + 1):
        order = derive_rng(seed, "epoch", epoch).permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            batch = (temporal[idx], statics[idx], labels[idx])
            loss, grads, correct = _loss_and_grads(batch, params, config, class_weights)
            if theta0 is not None and lam > 0.0:
                for name, p in params.items():
                    if not M.is_head(name):
                        grads[name] = grads[name] + lam * (p.data - theta0[name].data)
            params, state = ng.adam_step(params, grads, state)
            if theta0 is not None and gamma is not None:
                params = M.project_to_ball(params, theta0, gamma, exclude_head=True)
            epoch_loss += loss * len(idx)
            epoch_correct += correct
        log.epochs.append(
            EpochStats(
                epoch=epoch,
                loss=epoch_loss / n,
                accuracy=epoch_correct / n,
                frob_dist=M.frobenius_distance(params, reference, exclude_head=True),
            )
        )
    log.wall_time_s = time.perf_counter() - started
    return params, log


# ---------------------------------------------------------------------------
# Public procedures
# ---------------------------------------------------------------------------


def _pairwise_cosine_stats(reps: Array, seed: int, cap: int = 1024) -> tuple[float, float]:
    """Mean signed and mean absolute pairwise cosine between representations."""
    n = reps.shape[0]
    if n > cap:
        idx = derive_rng(seed, "cosine").choice(n, size=cap, replace=False)
        reps = reps[idx]
        n = cap
    norms = np.linalg.norm(reps, axis=1, keepdims=True)
    unit = reps / np.where(norms > 0.0, norms, 1.0)
    gram = unit @ unit.T
    off = gram[~np.eye(n, dtype=bool)]
    return float(off.mean()), float(np.abs(off).mean())


def nprl_pretrain(
    profiles: list[ProfileInstance],
    model_config: ModelConfig,
    schema: FeatureSchema,
    config: PretrainConfig,
) -> tuple[ParamSet, TrainLog]:
    """Instance-discrimination pretraining: an n-way head where the target of
    each profile is its own identity.

    Profiles must carry unique indices; class ids are their dense enumeration
    in input order. The log carries per-epoch identification accuracy, a
    pre-training epoch-0 row, and the final pairwise-cosine statistics of the
    representations.
    """
    indices = [p.instance_index for p in profiles]
    if len(set(indices)) != len(indices):
        raise InputError("profile instance indices must be unique for pretraining")
    n = len(profiles)
    if n < 2:
        raise InputError("pretraining needs at least two profiles")
    temporal, statics = to_arrays(profiles)
    labels = np.arange(n, dtype=np.int64)
    pretrain_model = replace(model_config, head_classes=n)
    params = M.init_params(pretrain_model, schema, seed=config.seed)

    loss0, acc0 = _evaluate(temporal, statics, labels, params, pretrain_model)
    params, log = _train(
        temporal,
        statics,
        labels,
        params,
        pretrain_model,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        seed=config.seed,
    )
    log.epochs.insert(0, EpochStats(epoch=0, loss=loss0, accuracy=acc0, frob_dist=0.0))
    _, log.final_accuracy = _evaluate(temporal, statics, labels, params, pretrain_model)
    reps = M.compute_representations(temporal, statics, params, pretrain_model)
    log.final_mean_cosine, log.final_mean_abs_cosine = _pairwise_cosine_stats(reps, config.seed)
    return params, log


def finetune(
    instances: list[NightInstance],
    theta0: ParamSet,
    config: FinetuneConfig,
    model_config: ModelConfig,
    schema: FeatureSchema,
) -> tuple[ParamSet, TrainLog]:
    """Outcome training started at the pretrained parameters.

    ``theta0`` must already carry the outcome head (see ``replace_head``); the
    head is excluded from both the penalty and the projection since it did not
    exist at pretraining time. In regularized mode the pull-back gradient
    lam * (theta - theta0) is added analytically; in projected mode the
    parameters are projected onto the gamma-ball after every optimizer step.
    """
    if theta0["head.W"].dims[1] != model_config.head_classes:
        raise InputError("theta0 head does not match the configured class count; call replace_head first")
    if config.mode == "projected" and config.gamma <= 0.0:
        raise InputError(f"projected mode needs gamma > 0, got {config.gamma}")
    temporal, statics = to_arrays(instances)
    labels = labels_of(instances)
    class_weights = None
    if config.loss == "class_balanced":
        class_weights = class_balanced_weights(ClassStats.from_instances(instances))
    params = dict(theta0)
    return _train(
        temporal,
        statics,
        labels,
        params,
        model_config,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        seed=config.seed,
        class_weights=class_weights,
        theta0=theta0,
        lam=config.lam if config.mode == "regularized" else 0.0,
        gamma=config.gamma if config.mode == "projected" else None,
    )


def train_baseline(
    instances: list[NightInstance],
    model_config: ModelConfig,
    schema: FeatureSchema,
    config: BaselineConfig,
    class_weights: Array | None = None,
    initial_params: ParamSet | None = None,
) -> tuple[ParamSet, TrainLog]:
    """Randomly initialized ERM training; the comparison arm for everything."""
    temporal, statics = to_arrays(instances)
    labels = labels_of(instances)
    params = (
        dict(initial_params)
        if initial_params is not None
        else M.init_params(model_config, schema, seed=config.seed)
    )
    return _train(
        temporal,
        statics,
        labels,
        params,
        model_config,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        seed=config.seed,
        class_weights=class_weights,
    )
