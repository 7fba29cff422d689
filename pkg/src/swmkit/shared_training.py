"""Sequential shared-weight training of N models with decreasing sparsity.

Model 1 trains the high-sparsity mask from the initial weights. Every later
model starts from its predecessor, adds the initial weights at its newly kept
positions and trains only those; everything the predecessor kept is frozen.
Shared positions therefore hold bit-identical values in all models.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_images_labels
from .patterns import SHARING_COSTS, ModelAssignment, Pattern, PatternLibrary, layer_masks, prunable_layers, uniform_assignment
from .tensor_nn import (
    Dataset,
    NetworkDef,
    TrainedModel,
    evaluate_accuracy,
    forward,
    init_model,
    is_weighted,
    to_kernels,
    train_epochs,
)


@dataclass
class MaskSchedule:
    """Per-model full masks (monotone kept sets) and the increments between them."""

    net: NetworkDef
    full_masks: list[list[Optional[np.ndarray]]]
    increments: list[list[Optional[np.ndarray]]]
    prunable: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.full_masks)

    def kept(self, k: int, layers: Optional[Sequence[int]] = None) -> int:
        layers = self.prunable if layers is None else layers
        return int(sum(self.full_masks[k][i].sum() for i in layers))

    def sparsity(self, k: int) -> float:
        total = sum(self.full_masks[k][i].size for i in self.prunable)
        return 1.0 - self.kept(k) / total if total else 0.0

    def sharing_cost(self, cost: str = "union_minus_intersection") -> int:
        """Divergence of the per-model kernel patterns, summed over all kernels."""
        fn = SHARING_COSTS[cost]
        total = 0
        for i in self.prunable:
            layer = self.net.layers[i]
            per_model = [to_kernels(layer, m[i]) for m in self.full_masks]
            for kernels in zip(*per_model):
                total += fn([Pattern.from_array(k) for k in kernels])
        return total


def build_mask_schedule(net: NetworkDef, assignments: Sequence[ModelAssignment], library: PatternLibrary) -> MaskSchedule:
    """Turn per-model assignments (ordered high to low sparsity) into a monotone schedule.

    A model's kept set is OR-ed with its predecessor's, so a bit kept only by
    a sparser model stays kept (and shared) in every later model.
    """
    if not assignments:
        raise ValueError("need at least one assignment")
    full, inc = [], []
    prev = None
    for k, assignment in enumerate(assignments):
        try:
            masks = layer_masks(net, assignment, library)
        except KeyError as exc:
            raise ValueError(f"model {k}: {exc.args[0]}") from None
        if prev is None:
            inc.append([None if m is None else m.copy() for m in masks])
        else:
            masks = [None if m is None else (m | p) for m, p in zip(masks, prev)]
            inc.append([None if m is None else (m & ~p) for m, p in zip(masks, prev)])
        full.append(masks)
        prev = masks
    return MaskSchedule(net, full, inc, tuple(prunable_layers(net, library)))


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    pretrain_epochs: int = 0


@dataclass
class ModelReport:
    index: int
    sparsity: float
    accuracy: float
    epoch_losses: list[float]
    latency_predicted: Optional[float] = None


@dataclass
class SharedTrainingReport:
    models: list[ModelReport]
    sharing_verified: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model_index", "sparsity", "accuracy", "latency_predicted"])
        for m in self.models:
            lat = "" if m.latency_predicted is None else f"{m.latency_predicted:.9g}"
            writer.writerow([m.index, f"{m.sparsity:.6f}", f"{m.accuracy:.6f}", lat])
        return buf.getvalue()


def train_shared_sequence(
    net: NetworkDef,
    schedule: MaskSchedule,
    data: Dataset,
    config: TrainConfig = TrainConfig(),
) -> tuple[list[TrainedModel], SharedTrainingReport]:
    if schedule.net != net:
        raise ValueError("schedule was built for a different network")
    rng = np.random.default_rng(config.seed)
    initial = init_model(net, seed=config.seed)
    if config.pretrain_epochs:
        initial, _ = train_epochs(initial, data.x_train, data.y_train, config.pretrain_epochs, config.lr, config.batch_size, rng)

    models: list[TrainedModel] = []
    reports: list[ModelReport] = []
    for k in range(len(schedule)):
        masks = schedule.full_masks[k]
        if k == 0:
            weights = [None if w is None else np.where(m, w, 0).astype(w.dtype) for w, m in zip(initial.weights, masks)]
            biases = [None if b is None else b.copy() for b in initial.biases]
            frozen = None
        else:
            prev = models[-1]
            incs = schedule.increments[k]
            weights = [
                None if w is None else np.where(inc, w0, w).astype(w.dtype)
                for w, w0, inc in zip(prev.weights, initial.weights, incs)
            ]
            biases = [None if b is None else b.copy() for b in prev.biases]
            frozen = schedule.full_masks[k - 1]
        model = TrainedModel(net, weights, biases, [None if m is None else m.copy() for m in masks])
        try:
            model, losses = train_epochs(model, data.x_train, data.y_train, config.epochs, config.lr, config.batch_size, rng, frozen)
        except FloatingPointError as exc:
            raise FloatingPointError(f"model {k}: {exc}") from None
        models.append(model)
        acc = evaluate_accuracy(model, data.x_holdout, data.y_holdout)
        reports.append(ModelReport(k, schedule.sparsity(k), acc, losses))
    return models, SharedTrainingReport(reports, verify_sharing(models))


def _bits(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).view(np.uint32 if a.dtype == np.float32 else np.uint64)


def first_sharing_violation(models: Sequence[TrainedModel]):
    """``(model_i, model_j, layer, flat_index)`` of the first disagreement, or None."""
    for i in range(len(models)):
        for j in range(i + 1, len(models)):
            a, b = models[i], models[j]
            for layer in a.net.weighted_layers():
                both = a.masks[layer] & b.masks[layer]
                diff = both & (_bits(a.weights[layer]) != _bits(b.weights[layer]))
                if diff.any():
                    return (i, j, layer, int(np.flatnonzero(diff)[0]))
    return None


def verify_sharing(models: Sequence[TrainedModel], schedule: Optional[MaskSchedule] = None) -> bool:
    """True iff every pair of models agrees bit-exactly wherever both keep a weight."""
    if schedule is not None and len(schedule) != len(models):
        raise ValueError("models and schedule have different lengths")
    return first_sharing_violation(models) is None


def _kept_masks(source, k: int):
    if isinstance(source, MaskSchedule):
        return [source.full_masks[k][i] for i in source.net.weighted_layers()]
    return [source[k].masks[i] for i in source[k].net.weighted_layers()]


def switching_write_cost(source, from_index: int, to_index: int, shared: bool = True) -> int:
    """Weights that must be written when switching models.

    With sharing only positions the target keeps and the current model lacks
    are written; without it the whole target model is rewritten.
    ``source`` is a list of models or a :class:`MaskSchedule`.
    """
    n = len(source)
    if not (0 <= from_index < n and 0 <= to_index < n):
        raise IndexError("model index out of range")
    if from_index == to_index:
        return 0
    dst = _kept_masks(source, to_index)
    if not shared:
        return int(sum(m.sum() for m in dst))
    src = _kept_masks(source, from_index)
    return int(sum((d & ~s).sum() for d, s in zip(dst, src)))


class SharedWeightTrainer(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_shared_sequence`.

    ``pattern_ids`` picks one library pattern per model, applied to every
    prunable kernel; pass ``assignments`` instead for per-kernel control.
    ``predict`` uses the model selected by ``active_model``.
    """

    def __init__(
        self,
        network: Optional[NetworkDef] = None,
        library: Optional[PatternLibrary] = None,
        pattern_ids: Optional[Sequence[int]] = None,
        assignments: Optional[Sequence[ModelAssignment]] = None,
        epochs: int = 5,
        lr: float = 0.05,
        batch_size: int = 32,
        pretrain_epochs: int = 0,
        random_state: int = 0,
        active_model: int = -1,
    ):
        self.network = network
        self.library = library
        self.pattern_ids = pattern_ids
        self.assignments = assignments
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.random_state = random_state
        self.active_model = active_model

    def _assignments(self, net):
        if self.assignments is not None:
            return list(self.assignments)
        if self.library is None or self.pattern_ids is None:
            raise ValueError("give either assignments or library + pattern_ids")
        return [uniform_assignment(net, self.library, int(p)) for p in self.pattern_ids]

    def fit(self, X, y, X_holdout=None, y_holdout=None):
        from .tensor_nn import toy_network

        X, y = check_images_labels(X, y)
        self.classes_ = np.unique(y)
        net = self.network or toy_network(int(y.max()) + 1, X.shape[-1])
        if X_holdout is None:
            X_holdout, y_holdout = X, y
        else:
            X_holdout, y_holdout = check_images_labels(X_holdout, y_holdout)
        data = Dataset(X, y, X_holdout, y_holdout, net.num_classes)
        self.schedule_ = build_mask_schedule(net, self._assignments(net), self.library)
        cfg = TrainConfig(self.epochs, self.lr, self.batch_size, self.random_state, self.pretrain_epochs)
        self.models_, self.report_ = train_shared_sequence(net, self.schedule_, data, cfg)
        self.network_ = net
        return self

    def decision_function(self, X):
        check_is_fitted(self, "models_")
        return forward(self.models_[self.active_model], check_images(X, self.network_))

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def predict_all(self, X) -> np.ndarray:
        """Predictions of every model, shape ``(n_models, n_samples)``."""
        check_is_fitted(self, "models_")
        X = check_images(X, self.network_)
        return np.stack([forward(m, X).argmax(axis=1) for m in self.models_])
