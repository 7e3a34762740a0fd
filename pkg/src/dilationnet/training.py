"""Loss, optimizer, and the two training stages.

Stage 1 trains a full single-resolution net; stage 2 trains only the dense
head over frozen multi-resolution backbones.  Both stages share the loss,
the Adam step, the validation holdout, and the per-epoch trace format.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, checkpoint_from_net
from .data import (
    AugmentationConfig,
    Dataset,
    epoch_order,
    iter_batches,
    multi_res_batches,
    stratified_holdout,
)
from .fusion import (
    FrozenBackbone,
    FusionSpec,
    build_fusion_head,
    fused_features,
    fusion_checkpoint,
    fused_width,
)
from .networks import RESOLUTION_BY_VARIANT, NetStructure, build_for_variant
from .tensor import ComputationRecord, Tensor, backward, record_op

PRED_CLAMP = 1e-7
VALIDATION_SHARE = 0.1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        # learning_rate 0 is admitted so the no-op update property is testable
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError(f"need 0 < beta1 < beta2 < 1, got "
                             f"{self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be >= 1 or None, got {self.patience}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


TRACE_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


def trace_to_csv(trace: Sequence[EpochStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in trace:
        writer.writerow([row.epoch, f"{row.train_loss:.6f}", f"{row.train_acc:.6f}",
                         f"{row.val_loss:.6f}", f"{row.val_acc:.6f}"])
    return buf.getvalue()


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the epoch index and the trace so far."""

    def __init__(self, epoch: int, trace: list[EpochStats]):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch
        self.trace = trace


# -- loss ----------------------------------------------------------------------

def loss_terms(pred: np.ndarray, label: np.ndarray,
               weights: Sequence[np.ndarray], lam: float) -> tuple[float, float]:
    """(data term, regularization term) of the objective, in float64."""
    p = np.clip(pred.astype(np.float64).reshape(-1), PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = label.astype(np.float64).reshape(-1)
    data = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    n = pred.shape[0]
    reg = float(lam / (2.0 * n) * sum(np.sum(w.astype(np.float64) ** 2)
                                      for w in weights))
    return data, reg


def bce_l2_loss(pred: Tensor, label, weights: Sequence[Tensor] = (),
                lam: float = 0.0) -> Tensor:
    """Mean binary cross-entropy plus lam/(2n) times the sum of squared
    connection weights (biases and BN affine excluded by the caller's choice
    of tensors).  n is the batch size."""
    y = np.asarray(label, dtype=pred.data.dtype).reshape(pred.shape)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    if lam < 0:
        raise ValueError(f"l2 coefficient must be >= 0, got {lam}")
    data, reg = loss_terms(pred.data, y, [w.data for w in weights], lam)
    out = Tensor(np.array([data + reg]), dtype=pred.data.dtype)

    n = pred.shape[0]
    count = pred.size
    p64 = pred.data.astype(np.float64)
    inside = (p64 >= PRED_CLAMP) & (p64 <= 1.0 - PRED_CLAMP)
    p = np.clip(p64, PRED_CLAMP, 1.0 - PRED_CLAMP)

    def grad(gout):
        g = float(gout.reshape(-1)[0])
        dpred = np.where(inside, (p - y.astype(np.float64)) / (p * (1.0 - p)), 0.0)
        dpred *= g / count
        grads = [dpred.astype(pred.data.dtype)]
        grads.extend((g * lam / n) * w.data for w in weights)
        return grads

    record_op("bce_l2", [pred, *weights], out, grad)
    return out


# -- optimizer -------------------------------------------------------------------

class OptimizerState:
    """Adam moment estimates, one pair per named parameter."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.first = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.second = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: OptimizerState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place.  Validates every gradient before
    touching any parameter so a bad batch cannot half-apply."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {name!r} {params[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(
                f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    correct1 = 1.0 - cfg.beta1 ** state.t
    correct2 = 1.0 - cfg.beta2 ** state.t
    for name, g in grads.items():
        tensor = params[name]
        g = g.astype(tensor.data.dtype, copy=False)
        v = state.first[name]
        s = state.second[name]
        v *= cfg.beta1
        v += (1.0 - cfg.beta1) * g
        s *= cfg.beta2
        s += (1.0 - cfg.beta2) * g * g
        tensor.data -= cfg.learning_rate * (v / correct1) / (
            np.sqrt(s / correct2) + cfg.epsilon)


# -- shared stage machinery -------------------------------------------------------

def _accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((scores.reshape(-1) >= 0.5) == (labels.reshape(-1) >= 0.5)))


def _holdout(dataset: Dataset, seed: int) -> tuple[list[str], list[str]]:
    ids = dataset.manifest.partition_ids("train")
    if not ids:
        raise ValueError("dataset has no training partition; split it first")
    labels = dataset.manifest.labels_for(ids)
    return stratified_holdout(ids, labels, VALIDATION_SHARE, seed=seed)


class _BestTracker:
    """Best validation accuracy; ties to lower loss, then the earlier epoch.

    Seeded with the initialization snapshot so a zero-epoch run (or one that
    never improves) still checkpoints something well-defined.
    """

    def __init__(self, initial_snapshot):
        self.epoch = 0
        self.acc = -1.0
        self.loss = np.inf
        self.snapshot = initial_snapshot

    def offer(self, epoch: int, acc: float, loss: float, take_snapshot) -> None:
        if acc > self.acc or (acc == self.acc and loss < self.loss):
            self.epoch, self.acc, self.loss = epoch, acc, loss
            self.snapshot = take_snapshot()

    def stale_for(self, epoch: int) -> int:
        return epoch - self.epoch


def _snapshot_net(net: NetStructure):
    params = {name: t.data.copy() for name, t in net.params.items()}
    moments = {name: (st.running_mean.copy(), st.running_var.copy())
               for name, st in net.bn_states.items()}
    return params, moments


def _restore_net(net: NetStructure, snapshot) -> None:
    params, moments = snapshot
    for name, arr in params.items():
        net.params[name] = Tensor(arr.copy())
    for name, (mean, var) in moments.items():
        net.bn_states[name].running_mean = mean.copy()
        net.bn_states[name].running_var = var.copy()


# -- stage 1 ----------------------------------------------------------------------

def train_stage1(variant: str, dataset: Dataset, cfg: TrainConfig,
                 augment_cfg: AugmentationConfig | None = None,
                 ) -> tuple[Checkpoint, list[EpochStats]]:
    """Train one full DilationNet on its native resolution; keep the best
    validation epoch.  Returns the checkpoint and the per-epoch trace."""
    resolution = RESOLUTION_BY_VARIANT.get(variant)
    if resolution is None:
        raise ValueError(f"unknown variant {variant!r}")
    fit_ids, val_ids = _holdout(dataset, cfg.seed)
    net = build_for_variant(variant, seed=cfg.seed)
    state = OptimizerState(net.params)
    trace: list[EpochStats] = []
    best = _BestTracker(_snapshot_net(net))

    def validate() -> tuple[float, float]:
        scores, labels = [], []
        for batch in iter_batches(dataset, val_ids, resolution, cfg.batch_size):
            scores.append(net.forward(batch.images).data.reshape(-1))
            labels.append(batch.labels)
        scores, labels = np.concatenate(scores), np.concatenate(labels)
        data, _ = loss_terms(scores, labels, [], 0.0)
        return data, _accuracy(scores, labels)

    for epoch in range(1, cfg.epochs + 1):
        seen = correct = 0
        loss_sum = 0.0
        for batch in iter_batches(dataset, fit_ids, resolution, cfg.batch_size,
                                  augment_cfg=augment_cfg, seed=cfg.seed,
                                  epoch=epoch, shuffle=True):
            with ComputationRecord() as rec:
                pred = net.forward(batch.images, training=True)
                loss = bce_l2_loss(pred, batch.labels, net.weight_tensors(),
                                   cfg.l2)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, trace)
            grads = backward(loss, rec, targets=net.params.values())
            adam_step(net.params,
                      {name: grads[t] for name, t in net.params.items()},
                      state, cfg)
            n = len(batch.ids)
            loss_sum += value * n
            seen += n
            correct += int(np.sum((pred.data.reshape(-1) >= 0.5) == batch.labels))
        train_loss = loss_sum / seen
        val_loss, val_acc = validate()
        trace.append(EpochStats(epoch, train_loss, correct / seen,
                                val_loss, val_acc))
        best.offer(epoch, val_acc, val_loss, lambda: _snapshot_net(net))
        if cfg.patience is not None and best.stale_for(epoch) >= cfg.patience:
            break

    _restore_net(net, best.snapshot)
    provenance = {"stage": 1, "variant": variant, "seed": cfg.seed,
                  "epochs": len(trace), "best_epoch": best.epoch,
                  "val_acc": round(max(best.acc, 0.0), 6)}
    return checkpoint_from_net(net, provenance=provenance), trace


# -- stage 2 ----------------------------------------------------------------------

def _cached_features(backbones: Sequence[FrozenBackbone], dataset: Dataset,
                     ids: Sequence[str], resolutions: Sequence[int],
                     batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    chunks, labels = [], []
    for group in multi_res_batches(dataset, ids, resolutions, batch_size):
        chunks.append(fused_features(backbones, group).data)
        labels.append(group[resolutions[0]].labels)
    return np.concatenate(chunks), np.concatenate(labels)


def train_stage2(spec: FusionSpec, backbones: Sequence[FrozenBackbone],
                 dataset: Dataset, cfg: TrainConfig,
                 augment_cfg: AugmentationConfig | None = None,
                 ) -> tuple[Checkpoint, list[EpochStats]]:
    """Train the fusion head on frozen backbone features.

    With augmentation off the member features are fixed per sample, so they
    are computed once and the epochs run over the cached matrix; with it on,
    features are recomputed from fresh draws each epoch.
    """
    ordered = sorted(backbones, key=lambda bb: bb.resolution)
    if tuple(bb.variant for bb in ordered) != spec.members:
        raise ValueError(f"backbones {[bb.variant for bb in ordered]} do not "
                         f"match fusion members {spec.members}")
    fit_ids, val_ids = _holdout(dataset, cfg.seed)
    head = build_fusion_head(spec, fused_width(ordered), seed=cfg.seed)
    state = OptimizerState(head.params)
    trace: list[EpochStats] = []
    best = _BestTracker(_snapshot_net(head))
    resolutions = spec.resolutions

    static = augment_cfg is None or not augment_cfg.any_enabled()
    if static:
        fit_x, fit_y = _cached_features(ordered, dataset, fit_ids, resolutions,
                                        cfg.batch_size)
    val_x, val_y = _cached_features(ordered, dataset, val_ids, resolutions,
                                    cfg.batch_size)

    def train_batches(epoch: int):
        if static:
            order = epoch_order(len(fit_ids), cfg.seed, epoch)
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                yield Tensor(fit_x[idx]), fit_y[idx]
        else:
            for group in multi_res_batches(dataset, fit_ids, resolutions,
                                           cfg.batch_size, augment_cfg=augment_cfg,
                                           seed=cfg.seed, epoch=epoch, shuffle=True):
                yield (fused_features(ordered, group),
                       group[resolutions[0]].labels)

    for epoch in range(1, cfg.epochs + 1):
        seen = correct = 0
        loss_sum = 0.0
        for features, labels in train_batches(epoch):
            with ComputationRecord() as rec:
                pred = head.forward(features)
                loss = bce_l2_loss(pred, labels, head.weight_tensors(), cfg.l2)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, trace)
            grads = backward(loss, rec, targets=head.params.values())
            adam_step(head.params,
                      {name: grads[t] for name, t in head.params.items()},
                      state, cfg)
            n = labels.shape[0]
            loss_sum += value * n
            seen += n
            correct += int(np.sum((pred.data.reshape(-1) >= 0.5) == labels))
        scores = head.forward(val_x).data.reshape(-1)
        val_loss = loss_terms(scores, val_y, [], 0.0)[0]
        val_acc = _accuracy(scores, val_y)
        trace.append(EpochStats(epoch, loss_sum / seen, correct / seen,
                                val_loss, val_acc))
        best.offer(epoch, val_acc, val_loss, lambda: _snapshot_net(head))
        if cfg.patience is not None and best.stale_for(epoch) >= cfg.patience:
            break

    _restore_net(head, best.snapshot)
    provenance = {"stage": 2, "members": list(spec.members), "seed": cfg.seed,
                  "epochs": len(trace), "best_epoch": best.epoch,
                  "val_acc": round(max(best.acc, 0.0), 6)}
    return fusion_checkpoint(spec, ordered, head, provenance=provenance), trace
