"""Masked multi-task loss, weight decay and the epoch training loop.

Each epoch shuffles the training sets with a seeded generator, augments,
normalizes, forwards, applies the decayed squared-error objective and takes
a Nesterov step; after every epoch the network is evaluated on the
validation split in eval mode and the parameters of the epoch with the
lowest averaged relative validation error are kept. Identical seeds and
data give bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import datapipe, evaluator
from .exceptions import ConfigurationError, LossError, NonFiniteGradientError
from .kernels import NesterovSGD
from .model import ModelConfig, PropertyNet


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-3
    momentum: float = 0.99
    weight_decay: float = 1e-3
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigurationError("learning rate and batch size must be positive")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be >= 0")


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean squared error over unmasked entries only.

    The divisor is the unmasked-entry count, so with an all-true mask this
    is exactly the plain batch MSE over N*K entries. Returns the loss and
    its gradient with respect to the predictions.
    """
    count = int(mask.sum())
    if count == 0:
        raise LossError("every target entry in the batch is masked out")
    diff = np.where(mask, pred - target, 0.0)
    loss = float(np.square(diff, dtype=np.float64).sum() / count)
    grad = (2.0 / count) * diff
    return loss, grad.astype(pred.dtype)


def weight_params(params):
    """Parameters under the squared-weight penalty: conv and fc weights only."""
    return [p for p in params if p.name.endswith(".weight")]


def weight_penalty(params) -> float:
    return float(sum(np.square(p.value, dtype=np.float64).sum() for p in weight_params(params)))


def total_loss(mse_value: float, params, weight_decay: float) -> float:
    """Decayed objective: the data term plus lambda times the squared weights."""
    return mse_value + weight_decay * weight_penalty(params)


def add_weight_decay_grads(params, weight_decay: float) -> None:
    for p in weight_params(params):
        p.grad += (2.0 * weight_decay) * p.value


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_eps_rel: np.ndarray     # (3,) percent, per output
    val_eps_rel_avg: float

    @staticmethod
    def csv_header() -> str:
        return "epoch,train_loss,eps_rel_delta,eps_rel_tau0,eps_rel_mu,eps_rel_avg"

    def csv_row(self) -> str:
        v = self.val_eps_rel
        return (f"{self.epoch},{self.train_loss:.8f},{v[0]:.6f},{v[1]:.6f},{v[2]:.6f},"
                f"{self.val_eps_rel_avg:.6f}")


def reports_csv(reports) -> str:
    return "\n".join([EpochReport.csv_header()] + [r.csv_row() for r in reports]) + "\n"


def predict_sets(net: PropertyNet, sets, stats: datapipe.NormStats, mix_idx=None,
                 batch_size: int = 64) -> np.ndarray:
    """Denormalized (N, 3) predictions in eval mode."""
    preds = []
    for lo in range(0, len(sets), batch_size):
        chunk = sets[lo:lo + batch_size]
        images, delta_t, mix, _, _ = datapipe.normalize_batch(chunk, stats)
        if mix_idx is not None:
            mix = mix[:, mix_idx]
        preds.append(net.forward(images, delta_t, mix, train=False))
    out = np.concatenate(preds, axis=0).astype(np.float64)
    for k, cat in enumerate(datapipe.TARGET_CATEGORIES):
        out[:, k] = datapipe.denorm(out[:, k], stats, cat)
    return out


def validation_report(net, val_sets, stats, mix_idx=None) -> evaluator.MetricReport:
    preds = predict_sets(net, val_sets, stats, mix_idx)
    return evaluator.epsilon_metrics(evaluator.records_from_sets(val_sets, preds))


def refresh_running_stats(net, train_sets, stats, mix_idx=None, batch_size: int = 16,
                          max_batches: int = 50) -> None:
    """Recalibrate batch-norm running statistics with frozen parameters.

    With high momentum the parameters move quickly all through training, so
    the running statistics lag the state they are saved with; a short
    forward-only pass over (un-augmented) training batches brings them back
    in line before eval-mode use.
    """
    n = min(len(train_sets), max_batches * batch_size)
    for lo in range(0, n, batch_size):
        chunk = train_sets[lo:lo + batch_size]
        if len(chunk) < 2:
            break
        images, delta_t, mix, _, _ = datapipe.normalize_batch(chunk, stats)
        if mix_idx is not None:
            mix = mix[:, mix_idx]
        net.forward(images, delta_t, mix, train=True)


def mean_baseline(train_sets) -> np.ndarray:
    """Per-output mean of the unmasked raw training targets (naive predictor)."""
    targets = np.stack([s.targets for s in train_sets]).astype(np.float64)
    masks = np.stack([s.target_mask for s in train_sets])
    return np.array([targets[masks[:, k], k].mean() for k in range(3)])


@dataclass
class TrainResult:
    model: PropertyNet
    stats: datapipe.NormStats
    reports: list = field(default_factory=list)
    best_epoch: int = 0
    optimizer: NesterovSGD = None

    @property
    def best_report(self) -> EpochReport:
        return self.reports[self.best_epoch - 1]


def train_fold(train_sets, val_sets, model_config: ModelConfig, train_config: TrainConfig,
               mix_idx=None, stats: datapipe.NormStats = None,
               progress=None) -> TrainResult:
    """Train on one fold's training split, selecting the best epoch on validation."""
    train_config.validate()
    if stats is None:
        stats = datapipe.fit_norm_stats(train_sets)

    net = PropertyNet(model_config, seed=train_config.seed)
    opt = NesterovSGD(learning_rate=train_config.learning_rate,
                      momentum=train_config.momentum,
                      weight_decay=train_config.weight_decay)
    rng = np.random.default_rng(train_config.seed)
    params = net.params()

    reports = []
    best_avg = np.inf
    best_epoch = 0
    best_state = None
    n = len(train_sets)
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, train_config.batch_size):
            idx = order[lo:lo + train_config.batch_size]
            batch = [datapipe.augment(train_sets[j], rng, stats) for j in idx]
            images, delta_t, mix, targets, mask = datapipe.normalize_batch(batch, stats)
            if mix_idx is not None:
                mix = mix[:, mix_idx]
            net.zero_grads()
            pred = net.forward(images, delta_t, mix, train=True)
            mse, dpred = masked_mse(pred, targets, mask)
            loss = total_loss(mse, params, train_config.weight_decay)
            if not np.isfinite(loss):
                raise NonFiniteGradientError(
                    f"non-finite loss at epoch {epoch}, batch {lo // train_config.batch_size}")
            net.backward(dpred)
            add_weight_decay_grads(params, train_config.weight_decay)
            opt.step(params)
            losses.append(loss)

        refresh_running_stats(net, train_sets, stats, mix_idx,
                              batch_size=train_config.batch_size)
        val = validation_report(net, val_sets, stats, mix_idx)
        avg = evaluator.averaged_eps_rel(val)
        report = EpochReport(epoch=epoch, train_loss=float(np.mean(losses)),
                             val_eps_rel=val.eps_rel, val_eps_rel_avg=avg)
        reports.append(report)
        if progress is not None:
            progress(report)
        if avg < best_avg:
            best_avg = avg
            best_epoch = epoch
            best_state = net.state_dict()

    net.load_state_dict(best_state)
    return TrainResult(model=net, stats=stats, reports=reports, best_epoch=best_epoch,
                       optimizer=opt)
