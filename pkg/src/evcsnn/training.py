"""Spike-count loss, Adam, and the mini-batch training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .network import NetworkConfig, NetworkWeights, backward, forward, init_weights, predict

logger = logging.getLogger(__name__)

Sample = tuple[np.ndarray, int]


@dataclass(frozen=True)
class LossTargets:
    correct_rate: float = 0.8
    incorrect_rate: float = 0.2

    def __post_init__(self) -> None:
        for name in ("correct_rate", "incorrect_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


def spike_count_loss(
    spikes: np.ndarray, labels: Sequence[int], targets: LossTargets = LossTargets()
) -> tuple[float, np.ndarray]:
    """Mean squared error between firing rates and target rates.

    Args:
        spikes: Output spikes ``[T, B, K]``.
        labels: Class index of each of the ``B`` samples.
        targets: Target firing rate for the labelled neuron and for the rest.

    Returns:
        ``(loss, grad)`` where ``grad`` has the shape of ``spikes``. The loss
        is averaged over samples and classes; every time step of a neuron
        receives the same gradient because the rate is a plain sum over time.
    """
    spikes = np.asarray(spikes, dtype=np.float64)
    if spikes.ndim != 3:
        raise ValueError(f"spikes must be [T, B, K], got {spikes.shape}")
    t, b, k = spikes.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    target = np.full((b, k), targets.incorrect_rate)
    target[np.arange(b), labels] = targets.correct_rate
    diff = spikes.sum(axis=0) / t - target
    loss = float(np.mean(diff**2))
    grad = np.broadcast_to(2.0 * diff / (t * b * k), spikes.shape).copy()
    return loss, grad


@dataclass(frozen=True)
class AdamParams:
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


class Adam:
    """Bias-corrected Adam over a :class:`NetworkWeights` set."""

    def __init__(self, params: AdamParams = AdamParams()):
        self.params = params
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, weights: NetworkWeights, grads: NetworkWeights) -> NetworkWeights:
        """Update ``weights`` in place and return them."""
        for name, g in grads.items():
            if g.shape != weights[name].shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {weights[name].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
        p = self.params
        self.step_count += 1
        bc1 = 1.0 - p.beta1**self.step_count
        bc2 = 1.0 - p.beta2**self.step_count
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= p.beta1
            m += (1.0 - p.beta1) * g
            v *= p.beta2
            v += (1.0 - p.beta2) * g * g
            weights[name][...] -= p.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + p.epsilon)
        return weights


def adam_step(
    weights: NetworkWeights, grads: NetworkWeights, optimizer: Adam
) -> NetworkWeights:
    return optimizer.step(weights, grads)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 25
    seed: int = 0
    shuffle: bool = True
    targets: LossTargets = field(default_factory=LossTargets)
    adam: AdamParams = field(default_factory=AdamParams)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class MetricsRow:
    epoch: int
    iteration: int
    train_loss: float
    train_accuracy: float
    val_loss: float | None = None
    val_accuracy: float | None = None


def iterations_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def minibatches(order: Sequence[int], batch_size: int) -> list[list[int]]:
    """Split an index order into consecutive mini-batches, keeping a short last one."""
    order = list(order)
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _frames(sample_frames: np.ndarray) -> np.ndarray:
    return np.asarray(sample_frames, dtype=np.float64)


def batch_gradients(
    samples: Sequence[Sample],
    weights: NetworkWeights,
    net: NetworkConfig,
    targets: LossTargets,
) -> tuple[float, float, NetworkWeights]:
    """Loss, accuracy and mean-loss gradient for one mini-batch.

    Samples run one at a time; their gradients are summed in batch order, so
    the result does not depend on anything but the inputs.
    """
    records = [forward(_frames(f), weights, net) for f, _ in samples]
    labels = [label for _, label in samples]
    spikes = np.stack([r.output_spikes for r in records], axis=1)
    loss, grad = spike_count_loss(spikes, labels, targets)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    total = NetworkWeights.zeros_like(weights)
    for b, rec in enumerate(records):
        g = backward(rec, grad[:, b, :], weights, net)
        for name, arr in g.items():
            total.tensors[name] += arr
    correct = sum(predict(r) == y for r, y in zip(records, labels))
    return loss, correct / len(samples), total


def evaluate(
    samples: Sequence[Sample],
    weights: NetworkWeights,
    net: NetworkConfig,
    targets: LossTargets = LossTargets(),
) -> tuple[float, float]:
    """Loss and accuracy over a whole data set, without touching the weights."""
    if len(samples) == 0:
        raise ValueError("cannot evaluate an empty data set")
    sq_sum = 0.0
    correct = 0
    for frames, label in samples:
        rec = forward(_frames(frames), weights, net)
        loss, _ = spike_count_loss(rec.output_spikes[:, None, :], [label], targets)
        sq_sum += loss
        correct += predict(rec) == label
    # every sample contributes the same number of squared errors, so the mean
    # of per-sample losses is the loss of the concatenated set
    return sq_sum / len(samples), correct / len(samples)


def train(
    samples: Sequence[Sample],
    config: TrainConfig,
    net: NetworkConfig,
    val_samples: Sequence[Sample] | None = None,
    weights: NetworkWeights | None = None,
    progress: Callable[[MetricsRow], None] | None = None,
) -> tuple[NetworkWeights, list[MetricsRow]]:
    """Mini-batch training with Adam.

    Per epoch the sample order is shuffled (when enabled) and cut into
    ``ceil(N / batch_size)`` mini-batches. One :class:`MetricsRow` is recorded
    per iteration; the validation columns are filled on the last row of each
    epoch when ``val_samples`` is given.
    """
    if len(samples) == 0:
        raise ValueError("cannot train on an empty data set")
    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    if weights is None:
        weights = init_weights(net, np.random.default_rng(init_seq))
    else:
        weights.check(net)
        weights = weights.copy()
    shuffle_rng = np.random.default_rng(shuffle_seq)
    optimizer = Adam(config.adam)
    history: list[MetricsRow] = []
    iteration = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(samples)) if config.shuffle else np.arange(len(samples))
        for batch in minibatches(order.tolist(), config.batch_size):
            loss, acc, grads = batch_gradients(
                [samples[i] for i in batch], weights, net, config.targets
            )
            optimizer.step(weights, grads)
            iteration += 1
            row = MetricsRow(epoch, iteration, loss, acc)
            history.append(row)
            if progress is not None:
                progress(row)
        if val_samples:
            history[-1].val_loss, history[-1].val_accuracy = evaluate(
                val_samples, weights, net, config.targets
            )
            logger.info(
                "epoch %d val loss %.6f acc %.4f", epoch, history[-1].val_loss, history[-1].val_accuracy
            )
    return weights, history


METRICS_HEADER = ["epoch", "iteration", "train_loss", "train_acc", "val_loss", "val_acc"]


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def export_metrics(history: Sequence[MetricsRow], path: str | Path) -> None:
    """Write the history as CSV; floats use their shortest round-trip form."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in history:
            writer.writerow(
                [r.epoch, r.iteration, _fmt(r.train_loss), _fmt(r.train_accuracy),
                 _fmt(r.val_loss), _fmt(r.val_accuracy)]
            )


def load_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        opt = lambda s: float(s) if s else None  # noqa: E731
        return [
            MetricsRow(int(e), int(i), float(tl), float(ta), opt(vl), opt(va))
            for e, i, tl, ta, vl, va in reader
        ]
