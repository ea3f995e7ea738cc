"""Noise-injection training with optional negative feedback.

Per batch: sample a weight perturbation, apply it to backbone and exit
weights, run the forward pass and loss at the noisy weights, backpropagate
there, remove the noise, then update the clean weights by SGD with momentum.
Vanilla mode skips the perturbation; "noise" mode uses plain cross-entropy on
the backbone; "nft" adds the exit feedback term.

A non-finite loss ends the run: it is recorded as diverged in the history
rather than raised, so study loops can count failures.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as ops
from .data import Dataset, batches
from .errors import ConfigError, NonFiniteError
from .feedback import FeedbackSpec, negative_feedback_loss
from .network import MultiExitNetwork, accuracy
from .streams import SHUFFLE, TRAIN_NOISE, substream
from .variation import VariationSpec, perturb_weights

MODES = ("vanilla", "noise", "nft")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run besides the dataset."""

    mode: str = "nft"
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    schedule: str = "step"  # "step": x0.1 at 50% and 75% of epochs; or "constant"
    variation: VariationSpec = field(default_factory=VariationSpec)
    feedback: FeedbackSpec = field(default_factory=FeedbackSpec)
    # History metrics are estimated on at most this many examples per split
    # (None = full split); keeps per-epoch bookkeeping cheap on CPU.
    history_eval_limit: int | None = 2048

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigError("epochs/lr must be >= 0 and batch_size >= 1")
        if self.schedule not in ("step", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    @property
    def injects_noise(self) -> bool:
        return self.mode in ("noise", "nft") and self.variation.sigma_d > 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "epochs": self.epochs,
            "lr": self.lr,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "schedule": self.schedule,
            "variation": self.variation.to_dict(),
            "feedback": self.feedback.to_dict(),
            "history_eval_limit": self.history_eval_limit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            mode=d.get("mode", "nft"),
            epochs=int(d.get("epochs", 20)),
            lr=float(d.get("lr", 0.01)),
            momentum=float(d.get("momentum", 0.9)),
            batch_size=int(d.get("batch_size", 128)),
            seed=int(d.get("seed", 0)),
            schedule=d.get("schedule", "step"),
            variation=VariationSpec.from_dict(d.get("variation", {})),
            feedback=FeedbackSpec.from_dict(d.get("feedback", {})),
            history_eval_limit=d.get("history_eval_limit", 2048),
        )


@dataclass
class TrainHistory:
    """Per-epoch clean metrics plus run outcome."""

    train_acc: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    converged: bool = True
    diverged_at: tuple | None = None

    def rows(self):
        for e in range(len(self.train_acc)):
            yield {
                "epoch": e,
                "train_acc": self.train_acc[e],
                "train_loss": self.train_loss[e],
                "test_acc": self.test_acc[e],
                "lr": self.lr[e],
            }


def lr_schedule(epoch: int, base_lr: float, schedule: str, epochs: int) -> float:
    """Deterministic, non-increasing learning rate for the given epoch."""
    if schedule == "constant":
        return base_lr
    lr = base_lr
    if epochs >= 2 and epoch >= epochs // 2:
        lr *= 0.1
    if epochs >= 2 and epoch >= (3 * epochs) // 4:
        lr *= 0.1
    return lr


def _clean_eval(net, split, limit, batch_size=512):
    """Loss/accuracy of the clean weights over (a prefix of) a split."""
    use = split if limit is None else split.subset(limit)
    total_loss = 0.0
    hits = 0
    for x, y in batches(use, batch_size):
        logits = net.forward_backbone_only(x)
        total_loss += ops.softmax_cross_entropy(logits, y).item() * len(y)
        hits += int(round(accuracy(logits, y) * len(y)))
    n = len(use)
    return total_loss / n, hits / n


def train(net: MultiExitNetwork, dataset: Dataset, cfg: TrainConfig) -> TrainHistory:
    """Train ``net`` in place; returns the history.  Weights end noise-free."""
    if len(dataset.train) == 0:
        raise ConfigError("training split is empty")
    if cfg.mode == "nft" and not net.exits:
        raise ConfigError("nft mode needs a network with at least one exit")

    history = TrainHistory()
    start = time.perf_counter()
    velocity = {}
    chance = 1.0 / dataset.classes

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.lr, cfg.schedule, cfg.epochs)
        shuffle_rng = substream(cfg.seed, SHUFFLE, epoch)
        batch_index = 0
        try:
            for batch_index, (x, y) in enumerate(batches(dataset.train, cfg.batch_size, shuffle_rng)):
                _train_step(net, x, y, cfg, lr, velocity, epoch, batch_index)
            # the clean metrics also catch weights that blew up on the last step
            train_loss, train_acc = _clean_eval(net, dataset.train, cfg.history_eval_limit)
            _, test_acc = _clean_eval(net, dataset.test, cfg.history_eval_limit)
        except NonFiniteError:
            history.converged = False
            history.diverged_at = (epoch, batch_index)
            history.wall_clock_s = time.perf_counter() - start
            return history
        history.train_loss.append(train_loss)
        history.train_acc.append(train_acc)
        history.test_acc.append(test_acc)
        history.lr.append(lr)

    history.wall_clock_s = time.perf_counter() - start
    if cfg.epochs > 0 and history.train_acc[-1] < 1.5 * chance:
        history.converged = False
    return history


def _train_step(net, x, y, cfg, lr, velocity, epoch, batch_index):
    clean = None
    if cfg.mode in ("noise", "nft"):
        eligible = net.perturbable()
        clean = {name: net.params[name].data for name in eligible}
        if cfg.variation.sigma_d > 0 or cfg.variation.quantize_first:
            _, noisy = perturb_weights(eligible, cfg.variation, cfg.seed, (TRAIN_NOISE, epoch, batch_index))
            for name, arr in noisy.items():
                net.params[name].data = arr

    net.zero_grads()
    try:
        if cfg.mode == "nft":
            bundle = net.forward_all(x)
            loss = negative_feedback_loss(bundle, y, cfg.feedback)
        else:
            logits = net.forward_backbone_only(x)
            loss = ops.softmax_cross_entropy(logits, y)
        loss.backward()
    finally:
        # weights must end noise-free even when the loss blows up
        if clean is not None:
            for name, arr in clean.items():
                net.params[name].data = arr

    for name, t in net.params.items():
        if t.grad is None:
            continue
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(t.data)
        v *= cfg.momentum
        v += t.grad
        t.data -= lr * v
