"""Mini-batch training loop with per-epoch validation and best-model tracking."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import unet
from .checkpoint import Checkpoint
from .optim import lr_schedule, make_optimizer

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch, batch, loss, history):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.history = history


@dataclass
class EpochRecord:
    epoch: int
    train_rmse: float
    val_rmse: float
    lr: float


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    history: list = field(default_factory=list)


def predict(params, arch, x, batch_size=16):
    """Raw (unclamped) network output for ``x`` of shape (n, H, W)."""
    x = np.asarray(x)
    out = [unet.forward(params, arch, x[i : i + batch_size])[..., 0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def rmse(params, arch, x, y, batch_size=16):
    pred = predict(params, arch, x, batch_size).astype(np.float64)
    return math.sqrt(float(np.mean((pred - np.asarray(y, dtype=np.float64)) ** 2)))


def train(x_train, y_train, x_val, y_val, arch, opt_config, seed=0, dtype=np.float32, on_epoch=None):
    """Fit a fresh U-Net; returns final and best-validation checkpoints plus history.

    Each epoch uses a seeded shuffle; batches average the per-sample MSE
    gradients. ``train_rmse`` is the square root of the mean batch loss seen
    during the epoch.
    """
    x_train = np.asarray(x_train, dtype=dtype)
    y_train = np.asarray(y_train, dtype=dtype)
    if len(x_train) == 0:
        raise ValueError("empty training set")
    arch.check_input(*x_train.shape[1:3])
    has_val = x_val is not None and len(x_val) > 0

    params = unet.init_params(arch, seed, dtype)
    opt = make_optimizer(params, opt_config)
    history = []

    def snapshot(epoch):
        return Checkpoint(
            arch, copy.deepcopy(params), opt_config,
            {k: v.copy() for k, v in opt.state().items()}, opt.step_count, seed, epoch,
        )

    best, best_val = snapshot(0), math.inf
    n = len(x_train)
    bs = opt_config.batch_size
    for epoch in range(opt_config.epochs):
        lr = lr_schedule(opt_config, epoch)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start : start + bs]
            loss, grads = unet.loss_and_grads(params, arch, x_train[idx], y_train[idx])
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch, b, loss, history)
            opt.step(params, grads, lr)
            losses.append(loss)
        train_rmse = math.sqrt(math.fsum(losses) / len(losses))
        val_rmse = rmse(params, arch, x_val, y_val) if has_val else math.nan
        if not math.isfinite(train_rmse) or (has_val and not math.isfinite(val_rmse)):
            raise TrainingDivergence(epoch, len(losses) - 1, train_rmse, history)
        record = EpochRecord(epoch, train_rmse, val_rmse, lr)
        history.append(record)
        log.info("epoch %d lr %.3g train_rmse %.5f val_rmse %.5f", epoch, lr, train_rmse, val_rmse)
        if on_epoch is not None:
            on_epoch(record)
        score = val_rmse if has_val else train_rmse
        if score < best_val:
            best_val = score
            best = snapshot(epoch + 1)
    return TrainResult(snapshot(opt_config.epochs), best, history)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_rmse", "val_rmse", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(float(r.train_rmse)), repr(float(r.val_rmse)), repr(float(r.lr))])


def read_history(path):
    with open(path, newline="") as fh:
        return [
            EpochRecord(int(row["epoch"]), float(row["train_rmse"]), float(row["val_rmse"]), float(row["lr"]))
            for row in csv.DictReader(fh)
        ]
