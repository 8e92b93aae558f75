"""Hybrid loss, optimizer, schedule, early stopping, and the training loop."""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DataError, DivergenceError
from .model import KarmaModel, karma_forward
from .rng import Rng
from .tensor import (Tensor, add, backward, dft_apply, hypot, mean_all, mul,
                     no_grad, reshape, scale, slice_cols, sub, sum_all)


@dataclass
class LossConfig:
    alpha: float = 0.2  # weight of the time-domain term

    def validate(self) -> "LossConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        return self


def hybrid_loss(y: Tensor, y_hat: Tensor, cfg: LossConfig) -> Tensor:
    """alpha * MSE + (1 - alpha) * mean complex-modulus spectrum distance.

    The frequency term runs a one-sided DFT down each channel (time axis)
    and averages |F(y) - F(y_hat)| over channels and bins. Means, not sums,
    so alpha balances the terms independently of T and D.
    """
    if y.shape != y_hat.shape or y.ndim != 2:
        raise ConfigError(f"loss operands must share a 2-D shape, "
                          f"got {y.shape} vs {y_hat.shape}")
    diff = sub(y, y_hat)
    time_term = mean_all(mul(diff, diff))

    t_len, d = y.shape
    bins = t_len // 2 + 1
    total = None
    for ch in range(d):
        yc = reshape(slice_cols(y, ch, ch + 1), (t_len,))
        hc = reshape(slice_cols(y_hat, ch, ch + 1), (t_len,))
        re_y, im_y = dft_apply(yc)
        re_h, im_h = dft_apply(hc)
        mod = sum_all(hypot(sub(re_y, re_h), sub(im_y, im_h)))
        total = mod if total is None else add(total, mod)
    freq_term = scale(total, 1.0 / (d * bins))
    return add(scale(time_term, cfg.alpha), scale(freq_term, 1.0 - cfg.alpha))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> None:
    """Bias-corrected Adam over (name, tensor) pairs; clears grads after.

    Every tensor must carry a gradient; a missing one means the caller
    forgot a backward pass or disconnected part of the graph.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params:
        g = t.grad
        if g is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.clear_grad()


def lr_decay(epoch: int, base_lr: float) -> float:
    """Halve the rate every epoch (epoch 0 -> base)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return base_lr * 0.5 ** epoch


@dataclass
class EarlyStop:
    patience: int = 3
    min_delta: float = 0.0
    best: float = float("inf")
    counter: int = 0
    improved: bool = False


def early_stop_update(state: EarlyStop, val_loss: float) -> bool:
    """Track the best validation loss; True once patience is exhausted."""
    if np.isnan(val_loss):
        raise DivergenceError("validation loss is NaN")
    if state.best - val_loss > state.min_delta:
        state.best = val_loss
        state.counter = 0
        state.improved = True
    else:
        state.counter += 1
        state.improved = False
    return state.counter >= state.patience


@dataclass
class Metrics:
    mse: float
    mae: float
    mse_per_step: np.ndarray  # horizon breakdown, length T
    mae_per_step: np.ndarray


def evaluate(model: KarmaModel, windows) -> Metrics:
    """MSE/MAE over all windows on the scale the model sees (scaled data)."""
    if not windows:
        raise DataError("cannot evaluate on an empty window set")
    sq = None
    ab = None
    for w in windows:
        with no_grad():
            y_hat = karma_forward(Tensor(w.x), model, rng=None, training=False)
        err = y_hat.data - w.y
        term_sq = (err ** 2).mean(axis=1)
        term_ab = np.abs(err).mean(axis=1)
        sq = term_sq if sq is None else sq + term_sq
        ab = term_ab if ab is None else ab + term_ab
    sq /= len(windows)
    ab /= len(windows)
    return Metrics(mse=float(sq.mean()), mae=float(ab.mean()),
                   mse_per_step=sq, mae_per_step=ab)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 10
    patience: int = 3
    min_delta: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("batch, epochs, and patience must be >= 1")
        self.loss.validate()
        return self


def _val_loss(model: KarmaModel, windows, loss_cfg: LossConfig) -> float:
    total = 0.0
    for w in windows:
        with no_grad():
            y_hat = karma_forward(Tensor(w.x), model, rng=None, training=False)
            total += hybrid_loss(Tensor(w.y), y_hat, loss_cfg).item()
    return total / len(windows)


def train_loop(model: KarmaModel, train_windows, val_windows, cfg: TrainConfig,
               rng: Rng):
    """Seeded mini-batch training with per-epoch validation and decay.

    Gradients accumulate window by window inside a batch (loss scaled by
    1/batch), so results do not depend on any batching of the linear
    algebra. Returns (model holding the best-validation parameters,
    history rows as dicts).
    """
    cfg.validate()
    if not train_windows or not val_windows:
        raise DataError("training needs nonempty train and validation windows")
    params = list(model.named_parameters())
    adam = AdamState(lr=cfg.lr)
    stopper = EarlyStop(patience=cfg.patience, min_delta=cfg.min_delta)
    best = {name: t.data.copy() for name, t in params}
    history = []

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        adam.lr = lr_decay(epoch, cfg.lr)
        epoch_rng = rng.spawn(epoch)
        order = epoch_rng.spawn(0).permutation(len(train_windows))
        running = 0.0
        for start in range(0, len(order), cfg.batch):
            batch = order[start:start + cfg.batch]
            for j, idx in enumerate(batch):
                w = train_windows[int(idx)]
                drop_rng = epoch_rng.spawn(1 + start + j)
                y_hat = karma_forward(Tensor(w.x), model, rng=drop_rng,
                                      training=True)
                loss = hybrid_loss(Tensor(w.y), y_hat, cfg.loss)
                item = loss.item()
                if np.isnan(item):
                    raise DivergenceError(
                        f"training loss became NaN at epoch {epoch}, "
                        f"window {int(idx)}")
                running += item
                backward(scale(loss, 1.0 / len(batch)))
            adam_step(params, adam)
        train_loss = running / len(order)
        val_loss = _val_loss(model, val_windows, cfg.loss)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "lr": adam.lr,
                        "seconds": time.perf_counter() - t0})
        stop = early_stop_update(stopper, val_loss)
        if stopper.improved:
            best = {name: t.data.copy() for name, t in params}
        if stop:
            break

    for name, t in params:
        t.data = best[name]
    return model, history
