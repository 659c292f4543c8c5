"""Minibatch training loop with per-epoch history."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adam import Adam, NonFiniteGradient
from .dataset import SampleSet
from .losses import loss_det, loss_mle, loss_vb
from .unet import UNet

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; carries the offending batch index."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 4
    lr: float = 1e-4
    mc_samples: int = 1
    kl_scale: float | None = None  # None -> batch_size / N
    seed: int = 0
    log_every: int = 0  # epochs between progress lines, 0 = silent

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm needs a batch)")


@dataclass
class History:
    """Per-epoch mean loss, with KL/NLL components for the VB objective."""

    loss: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    nll: list[float] = field(default_factory=list)
    failed_fit: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "kl", "nll"])
            for i, value in enumerate(self.loss):
                kl = repr(self.kl[i]) if i < len(self.kl) else ""
                nll = repr(self.nll[i]) if i < len(self.nll) else ""
                w.writerow([i, repr(value), kl, nll])

    @classmethod
    def from_csv(cls, path) -> "History":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.loss.append(float(row["loss"]))
                if row["kl"]:
                    h.kl.append(float(row["kl"]))
                if row["nll"]:
                    h.nll.append(float(row["nll"]))
        return h


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded full shuffle each epoch; a trailing singleton batch is dropped."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        batch = perm[start:start + batch_size]
        if batch.size >= 2:
            yield batch


def train(model: UNet, train_set: SampleSet, config: TrainConfig) -> History:
    """Minimize the mode's objective with Adam over shuffled minibatches.

    Mutates the model's parameter store and batchnorm statistics. The run is
    bitwise reproducible for a fixed seed. A desk-scale fit is expected to
    reduce the (positive) training loss at least tenfold; if it does not,
    the history is flagged ``failed_fit`` rather than raising.
    """
    f_all = np.ascontiguousarray(train_set.f, dtype=np.float64)
    u_all = np.ascontiguousarray(train_set.u, dtype=np.float64)
    n = f_all.shape[0]
    kl_scale = config.kl_scale if config.kl_scale is not None else config.batch_size / n
    opt = Adam(model.store.trainable(), lr=config.lr)
    rng_shuffle = np.random.default_rng([config.seed, 0])
    rng_weights = np.random.default_rng([config.seed, 1])
    mode = model.config.mode

    history = History()
    for epoch in range(config.epochs):
        losses, kls, nlls = [], [], []
        for b_idx, batch in enumerate(_batches(n, config.batch_size, rng_shuffle)):
            tape = ad.Tape()
            fb, ub = f_all[batch], u_all[batch]
            try:
                if mode == "deterministic":
                    loss = loss_det(tape, model, fb, ub)
                elif mode == "mle":
                    loss = loss_mle(tape, model, fb, ub)
                else:
                    loss, kl, nll = loss_vb(tape, model, fb, ub, rng_weights,
                                            kl_scale, config.mc_samples)
                    kls.append(float(kl.values))
                    nlls.append(float(nll.values))
                ad.backward(tape, loss)
                opt.step()
            except (ad.NonFiniteValue, NonFiniteGradient) as exc:
                raise TrainingDiverged(
                    f"epoch {epoch}, batch {b_idx}: {exc}"
                ) from exc
            opt.zero_grad()
            losses.append(float(loss.values))
        history.loss.append(float(np.mean(losses)))
        if mode == "vb":
            history.kl.append(float(np.mean(kls)))
            history.nll.append(float(np.mean(nlls)))
        if config.log_every and (epoch + 1) % config.log_every == 0:
            log.info("epoch %d/%d loss %.6g", epoch + 1, config.epochs,
                     history.loss[-1])

    # NLL-style objectives legitimately go negative, so the tenfold-decrease
    # check only applies while the loss stays positive end to end.
    first, last = history.loss[0], history.loss[-1]
    if first > 0.0 and last > 0.0 and first / last < 10.0 and config.epochs >= 50:
        history.failed_fit = True
        log.warning("training loss decreased only %.2fx over %d epochs",
                    first / max(last, 1e-300), config.epochs)
    return history
