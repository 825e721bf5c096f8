"""Dice loss, Adam with a reduce-on-plateau schedule, k-fold splitting, and
the desk-scale training loop.

The loss follows the overlap form L = 1 - 2*sum(s*g) / (sum(s^2) + sum(g^2) + eps)
with a small denominator guard (eps defaults to 1e-6, set 0 to disable) so
empty-target patches cannot divide by zero. "Plateau" means no strict
improvement of the best validation loss for ``patience`` consecutive epochs;
each trigger multiplies the learning rate by ``factor`` and restarts the
count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from voxseg import autodiff as ad
from voxseg.autodiff import Tape, Tensor
from voxseg.errors import NumericError, ShapeError
from voxseg.networks import Network, save_checkpoint

DICE_EPS = 1e-6


def dice_loss(pred: Tensor, target: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Differentiable Dice loss of a probability map against a binary target."""
    if pred.shape != target.shape:
        raise ShapeError(
            f"dice_loss: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    overlap = ad.sum_all(ad.mul(pred, target))
    denom = ad.add(ad.sum_all(ad.mul(pred, pred)), ad.sum_all(ad.mul(target, target)))
    if eps:
        denom = ad.add(denom, float(eps))
    return ad.sub(1.0, ad.div(ad.mul(overlap, 2.0), denom))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus step count and current learning rate."""

    lr: float
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def ensure(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: OptimizerState,
    lr: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, applied in the dict's iteration order.

    ``grads`` defaults to each parameter's accumulated ``grad`` buffer. A
    non-finite gradient aborts the step before any parameter is touched.
    """
    rate = state.lr if lr is None else lr
    resolved = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        resolved[name] = g
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = resolved[name]
        state.ensure(name, p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= (rate * update).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# plateau schedule


@dataclass
class PlateauState:
    lr: float
    patience: int = 20
    factor: float = 0.1
    best: float = float("inf")
    stall: int = 0

    def update(self, val_loss: float) -> float:
        """Feed one epoch's validation loss; returns the (possibly reduced) lr."""
        if val_loss < self.best:
            self.best = val_loss
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr *= self.factor
                self.stall = 0
        return self.lr


def plateau_schedule(history, state: PlateauState) -> float:
    """Replay a per-epoch validation loss history through the plateau rule."""
    if len(history) == 0:
        raise ShapeError("plateau_schedule needs a non-empty history")
    for loss in history:
        state.update(float(loss))
    return state.lr


# ---------------------------------------------------------------------------
# k-fold splitting


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple  # tuple of (train ids, validation ids) pairs


def kfold_split(case_ids, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle into k validation folds of near-equal size (diff <= 1)."""
    ids = list(case_ids)
    if k < 1 or k > len(ids):
        raise ShapeError(f"cannot split {len(ids)} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    base, extra = divmod(len(ids), k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        val = shuffled[start : start + size]
        train = shuffled[:start] + shuffled[start + size :]
        folds.append((tuple(train), tuple(val)))
        start += size
    return FoldPlan(k=k, folds=tuple(folds))


# ---------------------------------------------------------------------------
# toy training loop


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    plateau_patience: int = 20
    plateau_factor: float = 0.1
    dice_eps: float = DICE_EPS
    seed: int = 0


@dataclass
class TrainResult:
    curve: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float


def train_toy(
    net: Network,
    patches,
    config: TrainConfig,
    val_patches=None,
    checkpoint_path=None,
) -> TrainResult:
    """Train on (input array, target array) patch pairs, batch size 1.

    Validation defaults to the training patches (overfit smoke runs). The
    checkpoint, when requested, holds the weights of the best validation
    epoch; with zero epochs the untouched initial weights are written.
    """
    patches = [(np.asarray(x), np.asarray(y)) for x, y in patches]
    if not patches:
        raise ShapeError("train_toy needs at least one patch")
    val = patches if val_patches is None else [
        (np.asarray(x), np.asarray(y)) for x, y in val_patches
    ]
    params = net.parameters()
    opt = OptimizerState(lr=config.lr)
    plateau = PlateauState(
        lr=config.lr, patience=config.plateau_patience, factor=config.plateau_factor
    )
    rng = np.random.default_rng(config.seed)
    curve = []
    best_val = float("inf")
    best_epoch = 0
    best_blob = _snapshot(net)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(patches))
        train_losses = []
        for idx in order:
            x, y = patches[idx]
            net.zero_grad()
            with Tape():
                pred = net.forward(Tensor(x[None, None] if x.ndim == net.spec.ndim else x), "train")
                loss = dice_loss(pred, Tensor(_match(y, pred)), eps=config.dice_eps)
                loss.backward()
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"training diverged at epoch {epoch}: loss={value}")
            train_losses.append(value)
            adam_step(params, None, opt, lr=plateau.lr, beta1=config.beta1, beta2=config.beta2)
        val_losses = []
        for x, y in val:
            pred = net.forward(Tensor(x[None, None] if x.ndim == net.spec.ndim else x), "eval")
            val_losses.append(dice_loss(pred, Tensor(_match(y, pred)), eps=config.dice_eps).item())
        train_mean = float(np.mean(train_losses))
        val_mean = float(np.mean(val_losses))
        if not np.isfinite(val_mean):
            raise NumericError(f"validation diverged at epoch {epoch}: loss={val_mean}")
        curve.append((epoch, train_mean, val_mean))
        if val_mean < best_val:
            best_val = val_mean
            best_epoch = epoch
            best_blob = _snapshot(net)
        plateau.update(val_mean)
    _restore(net, best_blob)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net)
    return TrainResult(curve=curve, best_epoch=best_epoch, best_val_loss=best_val)


def _match(target: np.ndarray, pred) -> np.ndarray:
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.ndim == pred.data.ndim - 2:
        t = t[None, None]
    return t


def _snapshot(net: Network):
    return (
        {k: p.data.copy() for k, p in net.parameters().items()},
        {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in net.states().items()},
    )


def _restore(net: Network, blob):
    params, states = blob
    for k, p in net.parameters().items():
        p.data[...] = params[k]
    for k, s in net.states().items():
        s.running_mean[...] = states[k][0]
        s.running_var[...] = states[k][1]


def write_loss_csv(path, curve) -> None:
    """Loss curve CSV: header epoch,train_loss,val_loss; 9 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train, val in curve:
            writer.writerow([epoch, f"{train:.9g}", f"{val:.9g}"])
