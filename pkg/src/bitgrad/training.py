"""Training loop: Adam, cosine annealing with restarts, Pareto checkpointing.

Determinism contract: given the same config and seed, every array op runs in
the same order on the same data, so metrics files are byte-identical across
runs on the same platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, softmax_cross_entropy, mse, zero_grads
from .layers import QModel
from .resource import LossConfig, beta_at, bitops_surrogate, total_loss


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Plain Adam with bias correction; learning rate is passed per step."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 lr_scales: list[float] | None = None):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scales = lr_scales or [1.0] * len(params)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v, scale in zip(self.params, self.m, self.v, self.lr_scales):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= (lr * scale) * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_restarts_lr(step: int, t0: int, t_mult: int, lr_max: float,
                       lr_min: float) -> float:
    """Cosine annealing with warm restarts.

    Cycle k spans t_k + 1 steps (endpoints included): the rate starts at
    lr_max, reaches lr_min exactly at the cycle's last step, and the next
    cycle restarts at lr_max with period t_k * t_mult.
    """
    if step < 0 or t0 < 1 or t_mult < 1:
        raise ValueError("bad cosine schedule arguments")
    length = t0
    pos = step
    while pos > length:
        pos -= length + 1
        length *= t_mult
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * pos / length))


@dataclass
class ParetoEntry:
    metric: float   # higher is better
    cost: float     # lower is better
    epoch: int
    state: dict


class ParetoSet:
    """Non-dominated (metric, cost) front; insert keeps it minimal."""

    def __init__(self):
        self.entries: list[ParetoEntry] = []

    def insert(self, metric: float, cost: float, epoch: int, state: dict) -> bool:
        for e in self.entries:
            if e.metric >= metric and e.cost <= cost:
                return False  # dominated (ties count as dominated)
        self.entries = [
            e for e in self.entries if not (metric >= e.metric and cost <= e.cost)
        ]
        self.entries.append(ParetoEntry(metric, cost, epoch, state))
        self.entries.sort(key=lambda e: e.cost)
        return True


@dataclass
class TrainSettings:
    epochs: int = 12
    batch_size: int = 256
    lr: float = 3e-3
    lr_min: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bitwidth_lr_scale: float = 1.0
    cosine_t0: int | None = None   # default: total_steps // 4
    cosine_t_mult: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    task: str = "classification"


@dataclass
class MetricsRow:
    epoch: int
    step: int
    lr: float
    beta: float
    train_loss: float
    val_metric: float
    bitops: float

    def csv(self) -> str:
        return (
            f"{self.epoch},{self.step},{self.lr!r},{self.beta!r},"
            f"{self.train_loss!r},{self.val_metric!r},{self.bitops!r}"
        )


CSV_HEADER = "epoch,step,lr,beta,train_loss,val_metric,bitops"


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    pareto: ParetoSet
    final_state: dict
    total_steps: int


def evaluate(model: QModel, X: np.ndarray, y: np.ndarray, task: str,
             batch_size: int = 2048) -> float:
    """Validation metric: accuracy, or -RMSE for regression."""
    if task == "classification":
        hits = 0
        for lo in range(0, X.shape[0], batch_size):
            pred = model.predict(X[lo : lo + batch_size])
            hits += int((pred.argmax(axis=1) == y[lo : lo + batch_size]).sum())
        return hits / X.shape[0]
    sq = 0.0
    for lo in range(0, X.shape[0], batch_size):
        pred = model.predict(X[lo : lo + batch_size])[:, 0]
        d = pred - y[lo : lo + batch_size]
        sq += float((d * d).sum())
    return -math.sqrt(sq / X.shape[0])


def train(model: QModel, X_train: np.ndarray, y_train: np.ndarray,
          X_val: np.ndarray, y_val: np.ndarray,
          settings: TrainSettings) -> TrainResult:
    n = X_train.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    steps_per_epoch = max(1, math.ceil(n / settings.batch_size))
    total_steps = settings.epochs * steps_per_epoch
    t0 = settings.cosine_t0 or max(1, total_steps // 4)

    params = model.parameters()
    bit_params = model.bitwidth_parameters()
    opt = Adam(
        params + bit_params,
        settings.adam_beta1,
        settings.adam_beta2,
        settings.adam_eps,
        [1.0] * len(params) + [settings.bitwidth_lr_scale] * len(bit_params),
    )

    rng = np.random.default_rng(settings.seed)
    pareto = ParetoSet()
    rows = []
    step = 0
    for epoch in range(settings.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, settings.batch_size):
            idx = perm[lo : lo + settings.batch_size]
            logits = model.forward(X_train[idx])
            if settings.task == "classification":
                base = softmax_cross_entropy(logits, y_train[idx])
            else:
                base = mse(logits, y_train[idx][:, None])
            loss = total_loss(base, model, settings.loss, step, total_steps)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss {float(loss.data)} at step {step}"
                )
            zero_grads(params + bit_params)
            loss.backward()
            lr = cosine_restarts_lr(step, t0, settings.cosine_t_mult,
                                    settings.lr, settings.lr_min)
            opt.step(lr)
            epoch_loss += float(base.data)
            step += 1
        val = evaluate(model, X_val, y_val, settings.task)
        cost = float(bitops_surrogate(model).data)
        pareto.insert(val, cost, epoch, model.state_arrays())
        rows.append(
            MetricsRow(
                epoch=epoch,
                step=step,
                lr=cosine_restarts_lr(step - 1, t0, settings.cosine_t_mult,
                                      settings.lr, settings.lr_min),
                beta=beta_at(settings.loss, step - 1, total_steps),
                train_loss=epoch_loss / steps_per_epoch,
                val_metric=val,
                bitops=cost,
            )
        )
    return TrainResult(rows, pareto, model.state_arrays(), total_steps)


def metrics_csv(rows: list[MetricsRow]) -> str:
    return "\n".join([CSV_HEADER] + [r.csv() for r in rows]) + "\n"
