"""Learning-rate decay policies, weight penalties, plain SGD and the training loop."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .data import AugmentConfig, ImageSet, make_sampler, preprocess_eval_batch, preprocess_train_batch

log = logging.getLogger(__name__)

POLICIES = ("fixed", "exponential", "step", "inverse", "poly", "sigmoid")


@dataclass
class DecayPolicy:
    """Parameters of one decay rule; unused fields are ignored by ``lr_at``.

    ``fixed`` returns ``c``. ``step`` uses the staircase ``floor(iter / step)``
    exponent. ``sigmoid`` is ``lambda0 / (1 + exp(-gamma + (iter - step)))``
    exactly as written; note the sign grouping means the rate falls once
    ``iter`` passes ``step + gamma``.
    """

    kind: str = "poly"
    lambda0: float = 0.05
    gamma: float = 0.1
    c: float = 1.0
    step: int = 1
    max_iter: int = 1

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown policy {self.kind!r}; expected one of {POLICIES}")
        if self.kind != "fixed" and self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")
        if self.kind == "step" and self.step < 1:
            raise ValueError("step policy needs step >= 1")
        if self.kind == "poly" and self.max_iter < 1:
            raise ValueError("poly policy needs max_iter >= 1")


def lr_at(p: DecayPolicy, it: int) -> float:
    if it < 0:
        raise ValueError("iteration must be non-negative")
    if p.kind == "fixed":
        return p.c
    if p.kind == "exponential":
        return p.lambda0 * p.gamma ** it
    if p.kind == "step":
        return p.lambda0 * p.gamma ** (it // p.step)
    if p.kind == "inverse":
        return p.lambda0 * (1 + p.gamma * it) ** (-p.c)
    if p.kind == "poly":
        if it > p.max_iter:
            warnings.warn(f"iteration {it} beyond max_iter {p.max_iter}; rate clamped to 0", stacklevel=2)
            return 0.0
        return p.lambda0 * (1 - it / p.max_iter) ** p.c
    z = -p.gamma + (it - p.step)
    return p.lambda0 / (1 + math.exp(z)) if z < 700 else 0.0


def regularized_loss(data_loss: float, params, l1: float = 0.0, l2: float = 0.0) -> tuple[float, list[np.ndarray]]:
    """``data_loss + l1 * sum|w| + l2 * sum w**2`` and the penalty gradients.

    The gradient contribution per array is ``l1 * sign(w) + 2 * l2 * w`` with
    ``sign(0) = 0``.
    """
    if l1 < 0 or l2 < 0:
        raise ValueError("penalty coefficients must be non-negative")
    total = float(data_loss)
    grads = []
    for w in params:
        w64 = np.asarray(w, dtype=np.float64)
        total += l1 * float(np.abs(w64).sum()) + l2 * float((w64 * w64).sum())
        grads.append((l1 * np.sign(w64) + 2 * l2 * w64).astype(np.asarray(w).dtype))
    return total, grads


def sgd_step(params, grads, lr: float):
    """In-place ``w -= lr * g`` for matching arrays; returns ``params``."""
    for w, g in zip(params, grads, strict=True):
        if w.shape != g.shape:
            raise L.ShapeError(f"parameter {w.shape} and gradient {g.shape} differ")
        w -= np.asarray(lr * g, dtype=w.dtype)
    return params


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 20
    seed: int = 1
    policy: DecayPolicy = field(default_factory=DecayPolicy)
    l1_coeff: float = 0.0
    l2_coeff: float = 0.0
    dropout_enabled: bool = True
    bn_enabled: bool = True
    augment: bool = True
    balancing: str = "none"

    def __post_init__(self):
        if isinstance(self.policy, dict):
            self.policy = DecayPolicy(**self.policy)
        if self.l1_coeff < 0 or self.l2_coeff < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float


@dataclass
class MetricsLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    @property
    def final_test_acc(self) -> float | None:
        return self.epochs[-1].test_acc if self.epochs else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "test_acc", "lr"])
        for r in self.epochs:
            w.writerow([r.epoch, f"{r.train_loss:.10g}", f"{r.train_acc:.10g}", f"{r.test_acc:.10g}", f"{r.lr:.10g}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"epochs": len(self.epochs), "final_test_acc": self.final_test_acc,
                "best_test_acc": max((r.test_acc for r in self.epochs), default=None),
                "final_train_acc": self.epochs[-1].train_acc if self.epochs else None}

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "epochs": [asdict(r) for r in self.epochs]}, indent=2)


class TrainingDiverged(RuntimeError):
    pass


def evaluate(model, x: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return 0.0
    correct = 0
    for s in range(0, len(labels), batch_size):
        logits = model.forward(x[s:s + batch_size], mode="eval")
        correct += int((logits.argmax(axis=1) == labels[s:s + batch_size]).sum())
    return correct / len(labels)


def penalized_params(model):
    """Conv kernels only; BN scale/shift are left unpenalised."""
    from .model import Conv
    return [(op.kernel, op.grad) for n in model.nodes for op in n.ops if isinstance(op, Conv)]


def train(model, train_set: ImageSet, test_set: ImageSet, config: TrainConfig,
          on_epoch=None) -> MetricsLog:
    """Mini-batch SGD over ``train_set``, evaluating on ``test_set`` each epoch.

    The decay policy advances once per iteration; for ``poly`` a ``max_iter``
    of 1 (the default) is replaced by the run's total iteration count. The
    logged ``lr`` is the rate at the first iteration of the epoch.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    mlog = MetricsLog()
    if config.epochs == 0:
        return mlog
    sampler = make_sampler(train_set.labels, config.balancing, np.random.default_rng([config.seed, 1]))
    drop_rng = np.random.default_rng([config.seed, 2])
    aug = AugmentConfig() if config.augment else None
    steps = len(train_set) // config.batch_size
    if steps == 0:
        raise ValueError(f"training set of {len(train_set)} is smaller than one batch")
    policy = config.policy
    if policy.kind == "poly" and policy.max_iter <= 1:
        policy = DecayPolicy(**{**asdict(policy), "max_iter": steps * config.epochs})
    x_test = preprocess_eval_batch(test_set)
    params = model.parameters()
    penal = penalized_params(model)
    it = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr0 = lr_at(policy, it)
        loss_sum = correct = seen = 0
        for idx in sampler.batches(config.batch_size, drop_last=True):
            lr = lr_at(policy, it)
            xb = preprocess_train_batch(train_set, idx, aug, config.seed, epoch)
            yb = train_set.labels[idx]
            model.zero_grad()
            logits = model.forward(xb, mode="train", rng=drop_rng)
            data_loss, d_logits = L.softmax_cross_entropy(logits, yb)
            model.backward(d_logits)
            loss = data_loss
            if config.l1_coeff or config.l2_coeff:
                loss, pg = regularized_loss(data_loss, [w for w, _ in penal], config.l1_coeff, config.l2_coeff)
                for (_, g), extra in zip(penal, pg):
                    g += extra
            if not math.isfinite(loss):
                norms = {f"param{i}": float(np.linalg.norm(g)) for i, (_, g) in enumerate(params)}
                raise TrainingDiverged(f"non-finite loss at iteration {it} (epoch {epoch}), lr={lr:g}, "
                                       f"grad norms={json.dumps(norms)}")
            sgd_step([w for w, _ in params], [g for _, g in params], lr)
            loss_sum += data_loss * len(idx)
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(idx)
            it += 1
        rec = EpochRecord(epoch=epoch + 1, train_loss=loss_sum / seen, train_acc=correct / seen,
                          test_acc=evaluate(model, x_test, test_set.labels), lr=lr0)
        mlog.epochs.append(rec)
        log.info("epoch %d loss %.4f train %.4f test %.4f lr %.5g (%.1fs)", rec.epoch, rec.train_loss,
                 rec.train_acc, rec.test_acc, rec.lr, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(rec)
    return mlog
