"""SGD with Nesterov momentum, step-decay schedule and the epoch loop."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, DivergenceError
from .nn import BN_BETA, BN_GAMMA
from .tensor import Tensor, zero_grads


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    milestones: tuple = (120, 160, 180)
    gamma: float = 0.1
    seed: int = 0
    shuffle: bool = True
    decay_batchnorm: bool = True

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms[:-1], ms[1:])):
            raise ConfigurationError(f"milestones must be strictly increasing, got {list(ms)}")
        if ms and (ms[-1] >= self.epochs or ms[0] < 0):
            raise ConfigurationError(f"milestones {list(ms)} must lie in [0, epochs={self.epochs})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Base rate times ``gamma**k``, ``k`` = number of milestones <= ``epoch``."""
    k = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.gamma ** k


_NORM_TAGS = (BN_GAMMA, BN_BETA)


@dataclass
class SGDState:
    buffers: dict = field(default_factory=dict)


def sgd_step(params: Sequence[Tensor], grads, state: SGDState, cfg: TrainConfig, lr: Optional[float] = None) -> None:
    """One SGD update with coupled weight decay and (Nesterov) momentum.

    ``d = g + wd*w``; ``v = mu*v + d``; the step uses ``d + mu*v`` under
    Nesterov, ``v`` otherwise. Frozen parameters and parameters without a
    gradient are skipped. With ``cfg.decay_batchnorm`` off, batchnorm scale
    and shift are exempt from weight decay.
    """
    lr = cfg.lr if lr is None else lr
    mu, wd = cfg.momentum, cfg.weight_decay
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.frozen or g is None:
            continue
        if not np.all(np.isfinite(g)):
            label = p.name or f"parameter #{i} with shape {p.shape}"
            raise DivergenceError(f"non-finite gradient for {label}")
        decay = wd if cfg.decay_batchnorm or p.name not in _NORM_TAGS else 0.0
        d = g + decay * p.data if decay else g
        if mu:
            key = id(p)
            buf = state.buffers.get(key)
            buf = d.copy() if buf is None else mu * buf + d
            state.buffers[key] = buf
            d = d + mu * buf if cfg.nesterov else buf
        p.data = p.data - lr * d


@dataclass
class MetricsRecord:
    epoch: int
    losses: dict
    train_acc: float
    test_acc: float
    frob_dist: Optional[float]
    lr: float


class Strategy(Protocol):
    """What the epoch loop needs from a training strategy."""

    def parameters(self) -> list: ...

    def loss(self, idx: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple: ...

    def train(self) -> None: ...

    def eval(self) -> None: ...

    def evaluate(self, data: Dataset) -> float: ...

    def frob_dist(self) -> Optional[float]: ...


def batch_indices(n: int, cfg: TrainConfig, rng: np.random.Generator) -> list:
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    batches = [order[i:i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    # batchnorm cannot normalize a single row; fold it into the previous batch
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def run_epochs(strategy, train: Dataset, test: Optional[Dataset], cfg: TrainConfig) -> list:
    """Train for ``cfg.epochs`` epochs, returning one ``MetricsRecord`` per epoch."""
    rng = np.random.default_rng(cfg.seed)
    state = SGDState()
    records = []
    n = len(train)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        totals: dict = {}
        strategy.train()
        for step, idx in enumerate(batch_indices(n, cfg, rng)):
            params = strategy.parameters()
            zero_grads(params)
            total, terms = strategy.loss(idx, train.features[idx], train.labels[idx])
            value = total.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {value}")
            total.backward()
            try:
                sgd_step(params, [p.grad for p in params], state, cfg, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, step {step}: {exc}") from None
            for name, term in terms.items():
                totals[name] = totals.get(name, 0.0) + term.item() * len(idx)
        strategy.eval()
        losses = {k: v / n for k, v in totals.items()}
        for name, v in losses.items():
            if not math.isfinite(v):
                raise DivergenceError(f"loss term {name} is non-finite at epoch {epoch}")
        records.append(
            MetricsRecord(
                epoch=epoch,
                losses=losses,
                train_acc=strategy.evaluate(train),
                test_acc=strategy.evaluate(test) if test is not None else float("nan"),
                frob_dist=strategy.frob_dist(),
                lr=lr,
            )
        )
    return records


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def metrics_to_csv(records: Sequence[MetricsRecord]) -> str:
    names = []
    for r in records:
        for k in r.losses:
            if k not in names:
                names.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_acc", "test_acc", "frob_dist"] + [f"loss_{k}" for k in names])
    for r in records:
        w.writerow(
            [r.epoch, _fmt(r.lr), _fmt(r.train_acc), _fmt(r.test_acc), _fmt(r.frob_dist)]
            + [_fmt(r.losses.get(k)) for k in names]
        )
    return buf.getvalue()


def summarize(records: Sequence[MetricsRecord], config: dict, seed: int, extra: Optional[dict] = None) -> dict:
    out = {
        "seed": seed,
        "epochs": len(records),
        "final_train_acc": records[-1].train_acc if records else None,
        "final_test_acc": records[-1].test_acc if records else None,
        "best_test_acc": max((r.test_acc for r in records), default=None),
        "best_train_acc": max((r.train_acc for r in records), default=None),
        "final_frob_dist": records[-1].frob_dist if records else None,
        "config": config,
    }
    if extra:
        out.update(extra)
    return out


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
