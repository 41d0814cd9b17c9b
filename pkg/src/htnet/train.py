"""L2-loss training loop with Adam and per-epoch learning-rate decay."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import checkpoint
from . import numerics as nx
from .data import PoseSet
from .model import ModelParams, model_forward
from .numerics import Tensor
from .skeleton import SkeletonSpec

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 512
    learning_rate: float = 1e-3
    lr_decay_per_epoch: float = 0.95
    seed: int = 0
    shuffle: bool = True
    max_steps: int | None = None
    checkpoint_every_epoch: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must be in (0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


def l2_loss(pred: Tensor, gt) -> Tensor:
    """Mean over batch and joints of the squared per-joint Euclidean distance."""
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.data.dtype))
    if pred.shape != gt.shape:
        raise nx.ShapeError(f"l2_loss: pred {pred.shape} vs gt {gt.shape}")
    return nx.mean_sq(pred - gt) * float(pred.shape[-1])


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


@dataclass
class TraceRow:
    step: int
    epoch: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[TraceRow]

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.trace])


def training_arrays(poseset: PoseSet, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Normalized 2D inputs and targets in network units, in the params' dtype."""
    dtype = params["embed.weight"].data.dtype
    _, p3d = poseset.arrays()
    x = poseset.normalized_inputs().astype(dtype)
    y = (p3d / params.config.target_scale).astype(dtype)
    return x, y


def write_trace(trace: list[TraceRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss"])
        for r in trace:
            w.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss)])


def train(params: ModelParams, dataset: PoseSet, cfg: TrainConfig,
          out_dir: str | Path | None = None, spec: SkeletonSpec | None = None) -> TrainResult:
    """Optimize ``params`` in place and return them with the per-step loss trace.

    Deterministic given ``cfg.seed``: the only randomness is the epoch
    shuffle, drawn from a generator seeded once at the start.
    """
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    x, y = training_arrays(dataset, params)
    names = list(params)
    tensors = [params[k] for k in names]
    opt = Adam(tensors, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    trace: list[TraceRow] = []
    n = len(x)
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.learning_rate * cfg.lr_decay_per_epoch ** epoch
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = l2_loss(model_forward(params, x[idx], spec), y[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch})")
            grads = nx.grad(loss, tensors)
            opt.step(grads)
            trace.append(TraceRow(step, epoch, opt.lr, value))
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        log.info("epoch %d lr %.3g loss %.6g", epoch, opt.lr, trace[-1].loss)
        if out is not None and cfg.checkpoint_every_epoch:
            checkpoint.save(params, out / f"epoch{epoch:03d}.htnc")
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    if out is not None:
        checkpoint.save(params, out / "model.htnc")
        write_trace(trace, out / "loss.csv")
    return TrainResult(params, trace)
