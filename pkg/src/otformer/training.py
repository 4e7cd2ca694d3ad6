"""Regularised training: cross-entropy plus the scaled transport cost, minimised with Adam."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import TaskData, iter_batches
from .models import Model, ModelConfig, forward, init_model
from .ode import IntegrationBlowup
from .tensor import Tensor

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = {"mnist": 0.01, "parity": 0.5, "pointcloud": 1.0}
EXPLOSION_THRESHOLD = 1e4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lam: float = 0.01
    # (start_epoch, end_epoch, rate); ranges are half-open and must tile [0, epochs)
    lr_schedule: tuple[tuple[int, int, float], ...] = ((0, 10, 1e-3),)
    epochs: int = 10
    batch_size: int = 100
    seed: int = 0
    grad_clip: float | None = None
    explosion_threshold: float = EXPLOSION_THRESHOLD
    task: str = "mnist"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        sched = tuple(tuple(s) for s in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", sched)
        covered = 0
        for start, end, rate in sorted(sched):
            if start != covered or end <= start or rate < 0:
                raise ConfigError(f"lr schedule {sched} does not tile [0, {self.epochs})")
            covered = end
        if covered < self.epochs:
            raise ConfigError(f"lr schedule {sched} does not cover [0, {self.epochs})")

    def lr_at(self, epoch: int) -> float:
        for start, end, rate in self.lr_schedule:
            if start <= epoch < end:
                return float(rate)
        raise ConfigError(f"no learning rate for epoch {epoch}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))


def step_schedule(epochs: int, rate: float, drops: Sequence[int] = (), factor: float = 0.1):
    """Piecewise-constant schedule: ``rate`` then multiplied by ``factor`` at each drop epoch."""
    edges = [0, *[e for e in drops if 0 < e < epochs], epochs]
    return tuple((edges[i], edges[i + 1], rate * factor**i) for i in range(len(edges) - 1))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def transport_term(cost_raw: Tensor, lam: float, d: int, n) -> Tensor:
    """Per-sample ``lam / (2 d n) * cost``; ``n`` may differ per sample."""
    n = np.asarray(n, dtype=np.float64)
    if n.ndim == 0:
        return T.scale(cost_raw, lam / (2.0 * d * float(n)))
    return cost_raw * Tensor(lam / (2.0 * d * n), precision=cost_raw.precision)


def objective(logits: Tensor, target, transport_cost_raw: Tensor | None, lam: float,
              d: int, n) -> Tensor:
    """Batch mean of cross-entropy plus ``lam / (2 d n)`` times the raw transport cost."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    ce = T.cross_entropy(logits, np.atleast_1d(target))
    if transport_cost_raw is None or lam == 0:
        return T.mean(ce)
    reg = transport_term(T.reshape(transport_cost_raw, ce.shape), lam, d, n)
    return T.mean(ce + reg)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        T.zero_grads(self.params)

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - p.dtype.type(lr) * update.astype(p.dtype)


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(params: Sequence[Tensor], max_norm: float, norm: float | None = None) -> float:
    norm = global_grad_norm(params) if norm is None else norm
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.dtype.type(factor)
    return norm


# ---------------------------------------------------------------------------
# stability monitoring
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    flagged: bool
    flag_step: int | None
    reason: str | None
    epoch_max: dict[int, float]
    epoch_mean: dict[int, float]


class StabilityMonitor:
    """Observes gradient norms; flags the first non-finite or exploding value."""

    def __init__(self, threshold: float = EXPLOSION_THRESHOLD):
        self.threshold = threshold
        self.flag_step: int | None = None
        self.reason: str | None = None
        self._by_epoch: dict[int, list[float]] = {}
        self._step = 0

    @property
    def flagged(self) -> bool:
        return self.flag_step is not None

    def observe(self, norm: float, epoch: int = 0) -> bool:
        step = self._step
        self._step += 1
        self._by_epoch.setdefault(epoch, []).append(norm)
        if self.flag_step is None:
            if not math.isfinite(norm):
                self.flag_step, self.reason = step, "non-finite"
            elif norm > self.threshold:
                self.flag_step, self.reason = step, "explosion"
        return self.flagged

    def mark_nan(self, epoch: int = 0) -> None:
        self.observe(float("nan"), epoch)

    def epoch_mean(self, epoch: int) -> float:
        vals = [v for v in self._by_epoch.get(epoch, []) if math.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")

    def report(self) -> StabilityReport:
        finite = {e: [v for v in vs if math.isfinite(v)] for e, vs in self._by_epoch.items()}
        return StabilityReport(
            flagged=self.flagged, flag_step=self.flag_step, reason=self.reason,
            epoch_max={e: max(v) if v else float("nan") for e, v in finite.items()},
            epoch_mean={e: float(np.mean(v)) if v else float("nan") for e, v in finite.items()},
        )


def stability_monitor(grad_norms: Sequence[float], threshold: float = EXPLOSION_THRESHOLD) -> StabilityReport:
    mon = StabilityMonitor(threshold)
    for g in grad_norms:
        mon.observe(g)
    return mon.report()


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------

RUN_COLUMNS = ("epoch", "train_loss", "train_transport", "train_acc", "test_loss", "test_acc",
               "grad_norm", "nan_flag")


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_transport: float
    train_acc: float
    test_loss: float
    test_acc: float
    grad_norm: float
    nan_flag: bool = False


@dataclass
class RunRecord:
    rows: list[EpochRow] = field(default_factory=list)
    stability: StabilityReport | None = None

    @property
    def nan_flag(self) -> bool:
        return any(r.nan_flag for r in self.rows)

    @property
    def final(self) -> EpochRow:
        return self.rows[-1]

    def append(self, row: EpochRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        if self.nan_flag:
            raise ValueError("run already terminated by a NaN flag")
        self.rows.append(row)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in self.rows:
            w.writerow([r.epoch, *(f"{getattr(r, c):.6g}" for c in RUN_COLUMNS[1:-1]), int(r.nan_flag)])
        return out.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "RunRecord":
        rows = []
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != RUN_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        for rec in reader:
            rows.append(EpochRow(int(rec["epoch"]), *(float(rec[c]) for c in RUN_COLUMNS[1:-1]),
                                 nan_flag=rec["nan_flag"] == "1"))
        return cls(rows)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def evaluate(model: Model, xs, ys: np.ndarray, batch_size: int = 250) -> tuple[float, float]:
    """Mean cross-entropy and accuracy, no graph."""
    total = correct = 0.0
    with T.no_grad():
        for xb, yb in iter_batches(xs, ys, batch_size):
            logits = forward(model, xb).logits
            total += float(T.cross_entropy(logits, yb).data.sum())
            correct += float((logits.data.argmax(axis=1) == yb).sum())
    n = len(ys)
    return total / n, correct / n


def model_config_for(task: TaskData, **overrides) -> ModelConfig:
    """Task-appropriate embedding and pooling on top of ``overrides``."""
    if task.task == "parity":
        base = dict(token_map="lookup", vocab=2, feature_dim=1, positional=True, cls_token=False)
    elif task.task == "pointcloud":
        base = dict(token_map="linear", feature_dim=task.feature_dim, positional=False, cls_token=False)
    else:
        base = dict(token_map="linear", feature_dim=task.feature_dim, positional=True, cls_token=True)
    base.update(n_max=task.n_max, classes=task.classes)
    base.update(overrides)
    return ModelConfig(**base)


def train(cfg: TrainConfig, data: TaskData, model: Model | None = None,
          on_epoch=None) -> tuple[Model, RunRecord]:
    """Epoch/batch loop with Adam; a NaN or blow-up ends the run with ``nan_flag`` set."""
    if model is None:
        model = init_model(cfg.model, seed=np.random.default_rng([cfg.seed, 0]))
    params = model.parameters()
    opt = Adam(params)
    shuffle = np.random.default_rng([cfg.seed, 1])
    monitor = StabilityMonitor(cfg.explosion_threshold)
    record = RunRecord()
    d = model.config.d
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        ce_sum = tr_sum = correct = 0.0
        seen = 0
        failed = False
        for xb, yb in iter_batches(data.train_x, data.train_y, cfg.batch_size, shuffle):
            opt.zero_grad()
            try:
                res = forward(model, xb)
            except IntegrationBlowup as exc:
                log.warning("epoch %d: %s", epoch, exc)
                monitor.mark_nan(epoch)
                failed = True
                break
            ce = T.cross_entropy(res.logits, yb)
            loss = objective(res.logits, yb, res.transport_cost_raw, cfg.lam, d, res.n_tokens)
            if not np.isfinite(loss.data).all():
                monitor.mark_nan(epoch)
                failed = True
                break
            loss.backward()
            norm = global_grad_norm(params)
            if monitor.observe(norm, epoch) and not math.isfinite(norm):
                failed = True
                break
            if cfg.grad_clip is not None:
                clip_gradients(params, cfg.grad_clip, norm)
            opt.step(lr)
            b = len(yb)
            seen += b
            ce_sum += float(ce.data.sum())
            correct += float((res.logits.data.argmax(axis=1) == yb).sum())
            if res.transport_cost_raw is not None:
                tr_sum += float(transport_term(res.transport_cost_raw, cfg.lam, d, res.n_tokens).data.sum())
        if failed:
            nan = float("nan")
            record.append(EpochRow(epoch, nan, nan, nan, nan, nan, monitor.epoch_mean(epoch), True))
            break
        test_loss, test_acc = evaluate(model, data.test_x, data.test_y)
        row = EpochRow(epoch, ce_sum / seen, tr_sum / seen, correct / seen, test_loss, test_acc,
                       monitor.epoch_mean(epoch), False)
        record.append(row)
        log.info("epoch %d lr=%.2g loss=%.4f transport=%.4g acc=%.3f test_acc=%.3f",
                 epoch, lr, row.train_loss, row.train_transport, row.train_acc, row.test_acc)
        if on_epoch is not None:
            on_epoch(row, model)
    record.stability = monitor.report()
    return model, record


def with_lambda(cfg: TrainConfig, lam: float) -> TrainConfig:
    return replace(cfg, lam=lam)
