"""Post-hoc analyses of trained continuous-depth models.

* ``straightness``: arc length over displacement of the hidden-state paths.
* ``sweep_steps``: accuracy of a frozen model re-integrated with other step counts.
* ``ablate``: paired runs with and without the transport penalty.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import TaskData
from .models import Model, Variant, embed, run_dynamics
from .ode import IntegratorConfig, Scheme, Trajectory
from .training import TrainConfig, evaluate, train, with_lambda


class VariantError(ValueError):
    """Analysis needs a continuous-time model."""


def _require_continuous(model: Model) -> None:
    if not model.variant.continuous:
        raise VariantError(f"{model.variant.value} model has no ODE to analyse")


# ---------------------------------------------------------------------------
# straightness
# ---------------------------------------------------------------------------

@dataclass
class StraightnessReport:
    arc_length: np.ndarray  # (B,)
    displacement: np.ndarray  # (B,)
    ratio: np.ndarray  # (B,), 1 where degenerate
    degenerate: np.ndarray  # (B,) bool, zero displacement
    speed_variation: np.ndarray  # (B,) std/mean of per-step speed

    @property
    def mean_ratio(self) -> float:
        return float(self.ratio.mean())

    @property
    def p95_ratio(self) -> float:
        return float(np.percentile(self.ratio, 95))

    @property
    def mean_speed_variation(self) -> float:
        return float(self.speed_variation.mean())

    def summary(self) -> dict:
        return {
            "samples": int(self.ratio.size),
            "mean_ratio": self.mean_ratio,
            "p95_ratio": self.p95_ratio,
            "mean_speed_variation": self.mean_speed_variation,
            "degenerate": int(self.degenerate.sum()),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "arc_length", "displacement", "ratio", "speed_variation", "degenerate"])
        for i in range(self.ratio.size):
            w.writerow([i, f"{self.arc_length[i]:.6g}", f"{self.displacement[i]:.6g}",
                        f"{self.ratio[i]:.6g}", f"{self.speed_variation[i]:.6g}", int(self.degenerate[i])])
        return buf.getvalue()


def _step_speeds(traj: Trajectory) -> np.ndarray:
    """Quadrature-weighted ``||f||_F`` per integration step, shape ``(steps, B)``."""
    speeds = traj.speeds()
    if traj.config.scheme is Scheme.RK4:
        s = speeds.reshape(traj.config.steps, 4, *speeds.shape[1:])
        return (s[:, 0] + 2 * s[:, 1] + 2 * s[:, 2] + s[:, 3]) / 6
    return speeds


def report_from_trajectories(trajs: Sequence[Trajectory], X0: np.ndarray, XT: np.ndarray,
                             tol: float = 1e-12) -> StraightnessReport:
    """Arc length ``sum h ||f||``, chained over consecutive ODE segments."""
    speeds = np.concatenate([_step_speeds(t) for t in trajs], axis=0)
    hs = np.concatenate([np.full(t.config.steps, t.config.h) for t in trajs])
    hs = hs.reshape(-1, *([1] * (speeds.ndim - 1)))
    arc = (hs * speeds).sum(axis=0)
    disp = np.sqrt(((XT - X0) ** 2).sum(axis=(-2, -1)))
    scale = np.maximum(1.0, np.sqrt((X0**2).sum(axis=(-2, -1))))
    degenerate = disp <= tol * scale
    ratio = np.where(degenerate, 1.0, arc / np.where(degenerate, 1.0, disp))
    mean_speed = speeds.mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cv = np.where(mean_speed > 0, speeds.std(axis=0) / mean_speed, 0.0)
    return StraightnessReport(np.atleast_1d(arc), np.atleast_1d(disp), np.atleast_1d(ratio),
                              np.atleast_1d(degenerate), np.atleast_1d(cv))


def straightness(model: Model, xs, max_samples: int = 256,
                 integrator: IntegratorConfig | None = None) -> StraightnessReport:
    """Integrate the first ``max_samples`` inputs and measure their paths."""
    _require_continuous(model)
    xs = xs[:max_samples]
    groups: dict[int, list[int]] = {}
    for i, x in enumerate(xs):
        groups.setdefault(len(x), []).append(i)
    parts = []
    order = []
    with T.no_grad():
        for idx in groups.values():
            X0 = embed(np.stack([np.asarray(xs[i]) for i in idx]), model.embed)
            XT, _, trajs = run_dynamics(model, X0, integrator=integrator)
            parts.append(report_from_trajectories(trajs, X0.data.astype(np.float64),
                                                  XT.data.astype(np.float64)))
            order.extend(idx)
    inv = np.argsort(order)
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])[inv]  # noqa: E731
    return StraightnessReport(cat("arc_length"), cat("displacement"), cat("ratio"),
                              cat("degenerate"), cat("speed_variation"))


# ---------------------------------------------------------------------------
# step sweep
# ---------------------------------------------------------------------------

def sweep_steps(model: Model, xs, ys, step_list: Sequence[int]) -> list[tuple[int, float]]:
    """Test accuracy of the frozen model for each step count (same horizon and scheme)."""
    _require_continuous(model)
    rows = []
    for steps in step_list:
        _, acc = evaluate(model.with_steps(int(steps)), xs, ys)
        rows.append((int(steps), acc))
    return rows


def sweep_csv(rows: Sequence[tuple[int, float]]) -> str:
    lines = ["steps,test_acc"]
    lines += [f"{n},{acc:.6g}" for n, acc in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

ABLATE_COLUMNS = ("seed", "lam", "test_acc", "best_test_acc", "train_acc", "nan_flag", "epochs_run")


@dataclass
class AblationRow:
    seed: int
    lam: float
    test_acc: float
    best_test_acc: float
    train_acc: float
    nan_flag: bool
    epochs_run: int


def _score(acc: float) -> float:
    # a run that died on NaN counts as worse than any finished run
    return -math.inf if math.isnan(acc) else acc


def ablate(cfg: TrainConfig, data: TaskData, seeds: Sequence[int],
           lam: float | None = None) -> list[AblationRow]:
    """Train ``lam=0`` and ``lam`` (default: ``cfg.lam``) for each seed."""
    lam = cfg.lam if lam is None else lam
    rows = []
    for seed in seeds:
        for value in (0.0, lam):
            _, rec = train(with_lambda(cfg, value).with_seed(seed), data)
            finished = [r for r in rec.rows if not r.nan_flag]
            best = max((r.test_acc for r in finished), default=float("nan"))
            last = rec.rows[-1]
            rows.append(AblationRow(seed, value, last.test_acc, best, last.train_acc,
                                    rec.nan_flag, len(rec.rows)))
    return rows


def paired_wins(rows: Sequence[AblationRow], key: str = "test_acc") -> list[bool]:
    """Per seed: did the regularised run match or beat its unregularised partner?"""
    by_seed: dict[int, dict[bool, AblationRow]] = {}
    for r in rows:
        by_seed.setdefault(r.seed, {})[r.lam > 0] = r
    out = []
    for seed in sorted(by_seed):
        pair = by_seed[seed]
        out.append(_score(getattr(pair[True], key)) >= _score(getattr(pair[False], key)))
    return out


def nan_consistent(rows: Sequence[AblationRow]) -> bool:
    """A regularised run never trips the NaN flag when its partner did."""
    by_seed: dict[int, dict[bool, AblationRow]] = {}
    for r in rows:
        by_seed.setdefault(r.seed, {})[r.lam > 0] = r
    return all(not (p[True].nan_flag and p[False].nan_flag) for p in by_seed.values())


def ablate_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATE_COLUMNS)
    for r in rows:
        w.writerow([r.seed, f"{r.lam:.6g}", f"{r.test_acc:.6g}", f"{r.best_test_acc:.6g}",
                    f"{r.train_acc:.6g}", int(r.nan_flag), r.epochs_run])
    return buf.getvalue()


__all__ = [
    "VariantError", "StraightnessReport", "report_from_trajectories", "straightness",
    "sweep_steps", "sweep_csv", "AblationRow", "ablate", "paired_wins", "nan_consistent",
    "ablate_csv", "ABLATE_COLUMNS",
]
