"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, zero_grads


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_checked: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(numeric) + floor)


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5,
                 indices: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param``.

    ``param.data`` is perturbed in place and restored. Returns the flat
    indices visited and the estimates at those indices.
    """
    flat = param.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    idx = np.fromiter(indices, dtype=np.int64)
    est = np.empty(idx.size, dtype=np.float64)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn().data)
        flat[i] = orig - step
        down = float(fn().data)
        flat[i] = orig
        est[j] = (up - down) / (2 * step)
    return idx, est


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], name: str = "",
                    step: float = 1e-5, max_entries: int | None = None,
                    rng: np.random.Generator | None = None,
                    floor: float = 1e-8) -> GradCheckResult:
    """Compare backprop against central differences for every tensor in ``params``.

    ``max_entries`` caps how many entries per parameter are probed (sampled
    with ``rng``); ``None`` probes all of them.
    """
    zero_grads(params)
    backward(fn())
    worst = 0.0
    count = 0
    for p in params:
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1).astype(np.float64)
        indices = None
        if max_entries is not None and p.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            indices = rng.choice(p.data.size, size=max_entries, replace=False)
        idx, est = numeric_grad(fn, p, step=step, indices=indices)
        err = relative_error(analytic[idx], est, floor=floor)
        worst = max(worst, float(err.max(initial=0.0)))
        count += idx.size
    zero_grads(params)
    return GradCheckResult(name=name, max_rel_err=worst, n_checked=count)


# ---------------------------------------------------------------------------
# standard suite: primitives, one block, the full regularised objective
# ---------------------------------------------------------------------------

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


@dataclass
class SuiteEntry:
    result: GradCheckResult
    tol: float

    @property
    def ok(self) -> bool:
        return self.result.ok(self.tol)


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True, precision="f64")


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    from . import tensor as T

    x, y = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    A, B = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    col, gain, bias = _leaf(rng, 3, 1), _leaf(rng, 3, 1), _leaf(rng, 3, 1)
    targets = rng.integers(0, 3, size=4)
    ids = np.array([3, 0, 0, 2])
    w = {name: rng.normal(size=shape) for name, shape in
         (("xy", (3, 4)), ("mm", (2, 3, 5)), ("sm", (3, 4)), ("cat", (6, 4)))}

    def proj(out, key):
        return T.tsum(out * Tensor(w[key], precision="f64"))

    return {
        "add": (lambda: proj(x + col, "xy"), [x, col]),
        "sub": (lambda: proj(x - y, "xy"), [x, y]),
        "mul": (lambda: proj(x * y, "xy"), [x, y]),
        "matmul": (lambda: proj(A @ B, "mm"), [A, B]),
        "transpose": (lambda: proj(T.transpose(T.transpose(x)), "xy"), [x]),
        "softmax_columns": (lambda: proj(T.softmax_columns(x), "sm"), [x]),
        "gelu": (lambda: proj(T.gelu(x), "xy"), [x]),
        "relu": (lambda: proj(T.relu(x), "xy"), [x]),
        "layer_norm": (lambda: proj(T.layer_norm(x, gain, bias), "xy"), [x, gain, bias]),
        "frobenius_sq": (lambda: T.frobenius_sq(x), [x]),
        "concat_heads": (lambda: proj(T.concat_heads([x, y]), "cat"), [x, y]),
        "mean": (lambda: T.mean(x * y), [x, y]),
        "cross_entropy": (lambda: T.tsum(T.cross_entropy(T.transpose(x), targets)), [x]),
        "scale": (lambda: proj(T.scale(x, -1.7) / 3.0, "xy"), [x]),
        "exp": (lambda: proj(T.exp(x), "xy"), [x]),
        "square": (lambda: proj(T.square(x), "xy"), [x]),
        "tsum": (lambda: proj(T.broadcast_to(T.tsum(x * y, axis=0, keepdims=True), (3, 4)), "xy"), [x, y]),
        "reshape": (lambda: proj(T.reshape(T.reshape(x, (2, 6)), (3, 4)), "xy"), [x]),
        "concat": (lambda: proj(T.concat([x, y], axis=0), "cat"), [x, y]),
        "index_select": (lambda: T.tsum(T.slice_tokens(x, 1) * x[:, 2]) + T.tsum(x[1] * x[1]), [x]),
        "embedding_lookup": (lambda: proj(T.transpose(T.embedding_lookup(T.transpose(x), ids)), "xy"), [x]),
        "broadcast_to": (lambda: proj(T.broadcast_to(col, (3, 4)), "xy"), [col]),
    }


def run_suite(seed: int = 0) -> list[SuiteEntry]:
    """Every primitive, a full block, and the full objective on a tiny F64 model."""
    from . import tensor as T
    from .blocks import block_forward, init_block
    from .models import ModelConfig, forward, init_model
    from .training import objective

    rng = np.random.default_rng(seed)
    entries = []
    for name, (fn, params) in primitive_cases(rng).items():
        entries.append(SuiteEntry(check_gradients(fn, params, name=name), PRIMITIVE_TOL))

    block = init_block(rng, 4, 2, 2, fc_mult=4, precision="f64")
    X = _leaf(rng, 2, 4, 3)
    wb = Tensor(rng.normal(size=(2, 4, 3)), precision="f64")
    bparams = [p for _, p in block.named("b")] + [X]
    entries.append(SuiteEntry(
        check_gradients(lambda: T.tsum(block_forward(X, block) * wb), bparams, name="block"),
        COMPOSITE_TOL))

    cfg = ModelConfig(d=4, k=2, heads=2, depth=2, feature_dim=3, n_max=5, classes=3, steps=2,
                      precision="f64")
    model = init_model(cfg, rng)
    for p in model.parameters():
        p.data += rng.normal(0, 0.3, p.data.shape)
    Z = rng.normal(size=(3, 5, 3))
    labels = rng.integers(0, 3, size=3)

    def full_objective():
        res = forward(model, Z)
        return objective(res.logits, labels, res.transport_cost_raw, 0.5, cfg.d, res.n_tokens)

    entries.append(SuiteEntry(check_gradients(full_objective, model.parameters(), name="objective"),
                              COMPOSITE_TOL))
    return entries
