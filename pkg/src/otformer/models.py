"""Full classifiers: embedding, hidden-state dynamics, output head.

Three variants share the same parameter layout:

* ``vanilla``: discrete residual stack ``X <- X + f_i(X)`` for each block.
* ``ot``: one ODE ``dX/dt = (f_D o ... o f_1)(X)`` integrated over ``[0, T]``.
* ``node``: ``D`` chained ODEs, one per block, with the fully connected
  sublayer's skip connection removed inside the dynamics.
"""
from __future__ import annotations

import enum
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .blocks import BlockStack, block_forward, init_stack
from .ode import IntegrationBlowup, IntegratorConfig, Scheme, Trajectory, integrate
from .tensor import DimensionError, Precision, Tensor


class Variant(enum.Enum):
    VANILLA = "vanilla"
    OT = "ot"
    NODE = "node"

    @property
    def continuous(self) -> bool:
        return self is not Variant.VANILLA


class VocabularyError(IndexError):
    pass


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.OT
    d: int = 64
    k: int = 64
    heads: int = 1
    depth: int = 1
    fc_mult: int = 4
    activation: str = "gelu"
    # "linear" maps raw feature vectors, "lookup" maps integer token ids
    token_map: str = "linear"
    feature_dim: int = 49
    vocab: int = 0
    n_max: int = 16
    positional: bool = True
    cls_token: bool = True
    classes: int = 10
    scheme: Scheme = Scheme.EULER
    steps: int = 20
    horizon: float = 1.0
    precision: Precision = Precision.F32

    def __post_init__(self):
        for name, enum_t in (("variant", Variant), ("scheme", Scheme), ("precision", Precision)):
            val = getattr(self, name)
            if isinstance(val, str):
                object.__setattr__(self, name, enum_t(val.lower()))
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.token_map not in ("linear", "lookup"):
            raise ValueError(f"unknown token_map {self.token_map!r}")
        if self.token_map == "lookup" and self.vocab < 1:
            raise ValueError("lookup embedding needs vocab >= 1")

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.scheme, self.steps, self.horizon)

    @property
    def skip_in_fc(self) -> bool:
        return self.variant is not Variant.NODE

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, val in out.items():
            if isinstance(val, enum.Enum):
                out[key] = val.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class EmbeddingWeights:
    token_map: Tensor  # (d, feature_dim) for linear, (vocab, d) for lookup
    token_bias: Tensor | None  # (d, 1), linear only
    positional: Tensor | None  # (d, n_max)
    cls_token: Tensor | None  # (d, 1)
    kind: str = "linear"

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed.token_map", self.token_map
        if self.token_bias is not None:
            yield "embed.token_bias", self.token_bias
        if self.positional is not None:
            yield "embed.positional", self.positional
        if self.cls_token is not None:
            yield "embed.cls_token", self.cls_token


@dataclass
class HeadWeights:
    norm_gain: Tensor  # (d, 1)
    norm_bias: Tensor  # (d, 1)
    W: Tensor  # (C, d)
    b: Tensor  # (C, 1)

    def __post_init__(self):
        if self.W.shape[0] < 2:
            raise ValueError("head needs C >= 2 outputs")

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "head.norm.gain", self.norm_gain
        yield "head.norm.bias", self.norm_bias
        yield "head.W", self.W
        yield "head.b", self.b


@dataclass
class Model:
    config: ModelConfig
    embed: EmbeddingWeights
    stack: BlockStack
    head: HeadWeights

    @property
    def variant(self) -> Variant:
        return self.config.variant

    @property
    def integrator(self) -> IntegratorConfig:
        return self.config.integrator

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [*self.embed.named(), *self.stack.named(), *self.head.named()]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def with_variant(self, variant: Variant | str) -> "Model":
        """Same weight tensors, different dynamics."""
        cfg = replace(self.config, variant=Variant(variant) if isinstance(variant, str) else variant)
        stack = BlockStack(self.stack.blocks, skip_in_fc=cfg.skip_in_fc)
        return Model(cfg, self.embed, stack, self.head)

    def with_steps(self, steps: int) -> "Model":
        return Model(replace(self.config, steps=steps), self.embed, self.stack, self.head)


@dataclass
class ForwardResult:
    logits: Tensor  # (B, C)
    transport_cost_raw: Tensor | None  # (B,) for continuous variants
    n_tokens: int
    final_state: Tensor
    trajectories: list[Trajectory] = field(default_factory=list)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _param(data, precision) -> Tensor:
    return Tensor(data, requires_grad=True, precision=precision)


def init_model(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> Model:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = cfg.precision
    d = cfg.d
    if cfg.token_map == "linear":
        bound = np.sqrt(6.0 / (cfg.feature_dim + d))
        tmap = _param(rng.uniform(-bound, bound, (d, cfg.feature_dim)), p)
        tbias = _param(np.zeros((d, 1)), p)
    else:
        tmap = _param(rng.normal(0.0, 1.0, (cfg.vocab, d)), p)
        tbias = None
    pos = _param(rng.normal(0.0, 0.02, (d, cfg.n_max)), p) if cfg.positional else None
    cls = _param(rng.normal(0.0, 0.02, (d, 1)), p) if cfg.cls_token else None
    embed = EmbeddingWeights(tmap, tbias, pos, cls, kind=cfg.token_map)
    stack = init_stack(rng, d, cfg.k, cfg.heads, cfg.depth, fc_mult=cfg.fc_mult,
                       skip_in_fc=cfg.skip_in_fc, precision=p, activation=cfg.activation)
    bound = np.sqrt(6.0 / (d + cfg.classes))
    head = HeadWeights(
        norm_gain=_param(np.ones((d, 1)), p),
        norm_bias=_param(np.zeros((d, 1)), p),
        W=_param(rng.uniform(-bound, bound, (cfg.classes, d)), p),
        b=_param(np.zeros((cfg.classes, 1)), p),
    )
    return Model(cfg, embed, stack, head)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def embed(Z, w: EmbeddingWeights) -> Tensor:
    """Raw input to initial hidden state ``(B, d, n)`` (or ``(d, n)`` unbatched).

    ``Z`` is ``(B, n, feature_dim)`` floats for a linear map, or ``(B, n)``
    integer ids for a lookup table.
    """
    Z = np.asarray(Z)
    dtype = w.token_map.dtype
    if w.kind == "lookup":
        unbatched = Z.ndim == 1
        ids = Z[None] if unbatched else Z
        if ids.size and (ids.min() < 0 or ids.max() >= w.token_map.shape[0]):
            bad = ids[(ids < 0) | (ids >= w.token_map.shape[0])][0]
            raise VocabularyError(f"token id {bad} outside vocabulary of size {w.token_map.shape[0]}")
        X = T.transpose(T.embedding_lookup(w.token_map, ids))
    else:
        unbatched = Z.ndim == 2
        feats = Z[None] if unbatched else Z
        if feats.shape[-1] != w.token_map.shape[1]:
            raise DimensionError(f"token features of width {feats.shape[-1]}, expected {w.token_map.shape[1]}")
        raw = Tensor(np.swapaxes(feats, -1, -2).astype(dtype))
        X = w.token_map @ raw + w.token_bias
    n = X.shape[-1]
    if w.positional is not None:
        n_max = w.positional.shape[1]
        if n > n_max:
            raise SequenceLengthError(f"sequence of length {n} exceeds n_max={n_max}")
        X = X + T.slice_tokens(w.positional, slice(0, n))
    if w.cls_token is not None:
        cls = T.broadcast_to(w.cls_token, (X.shape[0], X.shape[1], 1))
        X = T.concat([cls, X], axis=-1)
    if unbatched:
        X = T.reshape(X, X.shape[1:])
    return X


def pool(XT: Tensor, cls: bool) -> Tensor:
    """Column 0 when a cls token is present, otherwise the token mean."""
    if cls:
        return T.slice_tokens(XT, 0)
    return T.mean(XT, axis=-1)


def head_forward(XT: Tensor, head: HeadWeights, cls: bool) -> Tensor:
    Xn = T.layer_norm(XT, head.norm_gain, head.norm_bias)
    pooled = pool(Xn, cls)  # (B, d)
    col = T.reshape(pooled, (*pooled.shape, 1))
    logits = head.W @ col + head.b
    return T.reshape(logits, logits.shape[:-1])


def run_dynamics(model: Model, X0: Tensor, record_states: bool = False,
                 integrator: IntegratorConfig | None = None) -> tuple[Tensor, Tensor | None, list[Trajectory]]:
    cfg = integrator or model.integrator
    variant = model.variant
    try:
        if variant is Variant.VANILLA:
            X = X0
            for block in model.stack.blocks:
                X = X + block_forward(X, block, skip_in_fc=True)
            return X, None, []
        if variant is Variant.OT:
            traj = integrate(X0, model.stack, cfg, record_states=record_states)
            return traj.final, traj.transport_cost_raw, [traj]
        trajs = []
        X = X0
        cost = None
        stack = BlockStack(model.stack.blocks, skip_in_fc=False)
        for i in range(len(stack)):
            traj = integrate(X, stack.single(i), cfg, record_states=record_states)
            trajs.append(traj)
            X = traj.final
            cost = traj.transport_cost_raw if cost is None else cost + traj.transport_cost_raw
        return X, cost, trajs
    except IntegrationBlowup as exc:
        raise IntegrationBlowup(exc.step, exc.where, variant=variant.value) from exc


def forward(model: Model, Z, record_states: bool = False,
            integrator: IntegratorConfig | None = None) -> ForwardResult:
    X0 = embed(Z, model.embed)
    batched = X0.ndim == 3
    if not batched:
        X0 = T.reshape(X0, (1, *X0.shape))
    XT, cost, trajs = run_dynamics(model, X0, record_states=record_states, integrator=integrator)
    logits = head_forward(XT, model.head, model.config.cls_token)
    return ForwardResult(logits=logits, transport_cost_raw=cost, n_tokens=X0.shape[-1],
                         final_state=XT, trajectories=trajs)


def predict(model: Model, Z, batch_size: int = 250) -> np.ndarray:
    Z = np.asarray(Z)
    out = []
    with T.no_grad():
        for i in range(0, len(Z), batch_size):
            out.append(forward(model, Z[i:i + batch_size]).logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"OTFCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(model: Model, extra: dict | None = None) -> bytes:
    """Serialize ``model`` to the little-endian checkpoint container."""
    cfg = model.config
    ptag = 0 if cfg.precision is Precision.F32 else 1
    le = np.dtype("<f4") if ptag == 0 else np.dtype("<f8")
    echo = json.dumps({"model": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IB", CKPT_VERSION, ptag))
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    params = model.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype=le).tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> tuple[Model, dict]:
    view = memoryview(blob)
    pos = 0

    def take(nbytes: int) -> memoryview:
        nonlocal pos
        if pos + nbytes > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = view[pos:pos + nbytes]
        pos += nbytes
        return out

    if bytes(take(8)) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, ptag = struct.unpack("<IB", take(5))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (elen,) = struct.unpack("<I", take(4))
    echo = json.loads(bytes(take(elen)).decode())
    cfg = ModelConfig.from_dict(echo["model"])
    if (ptag == 0) != (cfg.precision is Precision.F32):
        raise CheckpointError("precision tag disagrees with config echo")
    le = np.dtype("<f4") if ptag == 0 else np.dtype("<f8")
    model = init_model(cfg, seed=0)
    expected = dict(model.named_parameters())
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise CheckpointError(f"checkpoint holds {count} arrays, model expects {len(expected)}")
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(size * le.itemsize), dtype=le).reshape(shape)
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r}")
        target = expected[name]
        if target.shape != shape:
            raise CheckpointError(f"{name}: shape {shape} != expected {target.shape}")
        target.data = arr.astype(cfg.precision.dtype)
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after offset {pos}")
    return model, echo.get("extra", {})


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(model, extra))


def load_checkpoint(path) -> tuple[Model, dict]:
    return loads_checkpoint(Path(path).read_bytes())
