"""Transformer blocks acting on token columns.

A block maps ``X`` of shape ``(..., d, n)`` to the same shape. Layer norm is
applied before attention and before the fully connected sublayer (pre-norm).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Precision, Tensor


@dataclass
class AttentionHeadWeights:
    Q: Tensor  # (k, d)
    K: Tensor  # (k, d)
    V: Tensor  # (k, d)
    W: Tensor  # (d, k)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key in ("Q", "K", "V", "W"):
            yield f"{prefix}.{key}", getattr(self, key)


@dataclass
class FCWeights:
    """Token-wise two-layer MLP ``d -> hidden -> d``."""

    W1: Tensor  # (hidden, d)
    b1: Tensor  # (hidden, 1)
    W2: Tensor  # (d, hidden)
    b2: Tensor  # (d, 1)
    activation: str = "gelu"

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key in ("W1", "b1", "W2", "b2"):
            yield f"{prefix}.{key}", getattr(self, key)


@dataclass
class BlockWeights:
    heads: list[AttentionHeadWeights]
    norm1_gain: Tensor  # (d, 1)
    norm1_bias: Tensor
    fc: FCWeights | None = None
    norm2_gain: Tensor | None = None
    norm2_bias: Tensor | None = None

    def __post_init__(self):
        if not self.heads:
            raise ValueError("a block needs at least one attention head")
        if self.fc is not None and self.fc.W2.shape[0] != self.d:
            raise DimensionError(f"fc output width {self.fc.W2.shape[0]} != d={self.d}")

    @property
    def d(self) -> int:
        return self.heads[0].W.shape[0]

    @property
    def k(self) -> int:
        return self.heads[0].Q.shape[0]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for h, head in enumerate(self.heads):
            yield from head.named(f"{prefix}.head{h}")
        yield f"{prefix}.norm1.gain", self.norm1_gain
        yield f"{prefix}.norm1.bias", self.norm1_bias
        if self.fc is not None:
            yield f"{prefix}.norm2.gain", self.norm2_gain
            yield f"{prefix}.norm2.bias", self.norm2_bias
            yield from self.fc.named(f"{prefix}.fc")


@dataclass
class BlockStack:
    blocks: list[BlockWeights]
    skip_in_fc: bool = True

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("a stack needs at least one block")
        b0 = self.blocks[0]
        for b in self.blocks[1:]:
            if (b.d, b.k, len(b.heads)) != (b0.d, b0.k, len(b0.heads)):
                raise DimensionError("all blocks in a stack must share d, k and H")

    def __len__(self) -> int:
        return len(self.blocks)

    def named(self, prefix: str = "stack") -> Iterator[tuple[str, Tensor]]:
        for i, b in enumerate(self.blocks):
            yield from b.named(f"{prefix}.block{i}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named()]

    def single(self, i: int) -> "BlockStack":
        return BlockStack([self.blocks[i]], skip_in_fc=self.skip_in_fc)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, precision) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    return Tensor(data, requires_grad=True, precision=precision)


def _const(value: float, shape, precision) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, precision=precision)


def init_block(rng: np.random.Generator, d: int, k: int, heads: int, fc_mult: int = 4,
               precision=Precision.F32, activation: str = "gelu") -> BlockWeights:
    """Xavier-uniform projections, unit norm gains, zero biases.

    ``fc_mult=0`` builds an attention-only block with no fully connected sublayer.
    """
    hs = [
        AttentionHeadWeights(
            Q=xavier_uniform(rng, k, d, precision),
            K=xavier_uniform(rng, k, d, precision),
            V=xavier_uniform(rng, k, d, precision),
            W=xavier_uniform(rng, d, k, precision),
        )
        for _ in range(heads)
    ]
    fc = None
    norm2_gain = norm2_bias = None
    if fc_mult > 0:
        hidden = fc_mult * d
        fc = FCWeights(
            W1=xavier_uniform(rng, hidden, d, precision),
            b1=_const(0.0, (hidden, 1), precision),
            W2=xavier_uniform(rng, d, hidden, precision),
            b2=_const(0.0, (d, 1), precision),
            activation=activation,
        )
        norm2_gain = _const(1.0, (d, 1), precision)
        norm2_bias = _const(0.0, (d, 1), precision)
    return BlockWeights(
        heads=hs,
        norm1_gain=_const(1.0, (d, 1), precision),
        norm1_bias=_const(0.0, (d, 1), precision),
        fc=fc,
        norm2_gain=norm2_gain,
        norm2_bias=norm2_bias,
    )


def init_stack(rng: np.random.Generator, d: int, k: int, heads: int, depth: int,
               fc_mult: int = 4, skip_in_fc: bool = True, precision=Precision.F32,
               activation: str = "gelu") -> BlockStack:
    blocks = [init_block(rng, d, k, heads, fc_mult, precision, activation) for _ in range(depth)]
    return BlockStack(blocks, skip_in_fc=skip_in_fc)


# ---------------------------------------------------------------------------
# forward maps
# ---------------------------------------------------------------------------

def _check_width(X: Tensor, block: BlockWeights) -> None:
    if X.ndim < 2 or X.shape[-2] != block.d:
        raise DimensionError(f"input of shape {X.shape} does not have d={block.d} rows")


def attention_weights(Xn: Tensor, head: AttentionHeadWeights, k: int) -> Tensor:
    """Column ``j`` holds the softmax over tokens ``i`` of ``<K x_i, Q x_j> / sqrt(k)``."""
    q = head.Q @ Xn
    kx = head.K @ Xn
    scores = T.scale(T.transpose(kx) @ q, 1.0 / math.sqrt(k))
    return T.softmax_columns(scores)


def self_attention(X: Tensor, block: BlockWeights) -> Tensor:
    """``U = X + sum_h W^h V^h X' A^h`` with ``X'`` the layer-normed input."""
    _check_width(X, block)
    Xn = T.layer_norm(X, block.norm1_gain, block.norm1_bias)
    k = block.k
    mixed = [(h.V @ Xn) @ attention_weights(Xn, h, k) for h in block.heads]
    if len(block.heads) == 1:
        update = block.heads[0].W @ mixed[0]
    else:
        W_all = T.concat([h.W for h in block.heads], axis=-1)
        update = W_all @ T.concat_heads(mixed)
    return X + update


def fc_forward(U: Tensor, fc: FCWeights) -> Tensor:
    hidden = T.relu_or_gelu(fc.W1 @ U + fc.b1, fc.activation)
    return fc.W2 @ hidden + fc.b2


def block_forward(X: Tensor, block: BlockWeights, skip_in_fc: bool = True) -> Tensor:
    U = self_attention(X, block)
    if block.fc is None:
        return U
    G = fc_forward(T.layer_norm(U, block.norm2_gain, block.norm2_bias), block.fc)
    return U + G if skip_in_fc else G


def stack_forward(X: Tensor, stack: BlockStack) -> Tensor:
    """Composition ``f_D o ... o f_1``; the velocity field of the hidden-state ODE."""
    for block in stack.blocks:
        X = block_forward(X, block, stack.skip_in_fc)
    return X


def count_parameters(stack: BlockStack) -> int:
    return sum(p.data.size for p in stack.parameters())


__all__ = [
    "AttentionHeadWeights", "FCWeights", "BlockWeights", "BlockStack",
    "init_block", "init_stack", "xavier_uniform",
    "attention_weights", "self_attention", "fc_forward", "block_forward", "stack_forward",
    "count_parameters",
]
