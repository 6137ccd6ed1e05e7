"""Transformer encoder with a graph-convolution unit injected per block.

Blocks are pre-norm: the first residual branch is LN -> MHSA -> (graph unit),
the second LN -> MLP. The graph unit comes in three kinds (bottleneck
residual block, basic graph convolution, or a parameter-matched MLP) and can
sit after, before, or parallel to self-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ArchitectureError(ValueError):
    """Inconsistent encoder configuration (head counts, dims, designs)."""


DESIGNS = ("after", "before", "parallel")
GRAPH_UNIT_KINDS = ("residual_block", "basic_conv", "mlp_equivalent", "none")


def mlp_equivalent_hidden(d: int) -> int:
    """Hidden width making a d->k->d MLP match the residual block's parameter count."""
    target = grb_param_count(d)
    return max(1, round((target - d) / (2 * d + 1)))


def grb_param_count(d: int) -> int:
    """Closed-form parameter count of the bottleneck residual block at width d."""
    half = d // 2
    return (d * half + half) + half * half + (half * d + d) + (2 * d + 2 * half + 2 * half)


@dataclass
class GrbParams:
    """Bottleneck residual block: d -> d/2 -> d with three layer norms."""

    ln_a_gamma: Tensor
    ln_a_beta: Tensor
    w_down: Tensor  # (d, d/2)
    b_down: Tensor
    ln_b_gamma: Tensor
    ln_b_beta: Tensor
    w_g: Tensor  # (d/2, d/2) graph-conv weight
    ln_c_gamma: Tensor
    ln_c_beta: Tensor
    w_up: Tensor  # (d/2, d)
    b_up: Tensor


@dataclass
class BasicConvParams:
    w_g: Tensor  # (d, d)


@dataclass
class MlpEquivalentParams:
    w1: Tensor  # (d, k)
    b1: Tensor
    w2: Tensor  # (k, d)
    b2: Tensor


@dataclass
class EncoderBlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    graph_unit: GrbParams | BasicConvParams | MlpEquivalentParams | None
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w_mlp1: Tensor  # (d, r*d)
    b_mlp1: Tensor
    w_mlp2: Tensor  # (r*d, d)
    b_mlp2: Tensor


@dataclass
class EncoderParams:
    proj_w: Tensor  # (d_in, d_k)
    proj_b: Tensor
    blocks: list  # of EncoderBlockParams
    head_w: Tensor  # (d_k, 3): aux regression head; the last encoder's is final
    head_b: Tensor


@dataclass
class StackParams:
    encoders: list  # of EncoderParams, hidden dims decreasing


@dataclass
class StackOutput:
    coarse_vertices: Tensor  # (V_coarse, 3)
    joints3d: Tensor  # (J, 3)
    intermediate_coarse: list  # per-encoder (V_coarse, 3)
    token_out: Tensor  # final encoder exit, (n, d3)
    attn: np.ndarray  # last block of last encoder, (h, n, n)
    attn_all: list | None  # [(encoder_idx, block_idx, (h, n, n))] when collected


def mhsa_forward(
    x: Tensor, params: EncoderBlockParams, heads: int
) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention; returns output and per-head attention maps."""
    _, d = x.shape
    if d % heads != 0:
        raise ArchitectureError(f"heads={heads} does not divide hidden size {d}")
    q = ad.matmul(x, params.w_q)
    k = ad.matmul(x, params.w_k)
    v = ad.matmul(x, params.w_v)
    y, maps = ad.scaled_dot_attention(q, k, v, heads)
    return ad.matmul(y, params.w_o), maps


def graph_conv(adjacency, y: Tensor, w_g: Tensor) -> Tensor:
    """GELU(A_hat @ Y @ W_G): message passing weighted by normalized adjacency."""
    adj = adjacency if isinstance(adjacency, Tensor) else Tensor(adjacency)
    if adj.shape[1] != y.shape[0]:
        raise ad.DimensionError(
            f"adjacency {adj.shape} incompatible with tokens {y.shape}"
        )
    return ad.gelu(ad.matmul(ad.matmul(adj, y), w_g))


def graph_residual_block(adjacency, y: Tensor, params: GrbParams, eps: float = 1e-5) -> Tensor:
    """Bottleneck residual around a graph convolution (LN and GELU throughout)."""
    d = y.shape[1]
    if d % 2 != 0:
        raise ArchitectureError(f"graph residual block needs even width, got {d}")
    z = ad.gelu(ad.layer_norm(y, params.ln_a_gamma, params.ln_a_beta, eps))
    z = ad.add_rowvec(ad.matmul(z, params.w_down), params.b_down)
    z = ad.gelu(ad.layer_norm(z, params.ln_b_gamma, params.ln_b_beta, eps))
    z = graph_conv(adjacency, z, params.w_g)
    z = ad.gelu(ad.layer_norm(z, params.ln_c_gamma, params.ln_c_beta, eps))
    z = ad.add_rowvec(ad.matmul(z, params.w_up), params.b_up)
    return ad.add(y, z)


def apply_graph_unit(adjacency, y: Tensor, unit, eps: float = 1e-5) -> Tensor:
    if unit is None:
        return y
    if isinstance(unit, GrbParams):
        return graph_residual_block(adjacency, y, unit, eps)
    if isinstance(unit, BasicConvParams):
        return graph_conv(adjacency, y, unit.w_g)
    if isinstance(unit, MlpEquivalentParams):
        h = ad.gelu(ad.add_rowvec(ad.matmul(y, unit.w1), unit.b1))
        return ad.add_rowvec(ad.matmul(h, unit.w2), unit.b2)
    raise ArchitectureError(f"unknown graph unit {type(unit).__name__}")


def _mlp(x: Tensor, params: EncoderBlockParams) -> Tensor:
    h = ad.gelu(ad.add_rowvec(ad.matmul(x, params.w_mlp1), params.b_mlp1))
    return ad.add_rowvec(ad.matmul(h, params.w_mlp2), params.b_mlp2)


def encoder_block_forward(
    adjacency,
    x: Tensor,
    params: EncoderBlockParams,
    heads: int,
    design: str = "after",
    eps: float = 1e-5,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Pre-norm block: X + branch(LN1(X)), then H + MLP(LN2(H)).

    The first branch is MHSA combined with the graph unit per `design`;
    dropout (training only) applies to the MHSA and MLP outputs.
    """
    if design not in DESIGNS:
        raise ArchitectureError(f"unknown design {design!r}")

    def drop(t: Tensor) -> Tensor:
        if dropout_p > 0.0:
            if rng is None:
                raise ArchitectureError("dropout requires an rng")
            return ad.dropout(t, dropout_p, rng)
        return t

    normed = ad.layer_norm(x, params.ln1_gamma, params.ln1_beta, eps)
    if design == "after" or params.graph_unit is None:
        y, maps = mhsa_forward(normed, params, heads)
        branch = apply_graph_unit(adjacency, drop(y), params.graph_unit, eps)
    elif design == "before":
        y, maps = mhsa_forward(apply_graph_unit(adjacency, normed, params.graph_unit, eps), params, heads)
        branch = drop(y)
    else:  # parallel
        y, maps = mhsa_forward(normed, params, heads)
        branch = ad.add(drop(y), apply_graph_unit(adjacency, normed, params.graph_unit, eps))
    h = ad.add(x, branch)
    out = ad.add(h, drop(_mlp(ad.layer_norm(h, params.ln2_gamma, params.ln2_beta, eps), params)))
    return out, maps


def graphormer_encoder_forward(
    adjacency,
    x: Tensor,
    blocks,
    heads: int,
    design: str = "after",
    eps: float = 1e-5,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    collect=None,
) -> tuple[Tensor, np.ndarray]:
    """Sequential stack of identical-architecture blocks; returns last attention."""
    maps = None
    for i, block in enumerate(blocks):
        x, maps = encoder_block_forward(
            adjacency, x, block, heads, design, eps, dropout_p, rng
        )
        if collect is not None:
            collect(i, maps)
    return x, maps


def stack_forward(
    adjacency,
    tokens: Tensor,
    stack: StackParams,
    n_grid: int,
    n_joints: int,
    heads: int,
    design: str = "after",
    eps: float = 1e-5,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    collect_attn: bool = False,
) -> StackOutput:
    """Run the dimension-reducing encoders and split token outputs.

    Each encoder projects to its hidden size and runs its blocks; a per-encoder
    regression head taps the coarse mesh at every exit for intermediate
    supervision (the last head also produces the final joints and vertices).
    Grid-token outputs are discarded.
    """
    adj = adjacency if isinstance(adjacency, Tensor) else Tensor(adjacency)
    n = tokens.shape[0]
    if adj.shape[0] != n:
        raise ArchitectureError(
            f"token count {n} does not match adjacency {adj.shape}"
        )
    n_vertices = n - n_grid - n_joints
    x = tokens
    intermediates = []
    attn_all: list | None = [] if collect_attn else None
    maps = None
    for enc_idx, enc in enumerate(stack.encoders):
        x = ad.add_rowvec(ad.matmul(x, enc.proj_w), enc.proj_b)
        collect = None
        if collect_attn:
            collect = lambda b, m, e=enc_idx: attn_all.append((e, b, m))
        x, maps = graphormer_encoder_forward(
            adj, x, enc.blocks, heads, design, eps, dropout_p, rng, collect
        )
        coords = ad.add_rowvec(ad.matmul(x, enc.head_w), enc.head_b)
        intermediates.append(ad.narrow(coords, 0, n_grid + n_joints, n_vertices))
        if enc_idx == len(stack.encoders) - 1:
            joints3d = ad.narrow(coords, 0, n_grid, n_joints)
    return StackOutput(
        coarse_vertices=intermediates[-1],
        joints3d=joints3d,
        intermediate_coarse=intermediates,
        token_out=x,
        attn=maps,
        attn_all=attn_all,
    )
