"""Graph attention over fully connected coordinate-channel graphs.

Node features live in DCT trajectory space: ``H`` has shape (..., C, F) with
one row per coordinate channel and one column per DCT coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from detgn.numerics import RngStream
from detgn.numerics import autodiff as ad
from detgn.params import check_mode, dropout_mask, glorot, static

LEAKY_SLOPE = 0.2
LN_EPS = 1e-10


@dataclass(frozen=True)
class GatLayerParams:
    weight: object  # (F, F)
    att_src: object  # (K, F)
    att_dst: object  # (K, F)
    adjacency: np.ndarray | None = static(None)  # (C, C) in {0, 1}; None means all ones

    @property
    def heads(self) -> int:
        return ad.value(self.att_src).shape[0]


@dataclass(frozen=True)
class GatBlockParams:
    layer1: GatLayerParams
    layer2: GatLayerParams
    ln1_scale: object
    ln1_shift: object
    ln2_scale: object
    ln2_shift: object
    dropout: float = static(0.0)


def init_gat_layer(rng: RngStream, features: int, heads: int = 4, adjacency=None) -> GatLayerParams:
    if heads < 1:
        raise ValueError("need at least one attention head")
    return GatLayerParams(
        weight=glorot(rng.child("W"), (features, features), features, features),
        att_src=glorot(rng.child("a_src"), (heads, features), features, 1),
        att_dst=glorot(rng.child("a_dst"), (heads, features), features, 1),
        adjacency=adjacency,
    )


def init_gat_block(rng: RngStream, features: int, heads: int = 4, dropout: float = 0.0) -> GatBlockParams:
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    return GatBlockParams(
        layer1=init_gat_layer(rng.child("layer1"), features, heads),
        layer2=init_gat_layer(rng.child("layer2"), features, heads),
        ln1_scale=np.ones(features),
        ln1_shift=np.zeros(features),
        ln2_scale=np.ones(features),
        ln2_shift=np.zeros(features),
        dropout=dropout,
    )


def _swap_last(x, n_lead: int, order):
    return ad.transpose(x, tuple(range(n_lead)) + tuple(n_lead + o for o in order))


def _check(h, layer: GatLayerParams):
    f = ad.value(layer.weight).shape[0]
    if ad.value(h).shape[-1] != f or ad.value(layer.att_src).shape[1] != f:
        raise ValueError(f"feature width {ad.value(h).shape[-1]} does not match layer width {f}")


def _attention(hw, layer: GatLayerParams):
    lead = ad.value(hw).ndim - 2
    c = ad.value(hw).shape[-2]
    src = _swap_last(ad.matmul(hw, ad.transpose(layer.att_src, (1, 0))), lead, (1, 0))  # (..., K, C)
    dst = _swap_last(ad.matmul(hw, ad.transpose(layer.att_dst, (1, 0))), lead, (1, 0))
    shape = ad.value(src).shape
    scores = ad.add(ad.reshape(src, shape + (1,)), ad.reshape(dst, shape[:-1] + (1, c)))
    att = ad.softmax(ad.leaky_relu(scores, LEAKY_SLOPE), axis=-1)  # (..., K, C, C)
    return ad.mean(att, axis=lead)


def attention_weights(h, layer: GatLayerParams, rng: RngStream | None = None):
    """Head-averaged attention matrix; every row sums to one."""
    _check(h, layer)
    return _attention(ad.matmul(h, layer.weight), layer)


def gat_layer_forward(h, layer: GatLayerParams, activation=None):
    """``activation((alpha * A) H W)``; the block passes no activation."""
    _check(h, layer)
    hw = ad.matmul(h, layer.weight)
    alpha = _attention(hw, layer)
    if layer.adjacency is not None:
        alpha = ad.mul(alpha, layer.adjacency)
    out = ad.matmul(alpha, hw)
    return activation(out) if activation is not None else out


def layer_norm(x, scale, shift, axis: int):
    return ad.add(ad.mul(ad.normalize(x, axis=axis, eps=LN_EPS), scale), shift)


def gat_block_forward(h, block: GatBlockParams, mode: str = "eval", rng: RngStream | None = None):
    active = check_mode(mode, rng)
    shape = ad.value(h).shape
    x = ad.relu(layer_norm(gat_layer_forward(h, block.layer1), block.ln1_scale, block.ln1_shift, -1))
    if active:
        x = ad.mul(x, dropout_mask(rng, shape, block.dropout))
    x = ad.relu(layer_norm(gat_layer_forward(x, block.layer2), block.ln2_scale, block.ln2_shift, -1))
    if active:
        x = ad.mul(x, dropout_mask(rng, shape, block.dropout))
    return ad.add(h, x)
