"""Dilated causal convolution blocks. Activations are (batch, channels, steps)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from detgn.gat import layer_norm
from detgn.numerics import RngStream
from detgn.numerics import autodiff as ad
from detgn.params import check_mode, dropout_mask, glorot, static


@dataclass(frozen=True)
class ConvKernel:
    weight: object  # (out, in, width)
    bias: object  # (out,)
    dilation: int = static(1)

    @property
    def width(self) -> int:
        return ad.value(self.weight).shape[2]


@dataclass(frozen=True)
class TcnBlockParams:
    conv1: ConvKernel
    conv2: ConvKernel
    ln1_scale: object  # (out, 1)
    ln1_shift: object
    ln2_scale: object
    ln2_shift: object
    skip: ConvKernel | None = None
    dropout: float = static(0.0)


def init_conv(rng: RngStream, cin: int, cout: int, width: int, dilation: int = 1) -> ConvKernel:
    if width < 1 or dilation < 1:
        raise ValueError("kernel width and dilation must be at least 1")
    return ConvKernel(
        weight=glorot(rng, (cout, cin, width), cin * width, cout * width),
        bias=np.zeros(cout),
        dilation=dilation,
    )


def init_tcn_block(
    rng: RngStream, cin: int, cout: int, width: int = 3, dilation: int = 1, dropout: float = 0.0
) -> TcnBlockParams:
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    return TcnBlockParams(
        conv1=init_conv(rng.child("conv1"), cin, cout, width, dilation),
        conv2=init_conv(rng.child("conv2"), cout, cout, width, dilation),
        ln1_scale=np.ones((cout, 1)),
        ln1_shift=np.zeros((cout, 1)),
        ln2_scale=np.ones((cout, 1)),
        ln2_shift=np.zeros((cout, 1)),
        skip=init_conv(rng.child("skip"), cin, cout, 1) if cin != cout else None,
        dropout=dropout,
    )


def dilated_causal_conv(x, kernel: ConvKernel):
    """Accepts (channels, steps) or (batch, channels, steps)."""
    if ad.value(x).ndim == 2:
        return ad.reshape(dilated_causal_conv(ad.reshape(x, (1,) + ad.value(x).shape), kernel),
                          (ad.value(kernel.weight).shape[0], ad.value(x).shape[1]))
    return ad.causal_conv1d(x, kernel.weight, kernel.bias, kernel.dilation)


def receptive_field(width: int, n_blocks: int, dilation_base: int) -> int:
    """Past steps visible to one output of ``n_blocks`` two-convolution blocks."""
    return 1 + 2 * (width - 1) * sum(dilation_base**i for i in range(n_blocks))


def spatial_dropout_mask(channels: int, rate: float, rng: RngStream, batch: int | None = None) -> np.ndarray:
    """Per-channel keep mask, broadcast over time; shape (channels, 1) or (batch, channels, 1)."""
    shape = (channels, 1) if batch is None else (batch, channels, 1)
    return dropout_mask(rng, shape, rate)


def tcn_block_forward(x, block: TcnBlockParams, mode: str = "eval", rng: RngStream | None = None):
    active = check_mode(mode, rng)
    batch = ad.value(x).shape[0]
    cout = ad.value(block.conv1.weight).shape[0]
    y = ad.relu(layer_norm(ad.causal_conv1d(x, block.conv1.weight, block.conv1.bias, block.conv1.dilation),
                           block.ln1_scale, block.ln1_shift, -2))
    if active:
        y = ad.mul(y, spatial_dropout_mask(cout, block.dropout, rng, batch))
    y = ad.relu(layer_norm(ad.causal_conv1d(y, block.conv2.weight, block.conv2.bias, block.conv2.dilation),
                           block.ln2_scale, block.ln2_shift, -2))
    if active:
        y = ad.mul(y, spatial_dropout_mask(cout, block.dropout, rng, batch))
    skip = x if block.skip is None else ad.causal_conv1d(x, block.skip.weight, block.skip.bias, 1)
    return ad.add(skip, y)
