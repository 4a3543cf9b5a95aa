"""Multi-scale gated feed-forward path.

The input expands to two hidden branches; a 3x3 depthwise conv gates a 5x5
depthwise conv via the Hadamard product (the product is the only
nonlinearity), and a linear map projects back to the block width.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .engine import Tensor, conv2d, depthwise_conv2d, linear, mul, split_half


@dataclass
class MsgnParams:
    """Gated FFN weights; pw_in expands C -> 2*hidden with hidden = int(C*r)."""

    pw_in_w: Tensor
    pw_in_b: Tensor | None
    dw3_w: Tensor
    dw3_b: Tensor | None
    dw5_w: Tensor
    dw5_b: Tensor | None
    lin_out_w: Tensor
    lin_out_b: Tensor | None

    def detach(self) -> "MsgnParams":
        kwargs = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kwargs[f.name] = v.detach() if isinstance(v, Tensor) else v
        return MsgnParams(**kwargs)


def msgn_hidden_dim(channels: int, expansion: float) -> int:
    return int(channels * expansion)


def msgn(f: Tensor, params: MsgnParams) -> Tensor:
    """Expand, split, gate the 5x5 branch with the 3x3 branch, project back."""
    h = conv2d(f, params.pw_in_w, params.pw_in_b)
    h1, h2 = split_half(h, axis=1)
    gate = depthwise_conv2d(h1, params.dw3_w, params.dw3_b)
    value = depthwise_conv2d(h2, params.dw5_w, params.dw5_b)
    return linear(mul(gate, value), params.lin_out_w, params.lin_out_b)
