"""Two-stage fusion of the attention branches.

Stage 1 aligns the branches with mutually-derived attention maps: a 1-channel
spatial map from the channel branch reweights the spatial branch and a C x 1x1
channel map from the spatial branch reweights the channel branch.  Stage 2
pushes the fused feature through the frequency domain: linear pre-projection,
FFT, a linear mix of the stacked real/imaginary planes, inverse FFT, and a
residual skip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .engine import (ComplexPair, Tensor, add, concat, conv2d,
                     debug_checks_enabled, fft2d, gap, gelu,
                     ifft2d_with_residue, linear, mul, sigmoid, split_half)

# populated by freq_interact when engine debug checks are on
imag_energy_log: list[dict] = []


def clear_imag_energy_log() -> None:
    imag_energy_log.clear()


def write_imag_energy_csv(path) -> None:
    """Dump the collected per-layer discarded-imaginary-energy statistics."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "imag_energy", "real_energy"])
        for row in imag_energy_log:
            writer.writerow([row["layer"], f"{row['imag_energy']:.12e}",
                             f"{row['real_energy']:.12e}"])


@dataclass
class AafmParams:
    """Alignment-map and frequency-mix weights; map hidden width is
    max(ceil(C/8), 1)."""

    spatial_pw1_w: Tensor
    spatial_pw1_b: Tensor | None
    spatial_pw2_w: Tensor
    spatial_pw2_b: Tensor | None
    channel_pw1_w: Tensor
    channel_pw1_b: Tensor | None
    channel_pw2_w: Tensor
    channel_pw2_b: Tensor | None
    lin_pre_w: Tensor
    lin_pre_b: Tensor | None
    lin_freq_w: Tensor
    lin_freq_b: Tensor | None

    def detach(self) -> "AafmParams":
        kwargs = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kwargs[f.name] = v.detach() if isinstance(v, Tensor) else v
        return AafmParams(**kwargs)


def map_hidden_dim(channels: int) -> int:
    return max(math.ceil(channels / 8), 1)


def spatial_align_map(f_spc: Tensor, params: AafmParams) -> Tensor:
    """Single-channel spatial attention map in (0,1), from the channel branch."""
    h = conv2d(f_spc, params.spatial_pw1_w, params.spatial_pw1_b)
    h = conv2d(gelu(h), params.spatial_pw2_w, params.spatial_pw2_b)
    return sigmoid(h)


def channel_align_map(f_spr: Tensor, params: AafmParams) -> Tensor:
    """Per-channel attention map in (0,1) at 1x1 spatial size, from the
    spatial branch (global average pooled first)."""
    h = conv2d(gap(f_spr), params.channel_pw1_w, params.channel_pw1_b)
    h = conv2d(gelu(h), params.channel_pw2_w, params.channel_pw2_b)
    return sigmoid(h)


def align_fuse(f_spr: Tensor, f_spc: Tensor, params: AafmParams) -> Tensor:
    """Cross-reweighted sum: spatial branch x spatial map + channel branch x
    channel map, each map broadcasting over the axis it lacks."""
    if f_spr.shape != f_spc.shape:
        raise ValueError(f"align_fuse: branch shapes differ "
                         f"({f_spr.shape} vs {f_spc.shape})")
    map_s = spatial_align_map(f_spc, params)
    map_c = channel_align_map(f_spr, params)
    return add(mul(f_spr, map_s), mul(f_spc, map_c))


def freq_interact(f_hat: Tensor, params: AafmParams, skip: bool = True,
                  layer: str = "") -> Tensor:
    """Frequency-domain mixing of the fused feature.

    A linear pre-projection (high-pass role) feeds the FFT; the real and
    imaginary planes are concatenated, linearly mixed 2C->2C, split back, and
    inverse transformed.  The real part is taken and, by default, a residual
    skip adds the stage input back.
    """
    c = f_hat.shape[1]
    pre = linear(f_hat, params.lin_pre_w, params.lin_pre_b)
    spec = fft2d(pre)
    mixed = linear(concat([spec.real, spec.imag], axis=1),
                   params.lin_freq_w, params.lin_freq_b)
    re, im = split_half(mixed, axis=1)
    out, residue = ifft2d_with_residue(ComplexPair(re, im))
    if debug_checks_enabled():
        imag_energy_log.append({
            "layer": layer,
            "imag_energy": residue,
            "real_energy": float((out.data.astype("float64") ** 2).sum()),
        })
    if skip:
        out = add(out, f_hat)
    return out


def aafm(f_spr: Tensor, f_spc: Tensor, params: AafmParams, skip: bool = True,
         layer: str = "") -> Tensor:
    """Full two-stage fusion: alignment then frequency interaction."""
    return freq_interact(align_fuse(f_spr, f_spc, params), params,
                         skip=skip, layer=layer)
