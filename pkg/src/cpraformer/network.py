"""Encoder-decoder assembly, configuration, weight init and serialization.

Four levels: encoder levels 1-3, a latent bottleneck at level 4, and decoder
levels 3-1 with concat+reduce skip fusion.  Spatial size halves and channel
count doubles per encoder level (pixel-unshuffle + pointwise reduce); the
decoder reverses this.  The network predicts a correction added to its input
(global residual), so an all-zero weight set is exactly the identity.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .attention import (EpgoParams, SparsityTrace, SpcSaParams, SprSaParams,
                        epgo_hidden_dim, spc_sa, spr_sa)
from .engine import (PRECISION_DTYPES, Tensor, add, concat, conv2d, layernorm,
                     pixel_shuffle, pixel_unshuffle)
from .ffn import MsgnParams, msgn, msgn_hidden_dim
from .fusion import AafmParams, aafm, map_hidden_dim

WEIGHT_MAGIC = b"CPRA"
WEIGHT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PROFILES = {
    "paper": dict(base_channels=48, blocks_per_level=(4, 6, 6, 8),
                  heads_per_level=(1, 2, 4, 8)),
    "tiny": dict(base_channels=8, blocks_per_level=(1, 1, 1, 1),
                 heads_per_level=(1, 2, 2, 4)),
}

_CONFIG_FIELDS = ("base_channels", "blocks_per_level", "heads_per_level",
                  "ffn_expansion", "profile", "use_bias", "seed")


class ConfigError(ValueError):
    """A model configuration violates its invariants or schema."""


class WeightFormatError(ValueError):
    """A weight file is malformed or incompatible with the configuration."""


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int
    blocks_per_level: tuple[int, int, int, int]
    heads_per_level: tuple[int, int, int, int]
    ffn_expansion: float = 2.0
    profile: str = "tiny"
    use_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, "
                              f"got {self.profile!r}")
        canon = PROFILES[self.profile]
        for key, expected in canon.items():
            got = getattr(self, key)
            got = tuple(got) if isinstance(expected, tuple) else got
            if got != expected:
                raise ConfigError(f"{key}={got} does not match the "
                                  f"{self.profile!r} profile value {expected}")
        object.__setattr__(self, "blocks_per_level", tuple(self.blocks_per_level))
        object.__setattr__(self, "heads_per_level", tuple(self.heads_per_level))
        for lvl in range(4):
            c = self.level_channels(lvl + 1)
            h = self.heads_per_level[lvl]
            if c % h != 0:
                raise ConfigError(f"level {lvl + 1} channels {c} not divisible "
                                  f"by heads {h}")
        if self.ffn_expansion <= 0:
            raise ConfigError("ffn_expansion must be positive")

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    @classmethod
    def paper(cls, **kwargs) -> "ModelConfig":
        return cls(profile="paper", **PROFILES["paper"], **kwargs)

    @classmethod
    def tiny(cls, **kwargs) -> "ModelConfig":
        return cls(profile="tiny", **PROFILES["tiny"], **kwargs)

    def to_json(self) -> str:
        payload = {k: getattr(self, k) for k in _CONFIG_FIELDS}
        payload["blocks_per_level"] = list(self.blocks_per_level)
        payload["heads_per_level"] = list(self.heads_per_level)
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config JSON must be an object")
        missing = [k for k in _CONFIG_FIELDS if k not in payload]
        if missing:
            raise ConfigError(f"config missing field {missing[0]!r}")
        unknown = [k for k in payload if k not in _CONFIG_FIELDS]
        if unknown:
            raise ConfigError(f"config has unknown field {unknown[0]!r}")
        payload = dict(payload)
        payload["blocks_per_level"] = tuple(payload["blocks_per_level"])
        payload["heads_per_level"] = tuple(payload["heads_per_level"])
        return cls(**payload)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def _block_shapes(prefix: str, c: int, heads: int, expansion: float,
                  use_bias: bool) -> Iterator[tuple[str, tuple, str]]:
    hidden = epgo_hidden_dim(c)
    reduce = map_hidden_dim(c)
    ffn_hidden = msgn_hidden_dim(c, expansion)

    def conv(name, cout, cin, k):
        yield name + ".weight", (cout, cin, k, k), "weight"
        if use_bias:
            yield name + ".bias", (cout, 1, 1, 1), "zeros"

    def dw(name, ch, k):
        yield name + ".weight", (ch, 1, k, k), "weight"
        if use_bias:
            yield name + ".bias", (ch, 1, 1, 1), "zeros"

    def lin(name, cout, cin):
        yield name + ".weight", (cout, cin, 1, 1), "weight"
        if use_bias:
            yield name + ".bias", (cout, 1, 1, 1), "zeros"

    yield prefix + ".norm1.gamma", (c, 1, 1, 1), "ones"
    yield prefix + ".norm1.beta", (c, 1, 1, 1), "zeros"
    yield from conv(prefix + ".spc.qkv_pw", 3 * c, c, 1)
    yield from dw(prefix + ".spc.qkv_dw", 3 * c, 3)
    yield from conv(prefix + ".spc.out_proj", c, c, 1)
    yield prefix + ".spc.temperature", (heads, 1, 1, 1), "ones"
    yield prefix + ".epgo.ln_gamma", (c, 1, 1, 1), "ones"
    yield prefix + ".epgo.ln_beta", (c, 1, 1, 1), "zeros"
    yield from lin(prefix + ".epgo.w1", hidden, c)
    yield from lin(prefix + ".epgo.w2", c, hidden)
    yield from lin(prefix + ".spr.lin_in", c, c)
    yield from dw(prefix + ".spr.dw3", c, 3)
    yield from conv(prefix + ".spr.pw_mid", c, c, 1)
    yield from conv(prefix + ".spr.pw_out", c, c, 1)
    yield from conv(prefix + ".aafm.spatial_pw1", reduce, c, 1)
    yield from conv(prefix + ".aafm.spatial_pw2", 1, reduce, 1)
    yield from conv(prefix + ".aafm.channel_pw1", reduce, c, 1)
    yield from conv(prefix + ".aafm.channel_pw2", c, reduce, 1)
    yield from lin(prefix + ".aafm.lin_pre", c, c)
    yield from lin(prefix + ".aafm.lin_freq", 2 * c, 2 * c)
    yield prefix + ".norm2.gamma", (c, 1, 1, 1), "ones"
    yield prefix + ".norm2.beta", (c, 1, 1, 1), "zeros"
    yield from conv(prefix + ".msgn.pw_in", 2 * ffn_hidden, c, 1)
    yield from dw(prefix + ".msgn.dw3", ffn_hidden, 3)
    yield from dw(prefix + ".msgn.dw5", ffn_hidden, 5)
    yield from lin(prefix + ".msgn.lin_out", c, ffn_hidden)


def _level_blocks(config: ModelConfig) -> Iterator[tuple[str, int, int]]:
    """(prefix, channels, heads) for every block, in forward order."""
    for lvl in (1, 2, 3):
        for j in range(config.blocks_per_level[lvl - 1]):
            yield (f"enc{lvl}.block{j}", config.level_channels(lvl),
                   config.heads_per_level[lvl - 1])
    for j in range(config.blocks_per_level[3]):
        yield f"latent.block{j}", config.level_channels(4), config.heads_per_level[3]
    for lvl in (3, 2, 1):
        for j in range(config.blocks_per_level[lvl - 1]):
            yield (f"dec{lvl}.block{j}", config.level_channels(lvl),
                   config.heads_per_level[lvl - 1])


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Every (name, shape, init kind) in construction order."""
    c = config.base_channels
    bias = config.use_bias
    out: list[tuple[str, tuple, str]] = []

    def conv(name, cout, cin, k):
        out.append((name + ".weight", (cout, cin, k, k), "weight"))
        if bias:
            out.append((name + ".bias", (cout, 1, 1, 1), "zeros"))

    conv("embed", c, 3, 7)
    for lvl in (1, 2, 3):
        cl = config.level_channels(lvl)
        for j in range(config.blocks_per_level[lvl - 1]):
            out.extend(_block_shapes(f"enc{lvl}.block{j}", cl,
                                     config.heads_per_level[lvl - 1],
                                     config.ffn_expansion, bias))
        conv(f"down{lvl}.reduce", 2 * cl, 4 * cl, 1)
    c4 = config.level_channels(4)
    for j in range(config.blocks_per_level[3]):
        out.extend(_block_shapes(f"latent.block{j}", c4,
                                 config.heads_per_level[3],
                                 config.ffn_expansion, bias))
    for lvl in (3, 2, 1):
        cl = config.level_channels(lvl)
        conv(f"up{lvl + 1}.expand", 2 * config.level_channels(lvl + 1),
             config.level_channels(lvl + 1), 1)
        conv(f"skip{lvl}.fuse", cl, 2 * cl, 1)
        for j in range(config.blocks_per_level[lvl - 1]):
            out.extend(_block_shapes(f"dec{lvl}.block{j}", cl,
                                     config.heads_per_level[lvl - 1],
                                     config.ffn_expansion, bias))
    conv("output", 3, c, 3)
    return out


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in param_shapes(config))


# ---------------------------------------------------------------------------
# weights store
# ---------------------------------------------------------------------------

class ModelWeights:
    """Ordered name -> tensor store with a versioned binary round trip."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def replace(self, name: str, t: Tensor) -> None:
        if name not in self._tensors:
            raise KeyError(name)
        self._tensors[name] = t

    def astype(self, precision: str) -> "ModelWeights":
        dt = PRECISION_DTYPES[precision]
        return ModelWeights({k: Tensor(v.data.astype(dt))
                             for k, v in self._tensors.items()})

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: Tensor(v.data.copy())
                             for k, v in self._tensors.items()})

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(WEIGHT_MAGIC)
            fh.write(struct.pack("<I", WEIGHT_VERSION))
            for name, t in self._tensors.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", _DTYPE_TAGS[t.data.dtype]))
                fh.write(struct.pack("<4I", *t.shape))
                fh.write(np.ascontiguousarray(
                    t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != WEIGHT_MAGIC:
            raise WeightFormatError(f"bad magic {blob[:4]!r}; expected "
                                    f"{WEIGHT_MAGIC!r}")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != WEIGHT_VERSION:
            raise WeightFormatError(f"unsupported weight format version "
                                    f"{version}; expected {WEIGHT_VERSION}")
        pos = 8
        tensors: dict[str, Tensor] = {}
        while pos < len(blob):
            try:
                (name_len,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                name = blob[pos:pos + name_len].decode("utf-8")
                pos += name_len
                (tag,) = struct.unpack_from("<B", blob, pos)
                pos += 1
                dims = struct.unpack_from("<4I", blob, pos)
                pos += 16
                if tag not in _TAG_DTYPES:
                    raise WeightFormatError(f"unknown dtype tag {tag} for "
                                            f"parameter {name!r}")
                dt = _TAG_DTYPES[tag]
                nbytes = int(np.prod(dims)) * dt.itemsize
                payload = blob[pos:pos + nbytes]
                if len(payload) != nbytes:
                    raise WeightFormatError(f"truncated payload for {name!r}")
                pos += nbytes
            except struct.error as exc:
                raise WeightFormatError(f"truncated weight file: {exc}") from exc
            if name in tensors:
                raise WeightFormatError(f"duplicate parameter {name!r}")
            arr = np.frombuffer(payload, dtype=dt).reshape(dims)
            tensors[name] = Tensor(np.ascontiguousarray(
                arr.astype(dt.newbyteorder("="))))
        return cls(tensors)

    def validate_against(self, config: ModelConfig) -> None:
        expected = {name: shape for name, shape, _ in param_shapes(config)}
        for name, shape in expected.items():
            if name not in self._tensors:
                raise WeightFormatError(f"weights missing parameter {name!r}")
            got = self._tensors[name].shape
            if got != shape:
                raise WeightFormatError(f"parameter {name!r} has shape {got}, "
                                        f"config expects {shape}")
        for name in self._tensors:
            if name not in expected:
                raise WeightFormatError(f"weights contain unexpected parameter "
                                        f"{name!r}")


def _trunc_normal(rng: np.random.Generator, shape, std: float,
                  dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std).astype(dtype)


def init_weights(config: ModelConfig, precision: str = "single") -> ModelWeights:
    """Seeded init: truncated normal (std 0.02) for conv/linear weights,
    ones for norm gains and temperatures, zeros for biases and norm shifts."""
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    dt = PRECISION_DTYPES[precision]
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in param_shapes(config):
        if kind == "weight":
            arr = _trunc_normal(rng, shape, 0.02, dt)
        elif kind == "ones":
            arr = np.ones(shape, dtype=dt)
        else:
            arr = np.zeros(shape, dtype=dt)
        tensors[name] = Tensor(arr)
    return ModelWeights(tensors)


def zeros_weights(config: ModelConfig, precision: str = "single") -> ModelWeights:
    """Every learnable parameter zero (temperatures stay at their fixed value
    of one); with the global residual this is exactly the identity."""
    dt = PRECISION_DTYPES[precision]
    tensors = {}
    for name, shape, _ in param_shapes(config):
        if name.endswith(".temperature"):
            tensors[name] = Tensor(np.ones(shape, dtype=dt))
        else:
            tensors[name] = Tensor(np.zeros(shape, dtype=dt))
    return ModelWeights(tensors)


# ---------------------------------------------------------------------------
# forward graph
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    spc: SpcSaParams
    epgo: EpgoParams
    spr: SprSaParams
    aafm: AafmParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    msgn: MsgnParams


@dataclass
class BlockOutput:
    features: Tensor
    traces: list[SparsityTrace]
    masks: list[np.ndarray]


@dataclass
class LayerTrace:
    layer: str
    heads: int
    trace: SparsityTrace


@dataclass
class ModelOutput:
    output: Tensor
    traces: list[LayerTrace]
    masks: list[np.ndarray]


def _g(weights, name: str) -> Tensor | None:
    return weights[name] if name in weights else None


def block_params(weights, prefix: str, heads: int) -> BlockParams:
    """Assemble one block's parameter records from a name -> tensor mapping."""
    return BlockParams(
        norm1_gamma=weights[prefix + ".norm1.gamma"],
        norm1_beta=weights[prefix + ".norm1.beta"],
        spc=SpcSaParams(
            qkv_pw_w=weights[prefix + ".spc.qkv_pw.weight"],
            qkv_pw_b=_g(weights, prefix + ".spc.qkv_pw.bias"),
            qkv_dw_w=weights[prefix + ".spc.qkv_dw.weight"],
            qkv_dw_b=_g(weights, prefix + ".spc.qkv_dw.bias"),
            out_w=weights[prefix + ".spc.out_proj.weight"],
            out_b=_g(weights, prefix + ".spc.out_proj.bias"),
            temperature=weights[prefix + ".spc.temperature"],
            heads=heads),
        epgo=EpgoParams(
            ln_gamma=weights[prefix + ".epgo.ln_gamma"],
            ln_beta=weights[prefix + ".epgo.ln_beta"],
            w1=weights[prefix + ".epgo.w1.weight"],
            b1=_g(weights, prefix + ".epgo.w1.bias"),
            w2=weights[prefix + ".epgo.w2.weight"],
            b2=_g(weights, prefix + ".epgo.w2.bias")),
        spr=SprSaParams(
            lin_in_w=weights[prefix + ".spr.lin_in.weight"],
            lin_in_b=_g(weights, prefix + ".spr.lin_in.bias"),
            dw3_w=weights[prefix + ".spr.dw3.weight"],
            dw3_b=_g(weights, prefix + ".spr.dw3.bias"),
            pw_mid_w=weights[prefix + ".spr.pw_mid.weight"],
            pw_mid_b=_g(weights, prefix + ".spr.pw_mid.bias"),
            pw_out_w=weights[prefix + ".spr.pw_out.weight"],
            pw_out_b=_g(weights, prefix + ".spr.pw_out.bias")),
        aafm=AafmParams(
            spatial_pw1_w=weights[prefix + ".aafm.spatial_pw1.weight"],
            spatial_pw1_b=_g(weights, prefix + ".aafm.spatial_pw1.bias"),
            spatial_pw2_w=weights[prefix + ".aafm.spatial_pw2.weight"],
            spatial_pw2_b=_g(weights, prefix + ".aafm.spatial_pw2.bias"),
            channel_pw1_w=weights[prefix + ".aafm.channel_pw1.weight"],
            channel_pw1_b=_g(weights, prefix + ".aafm.channel_pw1.bias"),
            channel_pw2_w=weights[prefix + ".aafm.channel_pw2.weight"],
            channel_pw2_b=_g(weights, prefix + ".aafm.channel_pw2.bias"),
            lin_pre_w=weights[prefix + ".aafm.lin_pre.weight"],
            lin_pre_b=_g(weights, prefix + ".aafm.lin_pre.bias"),
            lin_freq_w=weights[prefix + ".aafm.lin_freq.weight"],
            lin_freq_b=_g(weights, prefix + ".aafm.lin_freq.bias")),
        norm2_gamma=weights[prefix + ".norm2.gamma"],
        norm2_beta=weights[prefix + ".norm2.beta"],
        msgn=MsgnParams(
            pw_in_w=weights[prefix + ".msgn.pw_in.weight"],
            pw_in_b=_g(weights, prefix + ".msgn.pw_in.bias"),
            dw3_w=weights[prefix + ".msgn.dw3.weight"],
            dw3_b=_g(weights, prefix + ".msgn.dw3.bias"),
            dw5_w=weights[prefix + ".msgn.dw5.weight"],
            dw5_b=_g(weights, prefix + ".msgn.dw5.bias"),
            lin_out_w=weights[prefix + ".msgn.lin_out.weight"],
            lin_out_b=_g(weights, prefix + ".msgn.lin_out.bias")))


def block_forward(f: Tensor, bp: BlockParams, mask_override: np.ndarray | None = None,
                  ste: bool = False, layer: str = "block") -> BlockOutput:
    """Pre-norm residual wiring: attention+fusion residual, then FFN residual."""
    try:
        normed = layernorm(f, bp.norm1_gamma, bp.norm1_beta)
        branch_spc, trace, mask = spc_sa(normed, bp.spc, bp.epgo,
                                         mask_override=mask_override, ste=ste)
        branch_spr = spr_sa(normed, bp.spr)
        fused = aafm(branch_spr, branch_spc, bp.aafm, layer=layer)
        x1 = add(f, fused)
        x2 = add(x1, msgn(layernorm(x1, bp.norm2_gamma, bp.norm2_beta), bp.msgn))
    except FloatingPointError as exc:
        raise FloatingPointError(f"{layer}: {exc}") from exc
    return BlockOutput(features=x2, traces=[trace], masks=[mask])


def embed(img: Tensor, weights) -> Tensor:
    """7x7 embedding conv; spatial dims must be powers of two >= 8."""
    n, c, h, w = img.shape
    if c != 3:
        raise ValueError(f"embed: expected 3 input channels, got {c}")
    for dim in (h, w):
        if dim < 8 or dim & (dim - 1) != 0:
            raise ValueError(
                f"embed: spatial size {h}x{w} unsupported; valid sizes are "
                f"powers of two >= 8 (8, 16, 32, 64, ...) so every level "
                f"halves cleanly and stays FFT-compatible")
    return conv2d(img, weights["embed.weight"], _g(weights, "embed.bias"))


def downsample(f: Tensor, weights, level: int) -> Tensor:
    """Halve spatial size: space-to-depth then pointwise 4C -> 2C."""
    t = pixel_unshuffle(f, 2)
    return conv2d(t, weights[f"down{level}.reduce.weight"],
                  _g(weights, f"down{level}.reduce.bias"))


def upsample(f: Tensor, weights, level: int) -> Tensor:
    """Double spatial size: pointwise C -> 2C then depth-to-space (C/2)."""
    t = conv2d(f, weights[f"up{level}.expand.weight"],
               _g(weights, f"up{level}.expand.bias"))
    return pixel_shuffle(t, 2)


def skip_fuse(dec_f: Tensor, enc_f: Tensor, weights, level: int) -> Tensor:
    """Concat the decoder stream with the encoder skip, reduce 2C -> C."""
    if dec_f.shape != enc_f.shape:
        raise ValueError(f"skip_fuse: decoder {dec_f.shape} and encoder "
                         f"{enc_f.shape} disagree at level {level}")
    t = concat([dec_f, enc_f], axis=1)
    return conv2d(t, weights[f"skip{level}.fuse.weight"],
                  _g(weights, f"skip{level}.fuse.bias"))


def model_forward(img: Tensor, weights, config: ModelConfig,
                  masks: list[np.ndarray] | None = None,
                  ste: bool = False) -> ModelOutput:
    """Full derained prediction: encoder, latent, decoder, global residual.

    `masks` replays a recorded list of per-block attention masks (one entry
    per block in forward order), which freezes the top-k selection for
    gradient checking; the masks actually used are always returned.
    """
    traces: list[LayerTrace] = []
    used_masks: list[np.ndarray] = []
    mask_iter = iter(masks) if masks is not None else None

    def run_blocks(x, level_name, lvl):
        heads = config.heads_per_level[lvl - 1]
        for j in range(config.blocks_per_level[lvl - 1]):
            prefix = f"{level_name}.block{j}"
            bp = block_params(weights, prefix, heads)
            override = next(mask_iter) if mask_iter is not None else None
            out = block_forward(x, bp, mask_override=override, ste=ste,
                                layer=prefix)
            traces.append(LayerTrace(prefix, heads, out.traces[0]))
            used_masks.extend(out.masks)
            x = out.features
        return x

    x = embed(img, weights)
    enc_feats = {}
    for lvl in (1, 2, 3):
        x = run_blocks(x, f"enc{lvl}", lvl)
        enc_feats[lvl] = x
        x = downsample(x, weights, lvl)
    x = run_blocks(x, "latent", 4)
    for lvl in (3, 2, 1):
        x = upsample(x, weights, lvl + 1)
        x = skip_fuse(x, enc_feats[lvl], weights, lvl)
        x = run_blocks(x, f"dec{lvl}", lvl)
    correction = conv2d(x, weights["output.weight"], _g(weights, "output.bias"))
    return ModelOutput(output=add(img, correction), traces=traces,
                       masks=used_masks)
