"""Training utilities: L1 loss, Adam, finite-difference gradient checks, and
a toy loop that learns to remove synthetic rain at desk scale.

Gradient checks run in double precision with attention masks frozen across
each +/-eps pair, so the function under test is smooth.  The prompt-operator
parameters and attention temperatures are excluded from optimization by
default; a straight-through flag wires the prompt operator into the graph for
experimentation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import (Tape, Tensor, abs_, backward, mean_all, mul,
                     set_debug_checks, sub)
from .imaging import ImagePlanar, RainParams, image_to_tensor, synth_rain
from .network import (ModelConfig, ModelWeights, init_weights, model_forward)

GRADCHECK_THRESHOLD = 1e-4


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference, as a scalar tensor."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shapes differ ({pred.shape} vs {target.shape})")
    return mean_all(abs_(sub(pred, target)))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 300
    batch: int = 2
    patch: int = 32
    lr: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    loss: str = "l1"
    seed: int = 0
    ste: bool = False

    def __post_init__(self):
        if self.patch < 16 or self.patch & (self.patch - 1) != 0:
            raise ValueError(f"patch {self.patch} must be a power of two >= 16")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.loss != "l1":
            raise ValueError(f"unsupported loss {self.loss!r}")


def frozen_param_names(names, ste: bool = False) -> set[str]:
    """Parameters excluded from optimization: temperatures always, the prompt
    operator unless the straight-through estimator is enabled."""
    frozen = {n for n in names if n.endswith(".temperature")}
    if not ste:
        frozen |= {n for n in names if ".epgo." in n}
    return frozen


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    frozen: set[str] = field(default_factory=set)


def adam_init(weights: ModelWeights, frozen: set[str] | None = None) -> AdamState:
    state = AdamState(frozen=set(frozen or ()))
    for name, tens in weights.items():
        if name in state.frozen:
            continue
        state.m[name] = np.zeros_like(tens.data)
        state.v[name] = np.zeros_like(tens.data)
    return state


def adam_step(weights: ModelWeights, grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update applied in sorted name order, in place."""
    b1, b2 = config.betas
    state.t += 1
    t = state.t
    for name in sorted(weights.names()):
        if name in state.frozen:
            continue
        if name not in grads:
            raise ValueError(f"adam_step: missing gradient for trainable "
                             f"parameter {name!r}")
        g = grads[name]
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new = weights[name].data - config.lr * mhat / (np.sqrt(vhat) + config.eps)
        weights.replace(name, Tensor(new.astype(weights[name].dtype)))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Max relative error per checked parameter name."""

    per_param: dict[str, float]
    threshold: float = GRADCHECK_THRESHOLD

    @property
    def global_max(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.global_max <= self.threshold

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["param", "rel_err"])
            for name, err in self.per_param.items():
                writer.writerow([name, f"{err:.6e}"])


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def check_gradients(build_loss, params: dict[str, Tensor],
                    check_names=None, eps: float = 1e-5,
                    entries_per_param: int = 4, seed: int = 0) -> GradCheckReport:
    """Analytic gradients of build_loss vs central differences.

    build_loss maps a name -> tensor dict to a scalar tensor and must be
    deterministic and mask-frozen, so the +/-eps pair stays on one smooth
    piece.  All params are double precision; the report covers `check_names`
    (default: all), sampling up to `entries_per_param` scalar entries each.
    """
    for name, t in params.items():
        if t.precision != "double":
            raise ValueError(f"check_gradients: {name!r} must be double precision")
    tape = Tape()
    taped = {n: tape.watch(t) for n, t in params.items()}
    grads = backward(build_loss(taped))
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name in (check_names if check_names is not None else list(params)):
        g = grads[taped[name].node_id].data
        idxs = rng.choice(g.size, size=min(entries_per_param, g.size),
                          replace=False)
        worst = 0.0
        for idx in idxs:
            base = params[name].data
            perturbed = dict(params)
            arr = base.copy()
            arr.flat[idx] += eps
            perturbed[name] = Tensor(arr)
            up = build_loss(perturbed).item()
            arr = base.copy()
            arr.flat[idx] -= eps
            perturbed[name] = Tensor(arr)
            down = build_loss(perturbed).item()
            numeric = (up - down) / (2 * eps)
            worst = max(worst, relative_error(float(g.flat[idx]), numeric))
        report[name] = worst
    return GradCheckReport(report)


# ---------------------------------------------------------------------------
# gradient-check scopes (used by the CLI and the acceptance suite)
# ---------------------------------------------------------------------------

def _tn(rng, shape, std=0.02):
    return Tensor(np.clip(rng.normal(0, std, shape), -2 * std, 2 * std))


def _small(rng, shape):
    return Tensor(0.01 * rng.normal(0, 1, shape))


def _probe_loss(out: Tensor, probe: np.ndarray) -> Tensor:
    return mean_all(mul(out, Tensor(probe)))


def gradcheck_linear_probe(seed: int = 0) -> GradCheckReport:
    """Linear-layer-only subgraph; analytic and numeric agree to ~1e-10."""
    from .engine import linear

    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(0, 0.5, (2, 6, 4, 4)))
    params = {"weight": _tn(rng, (5, 6, 1, 1), 0.1),
              "bias": _small(rng, (5, 1, 1, 1))}
    probe = rng.normal(size=(2, 5, 4, 4))

    def build_loss(p):
        return _probe_loss(linear(x, p["weight"], p["bias"]), probe)

    return check_gradients(build_loss, params, seed=seed)


def _submodule_cases(seed: int):
    """Shared fixtures for the four isolation checks: C=8, 2 heads, 8x8."""
    from .attention import (EpgoParams, SpcSaParams, SprSaParams,
                            epgo_hidden_dim, spc_sa, spr_sa)
    from .ffn import MsgnParams, msgn, msgn_hidden_dim
    from .fusion import AafmParams, aafm, map_hidden_dim

    rng = np.random.default_rng(seed)
    c, heads, h, w = 8, 2, 8, 8
    x = Tensor(rng.normal(0, 0.5, (1, c, h, w)))
    x2 = Tensor(rng.normal(0, 0.5, (1, c, h, w)))
    probe = rng.normal(size=(1, c, h, w))
    hid = epgo_hidden_dim(c)
    epgo_params = EpgoParams(
        ln_gamma=Tensor(np.ones((c, 1, 1, 1))),
        ln_beta=Tensor(np.zeros((c, 1, 1, 1))),
        w1=_tn(rng, (hid, c, 1, 1)), b1=_small(rng, (hid, 1, 1, 1)),
        w2=_tn(rng, (c, hid, 1, 1)), b2=_small(rng, (c, 1, 1, 1)))
    temperature = Tensor(np.ones((heads, 1, 1, 1)))

    spc_names = {
        "qkv_pw_w": _tn(rng, (3 * c, c, 1, 1)),
        "qkv_pw_b": _small(rng, (3 * c, 1, 1, 1)),
        "qkv_dw_w": _tn(rng, (3 * c, 1, 3, 3)),
        "qkv_dw_b": _small(rng, (3 * c, 1, 1, 1)),
        "out_w": _tn(rng, (c, c, 1, 1)),
        "out_b": _small(rng, (c, 1, 1, 1))}
    frozen_mask = spc_sa(x, SpcSaParams(**spc_names, temperature=temperature,
                                        heads=heads), epgo_params)[2]

    def loss_spc(p):
        sp = SpcSaParams(qkv_pw_w=p["qkv_pw_w"], qkv_pw_b=p["qkv_pw_b"],
                         qkv_dw_w=p["qkv_dw_w"], qkv_dw_b=p["qkv_dw_b"],
                         out_w=p["out_w"], out_b=p["out_b"],
                         temperature=temperature, heads=heads)
        out, _, _ = spc_sa(x, sp, epgo_params, mask_override=frozen_mask)
        return _probe_loss(out, probe)

    spr_names = {
        "lin_in_w": _tn(rng, (c, c, 1, 1)), "lin_in_b": _small(rng, (c, 1, 1, 1)),
        "dw3_w": _tn(rng, (c, 1, 3, 3)), "dw3_b": _small(rng, (c, 1, 1, 1)),
        "pw_mid_w": _tn(rng, (c, c, 1, 1)), "pw_mid_b": _small(rng, (c, 1, 1, 1)),
        "pw_out_w": _tn(rng, (c, c, 1, 1)), "pw_out_b": _small(rng, (c, 1, 1, 1))}

    def loss_spr(p):
        return _probe_loss(spr_sa(x, SprSaParams(**p)), probe)

    red = map_hidden_dim(c)
    aafm_names = {
        "spatial_pw1_w": _tn(rng, (red, c, 1, 1)),
        "spatial_pw1_b": _small(rng, (red, 1, 1, 1)),
        "spatial_pw2_w": _tn(rng, (1, red, 1, 1)),
        "spatial_pw2_b": _small(rng, (1, 1, 1, 1)),
        "channel_pw1_w": _tn(rng, (red, c, 1, 1)),
        "channel_pw1_b": _small(rng, (red, 1, 1, 1)),
        "channel_pw2_w": _tn(rng, (c, red, 1, 1)),
        "channel_pw2_b": _small(rng, (c, 1, 1, 1)),
        "lin_pre_w": _tn(rng, (c, c, 1, 1)),
        "lin_pre_b": _small(rng, (c, 1, 1, 1)),
        "lin_freq_w": _tn(rng, (2 * c, 2 * c, 1, 1)),
        "lin_freq_b": _small(rng, (2 * c, 1, 1, 1))}

    def loss_aafm(p):
        return _probe_loss(aafm(x, x2, AafmParams(**p)), probe)

    fh = msgn_hidden_dim(c, 2.0)
    msgn_names = {
        "pw_in_w": _tn(rng, (2 * fh, c, 1, 1)),
        "pw_in_b": _small(rng, (2 * fh, 1, 1, 1)),
        "dw3_w": _tn(rng, (fh, 1, 3, 3)), "dw3_b": _small(rng, (fh, 1, 1, 1)),
        "dw5_w": _tn(rng, (fh, 1, 5, 5)), "dw5_b": _small(rng, (fh, 1, 1, 1)),
        "lin_out_w": _tn(rng, (c, fh, 1, 1)),
        "lin_out_b": _small(rng, (c, 1, 1, 1))}

    def loss_msgn(p):
        return _probe_loss(msgn(x, MsgnParams(**p)), probe)

    return [("spc", loss_spc, spc_names), ("spr", loss_spr, spr_names),
            ("aafm", loss_aafm, aafm_names), ("msgn", loss_msgn, msgn_names)]


def gradcheck_submodules(seed: int = 0, entries_per_param: int = 4
                         ) -> dict[str, GradCheckReport]:
    """Isolated frozen-mask checks for each architecture sub-module."""
    return {name: check_gradients(loss, params, seed=seed,
                                  entries_per_param=entries_per_param)
            for name, loss, params in _submodule_cases(seed)}


def gradcheck_block(config: ModelConfig | None = None, seed: int = 0,
                    entries_per_param: int = 3) -> GradCheckReport:
    """One full block (level-1 width of the tiny profile), masks frozen."""
    from .network import block_forward, block_params, param_shapes

    config = config or ModelConfig.tiny(seed=seed)
    rng = np.random.default_rng(seed)
    prefix = "enc1.block0"
    heads = config.heads_per_level[0]
    c = config.base_channels
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_shapes(config):
        if not name.startswith(prefix + "."):
            continue
        if kind == "weight":
            params[name] = _tn(rng, shape)
        elif kind == "ones":
            params[name] = Tensor(np.ones(shape))
        else:
            params[name] = _small(rng, shape)
    x = Tensor(rng.normal(0, 0.5, (1, c, 8, 8)))
    probe = rng.normal(size=x.shape)
    frozen_mask = block_forward(x, block_params(params, prefix, heads),
                                layer=prefix).masks[0]

    def build_loss(p):
        out = block_forward(x, block_params(p, prefix, heads),
                            mask_override=frozen_mask, layer=prefix)
        return _probe_loss(out.features, probe)

    check_names = sorted(set(params) - frozen_param_names(params))
    return check_gradients(build_loss, params, check_names=check_names,
                           seed=seed, entries_per_param=entries_per_param)


def gradcheck_model(config: ModelConfig | None = None,
                    sample_fraction: float = 0.05, seed: int = 0,
                    entries_per_param: int = 3) -> GradCheckReport:
    """Random sample of the full model's trainable parameter tensors."""
    config = config or ModelConfig.tiny(seed=seed)
    rng = np.random.default_rng(seed)
    weights = init_weights(config, "double")
    params = dict(weights.items())
    x = Tensor(rng.normal(0, 0.5, (1, 3, 16, 16)))
    probe = rng.normal(size=x.shape)
    frozen_masks = model_forward(x, params, config).masks

    def build_loss(p):
        out = model_forward(x, p, config, masks=frozen_masks)
        return _probe_loss(out.output, probe)

    eligible = sorted(set(params) - frozen_param_names(params))
    count = max(1, round(sample_fraction * len(eligible)))
    check_names = sorted(rng.choice(eligible, size=min(count, len(eligible)),
                                    replace=False).tolist())
    return check_gradients(build_loss, params, check_names=check_names,
                           seed=seed, entries_per_param=entries_per_param)


# ---------------------------------------------------------------------------
# procedural training data
# ---------------------------------------------------------------------------

_RAIN_ANGLE_RANGE = (55.0, 80.0)
_RAIN_INTENSITY_RANGE = (0.3, 0.5)


def synth_clean(rng: np.random.Generator, size: int) -> ImagePlanar:
    """One procedural clean image: color gradient, checkerboard, or value noise."""
    kind = rng.integers(0, 3)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    if kind == 0:
        phi = rng.uniform(0, 2 * math.pi)
        ramp = xx * math.cos(phi) + yy * math.sin(phi)
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
        lo = rng.uniform(0.0, 0.4, size=3)
        hi = rng.uniform(0.6, 1.0, size=3)
        img = lo + ramp[..., None] * (hi - lo)
    elif kind == 1:
        cell = int(rng.choice([4, 8, 16]))
        grid = (np.add.outer(np.arange(size) // cell,
                             np.arange(size) // cell) % 2).astype(np.float64)
        c0 = rng.uniform(0.0, 1.0, size=3)
        c1 = rng.uniform(0.0, 1.0, size=3)
        img = c0 + grid[..., None] * (c1 - c0)
    else:
        coarse = rng.uniform(0.0, 1.0, size=(5, 5, 3))
        pos = np.linspace(0, 4, size)
        i0 = np.clip(pos.astype(int), 0, 3)
        frac = pos - i0
        rows = (coarse[i0] * (1 - frac)[:, None, None]
                + coarse[i0 + 1] * frac[:, None, None])
        img = (rows[:, i0] * (1 - frac)[None, :, None]
               + rows[:, i0 + 1] * frac[None, :, None])
    rgb = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return ImagePlanar(width=size, height=size, rgb=rgb)


def synth_pair(rng: np.random.Generator, size: int) -> tuple[ImagePlanar, ImagePlanar]:
    """(rainy, clean) pair with randomized rain parameters."""
    clean = synth_clean(rng, size)
    params = RainParams(
        streak_count=max(8, size * size // 48),
        angle_deg=rng.uniform(*_RAIN_ANGLE_RANGE),
        length_px=size / 2.5,
        width_px=1.1,
        intensity=rng.uniform(*_RAIN_INTENSITY_RANGE),
        seed=int(rng.integers(0, 2 ** 31)))
    return synth_rain(clean, params), clean


def _batch_tensors(rng: np.random.Generator, batch: int, size: int
                   ) -> tuple[Tensor, Tensor]:
    rains, cleans = [], []
    for _ in range(batch):
        rainy, clean = synth_pair(rng, size)
        rains.append(image_to_tensor(rainy).data)
        cleans.append(image_to_tensor(clean).data)
    return (Tensor(np.concatenate(rains, axis=0)),
            Tensor(np.concatenate(cleans, axis=0)))


# ---------------------------------------------------------------------------
# toy training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list[float]
    weights: ModelWeights

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for step, loss in enumerate(self.losses):
                writer.writerow([step, f"{loss:.8e}"])

    @property
    def halved(self) -> bool:
        """Mean loss over the final 10% of steps <= half the first 10%."""
        n = len(self.losses)
        head = max(1, n // 10)
        first = float(np.mean(self.losses[:head]))
        last = float(np.mean(self.losses[-head:]))
        return last <= 0.5 * first


def _diagnose_divergence(step: int, rain_t: Tensor, weights, config) -> str:
    set_debug_checks(True)
    try:
        model_forward(rain_t, weights, config)
    except FloatingPointError as exc:
        return f"step {step}: {exc}"
    finally:
        set_debug_checks(False)
    return f"step {step}: loss is not finite (source layer not reproduced)"


def train_toy(model_config: ModelConfig, train_config: TrainConfig,
              weights: ModelWeights | None = None) -> TrainResult:
    """Adam on L1 loss over procedurally generated rainy/clean pairs."""
    if weights is None:
        weights = init_weights(model_config, "single")
    frozen = frozen_param_names(weights.names(), ste=train_config.ste)
    state = adam_init(weights, frozen)
    data_rng = np.random.default_rng(np.random.PCG64(train_config.seed))
    losses: list[float] = []
    for step in range(train_config.steps):
        rain_t, clean_t = _batch_tensors(data_rng, train_config.batch,
                                         train_config.patch)
        tape = Tape()
        taped: dict[str, Tensor] = {}
        node_for_name: dict[str, int] = {}
        for name, tens in weights.items():
            if name in frozen:
                taped[name] = tens
            else:
                watched = tape.watch(tens)
                taped[name] = watched
                node_for_name[name] = watched.node_id
        out = model_forward(rain_t, taped, model_config, ste=train_config.ste)
        loss = l1_loss(out.output, clean_t)
        value = loss.item()
        if not math.isfinite(value):
            raise RuntimeError("training diverged: "
                               + _diagnose_divergence(step, rain_t, weights,
                                                      model_config))
        node_grads = backward(loss)
        grads = {name: node_grads[node].data
                 for name, node in node_for_name.items()}
        adam_step(weights, grads, state, train_config)
        losses.append(value)
    return TrainResult(losses=losses, weights=weights)
