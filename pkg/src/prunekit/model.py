"""Toy SSL-style speech encoder with gateable units.

A strided conv frontend feeds a pre-norm transformer stack; hidden states
from every depth (index 0 is the post-projection frontend output) are
combined by a learnable softmax-weighted sum. Conv output channels,
attention heads, and FFN intermediate dimensions accept per-unit gate
vectors, so the same forward serves the intact model, gated training, and
the physically compacted model (where per-layer widths differ and a fully
pruned sublayer degenerates to its residual path plus output bias).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import gates as G
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .rng import substream

# reference full-scale dims, for orientation only (not instantiated):
# 12 layers x d=768, 12 heads, FFN 3072, 7-layer conv frontend of 512 channels.
DEFAULT_CONV_LAYERS = ((32, 10, 5), (32, 3, 2), (32, 3, 2))


@dataclass(frozen=True)
class EncoderConfig:
    conv_layers: tuple = DEFAULT_CONV_LAYERS
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        sizes = [self.d_model, self.n_layers, self.n_heads, self.ffn_dim]
        sizes += [v for triple in self.conv_layers for v in triple]
        if any(s <= 0 for s in sizes):
            raise ConfigError("all config sizes must be positive")
        if self.dropout != 0.0:
            raise ConfigError("dropout is fixed at 0 for reproducibility")


@dataclass
class ConvBlock:
    kernel: Tensor  # [c_out, c_in, width]
    bias: Tensor  # [c_out]
    stride: int

    @property
    def c_out(self):
        return self.kernel.shape[0]

    @property
    def c_in(self):
        return self.kernel.shape[1]

    @property
    def width(self):
        return self.kernel.shape[2]


@dataclass
class TransformerLayer:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor  # [d, n_heads*head_dim]
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor  # [n_heads*head_dim, d]
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_up: Tensor  # [d, ffn]
    b_up: Tensor
    w_down: Tensor  # [ffn, d]
    b_down: Tensor
    head_dim: int

    @property
    def n_heads(self):
        return self.wq.shape[1] // self.head_dim if self.head_dim else 0

    @property
    def ffn_width(self):
        return self.w_up.shape[1]


@dataclass
class Encoder:
    config: EncoderConfig
    conv: list[ConvBlock]
    proj_w: Tensor
    proj_b: Tensor
    ln0_gain: Tensor
    ln0_bias: Tensor
    layers: list[TransformerLayer]
    layer_weights: Tensor
    gate_groups: list[G.GateGroup] = field(default_factory=list)

    @property
    def d_model(self):
        return self.proj_w.shape[1]

    @property
    def n_layers(self):
        return len(self.layers)


HiddenStack = list  # n_layers+1 tensors of shape [frames, d_model]


def _init_mat(rng, n_in, n_out):
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


def _ones(n):
    return Tensor(np.ones(n), requires_grad=True)


def build(config: EncoderConfig, seed: int) -> Encoder:
    """Deterministic encoder from (config, seed), gates initialized open."""
    rng = substream(seed, "init")
    d = config.d_model
    head_dim = d // config.n_heads

    conv = []
    c_in = 1
    for c_out, width, stride in config.conv_layers:
        k = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c_in * width), size=(c_out, c_in, width)),
                   requires_grad=True)
        conv.append(ConvBlock(k, _zeros(c_out), stride))
        c_in = c_out

    proj_w = _init_mat(rng, c_in, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(TransformerLayer(
            ln1_gain=_ones(d), ln1_bias=_zeros(d),
            wq=_init_mat(rng, d, d), bq=_zeros(d),
            wk=_init_mat(rng, d, d), bk=_zeros(d),
            wv=_init_mat(rng, d, d), bv=_zeros(d),
            wo=_init_mat(rng, d, d), bo=_zeros(d),
            ln2_gain=_ones(d), ln2_bias=_zeros(d),
            w_up=_init_mat(rng, d, config.ffn_dim), b_up=_zeros(config.ffn_dim),
            w_down=_init_mat(rng, config.ffn_dim, d), b_down=_zeros(d),
            head_dim=head_dim,
        ))

    enc = Encoder(
        config=config,
        conv=conv,
        proj_w=proj_w,
        proj_b=_zeros(d),
        ln0_gain=_ones(d),
        ln0_bias=_zeros(d),
        layers=layers,
        layer_weights=_zeros(config.n_layers + 1),
    )
    enc.gate_groups = _make_gate_groups(enc)
    return enc


def _conv_ppu(enc: Encoder, i: int) -> int:
    """Weights one conv output channel owns: its kernel slice and bias, plus
    its projection row when it feeds the transformer directly."""
    blk = enc.conv[i]
    own = blk.width * blk.c_in + 1
    if i == len(enc.conv) - 1:
        own += enc.d_model
    return own


def _make_gate_groups(enc: Encoder) -> list[G.GateGroup]:
    d = enc.d_model
    groups = []
    for i, blk in enumerate(enc.conv):
        groups.append(G.make_group(G.CONV_CHANNEL, i, blk.c_out, _conv_ppu(enc, i)))
    for i, layer in enumerate(enc.layers):
        dh = layer.head_dim
        head_ppu = 3 * (d * dh + dh) + d * dh
        groups.append(G.make_group(G.ATTENTION_HEAD, i, layer.n_heads, head_ppu))
        groups.append(G.make_group(G.FFN_DIM, i, layer.ffn_width, 2 * d + 1))
    return groups


def gate_group(enc: Encoder, kind: str, layer_index: int) -> G.GateGroup:
    for g in enc.gate_groups:
        if g.kind == kind and g.layer_index == layer_index:
            return g
    raise ContractError(f"no gate group {kind}/{layer_index}")


# ---------------------------------------------------------------------------
# forward


def _gate_vec(gates, kind, idx, expected_units):
    if gates is None:
        return None
    z = gates.get((kind, idx))
    if z is None:
        return None
    if z.shape != (expected_units,):
        raise ContractError(f"gate {kind}/{idx}: {z.shape} != ({expected_units},)")
    return z


def frontend(enc: Encoder, signal: Tensor, gates=None) -> Tensor:
    """Conv stack -> projection -> layer norm; returns h0 of shape [T, d]."""
    if signal.ndim != 2:
        raise ShapeError(f"signal must be [channels, samples], got {signal.shape}")
    x = signal
    for i, blk in enumerate(enc.conv):
        y = ad.conv1d(x, blk.kernel, blk.stride)
        yt = ad.transpose(y, (1, 0)) + blk.bias
        yt = ad.gelu(yt)
        z = _gate_vec(gates, G.CONV_CHANNEL, i, blk.c_out)
        if z is not None:
            yt = ad.scale_units(yt, z, axis=1)
        x = ad.transpose(yt, (1, 0))
    h = ad.transpose(x, (1, 0)) @ enc.proj_w + enc.proj_b
    return ad.layer_norm(h, enc.ln0_gain, enc.ln0_bias)


def _attention(layer: TransformerLayer, x: Tensor, z_head) -> Tensor:
    t = x.shape[0]
    h, dh = layer.n_heads, layer.head_dim
    if h == 0:
        return x + layer.bo
    a = ad.layer_norm(x, layer.ln1_gain, layer.ln1_bias)
    q = ad.transpose(ad.reshape(a @ layer.wq + layer.bq, (t, h, dh)), (1, 0, 2))
    k = ad.transpose(ad.reshape(a @ layer.wk + layer.bk, (t, h, dh)), (1, 0, 2))
    v = ad.transpose(ad.reshape(a @ layer.wv + layer.bv, (t, h, dh)), (1, 0, 2))
    scores = ad.bmm(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    ctx = ad.bmm(ad.softmax(scores, axis=-1), v)  # [h, t, dh]
    if z_head is not None:
        ctx = ad.scale_units(ctx, z_head, axis=0)
    ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (t, h * dh))
    return x + (ctx @ layer.wo + layer.bo)


def _ffn(layer: TransformerLayer, x: Tensor, z_ffn) -> Tensor:
    if layer.ffn_width == 0:
        return x + layer.b_down
    a = ad.layer_norm(x, layer.ln2_gain, layer.ln2_bias)
    u = ad.gelu(a @ layer.w_up + layer.b_up)
    if z_ffn is not None:
        u = ad.scale_units(u, z_ffn, axis=1)
    return x + (u @ layer.w_down + layer.b_down)


def transformer_stack(enc: Encoder, h0: Tensor, gates=None) -> HiddenStack:
    hiddens = [h0]
    x = h0
    for i, layer in enumerate(enc.layers):
        zh = _gate_vec(gates, G.ATTENTION_HEAD, i, layer.n_heads) if layer.n_heads else None
        zf = _gate_vec(gates, G.FFN_DIM, i, layer.ffn_width) if layer.ffn_width else None
        x = _attention(layer, x, zh)
        x = _ffn(layer, x, zf)
        hiddens.append(x)
    return hiddens


def combine(enc: Encoder, hiddens: HiddenStack) -> Tensor:
    w = ad.softmax(enc.layer_weights, axis=0)
    out = hiddens[0] * ad.index(w, 0)
    for i in range(1, len(hiddens)):
        out = out + hiddens[i] * ad.index(w, i)
    return out


def forward(enc: Encoder, signal: Tensor, gates=None):
    """Full encoder pass: (hidden stack, layer-weighted sum).

    ``gates`` maps (kind, layer_index) to a gate vector; missing entries mean
    the unit multiplier is 1. Gate vectors scale conv-channel activations,
    per-head context, and FFN intermediate activations.
    """
    h0 = frontend(enc, signal, gates)
    hiddens = transformer_stack(enc, h0, gates)
    return hiddens, combine(enc, hiddens)


def gates_from_samples(samples: dict) -> dict:
    """Map GateSample values to their tensors for forward()."""
    return {key: s.z for key, s in samples.items()}


# ---------------------------------------------------------------------------
# shape arithmetic


def frames_out(conv_layers, n_samples: int) -> int:
    t = n_samples
    for _, width, stride in conv_layers:
        if width > t:
            raise ShapeError(f"input too short: {n_samples} samples")
        t = (t - width) // stride + 1
    return t


def min_input_length(conv_layers) -> int:
    # smallest L giving one output frame: invert the floor chain at t=1
    t = 1
    for _, width, stride in reversed(conv_layers):
        t = (t - 1) * stride + width
    return t


def total_stride(conv_layers) -> int:
    s = 1
    for _, _, stride in conv_layers:
        s *= stride
    return s


# ---------------------------------------------------------------------------
# parameters and accounting


def named_parameters(enc: Encoder) -> dict:
    params = {}
    for i, blk in enumerate(enc.conv):
        params[f"conv/{i}/kernel"] = blk.kernel
        params[f"conv/{i}/bias"] = blk.bias
    params["proj/weight"] = enc.proj_w
    params["proj/bias"] = enc.proj_b
    params["ln0/gain"] = enc.ln0_gain
    params["ln0/bias"] = enc.ln0_bias
    for i, l in enumerate(enc.layers):
        p = f"layer/{i}"
        params[f"{p}/ln1/gain"] = l.ln1_gain
        params[f"{p}/ln1/bias"] = l.ln1_bias
        params[f"{p}/attn/wq"] = l.wq
        params[f"{p}/attn/bq"] = l.bq
        params[f"{p}/attn/wk"] = l.wk
        params[f"{p}/attn/bk"] = l.bk
        params[f"{p}/attn/wv"] = l.wv
        params[f"{p}/attn/bv"] = l.bv
        params[f"{p}/attn/wo"] = l.wo
        params[f"{p}/attn/bo"] = l.bo
        params[f"{p}/ln2/gain"] = l.ln2_gain
        params[f"{p}/ln2/bias"] = l.ln2_bias
        params[f"{p}/ffn/w_up"] = l.w_up
        params[f"{p}/ffn/b_up"] = l.b_up
        params[f"{p}/ffn/w_down"] = l.w_down
        params[f"{p}/ffn/b_down"] = l.b_down
    params["layer_weights"] = enc.layer_weights
    return params


def trainable_parameters(enc: Encoder) -> list:
    return list(named_parameters(enc).values())


def _validate_mask_kept(kept, n_units, what):
    if any(k < 0 or k >= n_units for k in kept):
        raise ContractError(f"{what}: kept index out of range")
    if list(kept) != sorted(set(kept)):
        raise ContractError(f"{what}: kept indices must be strictly increasing")


def count_params(enc: Encoder, mask=None):
    """(total, prunable_total, remaining) exact integer counts.

    With a mask, ``remaining`` is the parameter count of the physically
    compacted model, including conv-to-conv cross effects (removing a
    channel also deletes the consumer's matching input slice).
    """
    total = sum(p.size for p in named_parameters(enc).values())
    prunable = sum(g.num_units * g.params_per_unit for g in enc.gate_groups)
    if mask is None:
        return total, prunable, total

    d = enc.d_model
    kept_conv = []
    for i, blk in enumerate(enc.conv):
        kept = mask.kept(G.CONV_CHANNEL, i)
        _validate_mask_kept(kept, blk.c_out, f"conv {i}")
        kept_conv.append(len(kept))

    remaining = 0
    c_in = enc.conv[0].c_in
    for i, blk in enumerate(enc.conv):
        remaining += kept_conv[i] * (blk.width * c_in + 1)
        c_in = kept_conv[i]
    remaining += c_in * d + d  # projection
    remaining += 2 * d  # ln0
    for i, layer in enumerate(enc.layers):
        heads = mask.kept(G.ATTENTION_HEAD, i)
        _validate_mask_kept(heads, layer.n_heads, f"heads {i}")
        ffn = mask.kept(G.FFN_DIM, i)
        _validate_mask_kept(ffn, layer.ffn_width, f"ffn {i}")
        hk, fk, dh = len(heads), len(ffn), layer.head_dim
        remaining += 3 * (d * hk * dh + hk * dh)  # q/k/v with biases
        remaining += hk * dh * d + d  # output projection + bias
        remaining += d * fk + fk + fk * d + d  # ffn up/down with biases
        remaining += 4 * d  # two layer norms
    remaining += enc.layer_weights.size
    return total, prunable, remaining


def expected_param_count(enc: Encoder, cfg: G.GateConfig,
                         surrogate_temperature: float | None = None) -> Tensor:
    """Differentiable expected surviving parameter count under the gates.

    Single-gate weights contribute linearly through their open probability;
    conv-to-conv kernels sit under two gates (producer channel and consumer
    channel), so their expectation is the product of both open-probability
    sums. Equals the exact compacted count when all gates are 0/1.

    With ``surrogate_temperature`` set, the per-unit probability is the
    deterministic-rule keep surrogate instead of the sampling-time open
    probability (see gates.keep_probability).
    """

    def prob(log_alpha):
        if surrogate_temperature is None:
            return G.prob_open(log_alpha, cfg)
        return G.keep_probability(log_alpha, cfg, surrogate_temperature)

    d = enc.d_model
    p_conv = [ad.tsum(prob(gate_group(enc, G.CONV_CHANNEL, i).log_alpha))
              for i in range(len(enc.conv))]

    expected = Tensor(0.0)
    s_in = Tensor(float(enc.conv[0].c_in))
    for i, blk in enumerate(enc.conv):
        expected = expected + p_conv[i] * s_in * float(blk.width) + p_conv[i]
        s_in = p_conv[i]
    expected = expected + s_in * float(d)

    fixed = d + 2 * d + enc.layer_weights.size  # proj bias, ln0, layer weights
    for i, layer in enumerate(enc.layers):
        ph = ad.tsum(prob(gate_group(enc, G.ATTENTION_HEAD, i).log_alpha))
        pf = ad.tsum(prob(gate_group(enc, G.FFN_DIM, i).log_alpha))
        head_ppu = 3 * (d * layer.head_dim + layer.head_dim) + d * layer.head_dim
        expected = expected + ph * float(head_ppu) + pf * float(2 * d + 1)
        fixed += 2 * d + 4 * d  # o/down biases, two layer norms
    return expected + Tensor(float(fixed))


def arch_metadata(enc: Encoder) -> dict:
    cfg = enc.config
    return {
        "conv_strides": [b.stride for b in enc.conv],
        "head_dim": enc.layers[0].head_dim,
        "n_layers": enc.n_layers,
        "config": {
            "conv_layers": [list(t) for t in cfg.conv_layers],
            "d_model": cfg.d_model,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "ffn_dim": cfg.ffn_dim,
            "dropout": cfg.dropout,
        },
    }


def config_from_dict(d: dict) -> EncoderConfig:
    return EncoderConfig(
        conv_layers=tuple(tuple(t) for t in d["conv_layers"]),
        d_model=int(d["d_model"]),
        n_layers=int(d["n_layers"]),
        n_heads=int(d["n_heads"]),
        ffn_dim=int(d["ffn_dim"]),
        dropout=float(d["dropout"]),
    )


def from_tensors(arch: dict, tensors: dict) -> Encoder:
    """Rebuild an encoder (possibly compacted, with irregular per-layer
    widths) from its named tensors plus the architecture metadata."""

    def t(name):
        return Tensor(tensors[name].copy(), requires_grad=True)

    strides = arch["conv_strides"]
    conv = [ConvBlock(t(f"conv/{i}/kernel"), t(f"conv/{i}/bias"), int(strides[i]))
            for i in range(len(strides))]
    layers = []
    for i in range(int(arch["n_layers"])):
        p = f"layer/{i}"
        layers.append(TransformerLayer(
            ln1_gain=t(f"{p}/ln1/gain"), ln1_bias=t(f"{p}/ln1/bias"),
            wq=t(f"{p}/attn/wq"), bq=t(f"{p}/attn/bq"),
            wk=t(f"{p}/attn/wk"), bk=t(f"{p}/attn/bk"),
            wv=t(f"{p}/attn/wv"), bv=t(f"{p}/attn/bv"),
            wo=t(f"{p}/attn/wo"), bo=t(f"{p}/attn/bo"),
            ln2_gain=t(f"{p}/ln2/gain"), ln2_bias=t(f"{p}/ln2/bias"),
            w_up=t(f"{p}/ffn/w_up"), b_up=t(f"{p}/ffn/b_up"),
            w_down=t(f"{p}/ffn/w_down"), b_down=t(f"{p}/ffn/b_down"),
            head_dim=int(arch["head_dim"]),
        ))
    return Encoder(
        config=config_from_dict(arch["config"]),
        conv=conv,
        proj_w=t("proj/weight"),
        proj_b=t("proj/bias"),
        ln0_gain=t("ln0/gain"),
        ln0_bias=t("ln0/bias"),
        layers=layers,
        layer_weights=t("layer_weights"),
        gate_groups=[],
    )


def attach_gates(enc: Encoder, gate_tensors: dict) -> None:
    """Restore gate groups from `gates/<kind>/<layer>/log_alpha` tensors."""
    enc.gate_groups = _make_gate_groups(enc)
    for g in enc.gate_groups:
        arr = gate_tensors.get(g.name)
        if arr is None:
            raise ContractError(f"checkpoint is missing gate tensor {g.name}")
        if arr.shape != g.log_alpha.shape:
            raise ContractError(f"{g.name}: shape {arr.shape} != {g.log_alpha.shape}")
        g.log_alpha.data = arr.astype(np.float64).copy()


def astype(enc: Encoder, dtype) -> Encoder:
    """Copy of the encoder with all parameters cast (e.g. float32 benchmarking)."""

    def cast(t: Tensor) -> Tensor:
        return Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)

    new = Encoder(
        config=enc.config,
        conv=[ConvBlock(cast(b.kernel), cast(b.bias), b.stride) for b in enc.conv],
        proj_w=cast(enc.proj_w),
        proj_b=cast(enc.proj_b),
        ln0_gain=cast(enc.ln0_gain),
        ln0_bias=cast(enc.ln0_bias),
        layers=[
            TransformerLayer(
                ln1_gain=cast(l.ln1_gain), ln1_bias=cast(l.ln1_bias),
                wq=cast(l.wq), bq=cast(l.bq), wk=cast(l.wk), bk=cast(l.bk),
                wv=cast(l.wv), bv=cast(l.bv), wo=cast(l.wo), bo=cast(l.bo),
                ln2_gain=cast(l.ln2_gain), ln2_bias=cast(l.ln2_bias),
                w_up=cast(l.w_up), b_up=cast(l.b_up),
                w_down=cast(l.w_down), b_down=cast(l.b_down),
                head_dim=l.head_dim,
            )
            for l in enc.layers
        ],
        layer_weights=cast(enc.layer_weights),
        gate_groups=enc.gate_groups,
    )
    return new


@dataclass
class LinearHead:
    """Single linear map on the weighted sum (task logits or reconstruction)."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def build(cls, d_in: int, d_out: int, seed: int, name: str = "head"):
        rng = substream(seed, f"init/{name}")
        return cls(
            weight=Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out)),
                          requires_grad=True),
            bias=Tensor(np.zeros(d_out), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self, prefix: str = "head") -> dict:
        return {f"{prefix}/weight": self.weight, f"{prefix}/bias": self.bias}
