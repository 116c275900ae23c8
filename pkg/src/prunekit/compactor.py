"""Physical compaction of a gated encoder.

Units whose deterministic gate is exactly zero are deleted: head blocks
leave the Q/K/V/O matrices, FFN dimensions leave the up/down matrices, conv
channels leave their kernels plus every consuming input slice downstream.
Surviving gate values fold multiplicatively into the consuming weights
(output-projection columns, down-projection rows, next kernel / projection
input slices), so the compacted forward needs no gate multiplications and
matches the gated forward exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import gates as G
from . import model as M
from .autodiff import Tensor, no_grad
from .errors import ContractError, VerificationError
from .rng import substream


@dataclass
class PruneMask:
    """Kept unit indices and surviving gate values per (kind, layer)."""

    entries: dict = field(default_factory=dict)  # (kind, layer) -> (kept list, zhat array)
    original: dict = field(default_factory=dict)  # (kind, layer) -> original unit count

    def add(self, kind: str, layer: int, kept, zhat, n_units: int):
        kept = [int(i) for i in kept]
        if sorted(set(kept)) != kept:
            raise ContractError(f"{kind}/{layer}: kept indices must be strictly increasing")
        if any(i < 0 or i >= n_units for i in kept):
            raise ContractError(f"{kind}/{layer}: kept index out of range")
        zhat = np.asarray(zhat, dtype=np.float64)
        if zhat.shape != (len(kept),):
            raise ContractError(f"{kind}/{layer}: zhat must align with kept indices")
        self.entries[(kind, layer)] = (kept, zhat)
        self.original[(kind, layer)] = int(n_units)

    def kept(self, kind: str, layer: int):
        return self.entries[(kind, layer)][0]

    def zhat(self, kind: str, layer: int):
        return self.entries[(kind, layer)][1]

    def n_original(self, kind: str, layer: int):
        return self.original[(kind, layer)]


def deterministic_z(log_alpha: np.ndarray, cfg: G.GateConfig) -> np.ndarray:
    s = expit(np.asarray(log_alpha, dtype=np.float64))
    return np.clip(s * (cfg.zeta - cfg.gamma) + cfg.gamma, 0.0, 1.0)


def derive_mask(enc: M.Encoder, cfg: G.GateConfig = G.GateConfig()) -> PruneMask:
    """Keep a unit iff its deterministic gate is strictly positive."""
    if not enc.gate_groups:
        raise ContractError("encoder carries no gate state")
    mask = PruneMask()
    for g in enc.gate_groups:
        z = deterministic_z(g.log_alpha.data, cfg)
        kept = [int(i) for i in np.nonzero(z > 0.0)[0]]
        mask.add(g.kind, g.layer_index, kept, z[kept], g.num_units)
    return mask


def full_mask(enc: M.Encoder) -> PruneMask:
    """Identity mask (everything kept, gate value 1)."""
    mask = PruneMask()
    for i, blk in enumerate(enc.conv):
        mask.add(G.CONV_CHANNEL, i, list(range(blk.c_out)), np.ones(blk.c_out), blk.c_out)
    for i, layer in enumerate(enc.layers):
        mask.add(G.ATTENTION_HEAD, i, list(range(layer.n_heads)),
                 np.ones(layer.n_heads), layer.n_heads)
        mask.add(G.FFN_DIM, i, list(range(layer.ffn_width)),
                 np.ones(layer.ffn_width), layer.ffn_width)
    return mask


def _head_cols(kept_heads, head_dim):
    cols = []
    for h in kept_heads:
        cols.extend(range(h * head_dim, (h + 1) * head_dim))
    return cols


def compact(enc: M.Encoder, mask: PruneMask) -> M.Encoder:
    """Dense smaller encoder; gated and compacted forwards agree exactly."""
    conv = []
    kept_prev = list(range(enc.conv[0].c_in))
    z_prev = np.ones(len(kept_prev))
    for i, blk in enumerate(enc.conv):
        kept = mask.kept(G.CONV_CHANNEL, i)
        if mask.n_original(G.CONV_CHANNEL, i) != blk.c_out:
            raise ContractError(f"mask conv/{i} built for a different architecture")
        zhat = mask.zhat(G.CONV_CHANNEL, i)
        k = blk.kernel.data[np.ix_(kept, kept_prev)] * z_prev[None, :, None]
        conv.append(M.ConvBlock(
            Tensor(k, requires_grad=True),
            Tensor(blk.bias.data[kept].copy(), requires_grad=True),
            blk.stride,
        ))
        kept_prev, z_prev = kept, zhat

    proj_w = enc.proj_w.data[kept_prev, :] * z_prev[:, None]

    layers = []
    for i, layer in enumerate(enc.layers):
        heads = mask.kept(G.ATTENTION_HEAD, i)
        if mask.n_original(G.ATTENTION_HEAD, i) != layer.n_heads:
            raise ContractError(f"mask heads/{i} built for a different architecture")
        zh = mask.zhat(G.ATTENTION_HEAD, i)
        ffn = mask.kept(G.FFN_DIM, i)
        if mask.n_original(G.FFN_DIM, i) != layer.ffn_width:
            raise ContractError(f"mask ffn/{i} built for a different architecture")
        zf = mask.zhat(G.FFN_DIM, i)
        cols = _head_cols(heads, layer.head_dim)
        zh_expand = np.repeat(zh, layer.head_dim)

        def keep(t, idx, axis):
            return Tensor(np.take(t.data, idx, axis=axis).copy(), requires_grad=True)

        layers.append(M.TransformerLayer(
            ln1_gain=Tensor(layer.ln1_gain.data.copy(), requires_grad=True),
            ln1_bias=Tensor(layer.ln1_bias.data.copy(), requires_grad=True),
            wq=keep(layer.wq, cols, 1), bq=keep(layer.bq, cols, 0),
            wk=keep(layer.wk, cols, 1), bk=keep(layer.bk, cols, 0),
            wv=keep(layer.wv, cols, 1), bv=keep(layer.bv, cols, 0),
            wo=Tensor(layer.wo.data[cols, :] * zh_expand[:, None], requires_grad=True),
            bo=Tensor(layer.bo.data.copy(), requires_grad=True),
            ln2_gain=Tensor(layer.ln2_gain.data.copy(), requires_grad=True),
            ln2_bias=Tensor(layer.ln2_bias.data.copy(), requires_grad=True),
            w_up=keep(layer.w_up, ffn, 1), b_up=keep(layer.b_up, ffn, 0),
            w_down=Tensor(layer.w_down.data[ffn, :] * zf[:, None], requires_grad=True),
            b_down=Tensor(layer.b_down.data.copy(), requires_grad=True),
            head_dim=layer.head_dim,
        ))

    return M.Encoder(
        config=enc.config,
        conv=conv,
        proj_w=Tensor(proj_w, requires_grad=True),
        proj_b=Tensor(enc.proj_b.data.copy(), requires_grad=True),
        ln0_gain=Tensor(enc.ln0_gain.data.copy(), requires_grad=True),
        ln0_bias=Tensor(enc.ln0_bias.data.copy(), requires_grad=True),
        layers=layers,
        layer_weights=Tensor(enc.layer_weights.data.copy(), requires_grad=True),
        gate_groups=[],
    )


def verify_equivalence(gated_enc: M.Encoder, compacted_enc: M.Encoder,
                       n_inputs: int = 10, seed: int = 0, n_samples: int = 200,
                       cfg: G.GateConfig = G.GateConfig()) -> float:
    """Max |gated weighted sum - compacted weighted sum| over random signals.

    The gated side runs with deterministic gates. A shape mismatch between
    the two outputs is a structural bug and raises instead of returning.
    """
    gate_vecs = {}
    for g in gated_enc.gate_groups:
        gate_vecs[(g.kind, g.layer_index)] = Tensor(deterministic_z(g.log_alpha.data, cfg))
    rng = substream(seed, "verify")
    worst = 0.0
    with no_grad():
        for _ in range(n_inputs):
            signal = Tensor(rng.normal(size=(1, n_samples)))
            _, ws_gated = M.forward(gated_enc, signal, gate_vecs)
            _, ws_compact = M.forward(compacted_enc, signal)
            if ws_gated.shape != ws_compact.shape:
                raise VerificationError(
                    f"output shapes diverge: {ws_gated.shape} vs {ws_compact.shape}"
                )
            worst = max(worst, float(np.abs(ws_gated.data - ws_compact.data).max()))
    return worst


# ---------------------------------------------------------------------------
# mask text document


def save_mask(mask: PruneMask, path) -> None:
    lines = ["# prune mask v1"]
    for (kind, layer) in sorted(mask.entries):
        kept, zhat = mask.entries[(kind, layer)]
        lines.append(f"[{kind}/{layer}]")
        lines.append(f"original = {mask.original[(kind, layer)]}")
        lines.append("kept = " + " ".join(str(i) for i in kept))
        lines.append("zhat = " + " ".join(repr(float(z)) for z in zhat))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mask(path) -> PruneMask:
    mask = PruneMask()
    section = None
    fields = {}

    def flush():
        if section is None:
            return
        kind, layer = section
        mask.add(kind, layer, fields["kept"], fields["zhat"], fields["original"])

    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            flush()
            kind, layer = line[1:-1].rsplit("/", 1)
            section = (kind, int(layer))
            fields = {}
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "original":
            fields["original"] = int(value)
        elif key == "kept":
            fields["kept"] = [int(v) for v in value.split()] if value else []
        elif key == "zhat":
            fields["zhat"] = np.array([float(v) for v in value.split()]) if value else np.zeros(0)
        else:
            raise ContractError(f"mask file: unknown field {key!r}")
    flush()
    return mask
