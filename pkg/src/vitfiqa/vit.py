"""ViT backbone with a learnable quality token.

The backbone patchifies a normalized image, adds positional embeddings,
optionally prepends the quality token (variant "T"), and runs the sequence
through pre-norm transformer encoder layers. Variant "C" carries only the
patch tokens and regresses quality from the face embedding downstream.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError

VARIANTS = ("T", "C")


@dataclass
class ViTConfig:
    """Architecture hyperparameters. N and d_h are derived."""

    H: int = 112
    W: int = 112
    C: int = 3
    P: int = 16
    D: int = 384
    h: int = 6
    L: int = 12
    ffn_width: int = 1536
    pos0_trainable: bool = True

    def __post_init__(self):
        for field in ("H", "W", "C", "P", "D", "h", "L", "ffn_width"):
            if getattr(self, field) < (0 if field == "L" else 1):
                raise ValueError(f"ViTConfig: {field} must be positive")
        if self.H % self.P or self.W % self.P:
            raise ValueError(f"ViTConfig: patch size {self.P} must divide {self.H}x{self.W}")
        if self.D % self.h:
            raise ValueError(f"ViTConfig: head count {self.h} must divide D={self.D}")

    @property
    def N(self):
        return (self.H // self.P) * (self.W // self.P)

    @property
    def d_h(self):
        return self.D // self.h

    @property
    def patch_dim(self):
        return self.P * self.P * self.C


def toy_config():
    """Small configuration used throughout verification: N=4 patch tokens."""
    return ViTConfig(H=16, W=16, C=3, P=8, D=16, h=2, L=2, ffn_width=64)


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with samples beyond 2 std redrawn."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2 * std
    return out


def init_backbone_params(config, variant, rng, dtype=np.float32):
    """Named parameter tensors for the backbone.

    Variant "T" owns a quality token plus an (N+1)-row positional table with
    the quality row zero-initialized; variant "C" has N positional rows and
    no quality token.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    p = {}

    def add(name, arr):
        p[name] = T.parameter(arr, dtype=dtype, name=name)

    add("patch_proj.w", _trunc_normal(rng, (config.patch_dim, config.D)))
    add("patch_proj.b", np.zeros(config.D))
    if variant == "T":
        pos = _trunc_normal(rng, (config.N + 1, config.D))
        pos[0] = 0.0
        add("pos_table", pos)
        add("quality_token", _trunc_normal(rng, (config.D,)))
    else:
        add("pos_table", _trunc_normal(rng, (config.N, config.D)))
    for layer in range(config.L):
        pre = f"enc{layer}."
        for w in ("wq", "wk", "wv", "wo"):
            add(pre + w, _trunc_normal(rng, (config.D, config.D)))
        add(pre + "ln1.gain", np.ones(config.D))
        add(pre + "ln1.bias", np.zeros(config.D))
        add(pre + "ln2.gain", np.ones(config.D))
        add(pre + "ln2.bias", np.zeros(config.D))
        add(pre + "ffn.w1", _trunc_normal(rng, (config.D, config.ffn_width)))
        add(pre + "ffn.b1", np.zeros(config.ffn_width))
        add(pre + "ffn.w2", _trunc_normal(rng, (config.ffn_width, config.D)))
        add(pre + "ffn.b2", np.zeros(config.D))
    return p


def patchify(image, config):
    """Split an H×W×C image into N rows of flattened P×P patches.

    Rows scan the patch grid row-major; within a patch, pixels are row-major
    with channels interleaved.
    """
    image = np.asarray(image)
    expected = (config.H, config.W, config.C)
    if image.shape != expected:
        raise ShapeError(f"patchify: image shape {image.shape} != config {expected}")
    gh, gw, p = config.H // config.P, config.W // config.P, config.P
    patches = image.reshape(gh, p, gw, p, config.C).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(patches.reshape(config.N, config.patch_dim))


def embed_and_assemble(patches, params, config, variant):
    """Project patches, add positional rows, and prepend the quality token (T)."""
    x = T.constant(patches, dtype=params["patch_proj.w"].dtype)
    emb = T.add(T.matmul(x, params["patch_proj.w"]), params["patch_proj.b"])
    if variant == "T":
        patch_pos = T.slice_rows(params["pos_table"], 1, config.N + 1)
        z = T.add(emb, patch_pos)
        q_row = T.add(T.reshape(params["quality_token"], (1, config.D)),
                      T.slice_rows(params["pos_table"], 0, 1))
        return T.concat_rows([q_row, z])
    if variant == "C":
        return T.add(emb, params["pos_table"])
    raise ValueError(f"unknown variant {variant!r}")


def mhsa(seq, params, prefix, config):
    """Multi-head self-attention over the full token sequence.

    Returns (output sequence, list of per-head attention weight arrays);
    row 0 of the attention carries the quality token's weights in variant T.
    """
    q = T.matmul(seq, params[prefix + "wq"])
    k = T.matmul(seq, params[prefix + "wk"])
    v = T.matmul(seq, params[prefix + "wv"])
    inv_sqrt = 1.0 / math.sqrt(config.d_h)
    head_outs, attn = [], []
    for head in range(config.h):
        lo, hi = head * config.d_h, (head + 1) * config.d_h
        qh = T.slice_cols(q, lo, hi)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        logits = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt)
        alpha = T.softmax_lastdim(logits)
        attn.append(alpha.data)
        head_outs.append(T.matmul(alpha, vh))
    out = T.matmul(T.concat_cols(head_outs), params[prefix + "wo"])
    return out, attn


def encoder_layer(seq, params, prefix, config):
    """Pre-norm transformer block: attention then GELU FFN, both residual."""
    normed = T.layer_norm(seq, params[prefix + "ln1.gain"], params[prefix + "ln1.bias"])
    attended, attn = mhsa(normed, params, prefix, config)
    u = T.add(seq, attended)
    normed2 = T.layer_norm(u, params[prefix + "ln2.gain"], params[prefix + "ln2.bias"])
    hidden = T.gelu(T.add(T.matmul(normed2, params[prefix + "ffn.w1"]), params[prefix + "ffn.b1"]))
    ffn_out = T.add(T.matmul(hidden, params[prefix + "ffn.w2"]), params[prefix + "ffn.b2"])
    return T.add(u, ffn_out), attn


def backbone_forward(image, params, config, variant, collect_attention=False):
    """Run the full backbone on one normalized image.

    Returns (quality_state, patch_states) as tensors; quality_state is None
    in variant C. With collect_attention=True a third value holds per-layer,
    per-head attention weight arrays.
    """
    seq = embed_and_assemble(patchify(image, config), params, config, variant)
    all_attn = []
    for layer in range(config.L):
        seq, attn = encoder_layer(seq, params, f"enc{layer}.", config)
        all_attn.append(attn)
    if variant == "T":
        quality = T.reshape(T.slice_rows(seq, 0, 1), (config.D,))
        patch_states = T.slice_rows(seq, 1, config.N + 1)
    else:
        quality = None
        patch_states = seq
    if collect_attention:
        return quality, patch_states, all_attn
    return quality, patch_states
