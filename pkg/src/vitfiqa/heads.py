"""Output heads and the joint training objective.

Two branches sit on top of the backbone: a fully-connected face-embedding
head trained with margin-penalty softmax (CosFace), and a scalar quality
regression head trained with Smooth-L1 against a classifiability target
(ratio of own-center similarity to nearest-negative-center similarity).
The target is detached: no gradient flows through it into the centers.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vit
from .tensor import DegenerateVectorError, ShapeError


class ConfigurationError(ValueError):
    """Invalid head or loss configuration (e.g. fewer than two identities)."""


@dataclass
class LossConfig:
    s: float = 64.0        # cosine logit scale
    m: float = 0.35        # additive cosine margin on the target class
    lam: float = 10.0      # weight of the quality regression loss
    beta: float = 1.0      # Smooth-L1 quadratic/linear transition
    eps: float = 1e-4      # classifiability-target denominator guard

    def __post_init__(self):
        if self.s <= 0 or not (0 <= self.m < 1) or self.lam < 0 or self.beta <= 0 or self.eps <= 0:
            raise ConfigurationError(f"invalid loss config {self}")


def init_head_params(config, variant, num_classes, rng, dtype=np.float32,
                     embed_dim=None, fr_pool=False):
    """Named tensors for the FR head, regression head, and class centers."""
    E = embed_dim if embed_dim is not None else config.D
    in_dim = config.D if fr_pool else config.N * config.D
    reg_in = config.D if variant == "T" else E
    p = {}

    def add(name, arr):
        p[name] = T.parameter(arr, dtype=dtype, name=name)

    add("fr.w", vit._trunc_normal(rng, (in_dim, E)))
    add("fr.b", np.zeros(E))
    add("reg.w", vit._trunc_normal(rng, (reg_in, 1)))
    add("reg.b", np.zeros(1))
    add("centers", vit._trunc_normal(rng, (num_classes, E)))
    return p


def init_model_params(config, variant, num_classes, seed, dtype=np.float32,
                      embed_dim=None, fr_pool=False):
    """Full parameter set: backbone plus heads, from one seed."""
    rng = np.random.default_rng(seed)
    p = vit.init_backbone_params(config, variant, rng, dtype=dtype)
    p.update(init_head_params(config, variant, num_classes, rng, dtype=dtype,
                              embed_dim=embed_dim, fr_pool=fr_pool))
    return p


def fr_embed(patch_states, params, fr_pool=False):
    """Map the N×D patch states to the face embedding."""
    n, d = patch_states.shape
    if fr_pool:
        flat = T.scale(T.matmul(T.constant(np.ones((1, n)), dtype=patch_states.dtype),
                                patch_states), 1.0 / n)
    else:
        flat = T.reshape(patch_states, (1, n * d))
    if flat.shape[1] != params["fr.w"].shape[0]:
        raise ShapeError(f"fr_embed: input width {flat.shape[1]} != "
                         f"projection rows {params['fr.w'].shape[0]}")
    return T.add(T.matmul(flat, params["fr.w"]), params["fr.b"])


def cosface_loss(embeddings, labels, centers, s, m):
    """Margin-penalty softmax: scaled cosine logits with the target cosine
    reduced by m, then mean cross-entropy over the batch."""
    emb_n = T.l2_normalize_rows(embeddings)
    cen_n = T.l2_normalize_rows(centers)
    cos = T.matmul(emb_n, T.transpose(cen_n))
    labels = np.asarray(labels, dtype=np.int64)
    margin = np.zeros(cos.shape)
    margin[np.arange(len(labels)), labels] = -m
    logits = T.scale(T.add_const(cos, margin), s)
    return T.cross_entropy_rows(logits, labels)


def crfiq_target(embedding, label, centers, eps=1e-4):
    """Classifiability target: CCS / (NNCCS + 1 + eps), gradient-blocked.

    CCS is the cosine to the own class center, NNCCS the maximum cosine over
    the other centers. Computed on plain arrays so no gradient can flow.
    """
    emb = np.asarray(embedding, dtype=np.float64).reshape(-1)
    cen = np.asarray(centers, dtype=np.float64)
    if cen.shape[0] < 2:
        raise ConfigurationError("crfiq_target: need at least 2 class centers")
    norm = np.linalg.norm(emb)
    cnorms = np.linalg.norm(cen, axis=1)
    if norm < 1e-12 or cnorms.min() < 1e-12:
        raise DegenerateVectorError("crfiq_target: zero-norm embedding or center")
    cosines = cen @ emb / (cnorms * norm)
    ccs = cosines[label]
    nnccs = np.max(np.delete(cosines, label))
    return float(ccs / (nnccs + 1.0 + eps))


def smooth_l1(pred, target, beta):
    """Scalar Smooth-L1 (reference form used by tests and oracles)."""
    if beta <= 0:
        raise ConfigurationError("smooth_l1: beta must be positive")
    x = pred - target
    return 0.5 * x * x / beta if abs(x) < beta else abs(x) - 0.5 * beta


@dataclass
class LossBreakdown:
    loss: T.Tensor
    l_fr: T.Tensor
    l_fiq: T.Tensor
    qhat: np.ndarray      # per-sample predicted quality
    targets: np.ndarray   # per-sample classifiability target


def total_loss(batch, params, config, variant, loss_cfg, fr_pool=False,
               fixed_targets=None):
    """Joint objective over a batch: L = L_FR + lam * L_FIQ.

    batch is a list of (normalized image array, identity label). Variant T
    regresses quality from the refined quality token; variant C from the
    face embedding. The regression target is treated as a constant; pass
    `fixed_targets` to pin it across repeated evaluations (finite-difference
    verification of the blocked-gradient objective).
    """
    if not batch:
        raise T.ContractError("total_loss: empty batch")
    emb_rows, qhat_rows, labels = [], [], []
    for image, label in batch:
        quality_state, patch_states = vit.backbone_forward(image, params, config, variant)
        emb = fr_embed(patch_states, params, fr_pool=fr_pool)
        if variant == "T":
            reg_in = T.reshape(quality_state, (1, config.D))
        else:
            reg_in = emb
        qhat_rows.append(T.add(T.matmul(reg_in, params["reg.w"]), params["reg.b"]))
        emb_rows.append(emb)
        labels.append(int(label))
    embeddings = T.concat_rows(emb_rows)
    qhat = T.concat_rows(qhat_rows)
    if fixed_targets is not None:
        targets = np.asarray(fixed_targets, dtype=np.float64)
    else:
        targets = np.array([
            crfiq_target(embeddings.data[i], labels[i], params["centers"].data, loss_cfg.eps)
            for i in range(len(batch))
        ])
    l_fr = cosface_loss(embeddings, labels, params["centers"], loss_cfg.s, loss_cfg.m)
    per_pair = T.smooth_l1_vs(qhat, targets.reshape(-1, 1), loss_cfg.beta)
    l_fiq = T.scale(T.sum_all(per_pair), 1.0 / len(batch))
    loss = T.add(l_fr, T.scale(l_fiq, loss_cfg.lam))
    return LossBreakdown(loss=loss, l_fr=l_fr, l_fiq=l_fiq,
                         qhat=qhat.data.reshape(-1).copy(), targets=targets)


def predict(image, params, config, variant, fr_pool=False):
    """Inference: (face embedding, predicted quality) for one image."""
    quality_state, patch_states = vit.backbone_forward(image, params, config, variant)
    emb = fr_embed(patch_states, params, fr_pool=fr_pool)
    reg_in = T.reshape(quality_state, (1, config.D)) if variant == "T" else emb
    qhat = T.add(T.matmul(reg_in, params["reg.w"]), params["reg.b"])
    return emb.data.reshape(-1).copy(), float(qhat.data.reshape(-1)[0])
