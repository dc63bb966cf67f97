"""Base vision-language objectives: matching, masked-token, contrastive.

Matching negatives come from a seeded in-batch derangement (rotation by a
nonzero offset, so no caption keeps its own image). Masked-token loss
masks exactly one non-pad, non-CLS token per caption; captions with no
maskable token are skipped and counted. The contrastive loss is the
symmetric InfoNCE over the in-batch similarity matrix at temperature tau.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as m
from .data import CLS_ID, MASK_ID, PAD_ID


@dataclass
class Batch:
    images: np.ndarray  # (B, H, W, 3) float32 in [0, 1]
    tokens: np.ndarray  # (B, L) int32, CLS-prefixed, PAD-suffixed
    paraphrase_tokens: np.ndarray | None = None  # (B, L); rows valid per mask
    has_paraphrase: np.ndarray | None = None  # (B,) bool
    step_seed: int = 0

    @property
    def size(self) -> int:
        return self.images.shape[0]


@dataclass
class Toggles:
    itm: bool = True
    mlm: bool = True
    itc: bool = True


@dataclass
class VlOutputs:
    total: ad.Tensor  # scalar
    itm: float = 0.0
    mlm: float = 0.0
    itc: float = 0.0
    mlm_skipped: int = 0
    pos_trace: m.FusionTrace | None = None  # matched-pair fusion (gradcam reuse)
    pos_ce: ad.Tensor | None = None  # per-row matched ITM cross entropy (B,)
    # map-extraction hooks: the live attention tensor at the explain layer
    # covering the fused mega-batch (matched rows occupy indices [0, B))
    explain_attn: ad.Tensor | None = None
    pos_pad_mask: np.ndarray | None = None


MATCHED = np.array([1.0, 0.0], dtype=np.float32)
MISMATCHED = np.array([0.0, 1.0], dtype=np.float32)


def derangement(n: int, seed) -> np.ndarray:
    """Seeded rotation: sigma(i) = (i + k) mod n with k in [1, n-1]."""
    if n < 2:
        raise ValueError("cannot construct in-batch mismatches from fewer than 2 samples")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n))
    return (np.arange(n) + k) % n


def _itm_terms(params, cfg, img_emb, tokens, step_seed):
    """Matched + deranged-mismatch cross entropies.

    Returns (mean loss, matched trace, per-row matched CE).
    """
    b = tokens.shape[0]
    perm = derangement(b, (step_seed, 101))
    txt_pos, mask_pos = m.encode_texts(params, cfg, tokens)
    txt_neg, mask_neg = m.encode_texts(params, cfg, tokens[perm])
    pos_trace = m.fuse_batch(params, cfg, img_emb, txt_pos, mask_pos)
    neg_trace = m.fuse_batch(params, cfg, img_emb, txt_neg, mask_neg)
    pos_ce = ad.cross_entropy_with_logits(pos_trace.itm_logits, np.tile(MATCHED, (b, 1)))
    neg_ce = ad.cross_entropy_with_logits(neg_trace.itm_logits, np.tile(MISMATCHED, (b, 1)))
    loss = ad.scalar_mul(ad.add(ad.tmean(pos_ce), ad.tmean(neg_ce)), 0.5)
    return loss, pos_trace, pos_ce


def maskable_positions(tokens: np.ndarray) -> list[np.ndarray]:
    """Per row: indices that are neither [CLS] nor [PAD]."""
    out = []
    for row in tokens:
        idx = np.where((row != PAD_ID) & (np.arange(len(row)) > 0))[0]
        out.append(idx)
    return out


def _mlm_terms(params, cfg, img_emb, tokens, step_seed):
    rng = np.random.default_rng((step_seed, 102))
    masked = tokens.copy()
    positions, targets, keep = [], [], []
    for i, idx in enumerate(maskable_positions(tokens)):
        if len(idx) == 0:
            continue
        pos = int(idx[rng.integers(len(idx))])
        keep.append(i)
        positions.append(pos)
        targets.append(tokens[i, pos])
        masked[i, pos] = MASK_ID
    skipped = tokens.shape[0] - len(keep)
    if not keep:
        return ad.Tensor(np.zeros(())), skipped
    keep = np.asarray(keep)
    txt, mask = m.encode_texts(params, cfg, masked[keep])
    img_kept = ad.gather_rows(img_emb, keep)
    trace = m.fuse_batch(params, cfg, img_kept, txt, mask[:, :])
    logits = m.mlm_logits(params, cfg, trace, positions)
    onehot = np.zeros((len(keep), cfg.vocab_size), dtype=np.float32)
    onehot[np.arange(len(keep)), targets] = 1.0
    return ad.tmean(ad.cross_entropy_with_logits(logits, onehot)), skipped


def _itc_term(params, cfg, img_emb, txt_emb, pad_mask):
    b = txt_emb.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    iv, tv = m.itc_embeddings(params, cfg, img_emb, txt_emb, pad_mask)
    sim = ad.scalar_mul(ad.matmul(iv, ad.transpose(tv, (1, 0))), 1.0 / cfg.temperature)
    eye = np.eye(b, dtype=np.float32)
    i2t = ad.tmean(ad.cross_entropy_with_logits(sim, eye))
    t2i = ad.tmean(ad.cross_entropy_with_logits(ad.transpose(sim, (1, 0)), eye))
    return ad.scalar_mul(ad.add(i2t, t2i), 0.5)


def loss_itm(params, cfg: m.ModelConfig, batch: Batch) -> ad.Tensor:
    img_emb = m.encode_images(params, cfg, batch.images)
    loss, _, _ = _itm_terms(params, cfg, img_emb, batch.tokens, batch.step_seed)
    return loss


def loss_mlm(params, cfg: m.ModelConfig, batch: Batch) -> ad.Tensor:
    img_emb = m.encode_images(params, cfg, batch.images)
    loss, _ = _mlm_terms(params, cfg, img_emb, batch.tokens, batch.step_seed)
    return loss


def loss_itc(params, cfg: m.ModelConfig, batch: Batch) -> ad.Tensor:
    img_emb = m.encode_images(params, cfg, batch.images)
    txt_emb, pad_mask = m.encode_texts(params, cfg, batch.tokens)
    return _itc_term(params, cfg, img_emb, txt_emb, pad_mask)


def loss_vl(
    params,
    cfg: m.ModelConfig,
    batch_or_tokens,
    toggles: Toggles | None = None,
    *,
    img_emb: ad.Tensor | None = None,
    tokens: np.ndarray | None = None,
    step_seed: int | None = None,
) -> VlOutputs:
    """Sum of the enabled objectives, with components for logging.

    Accepts either a Batch, or pre-encoded image embeddings plus tokens so
    a training step can reuse one image encoding across several passes.
    The matched, mismatched, and masked passes run as one fused
    mega-batch; per-row results are identical to the standalone ops.
    """
    toggles = toggles or Toggles()
    if isinstance(batch_or_tokens, Batch):
        batch = batch_or_tokens
        tokens = batch.tokens
        step_seed = batch.step_seed
        if img_emb is None:
            img_emb = m.encode_images(params, cfg, batch.images)
    elif img_emb is None or tokens is None or step_seed is None:
        raise ValueError("pass a Batch or (img_emb, tokens, step_seed)")

    b = tokens.shape[0]
    out = VlOutputs(total=ad.Tensor(np.zeros(())))
    segments = [tokens]
    img_idx = [np.arange(b)]
    if toggles.itm:
        perm = derangement(b, (step_seed, 101))
        segments.append(tokens[perm])
        img_idx.append(np.arange(b))
    mlm_rows = mlm_positions = mlm_targets = None
    if toggles.mlm:
        rng = np.random.default_rng((step_seed, 102))
        masked = tokens.copy()
        keep, positions, targets = [], [], []
        for i, idx in enumerate(maskable_positions(tokens)):
            if len(idx) == 0:
                continue
            pos = int(idx[rng.integers(len(idx))])
            keep.append(i)
            positions.append(pos)
            targets.append(tokens[i, pos])
            masked[i, pos] = MASK_ID
        out.mlm_skipped = b - len(keep)
        if keep:
            mlm_rows = np.asarray(keep)
            mlm_positions, mlm_targets = positions, targets
            segments.append(masked[mlm_rows])
            img_idx.append(mlm_rows)

    stacked = np.vstack(segments)
    txt_all, mask_all = m.encode_texts(params, cfg, stacked)
    trace = m.fuse_batch(
        params, cfg, img_emb, txt_all, mask_all, img_index=np.concatenate(img_idx)
    )
    out.explain_attn = trace.attn_weights[cfg.explain_layer]
    out.pos_pad_mask = mask_all[:b]

    terms = []
    if toggles.itm:
        labels = np.vstack([np.tile(MATCHED, (b, 1)), np.tile(MISMATCHED, (b, 1))])
        ce = ad.cross_entropy_with_logits(
            ad.gather_rows(trace.itm_logits, np.arange(2 * b)), labels
        )
        out.pos_ce = ad.gather_rows(ce, np.arange(b))
        itm = ad.tmean(ce)
        out.itm = float(itm.data)
        terms.append(itm)
    else:
        # matched-pair cross entropy is still the map-extraction substrate
        out.pos_ce = ad.cross_entropy_with_logits(
            ad.gather_rows(trace.itm_logits, np.arange(b)), np.tile(MATCHED, (b, 1))
        )
    if toggles.mlm and mlm_rows is not None:
        offset = b * (2 if toggles.itm else 1)
        states = ad.gather_rows(trace.fused_states, offset + np.arange(len(mlm_rows)))
        L, dm = cfg.max_text_len, cfg.d_model
        onehot = np.zeros((len(mlm_rows), L, dm), dtype=np.float32)
        onehot[np.arange(len(mlm_rows)), mlm_positions, :] = 1.0
        picked = ad.tsum(ad.mul(states, ad.Tensor(onehot)), axis=1)
        logits = ad.add(
            ad.matmul(picked, params["mlm.w"]),
            ad.expand_to(params["mlm.b"], (len(mlm_rows), cfg.vocab_size)),
        )
        target_1h = np.zeros((len(mlm_rows), cfg.vocab_size), dtype=np.float32)
        target_1h[np.arange(len(mlm_rows)), mlm_targets] = 1.0
        mlm = ad.tmean(ad.cross_entropy_with_logits(logits, target_1h))
        out.mlm = float(mlm.data)
        terms.append(mlm)
    if toggles.itc:
        txt_pos = ad.gather_rows(txt_all, np.arange(b))
        itc = _itc_term(params, cfg, img_emb, txt_pos, mask_all[:b])
        out.itc = float(itc.data)
        terms.append(itc)
    total = terms[0] if terms else out.total
    for t in terms[1:]:
        total = ad.add(total, t)
    out.total = total
    return out
