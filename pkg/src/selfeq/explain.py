"""Gradient-weighted attention maps and map utilities.

A map is ReLU(F * dH/dF) where F is the recorded cross-attention weight
tensor at the configured fusion layer and H is the matching cross entropy
against the "matched" label (grounding queries are presumed matched).
Head and token aggregation is an arithmetic mean over heads and over
non-pad, non-CLS text tokens. The gradient factor is read off a backward
pass and re-enters the graph as a constant, so training through a map
shapes F without needing higher-order derivatives.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as m
from .data import PAD_ID, tokenize

DEGENERATE_EPS = 1e-8


@dataclass
class AttentionMap:
    grid: np.ndarray  # (P, P), nonnegative float32
    source_text: str
    layer: int
    normalized: bool = False
    degenerate: bool = False


def _token_weights(pad_mask: np.ndarray) -> np.ndarray:
    """(B, L) mean weights over non-pad, non-CLS positions."""
    w = pad_mask.astype(np.float32)
    w[:, 0] = 0.0
    counts = np.maximum(w.sum(axis=1, keepdims=True), 1.0)
    return w / counts


def attention_gradient(tape: ad.Tape, trace: m.FusionTrace, cfg: m.ModelConfig,
                       pos_ce: ad.Tensor | None = None, loss_scale: float = 1.0) -> np.ndarray:
    """dH/dF for every sample at once, where H is each row's matched-label
    matching cross entropy (rows are independent, so one backward from the
    row sum yields every per-row gradient)."""
    logits = trace.itm_logits
    b = logits.shape[0]
    if pos_ce is None:
        matched = np.tile(np.array([1.0, 0.0], np.float32), (b, 1))
        pos_ce = ad.cross_entropy_with_logits(logits, matched)
    h = ad.tsum(pos_ce)
    if loss_scale != 1.0:
        h = ad.scalar_mul(h, loss_scale)
    grads = tape.gradients(h)
    f_node = trace.attn_weights[cfg.explain_layer]
    g = grads.get(f_node._node_id) if f_node._tape is tape else None
    if g is None:
        g = np.zeros_like(f_node.data)
    return g


def maps_from_parts(
    f,
    gf: np.ndarray,
    pad_mask: np.ndarray,
    cfg: m.ModelConfig,
    *,
    live: bool = False,
):
    """Batched (B, P, P) maps from attention weights plus their (constant)
    matching-loss gradient: ReLU(F * dH/dF), averaged over heads and over
    non-pad, non-CLS tokens.

    live=True takes a taped tensor for `f` and re-expresses the map on the
    tape so the self-consistency losses can train through it; live=False
    takes arrays and returns detached values.
    """
    b, n_heads, L, p2 = f.shape
    g = cfg.grid
    tok_w = _token_weights(pad_mask)  # (B, L)
    if live:
        prod = ad.relu(ad.mul(f, ad.Tensor(gf)))
        heads = ad.tmean(prod, axis=1)  # (B, L, P^2)
        w = np.broadcast_to(tok_w[:, :, None], (b, L, p2)).astype(np.float32)
        pooled = ad.tsum(ad.mul(heads, ad.Tensor(w)), axis=1)  # (B, P^2)
        return ad.reshape(pooled, (b, g, g))
    prod = np.maximum(np.asarray(f) * gf, 0.0)
    heads = prod.mean(axis=1, dtype=np.float64)
    pooled = np.einsum("blp,bl->bp", heads, tok_w.astype(np.float64))
    return pooled.reshape(b, g, g).astype(np.float32)


def maps_from_trace(
    tape: ad.Tape,
    trace: m.FusionTrace,
    cfg: m.ModelConfig,
    *,
    live: bool = False,
    pos_ce: ad.Tensor | None = None,
    loss_scale: float = 1.0,
):
    """Batched (B, P, P) maps from a fusion trace."""
    f = trace.attn_weights[cfg.explain_layer]  # (B, H, L, P^2)
    gf = attention_gradient(tape, trace, cfg, pos_ce=pos_ce, loss_scale=loss_scale)
    if live:
        return maps_from_parts(f, gf, trace.pad_mask, cfg, live=True)
    return maps_from_parts(f.data, gf, trace.pad_mask, cfg, live=False)


def gradcam(params, cfg: m.ModelConfig, vocab, image: np.ndarray, caption: str,
            *, loss_scale: float = 1.0) -> AttentionMap:
    """Evaluation-mode map for one (image, caption) pair; detached values."""
    ids = tokenize(caption, vocab, cfg.max_text_len)
    if np.all(ids[1:] == PAD_ID):
        raise ValueError(f"caption {caption!r} tokenizes to nothing")
    grids = gradcam_batch(params, cfg, image[None], ids[None], loss_scale=loss_scale)
    return AttentionMap(grid=grids[0], source_text=caption, layer=cfg.explain_layer)


def gradcam_batch(params, cfg: m.ModelConfig, images: np.ndarray, token_ids: np.ndarray,
                  *, loss_scale: float = 1.0) -> np.ndarray:
    """Evaluation-mode maps for a batch: (B, P, P) numpy."""
    with ad.Tape() as tape:
        img_emb = m.encode_images(params, cfg, images)
        txt_emb, pad_mask = m.encode_texts(params, cfg, token_ids)
        trace = m.fuse_batch(params, cfg, img_emb, txt_emb, pad_mask)
        return maps_from_trace(tape, trace, cfg, live=False, loss_scale=loss_scale)


def normalize_pair_arrays(g: np.ndarray, ge: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Divide both maps by their shared max (a non-differentiated constant
    downstream); all-zero pairs come back as exact zeros, flagged."""
    if g.shape != ge.shape:
        raise ad.ShapeError(f"normalize_pair: shapes {g.shape} and {ge.shape} differ")
    s = float(max(g.max(initial=0.0), ge.max(initial=0.0)))
    if s <= DEGENERATE_EPS:
        return np.zeros_like(g), np.zeros_like(ge), True
    return (g / np.float32(s)), (ge / np.float32(s)), False


def normalize_pair(a: AttentionMap, b: AttentionMap) -> tuple[AttentionMap, AttentionMap]:
    g, ge, degenerate = normalize_pair_arrays(a.grid, b.grid)
    return (
        AttentionMap(g, a.source_text, a.layer, normalized=True, degenerate=degenerate),
        AttentionMap(ge, b.source_text, b.layer, normalized=True, degenerate=degenerate),
    )


def upsample_map(map_or_grid, target_size: int) -> np.ndarray:
    """Bilinear (pixel-center) upsampling to target_size x target_size."""
    grid = map_or_grid.grid if isinstance(map_or_grid, AttentionMap) else np.asarray(map_or_grid)
    p = grid.shape[0]
    if target_size < p:
        raise ValueError(f"target_size {target_size} smaller than the map ({p})")
    scale = p / target_size
    coords = (np.arange(target_size) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0.0, p - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, p - 1)
    frac = (coords - lo).astype(np.float64)
    g = grid.astype(np.float64)
    rows = g[lo][:, :] * (1 - frac)[:, None] + g[hi][:, :] * frac[:, None]  # (T, P)
    out = rows[:, lo] * (1 - frac)[None, :] + rows[:, hi] * frac[None, :]  # (T, T)
    return out.astype(np.float32)


def export_map(grid: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255), value = round(255 * v), half away from
    zero; inputs clamped to [0, 1]."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    h, w = g.shape
    pixels = np.floor(g * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def map_filename(sample_id: str, caption: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", caption.lower()).strip("-")
    return f"{sample_id}__{slug}.pgm"
