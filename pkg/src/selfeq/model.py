"""Miniature vision-language model.

An image encoder (patch projection + positions), a text encoder (token +
position embeddings), and a fusion stack of text-queries-over-patches
cross-attention blocks. The matching head reads the fused [CLS] state;
because fusion has no text self-attention, the final block folds a masked
mean of the token states into the [CLS] slot so the match score actually
sees the caption (and so per-token attention rows receive gradient).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import CLS_ID, PAD_ID

CHECKPOINT_MAGIC = b"SELFEQ1\n"


@dataclass
class ModelConfig:
    vocab_size: int
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_fusion_layers: int = 3
    max_text_len: int = 16
    explain_layer: int = -1  # -1 resolves to the last fusion layer
    temperature: float = 0.07

    def __post_init__(self):
        if self.explain_layer == -1:
            self.explain_layer = self.n_fusion_layers - 1
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.explain_layer < self.n_fusion_layers:
            raise ValueError("explain_layer out of range")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the reserved ids")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ffn(self) -> int:
        return self.d_model


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes = {
        "patch_proj.w": (cfg.patch_size * cfg.patch_size * 3, d),
        "patch_proj.b": (d,),
        "pos_img": (cfg.n_patches, d),
        "pos_txt": (cfg.max_text_len, d),
        "tok_emb": (v, d),
        "itm.w": (d, 2),
        "itm.b": (2,),
        "mlm.w": (d, v),
        "mlm.b": (v,),
        "itc.img.w": (d, d),
        "itc.img.b": (d,),
        "itc.txt.w": (d, d),
        "itc.txt.b": (d,),
    }
    for i in range(cfg.n_fusion_layers):
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"fusion{i}.{name}"] = (d, d)
        for name in ("bq", "bk", "bv", "bo"):
            shapes[f"fusion{i}.{name}"] = (d,)
        shapes[f"fusion{i}.ffn.w1"] = (d, cfg.d_ffn)
        shapes[f"fusion{i}.ffn.b1"] = (cfg.d_ffn,)
        shapes[f"fusion{i}.ffn.w2"] = (cfg.d_ffn, d)
        shapes[f"fusion{i}.ffn.b2"] = (d,)
    return shapes


def init_parameters(cfg: ModelConfig, seed: int = 0) -> dict[str, ad.Tensor]:
    """Seeded uniform(-0.05, 0.05) weights and embeddings; zero biases and
    positional tables. Each parameter draws from its own named substream."""
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        zero = name.startswith("pos_") or name.split(".")[-1].startswith("b")
        if zero:
            arr = np.zeros(shape, dtype=np.float32)
        else:
            rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
            arr = rng.uniform(-0.05, 0.05, size=shape).astype(np.float32)
        params[name] = ad.Tensor(arr, requires_grad=True)
    return params


@dataclass
class FusionTrace:
    fused_states: ad.Tensor  # (B, L, d)
    attn_weights: list[ad.Tensor]  # per layer, (B, H, L, P^2)
    itm_logits: ad.Tensor  # (B, 2)
    cls_state: ad.Tensor  # (B, d)
    pad_mask: np.ndarray  # (B, L) bool, True where a real token sits


def _linear(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    y = ad.matmul(x, w)
    return ad.add(y, ad.expand_to(b, y.shape))


def _linear3(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    bsz, n, d = x.shape
    y = _linear(ad.reshape(x, (bsz * n, d)), w, b)
    return ad.reshape(y, (bsz, n, w.shape[1]))


def patches_of(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, H, W, 3) -> (B, P^2, ps*ps*3), row-major over the patch grid."""
    b = images.shape[0]
    g, ps = cfg.grid, cfg.patch_size
    x = images.reshape(b, g, ps, g, ps, 3).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, g * g, ps * ps * 3)


def encode_images(params, cfg: ModelConfig, images: np.ndarray) -> ad.Tensor:
    """Batched image encoder: (B, H, W, 3) in [0,1] -> (B, P^2, d)."""
    images = np.asarray(images, dtype=np.float32)
    expect = (cfg.image_size, cfg.image_size, 3)
    if images.ndim != 4 or images.shape[1:] != expect:
        raise ad.ShapeError(f"encode_images: expected (B,)+{expect}, got {images.shape}")
    flat = patches_of(images, cfg)
    b = flat.shape[0]
    x = _linear(ad.Tensor(flat.reshape(b * cfg.n_patches, -1)), params["patch_proj.w"], params["patch_proj.b"])
    x = ad.reshape(x, (b, cfg.n_patches, cfg.d_model))
    return ad.add(x, ad.expand_to(params["pos_img"], x.shape))


def encode_image(params, cfg: ModelConfig, raster: np.ndarray) -> ad.Tensor:
    """Single raster (H, W, 3) -> (P^2, d)."""
    out = encode_images(params, cfg, np.asarray(raster, dtype=np.float32)[None])
    return ad.reshape(out, out.shape[1:])


def encode_texts(params, cfg: ModelConfig, token_ids: np.ndarray) -> tuple[ad.Tensor, np.ndarray]:
    """Batched text encoder: (B, L) int ids -> ((B, L, d), pad mask)."""
    ids = np.asarray(token_ids)
    if ids.ndim != 2 or ids.shape[1] != cfg.max_text_len:
        raise ad.ShapeError(f"encode_texts: expected (B, {cfg.max_text_len}), got {ids.shape}")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise ValueError("encode_texts: token id out of vocabulary range")
    b = ids.shape[0]
    x = ad.gather_rows(params["tok_emb"], ids.reshape(-1))
    x = ad.reshape(x, (b, cfg.max_text_len, cfg.d_model))
    x = ad.add(x, ad.expand_to(params["pos_txt"], x.shape))
    return x, ids != PAD_ID


def encode_text(params, cfg: ModelConfig, token_ids: np.ndarray) -> tuple[ad.Tensor, np.ndarray]:
    """Single sequence (L,) -> ((L, d), pad mask)."""
    out, mask = encode_texts(params, cfg, np.asarray(token_ids)[None])
    return ad.reshape(out, out.shape[1:]), mask[0]


def _heads_split(x: ad.Tensor, cfg: ModelConfig) -> ad.Tensor:
    """(B, N, d) -> (B*H, N, d_head)."""
    b, n, _ = x.shape
    x = ad.reshape(x, (b, n, cfg.n_heads, cfg.d_head))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b * cfg.n_heads, n, cfg.d_head))


def _heads_join(x: ad.Tensor, cfg: ModelConfig, b: int) -> ad.Tensor:
    """(B*H, N, d_head) -> (B, N, d)."""
    _, n, _ = x.shape
    x = ad.reshape(x, (b, cfg.n_heads, n, cfg.d_head))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b, n, cfg.d_model))


def fuse_batch(
    params,
    cfg: ModelConfig,
    img_emb: ad.Tensor,
    txt_emb: ad.Tensor,
    pad_mask: np.ndarray,
    img_index: np.ndarray | None = None,
) -> FusionTrace:
    """Fusion stack over a (possibly mega-batched) text batch.

    `img_index`, when given, maps each text row to a row of `img_emb`, so
    key/value projections run once per unique image even when several
    text segments share it.
    """
    b, L, d = txt_emb.shape
    if img_index is None:
        img_index = np.arange(b)
    img_index = np.asarray(img_index)
    n_img = img_emb.shape[0]
    if (
        img_emb.shape[1:] != (cfg.n_patches, d)
        or pad_mask.shape != (b, L)
        or img_index.shape != (b,)
    ):
        raise ad.ShapeError(
            f"fuse: image {img_emb.shape}, text {txt_emb.shape}, mask {pad_mask.shape} disagree"
        )
    # gather indices expanding per-image head blocks to per-text-row blocks
    bh_index = (img_index[:, None] * cfg.n_heads + np.arange(cfg.n_heads)[None, :]).reshape(-1)
    x = txt_emb
    attn_layers = []
    last_pre = last_ctx = None
    scale = 1.0 / np.sqrt(cfg.d_head)
    for i in range(cfg.n_fusion_layers):
        q = _heads_split(_linear3(x, params[f"fusion{i}.wq"], params[f"fusion{i}.bq"]), cfg)
        k = _heads_split(_linear3(img_emb, params[f"fusion{i}.wk"], params[f"fusion{i}.bk"]), cfg)
        v = _heads_split(_linear3(img_emb, params[f"fusion{i}.wv"], params[f"fusion{i}.bv"]), cfg)
        if n_img != b or not np.array_equal(img_index, np.arange(b)):
            k = ad.gather_rows(k, bh_index)
            v = ad.gather_rows(v, bh_index)
        scores = ad.scalar_mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))), scale)
        attn4 = ad.reshape(ad.row_softmax(scores), (b, cfg.n_heads, L, cfg.n_patches))
        attn_layers.append(attn4)
        ctx = ad.bmm(ad.reshape(attn4, (b * cfg.n_heads, L, cfg.n_patches)), v)
        ctx = _linear3(_heads_join(ctx, cfg, b), params[f"fusion{i}.wo"], params[f"fusion{i}.bo"])
        last_pre, last_ctx = x, ctx
        x = ad.add(x, ctx)
        h = _linear3(x, params[f"fusion{i}.ffn.w1"], params[f"fusion{i}.ffn.b1"])
        h = _linear3(ad.relu(h), params[f"fusion{i}.ffn.w2"], params[f"fusion{i}.ffn.b2"])
        x = ad.add(x, h)
    # CLS readout: fold the masked mean of token states into the [CLS]
    # slot plus the product of the pooled modalities. The additive part
    # gives the match head its view of the caption; the product gives
    # matched-ness --- a relational quantity a linear head cannot
    # otherwise express --- a first-order path. The fixed gain keeps the
    # interaction features from drowning in the additive terms (they are
    # a few percent of the state magnitude otherwise).
    token_mask = pad_mask.copy()
    token_mask[:, 0] = False
    counts = np.maximum(token_mask.sum(axis=1, keepdims=True), 1).astype(np.float32)
    w_mean = np.broadcast_to((token_mask / counts)[:, :, None], (b, L, d)).astype(np.float32)
    pooled = ad.tsum(ad.mul(x, ad.Tensor(w_mean)), axis=1)
    onehot0 = np.zeros((b, L, d), dtype=np.float32)
    onehot0[:, 0, :] = 1.0
    cls0 = ad.tsum(ad.mul(x, ad.Tensor(onehot0)), axis=1)
    img_pool = ad.gather_rows(ad.tmean(img_emb, axis=1), img_index)  # (b, d)
    product = ad.scalar_mul(ad.mul(img_pool, pooled), 8.0)
    cls_state = ad.add(ad.add(cls0, pooled), product)
    itm_logits = _linear(cls_state, params["itm.w"], params["itm.b"])
    return FusionTrace(
        fused_states=x,
        attn_weights=attn_layers,
        itm_logits=itm_logits,
        cls_state=cls_state,
        pad_mask=pad_mask,
    )


def fuse(params, cfg: ModelConfig, img_emb: ad.Tensor, txt_emb: ad.Tensor, pad_mask: np.ndarray) -> FusionTrace:
    """Single-sample wrapper: (P^2, d) x (L, d) -> unbatched FusionTrace."""
    if txt_emb.data.ndim == 3:
        return fuse_batch(params, cfg, img_emb, txt_emb, pad_mask)
    trace = fuse_batch(
        params, cfg,
        ad.reshape(img_emb, (1,) + img_emb.shape),
        ad.reshape(txt_emb, (1,) + txt_emb.shape),
        np.asarray(pad_mask)[None],
    )
    return FusionTrace(
        fused_states=ad.reshape(trace.fused_states, trace.fused_states.shape[1:]),
        attn_weights=[ad.reshape(a, a.shape[1:]) for a in trace.attn_weights],
        itm_logits=ad.reshape(trace.itm_logits, (2,)),
        cls_state=ad.reshape(trace.cls_state, trace.cls_state.shape[1:]),
        pad_mask=trace.pad_mask[0],
    )


def mlm_logits(params, cfg: ModelConfig, trace: FusionTrace, positions) -> ad.Tensor:
    """Vocabulary logits at each sample's masked position: (B, vocab)."""
    states = trace.fused_states
    single = states.data.ndim == 2
    if single:
        states = ad.reshape(states, (1,) + states.shape)
        positions = [int(positions)]
        pad_mask = trace.pad_mask[None]
    else:
        pad_mask = trace.pad_mask
    b, L, d = states.shape
    pos = np.asarray(positions, dtype=np.int64)
    if np.any(pos < 1) or np.any(pos >= L):
        raise ValueError("mlm position out of range or pointing at [CLS]")
    if not np.all(pad_mask[np.arange(b), pos]):
        raise ValueError("mlm position points at a [PAD] slot")
    onehot = np.zeros((b, L, d), dtype=np.float32)
    onehot[np.arange(b), pos, :] = 1.0
    picked = ad.tsum(ad.mul(states, ad.Tensor(onehot)), axis=1)
    out = _linear(picked, params["mlm.w"], params["mlm.b"])
    return ad.reshape(out, (cfg.vocab_size,)) if single else out


def itc_embeddings(
    params, cfg: ModelConfig, img_emb: ad.Tensor, txt_emb: ad.Tensor, pad_mask: np.ndarray
) -> tuple[ad.Tensor, ad.Tensor]:
    """Unit-norm pooled projections of each modality: ((B, d), (B, d))."""
    single = txt_emb.data.ndim == 2
    if single:
        img_emb = ad.reshape(img_emb, (1,) + img_emb.shape)
        txt_emb = ad.reshape(txt_emb, (1,) + txt_emb.shape)
        pad_mask = np.asarray(pad_mask)[None]
    b, L, d = txt_emb.shape
    img_vec = _linear(ad.tmean(img_emb, axis=1), params["itc.img.w"], params["itc.img.b"])
    counts = np.maximum(pad_mask.sum(axis=1, keepdims=True), 1).astype(np.float32)
    w = np.broadcast_to((pad_mask / counts)[:, :, None], (b, L, d)).astype(np.float32)
    txt_vec = _linear(ad.tsum(ad.mul(txt_emb, ad.Tensor(w)), axis=1), params["itc.txt.w"], params["itc.txt.b"])

    def l2norm(vec):
        n = ad.sqrt(ad.tsum(ad.square(vec), axis=1, keepdims=True))
        n = ad.clamp_min(n, 1e-8)
        return ad.div(vec, ad.expand_to(n, vec.shape))

    iv, tv = l2norm(img_vec), l2norm(txt_vec)
    if single:
        return ad.reshape(iv, (d,)), ad.reshape(tv, (d,))
    return iv, tv


# ---------------------------------------------------------------------------
# checkpoint format: magic, length-prefixed config JSON, (name, rank,
# extents, f32 data) entries, FNV-1a-64 checksum of all preceding bytes


class CheckpointError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(params: dict, cfg: ModelConfig, path) -> None:
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise CheckpointError(f"parameter {name!r} holds non-finite values")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    cfg_bytes = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", len(cfg_bytes))
    blob += cfg_bytes
    for name in sorted(params):
        arr = params[name].data.astype("<f4")
        name_b = name.encode("utf-8")
        blob += struct.pack("<Q", len(name_b))
        blob += name_b
        blob += struct.pack("<Q", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.tobytes()
    blob += struct.pack("<Q", fnv1a64(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> tuple[dict, ModelConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 16:
        raise CheckpointError("checkpoint truncated")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint or unsupported format version")
    body, (checksum,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != checksum:
        raise CheckpointError("checksum mismatch: checkpoint corrupted or truncated")
    off = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(body):
            raise CheckpointError("checkpoint truncated")
        chunk = body[off : off + n]
        off += n
        return chunk

    (cfg_len,) = struct.unpack("<Q", take(8))
    cfg = ModelConfig(**json.loads(take(cfg_len).decode("utf-8")))
    params = {}
    while off < len(body):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
        if name in params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        params[name] = ad.Tensor(arr, requires_grad=True)
    expected = parameter_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"missing parameter {name!r}")
        if params[name].shape != shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {params[name].shape}, config implies {shape}"
            )
    extra = set(params) - set(expected)
    if extra:
        raise CheckpointError(f"unexpected parameters {sorted(extra)}")
    return params, cfg
