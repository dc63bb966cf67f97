import numpy as np
import pytest

from selfeq import autodiff as ad
from selfeq import model as m
from selfeq.data import CLS_ID, PAD_ID


def micro_config():
    """2x2-patch, 1-layer, 1-head model small enough for dense FD checks."""
    return m.ModelConfig(
        vocab_size=12, image_size=8, patch_size=4, d_model=8, n_heads=1,
        n_fusion_layers=1, max_text_len=6,
    )


def default_config(vocab_size=57):
    return m.ModelConfig(vocab_size=vocab_size)


def toy_tokens(cfg, words, rng=None):
    ids = np.full(cfg.max_text_len, PAD_ID, dtype=np.int32)
    ids[0] = CLS_ID
    ids[1 : 1 + len(words)] = words
    return ids


def test_config_validation():
    with pytest.raises(ValueError):
        m.ModelConfig(vocab_size=12, image_size=60, patch_size=8)
    with pytest.raises(ValueError):
        m.ModelConfig(vocab_size=12, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        m.ModelConfig(vocab_size=12, explain_layer=5)
    cfg = default_config()
    assert cfg.explain_layer == cfg.n_fusion_layers - 1


def test_encode_image_zero_params_gives_zero_embeddings():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=0)
    params["patch_proj.w"].data[:] = 0
    out = m.encode_image(params, cfg, np.zeros((8, 8, 3), np.float32))
    np.testing.assert_array_equal(out.data, 0)


def test_encode_image_default_shape():
    cfg = default_config()
    params = m.init_parameters(cfg, seed=0)
    out = m.encode_image(params, cfg, np.zeros((64, 64, 3), np.float32))
    assert out.shape == (64, 64)


def test_encode_image_patch_locality():
    cfg = default_config()
    params = m.init_parameters(cfg, seed=1)
    rng = np.random.default_rng(0)
    img_a = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
    img_b = img_a.copy()
    img_b[8:16, 24:32] = rng.uniform(0, 1, (8, 8, 3))  # patch row 1, col 3
    ea = m.encode_image(params, cfg, img_a).data
    eb = m.encode_image(params, cfg, img_b).data
    changed = np.where(np.any(ea != eb, axis=1))[0]
    assert list(changed) == [1 * 8 + 3]


def test_encode_image_size_mismatch():
    cfg = default_config()
    params = m.init_parameters(cfg, seed=0)
    with pytest.raises(ad.ShapeError):
        m.encode_image(params, cfg, np.zeros((32, 32, 3), np.float32))


def test_encode_text_positional_term():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=0)
    params["pos_txt"].data[:] = np.random.default_rng(1).normal(size=params["pos_txt"].shape).astype(np.float32)
    ids = toy_tokens(cfg, [5, 5])
    out, mask = m.encode_text(params, cfg, ids)
    diff = out.data[1] - out.data[2]
    expected = params["pos_txt"].data[1] - params["pos_txt"].data[2]
    np.testing.assert_allclose(diff, expected, atol=1e-6)
    assert mask.tolist() == [True, True, True, False, False, False]


def test_encode_text_empty_caption_valid():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=0)
    out, mask = m.encode_text(params, cfg, toy_tokens(cfg, []))
    assert out.shape == (cfg.max_text_len, cfg.d_model)
    assert mask.tolist() == [True, False, False, False, False, False]


def test_encode_text_out_of_vocab_rejected():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=0)
    with pytest.raises(ValueError, match="vocabulary"):
        m.encode_text(params, cfg, toy_tokens(cfg, [99]))


def _forward(params, cfg, image, ids):
    img = m.encode_image(params, cfg, image)
    txt, mask = m.encode_text(params, cfg, ids)
    return m.fuse(params, cfg, img, txt, mask)


def test_fuse_uniform_image_gives_uniform_attention():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=0)
    image = np.full((8, 8, 3), 0.5, np.float32)
    with ad.Tape():
        trace = _forward(params, cfg, image, toy_tokens(cfg, [5, 6]))
    np.testing.assert_allclose(trace.attn_weights[0].data, 0.25, atol=1e-6)


def test_fuse_attention_shape_default_config():
    cfg = default_config()
    params = m.init_parameters(cfg, seed=0)
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
    ids = np.full(16, PAD_ID, np.int32)
    ids[0], ids[1:4] = CLS_ID, [7, 9, 11]
    trace = _forward(params, cfg, image, ids)
    for layer in trace.attn_weights:
        assert layer.shape == (4, 16, 64)
        np.testing.assert_allclose(layer.data.sum(axis=-1), 1.0, atol=1e-5)
        assert np.all(layer.data >= 0)


def test_fuse_token_permutation_changes_itm_logits():
    cfg = default_config()
    params = m.init_parameters(cfg, seed=3)
    rng = np.random.default_rng(5)
    # positional tables start at zero; the invariant presumes they are active
    params["pos_txt"].data[:] = rng.normal(0, 0.1, params["pos_txt"].shape).astype(np.float32)
    image = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
    ids = np.full(16, PAD_ID, np.int32)
    ids[0], ids[1:4] = CLS_ID, [7, 9, 11]
    permuted = ids.copy()
    permuted[1:4] = [11, 7, 9]
    la = _forward(params, cfg, image, ids).itm_logits.data
    lb = _forward(params, cfg, image, permuted).itm_logits.data
    assert not np.allclose(la, lb)


def test_zero_weights_leave_no_match_information_path():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=0)
    for name, p in params.items():
        if name not in ("tok_emb",):
            p.data[:] = 0
    rng = np.random.default_rng(2)
    image = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    matched = _forward(params, cfg, image, toy_tokens(cfg, [5, 6])).itm_logits.data
    mismatched = _forward(params, cfg, image, toy_tokens(cfg, [7, 8])).itm_logits.data
    np.testing.assert_array_equal(matched, mismatched)


def test_itc_embeddings_unit_norm_and_cosine():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=4)
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    ids = toy_tokens(cfg, [5, 6, 7])
    img = m.encode_image(params, cfg, image)
    txt, mask = m.encode_text(params, cfg, ids)
    iv, tv = m.itc_embeddings(params, cfg, img, txt, mask)
    assert abs(np.linalg.norm(iv.data) - 1) < 1e-5
    assert abs(np.linalg.norm(tv.data) - 1) < 1e-5
    iv2, _ = m.itc_embeddings(params, cfg, img, txt, mask)
    np.testing.assert_array_equal(iv.data, iv2.data)
    cos = float(iv.data @ tv.data)
    assert -1.0001 <= cos <= 1.0001


def test_mlm_logits_contract():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=0)
    rng = np.random.default_rng(1)
    image = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    trace = _forward(params, cfg, image, toy_tokens(cfg, [5, 6]))
    logits = m.mlm_logits(params, cfg, trace, 2)
    assert logits.shape == (cfg.vocab_size,)
    with pytest.raises(ValueError):
        m.mlm_logits(params, cfg, trace, 0)  # CLS
    with pytest.raises(ValueError):
        m.mlm_logits(params, cfg, trace, 4)  # PAD


def test_mlm_zero_head_uniform_distribution():
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=0)
    params["mlm.w"].data[:] = 0
    params["mlm.b"].data[:] = 0
    rng = np.random.default_rng(1)
    image = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    trace = _forward(params, cfg, image, toy_tokens(cfg, [5, 6]))
    logits = m.mlm_logits(params, cfg, trace, 1)
    soft = ad.row_softmax(ad.reshape(logits, (1, cfg.vocab_size))).data
    np.testing.assert_allclose(soft, 1 / cfg.vocab_size, atol=1e-7)


# ---------------------------------------------------------------------------
# end-to-end gradient check on the micro config (finite differences)


def test_fuse_itm_gradients_match_finite_differences():
    from fdcheck import rel_err

    cfg = m.ModelConfig(
        vocab_size=12, image_size=8, patch_size=4, d_model=4, n_heads=1,
        n_fusion_layers=1, max_text_len=4,
    )
    params = m.init_parameters(cfg, seed=7)
    rng = np.random.default_rng(0)
    # move off the near-degenerate init point so every path carries gradient
    for p in params.values():
        p.data[:] = rng.uniform(-0.4, 0.4, p.shape).astype(np.float32)
    image = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    ids = np.array([CLS_ID, 5, 6, PAD_ID], np.int32)
    target = np.array([[1.0, 0.0]], np.float32)

    def loss_value():
        with ad.Tape():
            trace = _forward(params, cfg, image, ids)
            logits = ad.reshape(trace.itm_logits, (1, 2))
            return float(ad.cross_entropy_with_logits(logits, target).data[0])

    with ad.Tape() as tape:
        trace = _forward(params, cfg, image, ids)
        logits = ad.reshape(trace.itm_logits, (1, 2))
        loss = ad.tsum(ad.cross_entropy_with_logits(logits, target))
        tape.backward(loss)
        grads = {n: tape.grad(p) for n, p in params.items()}

    # h=5e-3: the loss is returned in f32, so at h=1e-3 the quotient would
    # quantize at ~3e-5, swamping the ~1e-3 gradients of this micro model
    h = 5e-3
    checked = 0
    for name in ["fusion0.wq", "fusion0.wk", "itm.w", "tok_emb", "patch_proj.w"]:
        g_ana = grads[name]
        assert g_ana is not None
        p = params[name]
        fd = np.zeros_like(g_ana, dtype=np.float64)
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = loss_value()
            p.data[idx] = orig - h
            dn = loss_value()
            p.data[idx] = orig
            fd[idx] = (up - dn) / (2 * h)
            it.iternext()
        assert rel_err(g_ana, fd) < 1e-2, name
        checked += 1
    assert checked == 5


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=9)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    m.save_checkpoint(params, cfg, p1)
    loaded, cfg2 = m.load_checkpoint(p1)
    assert cfg2 == cfg
    for name, p in params.items():
        assert np.array_equal(loaded[name].data, p.data)
    m.save_checkpoint(loaded, cfg2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTSELF1" + b"\0" * 64)
    with pytest.raises(m.CheckpointError, match="magic"):
        m.load_checkpoint(path)


def test_checkpoint_corruption_detected(tmp_path):
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=9)
    path = tmp_path / "a.ckpt"
    m.save_checkpoint(params, cfg, path)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(m.CheckpointError):
        m.load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    cfg = micro_config()
    params = m.init_parameters(cfg, seed=9)
    path = tmp_path / "a.ckpt"
    m.save_checkpoint(params, cfg, path)
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(m.CheckpointError):
        m.load_checkpoint(path)


def test_checkpoint_names_unique_and_complete():
    cfg = default_config()
    params = m.init_parameters(cfg, seed=0)
    names = sorted(params)
    assert len(names) == len(set(names))
    assert set(names) == set(m.parameter_shapes(cfg))


def test_fnv1a64_known_vectors():
    # standard FNV-1a 64 test vectors
    assert m.fnv1a64(b"") == 0xCBF29CE484222325
    assert m.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert m.fnv1a64(b"foobar") == 0x85944171F73967E8
