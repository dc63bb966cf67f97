import numpy as np
import pytest

from selfeq import autodiff as ad
from selfeq import data as d
from selfeq import explain as ex
from selfeq import model as m


@pytest.fixture(scope="module")
def vocab():
    return d.build_vocabulary()


def micro_setup(seed=3, scale=0.3):
    cfg = m.ModelConfig(
        vocab_size=len(d.build_vocabulary()), image_size=8, patch_size=4,
        d_model=8, n_heads=2, n_fusion_layers=1, max_text_len=6,
    )
    params = m.init_parameters(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data[:] = rng.uniform(-scale, scale, p.shape).astype(np.float32)
    image = rng.uniform(0, 1, (8, 8, 3)).astype(np.float32)
    return cfg, params, image


def test_gradcam_zero_head_gives_zero_map(vocab):
    cfg, params, image = micro_setup()
    params["itm.w"].data[:] = 0
    params["itm.b"].data[:] = 0
    amap = ex.gradcam(params, cfg, vocab, image, "a red circle")
    np.testing.assert_array_equal(amap.grid, 0)


def test_gradcam_default_shape(vocab):
    cfg = m.ModelConfig(vocab_size=len(vocab))
    params = m.init_parameters(cfg, seed=0)
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
    amap = ex.gradcam(params, cfg, vocab, image, "a red circle in the top left")
    assert amap.grid.shape == (8, 8)
    assert np.all(amap.grid >= 0)
    assert amap.layer == cfg.explain_layer


def test_gradcam_empty_caption_rejected(vocab):
    cfg, params, image = micro_setup()
    with pytest.raises(ValueError, match="tokenizes to nothing"):
        ex.gradcam(params, cfg, vocab, image, "?!.")


def test_gradcam_deterministic(vocab):
    cfg, params, image = micro_setup(seed=9)
    a = ex.gradcam(params, cfg, vocab, image, "a blue square").grid
    b = ex.gradcam(params, cfg, vocab, image, "a blue square").grid
    assert np.array_equal(a, b)


def test_gradcam_nonnegative_many_seeds(vocab):
    for seed in range(5):
        cfg, params, image = micro_setup(seed=seed, scale=0.5)
        amap = ex.gradcam(params, cfg, vocab, image, "a green wedge")
        assert np.all(amap.grid >= 0)


def test_gradcam_loss_scaling_property(vocab):
    """Scaling the matching loss scales the raw map; the pair-normalized
    maps are unchanged."""
    cfg, params, image = micro_setup(seed=4)
    g1 = ex.gradcam(params, cfg, vocab, image, "a red circle").grid
    g3 = ex.gradcam(params, cfg, vocab, image, "a red circle", loss_scale=3.0).grid
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-4, atol=1e-9)
    e1 = ex.gradcam(params, cfg, vocab, image, "a red disc").grid
    e3 = ex.gradcam(params, cfg, vocab, image, "a red disc", loss_scale=3.0).grid
    n1, ne1, _ = ex.normalize_pair_arrays(g1, e1)
    n3, ne3, _ = ex.normalize_pair_arrays(g3, e3)
    np.testing.assert_allclose(n1, n3, atol=1e-6)
    np.testing.assert_allclose(ne1, ne3, atol=1e-6)
    assert np.argmax(n1) == np.argmax(n3)


def test_gradcam_self_pair_identical(vocab):
    cfg, params, image = micro_setup(seed=6)
    a = ex.gradcam(params, cfg, vocab, image, "a red circle")
    b = ex.gradcam(params, cfg, vocab, image, "a red circle")
    na, nb = ex.normalize_pair(a, b)
    assert np.array_equal(na.grid, nb.grid)
    assert float(np.mean((na.grid - nb.grid) ** 2)) == 0.0


def test_gradient_factor_matches_attention_finite_differences(vocab):
    """F * dH/dF against an entry-wise FD estimate of dH/dF computed by an
    independent numpy replay of the post-attention path."""
    cfg, params, image = micro_setup(seed=8, scale=0.4)
    ids = d.tokenize("a red circle", vocab, cfg.max_text_len)

    with ad.Tape() as tape:
        img_emb = m.encode_images(params, cfg, image[None])
        txt_emb, pad_mask = m.encode_texts(params, cfg, ids[None])
        trace = m.fuse_batch(params, cfg, img_emb, txt_emb, pad_mask)
        gf = ex.attention_gradient(tape, trace, cfg)[0]
        f_val = trace.attn_weights[0].data[0]
        x_before = txt_emb.data[0].astype(np.float64)
        v_img = img_emb.data[0].astype(np.float64)

    def p64(name):
        return params[name].data.astype(np.float64)

    def h_of_attention(attn):
        """Numpy replay from attention weights to the matched CE."""
        L, d = x_before.shape
        v = v_img @ p64("fusion0.wv") + p64("fusion0.bv")
        hd = cfg.d_head
        ctx = np.zeros((L, d))
        for h in range(cfg.n_heads):
            vh = v[:, h * hd : (h + 1) * hd]
            ctx[:, h * hd : (h + 1) * hd] = attn[h] @ vh
        x = x_before + ctx @ p64("fusion0.wo") + p64("fusion0.bo")
        ff = np.maximum(x @ p64("fusion0.ffn.w1") + p64("fusion0.ffn.b1"), 0)
        x = x + ff @ p64("fusion0.ffn.w2") + p64("fusion0.ffn.b2")
        mask = pad_mask[0].copy()
        mask[0] = False
        cls = x[0] + x[mask].mean(axis=0)
        logits = cls @ p64("itm.w") + p64("itm.b")
        z = logits - logits.max()
        return float(np.log(np.exp(z).sum()) - z[0])

    h_step = 1e-4
    attn = f_val.astype(np.float64)
    errs = []
    for h in range(cfg.n_heads):
        for l in (1, 2):  # real token rows
            for p in range(cfg.n_patches):
                up = attn.copy()
                up[h, l, p] += h_step
                dn = attn.copy()
                dn[h, l, p] -= h_step
                fd = (h_of_attention(up) - h_of_attention(dn)) / (2 * h_step)
                ana = gf[h, l, p]
                errs.append(abs(ana - fd) / max(abs(ana), abs(fd), 1e-3))
    assert max(errs) <= 1e-2


def test_normalize_pair_worked_example():
    g = np.array([[2.0, 0.0], [0.0, 1.0]], np.float32)
    ge = np.array([[0.0, 4.0], [0.0, 0.0]], np.float32)
    ng, nge, degenerate = ex.normalize_pair_arrays(g, ge)
    assert not degenerate
    np.testing.assert_allclose(ng, [[0.5, 0.0], [0.0, 0.25]])
    np.testing.assert_allclose(nge, [[0.0, 1.0], [0.0, 0.0]])


def test_normalize_pair_degenerate():
    z = np.zeros((2, 2), np.float32)
    ng, nge, degenerate = ex.normalize_pair_arrays(z, z.copy())
    assert degenerate
    np.testing.assert_array_equal(ng, 0)
    np.testing.assert_array_equal(nge, 0)


def test_normalize_pair_max_is_one():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = rng.uniform(0, 3, (4, 4)).astype(np.float32)
        ge = rng.uniform(0, 3, (4, 4)).astype(np.float32)
        ng, nge, degenerate = ex.normalize_pair_arrays(g, ge)
        assert not degenerate
        assert max(ng.max(), nge.max()) == pytest.approx(1.0, abs=1e-6)


def test_normalize_pair_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ex.normalize_pair_arrays(np.zeros((2, 2)), np.zeros((3, 3)))


def test_upsample_constant_map():
    out = ex.upsample_map(np.full((8, 8), 0.7, np.float32), 64)
    np.testing.assert_allclose(out, 0.7, atol=1e-6)


def test_upsample_single_hot_argmax_in_patch_footprint():
    g = np.zeros((8, 8), np.float32)
    g[3, 5] = 1.0
    out = ex.upsample_map(g, 64)
    y, x = np.unravel_index(np.argmax(out), out.shape)
    assert 3 * 8 <= y < 4 * 8
    assert 5 * 8 <= x < 6 * 8


def test_upsample_matches_independent_bilinear_oracle():
    rng = np.random.default_rng(1)
    g = (np.arange(64).reshape(8, 8) / 63.0 + rng.uniform(0, 0.1, (8, 8))).astype(np.float32)
    out = ex.upsample_map(g, 64)

    def oracle(grid, t):
        p = grid.shape[0]
        res = np.zeros((t, t))
        for i in range(t):
            for j in range(t):
                v = min(max((i + 0.5) * p / t - 0.5, 0), p - 1)
                u = min(max((j + 0.5) * p / t - 0.5, 0), p - 1)
                v0, u0 = int(np.floor(v)), int(np.floor(u))
                v1, u1 = min(v0 + 1, p - 1), min(u0 + 1, p - 1)
                fv, fu = v - v0, u - u0
                res[i, j] = (
                    grid[v0, u0] * (1 - fv) * (1 - fu)
                    + grid[v1, u0] * fv * (1 - fu)
                    + grid[v0, u1] * (1 - fv) * fu
                    + grid[v1, u1] * fv * fu
                )
        return res

    np.testing.assert_allclose(out, oracle(g.astype(np.float64), 64), atol=1e-6)


def test_upsample_target_too_small():
    with pytest.raises(ValueError):
        ex.upsample_map(np.zeros((8, 8)), 4)


def read_pgm(path):
    blob = open(path, "rb").read()
    header, rest = blob.split(b"\n255\n", 1)
    magic, dims = header.split(b"\n")
    w, h = map(int, dims.split())
    assert magic == b"P5"
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def test_export_map_rounding(tmp_path):
    grid = np.array([[0.0, 1.0], [0.5, 0.25]], np.float32)
    path = tmp_path / "m.pgm"
    ex.export_map(grid, path)
    assert read_pgm(path).tolist() == [[0, 255], [128, 64]]


def test_export_map_header(tmp_path):
    path = tmp_path / "m.pgm"
    ex.export_map(np.zeros((64, 64), np.float32), path)
    assert path.read_bytes().startswith(b"P5\n64 64\n255\n")


def test_export_map_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    grid = rng.uniform(0, 1, (8, 8)).astype(np.float32)
    path = tmp_path / "m.pgm"
    ex.export_map(grid, path)
    quantized = np.floor(np.clip(grid, 0, 1) * 255.0 + 0.5)
    np.testing.assert_array_equal(read_pgm(path), quantized)


def test_map_filename_slug():
    assert ex.map_filename("ev-000001", "A red circle, top left!") == (
        "ev-000001__a-red-circle-top-left.pgm"
    )
