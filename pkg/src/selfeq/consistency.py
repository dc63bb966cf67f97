"""Self-consistency objectives over paired attention maps.

For a caption and its paraphrase the pair-normalized maps feed a
similarity term (mean squared error), and a region-of-interest term: the
RoI is the cells where the two maps sum past threshold k, and within it
each map is pushed toward a high mean (hinged at k/2) and low standard
deviation. The composite training loss blends these with the base
vision-language objectives on a per-step schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import explain as ex
from . import model as m
from . import objectives as obj


@dataclass
class SelfEQConfig:
    k: float = 0.8
    lam: float = 1.0
    alpha_start: float = 0.0
    alpha_end: float = 1.0
    ramp_epochs: float = 2.0
    use_sim: bool = True
    use_cst: bool = True

    def __post_init__(self):
        if not 0 < self.k < 2:
            raise ValueError("k must lie in (0, 2): maps are pair-normalized to [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.ramp_epochs < 0:
            raise ValueError("ramp_epochs must be nonnegative")

    def alpha(self, epoch_progress: float) -> float:
        """Blend weight: alpha_start at progress 0, alpha_end from
        ramp_epochs on, linear in between (per optimization step)."""
        if self.ramp_epochs == 0:
            return self.alpha_end
        t = min(1.0, max(0.0, epoch_progress / self.ramp_epochs))
        return self.alpha_start + (self.alpha_end - self.alpha_start) * t


@dataclass
class RoiStats:
    mu: float
    sigma: float
    count: float


def loss_sim(g: np.ndarray, ge: np.ndarray) -> float:
    """Mean squared error between two same-shape maps."""
    if g.shape != ge.shape:
        raise ad.ShapeError(f"loss_sim: shapes {g.shape} and {ge.shape} differ")
    d = g.astype(np.float64) - ge.astype(np.float64)
    return float((d * d).mean())


def roi_mask(g: np.ndarray, ge: np.ndarray, k: float) -> np.ndarray:
    """1 where the maps sum to at least k (boundary included), else 0."""
    return (g.astype(np.float64) + ge.astype(np.float64) >= k).astype(np.float32)


def roi_stats(g: np.ndarray, mask: np.ndarray) -> RoiStats:
    if mask.shape != g.shape:
        raise ad.ShapeError(f"roi_stats: mask {mask.shape} vs map {g.shape}")
    count = float(mask.sum())
    if count == 0:
        return RoiStats(mu=float("nan"), sigma=float("nan"), count=0.0)
    r = g.astype(np.float64) * mask
    mu = r.sum() / count
    var = (mask * (r - mu) ** 2).sum() / count
    return RoiStats(mu=float(mu), sigma=float(np.sqrt(var)), count=count)


def loss_cst(stats: RoiStats, stats_e: RoiStats, k: float) -> float:
    if stats.count == 0 or stats_e.count == 0:
        raise ValueError("loss_cst needs a non-empty RoI (caller handles empties)")
    return (
        stats.sigma
        + stats_e.sigma
        + max(0.0, k / 2 - stats.mu)
        + max(0.0, k / 2 - stats_e.mu)
    )


def loss_selfeq(g: np.ndarray, ge: np.ndarray, cfg: SelfEQConfig) -> tuple[float, dict]:
    """Similarity plus lambda-weighted RoI consistency on a normalized pair.

    Degenerate or empty-RoI pairs contribute zero consistency; the
    occurrence is counted in the diagnostics rather than penalized.
    """
    sim = loss_sim(g, ge) if cfg.use_sim else 0.0
    mask = roi_mask(g, ge, cfg.k)
    empty = int(mask.sum() == 0)
    cst = 0.0
    if cfg.use_cst and not empty:
        cst = loss_cst(roi_stats(g, mask), roi_stats(ge, mask), cfg.k)
    total = sim + cfg.lam * cst
    return total, {"sim": sim, "cst": cst, "empty_roi": empty}


# ---------------------------------------------------------------------------
# taped (trainable) versions, batched over paraphrase-bearing rows


def selfeq_terms(g: ad.Tensor, ge: ad.Tensor, cfg: SelfEQConfig) -> tuple[ad.Tensor, dict]:
    """Batched L_sim + lambda * L_cst over live (B, P, P) map tensors.

    The pair-shared normalizer and the RoI mask are computed from the
    forward values and held constant, so gradients flow into the raw maps
    through the normalized numerators and the masked statistics.
    """
    b, p, _ = g.shape
    n_cells = p * p
    gv, gev = g.data, ge.data
    s = np.maximum(gv.reshape(b, -1).max(axis=1), gev.reshape(b, -1).max(axis=1))
    valid = s > ex.DEGENERATE_EPS
    inv_s = np.where(valid, 1.0 / np.maximum(s, ex.DEGENERATE_EPS), 0.0).astype(np.float32)
    inv_full = np.broadcast_to(inv_s[:, None, None], (b, p, p)).astype(np.float32)
    gn = ad.mul(g, ad.Tensor(inv_full))
    gen = ad.mul(ge, ad.Tensor(inv_full))

    sim_rows = ad.tmean(ad.square(ad.sub(gn, gen)), axis=(1, 2))  # (B,)

    mask = ((gn.data.astype(np.float64) + gen.data.astype(np.float64)) >= cfg.k).astype(np.float32)
    mask *= valid[:, None, None]
    counts = mask.reshape(b, -1).sum(axis=1)
    empty = int(np.sum(valid & (counts == 0)) + np.sum(~valid))
    cst_valid = (valid & (counts > 0)).astype(np.float32)
    inv_counts = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0).astype(np.float32)

    mask_t = ad.Tensor(mask)
    inv_c = ad.Tensor(inv_counts)

    def stats_rows(x):
        r = ad.mul(x, mask_t)
        mu = ad.mul(ad.tsum(r, axis=(1, 2)), inv_c)  # (B,)
        mu3 = ad.expand_to(ad.reshape(mu, (b, 1, 1)), (b, p, p))
        var = ad.mul(ad.tsum(ad.mul(mask_t, ad.square(ad.sub(r, mu3))), axis=(1, 2)), inv_c)
        return mu, ad.sqrt(var)

    mu_g, sig_g = stats_rows(gn)
    mu_e, sig_e = stats_rows(gen)
    half_k = cfg.k / 2
    hinge_g = ad.relu(ad.add_scalar(ad.scalar_mul(mu_g, -1.0), half_k))
    hinge_e = ad.relu(ad.add_scalar(ad.scalar_mul(mu_e, -1.0), half_k))
    cst_rows = ad.add(ad.add(sig_g, sig_e), ad.add(hinge_g, hinge_e))
    cst_rows = ad.mul(cst_rows, ad.Tensor(cst_valid))

    terms = []
    if cfg.use_sim:
        terms.append(sim_rows)
    if cfg.use_cst:
        terms.append(ad.scalar_mul(cst_rows, cfg.lam))
    if terms:
        rows = terms[0]
        for t in terms[1:]:
            rows = ad.add(rows, t)
        total = ad.tmean(rows)
    else:
        total = ad.Tensor(np.zeros(()))
    diag = {
        "L_sim": float(sim_rows.data.mean()) if cfg.use_sim else 0.0,
        "L_cst": float((cst_rows.data * 1.0).mean()) if cfg.use_cst else 0.0,
        "empty_roi_count": empty,
        "mu_roi": float(np.where(cst_valid > 0, mu_g.data, np.nan)[cst_valid > 0].mean())
        if cst_valid.any()
        else float("nan"),
    }
    return total, diag


@dataclass
class StepDiagnostics:
    alpha: float = 1.0
    L_vl: float = 0.0
    L_itm: float = 0.0
    L_mlm: float = 0.0
    L_itc: float = 0.0
    L_vl_e: float = 0.0
    L_sim: float = 0.0
    L_cst: float = 0.0
    L_SelfEQ: float = 0.0
    empty_roi_count: int = 0
    n_paraphrase_rows: int = 0


def composite_loss(
    params,
    model_cfg: m.ModelConfig,
    selfeq_cfg: SelfEQConfig,
    batch: obj.Batch,
    epoch_progress: float,
    toggles: obj.Toggles | None = None,
) -> tuple[ad.Tensor, StepDiagnostics]:
    """alpha * L_vl + (1 - alpha) * (L_SelfEQ + L_vl_on_paraphrases).

    Rows without a paraphrase contribute only to L_vl. Sides whose blend
    weight is exactly zero are skipped entirely.
    """
    toggles = toggles or obj.Toggles()
    alpha = selfeq_cfg.alpha(epoch_progress)
    diag = StepDiagnostics(alpha=alpha)
    img_emb = m.encode_images(params, model_cfg, batch.images)
    tape = ad.active_tape()
    terms = []
    vl = None

    if alpha > 0.0:
        vl = obj.loss_vl(
            params, model_cfg, None, toggles,
            img_emb=img_emb, tokens=batch.tokens, step_seed=batch.step_seed,
        )
        diag.L_vl, diag.L_itm, diag.L_mlm, diag.L_itc = vl.total.data.item(), vl.itm, vl.mlm, vl.itc
        terms.append(ad.scalar_mul(vl.total, alpha))

    has_para = (
        batch.has_paraphrase
        if batch.has_paraphrase is not None
        else np.zeros(batch.size, dtype=bool)
    )
    rows = np.where(has_para)[0]
    diag.n_paraphrase_rows = len(rows)
    if alpha < 1.0 and len(rows) > 0:
        img_e = ad.gather_rows(img_emb, rows)
        tokens_e = batch.paraphrase_tokens[rows]

        # paraphrase-side objectives; the matched rows double as the
        # map-extraction substrate
        if len(rows) >= 2:
            vle = obj.loss_vl(
                params, model_cfg, None, toggles,
                img_emb=img_e, tokens=tokens_e, step_seed=batch.step_seed ^ 0x5E1F,
            )
        else:
            # a single paraphrase row cannot form in-batch negatives or a
            # contrastive pair; train on its matched term only
            vle = obj.loss_vl(
                params, model_cfg, None, obj.Toggles(itm=False, mlm=False, itc=False),
                img_emb=img_e, tokens=tokens_e, step_seed=batch.step_seed ^ 0x5E1F,
            )
            vle.total = ad.tmean(vle.pos_ce)
        diag.L_vl_e = vle.total.data.item()

        # caption-side extraction: reuse the L_vl mega-fuse when it exists
        if vl is None:
            vl_maps = obj.loss_vl(
                params, model_cfg, None, obj.Toggles(itm=False, mlm=False, itc=False),
                img_emb=img_emb, tokens=batch.tokens, step_seed=batch.step_seed,
            )
        else:
            vl_maps = vl
        g = _live_maps(tape, vl_maps, rows, model_cfg)
        ge = _live_maps(tape, vle, np.arange(len(rows)), model_cfg)
        selfeq_total, sdiag = selfeq_terms(g, ge, selfeq_cfg)
        diag.L_sim = sdiag["L_sim"]
        diag.L_cst = sdiag["L_cst"]
        diag.L_SelfEQ = float(selfeq_total.data)
        diag.empty_roi_count = sdiag["empty_roi_count"]
        terms.append(ad.scalar_mul(ad.add(selfeq_total, vle.total), 1.0 - alpha))

    if not terms:
        return ad.Tensor(np.zeros(())), diag
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total, diag


def _live_maps(tape: ad.Tape, vl: obj.VlOutputs, rows: np.ndarray, model_cfg: m.ModelConfig) -> ad.Tensor:
    """Trainable maps for `rows` of a loss_vl mega-fuse.

    The matching gradient is read at the original attention node (the
    gathered view is off the matched-CE path), then held constant while
    the map itself is re-expressed through a live row gather.
    """
    h = ad.tsum(ad.gather_rows(vl.pos_ce, rows))
    grads = tape.gradients(h)
    gf_all = grads.get(vl.explain_attn._node_id)
    if gf_all is None:
        gf_all = np.zeros_like(vl.explain_attn.data)
    f_live = ad.gather_rows(vl.explain_attn, rows)
    return ex.maps_from_parts(f_live, gf_all[rows], vl.pos_pad_mask[rows], model_cfg, live=True)


# ---------------------------------------------------------------------------
# free-map regression harness (trivial-solution analysis)
#
# Each free map is built the way the extraction pipeline builds one: a
# free attention distribution (softmax over cell logits) times a fixed
# mixed-sign gradient field, through ReLU. Independently parameterized
# nonneg grids cannot exhibit the collapse contrast at all: under pure MSE
# every cell pair either equalizes at its midpoint (no collapse) or one
# side is dead and mutual supervision cannot reach it. The softmax mass
# constraint and the constant gradient fields reproduce the structure the
# losses actually see in training (row-stochastic attention, per-caption
# gradients held constant per step).


def free_map_setup(seed: int, overlap_boost: float = 1.0):
    """Initial logits and gradient fields for one regression trial.

    The two fields agree in sign on a few cells (the mutually-correct
    region), disagree on the rest, and the initial distributions share
    some mass on one agreeing cell: the partial-overlap regime the RoI
    mechanism presumes.
    """
    rng = np.random.default_rng((seed, 0xF4EE))
    cells = rng.permutation(16)
    fa, fb = np.empty(16), np.empty(16)
    shared, only_a, only_b, dark = cells[:3], cells[3:7], cells[7:11], cells[11:]
    fa[shared] = rng.uniform(0.8, 1.0, 3)
    fb[shared] = rng.uniform(0.35, 0.55, 3)
    fa[only_a] = rng.uniform(0.5, 0.9, 4)
    fb[only_a] = -rng.uniform(0.4, 1.0, 4)
    fb[only_b] = rng.uniform(0.5, 0.9, 4)
    fa[only_b] = -rng.uniform(0.4, 1.0, 4)
    fa[dark] = -rng.uniform(0.4, 1.0, 5)
    fb[dark] = -rng.uniform(0.4, 1.0, 5)
    wa = rng.normal(0, 1.5, 16)
    wb = rng.normal(0, 1.5, 16)
    wa[shared[0]] += overlap_boost
    wb[shared[0]] += overlap_boost
    shape = (4, 4)
    return (
        wa.reshape(shape).astype(np.float32),
        wb.reshape(shape).astype(np.float32),
        fa.reshape(shape).astype(np.float32),
        fb.reshape(shape).astype(np.float32),
    )


def _visible_map(logits: np.ndarray, field: np.ndarray) -> np.ndarray:
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return np.maximum(p * field, 0.0)


def optimize_free_maps(
    logits_a: np.ndarray,
    logits_b: np.ndarray,
    field_a: np.ndarray,
    field_b: np.ndarray,
    cfg: SelfEQConfig,
    *,
    steps: int = 500,
    learning_rate: float = 0.05,
) -> dict:
    """Optimize the two free maps under the normalize-then-selfeq pipeline.

    Returns the final visible maps plus normalized-RoI statistics for the
    collapse-vs-regularization comparison.
    """
    side = logits_a.shape[0]
    wa = ad.Tensor(logits_a.copy(), requires_grad=True)
    wb = ad.Tensor(logits_b.copy(), requires_grad=True)
    state = ad.OptimizerState(kind="adam", learning_rate=learning_rate)
    params = {"a": wa, "b": wb}
    for _ in range(steps):
        with ad.Tape() as tape:
            pa = ad.reshape(ad.row_softmax(ad.reshape(wa, (1, side * side))), (1, side, side))
            pb = ad.reshape(ad.row_softmax(ad.reshape(wb, (1, side * side))), (1, side, side))
            g = ad.relu(ad.mul(pa, ad.Tensor(field_a[None])))
            ge = ad.relu(ad.mul(pb, ad.Tensor(field_b[None])))
            total, _ = selfeq_terms(g, ge, cfg)
            tape.backward(total)
            grads = {n: tape.grad(p) for n, p in params.items()}
        if any(v is None for v in grads.values()):
            break  # fully degenerate: no gradient anywhere
        ad.optimizer_step(state, params, grads)
    ga = _visible_map(wa.data, field_a)
    gb = _visible_map(wb.data, field_b)
    gn, gen, degenerate = ex.normalize_pair_arrays(ga, gb)
    out = {
        "map_a": ga,
        "map_b": gb,
        "max_entry": float(max(ga.max(), gb.max())),
        "degenerate": degenerate,
        "mu_roi": float("nan"),
        "mu_roi_e": float("nan"),
    }
    if not degenerate:
        mask = roi_mask(gn, gen, cfg.k)
        if mask.sum() > 0:
            out["mu_roi"] = roi_stats(gn, mask).mu
            out["mu_roi_e"] = roi_stats(gen, mask).mu
    return out


def free_map_regression(seed: int = 8, steps: int = 500) -> dict:
    """Run both arms of the trivial-solution comparison from one init."""
    wa, wb, fa, fb = free_map_setup(seed)
    init_max = float(max(_visible_map(wa, fa).max(), _visible_map(wb, fb).max()))
    sim_only = optimize_free_maps(wa, wb, fa, fb, SelfEQConfig(use_cst=False), steps=steps)
    full = optimize_free_maps(wa, wb, fa, fb, SelfEQConfig(), steps=steps)
    return {"init_max": init_max, "sim_only": sim_only, "full": full}
