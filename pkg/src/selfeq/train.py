"""Seeded training loop with per-epoch checkpoints and per-step JSON logs.

baseline mode optimizes the vision-language objectives only; selfeq mode
optimizes the scheduled composite. The two modes share every other code
path, so runs from the same seed differ only in the objective.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import consistency as cs
from . import model as m
from . import objectives as obj
from .config import RunConfig, render_config
from .data import build_vocabulary, load_raster, load_training_rows, tokenize

logger = logging.getLogger("selfeq.train")


def git_blob_sha1(data: bytes) -> str:
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def write_dataset_hash(dataset_path: Path, out_path: Path) -> None:
    dataset_path = Path(dataset_path)
    root = dataset_path.parent
    files = [dataset_path] + sorted((root / "images").glob("*.rgb"))
    lines = [f"{git_blob_sha1(p.read_bytes())}  {p.relative_to(root)}" for p in files]
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_images(rows, root: Path) -> dict[str, np.ndarray]:
    return {r["sample_id"]: load_raster(root / r["image"]) for r in rows}


def make_batch(rows, images, vocab, model_cfg, step_seed: int) -> obj.Batch:
    tokens = np.stack([tokenize(r["caption"], vocab, model_cfg.max_text_len) for r in rows])
    has_para = np.array([bool(r.get("paraphrase")) for r in rows])
    para_tokens = np.stack(
        [
            tokenize(r.get("paraphrase") or r["caption"], vocab, model_cfg.max_text_len)
            for r in rows
        ]
    )
    return obj.Batch(
        images=np.stack([images[r["sample_id"]] for r in rows]),
        tokens=tokens,
        paraphrase_tokens=para_tokens,
        has_paraphrase=has_para,
        step_seed=step_seed,
    )


def train_run(
    cfg: RunConfig,
    dataset_path,
    out_dir,
    *,
    mode: str | None = None,
    params: dict | None = None,
) -> dict:
    """Train one run; returns paths to the artifacts it wrote."""
    mode = mode or cfg.mode
    if mode not in ("baseline", "selfeq"):
        raise ValueError(f"unknown training mode {mode!r}")
    dataset_path = Path(dataset_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    vocab = build_vocabulary()
    model_cfg = cfg.resolved_model()
    if model_cfg.vocab_size != len(vocab):
        raise ValueError("model.vocab_size must match the bundled vocabulary")
    rows = load_training_rows(dataset_path)
    images = _load_images(rows, dataset_path.parent)
    if params is None:
        params = m.init_parameters(model_cfg, cfg.seed)
    state = ad.OptimizerState(kind=cfg.optimizer.kind, learning_rate=cfg.optimizer.learning_rate)

    (out_dir / "resolved.cfg").write_text(render_config(cfg), encoding="utf-8")
    write_dataset_hash(dataset_path, out_dir / "dataset.hash")

    bsz = cfg.optimizer.batch_size
    steps_per_epoch = max(1, len(rows) // bsz + (1 if len(rows) % bsz >= 2 else 0))
    global_step = 0
    checkpoints = []
    log_path = out_dir / "steps.jsonl"
    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(cfg.optimizer.epochs):
            order = np.random.default_rng((cfg.seed, 500, epoch)).permutation(len(rows))
            for start in range(0, len(rows), bsz):
                chunk = [rows[i] for i in order[start : start + bsz]]
                if len(chunk) < 2:
                    continue  # cannot form in-batch negatives
                batch = make_batch(chunk, images, vocab, model_cfg, step_seed=(cfg.seed << 20) + global_step)
                progress = global_step / steps_per_epoch
                with ad.Tape() as tape:
                    if mode == "selfeq":
                        total, diag = cs.composite_loss(
                            params, model_cfg, cfg.selfeq, batch, progress, cfg.objectives
                        )
                    else:
                        vl = obj.loss_vl(params, model_cfg, batch, cfg.objectives)
                        total = vl.total
                        diag = cs.StepDiagnostics(
                            alpha=1.0, L_vl=float(total.data),
                            L_itm=vl.itm, L_mlm=vl.mlm, L_itc=vl.itc,
                        )
                    tape.backward(total)
                    grads = {n: tape.grad(p) for n, p in params.items()}
                grads = {n: g for n, g in grads.items() if g is not None}
                if grads:
                    ad.optimizer_step(state, {n: params[n] for n in grads}, grads)
                entry = {
                    "step": global_step,
                    "epoch": epoch,
                    "alpha": diag.alpha,
                    "loss": float(total.data),
                    "L_vl": diag.L_vl,
                    "L_itm": diag.L_itm,
                    "L_mlm": diag.L_mlm,
                    "L_itc": diag.L_itc,
                    "L_vl_e": diag.L_vl_e,
                    "L_sim": diag.L_sim,
                    "L_cst": diag.L_cst,
                    "L_SelfEQ": diag.L_SelfEQ,
                    "empty_roi_count": diag.empty_roi_count,
                }
                log.write(json.dumps({k: _jsonable(v) for k, v in entry.items()}) + "\n")
                global_step += 1
            ckpt = out_dir / f"epoch{epoch + 1}.ckpt"
            m.save_checkpoint(params, model_cfg, ckpt)
            checkpoints.append(ckpt)
            logger.info("epoch %d done (%d steps)", epoch + 1, global_step)
    final = out_dir / "final.ckpt"
    final.write_bytes(checkpoints[-1].read_bytes())
    return {
        "checkpoints": checkpoints,
        "final": final,
        "steps_log": log_path,
        "config": out_dir / "resolved.cfg",
        "dataset_hash": out_dir / "dataset.hash",
        "params": params,
        "model_cfg": model_cfg,
    }


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return round(float(v), 9)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v
