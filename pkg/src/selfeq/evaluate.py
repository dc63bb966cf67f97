"""Pointing-game accuracy and paraphrase self-consistency metrics.

A row scores a hit when the argmax pixel of its upsampled map falls
inside the ground-truth box (ties break at the lowest row-major index).
Rows carrying a paraphrase also contribute a pair consistency record:
the mean squared error of the pair-normalized maps and whether the two
upsampled argmaxes land in the same patch cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import explain as ex
from . import model as m
from .data import Vocabulary, load_raster, tokenize


@dataclass
class EvalReport:
    split: str
    n_total: int = 0
    n_hits: int = 0
    consistency_mse: float | None = None
    argmax_agreement: float | None = None
    n_pairs: int = 0
    degenerate_maps: int = 0
    per_sample: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.n_hits / self.n_total if self.n_total else 0.0


def pointing_hit(pixel_map: np.ndarray, gt_bbox) -> bool:
    """Argmax-inside-box test; all-zero maps argmax to (0, 0) by the tie
    rule and are counted as degenerate upstream."""
    flat = int(np.argmax(pixel_map))
    y, x = divmod(flat, pixel_map.shape[1])
    x0, y0, x1, y1 = gt_bbox
    return x0 <= x <= x1 and y0 <= y <= y1


def _argmax_cell(pixel_map: np.ndarray, patch_size: int) -> tuple[int, int]:
    flat = int(np.argmax(pixel_map))
    y, x = divmod(flat, pixel_map.shape[1])
    return (y // patch_size, x // patch_size)


def evaluate(
    params,
    cfg: m.ModelConfig,
    vocab: Vocabulary,
    rows: list[dict],
    images_root: str | Path,
    *,
    split: str,
    batch_size: int = 32,
) -> EvalReport:
    """Detached-map evaluation over one split's rows."""
    rows = sorted((r for r in rows if r["split"] == split), key=lambda r: r["sample_id"])
    if not rows:
        raise ValueError(f"no rows in split {split!r}")
    missing = [r["sample_id"] for r in rows if "gt_bbox" not in r]
    if missing:
        raise ValueError(f"rows without gt_bbox in split {split!r}: {missing[:3]}")
    images_root = Path(images_root)
    report = EvalReport(split=split)

    for start in range(0, len(rows), batch_size):
        chunk = rows[start : start + batch_size]
        images = np.stack([load_raster(images_root / r["image"]) for r in chunk])
        tokens = np.stack([tokenize(r["caption"], vocab, cfg.max_text_len) for r in chunk])
        maps = ex.gradcam_batch(params, cfg, images, tokens)
        para_idx = [i for i, r in enumerate(chunk) if r.get("paraphrase")]
        para_maps = {}
        if para_idx:
            p_tokens = np.stack(
                [tokenize(chunk[i]["paraphrase"], vocab, cfg.max_text_len) for i in para_idx]
            )
            p_grids = ex.gradcam_batch(params, cfg, images[para_idx], p_tokens)
            para_maps = dict(zip(para_idx, p_grids))

        for i, row in enumerate(chunk):
            up = ex.upsample_map(maps[i], cfg.image_size)
            hit = pointing_hit(up, row["gt_bbox"])
            degenerate = bool(maps[i].max() <= ex.DEGENERATE_EPS)
            record = {
                "sample_id": row["sample_id"],
                "hit": hit,
                "degenerate": degenerate,
            }
            report.n_total += 1
            report.n_hits += int(hit)
            report.degenerate_maps += int(degenerate)
            if i in para_maps:
                gn, gen, pair_degenerate = ex.normalize_pair_arrays(maps[i], para_maps[i])
                mse = float(np.mean((gn.astype(np.float64) - gen.astype(np.float64)) ** 2))
                up_e = ex.upsample_map(para_maps[i], cfg.image_size)
                agree = _argmax_cell(up, cfg.patch_size) == _argmax_cell(up_e, cfg.patch_size)
                record["pair_mse"] = mse
                record["pair_agree"] = bool(agree)
                record["pair_degenerate"] = bool(pair_degenerate)
                report.n_pairs += 1
            report.per_sample.append(record)

    if report.n_pairs:
        pairs = [r for r in report.per_sample if "pair_mse" in r]
        report.consistency_mse = float(np.mean([r["pair_mse"] for r in pairs]))
        report.argmax_agreement = float(np.mean([r["pair_agree"] for r in pairs]))
    return report


# ---------------------------------------------------------------------------
# canonical report serialization: sorted keys, floats at 9 significant digits


def _canon(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    if isinstance(value, str):
        import json

        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in value) + "]"
    if isinstance(value, dict):
        items = sorted(value.items())
        import json

        return "{" + ",".join(f"{json.dumps(k)}:{_canon(v)}" for k, v in items) + "}"
    raise TypeError(f"cannot serialize {type(value)}")


def report_to_dict(report: EvalReport) -> dict:
    return {
        "split": report.split,
        "pointing_accuracy": report.accuracy,
        "n_hits": report.n_hits,
        "n_total": report.n_total,
        "consistency_mse": report.consistency_mse,
        "argmax_agreement": report.argmax_agreement,
        "n_pairs": report.n_pairs,
        "degenerate_maps": report.degenerate_maps,
        "per_sample": report.per_sample,
    }


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(_canon(report_to_dict(report)) + "\n", encoding="utf-8")
