"""Seeded synthetic grounding benchmark.

Scenes are solid colored shapes on a dark background, rasterized by
analytic membership at integer pixel centers. Captions are templated:
region captions name one object (color + shape + coarse location), global
captions enumerate the scene under an abstract-noun preamble. Ground-truth
boxes ride along in the same JSONL but are stripped by the training
loader; held-out synonyms appear in no training caption.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as aug

CLS_ID, MASK_ID, PAD_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ["[CLS]", "[MASK]", "[PAD]", "[UNK]"]

SHAPE_WORDS = ["circle", "square", "triangle", "cross", "ring"]
COLOR_WORDS = ["red", "green", "blue", "yellow", "purple"]
LOCATION_WORDS = ["top", "bottom", "left", "right", "center"]

COLOR_RGB = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.1),
    "blue": (0.15, 0.2, 0.95),
    "yellow": (0.95, 0.85, 0.1),
    "purple": (0.6, 0.15, 0.8),
}
# black background: pooled image features then carry object content only,
# which keeps the matching signal from drowning in a shared constant
BACKGROUND_RGB = (0.0, 0.0, 0.0)

_TEMPLATE_WORDS = [
    "a", "an", "the", "in", "at", "on", "of", "with", "and", "there", "is",
    "near", "above", "below", "beside", "under", "over",
    "photo", "image", "scene", "picture",
]

FIELD_ORDER = [
    "sample_id", "image", "caption_kind", "caption",
    "paraphrase", "paraphrase_meta", "gt_bbox", "split",
]


# ---------------------------------------------------------------------------
# vocabulary and tokenizer


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]
    synonym_groups: list[frozenset[str]]
    heldout: frozenset[str]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def group_of(self, token: str) -> frozenset[str] | None:
        for g in self.synonym_groups:
            if token in g:
                return g
        return None


def build_vocabulary(lexicon: aug.Lexicon | None = None) -> Vocabulary:
    """Vocabulary over the caption templates plus every lexicon word.

    Held-out synonyms (every group member that is not a renderable shape
    word) are embeddable but barred from training captions.
    """
    lexicon = lexicon or aug.load_lexicon()
    vocab_words = set(_TEMPLATE_WORDS) | set(COLOR_WORDS) | set(LOCATION_WORDS)
    vocab_words |= set(SHAPE_WORDS)
    for e in lexicon.entries.values():
        vocab_words.add(e.head)
        vocab_words.update(e.synonyms + e.antonyms + e.hypernyms + e.meronyms)
    groups = [frozenset(g) for g in lexicon.synonym_groups()]
    heldout = frozenset(w for g in groups for w in g) - frozenset(SHAPE_WORDS)
    id_to_token = RESERVED + sorted(vocab_words)
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    for g in groups:
        assert sum(1 for other in groups if g & other) == 1, "groups must partition"
    return Vocabulary(token_to_id, id_to_token, groups, frozenset(heldout))


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """[CLS]-prefixed, [PAD]-suffixed int32 ids of length max_len."""
    ids = [CLS_ID] + [vocab.id_of(w) for w in aug.words(text)][: max_len - 1]
    ids += [PAD_ID] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int32)


def detokenize(ids, vocab: Vocabulary) -> str:
    out = []
    for i in np.asarray(ids).tolist():
        if i in (CLS_ID, PAD_ID):
            continue
        out.append(vocab.id_to_token[i] if 0 <= i < len(vocab.id_to_token) else "[UNK]")
    return " ".join(out)


# ---------------------------------------------------------------------------
# scenes and rendering


@dataclass
class SceneObject:
    shape: str
    color: str
    size: int  # radius, pixels
    center: tuple[int, int]  # (x, y)
    bbox: tuple[int, int, int, int] = (0, 0, 0, 0)  # (x0, y0, x1, y1) inclusive


@dataclass
class Scene:
    objects: list[SceneObject]
    image_size: int = 64
    background: tuple[float, float, float] = BACKGROUND_RGB
    image: np.ndarray | None = None


def shape_mask(obj: SceneObject, size: int) -> np.ndarray:
    """Boolean membership of integer pixel centers in the shape."""
    yy, xx = np.mgrid[0:size, 0:size]
    cx, cy, r = obj.center[0], obj.center[1], obj.size
    dx, dy = xx - cx, yy - cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if obj.shape == "triangle":
        # upright triangle: apex (cx, cy-r), base corners (cx -+ 0.95r, cy + 0.8r)
        x0, y0 = cx, cy - r
        x1, y1 = cx - 0.95 * r, cy + 0.8 * r
        x2, y2 = cx + 0.95 * r, cy + 0.8 * r

        def side(ax, ay, bx, by):
            return (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)

        d0, d1, d2 = side(x0, y0, x1, y1), side(x1, y1, x2, y2), side(x2, y2, x0, y0)
        return (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
    if obj.shape == "cross":
        t = max(1, int(round(0.35 * r)))
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= t) & (np.abs(dx) <= r)
        )
    if obj.shape == "ring":
        d2_ = dx * dx + dy * dy
        inner = 0.55 * r
        return (d2_ <= r * r) & (d2_ >= inner * inner)
    raise ValueError(f"unknown shape {obj.shape!r}")


def render_scene(scene: Scene) -> np.ndarray:
    img = np.empty((scene.image_size, scene.image_size, 3), dtype=np.float32)
    img[:] = scene.background
    for obj in scene.objects:
        mask = shape_mask(obj, scene.image_size)
        img[mask] = COLOR_RGB[obj.color]
    scene.image = img
    return img


def tight_bbox(obj: SceneObject, size: int) -> tuple[int, int, int, int]:
    mask = shape_mask(obj, size)
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def bbox_iou(a, b) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0, ix1 - ix0 + 1), max(0, iy1 - iy0 + 1)
    inter = iw * ih
    area = lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1)
    union = area(a) + area(b) - inter
    return inter / union if union else 0.0


# slot grid: two jittered slots per quadrant plus one center slot; any two
# slots keep bbox IoU < 0.1 for radii up to 8 (7 at the center)
_QUADRANTS = [(0, 0), (1, 0), (0, 1), (1, 1)]


def _slot_center(rng, quadrant, slot_idx, image_size) -> tuple[int, int]:
    half = image_size // 2
    base = (10, 10) if slot_idx == 0 else (half - 10, half - 10)
    jitter = rng.integers(-1, 2, size=2)
    qx, qy = quadrant
    return (
        int(qx * half + base[0] + jitter[0]),
        int(qy * half + base[1] + jitter[1]),
    )


def _location_phrase(obj: SceneObject, image_size: int) -> str:
    half = image_size // 2
    cx, cy = obj.center
    if abs(cx - half) <= 6 and abs(cy - half) <= 6:
        return "center"
    return f"{'top' if cy < half else 'bottom'} {'left' if cx < half else 'right'}"


# ---------------------------------------------------------------------------
# dataset generation


_GLOBAL_PREAMBLES = ["a scene with", "a photo of", "an image of", "a picture of"]


def _object_phrase(obj: SceneObject) -> str:
    return f"a {obj.color} {obj.shape}"


def _region_caption(obj: SceneObject, image_size: int) -> str:
    return f"{_object_phrase(obj)} in the {_location_phrase(obj, image_size)}"


def _global_caption(scene: Scene, rng) -> str:
    preamble = _GLOBAL_PREAMBLES[int(rng.integers(len(_GLOBAL_PREAMBLES)))]
    return f"{preamble} " + " and ".join(_object_phrase(o) for o in scene.objects)


def _distinct_pairs(rng, n: int) -> list[tuple[str, str]]:
    pairs = [(c, s) for c in COLOR_WORDS for s in SHAPE_WORDS]
    idx = rng.choice(len(pairs), size=n, replace=False)
    return [pairs[i] for i in idx]


def _finalize(scene: Scene) -> Scene:
    for obj in scene.objects:
        obj.bbox = tight_bbox(obj, scene.image_size)
    boxes = [o.bbox for o in scene.objects]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if bbox_iou(boxes[i], boxes[j]) >= 0.1:
                raise RuntimeError("slot geometry violated the IoU bound")
    render_scene(scene)
    return scene


def _hard_scene(rng, image_size: int, n_extra: int = 1) -> tuple[Scene, int]:
    """Target plus a same-color distractor in the same quadrant, a
    same-shape distractor elsewhere, and `n_extra` unrelated objects:
    neither the color bag, the shape bag, nor color+location alone
    resolves the caption, so the shape word is load-bearing."""
    q_idx = int(rng.integers(4))
    color = COLOR_WORDS[int(rng.integers(len(COLOR_WORDS)))]
    shape, alt_shape = (SHAPE_WORDS[int(i)] for i in rng.choice(len(SHAPE_WORDS), 2, replace=False))
    other_colors = [c for c in COLOR_WORDS if c != color]
    alt_color = other_colors[int(rng.integers(len(other_colors)))]
    slot_order = [int(s) for s in rng.permutation(2)]
    far_q = [q for q in range(4) if q != q_idx][int(rng.integers(3))]
    far_slot = int(rng.integers(2))
    objs = [
        SceneObject(shape, color, int(rng.integers(5, 9)),
                    _slot_center(rng, _QUADRANTS[q_idx], slot_order[0], image_size)),
        SceneObject(alt_shape, color, int(rng.integers(5, 9)),
                    _slot_center(rng, _QUADRANTS[q_idx], slot_order[1], image_size)),
        SceneObject(shape, alt_color, int(rng.integers(5, 9)),
                    _slot_center(rng, _QUADRANTS[far_q], far_slot, image_size)),
    ]
    free_slots = [
        (q, s) for q in range(4) for s in range(2)
        if q != q_idx and (q, s) != (far_q, far_slot)
    ]
    used_pairs = {(o.color, o.shape) for o in objs}
    for _ in range(n_extra):
        slot = free_slots.pop(int(rng.integers(len(free_slots))))
        for _ in range(10):
            c = COLOR_WORDS[int(rng.integers(len(COLOR_WORDS)))]
            s = SHAPE_WORDS[int(rng.integers(len(SHAPE_WORDS)))]
            if (c, s) not in used_pairs:
                used_pairs.add((c, s))
                objs.append(
                    SceneObject(s, c, int(rng.integers(5, 9)),
                                _slot_center(rng, _QUADRANTS[slot[0]], slot[1], image_size))
                )
                break
    return Scene(objs, image_size=image_size), 0  # target index 0


def _diverse_scene(rng, image_size: int, n_objects: int) -> tuple[Scene, int]:
    """Objects with pairwise-distinct colors and shapes: the content bags
    overlap heavily across scenes, so matching must read bindings."""
    slots = [(q, s) for q in range(4) for s in range(2)] + [("center", 0)]
    idx = rng.choice(len(slots), size=n_objects, replace=False)
    colors = [COLOR_WORDS[int(i)] for i in rng.choice(len(COLOR_WORDS), n_objects, replace=False)]
    shapes = [SHAPE_WORDS[int(i)] for i in rng.choice(len(SHAPE_WORDS), n_objects, replace=False)]
    objs = []
    half = image_size // 2
    for slot_i, color, shape in zip(idx, colors, shapes):
        q, s = slots[int(slot_i)]
        if q == "center":
            jitter = rng.integers(-1, 2, size=2)
            center = (half + int(jitter[0]), half + int(jitter[1]))
            radius = int(rng.integers(5, 8))
        else:
            center = _slot_center(rng, _QUADRANTS[q], s, image_size)
            radius = int(rng.integers(5, 9))
        objs.append(SceneObject(shape, color, radius, center))
    return Scene(objs, image_size=image_size), int(rng.integers(n_objects))


def _attach_paraphrase(row: dict, lexicon: aug.Lexicon, seed: int) -> None:
    group = None
    if row["caption_kind"] == "global":
        chunks = aug.chunk_caption(row["caption"], lexicon, mode="object_centric")
        if not chunks:
            return
        group = [t for t in aug.words(chunks[-1]) if t in lexicon][-1]
    rec = aug.paraphrase(row["caption"], lexicon, seed=seed, group=group)
    if isinstance(rec, aug.ParaphraseRecord):
        row["paraphrase"] = rec.paraphrase
        row["paraphrase_meta"] = {
            "group": rec.group,
            "synonym": rec.synonym,
            "antonym": rec.antonym,
            "hypernym": rec.hypernym,
            "meronym": rec.meronym,
            "source": rec.source,
        }


def _eval_row(rng, i: int, split: str, image_size: int, lexicon: aug.Lexicon) -> tuple[dict, Scene]:
    scene, target_idx = _hard_scene(rng, image_size, n_extra=1)
    scene = _finalize(scene)
    target = scene.objects[target_idx]
    caption = _region_caption(target, image_size)
    row = {
        "sample_id": f"{split}-{i:06d}",
        "caption_kind": "region",
        "caption": caption,
        "gt_bbox": list(target.bbox),
        "split": split,
    }
    synonyms = lexicon[target.shape].synonyms
    synonym = synonyms[int(rng.integers(len(synonyms)))]
    rewritten = aug._replace_last_word(caption, target.shape, synonym)
    meta = {
        "group": target.shape, "synonym": synonym,
        "antonym": lexicon[target.shape].antonyms[0] if lexicon[target.shape].antonyms else "",
        "hypernym": lexicon[target.shape].hypernyms[0] if lexicon[target.shape].hypernyms else "",
        "meronym": lexicon[target.shape].meronyms[0] if lexicon[target.shape].meronyms else "",
        "source": "lexicon",
    }
    if split == "eval_heldout":
        # caption uses the held-out synonym; the base phrasing is the paraphrase
        row["caption"], row["paraphrase"] = rewritten, caption
        meta = dict(meta, group=synonym, synonym=target.shape)
    else:
        row["paraphrase"] = rewritten
    row["paraphrase_meta"] = meta
    return row, scene


def generate_dataset(
    out_dir: str | Path,
    seed: int,
    n_train: int,
    n_eval: int,
    *,
    image_size: int = 64,
    region_fraction: float = 0.8,
    paraphrase_fraction: float = 0.5,
    hard_fraction: float = 0.5,
    lexicon: aug.Lexicon | None = None,
) -> Path:
    """Write `data.jsonl` plus per-sample rasters under `out_dir`."""
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    lexicon = lexicon or aug.load_lexicon()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []

    def emit(row: dict, scene: Scene):
        rel = f"images/{row['sample_id']}.rgb"
        (out_dir / rel).write_bytes(scene.image.astype("<f4").tobytes())
        row["image"] = rel
        rows.append(row)

    for i in range(n_train):
        for attempt in range(4):
            rng = np.random.default_rng((seed, 1, i, attempt))
            try:
                is_region = rng.random() < region_fraction
                if is_region and rng.random() < hard_fraction:
                    scene, t_idx = _hard_scene(rng, image_size, n_extra=1)
                elif is_region:
                    scene, t_idx = _diverse_scene(rng, image_size, n_objects=int(rng.integers(1, 5)))
                else:
                    # global captions enumerate every object; cap at 3 so the
                    # caption fits max_text_len
                    scene, t_idx = _diverse_scene(rng, image_size, n_objects=3)
                scene = _finalize(scene)
                break
            except RuntimeError:
                continue
        else:
            raise RuntimeError(f"could not place train scene {i}")
        if is_region:
            caption = _region_caption(scene.objects[t_idx], image_size)
            kind = "region"
        else:
            caption = _global_caption(scene, rng)
            kind = "global"
        row = {
            "sample_id": f"tr-{i:06d}",
            "caption_kind": kind,
            "caption": caption,
            "split": "train",
        }
        if rng.random() < paraphrase_fraction:
            _attach_paraphrase(row, lexicon, seed=int(rng.integers(1 << 31)))
        emit(row, scene)

    for split, code in (("eval_seen", 2), ("eval_heldout", 3)):
        for i in range(n_eval):
            rng = np.random.default_rng((seed, code, i))
            row, scene = _eval_row(rng, i, split, image_size, lexicon)
            emit(row, scene)

    path = out_dir / "data.jsonl"
    write_dataset(rows, path)
    return path


# ---------------------------------------------------------------------------
# persistence


class DatasetError(ValueError):
    pass


_REQUIRED_FIELDS = ("sample_id", "image", "caption_kind", "caption", "split")


def _canonical_row(row: dict) -> dict:
    extra = [k for k in row if k not in FIELD_ORDER]
    if extra:
        raise DatasetError(f"unknown fields {extra}")
    out = {k: row[k] for k in FIELD_ORDER if k in row}
    if "paraphrase_meta" in out:
        out["paraphrase_meta"] = dict(sorted(out["paraphrase_meta"].items()))
    return out


def write_dataset(rows, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            for f in _REQUIRED_FIELDS:
                if f not in row:
                    raise DatasetError(f"row {row.get('sample_id')!r} missing field {f!r}")
            fh.write(json.dumps(_canonical_row(row), separators=(",", ":")) + "\n")


def _validated(obj, lineno: int) -> dict:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: not a JSON object")
    for f in _REQUIRED_FIELDS:
        if f not in obj:
            raise DatasetError(f"line {lineno}: missing required field {f!r}")
    return obj


def read_dataset(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: malformed JSON ({e.msg})") from e
            rows.append(_validated(obj, lineno))
    return rows


def read_dataset_lenient(path: str | Path) -> tuple[list[dict], int]:
    """Like read_dataset but skips and counts malformed lines."""
    rows, skipped = [], 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(_validated(json.loads(line), lineno))
            except (json.JSONDecodeError, DatasetError):
                skipped += 1
    return rows, skipped


def load_raster(path: str | Path) -> np.ndarray:
    buf = np.fromfile(str(path), dtype="<f4")
    side = int(round(math.sqrt(buf.size / 3)))
    if side * side * 3 != buf.size:
        raise DatasetError(f"raster {path} is not a square HxWx3 float32 image")
    return buf.reshape(side, side, 3)


def load_training_rows(path: str | Path, lexicon: aug.Lexicon | None = None) -> list[dict]:
    """Training view of the dataset: split == train, gt boxes stripped,
    paraphrase locality re-checked."""
    lexicon = lexicon or aug.load_lexicon()
    rows = [dict(r) for r in read_dataset(path) if r["split"] == "train"]
    for row in rows:
        row.pop("gt_bbox", None)
        if "paraphrase" in row:
            meta = row.get("paraphrase_meta") or {}
            if not aug.substitution_is_local(
                row["caption"], row["paraphrase"], meta.get("group", ""), meta.get("synonym", "")
            ):
                raise DatasetError(
                    f"row {row['sample_id']}: paraphrase is not a single lexicon-licensed substitution"
                )
    assert all("gt_bbox" not in r for r in rows)
    return rows
