"""Two-level caption augmentation: phrase chunking and paraphrase generation.

Global captions are chunked into object-centric phrases; captions are then
paraphrased by substituting the primary object noun with a synonym while
every other token is retained. The default backend is the bundled lexicon;
an optional HTTP text-completion endpoint can be used instead, with the
lexicon as fallback on any failure.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

_WORD_RE = re.compile(r"[a-z0-9]+")

# tokens that terminate a determiner+modifiers+noun span when walking left
_BOUNDARY_WORDS = {
    "and", "or", "with", "of", "in", "at", "on", "to", "near", "above",
    "below", "beside", "under", "over", "there", "is", "are",
}


def words(text: str) -> list[str]:
    """Lowercase word tokens; commas count as coordination boundaries."""
    return _WORD_RE.findall(text.lower().replace(",", " and "))


@dataclass
class LexiconEntry:
    head: str
    synonyms: list[str] = field(default_factory=list)
    antonyms: list[str] = field(default_factory=list)
    hypernyms: list[str] = field(default_factory=list)
    meronyms: list[str] = field(default_factory=list)
    abstract: bool = False


class Lexicon:
    """Head-noun relation table with a symmetric synonym closure."""

    def __init__(self, entries: dict[str, LexiconEntry]):
        self.entries = entries
        self._close_synonyms()
        self._validate()

    def _close_synonyms(self):
        groups: list[set[str]] = []
        for e in self.entries.values():
            if e.synonyms:
                groups.append({e.head, *e.synonyms})
        for group in groups:
            proto = next(self.entries[w] for w in group if w in self.entries)
            for w in sorted(group):
                if w not in self.entries:
                    self.entries[w] = LexiconEntry(
                        head=w,
                        antonyms=list(proto.antonyms),
                        hypernyms=list(proto.hypernyms),
                        meronyms=list(proto.meronyms),
                    )
                self.entries[w].synonyms = sorted(group - {w})

    def _validate(self):
        for e in self.entries.values():
            if e.head in e.synonyms:
                raise ValueError(f"lexicon entry {e.head!r} lists itself as a synonym")
            if e.abstract and (e.synonyms or e.antonyms or e.hypernyms or e.meronyms):
                raise ValueError(f"abstract noun {e.head!r} must have empty relations")
            for s in e.synonyms:
                if e.head not in self.entries[s].synonyms:
                    raise ValueError(f"synonym relation {e.head!r}->{s!r} not symmetric")

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> LexiconEntry:
        return self.entries[word]

    def is_abstract(self, word: str) -> bool:
        return word in self.entries and self.entries[word].abstract

    def heads(self) -> list[str]:
        return sorted(self.entries)

    def synonym_groups(self) -> list[set[str]]:
        """Disjoint synonym groups (each group sorted into a set)."""
        seen, groups = set(), []
        for head in sorted(self.entries):
            if head in seen or not self.entries[head].synonyms:
                continue
            group = {head, *self.entries[head].synonyms}
            seen |= group
            groups.append(group)
        return groups


def load_lexicon(path: str | Path | None = None) -> Lexicon:
    """Load the bundled lexicon asset, or a lexicon file of the same format."""
    if path is None:
        text = resources.files("selfeq.assets").joinpath("lexicon.txt").read_text()
    else:
        text = Path(path).read_text()
    entries = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = [c.strip() for c in line.split("|")]
        if len(cols) != 6:
            raise ValueError(f"malformed lexicon line: {line!r}")
        head, syn, ant, hyp, mer, flags = cols
        split = lambda s: [w.strip() for w in s.split(",") if w.strip()]
        entries[head] = LexiconEntry(
            head=head,
            synonyms=split(syn),
            antonyms=split(ant),
            hypernyms=split(hyp),
            meronyms=split(mer),
            abstract="abstract" in split(flags),
        )
    return Lexicon(entries)


# ---------------------------------------------------------------------------
# chunking


def chunk_caption(caption: str, lexicon: Lexicon, mode: str = "object_centric") -> list[str]:
    """Extract object-centric phrase spans from a caption.

    object_centric: one determiner+modifiers+noun span per head noun, with
    abstract-headed spans dropped. long_phrase: a single phrase that keeps
    the simple composition intact, minus abstract spans and their
    connectives. A caption with no recognized noun yields an empty list.
    """
    if mode not in ("object_centric", "long_phrase"):
        raise ValueError(f"unknown chunking mode {mode!r}")
    toks = words(caption)
    spans = []  # (start, end_inclusive, head)
    for i, tok in enumerate(toks):
        if tok not in lexicon:
            continue
        start = i
        while start > 0:
            prev = toks[start - 1]
            if prev in _BOUNDARY_WORDS or prev in lexicon:
                break
            start -= 1
        spans.append((start, i, tok))
    if not spans:
        return []
    if mode == "object_centric":
        return [
            " ".join(toks[s : e + 1])
            for s, e, head in spans
            if not lexicon.is_abstract(head)
        ]
    # long_phrase: drop abstract spans plus one adjacent connective
    drop = set()
    for s, e, head in spans:
        if not lexicon.is_abstract(head):
            continue
        drop.update(range(s, e + 1))
        if e + 1 < len(toks) and toks[e + 1] in _BOUNDARY_WORDS:
            drop.add(e + 1)
        elif s > 0 and toks[s - 1] in _BOUNDARY_WORDS:
            drop.add(s - 1)
    kept = [t for i, t in enumerate(toks) if i not in drop]
    return [" ".join(kept)] if kept else []


# ---------------------------------------------------------------------------
# paraphrase generation


@dataclass
class ParaphraseRecord:
    group: str
    synonym: str
    antonym: str
    hypernym: str
    meronym: str
    paraphrase: str
    source: str  # "lexicon" | "endpoint"


@dataclass
class ParaphraseFailure:
    reason: str
    raw: str = ""


def substitution_is_local(source: str, paraphrase: str, group: str, synonym: str) -> bool:
    """True iff the two texts differ in exactly one token: group -> synonym."""
    a, b = words(source), words(paraphrase)
    if len(a) != len(b):
        return False
    diffs = [i for i, (x, y) in enumerate(zip(a, b)) if x != y]
    return len(diffs) == 1 and a[diffs[0]] == group and b[diffs[0]] == synonym


def _replace_last_word(text: str, word: str, replacement: str) -> str:
    matches = list(re.finditer(rf"\b{re.escape(word)}\b", text.lower()))
    if not matches:
        raise ValueError(f"word {word!r} not found in {text!r}")
    m = matches[-1]
    return text[: m.start()] + replacement + text[m.end() :]


def paraphrase(
    text: str,
    lexicon: Lexicon,
    seed: int = 0,
    group: str | None = None,
) -> ParaphraseRecord | ParaphraseFailure:
    """Substitute the primary object (last lexicon head noun) with a synonym.

    Returns a failure when no head noun is present or the head has no
    synonyms; callers route such captions as paraphrase-absent.
    """
    import numpy as np

    toks = words(text)
    if group is None:
        heads = [t for t in toks if t in lexicon]
        if not heads:
            return ParaphraseFailure("no-head-noun")
        group = heads[-1]
    elif group not in toks:
        return ParaphraseFailure(f"group {group!r} not in caption")
    entry = lexicon[group]
    if not entry.synonyms:
        return ParaphraseFailure("empty-synonym-list")
    rng = np.random.default_rng((seed, 0xC0FFEE))
    synonym = entry.synonyms[int(rng.integers(len(entry.synonyms)))]
    rewritten = _replace_last_word(text, group, synonym)
    return ParaphraseRecord(
        group=group,
        synonym=synonym,
        antonym=entry.antonyms[0] if entry.antonyms else "",
        hypernym=entry.hypernyms[0] if entry.hypernyms else "",
        meronym=entry.meronyms[0] if entry.meronyms else "",
        paraphrase=rewritten,
        source="lexicon",
    )


# ---------------------------------------------------------------------------
# prompt templates and the endpoint client


@dataclass
class PromptTemplate:
    task: str  # chunking | paraphrase_region | paraphrase_phrase | chunking_long
    examples: list[tuple[str, str]]

    def render(self, query: str) -> str:
        parts = [f"Q: {q}\nA: {a}" for q, a in self.examples]
        parts.append(f"Q: {query}\nA:")
        return "\n".join(parts)


def _answer(group, synonym, antonym, hypernym, meronym, para) -> str:
    return (
        f"group: {group}; synonym: {synonym}; antonym: {antonym}; "
        f"hypernym: {hypernym}; meronym: {meronym}; paraphrase: {para}"
    )


CHUNK_TEMPLATE = PromptTemplate(
    task="chunking",
    examples=[
        ("a scene with a red circle and a blue square", "a red circle, a blue square"),
        ("a photo of a green triangle", "a green triangle"),
        ("an image of a purple ring next to a yellow cross", "a purple ring, a yellow cross"),
    ],
)

CHUNK_LONG_TEMPLATE = PromptTemplate(
    task="chunking_long",
    examples=[
        ("a scene with a red circle and a blue square", "a red circle and a blue square"),
        ("a photo of a green triangle on the left", "a green triangle on the left"),
    ],
)

PARAPHRASE_REGION_TEMPLATE = PromptTemplate(
    task="paraphrase_region",
    examples=[
        (
            "a red circle in the top left",
            _answer("circle", "disc", "square", "shape", "arc", "a red disc in the top left"),
        ),
        (
            "there is a blue square near the bottom",
            _answer("square", "box", "circle", "shape", "corner", "there is a blue box near the bottom"),
        ),
        (
            "a purple ring",
            _answer("ring", "hoop", "", "shape", "rim", "a purple hoop"),
        ),
        (
            "the yellow cross is drawn beside a green triangle",
            _answer("triangle", "wedge", "", "shape", "vertex", "the yellow cross is drawn beside a green wedge"),
        ),
    ],
)

PARAPHRASE_PHRASE_TEMPLATE = PromptTemplate(
    task="paraphrase_phrase",
    examples=[
        ("a red circle", _answer("circle", "disc", "square", "shape", "arc", "a red disc")),
        ("a green triangle", _answer("triangle", "trigon", "", "shape", "vertex", "a green trigon")),
    ],
)

TEMPLATES = {
    t.task: t
    for t in (
        CHUNK_TEMPLATE,
        CHUNK_LONG_TEMPLATE,
        PARAPHRASE_REGION_TEMPLATE,
        PARAPHRASE_PHRASE_TEMPLATE,
    )
}


def render_prompt(template: PromptTemplate, query: str) -> str:
    return template.render(query)


def parse_answer(raw: str, source_caption: str) -> ParaphraseRecord | ParaphraseFailure:
    """Parse a structured answer block and enforce the substitution invariant."""
    fields = {}
    for part in raw.strip().split(";"):
        if ":" not in part:
            continue
        key, _, value = part.partition(":")
        fields[key.strip().lower()] = value.strip()
    if "group" not in fields or "paraphrase" not in fields:
        return ParaphraseFailure("missing group/paraphrase field", raw=raw)
    group = fields["group"]
    synonym = fields.get("synonym", "")
    para = fields["paraphrase"]
    if not substitution_is_local(source_caption, para, group, synonym):
        return ParaphraseFailure("substitution not local", raw=raw)
    return ParaphraseRecord(
        group=group,
        synonym=synonym,
        antonym=fields.get("antonym", ""),
        hypernym=fields.get("hypernym", ""),
        meronym=fields.get("meronym", ""),
        paraphrase=para,
        source="endpoint",
    )


@dataclass
class EndpointConfig:
    url: str
    timeout_s: float = 10.0
    retries: int = 1
    concurrency: int = 4
    max_tokens: int = 128


def endpoint_paraphrase(
    cfg: EndpointConfig,
    phrase: str,
    lexicon: Lexicon,
    seed: int = 0,
    template: PromptTemplate = PARAPHRASE_REGION_TEMPLATE,
) -> ParaphraseRecord | ParaphraseFailure:
    """Query the completion endpoint; fall back to the lexicon on any failure."""
    import requests

    body = {
        "prompt": render_prompt(template, phrase),
        "max_tokens": cfg.max_tokens,
        "temperature": 0,
        "stop": ["Q:"],
    }
    last_reason = "no attempt"
    for _ in range(max(1, cfg.retries)):
        try:
            resp = requests.post(cfg.url, json=body, timeout=cfg.timeout_s)
            if resp.status_code // 100 != 2:
                last_reason = f"http {resp.status_code}"
                continue
            result = parse_answer(resp.json().get("text", ""), phrase)
            if isinstance(result, ParaphraseRecord):
                return result
            last_reason = result.reason
        except Exception as e:  # noqa: BLE001 -- endpoint failures are non-fatal
            last_reason = f"{type(e).__name__}"
    fallback = paraphrase(phrase, lexicon, seed=seed)
    if isinstance(fallback, ParaphraseRecord):
        fallback.source = "lexicon"
    return fallback


# ---------------------------------------------------------------------------
# dataset-level augmentation


@dataclass
class CoverageReport:
    total: int = 0
    succeeded: int = 0
    skipped: int = 0
    failures: dict = field(default_factory=dict)

    @property
    def coverage(self) -> float:
        return self.succeeded / self.total if self.total else 0.0

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "succeeded": self.succeeded,
            "skipped": self.skipped,
            "coverage": self.coverage,
            "failures": dict(sorted(self.failures.items())),
        }


def _augment_row(row, lexicon, mode, seed, index, endpoint):
    caption = row["caption"]
    group = None
    if row.get("caption_kind") == "global":
        chunks = chunk_caption(caption, lexicon, mode=mode)
        if not chunks:
            return ParaphraseFailure("no-object-phrase")
        chunk_heads = [t for t in words(chunks[-1]) if t in lexicon]
        group = chunk_heads[-1]
    if endpoint is not None:
        template = (
            PARAPHRASE_REGION_TEMPLATE
            if row.get("caption_kind") == "region"
            else PARAPHRASE_PHRASE_TEMPLATE
        )
        return endpoint_paraphrase(
            endpoint, caption, lexicon, seed=seed + index, template=template
        )
    return paraphrase(caption, lexicon, seed=seed + index, group=group)


def augment_dataset(
    in_path: str | Path,
    out_path: str | Path,
    mode: str = "object_centric",
    seed: int = 0,
    lexicon: Lexicon | None = None,
    endpoint: EndpointConfig | None = None,
) -> CoverageReport:
    """Attach `paraphrase`/`paraphrase_meta` fields to every row they fit.

    Rows whose caption cannot be paraphrased stay unchanged and count as
    failures; unreadable rows are skipped and counted.
    """
    from .data import read_dataset_lenient, write_dataset  # local: avoids import cycle

    lexicon = lexicon or load_lexicon()
    report = CoverageReport()
    rows, skipped = read_dataset_lenient(in_path)
    report.skipped = skipped

    def work(item):
        i, row = item
        try:
            return i, _augment_row(row, lexicon, mode, seed, i, endpoint)
        except Exception as e:  # noqa: BLE001 -- per-row isolation
            return i, ParaphraseFailure(f"error: {type(e).__name__}")

    if endpoint is not None and endpoint.concurrency > 1:
        with ThreadPoolExecutor(max_workers=endpoint.concurrency) as pool:
            results = list(pool.map(work, enumerate(rows)))
    else:
        results = [work(item) for item in enumerate(rows)]

    for i, outcome in results:
        report.total += 1
        if isinstance(outcome, ParaphraseRecord):
            report.succeeded += 1
            rows[i] = dict(rows[i])
            rows[i]["paraphrase"] = outcome.paraphrase
            rows[i]["paraphrase_meta"] = {
                "group": outcome.group,
                "synonym": outcome.synonym,
                "antonym": outcome.antonym,
                "hypernym": outcome.hypernym,
                "meronym": outcome.meronym,
                "source": outcome.source,
            }
        else:
            report.failures[outcome.reason] = report.failures.get(outcome.reason, 0) + 1

    write_dataset(rows, out_path)
    return report
