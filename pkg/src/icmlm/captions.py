"""Captions to supervision: tokens, POS tags, concept sets, label vectors, mask triplets."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .corpus import GRAMMAR_LEXICON, Dataset

MIN_TOKENS = 3
MAX_TOKENS = 25

_PUNCT = re.compile(r"[^\w\s]")


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    pos_tags: tuple[str, ...]
    caption_id: str

    def __post_init__(self):
        if len(self.tokens) != len(self.pos_tags):
            raise ValueError("tokens and pos_tags must be parallel")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class ConceptSet:
    concepts: tuple[str, ...]
    pos_filter: frozenset[str]
    origin: str  # "postag" or "cluster"
    counts: dict[str, int]
    tags: dict[str, str] = field(default_factory=dict)
    exhausted: bool = False  # fewer qualifying tokens than requested

    def __post_init__(self):
        if len(self.concepts) == 0:
            raise ValueError("concept set must be non-empty")
        if len(set(self.concepts)) != len(self.concepts):
            raise ValueError("concepts must be unique")

    def __contains__(self, token: str) -> bool:
        return token in self.counts and token in set(self.concepts)

    def index_of(self, token: str) -> int:
        return self.concepts.index(token)


@dataclass(frozen=True, eq=False)
class LabelVector:
    image_id: str
    y: np.ndarray  # length K, nonnegative, sums to 1


@dataclass(frozen=True)
class MaskTriplet:
    image_id: str
    caption_id: str
    mask_index: int
    target_vocab_id: int


class LexiconTagger:
    """POS tagging by dictionary lookup; unknown tokens get OTHER.

    Stand-in seam for an external parser on real-world captions. The
    synthetic grammar ships its exact lexicon, so tags there are exact.
    """

    def __init__(self, lexicon: dict[str, str]):
        self.lexicon = dict(lexicon)

    def tag(self, token: str) -> str:
        return self.lexicon.get(token, "OTHER")


def default_tagger() -> LexiconTagger:
    return LexiconTagger(GRAMMAR_LEXICON)


def tokenize(text: str, caption_id: str, tagger: LexiconTagger) -> TokenSequence:
    """Lowercase, strip punctuation, split on whitespace, tag each token."""
    toks = tuple(_PUNCT.sub(" ", text.lower()).split())
    return TokenSequence(tokens=toks, pos_tags=tuple(tagger.tag(t) for t in toks), caption_id=caption_id)


def tokenize_dataset(ds: Dataset, tagger: LexiconTagger | None = None):
    """Tokenize all captions, dropping length outliers and per-image duplicates.

    Returns (sequences, excluded) where sequences maps caption_id to its
    TokenSequence and excluded maps dropped caption_ids to a reason.
    """
    tagger = tagger or default_tagger()
    sequences: dict[str, TokenSequence] = {}
    excluded: dict[str, str] = {}
    seen_per_image: dict[str, set[str]] = {}
    for cap in ds.captions:
        seq = tokenize(cap.text, cap.caption_id, tagger)
        if not MIN_TOKENS <= len(seq) <= MAX_TOKENS:
            excluded[cap.caption_id] = f"length {len(seq)} outside [{MIN_TOKENS}, {MAX_TOKENS}]"
            continue
        seen = seen_per_image.setdefault(cap.image_id, set())
        key = " ".join(seq.tokens)
        if key in seen:
            excluded[cap.caption_id] = "duplicate caption for image"
            continue
        seen.add(key)
        sequences[cap.caption_id] = seq
    return sequences, excluded


def build_postag_concepts(sequences: dict[str, TokenSequence], pos_filter, k: int) -> ConceptSet:
    """The k most frequent tokens whose POS tag is in pos_filter; ties lexicographic."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pos_filter = frozenset(pos_filter)
    if not pos_filter:
        raise ValueError("pos_filter must be non-empty")
    counts: Counter[str] = Counter()
    tags: dict[str, str] = {}
    for seq in sequences.values():
        for tok, tag in zip(seq.tokens, seq.pos_tags):
            if tag in pos_filter:
                counts[tok] += 1
                tags[tok] = tag
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    if not ordered:
        raise ValueError("no tokens match the POS filter")
    chosen = tuple(ordered[:k])
    return ConceptSet(
        concepts=chosen,
        pos_filter=pos_filter,
        origin="postag",
        counts={t: counts[t] for t in chosen},
        tags={t: tags[t] for t in chosen},
        exhausted=len(ordered) < k,
    )


def _normalize(vec: np.ndarray) -> np.ndarray | None:
    total = vec.sum()
    if total <= 0:
        return None
    return (vec / total).astype(np.float64)


def build_label_vectors(ds: Dataset, sequences: dict[str, TokenSequence], cs: ConceptSet) -> list[LabelVector]:
    """Binary concept presence per image (over all its captions), normalized to sum 1.

    Images with no concept occurrences are omitted; they carry no tag signal.
    """
    index = {t: i for i, t in enumerate(cs.concepts)}
    out = []
    for im in ds.images:
        vec = np.zeros(len(cs.concepts))
        for cap in ds.captions_of(im.image_id):
            seq = sequences.get(cap.caption_id)
            if seq is None:
                continue
            for tok in seq.tokens:
                if tok in index:
                    vec[index[tok]] = 1.0
        norm = _normalize(vec)
        if norm is not None:
            out.append(LabelVector(image_id=im.image_id, y=norm))
    return out


def build_cluster_label_vectors(ds: Dataset, assignments: dict[str, int], k: int) -> list[LabelVector]:
    """Union of caption cluster one-hots per image, normalized to sum 1."""
    out = []
    for im in ds.images:
        vec = np.zeros(k)
        for cap in ds.captions_of(im.image_id):
            cl = assignments.get(cap.caption_id)
            if cl is not None:
                vec[cl] = 1.0
        norm = _normalize(vec)
        if norm is not None:
            out.append(LabelVector(image_id=im.image_id, y=norm))
    return out


def build_triplets(ds: Dataset, sequences: dict[str, TokenSequence], cs: ConceptSet, vocab):
    """One mask triplet per concept-token occurrence, in caption order.

    Returns (triplets, skipped) where skipped counts concept tokens absent
    from the vocabulary.
    """
    concept_tokens = set(cs.concepts)
    caption_image = {c.caption_id: c.image_id for c in ds.captions}
    triplets: list[MaskTriplet] = []
    skipped: Counter[str] = Counter()
    for cap in ds.captions:
        seq = sequences.get(cap.caption_id)
        if seq is None:
            continue
        for pos, tok in enumerate(seq.tokens):
            if tok not in concept_tokens:
                continue
            tid = vocab.id_of.get(tok)
            if tid is None or tid == vocab.unk_id:
                skipped[tok] += 1
                continue
            triplets.append(MaskTriplet(
                image_id=caption_image[cap.caption_id],
                caption_id=cap.caption_id,
                mask_index=pos,
                target_vocab_id=tid,
            ))
    return triplets, dict(skipped)


def save_concepts(cs: ConceptSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in cs.concepts:
            fh.write(f"{tok}\t{cs.tags.get(tok, 'CLUSTER')}\t{cs.counts[tok]}\n")


def load_concepts(path, pos_filter=(), origin="postag") -> ConceptSet:
    concepts, counts, tags = [], {}, {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            tok, tag, count = line.rstrip("\n").split("\t")
            concepts.append(tok)
            counts[tok] = int(count)
            tags[tok] = tag
    return ConceptSet(
        concepts=tuple(concepts), pos_filter=frozenset(pos_filter),
        origin=origin, counts=counts, tags=tags,
    )


def save_triplets(triplets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps({
                "image_id": t.image_id, "caption_id": t.caption_id,
                "mask_index": t.mask_index, "target_vocab_id": t.target_vocab_id,
            }) + "\n")


def load_triplets(path) -> list[MaskTriplet]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(MaskTriplet(d["image_id"], d["caption_id"], d["mask_index"], d["target_vocab_id"]))
    return out


def save_label_vectors(labels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lv in labels:
            fh.write(json.dumps({"image_id": lv.image_id, "y": [float(v) for v in lv.y]}) + "\n")


def load_label_vectors(path) -> list[LabelVector]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                y = d["y"]
                if isinstance(y, dict):  # sparse form: index -> weight
                    size = max(int(i) for i in y) + 1
                    vec = np.zeros(size)
                    for i, v in y.items():
                        vec[int(i)] = v
                else:
                    vec = np.asarray(y, dtype=np.float64)
                out.append(LabelVector(image_id=d["image_id"], y=vec))
    return out
