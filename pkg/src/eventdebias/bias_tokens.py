"""Event-specific token identification, counterfactual inputs, and masking.

Bias spans live on pre-token indices. Identification is rule-based by default
(hashtags, numerals, capitalized runs as a stand-in for NER) with an optional
external tagger over HTTP; when the tagger is unreachable the rules take over
and the result is flagged as degraded rather than silently emptied.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Sequence

import requests

from .corpus import Post
from .tokenization import CLS, MASK, SEP

CATEGORY_ENTITY = "entity"
CATEGORY_HASHTAG = "hashtag"
CATEGORY_NUMERAL = "numeral"
CATEGORY_MENTION = "mention"

# overlap resolution order; first listed wins
CATEGORY_PRIORITY = (CATEGORY_ENTITY, CATEGORY_HASHTAG, CATEGORY_MENTION, CATEGORY_NUMERAL)

_HASHTAG_RE = re.compile(r"^#\w+$")
_MENTION_RE = re.compile(r"^@\w+$")
_NUMERAL_RE = re.compile(r"\d")
_SENTENCE_END = {".", "!", "?"}


@dataclass(frozen=True)
class BiasSpan:
    start: int
    end: int  # exclusive
    category: str
    surface: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end})")

    def overlaps(self, other: "BiasSpan") -> bool:
        return self.start < other.end and other.start < self.end


@dataclass(frozen=True)
class BiasTokenSet:
    post_id: str
    spans: tuple[BiasSpan, ...]
    degraded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple(self.spans))
        prev_end = -1
        for span in self.spans:
            if span.start < prev_end:
                raise ValueError("bias spans must be sorted and non-overlapping")
            prev_end = span.end

    def surfaces(self) -> list[str]:
        return [span.surface for span in self.spans]


@dataclass
class TaggerConfig:
    entities: bool = True
    hashtags: bool = True
    numerals: bool = True
    mentions: bool = False
    endpoint: str | None = None  # external NER service; rules are the fallback
    timeout: float = 2.0

    def __post_init__(self):
        if not (self.entities or self.hashtags or self.numerals or self.mentions):
            raise ValueError("at least one bias-token category must be enabled")


def _rule_entity_spans(tokens: Sequence[str]) -> list[BiasSpan]:
    """Capitalized non-sentence-initial token runs."""
    spans: list[BiasSpan] = []
    i = 0
    n = len(tokens)
    while i < n:
        sentence_initial = i == 0 or tokens[i - 1] in _SENTENCE_END
        if sentence_initial or not tokens[i][:1].isupper():
            i += 1
            continue
        j = i + 1
        while j < n and tokens[j][:1].isupper():
            j += 1
        spans.append(BiasSpan(i, j, CATEGORY_ENTITY, " ".join(tokens[i:j])))
        i = j
    return spans


def _rule_token_spans(tokens: Sequence[str], pattern: re.Pattern,
                      category: str, full_match: bool) -> list[BiasSpan]:
    spans = []
    for i, tok in enumerate(tokens):
        hit = pattern.fullmatch(tok) if full_match else pattern.search(tok)
        if hit:
            spans.append(BiasSpan(i, i + 1, category, tok))
    return spans


def _resolve_overlaps(candidates: list[BiasSpan]) -> tuple[BiasSpan, ...]:
    rank = {cat: r for r, cat in enumerate(CATEGORY_PRIORITY)}
    kept: list[BiasSpan] = []
    for span in sorted(candidates, key=lambda s: (rank[s.category], s.start, -s.end)):
        if not any(span.overlaps(k) for k in kept):
            kept.append(span)
    return tuple(sorted(kept, key=lambda s: s.start))


def _query_external_tagger(tokens: Sequence[str], cfg: TaggerConfig) -> list[BiasSpan]:
    resp = requests.post(cfg.endpoint, json={"tokens": list(tokens)}, timeout=cfg.timeout)
    resp.raise_for_status()
    payload = resp.json()
    spans = []
    for item in payload["spans"]:
        start, end = int(item["start"]), int(item["end"])
        if not 0 <= start < end <= len(tokens):
            raise ValueError(f"external tagger returned out-of-range span {item}")
        spans.append(BiasSpan(start, end, str(item.get("category", CATEGORY_ENTITY)),
                              " ".join(tokens[start:end])))
    return spans


def identify_bias_tokens(post: Post, cfg: TaggerConfig) -> BiasTokenSet:
    """Collect the enabled bias-token categories for one post.

    Hashtags start with '#', numerals contain a digit, entities come from the
    external tagger when configured (rule fallback otherwise). Overlapping
    detections keep the highest-priority category.
    """
    tokens = post.tokens
    degraded = False
    candidates: list[BiasSpan] = []
    if cfg.entities:
        if cfg.endpoint is not None:
            try:
                external = _query_external_tagger(tokens, cfg)
                candidates.extend(s for s in external if s.category == CATEGORY_ENTITY)
            except (requests.RequestException, ValueError, KeyError):
                degraded = True
                candidates.extend(_rule_entity_spans(tokens))
        else:
            candidates.extend(_rule_entity_spans(tokens))
    if cfg.hashtags:
        candidates.extend(_rule_token_spans(tokens, _HASHTAG_RE, CATEGORY_HASHTAG, True))
    if cfg.mentions:
        candidates.extend(_rule_token_spans(tokens, _MENTION_RE, CATEGORY_MENTION, True))
    if cfg.numerals:
        numerals = [s for s in _rule_token_spans(tokens, _NUMERAL_RE, CATEGORY_NUMERAL, False)
                    if not tokens[s.start].startswith(("#", "@"))]
        candidates.extend(numerals)
    return BiasTokenSet(post_id=post.id, spans=_resolve_overlaps(candidates),
                        degraded=degraded)


def annotate_corpus(posts: Sequence[Post], cfg: TaggerConfig) -> dict[str, BiasTokenSet]:
    return {post.id: identify_bias_tokens(post, cfg) for post in posts}


def build_counterfactual_input(bias_set: BiasTokenSet) -> list[str]:
    """([CLS], u1, [SEP], u2, [SEP], ...); an empty set degrades to ([CLS], [SEP])."""
    tokens = [CLS]
    if not bias_set.spans:
        return tokens + [SEP]
    for span in bias_set.spans:
        tokens.extend(span.surface.split(" "))
        tokens.append(SEP)
    return tokens


def apply_masking(tokens: Sequence[str], bias_set: BiasTokenSet, p: float,
                  rng: random.Random) -> list[str]:
    """Independently replace each bias span with [MASK] tokens with probability p.

    One mask token per pre-token of the span; non-bias positions are never
    touched. Deterministic for a fixed generator state.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability {p} outside [0, 1]")
    out = list(tokens)
    for span in bias_set.spans:
        if span.end > len(out):
            raise ValueError(
                f"span [{span.start}, {span.end}) exceeds sequence length {len(out)}")
        if rng.random() < p:
            for i in range(span.start, span.end):
                out[i] = MASK
    return out
