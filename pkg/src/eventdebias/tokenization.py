"""Pre-tokenization and the word-level vocabulary used by the built-in encoder.

Pre-tokens are the unit on which bias spans and masking operate. The encoder's
own tokenizer maps pre-tokens to vocabulary ids; the built-in tiny encoder uses
a word-level vocabulary, so every pre-token occupies exactly one encoder
position. The mapping API still reports subword ranges per pre-token so that
span bookkeeping stays correct if a subword encoder is plugged in.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
MASK = "[MASK]"

SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

# Hashtags and @-mentions survive as single tokens; words keep interior
# digits/apostrophes ("don't", "covid19", "3.5"); everything else splits
# into single punctuation tokens.
_PRETOKEN_RE = re.compile(r"#\w+|@\w+|\w+(?:[.'’]\w+)*|[^\w\s]")


def pretokenize(text: str) -> list[str]:
    """Whitespace-plus-punctuation pre-tokenization."""
    return _PRETOKEN_RE.findall(text)


@dataclass
class Vocab:
    """Word-level vocabulary with the reserved special tokens at fixed ids."""

    itos: list[str]
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        for tok in SPECIAL_TOKENS:
            if tok not in self.stoi:
                raise ValueError(f"vocabulary is missing special token {tok}")

    @classmethod
    def build(cls, token_streams: Iterable[Sequence[str]], max_size: int = 30000,
              min_freq: int = 1) -> "Vocab":
        counts = Counter()
        for tokens in token_streams:
            counts.update(tokens)
        itos = list(SPECIAL_TOKENS)
        budget = max_size - len(itos)
        for tok, freq in counts.most_common():
            if budget <= 0:
                break
            if tok in SPECIAL_TOKENS or freq < min_freq:
                continue
            itos.append(tok)
            budget -= 1
        return cls(itos)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def cls_id(self) -> int:
        return self.stoi[CLS]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    @property
    def mask_id(self) -> int:
        return self.stoi[MASK]

    def encode(self, pretokens: Sequence[str], max_len: int,
               add_special_tokens: bool = True) -> tuple[list[int], list[bool], list[tuple[int, int]]]:
        """Map pre-tokens to ids, truncated/padded to ``max_len``.

        Returns (ids, attention_mask, token_ranges) where token_ranges[i] is the
        half-open range of encoder positions occupied by pre-token i (empty if
        it was truncated away). Word-level: each surviving pre-token covers
        exactly one position.
        """
        body_budget = max_len - 2 if add_special_tokens else max_len
        if body_budget < 0:
            raise ValueError(f"max_len={max_len} cannot hold the special tokens")
        kept = list(pretokens[:body_budget])

        ids: list[int] = []
        ranges: list[tuple[int, int]] = []
        if add_special_tokens:
            ids.append(self.cls_id)
        for tok in kept:
            ranges.append((len(ids), len(ids) + 1))
            ids.append(self.stoi.get(tok, self.unk_id))
        if add_special_tokens:
            ids.append(self.sep_id)
        for _ in range(len(kept), len(pretokens)):
            ranges.append((len(ids), len(ids)))  # truncated away

        mask = [True] * len(ids)
        while len(ids) < max_len:
            ids.append(self.pad_id)
            mask.append(False)
        return ids, mask, ranges

    def to_dict(self) -> dict:
        return {"itos": list(self.itos)}

    @classmethod
    def from_dict(cls, payload: dict) -> "Vocab":
        return cls(list(payload["itos"]))
