"""Batch construction: tokenize posts, apply masking augmentation, encode
counterfactual bias inputs, and build target tensors."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch

from .bias_tokens import BiasTokenSet, TaggerConfig, annotate_corpus, apply_masking, \
    build_counterfactual_input
from .corpus import MULTI_CLASS, Corpus, Post
from .tokenization import Vocab


@dataclass
class Batch:
    post_ids: list[str]
    main_ids: torch.Tensor
    main_mask: torch.Tensor
    domain_idx: torch.Tensor
    targets: torch.Tensor
    bias_ids: torch.Tensor | None = None
    bias_mask: torch.Tensor | None = None
    bias_len: torch.Tensor | None = None
    event_idx: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.post_ids)


class Collator:
    """Turns posts into model-ready tensors.

    Masking augmentation applies to the main-branch input only; the bias branch
    always sees the unmasked bias tokens, otherwise it could not model their
    direct effect.
    """

    def __init__(self, vocab: Vocab, max_len: int, label_space, domains: Sequence[str],
                 annotations: Mapping[str, BiasTokenSet] | None = None,
                 min_bias_len: int = 5):
        self.vocab = vocab
        self.max_len = max_len
        self.label_space = label_space
        self.domain_index = {name: i for i, name in enumerate(domains)}
        self.annotations = dict(annotations) if annotations is not None else {}
        self.min_bias_len = min_bias_len

    def annotation_for(self, post: Post) -> BiasTokenSet:
        ann = self.annotations.get(post.id)
        if ann is None:
            ann = annotate_corpus([post], TaggerConfig())[post.id]
            self.annotations[post.id] = ann
        return ann

    def _targets(self, posts: Sequence[Post]) -> torch.Tensor:
        if self.label_space.task_kind == MULTI_CLASS:
            return torch.tensor([next(iter(p.labels)) for p in posts], dtype=torch.long)
        multi_hot = torch.zeros(len(posts), len(self.label_space))
        for i, post in enumerate(posts):
            for l in post.labels:
                multi_hot[i, l] = 1.0
        return multi_hot

    def _encode_block(self, token_lists: Sequence[Sequence[str]], max_len: int,
                      add_special_tokens: bool) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        ids_rows, mask_rows, lens = [], [], []
        for tokens in token_lists:
            ids, mask, _ = self.vocab.encode(tokens, max_len, add_special_tokens)
            ids_rows.append(ids)
            mask_rows.append(mask)
            lens.append(sum(mask))
        return (torch.tensor(ids_rows, dtype=torch.long),
                torch.tensor(mask_rows, dtype=torch.bool),
                torch.tensor(lens, dtype=torch.long))

    def collate(self, posts: Sequence[Post], mask_prob: float = 0.0,
                rng: random.Random | None = None, with_bias: bool = True,
                event_index: Mapping[str, int] | None = None) -> Batch:
        if mask_prob > 0.0 and rng is None:
            raise ValueError("masking augmentation needs the caller's seeded generator")

        main_tokens = []
        bias_tokens = []
        for post in posts:
            ann = self.annotation_for(post)
            tokens = list(post.tokens)
            if mask_prob > 0.0:
                tokens = apply_masking(tokens, ann, mask_prob, rng)
            main_tokens.append(tokens)
            if with_bias:
                bias_tokens.append(build_counterfactual_input(ann))

        main_width = min(self.max_len, 2 + max(len(t) for t in main_tokens))
        main_ids, main_mask, _ = self._encode_block(main_tokens, main_width, True)

        try:
            domain_idx = torch.tensor([self.domain_index[p.domain] for p in posts],
                                      dtype=torch.long)
        except KeyError as e:
            raise KeyError(f"batch contains unknown domain {e.args[0]!r}") from None

        batch = Batch(post_ids=[p.id for p in posts], main_ids=main_ids,
                      main_mask=main_mask, domain_idx=domain_idx,
                      targets=self._targets(posts))
        if with_bias:
            width = min(self.max_len, max(self.min_bias_len,
                                          max(len(t) for t in bias_tokens)))
            batch.bias_ids, batch.bias_mask, batch.bias_len = self._encode_block(
                bias_tokens, width, False)
        if event_index is not None:
            batch.event_idx = torch.tensor([event_index[p.event_id] for p in posts],
                                           dtype=torch.long)
        return batch


def iter_batches(posts: Sequence[Post], batch_size: int,
                 rng: random.Random | None = None) -> list[list[Post]]:
    """Fixed-size chunks, shuffled when a generator is supplied."""
    order = list(range(len(posts)))
    if rng is not None:
        rng.shuffle(order)
    return [[posts[i] for i in order[start:start + batch_size]]
            for start in range(0, len(order), batch_size)]


def build_vocab(corpus: Corpus, max_size: int = 30000) -> Vocab:
    return Vocab.build((p.tokens for p in corpus.posts), max_size=max_size)
